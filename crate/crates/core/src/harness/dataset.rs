use std::path::Path;

use crate::data::{extract_stack, load_mask, load_volume, read_manifest, save_mask, save_volume, write_manifest};
use crate::data::{ManifestRecord, SliceStack, Split};
use crate::error::{Error, Result};
use crate::synth::{generate_volume, split_crosslines, SynthParams};
use crate::volume::{MaskVolume, Volume};

use super::config::DataConfig;

pub const MANIFEST: &str = "manifest.jsonl";

/// Sample address: volume index and crossline within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub volume: usize,
    pub crossline: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub names: Vec<String>,
    pub volumes: Vec<(Volume, MaskVolume)>,
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
}

pub fn volume_name(k: usize) -> String {
    format!("vol_{k:03}")
}

fn mask_name(name: &str) -> String {
    format!("{name}_mask")
}

impl Dataset {
    /// Builds the split over the concatenated crossline axis of `volumes`.
    pub fn from_volumes(names: Vec<String>, volumes: Vec<(Volume, MaskVolume)>, fractions: [f64; 3]) -> Result<Self> {
        if volumes.is_empty() {
            return Err(Error::invalid("dataset has no volumes"));
        }
        let dims = volumes[0].0.dims();
        if let Some((v, _)) = volumes.iter().find(|(v, m)| v.dims() != dims || m.dims() != dims) {
            return Err(Error::shape("dataset", &v.dims(), &dims));
        }
        let nx = dims[1];
        let [train, val, test] = split_crosslines(nx * volumes.len(), fractions)?;
        let refs = |r: std::ops::Range<usize>| {
            r.map(|g| SampleRef {
                volume: g / nx,
                crossline: g % nx,
            })
            .collect()
        };
        Ok(Dataset {
            names,
            volumes,
            train: refs(train),
            val: refs(val),
            test: refs(test),
        })
    }

    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        let volumes = (0..cfg.volumes)
            .map(|k| {
                generate_volume(&SynthParams {
                    seed: cfg.synth.seed.wrapping_add(k as u64),
                    ..cfg.synth.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::from_volumes((0..cfg.volumes).map(volume_name).collect(), volumes, cfg.fractions)
    }

    /// Generated in memory unless `cfg.dir` points at a `gen-data` directory.
    pub fn from_config(cfg: &DataConfig) -> Result<Self> {
        match &cfg.dir {
            Some(dir) => Dataset::load(dir),
            None => Dataset::generate(cfg),
        }
    }

    pub fn split(&self, split: Split) -> &[SampleRef] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn image_dims(&self) -> (usize, usize) {
        let [ni, _, nt] = self.volumes[0].0.dims();
        (nt, ni)
    }

    pub fn stack(&self, s: SampleRef, m: usize) -> Result<SliceStack> {
        let (v, mask) = &self.volumes[s.volume];
        let mut st = extract_stack(v, mask, s.crossline, m)?;
        st.meta.volume = s.volume;
        Ok(st)
    }

    pub fn records(&self) -> Vec<ManifestRecord> {
        Split::ALL
            .iter()
            .flat_map(|&split| {
                self.split(split).iter().map(move |s| ManifestRecord {
                    volume: self.names[s.volume].clone(),
                    crossline: s.crossline,
                    split,
                })
            })
            .collect()
    }

    /// Writes every volume, mask and the sample manifest under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, (v, m)) in self.names.iter().zip(&self.volumes) {
            save_volume(&dir.join(name), v)?;
            save_mask(&dir.join(mask_name(name)), m)?;
        }
        write_manifest(&dir.join(MANIFEST), &self.records())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let records = read_manifest(&dir.join(MANIFEST))?;
        if records.is_empty() {
            return Err(Error::invalid(format!(
                "{} lists no samples",
                dir.join(MANIFEST).display()
            )));
        }
        let mut names: Vec<String> = Vec::new();
        let mut out = Dataset {
            names: Vec::new(),
            volumes: Vec::new(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for r in records {
            let volume = match names.iter().position(|n| *n == r.volume) {
                Some(k) => k,
                None => {
                    let v = load_volume(&dir.join(&r.volume))?;
                    let m = load_mask(&dir.join(mask_name(&r.volume)))?;
                    if v.dims() != m.dims() {
                        return Err(Error::shape("dataset", &v.dims(), &m.dims()));
                    }
                    names.push(r.volume.clone());
                    out.volumes.push((v, m));
                    names.len() - 1
                }
            };
            if r.crossline >= out.volumes[volume].0.dims()[1] {
                return Err(Error::invalid(format!(
                    "{}: crossline {} out of range",
                    r.volume, r.crossline
                )));
            }
            let s = SampleRef {
                volume,
                crossline: r.crossline,
            };
            match r.split {
                Split::Train => out.train.push(s),
                Split::Val => out.val.push(s),
                Split::Test => out.test.push(s),
            }
        }
        out.names = names;
        Ok(out)
    }
}

//! `<name>.json` header plus `<name>.raw` little-endian payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, Volume};

pub const ORDER: &str = "IXT";
pub const LITTLE: &str = "little";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub dtype: String,
    pub order: String,
    pub endianness: String,
}

impl VolumeHeader {
    fn new(dims: [usize; 3], dtype: &str) -> Self {
        VolumeHeader {
            dims,
            dtype: dtype.into(),
            order: ORDER.into(),
            endianness: LITTLE.into(),
        }
    }

    fn elem_size(&self) -> Result<u64> {
        match self.dtype.as_str() {
            "f32" => Ok(4),
            "u8" => Ok(1),
            other => Err(Error::UnknownDtype(other.into())),
        }
    }
}

/// Either kind of grid read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeFile {
    Amplitude(Volume),
    Mask(MaskVolume),
}

/// Header path for `path` (`.json` appended unless already present).
pub fn header_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        path.to_path_buf()
    } else {
        path.with_extension("json")
    }
}

pub fn raw_path(path: &Path) -> PathBuf {
    header_path(path).with_extension("raw")
}

fn write_pair(path: &Path, header: &VolumeHeader, payload: &[u8]) -> Result<()> {
    let hp = header_path(path);
    if let Some(dir) = hp.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&hp, serde_json::to_string_pretty(header)?)?;
    fs::write(raw_path(path), payload)?;
    Ok(())
}

pub fn save_volume(path: &Path, volume: &Volume) -> Result<()> {
    let payload: Vec<u8> = volume.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(path, &VolumeHeader::new(volume.dims(), "f32"), &payload)
}

pub fn save_mask(path: &Path, mask: &MaskVolume) -> Result<()> {
    write_pair(path, &VolumeHeader::new(mask.dims(), "u8"), mask.labels())
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let header: VolumeHeader = serde_json::from_str(&fs::read_to_string(header_path(path))?)?;
    header.elem_size()?;
    if header.order != ORDER {
        return Err(Error::invalid(format!("unsupported axis order {:?}", header.order)));
    }
    if header.endianness != LITTLE {
        return Err(Error::invalid(format!(
            "unsupported endianness {:?}",
            header.endianness
        )));
    }
    Ok(header)
}

pub fn load(path: &Path) -> Result<VolumeFile> {
    let header = read_header(path)?;
    let rp = raw_path(path);
    let payload = fs::read(&rp)?;
    let expected = header.dims.iter().product::<usize>() as u64 * header.elem_size()?;
    if payload.len() as u64 != expected {
        return Err(Error::PayloadSize {
            path: rp,
            expected,
            actual: payload.len() as u64,
        });
    }
    match header.dtype.as_str() {
        "f32" => {
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(VolumeFile::Amplitude(Volume::new(header.dims, data)?))
        }
        _ => Ok(VolumeFile::Mask(MaskVolume::new(header.dims, payload)?)),
    }
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    match load(path)? {
        VolumeFile::Amplitude(v) => Ok(v),
        VolumeFile::Mask(_) => Err(Error::invalid(format!(
            "{} holds a mask, expected f32 amplitudes",
            path.display()
        ))),
    }
}

pub fn load_mask(path: &Path) -> Result<MaskVolume> {
    match load(path)? {
        VolumeFile::Mask(m) => Ok(m),
        VolumeFile::Amplitude(_) => Err(Error::invalid(format!(
            "{} holds amplitudes, expected a u8 mask",
            path.display()
        ))),
    }
}

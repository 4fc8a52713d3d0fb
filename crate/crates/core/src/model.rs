//! Encoder plus decoder with role-based freezing and a checkpoint format.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()
    }

    /// Names of structural fields that differ from `other`. The balance
    /// factor is a forward-time scalar and is not compared.
    pub fn mismatches(&self, other: &ModelConfig) -> Vec<String> {
        let (a, b) = (&self.encoder, &other.encoder);
        let (da, db) = (&self.decoder, &other.decoder);
        let pairs = [
            ("image_size", a.image_size, b.image_size),
            ("patch_size", a.patch_size, b.patch_size),
            ("embed_dim", a.embed_dim, b.embed_dim),
            ("depth", a.depth, b.depth),
            ("heads", a.heads, b.heads),
            ("mlp_ratio", a.mlp_ratio, b.mlp_ratio),
            ("adapter_dim", a.adapter_dim, b.adapter_dim),
            ("input_channels", a.input_channels, b.input_channels),
            ("decoder.depth", da.depth, db.depth),
            ("decoder.heads", da.heads, db.heads),
            ("decoder.mlp_dim", da.mlp_dim, db.mlp_dim),
            ("decoder.head_channels", da.head_channels, db.head_channels),
        ];
        pairs
            .iter()
            .filter(|(_, x, y)| x != y)
            .map(|(n, x, y)| format!("{n} ({x} vs {y})"))
            .collect()
    }
}

/// What a parameter is, which decides whether a mode trains it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Backbone,
    Adapter,
    DecoderBlock,
    ConvBase,
    ConvDelta,
    OutputToken,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Backbone, decoder blocks, conv bases and token; no adapters, no deltas.
    Pretext,
    /// Adapters, conv deltas and the output token only.
    #[default]
    Finetune,
    /// Everything trainable.
    Full,
    /// Nothing trainable.
    Inference,
}

impl Mode {
    pub fn trains(self, role: Role) -> bool {
        match self {
            Mode::Pretext => !matches!(role, Role::Adapter | Role::ConvDelta),
            Mode::Finetune => matches!(role, Role::Adapter | Role::ConvDelta | Role::OutputToken),
            Mode::Full => true,
            Mode::Inference => false,
        }
    }

    /// Whether the forward pass includes adapters and deltas.
    pub fn adapted(self) -> bool {
        !matches!(self, Mode::Pretext)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub trainable: usize,
    pub frozen: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    roles: Vec<Role>,
    mode: Mode,
}

impl Model {
    /// Fresh random model in `Mode::Full`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let e = &config.encoder;
        let decoder = Decoder::new(
            config.decoder.clone(),
            e.embed_dim,
            e.patch_size,
            e.grid(),
            &mut store,
            &mut rng,
        )?;

        let mut roles = vec![Role::Backbone; store.len()];
        let mut assign = |ids: Vec<ParamId>, role: Role| {
            for id in ids {
                roles[id.index()] = role;
            }
        };
        assign(encoder.adapter_ids(), Role::Adapter);
        assign(decoder.attention_ids(), Role::DecoderBlock);
        assign(decoder.base_ids(), Role::ConvBase);
        assign(decoder.delta_ids(), Role::ConvDelta);
        assign(vec![decoder.output_token], Role::OutputToken);

        let mut model = Model {
            config,
            store,
            encoder,
            decoder,
            roles,
            mode: Mode::Full,
        };
        model.set_mode(Mode::Full);
        Ok(model)
    }

    pub fn role(&self, id: ParamId) -> Role {
        self.roles[id.index()]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.set_trainable(id, mode.trains(self.roles[id.index()]));
        }
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<ParamId> {
        self.store.ids().filter(|id| self.roles[id.index()] == role).collect()
    }

    pub fn delta_ids(&self) -> Vec<ParamId> {
        self.decoder.delta_ids()
    }

    pub fn count_params(&self) -> ParamCounts {
        let (trainable, frozen) = self.store.counts();
        ParamCounts {
            trainable,
            frozen,
            fraction: trainable as f64 / (trainable + frozen).max(1) as f64,
        }
    }

    /// Logits `[B, 1, H, W]` for stacks `x: [B, M, H, W]`. `adapted`
    /// selects adapters and `P + ΔP`; otherwise the plain backbone and `P`.
    pub fn forward_with(&self, g: &mut Graph, x: Var, adapted: bool) -> Result<Var> {
        let e = self.encoder.forward(g, &self.store, x, adapted)?;
        self.decoder.forward(g, &self.store, e, adapted)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_with(g, x, self.mode.adapted())
    }

    /// Inference without recording gradients for parameters.
    pub fn logits(&self, x: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    /// Hash of every frozen tensor's name and bit pattern.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (_, name, t) in self.store.iter().filter(|(_, _, t)| !t.trainable()) {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Names of frozen tensors whose values differ from `reference`.
    pub fn changed_frozen(&self, reference: &ParamStore) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, _, t)| !t.trainable())
            .filter(|(id, _, t)| {
                let r = reference.get(*id);
                r.data().iter().zip(t.data()).any(|(a, b)| a.to_bits() != b.to_bits())
            })
            .map(|(_, n, _)| n.to_string())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (id, name, t) in self.store.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                trainable: t.trainable(),
                role: self.role(id),
                offset: payload.len() as u64,
            });
            payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            mode: self.mode,
            tensors,
        };
        let mp = manifest_path(path);
        if let Some(dir) = mp.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(&mp, serde_json::to_string_pretty(&manifest)?)?;
        fs::write(payload_path(path), payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
        let bytes = fs::read(payload_path(path))?;
        let mut model = Model::new(manifest.config.clone(), 0)?;
        if manifest.tensors.len() != model.store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} tensors in checkpoint, model has {}",
                manifest.tensors.len(),
                model.store.len()
            )));
        }
        for entry in &manifest.tensors {
            let id = model
                .store
                .id(&entry.name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("unknown tensor {}", entry.name)))?;
            let t = model.store.get_mut(id);
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::CheckpointMismatch(format!(
                    "{}: shape {:?} vs {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            let start = entry.offset as usize;
            let end = start + 4 * t.numel();
            let chunk = bytes.get(start..end).ok_or_else(|| Error::PayloadSize {
                path: payload_path(path),
                expected: end as u64,
                actual: bytes.len() as u64,
            })?;
            for (dst, b) in t.data_mut().iter_mut().zip(chunk.chunks_exact(4)) {
                *dst = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        }
        model.set_mode(manifest.mode);
        Ok(model)
    }

    /// Loads a checkpoint and rejects it unless its structure matches `expected`.
    pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let mut model = Model::load(path)?;
        let diff = model.config.mismatches(expected);
        if !diff.is_empty() {
            return Err(Error::CheckpointMismatch(format!(
                "mismatched fields: {}",
                diff.join(", ")
            )));
        }
        model.config.encoder.balance = expected.encoder.balance;
        model.encoder.config.balance = expected.encoder.balance;
        Ok(model)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub role: Role,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub mode: Mode,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        path.to_path_buf()
    } else {
        path.with_extension("json")
    }
}

pub fn payload_path(path: &Path) -> PathBuf {
    manifest_path(path).with_extension("bin")
}

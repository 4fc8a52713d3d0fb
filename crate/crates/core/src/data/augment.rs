//! Geometric augmentations applied rigidly to every channel of a stack and
//! to its target.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SliceStack;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub p_hflip: f64,
    /// Maximum absolute rotation, degrees.
    pub rotate_range: f64,
    pub scale_range: (f64, f64),
    /// Maximum absolute shift as a fraction of height / width.
    pub translate_range: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            p_hflip: 0.5,
            rotate_range: 10.0,
            scale_range: (0.9, 1.1),
            translate_range: 0.1,
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_hflip) {
            return Err(Error::invalid(format!("p_hflip {} outside [0, 1]", self.p_hflip)));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::invalid(format!(
                "scale range {:?} must be positive",
                self.scale_range
            )));
        }
        if !(self.rotate_range >= 0.0 && self.translate_range >= 0.0) {
            return Err(Error::invalid("rotation and translation ranges must be non-negative"));
        }
        Ok(())
    }
}

/// Which augmentations run during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentSet {
    #[default]
    None,
    Hflip,
    Affine,
    All,
}

impl AugmentSet {
    pub const ALL: [AugmentSet; 4] = [AugmentSet::None, AugmentSet::Hflip, AugmentSet::Affine, AugmentSet::All];

    pub fn name(self) -> &'static str {
        match self {
            AugmentSet::None => "none",
            AugmentSet::Hflip => "hflip",
            AugmentSet::Affine => "affine",
            AugmentSet::All => "all",
        }
    }

    fn hflip(self) -> bool {
        matches!(self, AugmentSet::Hflip | AugmentSet::All)
    }

    fn affine(self) -> bool {
        matches!(self, AugmentSet::Affine | AugmentSet::All)
    }
}

/// Mirrors every channel and the target along the width axis.
pub fn hflip(sample: &SliceStack) -> SliceStack {
    let w = sample.width;
    let flip_rows = |row: &[f32]| row.iter().rev().copied().collect::<Vec<_>>();
    SliceStack {
        channels: sample.channels.chunks(w).flat_map(flip_rows).collect(),
        target: sample
            .target
            .chunks(w)
            .flat_map(|row| row.iter().rev().copied().collect::<Vec<_>>())
            .collect(),
        ..sample.clone()
    }
}

/// Similarity transform about the image centre: rotate, scale, then shift
/// by `(tx, ty)` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub angle_deg: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        angle_deg: 0.0,
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn draw<R: Rng + ?Sized>(params: &AugmentParams, height: usize, width: usize, rng: &mut R) -> Affine {
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let angle_deg = sym(params.rotate_range);
        let tx = sym(params.translate_range) * width as f64;
        let ty = sym(params.translate_range) * height as f64;
        let (lo, hi) = params.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Affine {
            angle_deg,
            scale,
            tx,
            ty,
        }
    }

    /// Source coordinate `(row, col)` sampled for destination `(row, col)`.
    fn source(&self, r: f64, c: f64, cy: f64, cx: f64) -> (f64, f64) {
        let (s, co) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (c - cx - self.tx, r - cy - self.ty);
        // inverse rotation then inverse scale
        let sx = (co * dx + s * dy) / self.scale;
        let sy = (-s * dx + co * dy) / self.scale;
        (sy + cy, sx + cx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Resamples one `height x width` plane. Out-of-frame samples read 0.
pub fn warp_plane(img: &[f32], height: usize, width: usize, t: &Affine, interp: Interp) -> Vec<f32> {
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let at = |r: isize, c: isize| -> f32 {
        if r < 0 || c < 0 || r >= height as isize || c >= width as isize {
            0.0
        } else {
            img[r as usize * width + c as usize]
        }
    };
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (sy, sx) = t.source(r as f64, c as f64, cy, cx);
            let v = match interp {
                Interp::Nearest => at((sy + 0.5).floor() as isize, (sx + 0.5).floor() as isize),
                Interp::Bilinear => {
                    let (y0, x0) = (sy.floor(), sx.floor());
                    let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
                    let (y0, x0) = (y0 as isize, x0 as isize);
                    let mut acc = 0.0f32;
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                            let w = wy * wx;
                            if w != 0.0 {
                                acc += w * at(y0 + dy, x0 + dx);
                            }
                        }
                    }
                    acc
                }
            };
            out.push(v);
        }
    }
    out
}

/// Applies `t` to all channels (bilinear) and the target (nearest, then
/// re-binarized at 0.5).
pub fn apply_affine(sample: &SliceStack, t: &Affine) -> SliceStack {
    let (h, w) = (sample.height, sample.width);
    let channels = sample
        .channels
        .chunks(h * w)
        .flat_map(|plane| warp_plane(plane, h, w, t, Interp::Bilinear))
        .collect();
    let target_f: Vec<f32> = sample.target.iter().map(|&v| v as f32).collect();
    let target = warp_plane(&target_f, h, w, t, Interp::Nearest)
        .into_iter()
        .map(|v| (v >= 0.5) as u8)
        .collect();
    SliceStack {
        channels,
        target,
        ..sample.clone()
    }
}

pub fn random_affine<R: Rng + ?Sized>(sample: &SliceStack, params: &AugmentParams, rng: &mut R) -> SliceStack {
    let t = Affine::draw(params, sample.height, sample.width, rng);
    apply_affine(sample, &t)
}

/// Training-time augmentation for the selected set.
pub fn augment<R: Rng + ?Sized>(
    sample: &SliceStack,
    set: AugmentSet,
    params: &AugmentParams,
    rng: &mut R,
) -> SliceStack {
    let mut out = sample.clone();
    if set.hflip() && rng.random_bool(params.p_hflip) {
        out = hflip(&out);
    }
    if set.affine() {
        out = random_affine(&out, params, rng);
    }
    out
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, Volume};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackMeta {
    pub volume: usize,
    pub crossline: usize,
    pub m: usize,
}

/// One 2.5D sample: `m` neighbouring crossline sections stacked as channels
/// and the fault mask of the centre section.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    /// `m x height x width`, ascending crossline order.
    pub channels: Vec<f32>,
    /// `height x width`, values in {0, 1}.
    pub target: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub meta: StackMeta,
}

impl SliceStack {
    pub fn m(&self) -> usize {
        self.meta.m
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        &self.channels[k * self.plane()..(k + 1) * self.plane()]
    }

    pub fn center(&self) -> &[f32] {
        self.channel((self.m() - 1) / 2)
    }
}

/// Crossline indices feeding a stack centred on `i`, clamped to `[0, nx)`.
pub fn channel_indices(i: usize, m: usize, nx: usize) -> Vec<usize> {
    let half = (m as isize - 1) / 2;
    (-half..=half)
        .map(|o| (i as isize + o).clamp(0, nx as isize - 1) as usize)
        .collect()
}

pub fn extract_stack(volume: &Volume, mask: &MaskVolume, i: usize, m: usize) -> Result<SliceStack> {
    if m == 0 || m.is_multiple_of(2) {
        return Err(Error::invalid(format!("slice count M must be odd, got {m}")));
    }
    if volume.dims() != mask.dims() {
        return Err(Error::shape("extract_stack", &volume.dims(), &mask.dims()));
    }
    let [ni, nx, nt] = volume.dims();
    if i >= nx {
        return Err(Error::invalid(format!("crossline {i} out of range 0..{nx}")));
    }
    let channels = channel_indices(i, m, nx)
        .into_iter()
        .flat_map(|x| volume.crossline(x))
        .collect();
    Ok(SliceStack {
        channels,
        target: mask.crossline(i),
        height: nt,
        width: ni,
        meta: StackMeta {
            volume: 0,
            crossline: i,
            m,
        },
    })
}

//! 3D seismic grids indexed `(inline, crossline, depth)`.
//!
//! Crossline sections are the 2D images the model sees: rows run along depth
//! and columns along inline, so an image is `T x I` (`H x W`).

use crate::error::{Error, Result};

/// Amplitude grid, row-major over `(I, X, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
}

/// Binary fault labels aligned with a [`Volume`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVolume {
    dims: [usize; 3],
    labels: Vec<u8>,
}

fn check_len(dims: [usize; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::invalid(format!("zero-sized volume dims {dims:?}")));
    }
    let n: usize = dims.iter().product();
    if n != len {
        return Err(Error::invalid(format!(
            "volume dims {dims:?} need {n} values, got {len}"
        )));
    }
    Ok(())
}

#[inline]
fn offset(dims: [usize; 3], i: usize, x: usize, t: usize) -> usize {
    (i * dims[1] + x) * dims[2] + t
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        check_len(dims, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite amplitude at offset {pos}")));
        }
        Ok(Volume { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, i: usize, x: usize, t: usize) -> f32 {
        self.data[offset(self.dims, i, x, t)]
    }

    pub fn set(&mut self, i: usize, x: usize, t: usize, v: f32) {
        let o = offset(self.dims, i, x, t);
        self.data[o] = v;
    }

    /// Crossline section `x` as a `T x I` image.
    pub fn crossline(&self, x: usize) -> Vec<f32> {
        let [ni, _, nt] = self.dims;
        let mut img = vec![0.0; nt * ni];
        for i in 0..ni {
            let base = offset(self.dims, i, x, 0);
            for t in 0..nt {
                img[t * ni + i] = self.data[base + t];
            }
        }
        img
    }

    /// Writes a `T x I` image back into crossline `x`.
    pub fn set_crossline(&mut self, x: usize, img: &[f32]) {
        let [ni, _, nt] = self.dims;
        assert_eq!(img.len(), ni * nt, "crossline image size");
        for i in 0..ni {
            let base = offset(self.dims, i, x, 0);
            for t in 0..nt {
                self.data[base + t] = img[t * ni + i];
            }
        }
    }

    /// Mirror along the inline axis.
    pub fn flip_inline(&self) -> Volume {
        let [ni, nx, nt] = self.dims;
        let mut out = Volume::zeros(self.dims);
        for i in 0..ni {
            for x in 0..nx {
                let src = offset(self.dims, ni - 1 - i, x, 0);
                let dst = offset(self.dims, i, x, 0);
                out.data[dst..dst + nt].copy_from_slice(&self.data[src..src + nt]);
            }
        }
        out
    }
}

impl MaskVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        check_len(dims, labels.len())?;
        if let Some((offset, &value)) = labels.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NonBinaryMask { value, offset });
        }
        Ok(MaskVolume { dims, labels })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        MaskVolume {
            dims,
            labels: vec![0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, i: usize, x: usize, t: usize) -> u8 {
        self.labels[offset(self.dims, i, x, t)]
    }

    pub(crate) fn mark(&mut self, i: usize, x: usize, t: usize) {
        let o = offset(self.dims, i, x, t);
        self.labels[o] = 1;
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }

    /// Crossline section `x` as a `T x I` image of 0/1 values.
    pub fn crossline(&self, x: usize) -> Vec<u8> {
        let [ni, _, nt] = self.dims;
        let mut img = vec![0; nt * ni];
        for i in 0..ni {
            let base = offset(self.dims, i, x, 0);
            for t in 0..nt {
                img[t * ni + i] = self.labels[base + t];
            }
        }
        img
    }

    pub fn flip_inline(&self) -> MaskVolume {
        let [ni, nx, nt] = self.dims;
        let mut out = MaskVolume::zeros(self.dims);
        for i in 0..ni {
            for x in 0..nx {
                let src = offset(self.dims, ni - 1 - i, x, 0);
                let dst = offset(self.dims, i, x, 0);
                out.labels[dst..dst + nt].copy_from_slice(&self.labels[src..src + nt]);
            }
        }
        out
    }
}

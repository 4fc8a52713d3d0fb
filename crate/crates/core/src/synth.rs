//! Synthetic faulted seismic volumes with exact fault labels.
//!
//! Pipeline: layered reflectivity, sinusoidal folding, planar faults with
//! uniform vertical throw, Ricker convolution along depth, normalization to
//! zero mean and unit variance, then additive Gaussian noise.

use std::f64::consts::PI;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, Volume};

pub const MIN_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    /// Voxel counts `(inline, crossline, depth)`.
    pub dims: [usize; 3],
    pub n_layers: usize,
    pub n_faults: usize,
    /// Fault dip from horizontal, degrees.
    pub dip_range: (f64, f64),
    /// Vertical throw, voxels.
    pub throw_range: (f64, f64),
    /// Peak vertical fold displacement, voxels.
    pub fold_amplitude: f64,
    /// Ricker peak frequency, cycles per voxel.
    pub wavelet_peak_frequency: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            dims: [64, 64, 64],
            n_layers: 28,
            n_faults: 2,
            dip_range: (65.0, 85.0),
            throw_range: (3.0, 7.0),
            fold_amplitude: 4.0,
            wavelet_peak_frequency: 0.12,
            noise_sigma: 0.2,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < MIN_DIM) {
            return Err(Error::invalid(format!(
                "volume dims {:?} must each be at least {MIN_DIM}",
                self.dims
            )));
        }
        if self.n_faults > 0 && (self.throw_range.0 < 1.0 || self.throw_range.1 < self.throw_range.0) {
            return Err(Error::invalid(format!(
                "throw range {:?} must be an interval with lower bound >= 1",
                self.throw_range
            )));
        }
        if self.dip_range.1 < self.dip_range.0 || self.dip_range.0 <= 0.0 || self.dip_range.1 > 90.0 {
            return Err(Error::invalid(format!(
                "dip range {:?} must lie in (0, 90]",
                self.dip_range
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.fold_amplitude >= 0.0) {
            return Err(Error::invalid("noise_sigma and fold_amplitude must be non-negative"));
        }
        if !(self.wavelet_peak_frequency > 0.0 && self.wavelet_peak_frequency <= 0.5) {
            return Err(Error::invalid("wavelet peak frequency must lie in (0, 0.5]"));
        }
        Ok(())
    }
}

/// Planar fault in voxel coordinates `(i, x, t)`. Voxels on the positive
/// side of the plane are shifted down by `throw`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultPlane {
    pub point: [f64; 3],
    /// Unit normal.
    pub normal: [f64; 3],
    pub throw: f64,
}

impl FaultPlane {
    /// Plane through `point` with the given strike azimuth of its normal
    /// (radians, measured from the inline axis) and dip from horizontal.
    pub fn from_angles(point: [f64; 3], azimuth: f64, dip_deg: f64, throw: f64) -> Self {
        let dip = dip_deg.to_radians();
        FaultPlane {
            point,
            normal: [dip.sin() * azimuth.cos(), dip.sin() * azimuth.sin(), dip.cos()],
            throw,
        }
    }

    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|k| self.normal[k] * (p[k] - self.point[k])).sum()
    }
}

/// Zero-phase Ricker wavelet sampled on `[-half, half]`.
pub fn ricker(peak_frequency: f64, half: usize) -> Vec<f64> {
    (0..=2 * half)
        .map(|k| {
            let tau = k as f64 - half as f64;
            let a = (PI * peak_frequency * tau).powi(2);
            (1.0 - 2.0 * a) * (-a).exp()
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Draws fault planes whose normals lie within 40 degrees of the inline
/// axis, so faults cut across crossline sections.
pub fn draw_faults(params: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<FaultPlane> {
    let [ni, nx, nt] = params.dims;
    (0..params.n_faults)
        .map(|_| {
            let point = [
                rng.random_range(0.25..0.75) * ni as f64,
                rng.random_range(0.25..0.75) * nx as f64,
                0.5 * nt as f64,
            ];
            let mut azimuth = rng.random_range(-40f64..40.0).to_radians();
            if rng.random_bool(0.5) {
                azimuth += PI;
            }
            let dip = uniform(rng, params.dip_range);
            let throw = uniform(rng, params.throw_range);
            FaultPlane::from_angles(point, azimuth, dip, throw)
        })
        .collect()
}

/// Renders a volume for explicit fault planes. `params.n_faults` is ignored.
pub fn render(params: &SynthParams, faults: &[FaultPlane]) -> Result<(Volume, MaskVolume)> {
    params.validate()?;
    let [ni, nx, nt] = params.dims;
    // Stream 1 is reserved for the fault draw in `generate_volume`.
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(2);

    // Reflectivity series on an extended depth axis.
    let max_shift: f64 = params.fold_amplitude + faults.iter().map(|f| f.throw.abs()).sum::<f64>();
    let pad = max_shift.ceil() as usize + 2;
    let len = nt + 2 * pad;
    let mut refl = vec![0.0f64; len];
    for _ in 0..params.n_layers {
        let k = rng.random_range(0..len);
        refl[k] = rng.random_range(-1.0..1.0);
    }
    let sample = |z: f64| -> f64 {
        let z = (z + pad as f64).clamp(0.0, (len - 1) as f64);
        let k = (z.floor() as usize).min(len - 2);
        let f = z - k as f64;
        refl[k] * (1.0 - f) + refl[k + 1] * f
    };

    let (li, lx) = (
        rng.random_range(0.6..1.4) * ni as f64,
        rng.random_range(0.6..1.4) * nx as f64,
    );
    let (pi, px) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let fold = |i: usize, x: usize| -> f64 {
        params.fold_amplitude * (2.0 * PI * i as f64 / li + pi).sin() * (2.0 * PI * x as f64 / lx + px).sin()
    };

    let mut mask = MaskVolume::zeros(params.dims);
    let mut amp = vec![0.0f64; ni * nx * nt];
    for i in 0..ni {
        for x in 0..nx {
            let base = (i * nx + x) * nt;
            let shift = fold(i, x);
            for t in 0..nt {
                let p = [i as f64, x as f64, t as f64];
                let mut z = t as f64 - shift;
                for f in faults {
                    let d = f.signed_distance(p);
                    if d > 0.0 {
                        z -= f.throw;
                    }
                    if d.abs() < 1.0 {
                        mask.mark(i, x, t);
                    }
                }
                amp[base + t] = sample(z);
            }
        }
    }

    // Ricker convolution along depth, same-size output.
    let half = (1.5 / params.wavelet_peak_frequency).ceil() as usize;
    let wavelet = ricker(params.wavelet_peak_frequency, half);
    let mut trace = vec![0.0; nt];
    for tr in amp.chunks_mut(nt) {
        for (t, out) in trace.iter_mut().enumerate() {
            *out = wavelet
                .iter()
                .enumerate()
                .filter_map(|(k, w)| {
                    let s = t as isize + half as isize - k as isize;
                    (s >= 0 && (s as usize) < nt).then(|| w * tr[s as usize])
                })
                .sum();
        }
        tr.copy_from_slice(&trace);
    }

    let n = amp.len() as f64;
    let mean = amp.iter().sum::<f64>() / n;
    let var = amp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    let noise = Normal::new(0.0, params.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let data: Vec<f32> = amp
        .iter()
        .map(|v| {
            let clean = (v - mean) / std;
            let eps = if params.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (clean + eps) as f32
        })
        .collect();
    Ok((Volume::new(params.dims, data)?, mask))
}

/// Deterministic volume and fault mask for `params`.
pub fn generate_volume(params: &SynthParams) -> Result<(Volume, MaskVolume)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(1);
    let faults = draw_faults(params, &mut rng);
    render(params, &faults)
}

/// Contiguous `[train, val, test]` partition of `n` crosslines.
pub fn split_crosslines(n: usize, fractions: [f64; 3]) -> Result<[Range<usize>; 3]> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let b1 = (n as f64 * fractions[0]).round() as usize;
    let b2 = ((n as f64 * (fractions[0] + fractions[1])).round() as usize).min(n);
    let ranges = [0..b1, b1..b2, b2..n];
    if let Some(k) = ranges.iter().position(|r| r.is_empty()) {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} leave the {} range of {n} crosslines empty",
            ["train", "val", "test"][k]
        )));
    }
    Ok(ranges)
}

/// Crossline split of a volume/mask pair.
pub fn split_dataset(volume: &Volume, mask: &MaskVolume, fractions: [f64; 3]) -> Result<[Range<usize>; 3]> {
    if volume.dims() != mask.dims() {
        return Err(Error::shape("split_dataset", &volume.dims(), &mask.dims()));
    }
    split_crosslines(volume.dims()[1], fractions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(dims: [usize; 3]) -> SynthParams {
        SynthParams {
            dims,
            noise_sigma: 0.0,
            fold_amplitude: 0.0,
            n_faults: 0,
            ..Default::default()
        }
    }

    #[test]
    fn no_faults_gives_empty_mask() {
        let (_, mask) = generate_volume(&SynthParams {
            n_faults: 0,
            dims: [16, 16, 16],
            ..Default::default()
        })
        .unwrap();
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let p = SynthParams {
            dims: [24, 20, 32],
            seed: 11,
            ..Default::default()
        };
        let a = generate_volume(&p).unwrap();
        let b = generate_volume(&p).unwrap();
        assert_eq!(a, b);
        let c = generate_volume(&SynthParams { seed: 12, ..p }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn vertical_plane_mask_count_by_exhaustive_scan() {
        let p = quiet([32, 32, 32]);
        let plane = FaultPlane {
            point: [16.0, 16.0, 16.0],
            normal: [0.0, 1.0, 0.0],
            throw: 2.0,
        };
        let (_, mask) = render(&p, &[plane]).unwrap();
        // independent scan: voxel centres strictly closer than one voxel to x = 16
        let mut expected = 0;
        for i in 0..32 {
            for x in 0..32 {
                for t in 0..32 {
                    let d = (x as f64 - 16.0).abs();
                    if d < 1.0 {
                        expected += 1;
                        assert_eq!(mask.get(i, x, t), 1);
                    }
                }
            }
        }
        assert_eq!(expected, 32 * 32);
        assert_eq!(mask.count(), 32 * 32);
    }

    #[test]
    fn throw_shows_up_as_cross_correlation_lag() {
        let p = SynthParams {
            n_layers: 20,
            ..quiet([32, 16, 96])
        };
        for throw in [2.0, 5.0] {
            let plane = FaultPlane::from_angles([16.0, 8.0, 48.0], 0.0, 90.0, throw);
            let (vol, _) = render(&p, &[plane]).unwrap();
            let left: Vec<f32> = (0..96).map(|t| vol.get(12, 8, t)).collect();
            let right: Vec<f32> = (0..96).map(|t| vol.get(20, 8, t)).collect();
            let best = (-10i32..=10)
                .max_by(|&a, &b| xcorr(&left, &right, a).total_cmp(&xcorr(&left, &right, b)))
                .unwrap();
            assert!((best as f64 - throw).abs() <= 1.0, "lag {best} vs throw {throw}");
        }
    }

    fn xcorr(a: &[f32], b: &[f32], lag: i32) -> f64 {
        (0..a.len() as i32)
            .filter_map(|t| {
                let s = t + lag;
                (s >= 0 && (s as usize) < b.len()).then(|| a[t as usize] as f64 * b[s as usize] as f64)
            })
            .sum()
    }

    #[test]
    fn normalized_before_noise() {
        let (vol, _) = generate_volume(&SynthParams {
            noise_sigma: 0.0,
            dims: [32, 32, 32],
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let n = vol.data().len() as f64;
        let mean = vol.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = vol.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-3, "{mean}");
        assert!((var - 1.0).abs() < 1e-2, "{var}");
    }

    #[test]
    fn degenerate_dims_rejected() {
        let err = generate_volume(&SynthParams {
            dims: [8, 64, 64],
            ..Default::default()
        });
        assert!(err.is_err());
        let err = generate_volume(&SynthParams {
            throw_range: (0.5, 2.0),
            ..Default::default()
        });
        assert!(err.is_err());
    }

    #[test]
    fn split_examples() {
        assert_eq!(
            split_crosslines(100, [0.5, 0.11, 0.39]).unwrap(),
            [0..50, 50..61, 61..100]
        );
        assert!(split_crosslines(100, [1.0, 0.0, 0.0]).is_err());
        let f = [900.0 / 1803.0, 200.0 / 1803.0, 703.0 / 1803.0];
        assert_eq!(split_crosslines(1803, f).unwrap(), [0..900, 900..1100, 1100..1803]);
    }
}

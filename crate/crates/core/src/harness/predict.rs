use std::ops::Range;

use crate::data::extract_stack;
use crate::error::{Error, Result};
use crate::metrics::{default_grid, evaluate, EvalReport, Prediction};
use crate::model::Model;
use crate::volume::{MaskVolume, Volume};

use super::train::predict_batch;

/// Fault probability for every crossline of `volume`, one decode per
/// crossline. Returns the probability volume and the number of decodes.
pub fn predict_volume(model: &Model, volume: &Volume, m: usize) -> Result<(Volume, usize)> {
    let cfg = &model.config.encoder;
    if m != cfg.input_channels {
        return Err(Error::Config(format!(
            "model expects M = {}, got {m}",
            cfg.input_channels
        )));
    }
    let [ni, nx, nt] = volume.dims();
    if (nt, ni) != (cfg.image_size, cfg.image_size) {
        return Err(Error::shape(
            "predict_volume",
            &[nt, ni],
            &[cfg.image_size, cfg.image_size],
        ));
    }
    let blank = MaskVolume::zeros(volume.dims());
    let mut out = Volume::zeros(volume.dims());
    let mut decodes = 0;
    for x in 0..nx {
        let stack = extract_stack(volume, &blank, x, m)?;
        let p = predict_batch(model, std::slice::from_ref(&stack))?;
        decodes += 1;
        out.set_crossline(x, &p);
    }
    Ok((out, decodes))
}

/// Scores crossline sections of a probability volume against a mask.
pub fn evaluate_volume(prob: &Volume, mask: &MaskVolume, crosslines: Option<Range<usize>>) -> Result<EvalReport> {
    if prob.dims() != mask.dims() {
        return Err(Error::shape("evaluate_volume", &prob.dims(), &mask.dims()));
    }
    let [ni, nx, nt] = prob.dims();
    let range = crosslines.unwrap_or(0..nx);
    if range.end > nx || range.is_empty() {
        return Err(Error::invalid(format!(
            "crossline range {range:?} invalid for {nx} crosslines"
        )));
    }
    let preds = range
        .map(|x| Prediction::new(format!("x{x}"), nt, ni, prob.crossline(x), mask.crossline(x)))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&preds, &default_grid())
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Correlation between the direct prediction and the flipped-back
/// prediction of the inline-mirrored volume.
pub fn flip_consistency(model: &Model, volume: &Volume, m: usize) -> Result<f64> {
    let (direct, _) = predict_volume(model, volume, m)?;
    let (flipped, _) = predict_volume(model, &volume.flip_inline(), m)?;
    Ok(pearson(direct.data(), flipped.flip_inline().data()))
}

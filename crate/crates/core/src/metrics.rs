//! Threshold-sweep F1 scores: per-image optimum (OIS) and one global
//! threshold for the whole set (ODS).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `{0.01, 0.02, ..., 0.99}`.
pub fn default_grid() -> Vec<f64> {
    (1..=99).map(|k| k as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Probabilities in `[0, 1]`, row-major.
    pub prob: Vec<f32>,
    pub gt: Vec<u8>,
}

impl Prediction {
    pub fn new(id: impl Into<String>, height: usize, width: usize, prob: Vec<f32>, gt: Vec<u8>) -> Result<Self> {
        let n = height * width;
        if prob.len() != n || gt.len() != n {
            return Err(Error::shape("prediction", &[prob.len()], &[gt.len(), n]));
        }
        if let Some(p) = prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        if let Some(v) = gt.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("ground truth value {v} is not binary")));
        }
        Ok(Prediction {
            id: id.into(),
            height,
            width,
            prob,
            gt,
        })
    }
}

/// Confusion counts of `prob >= t` against `gt`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    /// `2TP / (2TP + FP + FN)`, and 1 when all three are zero.
    pub fn f1(self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!("threshold {t} outside (0, 1)")));
    }
    Ok(())
}

pub fn f1_at_threshold(pred: &[f32], gt: &[u8], t: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("f1_at_threshold", &[pred.len()], &[gt.len()]));
    }
    check_threshold(t)?;
    let mut c = Counts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p as f64 >= t, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c.f1())
}

/// F1 at every grid point for one image. Sorting once makes each threshold
/// a binary search.
pub fn f1_curve(pred: &Prediction, grid: &[f64]) -> Vec<f64> {
    let mut pos: Vec<f32> = Vec::new();
    let mut neg: Vec<f32> = Vec::new();
    for (&p, &g) in pred.prob.iter().zip(&pred.gt) {
        if g != 0 {
            pos.push(p)
        } else {
            neg.push(p)
        }
    }
    pos.sort_by(f32::total_cmp);
    neg.sort_by(f32::total_cmp);
    let at_least = |v: &[f32], t: f64| (v.len() - v.partition_point(|&p| (p as f64) < t)) as u64;
    grid.iter()
        .map(|&t| {
            let tp = at_least(&pos, t);
            Counts {
                tp,
                fp: at_least(&neg, t),
                fn_: pos.len() as u64 - tp,
            }
            .f1()
        })
        .collect()
}

fn check_inputs(set: &[Prediction], grid: &[f64]) -> Result<()> {
    if set.is_empty() {
        return Err(Error::invalid("empty prediction set"));
    }
    if grid.is_empty() {
        return Err(Error::invalid("empty threshold grid"));
    }
    for &t in grid {
        check_threshold(t)?;
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("threshold grid must be strictly ascending"));
    }
    Ok(())
}

/// Index of the first maximum.
fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub best_t: f64,
    pub best_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub grid: Vec<f64>,
    /// `curves[image][k]` is the F1 of that image at `grid[k]`.
    pub curves: Vec<Vec<f64>>,
    pub images: Vec<ImageScore>,
    /// Mean F1 across images at each grid point.
    pub mean_curve: Vec<f64>,
    pub ois: f64,
    pub ods: f64,
    pub global_t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ois: f64,
    pub ods: f64,
    pub global_t: f64,
}

impl EvalReport {
    pub fn summary(&self) -> Summary {
        Summary {
            ois: self.ois,
            ods: self.ods,
            global_t: self.global_t,
        }
    }

    /// Per-image rows `id,best_t,best_f1`.
    pub fn write_images_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "id,best_t,best_f1")?;
        for s in &self.images {
            writeln!(w, "{},{},{}", s.id, s.best_t, s.best_f1)?;
        }
        Ok(())
    }

    /// Rows `t,mean_f1`.
    pub fn write_curve_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "t,mean_f1")?;
        for (t, f) in self.grid.iter().zip(&self.mean_curve) {
            writeln!(w, "{t},{f}")?;
        }
        Ok(())
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>_curve.csv`.
    pub fn write_files(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let name = stem
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut f = std::fs::File::create(stem.with_file_name(format!("{name}.csv")))?;
        self.write_images_csv(&mut f)?;
        std::fs::write(
            stem.with_file_name(format!("{name}.json")),
            serde_json::to_string_pretty(&self.summary())?,
        )?;
        let mut f = std::fs::File::create(stem.with_file_name(format!("{name}_curve.csv")))?;
        self.write_curve_csv(&mut f)
    }
}

/// Mean of per-image best F1, with per-image best thresholds.
pub fn ois(set: &[Prediction], grid: &[f64]) -> Result<(f64, Vec<f64>)> {
    let r = evaluate(set, grid)?;
    Ok((r.ois, r.images.iter().map(|s| s.best_t).collect()))
}

/// Best mean F1 at a single threshold, and that threshold.
pub fn ods(set: &[Prediction], grid: &[f64]) -> Result<(f64, f64)> {
    let r = evaluate(set, grid)?;
    Ok((r.ods, r.global_t))
}

pub fn evaluate(set: &[Prediction], grid: &[f64]) -> Result<EvalReport> {
    check_inputs(set, grid)?;
    let curves: Vec<Vec<f64>> = set.iter().map(|p| f1_curve(p, grid)).collect();
    let images: Vec<ImageScore> = set
        .iter()
        .zip(&curves)
        .map(|(p, c)| {
            let k = argmax_first(c);
            ImageScore {
                id: p.id.clone(),
                best_t: grid[k],
                best_f1: c[k],
            }
        })
        .collect();
    let n = set.len() as f64;
    let ois = images.iter().map(|s| s.best_f1).sum::<f64>() / n;
    let mean_curve: Vec<f64> = (0..grid.len())
        .map(|k| curves.iter().map(|c| c[k]).sum::<f64>() / n)
        .collect();
    let k = argmax_first(&mean_curve);
    Ok(EvalReport {
        grid: grid.to_vec(),
        ods: mean_curve[k],
        global_t: grid[k],
        curves,
        images,
        mean_curve,
        ois,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        let gt = [1, 1, 0, 0];
        assert_eq!(f1_at_threshold(&[1.0, 1.0, 0.0, 0.0], &gt, 0.3).unwrap(), 1.0);
        let f = f1_at_threshold(&[0.6; 4], &gt, 0.5).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(f1_at_threshold(&[0.2; 4], &[0; 4], 0.5).unwrap(), 1.0);
        assert!(f1_at_threshold(&[0.2; 4], &[0; 3], 0.5).is_err());
        assert!(f1_at_threshold(&[0.2; 4], &[0; 4], 1.0).is_err());
    }

    #[test]
    fn perfect_set_ties_to_smallest_threshold() {
        let p = Prediction::new("a", 2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![1, 0, 0, 1]).unwrap();
        let r = evaluate(&[p.clone(), p], &default_grid()).unwrap();
        assert_eq!((r.ois, r.ods, r.global_t), (1.0, 1.0, 0.01));
    }

    #[test]
    fn empty_set_and_bad_grid_rejected() {
        assert!(evaluate(&[], &default_grid()).is_err());
        let p = Prediction::new("a", 1, 1, vec![0.5], vec![1]).unwrap();
        assert!(evaluate(std::slice::from_ref(&p), &[0.5, 0.4]).is_err());
        assert!(evaluate(&[p], &[]).is_err());
        assert!(Prediction::new("b", 1, 1, vec![1.5], vec![1]).is_err());
    }

    #[test]
    fn report_files() {
        let p = Prediction::new("img0", 1, 2, vec![0.9, 0.1], vec![1, 0]).unwrap();
        let r = evaluate(&[p], &[0.25, 0.5, 0.75]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write_files(&dir.path().join("eval")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
        assert_eq!(csv, "id,best_t,best_f1\nimg0,0.25,1\n");
        let s: Summary = serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
        assert_eq!(s, r.summary());
        let curve = std::fs::read_to_string(dir.path().join("eval_curve.csv")).unwrap();
        assert_eq!(curve.lines().count(), 4);
    }
}

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::AugmentSet;
use crate::error::Result;
use crate::model::Model;

use super::config::TrainConfig;
use super::dataset::Dataset;
use super::train::{finetune, pretext_pretrain, pretext_stage, RunReport};

pub const M_VALUES: [usize; 4] = [1, 3, 5, 7];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    M,
    Aug,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub ois: f64,
    pub ods: f64,
    pub global_t: f64,
    pub trainable_fraction: f64,
    pub loss_reduction: f64,
}

impl SweepRow {
    fn from_report(setting: String, r: &RunReport) -> Self {
        let eval = r.eval.as_ref().expect("finetune reports carry an evaluation");
        SweepRow {
            setting,
            ois: eval.ois,
            ods: eval.ods,
            global_t: eval.global_t,
            trainable_fraction: r.params.fraction,
            loss_reduction: r.loss_reduction(),
        }
    }
}

/// Pretext backbone followed by a finetune, as used for each sweep cell.
pub fn pretrain_then_finetune(cfg: &TrainConfig, data: &Dataset) -> Result<(Model, RunReport)> {
    let (backbone, _) = pretext_pretrain(&pretext_stage(cfg), data)?;
    finetune(cfg, backbone, data)
}

/// One finetune per axis value with shared seed and data. The M axis
/// pretrains a backbone per value, since the patch embedding depends on M.
pub fn ablation_sweep(base: &TrainConfig, axis: Axis, data: &Dataset) -> Result<Vec<SweepRow>> {
    match axis {
        Axis::M => M_VALUES
            .iter()
            .map(|&m| {
                let cfg = TrainConfig { m, ..base.clone() };
                let (_, r) = pretrain_then_finetune(&cfg, data)?;
                Ok(SweepRow::from_report(format!("M={m}"), &r))
            })
            .collect(),
        Axis::Aug => {
            let (backbone, _) = pretext_pretrain(&pretext_stage(base), data)?;
            AugmentSet::ALL
                .iter()
                .map(|&augmentation| {
                    let cfg = TrainConfig {
                        augmentation,
                        ..base.clone()
                    };
                    let (_, r) = finetune(&cfg, backbone.clone(), data)?;
                    Ok(SweepRow::from_report(augmentation.name().to_string(), &r))
                })
                .collect()
        }
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "setting,ois,ods,global_t,trainable_fraction,loss_reduction")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.6},{:.6},{},{:.6},{:.6}",
            r.setting, r.ois, r.ods, r.global_t, r.trainable_fraction, r.loss_reduction
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub seed: u64,
    pub pretext_ods: f64,
    pub random_ods: f64,
}

/// Same finetune budget on a pretext backbone and on a random frozen one.
pub fn convergence_comparison(base: &TrainConfig, data: &Dataset, seeds: &[u64]) -> Result<Vec<ConvergenceRow>> {
    seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..base.clone() };
            let (_, pre) = pretrain_then_finetune(&cfg, data)?;
            let random = Model::new(cfg.model_config(), seed)?;
            let (_, rnd) = finetune(&cfg, random, data)?;
            let ods = |r: &RunReport| r.eval.as_ref().map_or(0.0, |e| e.ods);
            Ok(ConvergenceRow {
                seed,
                pretext_ods: ods(&pre),
                random_ods: ods(&rnd),
            })
        })
        .collect()
}

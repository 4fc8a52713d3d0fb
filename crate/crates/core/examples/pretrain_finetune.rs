//! Denoising pretext run, then adapter and delta finetuning with a test-split
//! evaluation. Writes a backbone checkpoint and a JSON report into OUT.
//!
//! cargo run --release --example pretrain_finetune -- [out] [pretext_steps] [finetune_steps]

use std::path::PathBuf;

use faultsam::harness::{finetune, pretext_pretrain, pretext_stage, Dataset, PretextStage, TrainConfig};

fn main() -> faultsam::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/demo".into()));
    let pretext_steps = args.next().map_or(1000, |s| s.parse().expect("integer"));
    let steps = args.next().map_or(2000, |s| s.parse().expect("integer"));
    std::fs::create_dir_all(&out)?;

    let cfg = TrainConfig {
        steps,
        pretext: PretextStage {
            steps: pretext_steps,
            ..PretextStage::default()
        },
        ..TrainConfig::default()
    };
    let data = Dataset::from_config(&cfg.data)?;
    let (backbone, pre) = pretext_pretrain(&pretext_stage(&cfg), &data)?;
    println!(
        "pretext: probe mse {:.4} -> {:.4} in {:.0}s",
        pre.probe_loss_initial, pre.probe_loss_final, pre.wall_clock_s
    );
    backbone.save(&out.join("backbone"))?;

    let (model, report) = finetune(&cfg, backbone, &data)?;
    model.save(&out.join("finetuned"))?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    let eval = report.eval.as_ref().expect("finetune evaluates the test split");
    println!(
        "finetune: probe bce {:.4} -> {:.4}, trainable fraction {:.4}, test OIS {:.3} ODS {:.3} at t={:.2}",
        report.probe_loss_initial, report.probe_loss_final, report.params.fraction, eval.ois, eval.ods, eval.global_t
    );
    Ok(())
}

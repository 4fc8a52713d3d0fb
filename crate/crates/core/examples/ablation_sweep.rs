//! Sweep the slice count M or the augmentation set and print a CSV table.
//!
//! cargo run --release --example ablation_sweep -- [m|aug] [pretext_steps] [finetune_steps]

use faultsam::harness::{ablation_sweep, write_sweep_csv, Axis, Dataset, PretextStage, TrainConfig};

fn main() -> faultsam::Result<()> {
    let mut args = std::env::args().skip(1);
    let axis = match args.next().as_deref().unwrap_or("m") {
        "aug" => Axis::Aug,
        _ => Axis::M,
    };
    let pretext_steps = args.next().map_or(200, |s| s.parse().expect("integer"));
    let steps = args.next().map_or(300, |s| s.parse().expect("integer"));
    let cfg = TrainConfig {
        steps,
        pretext: PretextStage {
            steps: pretext_steps,
            ..PretextStage::default()
        },
        ..TrainConfig::default()
    };
    let data = Dataset::from_config(&cfg.data)?;
    let rows = ablation_sweep(&cfg, axis, &data)?;
    write_sweep_csv(&rows, &mut std::io::stdout())?;
    Ok(())
}

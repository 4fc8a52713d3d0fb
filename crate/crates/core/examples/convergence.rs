//! Pretext backbone versus random frozen backbone under the same short
//! finetune budget.
//!
//! cargo run --release --example convergence -- [finetune_steps] [pretext_steps] [seeds]

use faultsam::harness::{convergence_comparison, Dataset, PretextStage, TrainConfig};

fn main() -> faultsam::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let steps = args.first().copied().unwrap_or(300);
    let pretext_steps = args.get(1).copied().unwrap_or(1000);
    let seeds = args.get(2).copied().unwrap_or(3) as u64;

    let cfg = TrainConfig {
        steps,
        pretext: PretextStage {
            steps: pretext_steps,
            ..PretextStage::default()
        },
        ..TrainConfig::default()
    };
    let data = Dataset::from_config(&cfg.data)?;
    println!("seed,pretext_ods,random_ods");
    for row in convergence_comparison(&cfg, &data, &(0..seeds).collect::<Vec<_>>())? {
        println!("{},{:.4},{:.4}", row.seed, row.pretext_ods, row.random_ods);
    }
    Ok(())
}

//! Segment a whole volume crossline by crossline and score it against its
//! mask. Trains a short model unless a checkpoint is given.
//!
//! cargo run --release --example predict_volume -- [checkpoint]

use std::path::Path;

use faultsam::harness::{evaluate_volume, flip_consistency, predict_volume, train_full, Dataset, TrainConfig};
use faultsam::model::{Mode, Model};
use faultsam::synth::{generate_volume, SynthParams};

fn main() -> faultsam::Result<()> {
    let cfg = TrainConfig {
        mode: Mode::Full,
        steps: 200,
        ..TrainConfig::default()
    };
    let model = match std::env::args().nth(1) {
        Some(path) => Model::load(Path::new(&path))?,
        None => train_full(&cfg, &Dataset::from_config(&cfg.data)?)?.0,
    };
    let m = model.config.encoder.input_channels;
    let (vol, mask) = generate_volume(&SynthParams {
        seed: 99,
        ..SynthParams::default()
    })?;
    let (prob, decodes) = predict_volume(&model, &vol, m)?;
    let eval = evaluate_volume(&prob, &mask, None)?;
    println!(
        "{decodes} decodes, OIS {:.3}, ODS {:.3} at t={:.2}",
        eval.ois, eval.ods, eval.global_t
    );
    println!("flip consistency r = {:.3}", flip_consistency(&model, &vol, m)?);
    Ok(())
}

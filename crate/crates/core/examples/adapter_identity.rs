//! A freshly built model gives the same output with and without adapters,
//! and only a small share of its parameters trains in finetune mode.
//!
//! cargo run --release --example adapter_identity

use faultsam::model::{Mode, Model, ModelConfig};
use faultsam::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> faultsam::Result<()> {
    let mut model = Model::new(ModelConfig::default(), 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[1, 5, 64, 64], |_| rng.random_range(-1.0..1.0));
    let mut outputs = Vec::new();
    for adapted in [true, false] {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = model.forward_with(&mut g, xv, adapted)?;
        outputs.push(g.value(y).clone());
    }
    let diff = outputs[0]
        .data()
        .iter()
        .zip(outputs[1].data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("max |adapted - plain| at init: {diff:e}");

    for mode in [Mode::Full, Mode::Pretext, Mode::Finetune] {
        model.set_mode(mode);
        let p = model.count_params();
        println!(
            "{mode:?}: trainable {} of {} ({:.4})",
            p.trainable,
            p.trainable + p.frozen,
            p.fraction
        );
    }
    Ok(())
}

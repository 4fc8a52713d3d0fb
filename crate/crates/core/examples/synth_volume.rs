//! Generate one faulted volume and print a depth trace and fault statistics.
//!
//! cargo run --release --example synth_volume -- [seed]

use faultsam::synth::{generate_volume, SynthParams};

fn main() -> faultsam::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("integer seed"));
    let params = SynthParams {
        seed,
        ..SynthParams::default()
    };
    let (vol, mask) = generate_volume(&params)?;
    let [ni, nx, nt] = vol.dims();
    let n = vol.data().len() as f64;
    let mean = vol.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vol.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    println!("dims {ni}x{nx}x{nt}, mean {mean:.3}, std {:.3}", var.sqrt());
    println!(
        "fault voxels {} ({:.2}%)",
        mask.count(),
        100.0 * mask.count() as f64 / n
    );
    let trace: Vec<String> = (0..nt)
        .step_by(4)
        .map(|t| format!("{:+.2}", vol.get(ni / 2, nx / 2, t)))
        .collect();
    println!("centre trace: {}", trace.join(" "));
    Ok(())
}

//! Finite-difference check of every differentiable op in f64.
//!
//! cargo run --release --example gradcheck -- [seeds]

use faultsam::tensor::gradcheck::{grad_check, suite};

fn main() -> faultsam::Result<()> {
    let seeds = std::env::args().nth(1).map_or(5, |s| s.parse().expect("integer"));
    for (op, shapes) in suite() {
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let worst = (0..seeds)
            .map(|s| grad_check(op, &refs, s))
            .collect::<faultsam::Result<Vec<f64>>>()?;
        println!("{:<16} {:.2e}", op.name(), worst.iter().cloned().fold(0.0, f64::max));
    }
    Ok(())
}

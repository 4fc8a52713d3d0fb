//! OIS and ODS on a small hand-made prediction set, with CSV output.
//!
//! cargo run --release --example evaluate_metrics

use faultsam::metrics::{default_grid, evaluate, Prediction};

fn main() -> faultsam::Result<()> {
    // image a peaks at a low threshold, image b at a high one
    let set = [
        Prediction::new("a", 2, 2, vec![0.25, 0.25, 0.125, 0.125], vec![1, 1, 0, 0])?,
        Prediction::new("b", 2, 2, vec![0.875, 0.875, 0.625, 0.625], vec![1, 1, 0, 0])?,
        Prediction::new("empty", 2, 2, vec![0.1, 0.2, 0.05, 0.0], vec![0, 0, 0, 0])?,
    ];
    let report = evaluate(&set, &default_grid())?;
    println!(
        "OIS {:.4}  ODS {:.4} at t={:.2}",
        report.ois, report.ods, report.global_t
    );
    let mut out = std::io::stdout();
    report.write_images_csv(&mut out)?;
    report.write_curve_csv(&mut out)?;
    Ok(())
}

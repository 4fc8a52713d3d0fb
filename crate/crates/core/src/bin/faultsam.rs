use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use faultsam::data::{load_mask, load_volume, save_volume};
use faultsam::harness::{
    ablation_sweep, finetune, predict_volume, pretext_pretrain, train_full, write_sweep_csv, Axis, DataConfig, Dataset,
    RunReport, TrainConfig,
};
use faultsam::metrics::EvalReport;
use faultsam::model::{Mode, Model};
use faultsam::synth::SynthParams;
use faultsam::{Error, Result};

#[derive(Parser)]
#[command(
    name = "faultsam",
    version,
    about = "Adapter-tuned fault segmentation on synthetic seismic volumes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    M,
    Aug,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic volumes, masks and a split manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        volumes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON file with generator parameters.
        #[arg(long)]
        synth: Option<PathBuf>,
    },
    /// Train a backbone on the denoising pretext task.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finetune adapters and conv deltas on fault masks.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Predict a fault probability volume.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a probability volume against a mask volume.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Output stem: writes `<R>.csv`, `<R>.json`, `<R>_curve.csv`.
        #[arg(long)]
        report: PathBuf,
    },
    /// Ablation over slice count or augmentation set.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        config: PathBuf,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_report(cfg: &TrainConfig, report: &RunReport) -> Result<()> {
    let Some(path) = &cfg.report else {
        return Ok(());
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    if let Some(eval) = &report.eval {
        eval.write_files(&path.with_extension("eval"))?;
    }
    Ok(())
}

fn summary(report: &RunReport) {
    let p = &report.params;
    println!(
        "steps={} probe_loss={:.5}->{:.5} trainable={} frozen={} fraction={:.5} seconds={:.1}",
        report.losses.len(),
        report.probe_loss_initial,
        report.probe_loss_final,
        p.trainable,
        p.frozen,
        p.fraction,
        report.wall_clock_s
    );
    if let Some(e) = &report.eval {
        println!("ois={:.4} ods={:.4} global_t={}", e.ois, e.ods, e.global_t);
    }
}

fn save(model: &Model, cfg: &TrainConfig) -> Result<()> {
    if let Some(p) = &cfg.checkpoint {
        model.save(p)?;
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData {
            out,
            volumes,
            seed,
            synth,
        } => {
            let mut synth = match synth {
                Some(p) => serde_json::from_str::<SynthParams>(&std::fs::read_to_string(p)?)?,
                None => SynthParams::default(),
            };
            synth.seed = seed;
            let data = Dataset::generate(&DataConfig {
                volumes,
                synth,
                ..DataConfig::default()
            })?;
            data.save(&out)?;
            println!(
                "wrote {} volumes to {} (train {}, val {}, test {})",
                volumes,
                out.display(),
                data.train.len(),
                data.val.len(),
                data.test.len()
            );
        }
        Cmd::Pretrain { config } => {
            let cfg = TrainConfig {
                mode: Mode::Pretext,
                ..TrainConfig::from_file(&config)?
            };
            cfg.validate()?;
            let data = Dataset::from_config(&cfg.data)?;
            let (model, report) = pretext_pretrain(&cfg, &data)?;
            save(&model, &cfg)?;
            write_report(&cfg, &report)?;
            summary(&report);
        }
        Cmd::Train { config, backbone } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            if backbone.is_some() {
                cfg.backbone = backbone;
            }
            if cfg.mode == Mode::Pretext {
                return Err(Error::Config("use the pretrain subcommand for mode pretext".into()));
            }
            cfg.validate()?;
            let data = Dataset::from_config(&cfg.data)?;
            let (model, report) = match cfg.mode {
                Mode::Full => train_full(&cfg, &data)?,
                _ => {
                    let path = cfg.backbone.as_deref().expect("validated");
                    let bb = Model::load_matching(path, &cfg.model_config())?;
                    finetune(&cfg, bb, &data)?
                }
            };
            save(&model, &cfg)?;
            write_report(&cfg, &report)?;
            summary(&report);
        }
        Cmd::Predict { ckpt, volume, out } => {
            let model = Model::load(&ckpt)?;
            let v = load_volume(&volume)?;
            let m = model.config.encoder.input_channels;
            let (prob, decodes) = predict_volume(&model, &v, m)?;
            save_volume(&out, &prob)?;
            println!("wrote {} ({} crosslines)", out.display(), decodes);
        }
        Cmd::Eval { pred, gt, report } => {
            let prob = load_volume(&pred)?;
            let mask = load_mask(&gt)?;
            let r: EvalReport = faultsam::harness::evaluate_volume(&prob, &mask, None)?;
            r.write_files(&report)?;
            println!("ois={:.4} ods={:.4} global_t={}", r.ois, r.ods, r.global_t);
        }
        Cmd::Sweep { axis, config, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            let data = Dataset::from_config(&cfg.data)?;
            let axis = match axis {
                AxisArg::M => Axis::M,
                AxisArg::Aug => Axis::Aug,
            };
            let rows = ablation_sweep(&cfg, axis, &data)?;
            match out {
                Some(p) => write_sweep_csv(&rows, &mut std::fs::File::create(Path::new(&p))?)?,
                None => write_sweep_csv(&rows, &mut std::io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

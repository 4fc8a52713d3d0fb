use std::process::Command;

use faultsam::data::{save_mask, save_volume, Split};
use faultsam::decoder::DecoderConfig;
use faultsam::encoder::EncoderConfig;
use faultsam::harness::{
    evaluate_split, finetune, flip_consistency, predict_batch, predict_volume, pretext_pretrain, probe_loss,
    probe_refs, train_full, DataConfig, Dataset, Objective, TrainConfig,
};
use faultsam::model::{Mode, Model, ModelConfig};
use faultsam::synth::SynthParams;
use faultsam::tensor::Tensor;
use faultsam::Error;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            adapter_dim: 2,
            balance: 0.5,
            input_channels: 3,
        },
        decoder: DecoderConfig {
            depth: 1,
            heads: 2,
            mlp_dim: 32,
            head_channels: 4,
        },
    }
}

fn tiny_data() -> DataConfig {
    DataConfig {
        volumes: 3,
        fractions: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        synth: SynthParams {
            dims: [16, 16, 16],
            throw_range: (2.0, 3.0),
            fold_amplitude: 1.0,
            ..SynthParams::default()
        },
        ..DataConfig::default()
    }
}

fn tiny_config(mode: Mode, steps: usize) -> TrainConfig {
    TrainConfig {
        mode,
        steps,
        batch_size: 4,
        m: 3,
        model: tiny_model(),
        data: tiny_data(),
        ..TrainConfig::default()
    }
}

#[test]
fn pretext_loss_decreases_over_100_default_steps() {
    let cfg = TrainConfig {
        mode: Mode::Pretext,
        steps: 100,
        ..TrainConfig::default()
    };
    let data = Dataset::generate(&DataConfig {
        volumes: 3,
        fractions: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        ..DataConfig::default()
    })
    .unwrap();
    let (_, r) = pretext_pretrain(&cfg, &data).unwrap();
    assert_eq!(r.losses.len(), 100);
    assert!(r.probe_loss_final < r.probe_loss_initial, "{r:?}");
}

#[test]
fn reruns_with_one_seed_are_bit_identical() {
    let data = Dataset::generate(&tiny_data()).unwrap();
    let cfg = tiny_config(Mode::Pretext, 15);
    let (m1, a) = pretext_pretrain(&cfg, &data).unwrap();
    let (_, b) = pretext_pretrain(&cfg, &data).unwrap();
    assert_eq!(a.losses, b.losses);
    assert!(a.same_outcome(&b));

    let ft = TrainConfig {
        augmentation: faultsam::data::AugmentSet::All,
        ..tiny_config(Mode::Finetune, 10)
    };
    let (_, c) = finetune(&ft, m1.clone(), &data).unwrap();
    let (_, d) = finetune(&ft, m1, &data).unwrap();
    assert!(c.same_outcome(&d));
}

#[test]
fn checkpoint_round_trip_keeps_frozen_tensors_through_finetune() {
    let data = Dataset::generate(&tiny_data()).unwrap();
    let (backbone, _) = pretext_pretrain(&tiny_config(Mode::Pretext, 5), &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("backbone");
    backbone.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    for ((_, _, a), (_, _, b)) in backbone.store.iter().zip(loaded.store.iter()) {
        assert_eq!(a.data(), b.data());
    }

    let cfg = tiny_config(Mode::Finetune, 20);
    let (tuned, report) = finetune(&cfg, loaded, &data).unwrap();
    assert_eq!(report.frozen_checksum_before, report.frozen_checksum_after);
    assert!(report.params.fraction < 1.0);
    let tuned_path = dir.path().join("tuned");
    tuned.save(&tuned_path).unwrap();
    let reloaded = Model::load(&tuned_path).unwrap();
    let original = Model::load(&path).unwrap();
    for ((_, name, t), (_, _, o)) in reloaded.store.iter().zip(original.store.iter()) {
        if !t.trainable() {
            assert_eq!(t.data(), o.data(), "{name}");
        }
    }
}

#[test]
fn mismatched_backbone_is_rejected_with_field_names() {
    let data = Dataset::generate(&tiny_data()).unwrap();
    let (backbone, _) = pretext_pretrain(&tiny_config(Mode::Pretext, 1), &data).unwrap();
    let mut cfg = tiny_config(Mode::Finetune, 1);
    cfg.m = 5;
    cfg.model.encoder.depth = 2;
    match finetune(&cfg, backbone, &data) {
        Err(Error::CheckpointMismatch(msg)) => {
            assert!(msg.contains("input_channels") && msg.contains("depth"), "{msg}");
        }
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
    assert!(tiny_config(Mode::Finetune, 1).validate().is_err());
}

#[test]
fn predict_volume_contract() {
    let data = Dataset::generate(&tiny_data()).unwrap();
    let (model, _) = train_full(&tiny_config(Mode::Full, 5), &data).unwrap();
    let vol = &data.volumes[0].0;
    let (prob, decodes) = predict_volume(&model, vol, 3).unwrap();
    assert_eq!(prob.dims(), vol.dims());
    assert_eq!(decodes, vol.dims()[1]);
    assert!(prob.data().iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(predict_volume(&model, vol, 5).is_err());
    let big = faultsam::volume::Volume::zeros([20, 4, 16]);
    assert!(predict_volume(&model, &big, 3).is_err());
    let r = flip_consistency(&model, vol, 3).unwrap();
    assert!((-1.0..=1.0).contains(&r));
}

#[test]
fn single_slice_stack_matches_plain_2d_input() {
    let data = Dataset::generate(&tiny_data()).unwrap();
    let cfg = TrainConfig {
        m: 1,
        ..tiny_config(Mode::Full, 3)
    };
    let (model, _) = train_full(&cfg, &data).unwrap();
    let vol = &data.volumes[1].0;
    let (prob, _) = predict_volume(&model, vol, 1).unwrap();
    for x in 0..vol.dims()[1] {
        let img = Tensor::new(&[1, 1, 16, 16], vol.crossline(x)).unwrap();
        let logits = model.logits(img).unwrap();
        let direct: Vec<f32> = logits.data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        assert_eq!(prob.crossline(x), direct);
    }
    let s = data.stack(data.test[0], 1).unwrap();
    assert_eq!(predict_batch(&model, &[s]).unwrap().len(), 256);
}

#[test]
fn single_batch_overfit() {
    let mut data = Dataset::generate(&tiny_data()).unwrap();
    data.train.truncate(8);
    let (backbone, _) = pretext_pretrain(&tiny_config(Mode::Pretext, 200), &data).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        ..tiny_config(Mode::Finetune, 1000)
    };
    let (model, r) = finetune(&cfg, backbone, &data).unwrap();
    let refs = probe_refs(&data);
    assert_eq!(refs.len(), 8);
    let bce = probe_loss(&model, &data, &refs, 3, Objective::Segment { lambda_p: 0.0 }).unwrap();
    assert!(bce < 0.05, "bce {bce}, report initial {}", r.probe_loss_initial);
    let eval = evaluate_split(&model, &data, Split::Test, 3).unwrap();
    assert!(eval.ois >= eval.ods);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_faultsam"))
}

#[test]
fn cli_round_trip_and_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = d.join("synth.json");
    std::fs::write(&synth, serde_json::to_string(&tiny_data().synth).unwrap()).unwrap();
    let out = bin()
        .args(["gen-data", "--out"])
        .arg(d.join("data"))
        .args(["--volumes", "3", "--seed", "4", "--synth"])
        .arg(&synth)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("data/manifest.jsonl").exists());

    let mut pre = tiny_config(Mode::Pretext, 3);
    pre.data = DataConfig {
        dir: Some(d.join("data")),
        ..tiny_data()
    };
    pre.checkpoint = Some(d.join("pre"));
    pre.report = Some(d.join("pre_report.json"));
    let pre_path = d.join("pre.json");
    std::fs::write(&pre_path, serde_json::to_string(&pre).unwrap()).unwrap();
    let out = bin().arg("pretrain").arg("--config").arg(&pre_path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut ft = pre.clone();
    ft.mode = Mode::Finetune;
    ft.checkpoint = Some(d.join("ft"));
    ft.report = Some(d.join("ft_report.json"));
    let ft_path = d.join("ft.json");
    std::fs::write(&ft_path, serde_json::to_string(&ft).unwrap()).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&ft_path)
        .arg("--backbone")
        .arg(d.join("pre"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("ft_report.eval.csv").exists());

    let out = bin()
        .args(["predict", "--ckpt"])
        .arg(d.join("ft"))
        .arg("--volume")
        .arg(d.join("data/vol_002.json"))
        .arg("--out")
        .arg(d.join("prob"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = bin()
        .args(["eval", "--pred"])
        .arg(d.join("prob.json"))
        .arg("--gt")
        .arg(d.join("data/vol_002_mask.json"))
        .arg("--report")
        .arg(d.join("eval"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert!(summary["ois"].as_f64().unwrap() >= summary["ods"].as_f64().unwrap());

    std::fs::write(d.join("bad.json"), r#"{"steps": 2, "learning_rate": 0.1}"#).unwrap();
    let out = bin()
        .args(["pretrain", "--config"])
        .arg(d.join("bad.json"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let line: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(line["error"], "config");

    // a payload truncated on disk is reported with byte counts
    let v = faultsam::volume::Volume::zeros([16, 16, 16]);
    save_volume(&d.join("short"), &v).unwrap();
    std::fs::write(d.join("short.raw"), [0u8; 10]).unwrap();
    save_mask(&d.join("m"), &faultsam::volume::MaskVolume::zeros([16, 16, 16])).unwrap();
    let out = bin()
        .args(["eval", "--pred"])
        .arg(d.join("short.json"))
        .arg("--gt")
        .arg(d.join("m.json"))
        .arg("--report")
        .arg(d.join("e2"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let line: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(line["error"], "payload_size");
}

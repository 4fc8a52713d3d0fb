use faultsam::decoder::{reg_loss, reg_value, total_loss, DecoderConfig, LossConfig};
use faultsam::encoder::EncoderConfig;
use faultsam::model::{Mode, Model, ModelConfig, Role};
use faultsam::tensor::{Adam, AdamConfig, Graph, ParamId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(m: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            adapter_dim: 4,
            balance: 0.5,
            input_channels: m,
        },
        decoder: DecoderConfig {
            depth: 2,
            heads: 2,
            mlp_dim: 32,
            head_channels: 4,
        },
    }
}

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

fn randomize(model: &mut Model, ids: &[ParamId], scale: f32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn logits(model: &Model, x: &Tensor, adapted: bool) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = model.forward_with(&mut g, xv, adapted).unwrap();
    g.value(y).clone()
}

#[test]
fn zero_adapters_and_deltas_reproduce_the_plain_model() {
    for seed in 0..3 {
        let model = Model::new(small(3), seed).unwrap();
        let x = random_input(&[2, 3, 16, 16], seed + 10);
        let a = logits(&model, &x, true);
        let b = logits(&model, &x, false);
        let max = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f32, f32::max);
        assert!(max < 1e-6, "max abs diff {max}");
    }
}

#[test]
fn zero_delta_decode_equals_base_only_decode() {
    let mut model = Model::new(small(3), 4).unwrap();
    let ids = model.ids_with_role(Role::Adapter);
    randomize(&mut model, &ids, 0.3, 1);
    let x = random_input(&[1, 3, 16, 16], 2);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let e = model.encoder.forward(&mut g, &model.store, xv, true).unwrap();
    let with = model.decoder.forward(&mut g, &model.store, e, true).unwrap();
    let without = model.decoder.forward(&mut g, &model.store, e, false).unwrap();
    assert_eq!(g.value(with).data(), g.value(without).data());
}

#[test]
fn output_resolution_matches_input_for_patch_8_and_16() {
    for p in [8, 16] {
        let mut cfg = small(1);
        cfg.encoder.image_size = 32;
        cfg.encoder.patch_size = p;
        let model = Model::new(cfg, 0).unwrap();
        let y = model.logits(random_input(&[2, 1, 32, 32], 0)).unwrap();
        assert_eq!(y.shape(), &[2, 1, 32, 32]);
        assert_eq!(model.decoder.upsamplers.len(), if p == 8 { 3 } else { 4 });
    }
}

#[test]
fn wrong_embedding_grid_rejected() {
    let model = Model::new(small(1), 0).unwrap();
    let mut g = Graph::new();
    let e = g.constant(Tensor::zeros(&[1, 16, 3, 3]));
    assert!(model.decoder.forward(&mut g, &model.store, e, true).is_err());
    let x = g.constant(Tensor::zeros(&[1, 2, 16, 16]));
    assert!(model.forward(&mut g, x).is_err());
}

#[test]
fn finetune_gradients_reach_only_trainable_roles() {
    let mut model = Model::new(small(3), 5).unwrap();
    model.set_mode(Mode::Finetune);
    let ids = model.ids_with_role(Role::Adapter);
    randomize(&mut model, &ids, 0.2, 3);
    let x = random_input(&[2, 3, 16, 16], 6);
    let target = Tensor::from_fn(&[2, 1, 16, 16], |k| (k % 5 == 0) as u8 as f32);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let y = model.forward(&mut g, xv).unwrap();
    let deltas = model.delta_ids();
    let loss = total_loss(&mut g, y, &target, &model.store, &deltas, &LossConfig::default()).unwrap();
    g.backward_into(loss, &mut model.store).unwrap();
    for (id, name, t) in model.store.iter() {
        let trainable = matches!(model.role(id), Role::Adapter | Role::ConvDelta | Role::OutputToken);
        assert_eq!(t.trainable(), trainable, "{name}");
        assert_eq!(t.grad().is_some(), trainable, "{name}");
    }
}

#[test]
fn one_step_changes_only_trainable_tensors() {
    let mut model = Model::new(small(3), 7).unwrap();
    model.set_mode(Mode::Finetune);
    let before = model.store.clone();
    let x = random_input(&[2, 3, 16, 16], 8);
    let target = Tensor::from_fn(&[2, 1, 16, 16], |k| (k % 3 == 0) as u8 as f32);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let y = model.forward(&mut g, xv).unwrap();
    let loss = g.bce_with_logits(y, &target).unwrap();
    g.backward_into(loss, &mut model.store).unwrap();
    let nonzero: Vec<bool> = model
        .store
        .iter()
        .map(|(_, _, t)| t.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)))
        .collect();
    Adam::new(AdamConfig::default()).step(&mut model.store);
    for ((id, name, t), moved) in model.store.iter().zip(nonzero) {
        let old = before.get(id).data();
        if !t.trainable() {
            assert_eq!(old, t.data(), "{name}");
        } else if moved {
            assert_ne!(old, t.data(), "{name}");
        }
    }
    assert!(model.changed_frozen(&before).is_empty());
    // refreezing is idempotent
    let snapshot: Vec<bool> = model.store.iter().map(|(_, _, t)| t.trainable()).collect();
    model.encoder.freeze_backbone(&mut model.store);
    model.encoder.freeze_backbone(&mut model.store);
    let again: Vec<bool> = model.store.iter().map(|(_, _, t)| t.trainable()).collect();
    assert_eq!(snapshot, again);
}

#[test]
fn balance_factor_scales_the_second_adapter_linearly() {
    let mut model = Model::new(small(1), 9).unwrap();
    let ids = model.ids_with_role(Role::Adapter);
    randomize(&mut model, &ids, 0.3, 4);
    let block = model.encoder.blocks[0].clone();
    let x = random_input(&[2, 16, 16], 11);
    let run = |s: f32| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &model.store, xv, s, true).unwrap();
        g.value(y).clone()
    };
    // adapter_2 branch computed from the block's parts
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let x1 = block.adapter1.forward(&mut g, &model.store, xv).unwrap();
    let h = block.norm1.forward(&mut g, &model.store, x1).unwrap();
    let a = block.attn.forward(&mut g, &model.store, h, h, h).unwrap();
    let x2 = g.add(x1, a).unwrap();
    let y = block.norm2.forward(&mut g, &model.store, x2).unwrap();
    let branch = block.adapter2.core(&mut g, &model.store, y).unwrap();
    let branch = g.value(branch).data().to_vec();
    assert!(branch.iter().any(|v| v.abs() > 1e-3));

    for (s1, s2) in [(1.0f32, 0.0f32), (0.5, 0.25), (0.9, 0.1)] {
        let (o1, o2) = (run(s1), run(s2));
        for ((p, q), b) in o1.data().iter().zip(o2.data()).zip(&branch) {
            assert!(((p - q) - (s1 - s2) * b).abs() < 1e-4, "{p} {q} {b}");
        }
    }
    // s = 0 removes the branch entirely
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let x1 = block.adapter1.forward(&mut g, &model.store, xv).unwrap();
    let h = block.norm1.forward(&mut g, &model.store, x1).unwrap();
    let a = block.attn.forward(&mut g, &model.store, h, h, h).unwrap();
    let x2 = g.add(x1, a).unwrap();
    let y = block.norm2.forward(&mut g, &model.store, x2).unwrap();
    let m = block.mlp.forward(&mut g, &model.store, y).unwrap();
    let out = g.add(x2, m).unwrap();
    assert_eq!(run(0.0).data(), g.value(out).data());
    assert_eq!(run(0.7).shape(), x.shape());
}

#[test]
fn zero_adapters_leave_each_block_unchanged() {
    let model = Model::new(small(1), 12).unwrap();
    let x = random_input(&[1, 16, 16], 13);
    for block in &model.encoder.blocks {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let a = block.forward(&mut g, &model.store, xv, 0.5, true).unwrap();
        let b = block.forward(&mut g, &model.store, xv, 0.5, false).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }
}

#[test]
fn batch_order_does_not_change_per_sample_logits() {
    let mut model = Model::new(small(3), 14).unwrap();
    let ids = model.ids_with_role(Role::Adapter);
    randomize(&mut model, &ids, 0.2, 5);
    let x = random_input(&[3, 3, 16, 16], 15);
    let plane = 3 * 16 * 16;
    let order = [2, 0, 1];
    let permuted: Vec<f32> = order
        .iter()
        .flat_map(|&b| x.data()[b * plane..(b + 1) * plane].to_vec())
        .collect();
    let y = model.logits(x).unwrap();
    let yp = model.logits(Tensor::new(&[3, 3, 16, 16], permuted).unwrap()).unwrap();
    let out = 16 * 16;
    for (k, &b) in order.iter().enumerate() {
        let a = &y.data()[b * out..(b + 1) * out];
        let c = &yp.data()[k * out..(k + 1) * out];
        for (p, q) in a.iter().zip(c) {
            assert!((p - q).abs() < 1e-5);
        }
    }
}

#[test]
fn encode_shapes_for_single_and_stacked_input() {
    for m in [1, 5] {
        let mut cfg = small(m);
        cfg.encoder.image_size = 64;
        cfg.encoder.patch_size = 8;
        let model = Model::new(cfg, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random_input(&[2, m, 64, 64], 1));
        let e = model.encoder.forward(&mut g, &model.store, x, true).unwrap();
        assert_eq!(g.shape(e), &[2, 16, 8, 8]);
    }
}

#[test]
fn total_loss_matches_a_double_precision_oracle() {
    let mut model = Model::new(small(1), 16).unwrap();
    let deltas = model.delta_ids();
    randomize(&mut model, &deltas, 0.05, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let z: Vec<f32> = (0..2 * 16 * 16).map(|_| rng.random_range(-6.0..6.0)).collect();
    let y: Vec<f32> = (0..2 * 16 * 16).map(|_| rng.random_bool(0.3) as u8 as f32).collect();
    let lambda_p = 0.37f32;

    let bce: f64 = z
        .iter()
        .zip(&y)
        .map(|(&z, &y)| {
            let p = 1.0 / (1.0 + (-(z as f64)).exp());
            -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / z.len() as f64;
    let sq: f64 = deltas
        .iter()
        .flat_map(|&id| model.store.get(id).data().to_vec())
        .map(|v| v as f64 * v as f64)
        .sum();
    let oracle = bce + lambda_p as f64 * sq;

    let mut g = Graph::new();
    let zv = g.constant(Tensor::new(&[2, 1, 16, 16], z).unwrap());
    let target = Tensor::new(&[2, 1, 16, 16], y).unwrap();
    let l = total_loss(&mut g, zv, &target, &model.store, &deltas, &LossConfig { lambda_p }).unwrap();
    assert!((g.value(l).item() as f64 - oracle).abs() < 1e-5);
    assert!((reg_value(&model.store, &deltas, lambda_p) - lambda_p as f64 * sq).abs() < 1e-9);

    // lambda_p = 0 leaves exactly the base loss
    let l0 = total_loss(
        &mut g,
        zv,
        &target,
        &model.store,
        &deltas,
        &LossConfig { lambda_p: 0.0 },
    )
    .unwrap();
    let base = g.bce_with_logits(zv, &target).unwrap();
    assert_eq!(g.value(l0).item(), g.value(base).item());
}

#[test]
fn reg_gradient_matches_finite_differences() {
    let mut model = Model::new(small(1), 18).unwrap();
    model.set_mode(Mode::Finetune);
    let deltas = model.delta_ids();
    randomize(&mut model, &deltas, 0.5, 7);
    let lambda_p = 1.5f32;
    let mut g = Graph::new();
    let r = reg_loss(&mut g, &model.store, &deltas, lambda_p).unwrap();
    g.backward_into(r, &mut model.store).unwrap();
    // central differences of the quadratic in f64
    let h = 1e-3;
    let f = |v: f64| lambda_p as f64 * v * v;
    for &id in &deltas {
        let t = model.store.get(id);
        for (&v, &gr) in t.data().iter().zip(t.grad().unwrap()) {
            let v = v as f64;
            let numeric = (f(v + h) - f(v - h)) / (2.0 * h);
            assert!(
                (gr as f64 - numeric).abs() < 1e-6 * numeric.abs().max(1.0),
                "{gr} vs {numeric}"
            );
        }
    }
}

#[test]
fn all_trainable_mode_reports_fraction_one() {
    let mut model = Model::new(ModelConfig::default(), 0).unwrap();
    model.set_mode(Mode::Full);
    assert_eq!(model.count_params().fraction, 1.0);
    model.set_mode(Mode::Finetune);
    assert!(model.count_params().fraction < 0.05);
}

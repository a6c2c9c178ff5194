mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reid_autodiff::{Tape, Tensor};
use reid_core::data::SyntheticConfig;
use reid_core::network::{is_classifier, Ctx, Preset, Variant};
use reid_core::pipeline::{prepare_synthetic, PartOptions};
use reid_core::training::{epoch_order, total_loss, TrainConfig, Trainer};

/// Mean softmax cross-entropy, computed directly.
fn cross_entropy(logits: &[f64], q: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * q..(r + 1) * q];
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

#[test]
fn total_is_weighted_sum_of_the_six_losses() {
    let (q, b) = (6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let lambda = rng.random_range(0.0..2.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..q)).collect();
        let raw: Vec<Vec<f64>> = (0..6).map(|_| (0..b * q).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
        let tape = Tape::<f64>::new();
        let vars: Vec<_> = raw.iter().map(|l| tape.constant(Tensor::new(&[b, q], l.clone()).unwrap())).collect();
        let intra = [vars[0], vars[1], vars[2], vars[3], vars[4]];
        let (total, parts) = total_loss(&tape, &intra, Some(vars[5]), &labels, lambda).unwrap();
        let ce: Vec<f64> = raw.iter().map(|l| cross_entropy(l, q, &labels)).collect();
        for j in 0..5 {
            assert!((parts.intra[j] - ce[j]).abs() < 1e-9);
        }
        assert!((parts.inter - ce[5]).abs() < 1e-9);
        let want = lambda * ce[..5].iter().sum::<f64>() + ce[5];
        assert!((tape.value(total).item() - want).abs() < 1e-6);
        assert!((parts.total - want).abs() < 1e-6);
    }
}

#[test]
fn uniform_logits_total_three_and_a_half_log_four() {
    let tape = Tape::<f64>::new();
    let z = || tape.constant(Tensor::zeros(&[2, 4]));
    let intra = [z(), z(), z(), z(), z()];
    let (total, _) = total_loss(&tape, &intra, Some(z()), &[0, 3], 0.5).unwrap();
    assert!((tape.value(total).item() - 3.5 * 4f64.ln()).abs() < 1e-12);
    let (without, _) = total_loss(&tape, &intra, None, &[0, 3], 0.5).unwrap();
    assert!((tape.value(without).item() - 2.5 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn zero_lambda_leaves_intra_heads_without_gradient() {
    let mut model = common::desk_model::<f64>(Variant::IntraInter, 4, 0);
    common::randomize(&mut model, 2);
    let (whole, parts) = common::random_inputs(&model, 2, 3);
    let tape = Tape::new();
    let params = model.params.bind(&tape, true);
    let ctx = Ctx::new(&tape, params.clone(), false, 0.0, 0);
    let out = model.forward(&ctx, tape.constant(whole), parts.map(|t| tape.constant(t))).unwrap();
    let (loss, _) = total_loss(&tape, &out.intra_logits, out.fused_logits, &[1, 2], 0.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    let norm = |name: &str| {
        let id = model.params.names().iter().position(|n| n == name).unwrap();
        grads.get(params[id]).map_or(0.0, |g| g.data().iter().map(|v| v * v).sum::<f64>())
    };
    for role in ["global", "head", "upper_body", "upper_leg", "lower_leg"] {
        assert_eq!(norm(&format!("head.{role}.w")), 0.0);
        assert_eq!(norm(&format!("head.{role}.b")), 0.0);
        assert!(norm(&format!("{role}.reduce.w")) > 0.0);
    }
    assert!(norm("head.fused.b") > 0.0);
}

#[test]
fn learning_rate_drops_stepwise() {
    let mut c = TrainConfig::for_preset(Preset::Paper);
    c.lr = 0.01;
    assert_eq!(c.learning_rate(0), 0.01);
    assert_eq!(c.learning_rate(39), 0.01);
    assert!((c.learning_rate(40) - 0.001).abs() < 1e-15);
    assert!((c.learning_rate(99) - 0.0001).abs() < 1e-15);
}

#[test]
fn invalid_configs_are_rejected() {
    let base = TrainConfig::for_preset(Preset::Desk);
    let mut bad = vec![];
    for f in [
        |c: &mut TrainConfig| c.lr = 0.0,
        |c: &mut TrainConfig| c.batch_size = 0,
        |c: &mut TrainConfig| c.dropout = 1.0,
        |c: &mut TrainConfig| c.lambda = -1.0,
    ] {
        let mut c = base.clone();
        f(&mut c);
        bad.push(c.validate().is_err());
    }
    assert_eq!(bad, [true; 4]);
    assert!(base.validate().is_ok());
}

proptest! {
    #[test]
    fn epoch_order_is_a_seeded_permutation(n in 1usize..200, seed in any::<u64>(), epoch in 0usize..50) {
        let order = epoch_order(n, seed, epoch);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(order, epoch_order(n, seed, epoch));
    }
}

fn tiny_samples() -> Vec<reid_core::pipeline::PreparedSample> {
    let cfg = SyntheticConfig {
        ids: 3,
        per_id: 5,
        ..SyntheticConfig::default()
    };
    prepare_synthetic(&cfg, &Preset::Desk.dims(), true, &PartOptions::default()).unwrap()
}

#[test]
fn repeated_steps_on_one_batch_lower_the_loss() {
    let samples = tiny_samples();
    let batch: Vec<_> = samples.iter().take(6).collect();
    let mut config = TrainConfig::for_preset(Preset::Desk);
    config.dropout = 0.0;
    let mut trainer = Trainer::new(config, 3).unwrap();
    let first = trainer.step(&batch, 0.01, 0).unwrap();
    let mut last = first;
    for i in 1..15 {
        last = trainer.step(&batch, 0.01, i).unwrap();
    }
    assert!(last.total < first.total * 0.8, "{} -> {}", first.total, last.total);
}

#[test]
fn training_is_reproducible_and_logs_every_epoch() {
    let samples = tiny_samples();
    let mut config = TrainConfig::for_preset(Preset::Desk);
    config.epochs = 2;
    config.checkpoint_every = 1;
    let dir = tempfile::tempdir().unwrap();
    let run = |out: Option<&std::path::Path>| {
        let mut t = Trainer::new(config.clone(), 3).unwrap();
        let h = t.fit(&samples, out).unwrap();
        (h, t.model.params.values().to_vec())
    };
    let (h1, p1) = run(Some(dir.path()));
    let (h2, p2) = run(None);
    assert_eq!(p1, p2);
    assert_eq!(h1.iter().map(|m| m.loss).collect::<Vec<_>>(), h2.iter().map(|m| m.loss).collect::<Vec<_>>());
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(dir.path().join("checkpoint.reid").exists());
    assert!(dir.path().join("checkpoint_001.reid").exists());
    assert!(p1.iter().all(|t| t.all_finite()));
    assert!(!model_is_untrained(&p1, &config));
}

fn model_is_untrained(params: &[Tensor<f32>], config: &TrainConfig) -> bool {
    let fresh = Trainer::new(config.clone(), 3).unwrap();
    let same = fresh
        .model
        .params
        .iter()
        .zip(params)
        .all(|((n, a), b)| is_classifier(n) || a == b);
    same
}

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{BOS, EOS};
use crate::knowledge::KnowledgeContext;
use crate::model::{Model, ModelConfig};
use crate::numerics::{grad_check, GradCheckOptions, ParamStore};

fn random_context(rng: &mut ChaCha8Rng) -> KnowledgeContext {
    let mut c = KnowledgeContext::zeros();
    for v in c.m.iter_mut().chain(c.g.iter_mut()).chain(c.h.iter_mut()) {
        *v = rng.random_range(-0.1..0.1);
    }
    c
}

fn snippet(rng: &mut ChaCha8Rng, frames: usize, first: bool, words: &[usize]) -> PreparedSnippet {
    let cfg = ModelConfig::tiny();
    let mut tokens = vec![BOS];
    tokens.extend_from_slice(words);
    tokens.push(EOS);
    let candidates = candidate_sets(&tokens[1..]);
    PreparedSnippet {
        context: if first { KnowledgeContext::zeros() } else { random_context(rng) },
        mask: (0..frames).map(|_| f32::from(rng.random_bool(0.5) as u8)).collect(),
        actobj: (0..cfg.actobj_dim).map(|_| f32::from(rng.random_bool(0.4) as u8)).collect(),
        tokens,
        candidates,
    }
}

fn tiny_set(seed: u64, videos: usize) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig::tiny();
    let videos = (0..videos)
        .map(|i| {
            let frames = 3 + i % 3;
            let features = (0..frames * cfg.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let snippets = (0..2)
                .map(|k| {
                    let words: Vec<usize> = (0..3).map(|_| rng.random_range(4..cfg.vocab_size)).collect();
                    snippet(&mut rng, frames, k == 0, &words)
                })
                .collect();
            PreparedVideo { id: format!("v{i}"), features, num_frames: frames, snippets }
        })
        .collect();
    TrainingSet { videos }
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        warmup_steps: 10,
        max_steps: 6,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn refs(set: &TrainingSet) -> Vec<&PreparedVideo> {
    set.videos.iter().collect()
}

// ---- loss values --------------------------------------------------------

#[test]
fn half_probability_costs_ln_two() {
    assert_abs_diff_eq!(loss_snippet(&[0.5], &[1]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
    assert_abs_diff_eq!(loss_actobj(&[0.5, 0.5], &[0, 1]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
}

#[test]
fn weighted_total_of_worked_example() {
    let b = loss_total([0.2, 0.3, 1.5], [10.0, 10.0, 1.0]);
    assert_abs_diff_eq!(b.total, 6.5, epsilon = 1e-12);
}

#[test]
fn bce_rejects_non_binary_targets_and_degenerate_probabilities() {
    assert!(loss_snippet(&[0.3], &[2]).is_err());
    assert!(loss_snippet(&[1.0], &[1]).is_err());
    assert!(loss_actobj(&[0.3, 0.2], &[1]).is_err());
}

#[test]
fn candidate_sets_are_earlier_distinct_non_gold_tokens() {
    assert_eq!(
        candidate_sets(&[5, 6, 5, 7, 6]),
        vec![vec![], vec![5], vec![6], vec![5, 6], vec![5, 7]]
    );
}

/// Direct evaluation of the sentence objective for a three-token sentence.
fn sentence_oracle(d: &[Vec<f64>], targets: &[usize], eps: f64) -> f64 {
    let v = d[0].len() as f64;
    let mut nll = 0.0;
    for (row, &t) in d.iter().zip(targets) {
        for (k, p) in row.iter().enumerate() {
            let q = if k == t { 1.0 - eps } else { eps / (v - 1.0) };
            nll -= q * p.ln();
        }
    }
    nll /= targets.len() as f64;
    // position 1 penalizes token 2, position 2 penalizes tokens 2 and 3
    let ul = -(1.0 - d[1][2]).ln() - (1.0 - d[2][2]).ln() - (1.0 - d[2][3]).ln();
    nll + ul
}

#[test]
fn sentence_loss_matches_direct_evaluation() {
    let d = vec![
        vec![0.1, 0.2, 0.6, 0.1],
        vec![0.25, 0.25, 0.1, 0.4],
        vec![0.7, 0.1, 0.1, 0.1],
    ];
    let targets = [2, 3, 0];
    for eps in [0.0, 0.1] {
        let t = loss_sentence(&d, &targets, eps).unwrap();
        assert_abs_diff_eq!(t.nll + t.unlikelihood, sentence_oracle(&d, &targets, eps), epsilon = 1e-9);
    }
}

#[test]
fn sentence_loss_without_repeats_has_no_penalty_on_first_token() {
    let d = vec![vec![0.25; 4]];
    let t = loss_sentence(&d, &[1], 0.0).unwrap();
    assert_abs_diff_eq!(t.nll, 4f64.ln(), epsilon = 1e-12);
    assert_eq!(t.unlikelihood, 0.0);
}

// ---- schedule -------------------------------------------------------------

#[test]
fn schedule_at_step_one_hundred() {
    let lr = lr_schedule(100, 2000, 512, 1.0).unwrap();
    let expected = 512f64.powf(-0.5) * 100.0 * 2000f64.powf(-1.5);
    assert_abs_diff_eq!(lr, expected, epsilon = 1e-15);
    assert_abs_diff_eq!(lr, 4.9411e-5, epsilon = 1e-8);
}

#[test]
fn schedule_rejects_step_zero() {
    assert!(lr_schedule(0, 10, 16, 1.0).is_err());
}

proptest! {
    #[test]
    fn schedule_rises_then_decays(warmup in 1u64..5000, d in 1usize..1024) {
        let peak = lr_schedule(warmup, warmup, d, 1.0).unwrap();
        for s in [1, warmup / 2 + 1, warmup] {
            let lr = lr_schedule(s, warmup, d, 1.0).unwrap();
            prop_assert!(lr > 0.0 && lr <= peak * (1.0 + 1e-12));
            if s < warmup {
                prop_assert!(lr <= lr_schedule(s + 1, warmup, d, 1.0).unwrap());
            }
        }
        let late = lr_schedule(4 * warmup, warmup, d, 1.0).unwrap();
        prop_assert!((late - peak / 2.0).abs() <= 1e-12 * peak);
    }

    #[test]
    fn smoothed_targets_sum_to_one(v in 2usize..200, gold in 0usize..200, eps in 0.0f64..0.99) {
        let gold = gold % v;
        let total: f64 = (0..v).map(|k| crate::numerics::smoothed_target(k, gold, v, eps)).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }
}

// ---- tape objective -------------------------------------------------------

#[test]
fn tape_parts_agree_with_value_level_losses() {
    let set = tiny_set(1, 2);
    let model = Model::<f64>::new(ModelConfig::tiny(), 5).unwrap();
    let cfg = TrainConfig::default();
    let out = batch_loss(&model, &model.params, &refs(&set), &cfg, None, false).unwrap();
    let n = set.num_snippets() as f64;
    let (mut sel, mut act) = (0.0, 0.0);
    for v in &set.videos {
        for s in &v.snippets {
            let probs = model.snippet_selector(&v.features, v.num_frames, &s.context).unwrap();
            let mask: Vec<u8> = s.mask.iter().map(|&m| m as u8).collect();
            sel += loss_snippet(&probs, &mask).unwrap();
            let masked: Vec<f32> = v
                .features
                .chunks(ModelConfig::tiny().feature_dim)
                .zip(&probs)
                .flat_map(|(row, &p)| row.iter().map(move |&x| (f64::from(x) * p) as f32))
                .collect();
            let ao = model.action_object(&masked, v.num_frames, &s.context).unwrap();
            let target: Vec<u8> = s.actobj.iter().map(|&m| m as u8).collect();
            act += loss_actobj(&ao, &target).unwrap();
        }
    }
    assert_abs_diff_eq!(out.breakdown.snippet, sel / n, epsilon = 1e-9);
    // the value-level path rounds the masked features to f32
    assert_abs_diff_eq!(out.breakdown.actobj, act / n, epsilon = 1e-5);
    let recomposed = loss_total(
        [out.breakdown.snippet, out.breakdown.actobj, out.breakdown.sentence],
        cfg.lambdas(),
    );
    assert_abs_diff_eq!(out.breakdown.total, recomposed.total, epsilon = 1e-12);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let set = tiny_set(2, 2);
    let model = Model::<f64>::new(ModelConfig::tiny(), 9).unwrap();
    let cfg = TrainConfig::default();
    let videos = refs(&set);
    let options = GradCheckOptions {
        max_entries_per_block: Some(8),
        ..GradCheckOptions::default()
    };
    let report = grad_check(&model.params, &options, |p: &ParamStore<f64>, want| {
        let out = batch_loss(&model, p, &videos, &cfg, None, want)?;
        Ok((out.breakdown.total, out.grads))
    })
    .unwrap();
    let worst = report.worst_block().unwrap();
    assert!(report.passed, "worst block {} rel err {:e}", worst.name, worst.max_rel_err);
    assert!(report.blocks.iter().all(|b| b.entries_checked > 0));
}

#[test]
fn dropout_objective_is_rejected_by_gradient_check() {
    let set = tiny_set(2, 1);
    let cfg_model = ModelConfig { dropout: 0.3, ..ModelConfig::tiny() };
    let model = Model::<f64>::new(cfg_model, 9).unwrap();
    let cfg = TrainConfig::default();
    let videos = refs(&set);
    let mut calls = 0u64;
    let result = grad_check(&model.params, &GradCheckOptions::default(), |p: &ParamStore<f64>, want| {
        calls += 1;
        let out = batch_loss(&model, p, &videos, &cfg, Some(calls), want)?;
        Ok((out.breakdown.total, out.grads))
    });
    assert!(result.is_err());
}

#[test]
fn detached_actobj_head_gets_no_gradient_without_its_loss() {
    let set = tiny_set(4, 2);
    let model = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
    let cfg = TrainConfig {
        lambda_actobj: 0.0,
        detach_actobj_input: true,
        ..TrainConfig::default()
    };
    let out = batch_loss(&model, &model.params, &refs(&set), &cfg, None, true).unwrap();
    let grads = out.grads.unwrap();
    for name in ["actobj.3.w", "actobj.3.b", "actobj.1.w"] {
        let id = model.params.id(name).unwrap();
        let g = grads.get_or_zeros(id, model.params.get(id).len());
        assert!(g.iter().all(|&x| x == 0.0), "{name} received gradient");
    }
    let sel = model.params.id("selector.3.w").unwrap();
    assert!(grads.get_or_zeros(sel, model.params.get(sel).len()).iter().any(|&x| x != 0.0));
}

// ---- training loop ----------------------------------------------------------

fn trainer(cfg: TrainConfig) -> Trainer {
    Trainer::new(Model::new(ModelConfig::tiny(), 11).unwrap(), cfg).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let set = tiny_set(5, 3);
    let mut t = trainer(TrainConfig { lr_scale: 0.0, ..tiny_train_config() });
    let before = t.model.params.clone();
    for _ in 0..3 {
        t.train_step(&set).unwrap();
    }
    for ((_, name, a), (_, _, b)) in before.iter().zip(t.model.params.iter()) {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{name} changed");
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let set = tiny_set(6, 3);
    let cfg = TrainConfig { max_steps: 30, lr_scale: 4.0, ..tiny_train_config() };
    let mut a = trainer(cfg.clone());
    let mut b = trainer(cfg.clone());
    let ra = a.run(&set, |_, _| Ok(())).unwrap();
    let rb = b.run(&set, |_, _| Ok(())).unwrap();
    assert_eq!(ra, rb);
    let eval = |t: &Trainer| {
        batch_loss(&t.model, &t.model.params, &refs(&set), &cfg, None, false).unwrap().breakdown.total
    };
    let fresh = trainer(cfg.clone());
    assert!(eval(&a) < eval(&fresh), "{} vs {}", eval(&a), eval(&fresh));
}

#[test]
fn batches_cover_every_video_once_per_epoch() {
    let t = trainer(TrainConfig { batch_size: 2, ..tiny_train_config() });
    let mut seen: Vec<usize> = (1..=3).flat_map(|s| t.batch_indices(s, 5)).collect();
    seen.sort_unstable();
    assert_eq!(seen, vec![0, 1, 2, 3, 4]);
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let set = tiny_set(7, 3);
    let cfg = TrainConfig { max_steps: 6, ..tiny_train_config() };
    let mut straight = trainer(cfg.clone());
    let full = straight.run(&set, |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = trainer(TrainConfig { max_steps: 3, ..cfg.clone() });
    first.run(&set, |_, _| Ok(())).unwrap();
    first.checkpoint().save(dir.path()).unwrap();

    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(dir.path()).unwrap()).unwrap();
    resumed.config.max_steps = 6;
    let tail = resumed.run(&set, |_, _| Ok(())).unwrap();
    assert_eq!(&full[3..], tail.as_slice());
    for ((_, name, a), (_, _, b)) in straight.model.params.iter().zip(resumed.model.params.iter()) {
        assert_eq!(a.data(), b.data(), "{name}");
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let set = tiny_set(8, 2);
    let mut t = trainer(tiny_train_config());
    t.train_step(&set).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = t.checkpoint();
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(back.step, 1);
    assert_eq!(back.adam, ckpt.adam);
    assert_eq!(back.model_config, ckpt.model_config);
    assert_eq!(back.train_config, ckpt.train_config);
    for ((_, n1, a), (_, n2, b)) in ckpt.params.iter().zip(back.params.iter()) {
        assert_eq!((n1, a), (n2, b));
    }
}

#[test]
fn truncated_checkpoint_blob_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    trainer(tiny_train_config()).checkpoint().save(dir.path()).unwrap();
    let blob = dir.path().join("params.f32");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(crate::Error::Format { .. })));
}

#[test]
fn step_records_serialize_flat() {
    let rec = StepRecord {
        step: 2,
        lr: 0.5,
        loss: loss_total([0.1, 0.2, 0.3], [1.0, 1.0, 1.0]),
        grad_norm: 1.5,
    };
    let json: serde_json::Value = serde_json::to_value(&rec).unwrap();
    assert_abs_diff_eq!(json["total"].as_f64().unwrap(), 0.6, epsilon = 1e-12);
    assert_eq!(json["step"], 2);
}

#[test]
fn train_config_validation_names_the_field() {
    let bad = TrainConfig { label_smoothing: 1.0, ..TrainConfig::default() };
    assert!(bad.validate().unwrap_err().to_string().contains("label_smoothing"));
    let unknown = serde_json::from_str::<TrainConfig>(r#"{"lambda_snippet": 1.0, "bogus": 2}"#);
    assert!(unknown.is_err());
}

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::knowledge::KnowledgeContext;
use crate::numerics::Graph;

type Mat = Vec<Vec<f64>>;

// ---- direct matrix oracle ---------------------------------------------

fn mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn p(m: &Model<f64>, name: &str) -> Mat {
    mat(m.param(name).unwrap_or_else(|| panic!("no parameter {name}")))
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn plus(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

fn plus_row(a: &Mat, b: &Mat) -> Mat {
    a.iter().map(|x| x.iter().zip(&b[0]).map(|(u, v)| u + v).collect()).collect()
}

fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn layer_norm(x: &Mat, gamma: &Mat, beta: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gamma[0][j] + beta[0][j])
                .collect()
        })
        .collect()
}

fn softmax_row(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn linear(m: &Model<f64>, name: &str, x: &Mat) -> Mat {
    plus_row(&mm(x, &p(m, &format!("{name}.w"))), &p(m, &format!("{name}.b")))
}

fn attention(m: &Model<f64>, name: &str, q_in: &Mat, kv_in: &Mat, heads: usize, causal: bool) -> Mat {
    let q = mm(q_in, &p(m, &format!("{name}.wq")));
    let k = mm(kv_in, &p(m, &format!("{name}.wk")));
    let v = mm(kv_in, &p(m, &format!("{name}.wv")));
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let visible = if causal { i + 1 } else { k.len() };
            let scores: Vec<f64> = (0..visible)
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax_row(&scores);
            for c in 0..dh {
                out[i][h * dh + c] = (0..visible).map(|j| w[j] * v[j][h * dh + c]).sum();
            }
        }
    }
    linear(m, &format!("{name}.out"), &out)
}

fn ffn(m: &Model<f64>, name: &str, x: &Mat) -> Mat {
    let h = map(&linear(m, &format!("{name}.1"), x), gelu);
    linear(m, &format!("{name}.2"), &h)
}

fn norm(m: &Model<f64>, name: &str, x: &Mat) -> Mat {
    layer_norm(x, &p(m, &format!("{name}.gamma")), &p(m, &format!("{name}.beta")))
}

fn pe(rows: usize, d: usize) -> Mat {
    (0..rows)
        .map(|pos| {
            (0..d)
                .map(|i| {
                    let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                    if i % 2 == 0 { angle.sin() } else { angle.cos() }
                })
                .collect()
        })
        .collect()
}

fn oracle_encoder(m: &Model<f64>, masked: &Mat, actobj: &[f64], ctx: &[f64]) -> Mat {
    let c = m.config();
    let mut joined = actobj.to_vec();
    joined.extend_from_slice(ctx);
    let mut tokens = linear(m, "encoder.context_in", &vec![joined]);
    tokens.extend(linear(m, "encoder.frame_in", masked));
    let mut x = plus(&tokens, &pe(tokens.len(), c.d_model));
    for l in 0..c.enc_layers {
        let h = norm(m, &format!("encoder.{l}.norm1"), &x);
        x = plus(&x, &attention(m, &format!("encoder.{l}.attn"), &h, &h, c.heads, false));
        let h = norm(m, &format!("encoder.{l}.norm2"), &x);
        x = plus(&x, &ffn(m, &format!("encoder.{l}.ffn"), &h));
    }
    x
}

fn oracle_decoder_logits(m: &Model<f64>, prefix: &[usize], memory: &Mat) -> Vec<f64> {
    let c = m.config();
    let table = p(m, "decoder.embedding");
    let emb: Mat = prefix.iter().map(|&t| table[t].clone()).collect();
    let mut x = plus(&emb, &pe(prefix.len(), c.d_model));
    for l in 0..c.dec_layers {
        let h = norm(m, &format!("decoder.{l}.norm1"), &x);
        x = plus(&x, &attention(m, &format!("decoder.{l}.self_attn"), &h, &h, c.heads, true));
        let h = norm(m, &format!("decoder.{l}.norm2"), &x);
        x = plus(&x, &attention(m, &format!("decoder.{l}.cross_attn"), &h, memory, c.heads, false));
        let h = norm(m, &format!("decoder.{l}.norm3"), &x);
        x = plus(&x, &ffn(m, &format!("decoder.{l}.ffn"), &h));
    }
    let last = vec![x.last().unwrap().clone()];
    let state = norm(m, "decoder.final_norm", &last);
    linear(m, "decoder.output", &state)[0].clone()
}

// ---- fixtures ----------------------------------------------------------

fn small_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 2,
        d_model: 2,
        heads: 1,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 3,
        vocab_size: 6,
        actobj_dim: 3,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn set(m: &mut Model<f64>, name: &str, values: &[f64]) {
    let t = m.param_mut(name).unwrap();
    assert_eq!(t.len(), values.len(), "{name}");
    t.data_mut().copy_from_slice(values);
}

fn zero(m: &mut Model<f64>, name: &str) {
    m.param_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
}

fn random_context(seed: u64) -> KnowledgeContext {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v = || (0..KNOWLEDGE_DIM).map(|_| rng.random_range(-0.05f32..0.05)).collect();
    KnowledgeContext { m: v(), g: v(), h: v() }
}

fn features(t: usize, d: usize, seed: u64) -> Vec<f32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..t * d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

// ---- selector ----------------------------------------------------------

#[test]
fn zeroed_selector_output_is_one_half() {
    let mut m = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
    zero(&mut m, "selector.3.w");
    zero(&mut m, "selector.3.b");
    let n = m.snippet_selector(&features(5, 6, 2), 5, &random_context(3)).unwrap();
    assert_eq!(n, vec![0.5; 5]);
}

#[test]
fn selector_covers_full_length_video() {
    let cfg = ModelConfig {
        feature_dim: 4096,
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 16,
        vocab_size: 8,
        ..ModelConfig::default()
    };
    let m = Model::<f32>::new(cfg, 0).unwrap();
    let n = m.snippet_selector(&features(150, 4096, 1), 150, &KnowledgeContext::zeros()).unwrap();
    assert_eq!(n.len(), 150);
    assert!(n.iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(m.snippet_selector(&features(151, 4096, 1), 151, &KnowledgeContext::zeros()).is_err());
}

#[test]
fn selector_matches_hand_evaluation() {
    let mut m = Model::<f64>::new(small_config(), 0).unwrap();
    set(&mut m, "selector.1.w_frame", &[0.5, -1.0, 1.0, 0.25]);
    set(&mut m, "selector.1.b", &[0.1, -0.2]);
    set(&mut m, "selector.2.w", &[1.0, 0.5, -0.5, 1.0]);
    set(&mut m, "selector.2.b", &[0.0, 0.1]);
    set(&mut m, "selector.3.w", &[2.0, -1.0]);
    set(&mut m, "selector.3.b", &[0.3]);
    let n = m.snippet_selector(&[1.0, 0.0, 0.0, 2.0], 2, &KnowledgeContext::zeros()).unwrap();

    // frame 0 = (1, 0): layer 1 pre-activations (0.6, -1.2)
    let (a, b) = (0.6f64.tanh(), (-1.2f64).tanh());
    let (c, d) = ((a - 0.5 * b).tanh(), (0.5 * a + b + 0.1).tanh());
    let n0 = sig(2.0 * c - d + 0.3);
    // frame 1 = (0, 2): layer 1 pre-activations (2.1, 0.3)
    let (a, b) = (2.1f64.tanh(), 0.3f64.tanh());
    let (c, d) = ((a - 0.5 * b).tanh(), (0.5 * a + b + 0.1).tanh());
    let n1 = sig(2.0 * c - d + 0.3);
    assert_abs_diff_eq!(n[0], n0, epsilon = 1e-12);
    assert_abs_diff_eq!(n[1], n1, epsilon = 1e-12);
}

// ---- mask --------------------------------------------------------------

fn masked(v: &[f64], rows: usize, mask: &[f64]) -> Vec<f64> {
    let m = Model::<f64>::new(small_config(), 0).unwrap();
    let mut g = Graph::new(&m.params);
    let cols = v.len() / rows;
    let fv = g.constant_matrix(rows, cols, v.to_vec()).unwrap();
    let nv = g.constant_matrix(rows, 1, mask.to_vec()).unwrap();
    let out = m.apply_snippet_mask(&mut g, fv, nv).unwrap();
    g.value(out).to_vec()
}

#[test]
fn mask_identity_null_and_definition() {
    let v = [2.0, 2.0, 3.0, 3.0];
    assert_eq!(masked(&v, 2, &[1.0, 1.0]), v.to_vec());
    assert_eq!(masked(&v, 2, &[0.0, 0.0]), vec![0.0; 4]);
    assert_eq!(masked(&v, 2, &[1.0, 0.0]), vec![2.0, 2.0, 0.0, 0.0]);
}

proptest! {
    #[test]
    fn mask_is_linear_in_the_mask(
        v in prop::collection::vec(-5.0f64..5.0, 6),
        n in prop::collection::vec(0.0f64..1.0, 3),
        alpha in 0.0f64..2.0,
    ) {
        let scaled: Vec<f64> = n.iter().map(|x| alpha * x).collect();
        let a = masked(&v, 3, &scaled);
        let b: Vec<f64> = masked(&v, 3, &n).iter().map(|x| alpha * x).collect();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}

// ---- action-object -----------------------------------------------------

#[test]
fn zeroed_actobj_output_is_one_half() {
    let mut m = Model::<f64>::new(ModelConfig::tiny(), 4).unwrap();
    zero(&mut m, "actobj.3.w");
    zero(&mut m, "actobj.3.b");
    let a = m.action_object(&features(4, 6, 1), 4, &random_context(2)).unwrap();
    assert_eq!(a, vec![0.5; 5]);
}

#[test]
fn actobj_width_follows_label_space() {
    let cfg = ModelConfig {
        feature_dim: 8,
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 16,
        vocab_size: 8,
        actobj_dim: 12 + 61 + 604,
        ..ModelConfig::default()
    };
    let m = Model::<f32>::new(cfg, 0).unwrap();
    let a = m.action_object(&features(3, 8, 1), 3, &KnowledgeContext::zeros()).unwrap();
    assert_eq!(a.len(), 677);
}

#[test]
fn actobj_matches_hand_evaluation() {
    let mut m = Model::<f64>::new(small_config(), 0).unwrap();
    // Only the two feature rows of the first layer matter with a zero context.
    let mut w1 = vec![0.0; (2 + 3 * KNOWLEDGE_DIM) * 2];
    w1[..4].copy_from_slice(&[1.0, -1.0, 0.5, 2.0]);
    set(&mut m, "actobj.1.w", &w1);
    set(&mut m, "actobj.1.b", &[0.0, 0.5]);
    set(&mut m, "actobj.2.w", &[1.0, 0.0, 0.0, -1.0]);
    set(&mut m, "actobj.2.b", &[0.2, 0.0]);
    set(&mut m, "actobj.3.w", &[1.0, 0.0, -2.0, 0.0, 1.0, 3.0]);
    set(&mut m, "actobj.3.b", &[0.0, 0.0, 0.1]);
    // frames (2, 0) and (0, 1) pool to (1, 0.5)
    let a = m.action_object(&[2.0, 0.0, 0.0, 1.0], 2, &KnowledgeContext::zeros()).unwrap();
    let (h1, h2) = ((1.0f64 + 0.25).tanh(), (-1.0f64 + 1.0 + 0.5).tanh());
    let (k1, k2) = ((h1 + 0.2).tanh(), (-h2).tanh());
    let want = [sig(k1), sig(k2), sig(-2.0 * k1 + 3.0 * k2 + 0.1)];
    for (x, y) in a.iter().zip(want) {
        assert_abs_diff_eq!(*x, y, epsilon = 1e-12);
    }
}

// ---- encoder -----------------------------------------------------------

#[test]
fn encoder_with_zeroed_sublayers_is_identity() {
    let cfg = ModelConfig { enc_layers: 2, ..ModelConfig::tiny() };
    let mut m = Model::<f64>::new(cfg, 9).unwrap();
    for l in 0..2 {
        for name in ["attn.out.w", "attn.out.b", "ffn.2.w", "ffn.2.b"] {
            zero(&mut m, &format!("encoder.{l}.{name}"));
        }
    }
    let ctx = random_context(1);
    let v = features(5, 6, 3);
    let a = [0.1, 0.9, 0.5, 0.2, 0.7];
    let out = m.encode(&v, 5, &a, &ctx).unwrap();

    let mut g = Graph::new(&m.params);
    let fv = m.features_var(&mut g, &v, 5).unwrap();
    let av = g.constant_matrix(1, 5, a.to_vec()).unwrap();
    let cv = m.context_var(&mut g, &ctx).unwrap();
    let x = m.encoder_input(&mut g, fv, av, cv).unwrap();
    assert_eq!(out.data(), g.value(x));
    assert_eq!(out.shape(), &[6, 16]);
}

#[test]
fn encoder_output_has_model_width() {
    let cfg = ModelConfig { d_model: 512, heads: 8, ffn_dim: 64, enc_layers: 1, dec_layers: 1, feature_dim: 4, vocab_size: 8, actobj_dim: 3, ..ModelConfig::default() };
    let m = Model::<f32>::new(cfg, 0).unwrap();
    let e = m.encode(&features(7, 4, 0), 7, &[0.5; 3], &KnowledgeContext::zeros()).unwrap();
    assert_eq!(e.shape(), &[8, 512]);
}

#[test]
fn single_head_attention_matches_hand_evaluation() {
    let mut m = Model::<f64>::new(small_config(), 0).unwrap();
    // Two tokens whose normalized forms are (-1, 1) and (1, -1).
    let x: Vec<f64> = vec![0.0, 1.0, 3.0, 1.0];
    set(&mut m, "encoder.0.attn.wq", &[1.0, 0.0, 0.0, 1.0]);
    set(&mut m, "encoder.0.attn.wk", &[2.0, 0.0, 0.0, 0.0]);
    set(&mut m, "encoder.0.attn.wv", &[1.0, 2.0, 0.0, 1.0]);
    set(&mut m, "encoder.0.attn.out.w", &[1.0, 0.0, 0.0, 1.0]);
    zero(&mut m, "encoder.0.ffn.2.w");
    let mut g = Graph::new(&m.params);
    let xv = g.constant_matrix(2, 2, x.clone()).unwrap();
    let y = m.encoder_layers(&mut g, xv).unwrap();
    let y = g.value(y).to_vec();

    // Layer norm of (0, 1) and (3, 1) with eps 1e-5.
    let s = 1.0 / (0.25f64 + 1e-5).sqrt() * 0.5;
    let s2 = 1.0 / (1.0f64 + 1e-5).sqrt();
    let h = [[-s, s], [s2, -s2]];
    // q = h, k = (2 h_0, 0), v = (h_0, 2 h_0 + h_1); scores scaled by 1/sqrt(2).
    let k = [2.0 * h[0][0], 2.0 * h[1][0]];
    let v = [[h[0][0], 2.0 * h[0][0] + h[0][1]], [h[1][0], 2.0 * h[1][0] + h[1][1]]];
    let mut want = x.clone();
    for i in 0..2 {
        let z = [h[i][0] * k[0] / 2f64.sqrt(), h[i][0] * k[1] / 2f64.sqrt()];
        let e = [(z[0] - z[1]).exp(), 1.0];
        let w = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        for c in 0..2 {
            want[i * 2 + c] += w[0] * v[0][c] + w[1] * v[1][c];
        }
    }
    for (a, b) in y.iter().zip(&want) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
    }
}

#[test]
fn encoder_matches_matrix_oracle() {
    let cfg = ModelConfig { enc_layers: 2, ..ModelConfig::tiny() };
    let m = Model::<f64>::new(cfg, 21).unwrap();
    let ctx = random_context(5);
    let v = features(4, 6, 6);
    let a = [0.3, 0.6, 0.1, 0.8, 0.4];
    let got = m.encode(&v, 4, &a, &ctx).unwrap();
    let rows: Mat = v.chunks(6).map(|r| r.iter().map(|&x| f64::from(x)).collect()).collect();
    let ctx64: Vec<f64> = ctx.concat().iter().map(|&x| f64::from(x)).collect();
    let want = oracle_encoder(&m, &rows, &a, &ctx64);
    for (g, w) in got.data().iter().zip(want.iter().flatten()) {
        assert_abs_diff_eq!(*g, *w, epsilon = 1e-10);
    }
}

#[test]
fn token_stride_pools_frames() {
    let cfg = ModelConfig { token_stride: 3, ..ModelConfig::tiny() };
    let m = Model::<f64>::new(cfg, 0).unwrap();
    let e = m.encode(&features(7, 6, 0), 7, &[0.5; 5], &KnowledgeContext::zeros()).unwrap();
    assert_eq!(e.rows(), 4);
    assert_eq!(m.config().encoded_len(7), 4);
}

// ---- memory ------------------------------------------------------------

#[test]
fn degenerate_gates_leave_memory_unchanged() {
    let mem = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0]).unwrap();
    let out = apply_gates(&mem, &[0.3, 0.7], &[0.0; 3], &[0.0; 3]).unwrap();
    assert_eq!(out, mem);
}

#[test]
fn model_memory_with_closed_gates_is_unchanged() {
    let mut m = Model::<f64>::new(ModelConfig::tiny(), 3).unwrap();
    zero(&mut m, "memory.erase.w");
    set(&mut m, "memory.erase.b", &[-60.0; 16]);
    zero(&mut m, "memory.add.w");
    zero(&mut m, "memory.add.b");
    let mem = Tensor::matrix(3, 16, (0..48).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let state = SnippetMemoryState { memory: mem.clone(), step: 0 };
    let next = m.memory_update(&state, &[0.2; 16]).unwrap();
    assert_eq!(next.step, 1);
    for (a, b) in next.memory.data().iter().zip(mem.data()) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-20);
    }
}

#[test]
fn one_slot_memory_matches_hand_evaluation() {
    let mut m = Model::<f64>::new(small_config(), 0).unwrap();
    set(&mut m, "memory.erase.w", &[1.0, 0.0, 0.0, -1.0]);
    set(&mut m, "memory.erase.b", &[0.0, 0.5]);
    set(&mut m, "memory.add.w", &[0.5, 0.0, 1.0, 1.0]);
    set(&mut m, "memory.add.b", &[0.1, 0.0]);
    let state = SnippetMemoryState { memory: Tensor::matrix(1, 2, vec![2.0, -1.0]).unwrap(), step: 4 };
    let q = [0.4, -0.6];
    let next = m.memory_update(&state, &q).unwrap();
    // a single slot receives all write weight
    let e = [sig(0.4), sig(0.6 + 0.5)];
    let u = [(0.2f64 - 0.6 + 0.1).tanh(), (-0.6f64).tanh()];
    let want = [2.0 * (1.0 - e[0]) + u[0], -(1.0 - e[1]) + u[1]];
    assert_abs_diff_eq!(next.memory.data()[0], want[0], epsilon = 1e-12);
    assert_abs_diff_eq!(next.memory.data()[1], want[1], epsilon = 1e-12);
    assert_eq!(next.step, 5);
}

#[test]
fn non_finite_query_is_rejected() {
    let m = Model::<f64>::new(ModelConfig::tiny(), 0).unwrap();
    let state = SnippetMemoryState { memory: Tensor::zeros(&[2, 16]), step: 0 };
    let mut q = vec![0.0; 16];
    q[3] = f64::NAN;
    assert!(m.memory_update(&state, &q).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn erase_only_memory_is_non_expansive(
        mem in prop::collection::vec(-3.0f64..3.0, 12),
        raw_w in prop::collection::vec(0.0f64..1.0, 3),
        e in prop::collection::vec(0.0f64..1.0, 4),
    ) {
        let total: f64 = raw_w.iter().sum::<f64>() + 1e-9;
        let w: Vec<f64> = raw_w.iter().map(|x| x / total).collect();
        let before = Tensor::matrix(3, 4, mem).unwrap();
        let after = apply_gates(&before, &w, &e, &[0.0; 4]).unwrap();
        for j in 0..3 {
            let n0: f64 = before.row_slice(j).iter().map(|x| x * x).sum();
            let n1: f64 = after.row_slice(j).iter().map(|x| x * x).sum();
            prop_assert!(n1 <= n0 + 1e-12);
        }
    }
}

// ---- decoder -----------------------------------------------------------

fn memory_fixture(m: &Model<f64>, slots: usize) -> Tensor<f64> {
    let d = m.config().d_model;
    Tensor::matrix(slots, d, (0..slots * d).map(|i| (i as f64 * 0.61).cos()).collect()).unwrap()
}

#[test]
fn decoder_distribution_sums_to_one() {
    let m = Model::<f64>::new(ModelConfig::tiny(), 8).unwrap();
    let mut g = Graph::new(&m.params);
    let mem = g.constant(&memory_fixture(&m, 4)).unwrap();
    let (logits, _) = m.decoder_step(&mut g, &[0, 5, 7], mem).unwrap();
    let probs = g.softmax(logits, false).unwrap();
    let s: f64 = g.value(probs).iter().sum();
    assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
    assert_eq!(g.shape(probs), (1, 20));
}

#[test]
fn decoder_is_causal() {
    let m = Model::<f64>::new(ModelConfig { dec_layers: 2, ..ModelConfig::tiny() }, 8).unwrap();
    let mut g = Graph::new(&m.params);
    let mem = g.constant(&memory_fixture(&m, 4)).unwrap();
    let a = m.decoder_states(&mut g, &[0, 5, 7, 9], mem).unwrap();
    let b = m.decoder_states(&mut g, &[0, 5, 11, 4], mem).unwrap();
    let d = 16;
    assert_eq!(&g.value(a)[..2 * d], &g.value(b)[..2 * d]);
    assert_ne!(&g.value(a)[2 * d..3 * d], &g.value(b)[2 * d..3 * d]);
}

#[test]
fn decoder_matches_matrix_oracle() {
    let m = Model::<f64>::new(ModelConfig::tiny(), 17).unwrap();
    let mem = memory_fixture(&m, 5);
    let prefix = [0, 6, 9, 6];
    let mut g = Graph::new(&m.params);
    let mv = g.constant(&mem).unwrap();
    let (logits, _) = m.decoder_step(&mut g, &prefix, mv).unwrap();
    let want = oracle_decoder_logits(&m, &prefix, &mat(&mem));
    for (a, b) in g.value(logits).iter().zip(&want) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
    }
}

#[test]
fn overlong_prefix_is_rejected() {
    let m = Model::<f64>::new(ModelConfig { max_sentence_len: 3, ..ModelConfig::tiny() }, 0).unwrap();
    let mut g = Graph::new(&m.params);
    let mem = g.constant(&memory_fixture(&m, 2)).unwrap();
    assert!(m.decoder_step(&mut g, &[0, 4, 4, 4], mem).is_ok());
    assert!(m.decoder_step(&mut g, &[0, 4, 4, 4, 4], mem).is_err());
}

#[test]
fn teacher_forcing_writes_memory_between_steps() {
    let m = Model::<f64>::new(ModelConfig::tiny(), 5).unwrap();
    let tokens = [0, 7, 8, 1];
    let mut g = Graph::new(&m.params);
    let mem0 = g.constant(&memory_fixture(&m, 3)).unwrap();
    let logits = m.teacher_forced_logits(&mut g, &tokens, mem0).unwrap();
    assert_eq!(g.shape(logits), (3, 20));

    let mut h = Graph::new(&m.params);
    let mut mem = h.constant(&memory_fixture(&m, 3)).unwrap();
    for j in 1..tokens.len() {
        let (l, s) = m.decoder_step(&mut h, &tokens[..j], mem).unwrap();
        assert_eq!(h.value(l), &g.value(logits)[(j - 1) * 20..j * 20]);
        mem = m.memory_update_var(&mut h, mem, s).unwrap();
    }
}

// ---- construction ------------------------------------------------------

#[test]
fn forward_is_deterministic() {
    let m = Model::<f32>::new(ModelConfig::tiny(), 2).unwrap();
    let ctx = random_context(4);
    let v = features(8, 6, 1);
    let a = m.snippet_selector(&v, 8, &ctx).unwrap();
    let b = m.snippet_selector(&v, 8, &ctx).unwrap();
    assert_eq!(a, b);
    let m2 = Model::<f32>::new(ModelConfig::tiny(), 2).unwrap();
    assert_eq!(m2.snippet_selector(&v, 8, &ctx).unwrap(), a);
}

#[test]
fn rebinding_parameters_round_trips() {
    let m = Model::<f32>::new(ModelConfig::tiny(), 2).unwrap();
    let again = Model::from_params(m.config().clone(), m.params.clone()).unwrap();
    let v = features(3, 6, 1);
    let ctx = random_context(0);
    assert_eq!(
        m.snippet_selector(&v, 3, &ctx).unwrap(),
        again.snippet_selector(&v, 3, &ctx).unwrap()
    );
    let other = ModelConfig { d_model: 32, ..ModelConfig::tiny() };
    assert!(Model::from_params(other, m.params.clone()).is_err());
}

#[test]
fn config_validation_names_fields() {
    let bad = ModelConfig { heads: 3, ..ModelConfig::tiny() };
    match bad.validate() {
        Err(Error::Config { field, .. }) => assert_eq!(field, "heads"),
        other => panic!("{other:?}"),
    }
    let bad = ModelConfig { context_dim: 100, ..ModelConfig::tiny() };
    assert!(bad.validate().is_err());
}

#[test]
fn defaults_mirror_reference_settings() {
    let c = ModelConfig::default();
    assert_eq!((c.d_model, c.heads, c.enc_layers, c.dec_layers), (512, 8, 3, 3));
    assert_eq!((c.max_frames, c.max_snippets, c.max_sentence_len), (150, 20, 150));
    assert_eq!((c.feature_dim, c.actobj_dim), (4096, 677));
}

//! Central finite-difference checks of the analytic gradients.
//!
//! Each check builds a small randomized graph, reduces its output to a
//! scalar with a fixed random projection, and compares every parameter
//! gradient entry against `(f(w + h) - f(w - h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::layers::{attention_pool, bilstm, dense, AttentionWeights, LstmWeights};
use crate::model::{Model, ModelSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, 1e-7)`; the floor keeps entries that are zero
/// both ways (e.g. non-winning pool inputs) from dividing by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Largest relative error over all parameter entries of `store`.
pub fn max_relative_error(store: &ParamStore, f: impl Fn(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut grads = store.zeros_like();
    {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        g.backward(out, &mut grads);
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let out = f(&mut g)?;
        Ok(g.value(out).data[0])
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    #[allow(clippy::needless_range_loop)]
    for p in 0..store.len() {
        for i in 0..store.tensors[p].len() {
            let orig = probe.tensors[p].data[i];
            probe.tensors[p].data[i] = orig + STEP;
            let plus = eval(&probe)?;
            probe.tensors[p].data[i] = orig - STEP;
            let minus = eval(&probe)?;
            probe.tensors[p].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(grads[p].data[i], numeric));
        }
    }
    Ok(worst)
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape")
}

/// Random values whose magnitudes stay at least `gap` away from zero.
fn away_from_zero(rows: usize, cols: usize, gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    random(rows, cols, rng).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// Distinct values spaced `spacing` apart in random order, so pooling has
/// no near-ties within a finite-difference step.
fn spaced(rows: usize, cols: usize, spacing: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut v: Vec<f64> = (0..rows * cols).map(|i| i as f64 * spacing - 1.0).collect();
    rand::seq::SliceRandom::shuffle(&mut v[..], rng);
    Tensor::from_vec(rows, cols, v).expect("shape")
}

fn project(g: &mut Graph, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let (r, c) = g.value(out).shape();
    let weights = g.constant(random(r, c, rng));
    let prod = g.mul(out, weights)?;
    Ok(g.sum_all(prod))
}

pub fn check_dense(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::default();
    s.add("x", random(3, 4, &mut rng), false, true);
    s.add("w", random(4, 5, &mut rng), true, true);
    s.add("b", random(1, 5, &mut rng), false, true);
    let proj_seed = rng.random();
    max_relative_error(&s, |g| {
        let (x, w, b) = (g.param(0), g.param(1), g.param(2));
        let y = dense(g, x, w, b)?;
        project(g, y, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })
}

pub fn check_conv1d(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::default();
    s.add("x", random(7, 3, &mut rng), false, true);
    s.add("w", random(5 * 3, 4, &mut rng), true, true);
    s.add("b", random(1, 4, &mut rng), false, true);
    let proj_seed = rng.random();
    max_relative_error(&s, |g| {
        let (x, w, b) = (g.param(0), g.param(1), g.param(2));
        let y = g.conv1d(x, w, b, 5)?;
        project(g, y, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })
}

pub fn check_relu(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::default();
    s.add("x", away_from_zero(4, 5, 0.01, &mut rng), false, true);
    let proj_seed = rng.random();
    max_relative_error(&s, |g| {
        let x = g.param(0);
        let y = g.relu(x);
        project(g, y, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })
}

pub fn check_maxpool(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::default();
    s.add("x", spaced(11, 3, 0.01, &mut rng), false, true);
    let proj_seed = rng.random();
    max_relative_error(&s, |g| {
        let x = g.param(0);
        let y = g.maxpool1d(x, 3, 2)?;
        project(g, y, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })
}

pub fn check_lstm(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (input, h) = (3, 2);
    let mut s = ParamStore::default();
    s.add("x", random(3, input, &mut rng), false, true);
    for l in 0..2 {
        let inp = if l == 0 { input } else { 2 * h };
        for _ in 0..2 {
            s.add("w", random(inp, 4 * h, &mut rng), true, true);
            s.add("u", random(h, 4 * h, &mut rng), true, true);
            s.add("b", random(1, 4 * h, &mut rng), false, true);
        }
    }
    let proj_seed = rng.random();
    max_relative_error(&s, |g| {
        let mut x = g.param(0);
        for l in 0..2 {
            let base = 1 + l * 6;
            let fwd = LstmWeights {
                w: g.param(base),
                u: g.param(base + 1),
                b: g.param(base + 2),
            };
            let bwd = LstmWeights {
                w: g.param(base + 3),
                u: g.param(base + 4),
                b: g.param(base + 5),
            };
            x = bilstm(g, x, fwd, bwd, h)?;
        }
        project(g, x, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })
}

pub fn check_attention(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::default();
    s.add("f", random(5, 4, &mut rng), false, true);
    s.add("w", random(4, 3, &mut rng), true, true);
    s.add("b", random(1, 3, &mut rng), false, true);
    s.add("v", random(3, 1, &mut rng), true, true);
    let proj_seed = rng.random();
    let mask = [true, true, false, true, true];
    max_relative_error(&s, |g| {
        let f = g.param(0);
        let p = AttentionWeights {
            w: g.param(1),
            b: g.param(2),
            v: g.param(3),
        };
        let (ctx, weights) = attention_pool(g, f, p, Some(&mask))?;
        let both = g.concat_cols(&[ctx, weights])?;
        project(g, both, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })
}

pub fn check_softmax_cross_entropy(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::default();
    s.add("logits", random(1, 5, &mut rng).map(|v| 2.0 * v), false, true);
    let label = rng.random_range(0..5);
    max_relative_error(&s, |g| {
        let x = g.param(0);
        let p = g.softmax(x, None)?;
        g.cross_entropy(p, label)
    })
}

pub fn check_gates(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::default();
    s.add("x", random(3, 4, &mut rng), false, true);
    s.add("y", random(3, 4, &mut rng), false, true);
    let proj_seed = rng.random();
    max_relative_error(&s, |g| {
        let (x, y) = (g.param(0), g.param(1));
        let a = g.sigmoid(x);
        let b = g.tanh(y);
        let m = g.mul(a, b)?;
        let t = g.transpose(m);
        let r = g.reshape(t, 1, 12)?;
        let sl = g.slice_cols(r, 2, 7)?;
        let sc = g.scale(sl, -1.5);
        project(g, sc, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })
}

pub fn check_embedding(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::default();
    s.add("e", random(5, 3, &mut rng), true, true);
    let ids: Vec<usize> = (0..6).map(|_| rng.random_range(1..5)).collect();
    let proj_seed = rng.random();
    max_relative_error(&s, |g| {
        let e = g.param(0);
        let rows = g.gather(e, &ids, None)?;
        project(g, rows, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })
}

/// Whole-model check through every CNN layer with dropout off. ReLU kinks
/// can sit within one step of a pre-activation, so this is reported but
/// not part of the per-op suite.
pub fn check_model(spec: ModelSpec, tokens: &[u32], label: usize, seed: u64) -> Result<f64> {
    let model = Model::new(spec, "", seed, None)?;
    max_relative_error(&model.params, |g| {
        let p = model.forward(g, tokens, None)?;
        g.cross_entropy(p, label)
    })
}

/// Every per-op check for one seed, by name.
pub fn run_all(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    Ok(vec![
        ("dense", check_dense(seed)?),
        ("conv1d", check_conv1d(seed)?),
        ("relu", check_relu(seed)?),
        ("maxpool1d", check_maxpool(seed)?),
        ("lstm", check_lstm(seed)?),
        ("attention_pool", check_attention(seed)?),
        ("softmax_cross_entropy", check_softmax_cross_entropy(seed)?),
        ("gates_and_reshapes", check_gates(seed)?),
        ("embedding_gather", check_embedding(seed)?),
    ])
}

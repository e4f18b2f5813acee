//! Layer helpers built from graph primitives.

use crate::error::{shape, Result};
use crate::graph::{Graph, Var};

/// `x · W + b`.
pub fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

/// Conv (same padding) → ReLU → max pool.
pub fn conv_block(g: &mut Graph, x: Var, w: Var, b: Var, kernel: usize, pool: (usize, usize)) -> Result<Var> {
    let c = g.conv1d(x, w, b, kernel)?;
    let r = g.relu(c);
    g.maxpool1d(r, pool.0, pool.1)
}

/// LSTM weights: `w` is `in x 4h`, `u` is `h x 4h`, `b` is `1 x 4h`, gate
/// blocks ordered input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

/// One LSTM direction over all rows of `x` (`T x in`). Returns `T x h`
/// hidden states in the original time order.
pub fn lstm(g: &mut Graph, x: Var, p: LstmWeights, hidden: usize, reverse: bool) -> Result<Var> {
    let t = g.value(x).rows;
    if t == 0 {
        return Err(shape("lstm", "empty sequence"));
    }
    if g.value(p.u).shape() != (hidden, 4 * hidden) {
        return Err(shape(
            "lstm",
            format!("recurrent weights {:?} for hidden {hidden}", g.value(p.u).shape()),
        ));
    }
    let xw = g.matmul(x, p.w)?;
    let xwb = g.add_bias(xw, p.b)?;
    let mut state: Option<(Var, Var)> = None;
    let mut outputs = vec![None; t];
    let order: Vec<usize> = if reverse {
        (0..t).rev().collect()
    } else {
        (0..t).collect()
    };
    for step in order {
        let mut gates = g.slice_rows(xwb, step, 1)?;
        if let Some((h, _)) = state {
            let hu = g.matmul(h, p.u)?;
            gates = g.add(gates, hu)?;
        }
        let i = g.slice_cols(gates, 0, hidden)?;
        let f = g.slice_cols(gates, hidden, hidden)?;
        let c_hat = g.slice_cols(gates, 2 * hidden, hidden)?;
        let o = g.slice_cols(gates, 3 * hidden, hidden)?;
        let i = g.sigmoid(i);
        let o = g.sigmoid(o);
        let c_hat = g.tanh(c_hat);
        let mut c = g.mul(i, c_hat)?;
        if let Some((_, c_prev)) = state {
            let f = g.sigmoid(f);
            let kept = g.mul(f, c_prev)?;
            c = g.add(c, kept)?;
        }
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        outputs[step] = Some(h);
        state = Some((h, c));
    }
    let rows: Vec<Var> = outputs.into_iter().map(|v| v.expect("every step visited")).collect();
    g.concat_rows(&rows)
}

/// Forward and time-reversed passes concatenated per step (`T x 2h`).
pub fn bilstm(g: &mut Graph, x: Var, fwd: LstmWeights, bwd: LstmWeights, hidden: usize) -> Result<Var> {
    let a = lstm(g, x, fwd, hidden, false)?;
    let b = lstm(g, x, bwd, hidden, true)?;
    g.concat_cols(&[a, b])
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    /// `h x a`
    pub w: Var,
    /// `1 x a`
    pub b: Var,
    /// `a x 1`
    pub v: Var,
}

/// `score_t = vᵀ tanh(W f_t + b)`, softmax over unmasked steps, context
/// `Σ α_t f_t`. Returns `(context 1 x h, weights 1 x T)`.
pub fn attention_pool(g: &mut Graph, features: Var, p: AttentionWeights, mask: Option<&[bool]>) -> Result<(Var, Var)> {
    let proj = dense(g, features, p.w, p.b)?;
    let act = g.tanh(proj);
    let scores = g.matmul(act, p.v)?;
    let row = g.transpose(scores);
    let weights = g.softmax(row, mask)?;
    let context = g.matmul(weights, features)?;
    Ok((context, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn lstm_store(input: usize, hidden: usize, scale: f64) -> ParamStore {
        let mut s = ParamStore::default();
        let fill = |r: usize, c: usize, k: f64| {
            Tensor::from_vec(
                r,
                c,
                (0..r * c).map(|i| ((i * 37 % 17) as f64 / 17.0 - 0.5) * k).collect(),
            )
            .unwrap()
        };
        s.add("x", fill(3, input, 1.0), false, true);
        s.add("w", fill(input, 4 * hidden, scale), true, true);
        s.add("u", fill(hidden, 4 * hidden, scale), true, true);
        s.add("b", fill(1, 4 * hidden, scale), false, true);
        s
    }

    #[test]
    fn zero_weights_zero_outputs() {
        let s = lstm_store(2, 3, 0.0);
        let mut g = Graph::new(&s);
        let (x, w, u, b) = (g.param(0), g.param(1), g.param(2), g.param(3));
        let h = lstm(&mut g, x, LstmWeights { w, u, b }, 3, false).unwrap();
        assert!(g.value(h).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_is_one_cell() {
        let s = lstm_store(2, 2, 1.0);
        let mut g = Graph::new(&s);
        let (x, w, u, b) = (g.param(0), g.param(1), g.param(2), g.param(3));
        let x0 = g.slice_rows(x, 0, 1).unwrap();
        let h = lstm(&mut g, x0, LstmWeights { w, u, b }, 2, false).unwrap();
        // hand-rolled cell with zero initial state
        let (xv, wv, bv) = (s.tensors[0].row(0), &s.tensors[1], &s.tensors[3]);
        let z: Vec<f64> = (0..8)
            .map(|j| bv.data[j] + xv[0] * wv.get(0, j) + xv[1] * wv.get(1, j))
            .collect();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for k in 0..2 {
            let c = sig(z[k]) * z[4 + k].tanh();
            let expect = sig(z[6 + k]) * c.tanh();
            assert!((g.value(h).data[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_trivial_cases() {
        let mut s = ParamStore::default();
        s.add(
            "f",
            Tensor::from_vec(2, 2, vec![0.3, -0.7, 0.3, -0.7]).unwrap(),
            false,
            true,
        );
        s.add(
            "w",
            Tensor::from_vec(2, 3, vec![0.1, 0.2, -0.3, 0.4, 0.5, 0.6]).unwrap(),
            true,
            true,
        );
        s.add("b", Tensor::zeros(1, 3), false, true);
        s.add("v", Tensor::from_vec(3, 1, vec![1.0, -1.0, 0.5]).unwrap(), true, true);
        let mut g = Graph::new(&s);
        let (f, w, b, v) = (g.param(0), g.param(1), g.param(2), g.param(3));
        let p = AttentionWeights { w, b, v };
        let (ctx, a) = attention_pool(&mut g, f, p, None).unwrap();
        assert_eq!(g.value(a).data, vec![0.5, 0.5]);
        assert!((g.value(ctx).data[0] - 0.3).abs() < 1e-15);
        let one = g.slice_rows(f, 0, 1).unwrap();
        let (ctx, a) = attention_pool(&mut g, one, p, None).unwrap();
        assert_eq!(g.value(a).data, vec![1.0]);
        assert_eq!(g.value(ctx).data, vec![0.3, -0.7]);
        assert!(attention_pool(&mut g, f, p, Some(&[false, false])).is_err());
    }
}

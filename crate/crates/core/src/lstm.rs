//! Bidirectional LSTM over a sequence of feature vectors, assembled from
//! graph primitives so it is differentiable through time.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Graph handles of one direction's weights. Gate rows are ordered
/// input, forget, cell candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `[4*hidden, input]`
    pub wx: Var,
    /// `[4*hidden, hidden]`
    pub wh: Var,
    /// `[4*hidden]`
    pub b: Var,
}

#[derive(Clone, Debug)]
pub struct BiLstmOut {
    /// Per step `[fwd_t ; bwd_t]`, length `2*hidden`.
    pub outputs: Vec<Var>,
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
    /// Final state of each direction: forward at the last step, backward at
    /// the first step.
    pub summary: Var,
}

/// Runs one direction and returns hidden states in sequence order.
pub fn lstm_direction<T: Real>(
    g: &mut Graph<T>,
    p: LstmVars,
    hidden: usize,
    xs: &[Var],
    reverse: bool,
) -> Result<Vec<Var>> {
    if xs.is_empty() {
        return Err(Error::Empty("lstm"));
    }
    if g.shape(p.wh) != [4 * hidden, hidden] {
        return Err(shape_err(
            "lstm",
            format!(
                "recurrent weight {:?}, expected [{}, {}]",
                g.shape(p.wh),
                4 * hidden,
                hidden
            ),
        ));
    }
    let mut h = g.constant(Tensor::zeros([hidden]));
    let mut c = g.constant(Tensor::zeros([hidden]));
    let mut out = alloc::vec![h; xs.len()];
    let order: Vec<usize> = if reverse {
        (0..xs.len()).rev().collect()
    } else {
        (0..xs.len()).collect()
    };
    for t in order {
        let zx = g.dense(xs[t], p.wx, Some(p.b))?;
        let zh = g.dense(h, p.wh, None)?;
        let z = g.add(zx, zh)?;
        let i = g.slice_channel(z, 0, hidden)?;
        let f = g.slice_channel(z, hidden, hidden)?;
        let cand = g.slice_channel(z, 2 * hidden, hidden)?;
        let o = g.slice_channel(z, 3 * hidden, hidden)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let tc = g.tanh(c);
        h = g.mul(o, tc)?;
        out[t] = h;
    }
    Ok(out)
}

pub fn bilstm_sequence<T: Real>(
    g: &mut Graph<T>,
    fwd: LstmVars,
    bwd: LstmVars,
    hidden: usize,
    xs: &[Var],
) -> Result<BiLstmOut> {
    if xs.is_empty() {
        return Err(Error::Empty("bilstm_sequence"));
    }
    let f = xs.iter().map(|&x| g.value(x).len()).collect::<Vec<_>>();
    if f.iter().any(|&n| n != f[0]) {
        return Err(shape_err(
            "bilstm_sequence",
            format!("non-uniform feature lengths {:?}", f),
        ));
    }
    let forward = lstm_direction(g, fwd, hidden, xs, false)?;
    let backward = lstm_direction(g, bwd, hidden, xs, true)?;
    let outputs = forward
        .iter()
        .zip(&backward)
        .map(|(&a, &b)| g.concat_channel(&[a, b]))
        .collect::<Result<Vec<_>>>()?;
    let summary = g.concat_channel(&[forward[xs.len() - 1], backward[0]])?;
    Ok(BiLstmOut {
        outputs,
        forward,
        backward,
        summary,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

impl LstmParams {
    fn vars(&self, bound: &Bound) -> LstmVars {
        LstmVars {
            wx: bound.var(self.wx),
            wh: bound.var(self.wh),
            b: bound.var(self.b),
        }
    }
}

/// Parameter layout of a bidirectional LSTM inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub input: usize,
    pub hidden: usize,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut dir = |tag: &str| LstmParams {
            wx: store.add_normal(format!("{prefix}.{tag}.wx"), &[4 * hidden, input], std, rng),
            wh: store.add_normal(format!("{prefix}.{tag}.wh"), &[4 * hidden, hidden], std, rng),
            b: store.add_const(format!("{prefix}.{tag}.b"), &[4 * hidden], 0.0),
        };
        let fwd = dir("fwd");
        let bwd = dir("bwd");
        Self {
            input,
            hidden,
            fwd,
            bwd,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, xs: &[Var]) -> Result<BiLstmOut> {
        bilstm_sequence(g, self.fwd.vars(bound), self.bwd.vars(bound), self.hidden, xs)
    }
}

//! Transformer building blocks composed from tape ops.

use indexmap::IndexMap;

use super::tape::{Tape, Var};
use super::tensor::{DTensor, Real};
use crate::error::{Error, Result};

/// Hidden width of the block MLP relative to the model width.
pub const MLP_RATIO: usize = 4;

/// Parameter names (relative to a block prefix) and shapes for one block of width `d`.
pub fn block_param_shapes(d: usize) -> Vec<(&'static str, Vec<usize>)> {
    let h = d * MLP_RATIO;
    vec![
        ("ln1.gamma", vec![d]),
        ("ln1.beta", vec![d]),
        ("attn.wq", vec![d, d]),
        ("attn.bq", vec![d]),
        ("attn.wk", vec![d, d]),
        ("attn.bk", vec![d]),
        ("attn.wv", vec![d, d]),
        ("attn.bv", vec![d]),
        ("attn.wo", vec![d, d]),
        ("attn.bo", vec![d]),
        ("ln2.gamma", vec![d]),
        ("ln2.beta", vec![d]),
        ("mlp.w1", vec![d, h]),
        ("mlp.b1", vec![h]),
        ("mlp.w2", vec![h, d]),
        ("mlp.b2", vec![d]),
    ]
}

pub fn block_param_count(d: usize) -> usize {
    block_param_shapes(d)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Tape handles for one pre-norm transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn bind_param<T: Real>(
    tape: &mut Tape<T>,
    params: &IndexMap<String, DTensor<T>>,
    name: &str,
) -> Result<Var> {
    let t = params
        .get(name)
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
    tape.param(name, t)
}

impl BlockVars {
    pub fn bind<T: Real>(
        tape: &mut Tape<T>,
        params: &IndexMap<String, DTensor<T>>,
        prefix: &str,
    ) -> Result<Self> {
        let mut p = |n: &str| bind_param(tape, params, &format!("{prefix}.{n}"));
        Ok(BlockVars {
            ln1_gamma: p("ln1.gamma")?,
            ln1_beta: p("ln1.beta")?,
            wq: p("attn.wq")?,
            bq: p("attn.bq")?,
            wk: p("attn.wk")?,
            bk: p("attn.bk")?,
            wv: p("attn.wv")?,
            bv: p("attn.bv")?,
            wo: p("attn.wo")?,
            bo: p("attn.bo")?,
            ln2_gamma: p("ln2.gamma")?,
            ln2_beta: p("ln2.beta")?,
            w1: p("mlp.w1")?,
            b1: p("mlp.b1")?,
            w2: p("mlp.w2")?,
            b2: p("mlp.b2")?,
        })
    }
}

pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Pre-norm residual block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))` with a
/// GELU (tanh) hidden layer.
pub fn transformer_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BlockVars,
    heads: usize,
) -> Result<Var> {
    let (t, d) = tape.value(x).rows_cols();
    if t == 0 {
        return Err(Error::Dimension("transformer block over zero tokens".into()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Dimension(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let h = tape.layer_norm(x, p.ln1_gamma, p.ln1_beta)?;
    let q = linear(tape, h, p.wq, p.bq)?;
    let k = linear(tape, h, p.wk, p.bk)?;
    let v = linear(tape, h, p.wv, p.bv)?;
    let a = tape.attention(q, k, v, heads)?;
    let o = linear(tape, a, p.wo, p.bo)?;
    let x1 = tape.add(x, o)?;
    let h2 = tape.layer_norm(x1, p.ln2_gamma, p.ln2_beta)?;
    let m = linear(tape, h2, p.w1, p.b1)?;
    let m = tape.gelu(m)?;
    let m = linear(tape, m, p.w2, p.b2)?;
    tape.add(x1, m)
}

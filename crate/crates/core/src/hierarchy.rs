//! Three-level convolution and pooling stack over embedded trajectories.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvActivation {
    Gelu,
    None,
}

pub const KERNEL: usize = 3;

/// Kernels `d→d`, `d→2d`, `2d→4d`, shared by both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStageParams {
    pub w: [ParamId; 3],
    pub b: [ParamId; 3],
}

impl ConvStageParams {
    pub fn register(store: &mut ParamStore, d: usize, seed: u64) -> Self {
        let dims = [(d, d), (d, 2 * d), (2 * d, 4 * d)];
        let mut w = Vec::new();
        let mut b = Vec::new();
        for (i, (cin, cout)) in dims.into_iter().enumerate() {
            let bound = 1.0 / ((KERNEL * cin) as f64).sqrt();
            w.push(store.add(&format!("conv.{i}.w"), &[KERNEL, cin, cout], Init::Uniform(bound), seed));
            b.push(store.add(&format!("conv.{i}.b"), &[1, cout], Init::Zeros, seed));
        }
        Self {
            w: [w[0], w[1], w[2]],
            b: [b[0], b[1], b[2]],
        }
    }
}

/// Level lengths `(n, ⌊n/2⌋, ⌊⌊n/2⌋/2⌋)`.
pub fn level_lengths(n: usize) -> Result<[usize; 3]> {
    if n < 4 {
        return Err(Error::Length(format!("abstraction stack needs n >= 4, got {n}")));
    }
    Ok([n, n / 2, n / 4])
}

/// One item's abstractions; `levels[l]` is `lengths[l] × d·2^l`.
#[derive(Clone, Debug)]
pub struct AbstractionStack {
    pub levels: Vec<Var>,
    pub lengths: Vec<usize>,
}

/// Builds the first `depth` levels (1 or 3) of `x: n × d`.
pub fn build_abstractions(
    tape: &mut Tape,
    vars: &[Var],
    params: &ConvStageParams,
    x: Var,
    depth: usize,
    act: ConvActivation,
) -> Result<AbstractionStack> {
    let n = tape.value(x).rows();
    let lengths = level_lengths(n)?;
    let t1 = tape.conv1d(x, vars[params.w[0].0], vars[params.b[0].0])?;
    let mut levels = vec![t1];
    for i in 1..depth {
        let prev = levels[i - 1];
        let mut h = tape.conv1d(prev, vars[params.w[i].0], vars[params.b[i].0])?;
        if act == ConvActivation::Gelu {
            h = tape.gelu(h);
        }
        levels.push(tape.maxpool1d(h)?);
    }
    Ok(AbstractionStack {
        levels,
        lengths: lengths[..depth].to_vec(),
    })
}

/// Pools a real-token mask (`true` = real, as in [`crate::data::Batch`]) by
/// windows of two: a window holding any real token is real.
pub fn pool_pad_mask(mask: &[bool]) -> Vec<bool> {
    mask.chunks_exact(2).map(|w| w[0] || w[1]).collect()
}

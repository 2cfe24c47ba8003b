//! Encoders, predictor, top-down propagation and the per-item forward pass.

use super::masking::MaskPlan;
use super::model::{
    Bindings, Block, DeconvSquash, Interaction, LevelParams, ModelConfig, ModelState, Pooling, TopDown,
};
use crate::data::{embed_trajectory, Trajectory};
use crate::error::{Error, Result};
use crate::hexgrid::HexGridSpec;
use crate::hierarchy::build_abstractions;
use crate::region_embed::EmbeddingTable;
use crate::tensor::{Tape, Tensor, Var};

/// An upsampled higher-level map and the scale it enters with.
#[derive(Clone, Copy, Debug)]
pub struct Injection {
    pub map: Var,
    pub sigma: Var,
}

/// One attention block. Rows from `q_start` on act as queries; all rows
/// act as keys and values. Returns the query-row outputs and the mean of
/// the head maps.
#[allow(clippy::too_many_arguments)]
fn block(
    tape: &mut Tape,
    vars: &[Var],
    blk: &Block,
    x: Var,
    q_start: usize,
    heads: usize,
    inj: Option<&Injection>,
    renorm: bool,
    eps: f64,
) -> Result<(Var, Var)> {
    let (n, w) = (tape.value(x).rows(), tape.value(x).cols());
    let h = blk.ln1.apply(tape, vars, x, eps)?;
    let (xq, hq) = if q_start == 0 {
        (x, h)
    } else {
        (
            tape.slice_rows(x, q_start, n - q_start)?,
            tape.slice_rows(h, q_start, n - q_start)?,
        )
    };
    let dk = w / heads;
    let q = blk.q.apply(tape, vars, hq)?;
    let q = tape.scale(q, 1.0 / (dk as f64).sqrt());
    let k = blk.k.apply(tape, vars, h)?;
    let v = blk.v.apply(tape, vars, h)?;
    let kt = tape.transpose(k)?;
    let injected = match inj {
        Some(i) => Some(tape.mul_scalar(i.map, i.sigma)?),
        None => None,
    };
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = tape.slice_cols(q, hd * dk, dk)?;
        let kh = tape.slice_rows(kt, hd * dk, dk)?;
        let vh = tape.slice_cols(v, hd * dk, dk)?;
        let s = tape.matmul(qh, kh)?;
        let mut a = tape.softmax_rows(s)?;
        if let Some(t) = injected {
            a = tape.add(a, t)?;
        }
        if renorm {
            a = tape.row_normalize(a)?;
        }
        outs.push(tape.matmul(a, vh)?);
        maps.push(a);
    }
    let o = tape.concat_cols(&outs)?;
    let o = blk.o.apply(tape, vars, o)?;
    let x1 = tape.add(xq, o)?;
    let h2 = blk.ln2.apply(tape, vars, x1, eps)?;
    let f = blk.ff1.apply(tape, vars, h2)?;
    let f = tape.gelu(f);
    let f = blk.ff2.apply(tape, vars, f)?;
    let out = tape.add(x1, f)?;
    let mut map = maps[0];
    for &m in &maps[1..] {
        map = tape.add(map, m)?;
    }
    if heads > 1 {
        map = tape.scale(map, 1.0 / heads as f64);
    }
    Ok((out, map))
}

/// Self-attention encoder over `x` (one row per entry of `positions`).
/// Returns the representation and the head-averaged attention map.
pub fn encode(
    tape: &mut Tape,
    vars: &[Var],
    cfg: &ModelConfig,
    lp: &LevelParams,
    x: Var,
    positions: &[usize],
    inj: Option<&Injection>,
) -> Result<(Var, Var)> {
    let c = tape.value(x).rows();
    if positions.len() != c {
        return Err(Error::Length(format!("{c} tokens but {} positions", positions.len())));
    }
    if let Some(&p) = positions.iter().max() {
        if p >= cfg.max_len {
            return Err(Error::Length(format!("position {p} exceeds max_len {}", cfg.max_len)));
        }
    }
    if let Some(i) = inj {
        let shape = tape.value(i.map).shape();
        if shape != [c, c] {
            return Err(Error::Shape {
                op: "encode",
                lhs: vec![c, c],
                rhs: shape.to_vec(),
            });
        }
    }
    let pe = tape.gather_rows(vars[lp.enc_pos.0], positions)?;
    let mut h = tape.add(x, pe)?;
    let mut map = None;
    for blk in &lp.enc {
        let (o, m) = block(tape, vars, blk, h, 0, cfg.heads, inj, cfg.fusion_renorm, cfg.ln_eps)?;
        h = o;
        map = Some(m);
    }
    Ok((h, map.expect("at least one encoder layer")))
}

/// Transposed convolution (kernel 2, stride 2) along rows, then columns:
/// `n × n → 2n × 2n`.
pub fn upsample_map(tape: &mut Tape, vars: &[Var], td: &TopDown, map: Var) -> Result<Var> {
    let (w, b) = (vars[td.deconv_w.0], vars[td.deconv_b.0]);
    let t = tape.transpose(map)?;
    let t = tape.deconv_cols(t, w, b)?;
    let t = tape.transpose(t)?;
    tape.deconv_cols(t, w, b)
}

pub fn squash(tape: &mut Tape, v: Var, kind: DeconvSquash) -> Var {
    match kind {
        DeconvSquash::Clamp => tape.clamp(v, 0.0, 1.0),
        DeconvSquash::Sigmoid => tape.sigmoid(v),
        DeconvSquash::None => v,
    }
}

/// Upsamples a level map to the length `n_dst` of the level below. Extra
/// rows and columns are cut; a trailing position with no parent (odd
/// `n_dst`) receives zeros.
pub fn propagate_attention(
    tape: &mut Tape,
    vars: &[Var],
    td: &TopDown,
    map: Var,
    kind: DeconvSquash,
    n_dst: usize,
) -> Result<Var> {
    let mut up = upsample_map(tape, vars, td, map)?;
    let m = tape.value(up).rows();
    if m > n_dst {
        up = tape.slice_rows(up, 0, n_dst)?;
        up = tape.slice_cols(up, 0, n_dst)?;
    }
    let mut up = squash(tape, up, kind);
    if m < n_dst {
        let extra = n_dst - m;
        let right = tape.constant(Tensor::zeros(&[m, extra]));
        up = tape.concat_cols(&[up, right])?;
        let bottom = tape.constant(Tensor::zeros(&[extra, n_dst]));
        up = tape.concat_rows(&[up, bottom])?;
    }
    Ok(up)
}

fn is_full(positions: &[usize], n: usize) -> bool {
    positions.len() == n
}

/// Places a map over `positions` into a zero `n × n` grid.
fn scatter_square(tape: &mut Tape, map: Var, positions: &[usize], n: usize) -> Result<Var> {
    if is_full(positions, n) {
        return Ok(map);
    }
    let t = tape.scatter_rows(map, positions, n)?;
    let t = tape.transpose(t)?;
    let t = tape.scatter_rows(t, positions, n)?;
    tape.transpose(t)
}

fn gather_square(tape: &mut Tape, map: Var, positions: &[usize], n: usize) -> Result<Var> {
    if is_full(positions, n) {
        return Ok(map);
    }
    let t = tape.gather_rows(map, positions)?;
    let t = tape.transpose(t)?;
    let t = tape.gather_rows(t, positions)?;
    tape.transpose(t)
}

/// Encoded level with the positions it covers out of `n`.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub s: Var,
    pub map: Var,
    pub positions: Vec<usize>,
    pub n: usize,
}

/// Nearest-neighbour upsampling of the level above, projected and fused
/// with this level's input.
fn embed_concat(
    tape: &mut Tape,
    vars: &[Var],
    td: &TopDown,
    above: &Encoded,
    x: Var,
    positions: &[usize],
) -> Result<Var> {
    let full = if is_full(&above.positions, above.n) {
        above.s
    } else {
        tape.scatter_rows(above.s, &above.positions, above.n)?
    };
    let idx: Vec<usize> = positions.iter().map(|&p| (p / 2).min(above.n - 1)).collect();
    let up = tape.gather_rows(full, &idx)?;
    let up = td.emb_up.apply(tape, vars, up)?;
    let cat = tape.concat_cols(&[x, up])?;
    td.emb_fuse.apply(tape, vars, cat)
}

/// Encodes every level top-down. `inputs[l]` is the full level-`l`
/// abstraction; only rows at `positions[l]` are encoded.
pub fn encode_hierarchy(
    tape: &mut Tape,
    vars: &[Var],
    st: &ModelState,
    inputs: &[Var],
    positions: &[Vec<usize>],
) -> Result<Vec<Encoded>> {
    let cfg = &st.config;
    let depth = inputs.len();
    let mut out: Vec<Option<Encoded>> = vec![None; depth];
    for l in (0..depth).rev() {
        let n = tape.value(inputs[l]).rows();
        let pos = &positions[l];
        let mut x = if is_full(pos, n) {
            inputs[l]
        } else {
            tape.gather_rows(inputs[l], pos)?
        };
        let mut inj = None;
        if l + 1 < depth {
            let above = out[l + 1].as_ref().expect("upper level encoded first");
            let td = st.layout.levels[l + 1]
                .top_down
                .as_ref()
                .expect("upper level has top-down params");
            match cfg.interaction {
                Interaction::Attention => {
                    let full = scatter_square(tape, above.map, &above.positions, above.n)?;
                    let up = propagate_attention(tape, vars, td, full, cfg.deconv_squash, n)?;
                    let map = gather_square(tape, up, pos, n)?;
                    inj = Some(Injection {
                        map,
                        sigma: vars[td.sigma.0],
                    });
                }
                Interaction::EmbedConcat => x = embed_concat(tape, vars, td, above, x, pos)?,
                Interaction::None => {}
            }
        }
        let (s, map) = encode(tape, vars, cfg, &st.layout.levels[l], x, pos, inj.as_ref())?;
        out[l] = Some(Encoded {
            s,
            map,
            positions: pos.clone(),
            n,
        });
    }
    Ok(out.into_iter().map(|e| e.expect("every level encoded")).collect())
}

/// Predicts representations at `mask` from the context representation.
pub fn predict(
    tape: &mut Tape,
    vars: &[Var],
    cfg: &ModelConfig,
    lp: &LevelParams,
    s_ctx: Var,
    mask: &[usize],
) -> Result<Var> {
    if mask.is_empty() {
        return Err(Error::Invariant("empty target mask".into()));
    }
    let pe = tape.gather_rows(vars[lp.pred_pos.0], mask)?;
    let mut q = tape.add_row(pe, vars[lp.mask_token.0])?;
    let c = tape.value(s_ctx).rows();
    for blk in &lp.pred {
        let x = tape.concat_rows(&[s_ctx, q])?;
        q = block(tape, vars, blk, x, c, cfg.heads, None, false, cfg.ln_eps)?.0;
    }
    Ok(q)
}

#[derive(Clone, Debug)]
pub struct LevelOutput {
    pub predictions: Vec<Var>,
    pub targets: Vec<Var>,
    /// Context representation, one row per context position.
    pub s_ctx: Var,
    /// Full-length target representation, detached.
    pub s_tar: Var,
    pub ctx_map: Var,
    pub tar_map: Var,
}

/// Both branches and all predictions for one embedded item `x: n × d`.
pub fn forward_item(
    tape: &mut Tape,
    st: &ModelState,
    bind: &Bindings,
    x: Var,
    plans: &[MaskPlan],
) -> Result<Vec<LevelOutput>> {
    let cfg = &st.config;
    if plans.len() != cfg.levels {
        return Err(Error::Length(format!(
            "{} mask plans for {} levels",
            plans.len(),
            cfg.levels
        )));
    }
    let stack = build_abstractions(tape, &bind.online, &st.layout.conv, x, cfg.levels, cfg.conv_activation)?;
    for (plan, &n) in plans.iter().zip(&stack.lengths) {
        check_plan(plan, n)?;
    }
    let all: Vec<Vec<usize>> = stack.lengths.iter().map(|&n| (0..n).collect()).collect();
    let tar_inputs: Vec<Var> = stack.levels.iter().map(|&v| tape.detach(v)).collect();
    let tar = encode_hierarchy(tape, &bind.target, st, &tar_inputs, &all)?;
    let ctx_pos: Vec<Vec<usize>> = plans.iter().map(|p| p.context.clone()).collect();
    let ctx = encode_hierarchy(tape, &bind.online, st, &stack.levels, &ctx_pos)?;
    let mut out = Vec::with_capacity(cfg.levels);
    for (l, plan) in plans.iter().enumerate() {
        let s_tar = tape.detach(tar[l].s);
        let lp = &st.layout.levels[l];
        let mut targets = Vec::with_capacity(plan.targets.len());
        let mut predictions = Vec::with_capacity(plan.targets.len());
        for m in &plan.targets {
            targets.push(tape.gather_rows(s_tar, m)?);
            predictions.push(predict(tape, &bind.online, cfg, lp, ctx[l].s, m)?);
        }
        out.push(LevelOutput {
            predictions,
            targets,
            s_ctx: ctx[l].s,
            s_tar,
            ctx_map: ctx[l].map,
            tar_map: tar[l].map,
        });
    }
    Ok(out)
}

/// Leakage guard plus index validity.
fn check_plan(plan: &MaskPlan, n: usize) -> Result<()> {
    let mut is_target = vec![false; n];
    for m in &plan.targets {
        for &j in m {
            if j >= n {
                return Err(Error::Invariant(format!("target index {j} out of {n}")));
            }
            is_target[j] = true;
        }
    }
    for &j in &plan.context {
        if j >= n || is_target[j] {
            return Err(Error::Invariant(format!(
                "context position {j} overlaps a target or exceeds {n}"
            )));
        }
    }
    if plan.context.is_empty() {
        return Err(Error::DegenerateContext(n));
    }
    Ok(())
}

/// Full unmasked context hierarchy on an embedded sequence; returns the
/// level-1 representation.
pub fn encode_sequence(tape: &mut Tape, vars: &[Var], st: &ModelState, x: Var) -> Result<Var> {
    let cfg = &st.config;
    let stack = build_abstractions(tape, vars, &st.layout.conv, x, cfg.levels, cfg.conv_activation)?;
    let all: Vec<Vec<usize>> = stack.lengths.iter().map(|&n| (0..n).collect()).collect();
    let enc = encode_hierarchy(tape, vars, st, &stack.levels, &all)?;
    Ok(enc[0].s)
}

pub fn pool(t: &Tensor, how: Pooling) -> Vec<f64> {
    let (n, d) = (t.rows(), t.cols());
    match how {
        Pooling::Mean => (0..d)
            .map(|j| (0..n).map(|i| t.get(i, j)).sum::<f64>() / n as f64)
            .collect(),
        Pooling::First => t.row(0).to_vec(),
        Pooling::Max => (0..d)
            .map(|j| (0..n).map(|i| t.get(i, j)).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    }
}

/// Minimum points accepted by the abstraction stack.
pub const MIN_POINTS: usize = 4;

/// Pooled representation of an embedded sequence, without the trained-state
/// check. Sequences shorter than four rows repeat their last row.
pub fn embed_pooled(st: &ModelState, emb: &Tensor) -> Result<Vec<f64>> {
    let n = emb.rows();
    if n == 0 {
        return Err(Error::Length("cannot encode an empty trajectory".into()));
    }
    let emb = if n < MIN_POINTS {
        let d = emb.cols();
        let mut data = emb.data().to_vec();
        for _ in n..MIN_POINTS {
            data.extend_from_slice(emb.row(n - 1));
        }
        Tensor::matrix(MIN_POINTS, d, data)?
    } else {
        emb.clone()
    };
    let mut tape = Tape::new();
    let vars = st.bind_frozen(&mut tape);
    let x = tape.constant(emb);
    let s = encode_sequence(&mut tape, &vars, st, x)?;
    Ok(pool(tape.value(s), st.config.pooling))
}

/// Trajectory representation from the trained context hierarchy.
pub fn infer(st: &ModelState, table: &EmbeddingTable, spec: &HexGridSpec, traj: &Trajectory) -> Result<Vec<f64>> {
    if st.trained_steps == 0 {
        return Err(Error::State("model has not been trained".into()));
    }
    let emb = embed_trajectory(traj, table, spec)?;
    embed_pooled(st, &emb)
}

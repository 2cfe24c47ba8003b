//! Optimiser, training step and epoch loop.

use crate::config::{RunConfig, TrainConfig};
use crate::data::{embed_trajectory, Trajectory};
use crate::error::{Error, Result};
use crate::hexgrid::HexGridSpec;
use crate::hierarchy::level_lengths;
use crate::jepa::{forward_item, sample_plan, LevelOutput, ModelState};
use crate::losses::{jepa_loss, total_loss_var, vicreg, LevelLoss, LossReport};
use crate::params::{ParamId, ParamStore};
use crate::region_embed::EmbeddingTable;
use crate::rng::{derive_seed, stream};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::io::Write;

/// Adam moments aligned with the online parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected step. Parameters without a gradient are left alone.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, vars: &[Var], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(vars[id.0]) else {
                continue;
            };
            let (m, v) = (self.m[id.0].data_mut(), self.v[id.0].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Learning rate for a zero-based epoch: halved every `lr_halve_every`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * 0.5f64.powi((epoch / cfg.lr_halve_every) as i32)
}

/// Embeds every trajectory once, in parallel.
pub fn prepare_embeddings(trajs: &[Trajectory], table: &EmbeddingTable, spec: &HexGridSpec) -> Result<Vec<Tensor>> {
    trajs.par_iter().map(|t| embed_trajectory(t, table, spec)).collect()
}

const PLAN_TAG: u64 = 0x9_1A4;
const ORDER_TAG: u64 = 0xE90C;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_levels: Vec<LevelLoss>,
}

/// Loss report plus gradients; `vars[i]` is online parameter `i` on the tape.
pub struct StepOutcome {
    pub report: LossReport,
    pub grads: Gradients,
    pub vars: Vec<Var>,
    /// Target-branch leaves that must not receive gradient.
    pub audited: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: RunConfig,
    pub state: ModelState,
    pub adam: AdamState,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let state = ModelState::new(config.model.clone(), config.seed)?;
        let adam = AdamState::new(&state.online);
        Ok(Self {
            config,
            state,
            adam,
            step: 0,
            epoch: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        lr_at(&self.config.train, self.epoch)
    }

    /// Seed that reproduces the mask plans of a step; reported on failure.
    pub fn batch_seed(&self, step: u64) -> u64 {
        derive_seed(self.config.seed, &[PLAN_TAG, step])
    }

    /// One optimiser step on embedded items.
    pub fn train_step(&mut self, items: &[&Tensor]) -> Result<LossReport> {
        let out = self.compute_step(items)?;
        let lr = self.lr();
        self.adam
            .update(&mut self.state.online, &out.grads, &out.vars, lr, &self.config.train);
        self.state.ema_update(self.config.train.ema_tau)?;
        self.state.trained_steps += 1;
        self.step += 1;
        Ok(out.report)
    }

    /// Loss and online-parameter gradients of the current step, without
    /// updating anything.
    pub fn compute_step(&self, items: &[&Tensor]) -> Result<StepOutcome> {
        if items.is_empty() {
            return Err(Error::Length("empty batch".into()));
        }
        let step = self.step;
        let cfg = &self.config;
        let levels = cfg.model.levels;
        let mut tape = Tape::new();
        let bind = self.state.bind(&mut tape);
        let mut per_level: Vec<Vec<LevelOutput>> = vec![Vec::new(); levels];
        for (b, x) in items.iter().enumerate() {
            let lengths = level_lengths(x.rows())?;
            let mut plans = Vec::with_capacity(levels);
            for (l, &n) in lengths.iter().take(levels).enumerate() {
                let mut rng = stream(cfg.seed, &[PLAN_TAG, step, l as u64, b as u64]);
                let plan = sample_plan(n, &cfg.mask, &mut rng)?;
                plan.assert_disjoint();
                plans.push(plan);
            }
            let xv = tape.constant((*x).clone());
            let out = forward_item(&mut tape, &self.state, &bind, xv, &plans)?;
            for (l, o) in out.into_iter().enumerate() {
                per_level[l].push(o);
            }
        }
        let mut level_vars = Vec::with_capacity(levels);
        let mut parts = Vec::with_capacity(levels);
        for (l, outs) in per_level.iter().enumerate() {
            let preds: Vec<Var> = outs.iter().flat_map(|o| o.predictions.iter().copied()).collect();
            let tars: Vec<Var> = outs.iter().flat_map(|o| o.targets.iter().copied()).collect();
            let jepa = jepa_loss(
                &mut tape,
                &preds,
                &tars,
                cfg.mask.masks,
                items.len(),
                cfg.loss.smooth_l1_beta,
            )?;
            let mut level = jepa;
            let mut comps = [jepa, jepa, jepa, jepa, jepa];
            if cfg.loss.vicreg {
                let exp = &self.state.layout.levels[l].expander;
                let ctx: Vec<Var> = outs.iter().map(|o| o.s_ctx).collect();
                let tar: Vec<Var> = outs.iter().map(|o| o.s_tar).collect();
                let mut reg = Vec::with_capacity(4);
                for rows in [tar, ctx] {
                    let z = tape.concat_rows(&rows)?;
                    let z = exp.apply(&mut tape, &bind.online, z)?;
                    let z = tape.gelu(z);
                    let (v, c) = vicreg(&mut tape, z, cfg.loss.vicreg_eps)?;
                    reg.push((v, c));
                }
                let [(vt, ct), (vc, cc)] = [reg[0], reg[1]];
                comps = [jepa, vt, vc, ct, cc];
                for v in [vt, vc, ct, cc] {
                    level = tape.add(level, v)?;
                }
            }
            level_vars.push(level);
            parts.push(comps);
        }
        let weights = cfg.loss.weights();
        let total = total_loss_var(&mut tape, &level_vars, weights)?;
        let report = LossReport {
            levels: parts
                .iter()
                .zip(&level_vars)
                .map(|(c, &lv)| {
                    let val = |v: Var| tape.value(v).item();
                    let has_reg = cfg.loss.vicreg;
                    LevelLoss {
                        jepa: val(c[0]),
                        var_tar: if has_reg { val(c[1]) } else { 0.0 },
                        var_ctx: if has_reg { val(c[2]) } else { 0.0 },
                        cov_tar: if has_reg { val(c[3]) } else { 0.0 },
                        cov_ctx: if has_reg { val(c[4]) } else { 0.0 },
                        total_level: val(lv),
                    }
                })
                .collect(),
            weights,
            total: tape.value(total).item(),
        };
        if !report.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step} (batch seed {:#x}, {} items, lengths {:?})",
                self.batch_seed(step),
                items.len(),
                items.iter().map(|x| x.rows()).collect::<Vec<_>>()
            )));
        }
        let grads = tape.backward(total);
        for &v in &bind.audited {
            if grads.get(v).is_some() {
                return Err(Error::Invariant(format!(
                    "target-branch parameter received gradient at step {step}"
                )));
            }
        }
        Ok(StepOutcome {
            report,
            grads,
            vars: bind.online,
            audited: bind.audited,
        })
    }

    /// Item order for a zero-based epoch.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(self.config.seed, &[ORDER_TAG, epoch as u64]));
        order
    }

    /// Runs the next epoch, reporting each step to `sink`.
    pub fn run_epoch(
        &mut self,
        data: &[Tensor],
        sink: &mut dyn FnMut(u64, &LossReport) -> Result<()>,
    ) -> Result<EpochSummary> {
        let epoch = self.epoch;
        let order = self.epoch_order(data.len(), epoch);
        let mut sum_total = 0.0;
        let mut sum_levels = vec![LevelLoss::default(); self.config.model.levels];
        let mut steps = 0;
        for chunk in order.chunks(self.config.train.batch_size) {
            let items: Vec<&Tensor> = chunk.iter().map(|&i| &data[i]).collect();
            let step = self.step;
            let report = self.train_step(&items)?;
            debug!("step {step} loss {:.6}", report.total);
            sink(step, &report)?;
            sum_total += report.total;
            for (acc, l) in sum_levels.iter_mut().zip(&report.levels) {
                acc.jepa += l.jepa;
                acc.var_tar += l.var_tar;
                acc.var_ctx += l.var_ctx;
                acc.cov_tar += l.cov_tar;
                acc.cov_ctx += l.cov_ctx;
                acc.total_level += l.total_level;
            }
            steps += 1;
        }
        self.epoch += 1;
        let k = steps.max(1) as f64;
        for acc in &mut sum_levels {
            acc.jepa /= k;
            acc.var_tar /= k;
            acc.var_ctx /= k;
            acc.cov_tar /= k;
            acc.cov_ctx /= k;
            acc.total_level /= k;
        }
        let summary = EpochSummary {
            epoch,
            steps,
            mean_total: sum_total / k,
            mean_levels: sum_levels,
        };
        info!(
            "epoch {} mean loss {:.6} over {} steps",
            epoch + 1,
            summary.mean_total,
            steps
        );
        Ok(summary)
    }
}

/// Training-log CSV: `step,level,component,value`.
pub struct TrainLog<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> TrainLog<W> {
    pub fn new(w: W, write_header: bool) -> Result<Self> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        if write_header {
            out.write_record(["step", "level", "component", "value"])
                .map_err(csv_err)?;
        }
        Ok(Self { out })
    }

    pub fn append(&mut self, step: u64, report: &LossReport) -> Result<()> {
        for (l, lv) in report.levels.iter().enumerate() {
            for (name, v) in lv.components() {
                self.out
                    .write_record([
                        step.to_string(),
                        (l + 1).to_string(),
                        name.to_string(),
                        format!("{v:e}"),
                    ])
                    .map_err(csv_err)?;
            }
        }
        self.out
            .write_record([
                step.to_string(),
                "all".into(),
                "total".into(),
                format!("{:e}", report.total),
            ])
            .map_err(csv_err)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(Error::from)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

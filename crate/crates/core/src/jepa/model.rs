//! Model configuration, parameter layout and the online/target state.

use crate::error::{Error, Result};
use crate::hierarchy::{ConvActivation, ConvStageParams};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    Attention,
    EmbedConcat,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeconvSquash {
    Clamp,
    Sigmoid,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    First,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the cell embeddings and of level 1.
    pub dim: usize,
    /// 3, or 1 for the single-level variant.
    pub levels: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub encoder_layers: usize,
    pub predictor_layers: usize,
    /// Size of every positional table.
    pub max_len: usize,
    pub interaction: Interaction,
    pub fusion_renorm: bool,
    pub deconv_squash: DeconvSquash,
    pub conv_activation: ConvActivation,
    pub sigma_init: f64,
    pub pooling: Pooling,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            levels: 3,
            heads: 8,
            ff_hidden: 1024,
            encoder_layers: 1,
            predictor_layers: 1,
            max_len: 256,
            interaction: Interaction::Attention,
            fusion_renorm: true,
            deconv_squash: DeconvSquash::Clamp,
            conv_activation: ConvActivation::Gelu,
            sigma_init: 0.5,
            pooling: Pooling::Mean,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels != 1 && self.levels != 3 {
            return Err(Error::Config(format!("levels must be 1 or 3, got {}", self.levels)));
        }
        if self.dim == 0 || self.heads == 0 || self.ff_hidden == 0 {
            return Err(Error::Config("dim, heads and ff_hidden must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(1..=3).contains(&self.encoder_layers) || !(1..=3).contains(&self.predictor_layers) {
            return Err(Error::Config("encoder and predictor layers must be in 1..=3".into()));
        }
        if self.max_len < 4 {
            return Err(Error::Config("max_len must be at least 4".into()));
        }
        if !self.sigma_init.is_finite() || !(self.ln_eps > 0.0) {
            return Err(Error::Config("sigma_init must be finite and ln_eps positive".into()));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.dim << level
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn register(store: &mut ParamStore, name: &str, din: usize, dout: usize, seed: u64) -> Self {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        Self {
            w: store.add(&format!("{name}.w"), &[din, dout], Init::Uniform(bound), seed),
            b: store.add(&format!("{name}.b"), &[1, dout], Init::Zeros, seed),
        }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[self.w.0])?;
        tape.add_row(y, vars[self.b.0])
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    fn register(store: &mut ParamStore, name: &str, width: usize, seed: u64) -> Self {
        Self {
            g: store.add(&format!("{name}.g"), &[1, width], Init::Ones, seed),
            b: store.add(&format!("{name}.b"), &[1, width], Init::Zeros, seed),
        }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var, eps: f64) -> Result<Var> {
        tape.layer_norm(x, vars[self.g.0], vars[self.b.0], eps)
    }
}

/// Pre-norm attention block with a GELU feed-forward sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    fn register(store: &mut ParamStore, name: &str, width: usize, hidden: usize, seed: u64) -> Self {
        Self {
            ln1: Norm::register(store, &format!("{name}.ln1"), width, seed),
            q: Linear::register(store, &format!("{name}.q"), width, width, seed),
            k: Linear::register(store, &format!("{name}.k"), width, width, seed),
            v: Linear::register(store, &format!("{name}.v"), width, width, seed),
            o: Linear::register(store, &format!("{name}.o"), width, width, seed),
            ln2: Norm::register(store, &format!("{name}.ln2"), width, seed),
            ff1: Linear::register(store, &format!("{name}.ff1"), width, hidden, seed),
            ff2: Linear::register(store, &format!("{name}.ff2"), hidden, width, seed),
        }
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.ln1.g, self.ln1.b, self.ln2.g, self.ln2.b];
        for l in [self.q, self.k, self.v, self.o, self.ff1, self.ff2] {
            v.extend(l.ids());
        }
        v
    }
}

/// Parameters used when this level's output feeds the level below.
#[derive(Clone, Debug, PartialEq)]
pub struct TopDown {
    pub deconv_w: ParamId,
    pub deconv_b: ParamId,
    pub sigma: ParamId,
    pub emb_up: Linear,
    pub emb_fuse: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelParams {
    pub width: usize,
    pub enc_pos: ParamId,
    pub enc: Vec<Block>,
    pub pred_pos: ParamId,
    pub mask_token: ParamId,
    pub pred: Vec<Block>,
    pub expander: Linear,
    pub top_down: Option<TopDown>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub conv: ConvStageParams,
    pub levels: Vec<LevelParams>,
    /// Online parameters mirrored by the target branch, in target-store order.
    pub ema_ids: Vec<ParamId>,
}

impl Layout {
    pub fn register(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Self {
        let conv = ConvStageParams::register(store, cfg.dim, seed);
        let mut levels = Vec::new();
        let mut ema_ids = Vec::new();
        for l in 0..cfg.levels {
            let w = cfg.width(l);
            let p = format!("l{}", l + 1);
            let enc_pos = store.add(&format!("{p}.enc.pos"), &[cfg.max_len, w], Init::Normal(0.02), seed);
            let enc: Vec<Block> = (0..cfg.encoder_layers)
                .map(|j| Block::register(store, &format!("{p}.enc.{j}"), w, cfg.ff_hidden, seed))
                .collect();
            let pred_pos = store.add(&format!("{p}.pred.pos"), &[cfg.max_len, w], Init::Normal(0.02), seed);
            let mask_token = store.add(&format!("{p}.pred.mask"), &[1, w], Init::Normal(0.02), seed);
            let pred = (0..cfg.predictor_layers)
                .map(|j| Block::register(store, &format!("{p}.pred.{j}"), w, cfg.ff_hidden, seed))
                .collect();
            let expander = Linear::register(store, &format!("{p}.exp"), w, 2 * w, seed);
            ema_ids.push(enc_pos);
            for b in &enc {
                ema_ids.extend(b.ids());
            }
            let top_down = (l > 0).then(|| {
                let below = cfg.width(l - 1);
                let td = TopDown {
                    deconv_w: store.add(&format!("{p}.deconv.w"), &[1, 2], Init::Ones, seed),
                    deconv_b: store.add(&format!("{p}.deconv.b"), &[1, 1], Init::Zeros, seed),
                    sigma: store.add(&format!("{p}.sigma"), &[1, 1], Init::Const(cfg.sigma_init), seed),
                    emb_up: Linear::register(store, &format!("{p}.emb_up"), w, below, seed),
                    emb_fuse: Linear::register(store, &format!("{p}.emb_fuse"), 2 * below, below, seed),
                };
                ema_ids.extend([td.deconv_w, td.deconv_b, td.sigma]);
                ema_ids.extend(td.emb_up.ids());
                ema_ids.extend(td.emb_fuse.ids());
                td
            });
            levels.push(LevelParams {
                width: w,
                enc_pos,
                enc,
                pred_pos,
                mask_token,
                pred,
                expander,
                top_down,
            });
        }
        Self { conv, levels, ema_ids }
    }
}

/// Online (optimised) parameters, their EMA shadows and the layout tying
/// them together.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub layout: Layout,
    pub online: ParamStore,
    pub target: ParamStore,
    pub trained_steps: u64,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut online = ParamStore::new();
        let layout = Layout::register(&config, &mut online, seed);
        let mut target = ParamStore::new();
        for &id in &layout.ema_ids {
            target.insert(online.name(id), online.get(id).clone());
        }
        Ok(Self {
            config,
            layout,
            online,
            target,
            trained_steps: 0,
        })
    }

    /// Binds both parameter sets for one step. Target-branch parameters are
    /// recorded as tracked leaves so that the freeze audit can prove no
    /// gradient reaches them.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let online = self.online.bind(tape, true);
        let mut target = online.clone();
        let mut audited = Vec::with_capacity(self.layout.ema_ids.len());
        for (k, &id) in self.layout.ema_ids.iter().enumerate() {
            let v = tape.param(self.target.get(ParamId(k)).clone());
            target[id.0] = v;
            audited.push(v);
        }
        Bindings {
            online,
            target,
            audited,
        }
    }

    /// Binds the online parameters as constants for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.online.bind(tape, false)
    }

    pub fn ema_update(&mut self, tau: f64) -> Result<()> {
        ema_update(&mut self.target, &self.online, tau)
    }
}

#[derive(Clone, Debug)]
pub struct Bindings {
    pub online: Vec<Var>,
    /// Same as `online` except EMA-shadowed entries.
    pub target: Vec<Var>,
    pub audited: Vec<Var>,
}

/// `θ̄ ← τ·θ̄ + (1−τ)·θ` for every target parameter, matched by name.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("ema tau {tau} outside [0, 1]")));
    }
    let ids: Vec<ParamId> = target.ids().collect();
    for id in ids {
        let src_id = online
            .id_of(target.name(id))
            .ok_or_else(|| Error::State(format!("no online parameter {}", target.name(id))))?;
        let src = online.get(src_id);
        let dst = target.get_mut(id);
        if src.shape() != dst.shape() {
            return Err(Error::State(format!("shape mismatch for {}", online.name(src_id))));
        }
        for (t, s) in dst.data_mut().iter_mut().zip(src.data()) {
            *t = tau * *t + (1.0 - tau) * s;
        }
    }
    Ok(())
}

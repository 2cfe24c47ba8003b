//! End-to-end plumbing shared by the command line and the acceptance runs.

use crate::config::RunConfig;
use crate::data::{split_train_test, synth_generate, Trajectory};
use crate::error::Result;
use crate::eval::{build_selfsim, self_similarity, ModelEncoder, RankReport, TrajEncoder};
use crate::hexgrid::{build_region_graph, HexGridSpec};
use crate::jepa::ModelState;
use crate::losses::LossReport;
use crate::region_embed::{pretrain_cells, EmbeddingTable, SkipGramOutcome};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::train::{prepare_embeddings, EpochSummary, Trainer};

/// Synthetic corpus, its split, the grid and pretrained cell vectors.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub spec: HexGridSpec,
    pub table: EmbeddingTable,
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub skipgram_losses: Vec<f64>,
}

/// Generates `data.synth_count` trajectories, splits them and pretrains
/// cell vectors on the cells the training split visits.
pub fn prepare_synthetic(cfg: &RunConfig) -> Result<Prepared> {
    let spec = cfg.grid.spec();
    let all = synth_generate(
        cfg.data.synth_count,
        &spec,
        &cfg.data.filter,
        &cfg.data.synth,
        derive_seed(cfg.seed, &[1]),
    )?;
    prepare_from(cfg, all)
}

pub fn prepare_from(cfg: &RunConfig, trajs: Vec<Trajectory>) -> Result<Prepared> {
    let spec = cfg.grid.spec();
    let (train, test) = split(cfg, trajs)?;
    let out = pretrain(cfg, &train, &spec)?;
    Ok(Prepared {
        spec,
        table: out.table,
        train,
        test,
        skipgram_losses: out.epoch_losses,
    })
}

/// The run's train/test split; every command derives the same one.
pub fn split(cfg: &RunConfig, trajs: Vec<Trajectory>) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    split_train_test(trajs, cfg.data.test_fraction, derive_seed(cfg.seed, &[2]))
}

/// Cell vectors for every cell the training trajectories visit.
pub fn pretrain(cfg: &RunConfig, train: &[Trajectory], spec: &HexGridSpec) -> Result<SkipGramOutcome> {
    let (graph, dropped) = build_region_graph(train.iter().flat_map(|t| &t.points), spec)?;
    if dropped > 0 {
        log::warn!("{dropped} training points fall outside the grid");
    }
    log::info!("region graph: {} cells", graph.nodes().len());
    pretrain_cells(&graph, cfg.model.dim, &cfg.walk, derive_seed(cfg.seed, &[3]))
}

/// Runs the remaining epochs of `trainer`, calling `on_step` after every
/// step and `on_epoch` after every epoch.
pub fn train_epochs(
    trainer: &mut Trainer,
    data: &[Tensor],
    on_step: &mut dyn FnMut(u64, &LossReport) -> Result<()>,
    on_epoch: &mut dyn FnMut(&Trainer, &EpochSummary) -> Result<()>,
) -> Result<Vec<EpochSummary>> {
    let mut out = Vec::new();
    while trainer.epoch < trainer.config.train.epochs {
        let s = trainer.run_epoch(data, on_step)?;
        on_epoch(trainer, &s)?;
        out.push(s);
    }
    Ok(out)
}

/// Self-similarity of `state` on the test split.
pub fn evaluate_selfsim(cfg: &RunConfig, state: &ModelState, prep: &Prepared) -> Result<RankReport> {
    let enc = ModelEncoder {
        state,
        table: &prep.table,
        spec: &prep.spec,
    };
    evaluate_with(cfg, &enc, prep)
}

pub fn evaluate_with(cfg: &RunConfig, enc: &dyn TrajEncoder, prep: &Prepared) -> Result<RankReport> {
    let seed = derive_seed(cfg.seed, &[4]);
    let setup = build_selfsim(&prep.test, &cfg.selfsim, seed)?;
    self_similarity(enc, &setup, &cfg.selfsim, &prep.spec, seed)
}

pub fn embed_train(prep: &Prepared) -> Result<Vec<Tensor>> {
    prepare_embeddings(&prep.train, &prep.table, &prep.spec)
}

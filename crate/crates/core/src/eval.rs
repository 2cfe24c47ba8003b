//! Self-similarity retrieval and frozen-encoder fine-tuning to heuristic
//! measures.

use crate::config::{EmbeddingMetric, FinetuneConfig, SelfSimConfig, TrainConfig};
use crate::data::{distort, downsample, odd_even_split, Trajectory};
use crate::error::{Error, Result};
use crate::hexgrid::{HexGridSpec, Point2};
use crate::jepa::{infer, ModelState};
use crate::measures::{pairwise_matrix, MeasureConfig, MeasureKind, PairwiseMatrix};
use crate::params::{Init, ParamStore};
use crate::region_embed::EmbeddingTable;
use crate::rng::{derive_seed, stream};
use crate::tensor::{Tape, Tensor};
use crate::train::AdamState;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::io::Write;

/// Anything that maps a trajectory to a fixed-width vector.
pub trait TrajEncoder: Sync {
    fn dim(&self) -> usize;
    fn encode(&self, t: &Trajectory) -> Result<Vec<f64>>;
    /// Digest of the encoder's state.
    fn fingerprint(&self) -> String;
}

/// The trained context hierarchy.
pub struct ModelEncoder<'a> {
    pub state: &'a ModelState,
    pub table: &'a EmbeddingTable,
    pub spec: &'a HexGridSpec,
}

impl TrajEncoder for ModelEncoder<'_> {
    fn dim(&self) -> usize {
        self.state.config.dim
    }

    fn encode(&self, t: &Trajectory) -> Result<Vec<f64>> {
        infer(self.state, self.table, self.spec, t)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for store in [&self.state.online, &self.state.target] {
            for (name, t) in store.iter() {
                h.update(name.as_bytes());
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }
}

/// Independent Gaussian vectors keyed by trajectory id; the chance-level
/// baseline.
pub struct RandomEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl TrajEncoder for RandomEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, t: &Trajectory) -> Result<Vec<f64>> {
        let digest = Sha256::digest(t.id.as_bytes());
        let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = stream(self.seed, &[0x7A4D, key]);
        Ok((0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    fn fingerprint(&self) -> String {
        format!("random:{}:{}", self.dim, self.seed)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn embed_all(enc: &dyn TrajEncoder, trajs: &[Trajectory]) -> Result<Vec<Vec<f64>>> {
    trajs.par_iter().map(|t| enc.encode(t)).collect()
}

pub fn distance(a: &[f64], b: &[f64], metric: EmbeddingMetric) -> f64 {
    match metric {
        EmbeddingMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        EmbeddingMetric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na * nb)
            }
        }
    }
}

/// 1-based rank of `db[truth]` when `db` is sorted by distance to `query`;
/// ties go to the smaller database index.
pub fn rank_of(query: &[f64], db: &[Vec<f64>], truth: usize, metric: EmbeddingMetric) -> usize {
    let dt = distance(query, &db[truth], metric);
    1 + db
        .iter()
        .enumerate()
        .filter(|&(j, e)| {
            let d = distance(query, e, metric);
            d < dt || (d == dt && j < truth)
        })
        .count()
}

/// Mean rank where query `i` is matched by `db[i]`.
pub fn mean_rank(queries: &[Vec<f64>], db: &[Vec<f64>], metric: EmbeddingMetric) -> f64 {
    let ranks: Vec<usize> = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| rank_of(q, db, i, metric))
        .collect();
    ranks.iter().sum::<usize>() as f64 / ranks.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    DbSize,
    Downsample,
    Distort,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::DbSize => "db_size",
            Variant::Downsample => "downsample",
            Variant::Distort => "distort",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankCell {
    pub variant: Variant,
    /// Database fraction or augmentation rate.
    pub value: f64,
    pub db_size: usize,
    pub mean_rank: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RankReport {
    pub cells: Vec<RankCell>,
}

impl RankReport {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for c in &self.cells {
            out.serialize(c).map_err(|e| Error::Format(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Plain-text table: one row per variant, one column per grid value.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        for v in [Variant::DbSize, Variant::Downsample, Variant::Distort] {
            let cells: Vec<&RankCell> = self.cells.iter().filter(|c| c.variant == v).collect();
            if cells.is_empty() {
                continue;
            }
            let _ = write!(s, "{:<11}", v.name());
            for c in &cells {
                let _ = write!(s, " {:>5}={:<9.3}", format!("{}", c.value), c.mean_rank);
            }
            s.push('\n');
        }
        s
    }

    pub fn get(&self, variant: Variant, value: f64) -> Option<&RankCell> {
        self.cells.iter().find(|c| c.variant == variant && c.value == value)
    }
}

/// Query halves and the database built around them.
#[derive(Clone, Debug)]
pub struct SelfSimSetup {
    /// Odd-point halves of the queries.
    pub queries: Vec<Trajectory>,
    /// Even-point halves: query twins first, then fillers.
    pub database: Vec<Trajectory>,
}

/// Picks queries and fillers from `pool`. Every database entry is an
/// even-point half, so twins and distractors share sampling density.
pub fn build_selfsim(pool: &[Trajectory], cfg: &SelfSimConfig, seed: u64) -> Result<SelfSimSetup> {
    cfg.validate()?;
    if pool.len() < cfg.db_size {
        return Err(Error::Config(format!(
            "database of {} needs that many test trajectories, have {}",
            cfg.db_size,
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut stream(seed, &[0x5E15]));
    let mut queries = Vec::with_capacity(cfg.query_count);
    let mut twins = Vec::with_capacity(cfg.db_size);
    for &i in &order[..cfg.db_size] {
        let (a, b) = odd_even_split(&pool[i])?;
        if queries.len() < cfg.query_count {
            queries.push(a);
        }
        twins.push(b);
    }
    Ok(SelfSimSetup {
        queries,
        database: twins,
    })
}

fn augment(
    trajs: &[Trajectory],
    variant: Variant,
    rate: f64,
    std_m: f64,
    spec: &HexGridSpec,
    seed: u64,
    side: u64,
) -> Result<Vec<Trajectory>> {
    trajs
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let s = derive_seed(seed, &[0xA06, side, i as u64]);
            match variant {
                Variant::DbSize => Ok(t.clone()),
                Variant::Downsample => downsample(t, rate, s),
                Variant::Distort => distort(t, rate, std_m, spec, s),
            }
        })
        .collect()
}

/// Mean rank of each query's twin over the database-size, down-sampling
/// and distortion grids.
pub fn self_similarity(
    enc: &dyn TrajEncoder,
    setup: &SelfSimSetup,
    cfg: &SelfSimConfig,
    spec: &HexGridSpec,
    seed: u64,
) -> Result<RankReport> {
    cfg.validate()?;
    let q = setup.queries.len();
    let db_total = setup.database.len();
    for &f in &cfg.db_fractions {
        let size = (f * db_total as f64).round() as usize;
        if size < q {
            return Err(Error::Config(format!(
                "db fraction {f} leaves {size} entries for {q} queries"
            )));
        }
    }
    let mut report = RankReport::default();
    let qe = embed_all(enc, &setup.queries)?;
    let de = embed_all(enc, &setup.database)?;
    for &f in &cfg.db_fractions {
        let size = (f * db_total as f64).round() as usize;
        report.cells.push(RankCell {
            variant: Variant::DbSize,
            value: f,
            db_size: size,
            mean_rank: mean_rank(&qe, &de[..size], cfg.metric),
            count: q,
        });
    }
    for (variant, grid) in [
        (Variant::Downsample, &cfg.rho_s_grid),
        (Variant::Distort, &cfg.rho_d_grid),
    ] {
        for &rate in grid {
            let qa = augment(&setup.queries, variant, rate, cfg.distort_std_m, spec, seed, 0)?;
            let da = augment(&setup.database, variant, rate, cfg.distort_std_m, spec, seed, 1)?;
            let qe = embed_all(enc, &qa)?;
            let de = embed_all(enc, &da)?;
            report.cells.push(RankCell {
                variant,
                value: rate,
                db_size: db_total,
                mean_rank: mean_rank(&qe, &de, cfg.metric),
                count: q,
            });
        }
    }
    Ok(report)
}

fn check_rankings(pred: &[usize], truth: &[usize], min_len: usize) -> Result<()> {
    if pred.len() < min_len || truth.len() < min_len {
        return Err(Error::Length(format!("rankings need at least {min_len} candidates")));
    }
    let mut a = pred.to_vec();
    let mut b = truth.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(Error::Invariant("rankings cover different candidates".into()));
    }
    Ok(())
}

fn overlap(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|x| b.contains(x)).count()
}

/// `|top-k(pred) ∩ top-k(truth)| / k`.
pub fn hr_at_k(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    check_rankings(pred, truth, k.max(1))?;
    Ok(overlap(&pred[..k], &truth[..k]) as f64 / k as f64)
}

/// `|top-20(pred) ∩ top-5(truth)| / 5`.
pub fn r5_at_20(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_rankings(pred, truth, 20)?;
    Ok(overlap(&pred[..20], &truth[..5]) as f64 / 5.0)
}

/// Candidates sorted by ascending score, ties by index.
pub fn ranking(scores: &[(usize, f64)]) -> Vec<usize> {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    s.into_iter().map(|p| p.0).collect()
}

/// Two-layer pair decoder on `|e_a − e_b| ⊕ (e_a ⊙ e_b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDecoder {
    pub params: ParamStore,
    dim: usize,
}

impl PairDecoder {
    /// Starts as the mean absolute difference: the hidden layer copies
    /// `|e_a − e_b|` and the output averages it.
    pub fn new(dim: usize) -> Self {
        let mut params = ParamStore::new();
        let mut w1 = Tensor::zeros(&[2 * dim, dim]);
        for i in 0..dim {
            w1.data_mut()[i * dim + i] = 1.0;
        }
        params.insert("dec.w1", w1);
        params.add("dec.b1", &[1, dim], Init::Zeros, 0);
        params.add("dec.w2", &[dim, 1], Init::Const(1.0 / dim as f64), 0);
        params.add("dec.b2", &[1, 1], Init::Zeros, 0);
        Self { params, dim }
    }

    pub fn features(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .chain(a.iter().zip(b).map(|(x, y)| x * y))
            .collect()
    }

    fn forward(&self, tape: &mut Tape, x: Tensor, vars: &[crate::tensor::Var]) -> Result<crate::tensor::Var> {
        let x = tape.constant(x);
        let h = tape.matmul(x, vars[0])?;
        let h = tape.add_row(h, vars[1])?;
        let h = tape.relu(h);
        let o = tape.matmul(h, vars[2])?;
        tape.add_row(o, vars[3])
    }

    fn batch(&self, emb: &[Vec<f64>], pairs: &[(usize, usize)]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(pairs.len() * 2 * self.dim);
        for &(i, j) in pairs {
            data.extend(Self::features(&emb[i], &emb[j]));
        }
        Tensor::matrix(pairs.len(), 2 * self.dim, data)
    }

    pub fn predict(&self, emb: &[Vec<f64>], pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = self.batch(emb, pairs)?;
        let o = self.forward(&mut tape, x, &vars)?;
        Ok(tape.value(o).data().to_vec())
    }

    /// Rescales the output layer by the least-squares line from current
    /// predictions to `y`.
    pub fn calibrate(&mut self, emb: &[Vec<f64>], pairs: &[(usize, usize)], y: &[f64]) -> Result<()> {
        let p = self.predict(emb, pairs)?;
        let n = p.len() as f64;
        if n < 2.0 {
            return Ok(());
        }
        let (mp, my) = (p.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxx: f64 = p.iter().map(|v| (v - mp).powi(2)).sum();
        if sxx <= 0.0 {
            return Ok(());
        }
        let sxy: f64 = p.iter().zip(y).map(|(a, b)| (a - mp) * (b - my)).sum();
        let (alpha, beta) = (sxy / sxx, my - sxy / sxx * mp);
        for name in ["dec.w2", "dec.b2"] {
            let id = self.params.id_of(name).expect("decoder output layer");
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
        let b2 = self.params.id_of("dec.b2").expect("decoder output bias");
        self.params.get_mut(b2).data_mut()[0] += beta;
        Ok(())
    }

    /// One Adam step on mean-squared error; returns the batch loss.
    fn step(
        &mut self,
        emb: &[Vec<f64>],
        pairs: &[(usize, usize)],
        y: &[f64],
        adam: &mut AdamState,
        lr: f64,
        tc: &TrainConfig,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, true);
        let x = self.batch(emb, pairs)?;
        let o = self.forward(&mut tape, x, &vars)?;
        let t = tape.constant(Tensor::matrix(y.len(), 1, y.to_vec())?);
        let d = tape.sub(o, t)?;
        let sq = tape.mul(d, d)?;
        let loss = tape.mean(sq);
        let grads = tape.backward(loss);
        adam.update(&mut self.params, &grads, &vars, lr, tc);
        Ok(tape.value(loss).item())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub measure: MeasureKind,
    pub hr5: f64,
    pub hr20: f64,
    pub r5_20: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

impl FinetuneReport {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["measure", "metric", "value"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for (name, v) in [
            ("hr5", self.hr5),
            ("hr20", self.hr20),
            ("r5_20", self.r5_20),
            ("val_mse", self.val_mse),
        ] {
            out.write_record([self.measure.name(), name, &v.to_string()])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// 7:1:2 split of `0..n` under `seed`.
pub fn split_712(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[0x712]));
    let n_train = (0.7 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    (train, val, test)
}

fn all_pairs(idx: &[usize]) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            v.push((i, j));
        }
    }
    v
}

/// Trains a pair decoder on frozen embeddings to regress min-max
/// normalised ground-truth distances, then scores top-k retrieval on the
/// test split.
pub fn finetune_decoder(
    enc: &dyn TrajEncoder,
    pool: &[Trajectory],
    measure: &MeasureConfig,
    cfg: &FinetuneConfig,
    spec: &HexGridSpec,
    seed: u64,
) -> Result<(PairDecoder, FinetuneReport)> {
    cfg.validate()?;
    measure.validate()?;
    let before = enc.fingerprint();
    let emb = embed_all(enc, pool)?;
    let planar: Vec<Vec<Point2>> = pool.iter().map(|t| t.projected(spec)).collect();
    let gt: PairwiseMatrix = pairwise_matrix(&planar, measure, true)?;
    let (train, val, test) = split_712(pool.len(), seed);
    if test.len() < 21 {
        return Err(Error::Config(format!(
            "test split of {} is too small for top-20 metrics",
            test.len()
        )));
    }
    let train_pairs = all_pairs(&train);
    let (lo, hi) = train_pairs
        .iter()
        .map(|&(i, j)| gt.get(i, j))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let norm = |v: f64| (v - lo) / span;
    let mut dec = PairDecoder::new(enc.dim());
    let train_y: Vec<f64> = train_pairs.iter().map(|&(i, j)| norm(gt.get(i, j))).collect();
    dec.calibrate(&emb, &train_pairs, &train_y)?;
    let mut adam = AdamState::new(&dec.params);
    let tc = TrainConfig::default();
    let mut order = train_pairs.clone();
    let mut train_mse = 0.0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(seed, &[0xF17E, epoch as u64]));
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_pairs) {
            let y: Vec<f64> = chunk.iter().map(|&(i, j)| norm(gt.get(i, j))).collect();
            sum += dec.step(&emb, chunk, &y, &mut adam, cfg.lr, &tc)?;
            batches += 1;
        }
        train_mse = sum / batches.max(1) as f64;
    }
    let val_pairs = all_pairs(&val);
    let val_mse = if val_pairs.is_empty() {
        0.0
    } else {
        let p = dec.predict(&emb, &val_pairs)?;
        p.iter()
            .zip(&val_pairs)
            .map(|(v, &(i, j))| (v - norm(gt.get(i, j))).powi(2))
            .sum::<f64>()
            / val_pairs.len() as f64
    };
    let per_query: Vec<(f64, f64, f64)> = test
        .par_iter()
        .map(|&a| -> Result<(f64, f64, f64)> {
            let others: Vec<usize> = test.iter().copied().filter(|&b| b != a).collect();
            let pairs: Vec<(usize, usize)> = others.iter().map(|&b| (a, b)).collect();
            let pred = dec.predict(&emb, &pairs)?;
            let pr = ranking(&others.iter().copied().zip(pred).collect::<Vec<_>>());
            let tr = ranking(&others.iter().map(|&b| (b, gt.get(a, b))).collect::<Vec<_>>());
            Ok((hr_at_k(&pr, &tr, 5)?, hr_at_k(&pr, &tr, 20)?, r5_at_20(&pr, &tr)?))
        })
        .collect::<Result<_>>()?;
    let k = per_query.len() as f64;
    let report = FinetuneReport {
        measure: measure.kind,
        hr5: per_query.iter().map(|p| p.0).sum::<f64>() / k,
        hr20: per_query.iter().map(|p| p.1).sum::<f64>() / k,
        r5_20: per_query.iter().map(|p| p.2).sum::<f64>() / k,
        train_size: train.len(),
        val_size: val.len(),
        test_size: test.len(),
        train_mse,
        val_mse,
    };
    if enc.fingerprint() != before {
        return Err(Error::Invariant("encoder state changed during fine-tuning".into()));
    }
    Ok((dec, report))
}

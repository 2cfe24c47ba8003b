//! Cell embeddings: biased second-order random walks over the region graph
//! followed by skip-gram training with negative sampling.

use crate::error::{Error, Result};
use crate::hexgrid::{GpsPoint, HexCellId, HexGridSpec, Point2, RegionGraph};
use crate::rng::stream;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};

const TABLE_MAGIC: &[u8; 4] = b"HXEM";
const TABLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkConfig {
    pub walks_per_node: usize,
    pub walk_len: usize,
    pub return_p: f64,
    pub inout_q: f64,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            walks_per_node: 10,
            walk_len: 40,
            return_p: 1.0,
            inout_q: 1.0,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("walks_per_node", self.walks_per_node),
            ("walk_len", self.walk_len),
            ("window", self.window),
            ("negatives", self.negatives),
            ("epochs", self.epochs),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.return_p > 0.0 && self.inout_q > 0.0 && self.lr > 0.0) {
            return Err(Error::Config("return_p, inout_q and lr must be > 0".into()));
        }
        Ok(())
    }
}

/// `walks_per_node` node2vec walks from every node, grouped by start node.
///
/// Each start node draws from its own RNG stream, so the result does not
/// depend on how the work is split across threads.
pub fn random_walks(g: &RegionGraph, cfg: &WalkConfig, seed: u64) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    if g.node_count() == 0 {
        return Err(Error::EmptyGraph);
    }
    let per_node: Vec<Vec<Vec<usize>>> = (0..g.node_count())
        .into_par_iter()
        .map(|start| {
            let mut rng = stream(seed, &[0x57A1, start as u64]);
            (0..cfg.walks_per_node)
                .map(|_| walk_from(g, start, cfg, &mut rng))
                .collect()
        })
        .collect();
    Ok(per_node.into_iter().flatten().collect())
}

fn walk_from(g: &RegionGraph, start: usize, cfg: &WalkConfig, rng: &mut impl Rng) -> Vec<usize> {
    let mut walk = Vec::with_capacity(cfg.walk_len);
    walk.push(start);
    let mut weights = Vec::with_capacity(6);
    while walk.len() < cfg.walk_len {
        let cur = *walk.last().unwrap();
        let nbrs = g.neighbors_of(cur);
        if nbrs.is_empty() {
            break;
        }
        let next = if walk.len() == 1 {
            nbrs[rng.random_range(0..nbrs.len())]
        } else {
            let prev = walk[walk.len() - 2];
            let prev_nbrs = g.neighbors_of(prev);
            weights.clear();
            for &x in nbrs {
                let w = if x == prev {
                    1.0 / cfg.return_p
                } else if prev_nbrs.binary_search(&x).is_ok() {
                    1.0
                } else {
                    1.0 / cfg.inout_q
                };
                weights.push(w);
            }
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = nbrs[nbrs.len() - 1];
            for (&x, &w) in nbrs.iter().zip(&weights) {
                if u < w {
                    pick = x;
                    break;
                }
                u -= w;
            }
            pick
        };
        walk.push(next);
    }
    walk
}

/// Trained cell vectors plus the implicit all-zero PAD vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    cells: Vec<HexCellId>,
    vectors: Vec<f64>,
    index: HashMap<HexCellId, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, entries: Vec<(HexCellId, Vec<f64>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be > 0".into()));
        }
        let mut entries = entries;
        entries.sort_by_key(|(c, _)| *c);
        let mut cells = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        for (c, v) in entries {
            if v.len() != dim {
                return Err(Error::Format(format!("vector for {c:?} has length {}", v.len())));
            }
            cells.push(c);
            vectors.extend(v);
        }
        let index = cells.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        Ok(Self {
            dim,
            cells,
            vectors,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[HexCellId] {
        &self.cells
    }

    pub fn vector(&self, c: &HexCellId) -> Option<&[f64]> {
        self.index
            .get(c)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn pad(&self) -> Vec<f64> {
        vec![0.0; self.dim]
    }

    pub fn max_norm(&self) -> f64 {
        self.vectors
            .chunks(self.dim)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Trained cell whose centre is nearest to `p`; ties go to the smaller id.
    pub fn nearest_trained(&self, p: &Point2, spec: &HexGridSpec) -> Option<HexCellId> {
        self.cells
            .iter()
            .map(|c| (spec.center_xy(*c).dist(p), *c))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, c)| c)
    }

    /// `h_δ(p)`. Points in cells without a trained vector (including points
    /// outside the bounding box) fall back to the nearest trained cell.
    pub fn lookup(&self, p: &GpsPoint, spec: &HexGridSpec) -> Result<&[f64]> {
        self.lookup_xy(&spec.project(p), spec)
    }

    pub fn lookup_xy(&self, xy: &Point2, spec: &HexGridSpec) -> Result<&[f64]> {
        if self.is_empty() {
            return Err(Error::State("embedding table is empty".into()));
        }
        let cell = spec.cell_of_xy(xy);
        if let Some(v) = self.vector(&cell) {
            return Ok(v);
        }
        let near = self.nearest_trained(xy, spec).expect("table is non-empty");
        Ok(self.vector(&near).expect("cell from table"))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TABLE_MAGIC)?;
        w.write_u32::<LittleEndian>(TABLE_VERSION)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u64::<LittleEndian>(self.cells.len() as u64)?;
        for (i, c) in self.cells.iter().enumerate() {
            w.write_i32::<LittleEndian>(c.q)?;
            w.write_i32::<LittleEndian>(c.r)?;
            for v in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TABLE_MAGIC {
            return Err(Error::Format("not an embedding table".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != TABLE_VERSION {
            return Err(Error::Format(format!("unsupported table version {version}")));
        }
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let count = r.read_u64::<LittleEndian>()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let q = r.read_i32::<LittleEndian>()?;
            let rr = r.read_i32::<LittleEndian>()?;
            let mut v = vec![0.0; dim];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            entries.push((HexCellId::new(q, rr), v));
        }
        Self::new(dim, entries)
    }
}

/// Result of skip-gram training: the table plus mean loss per epoch.
pub struct SkipGramOutcome {
    pub table: EmbeddingTable,
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Skip-gram with negative sampling over node-index walks.
pub fn train_skipgram(
    walks: &[Vec<usize>],
    nodes: &[HexCellId],
    dim: usize,
    cfg: &WalkConfig,
    seed: u64,
) -> Result<SkipGramOutcome> {
    cfg.validate()?;
    if dim == 0 {
        return Err(Error::Config("embedding dim must be > 0".into()));
    }
    if walks.is_empty() {
        return Err(Error::Data("no walks to train on".into()));
    }
    let vocab = nodes.len();
    let mut counts = vec![0u64; vocab];
    for w in walks {
        for &v in w {
            if v >= vocab {
                return Err(Error::Data(format!("walk node {v} outside vocabulary of {vocab}")));
            }
            counts[v] += 1;
        }
    }
    // unigram^0.75 noise distribution
    let mut cdf: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
    let mut acc = 0.0;
    for v in cdf.iter_mut() {
        acc += *v;
        *v = acc;
    }
    let mut rng = stream(seed, &[0x5C19]);
    let mut input: Vec<f64> = (0..vocab * dim)
        .map(|_| rng.random_range(-0.5..0.5) / dim as f64)
        .collect();
    let mut output = vec![0.0; vocab * dim];

    let tokens: usize = walks.iter().map(Vec::len).sum();
    let total_steps = (tokens * cfg.epochs).max(1) as f64;
    let min_lr = cfg.lr * 1e-4;
    let mut processed = 0usize;
    let mut order: Vec<usize> = (0..walks.len()).collect();
    let mut grad_in = vec![0.0; dim];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut pairs) = (0.0, 0usize);
        for &wi in &order {
            let walk = &walks[wi];
            for (i, &center) in walk.iter().enumerate() {
                let lr = (cfg.lr * (1.0 - processed as f64 / total_steps)).max(min_lr);
                processed += 1;
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window + 1).min(walk.len());
                for (j, &ctx) in walk.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let u = &input[center * dim..(center + 1) * dim];
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    let mut pair_loss = 0.0;
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (ctx, 1.0)
                        } else {
                            let r = rng.random::<f64>() * acc;
                            let t = cdf.partition_point(|&c| c <= r).min(vocab - 1);
                            if t == ctx {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let v = &mut output[target * dim..(target + 1) * dim];
                        let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                        let s = sigmoid(dot);
                        pair_loss -= if label > 0.0 {
                            s.max(1e-12).ln()
                        } else {
                            (1.0 - s).max(1e-12).ln()
                        };
                        let gscale = (label - s) * lr;
                        for d in 0..dim {
                            grad_in[d] += gscale * v[d];
                            v[d] += gscale * u[d];
                        }
                    }
                    let u = &mut input[center * dim..(center + 1) * dim];
                    u.iter_mut().zip(&grad_in).for_each(|(a, g)| *a += g);
                    loss_sum += pair_loss;
                    pairs += 1;
                }
            }
        }
        let mean = if pairs > 0 { loss_sum / pairs as f64 } else { 0.0 };
        info!("skip-gram epoch {}: mean loss {mean:.5} over {pairs} pairs", epoch + 1);
        epoch_losses.push(mean);
    }

    let entries = nodes
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, input[i * dim..(i + 1) * dim].to_vec()))
        .collect();
    Ok(SkipGramOutcome {
        table: EmbeddingTable::new(dim, entries)?,
        epoch_losses,
    })
}

/// Walks plus skip-gram in one call.
pub fn pretrain_cells(g: &RegionGraph, dim: usize, cfg: &WalkConfig, seed: u64) -> Result<SkipGramOutcome> {
    let walks = random_walks(g, cfg, seed)?;
    train_skipgram(&walks, g.nodes(), dim, cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> HexGridSpec {
        HexGridSpec::around(116.4, 39.9, 3_000.0, 40.0)
    }

    /// A ring of hex cells, as node indices in ring order.
    fn ring_graph(radius: i32) -> (RegionGraph, Vec<HexCellId>) {
        let mut ring = Vec::new();
        let mut c = HexCellId::new(-radius, radius); // start at direction 4 scaled
        for dir in 0..6 {
            let (dq, dr) = crate::hexgrid::AXIAL_DIRECTIONS[dir];
            for _ in 0..radius {
                ring.push(c);
                c = HexCellId::new(c.q + dq, c.r + dr);
            }
        }
        let g = RegionGraph::from_cells(ring.clone()).unwrap();
        (g, ring)
    }

    #[test]
    fn isolated_node_walk_has_length_one() {
        let g = RegionGraph::from_cells([HexCellId::new(0, 0), HexCellId::new(5, 5)]).unwrap();
        let cfg = WalkConfig::default();
        let walks = random_walks(&g, &cfg, 1).unwrap();
        assert_eq!(walks.len(), 2 * cfg.walks_per_node);
        assert!(walks.iter().all(|w| w.len() == 1));
    }

    #[test]
    fn unbiased_walk_on_triangle_is_uniform() {
        // three mutually adjacent cells
        let g = RegionGraph::from_cells([HexCellId::new(0, 0), HexCellId::new(1, 0), HexCellId::new(0, 1)]).unwrap();
        assert_eq!(g.edges().len(), 3);
        let cfg = WalkConfig {
            walks_per_node: 1000,
            walk_len: 35,
            ..WalkConfig::default()
        };
        let walks = random_walks(&g, &cfg, 9).unwrap();
        // from node 0, next-step counts over the two other nodes
        let mut counts = [0usize; 3];
        for w in &walks {
            for pair in w.windows(2) {
                if pair[0] == 0 {
                    counts[pair[1]] += 1;
                }
            }
        }
        let total = (counts[1] + counts[2]) as f64;
        assert!(total > 1e4);
        let expect = total / 2.0;
        let chi2 = [counts[1], counts[2]]
            .iter()
            .map(|&c| (c as f64 - expect).powi(2) / expect)
            .sum::<f64>();
        // 1 dof, p = 0.001
        assert!(chi2 < 10.83, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn walks_are_deterministic_and_sized() {
        let (g, _) = ring_graph(4);
        let cfg = WalkConfig::default();
        let a = random_walks(&g, &cfg, 3).unwrap();
        let b = random_walks(&g, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), g.node_count() * cfg.walks_per_node);
        assert!(a.iter().all(|w| w.len() == cfg.walk_len));
    }

    #[test]
    fn single_node_skipgram_has_constant_zero_loss() {
        let g = RegionGraph::from_cells([HexCellId::new(0, 0)]).unwrap();
        let out = pretrain_cells(&g, 8, &WalkConfig::default(), 1).unwrap();
        assert_eq!(out.table.len(), 1);
        assert!(out.epoch_losses.iter().all(|l| *l == 0.0));
    }

    #[test]
    fn ring_neighbours_are_more_similar_than_antipodes() {
        let (g, ring) = ring_graph(4); // 24 cells
        let cfg = WalkConfig {
            epochs: 10,
            ..WalkConfig::default()
        };
        let out = pretrain_cells(&g, 16, &cfg, 5).unwrap();
        let cos = |a: &HexCellId, b: &HexCellId| {
            let (u, v) = (out.table.vector(a).unwrap(), out.table.vector(b).unwrap());
            let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (nu * nv)
        };
        let n = ring.len();
        let adj = (0..n).map(|i| cos(&ring[i], &ring[(i + 1) % n])).sum::<f64>() / n as f64;
        let anti = (0..n).map(|i| cos(&ring[i], &ring[(i + n / 2) % n])).sum::<f64>() / n as f64;
        assert!(adj > anti, "adjacent {adj} vs antipodal {anti}");
        assert!(out.epoch_losses.last().unwrap() <= &out.epoch_losses[0]);
        assert!(out.table.max_norm() <= 100.0);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (g, _) = ring_graph(3);
        let a = pretrain_cells(&g, 8, &WalkConfig::default(), 11).unwrap();
        let b = pretrain_cells(&g, 8, &WalkConfig::default(), 11).unwrap();
        assert_eq!(a.table, b.table);
    }

    #[test]
    fn lookup_uses_cell_then_nearest_trained_fallback() {
        let s = spec();
        let a = HexCellId::new(0, 0);
        let b = HexCellId::new(3, 0);
        let t = EmbeddingTable::new(2, vec![(a, vec![1.0, 0.0]), (b, vec![0.0, 1.0])]).unwrap();
        let pa = s.center(a);
        assert_eq!(t.lookup(&pa, &s).unwrap(), &[1.0, 0.0]);
        // two points inside the same cell
        let xy = s.center_xy(a);
        let near = s.unproject(&Point2::new(xy.x + 5.0, xy.y - 3.0));
        assert_eq!(t.lookup(&near, &s).unwrap(), t.lookup(&pa, &s).unwrap());
        // unseen cell (2,0) is nearer to b's centre
        let unseen = s.center(HexCellId::new(2, 0));
        let brute = [a, b]
            .into_iter()
            .min_by(|x, y| {
                let p = s.project(&unseen);
                s.center_xy(*x).dist(&p).total_cmp(&s.center_xy(*y).dist(&p))
            })
            .unwrap();
        assert_eq!(t.lookup(&unseen, &s).unwrap(), t.vector(&brute).unwrap());
        let empty = EmbeddingTable::new(2, vec![]).unwrap();
        assert!(matches!(empty.lookup(&pa, &s), Err(Error::State(_))));
    }

    #[test]
    fn table_serialization_round_trips() {
        let (g, _) = ring_graph(2);
        let out = pretrain_cells(&g, 4, &WalkConfig::default(), 2).unwrap();
        let mut buf = Vec::new();
        out.table.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], TABLE_MAGIC);
        assert_eq!(buf.len(), 4 + 4 + 4 + 8 + out.table.len() * (8 + 4 * 8));
        let back = EmbeddingTable::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, out.table);
    }
}

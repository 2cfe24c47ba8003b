//! Heuristic trajectory distances on projected planar coordinates: EDR,
//! LCSS, Hausdorff and discrete Fréchet, plus all-pairs matrices.

use crate::error::{Error, Result};
use crate::hexgrid::Point2;
use byteorder::{LittleEndian, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureKind {
    Edr,
    Lcss,
    Hausdorff,
    Frechet,
}

impl MeasureKind {
    pub fn name(self) -> &'static str {
        match self {
            MeasureKind::Edr => "edr",
            MeasureKind::Lcss => "lcss",
            MeasureKind::Hausdorff => "hausdorff",
            MeasureKind::Frechet => "frechet",
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }
}

impl std::str::FromStr for MeasureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "edr" => Ok(MeasureKind::Edr),
            "lcss" => Ok(MeasureKind::Lcss),
            "hausdorff" => Ok(MeasureKind::Hausdorff),
            "frechet" => Ok(MeasureKind::Frechet),
            other => Err(Error::Config(format!("unknown measure {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureConfig {
    pub kind: MeasureKind,
    /// Matching threshold in metres; used by EDR and LCSS only.
    pub eps_m: f64,
}

impl MeasureConfig {
    pub fn validate(&self) -> Result<()> {
        if matches!(self.kind, MeasureKind::Edr | MeasureKind::Lcss) && !(self.eps_m > 0.0) {
            return Err(Error::Config(format!("{} needs eps_m > 0", self.kind.name())));
        }
        Ok(())
    }
}

fn non_empty(a: &[Point2], b: &[Point2]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Length("trajectory measures need non-empty inputs".into()));
    }
    Ok(())
}

/// Edit distance on real sequences: substitution is free within `eps_m`.
pub fn edr(a: &[Point2], b: &[Point2], eps_m: f64) -> Result<usize> {
    non_empty(a, b)?;
    let m = b.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0; m + 1];
    for (i, pa) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, pb) in b.iter().enumerate() {
            let sub = if pa.dist(pb) <= eps_m { 0 } else { 1 };
            cur[j + 1] = (prev[j] + sub).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Longest common subsequence length under `eps_m` matching.
pub fn lcss_len(a: &[Point2], b: &[Point2], eps_m: f64) -> Result<usize> {
    non_empty(a, b)?;
    let m = b.len();
    let mut prev = vec![0usize; m + 1];
    let mut cur = vec![0usize; m + 1];
    for pa in a {
        for (j, pb) in b.iter().enumerate() {
            cur[j + 1] = if pa.dist(pb) <= eps_m {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// `1 − LCSS / min(|a|, |b|)`.
pub fn lcss_dist(a: &[Point2], b: &[Point2], eps_m: f64) -> Result<f64> {
    let l = lcss_len(a, b, eps_m)?;
    Ok(1.0 - l as f64 / a.len().min(b.len()) as f64)
}

/// Directed Hausdorff distance with early break: once a point of `b`
/// is closer than the running maximum, that `a` point cannot raise it.
fn directed_hausdorff(a: &[Point2], b: &[Point2]) -> f64 {
    let mut cmax = 0.0f64;
    for pa in a {
        let mut cmin = f64::INFINITY;
        for pb in b {
            let d = pa.dist(pb);
            if d < cmax {
                cmin = d;
                break;
            }
            cmin = cmin.min(d);
        }
        if cmin > cmax {
            cmax = cmin;
        }
    }
    cmax
}

pub fn hausdorff(a: &[Point2], b: &[Point2]) -> Result<f64> {
    non_empty(a, b)?;
    Ok(directed_hausdorff(a, b).max(directed_hausdorff(b, a)))
}

pub fn discrete_frechet(a: &[Point2], b: &[Point2]) -> Result<f64> {
    non_empty(a, b)?;
    let m = b.len();
    let mut prev = vec![0.0; m];
    let mut cur = vec![0.0; m];
    for (i, pa) in a.iter().enumerate() {
        for (j, pb) in b.iter().enumerate() {
            let d = pa.dist(pb);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => d.max(cur[j - 1]),
                (_, 0) => d.max(prev[0]),
                _ => d.max(prev[j].min(cur[j - 1]).min(prev[j - 1])),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

pub fn measure(cfg: &MeasureConfig, a: &[Point2], b: &[Point2]) -> Result<f64> {
    match cfg.kind {
        MeasureKind::Edr => edr(a, b, cfg.eps_m).map(|v| v as f64),
        MeasureKind::Lcss => lcss_dist(a, b, cfg.eps_m),
        MeasureKind::Hausdorff => hausdorff(a, b),
        MeasureKind::Frechet => discrete_frechet(a, b),
    }
}

/// Symmetric all-pairs distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseMatrix {
    pub kind: MeasureKind,
    n: usize,
    values: Vec<f64>,
}

impl PairwiseMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Other indices of row `i` by ascending distance, ties by index.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let row = self.row(i);
        let mut idx: Vec<usize> = (0..self.n).filter(|&j| j != i).collect();
        idx.sort_by(|&x, &y| row[x].total_cmp(&row[y]).then(x.cmp(&y)));
        idx
    }

    /// Header (`PWMX`, version, measure tag, n) then the strict upper
    /// triangle row by row, little-endian `f64`.
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"PWMX")?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_u8(self.kind.tag())?;
        w.write_u64::<LittleEndian>(self.n as u64)?;
        for i in 0..self.n {
            for j in i + 1..self.n {
                w.write_f64::<LittleEndian>(self.get(i, j))?;
            }
        }
        Ok(())
    }

    /// `query,rank,neighbor,distance` rows for the first `k` neighbours.
    pub fn write_neighbors_csv(&self, ids: &[String], k: usize, w: &mut impl Write) -> Result<()> {
        writeln!(w, "query,rank,neighbor,distance")?;
        for i in 0..self.n {
            for (rank, j) in self.neighbors(i).into_iter().take(k).enumerate() {
                writeln!(w, "{},{},{},{}", ids[i], rank + 1, ids[j], self.get(i, j))?;
            }
        }
        Ok(())
    }
}

/// All-pairs distances. `parallel` splits rows across the rayon pool; the
/// result is identical either way.
pub fn pairwise_matrix(trajs: &[Vec<Point2>], cfg: &MeasureConfig, parallel: bool) -> Result<PairwiseMatrix> {
    cfg.validate()?;
    let n = trajs.len();
    if n < 2 {
        return Err(Error::Length("pairwise matrix needs at least 2 trajectories".into()));
    }
    let row = |i: usize| -> Result<Vec<f64>> { (i + 1..n).map(|j| measure(cfg, &trajs[i], &trajs[j])).collect() };
    let upper: Vec<Vec<f64>> = if parallel {
        (0..n).into_par_iter().map(row).collect::<Result<_>>()?
    } else {
        (0..n).map(row).collect::<Result<_>>()?
    };
    let mut values = vec![0.0; n * n];
    for (i, r) in upper.iter().enumerate() {
        for (k, v) in r.iter().enumerate() {
            let j = i + 1 + k;
            values[i * n + j] = *v;
            values[j * n + i] = *v;
        }
    }
    Ok(PairwiseMatrix {
        kind: cfg.kind,
        n,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<Point2> {
        let n = rng.random_range(1..=max_len);
        (0..n)
            .map(|_| Point2::new(rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)))
            .collect()
    }

    fn edr_rec(a: &[Point2], b: &[Point2], eps: f64) -> usize {
        match (a.len(), b.len()) {
            (0, m) => m,
            (n, 0) => n,
            _ => {
                let sub = if a[0].dist(&b[0]) <= eps { 0 } else { 1 };
                (edr_rec(&a[1..], &b[1..], eps) + sub)
                    .min(edr_rec(&a[1..], b, eps) + 1)
                    .min(edr_rec(a, &b[1..], eps) + 1)
            }
        }
    }

    fn lcss_brute(a: &[Point2], b: &[Point2], eps: f64) -> usize {
        let subseqs =
            |n: usize| (0u32..1 << n).map(move |mask| (0..n).filter(|i| mask >> i & 1 == 1).collect::<Vec<_>>());
        let mut best = 0;
        for sa in subseqs(a.len()) {
            if sa.len() <= best {
                continue;
            }
            for sb in subseqs(b.len()) {
                if sb.len() == sa.len() && sa.iter().zip(&sb).all(|(&i, &j)| a[i].dist(&b[j]) <= eps) {
                    best = sa.len();
                    break;
                }
            }
        }
        best
    }

    fn frechet_rec(a: &[Point2], b: &[Point2], i: usize, j: usize) -> f64 {
        let d = a[i].dist(&b[j]);
        match (i, j) {
            (0, 0) => d,
            (0, _) => d.max(frechet_rec(a, b, 0, j - 1)),
            (_, 0) => d.max(frechet_rec(a, b, i - 1, 0)),
            _ => d.max(
                frechet_rec(a, b, i - 1, j)
                    .min(frechet_rec(a, b, i, j - 1))
                    .min(frechet_rec(a, b, i - 1, j - 1)),
            ),
        }
    }

    fn hausdorff_naive(a: &[Point2], b: &[Point2]) -> f64 {
        let dir = |x: &[Point2], y: &[Point2]| {
            x.iter()
                .map(|p| y.iter().map(|q| p.dist(q)).fold(f64::INFINITY, f64::min))
                .fold(0.0, f64::max)
        };
        dir(a, b).max(dir(b, a))
    }

    #[test]
    fn identity_cases_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = traj(&mut rng, 8);
        assert_eq!(edr(&t, &t, 0.5).unwrap(), 0);
        assert_eq!(lcss_dist(&t, &t, 0.5).unwrap(), 0.0);
        assert_eq!(hausdorff(&t, &t).unwrap(), 0.0);
        assert_eq!(discrete_frechet(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn closed_forms() {
        let t = vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)];
        let mut longer = t.clone();
        longer.push(Point2::new(100.0, 100.0));
        assert_eq!(edr(&t, &longer, 0.1).unwrap(), 1);
        let far = vec![Point2::new(50.0, 50.0), Point2::new(60.0, 60.0)];
        assert_eq!(lcss_dist(&t, &far, 1.0).unwrap(), 1.0);
        let a = vec![Point2::new(0.0, 0.0)];
        let b = vec![Point2::new(3.0, 4.0)];
        assert_eq!(hausdorff(&a, &b).unwrap(), 5.0);
        assert_eq!(discrete_frechet(&a, &b).unwrap(), 5.0);
        assert!(edr(&[], &b, 1.0).is_err());
        assert!(hausdorff(&a, &[]).is_err());
    }

    #[test]
    fn dynamic_programs_match_recursive_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let (a, b) = (traj(&mut rng, 8), traj(&mut rng, 8));
            let eps = rng.random_range(0.5..4.0);
            assert_eq!(edr(&a, &b, eps).unwrap(), edr_rec(&a, &b, eps));
            assert_eq!(lcss_len(&a, &b, eps).unwrap(), lcss_brute(&a, &b, eps));
            assert_eq!(
                discrete_frechet(&a, &b).unwrap(),
                frechet_rec(&a, &b, a.len() - 1, b.len() - 1)
            );
            assert_eq!(hausdorff(&a, &b).unwrap(), hausdorff_naive(&a, &b));
        }
    }

    #[test]
    fn symmetry_bounds_and_dominance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (a, b) = (traj(&mut rng, 12), traj(&mut rng, 12));
            let eps = 1.5;
            let e = edr(&a, &b, eps).unwrap();
            assert_eq!(e, edr(&b, &a, eps).unwrap());
            assert!(a.len().abs_diff(b.len()) <= e && e <= a.len().max(b.len()));
            assert_eq!(lcss_dist(&a, &b, eps).unwrap(), lcss_dist(&b, &a, eps).unwrap());
            let h = hausdorff(&a, &b).unwrap();
            assert_eq!(h, hausdorff(&b, &a).unwrap());
            let f = discrete_frechet(&a, &b).unwrap();
            assert_eq!(f, discrete_frechet(&b, &a).unwrap());
            assert!(f >= h);
        }
    }

    #[test]
    fn pairwise_matrix_is_symmetric_and_parallel_safe() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ts: Vec<Vec<Point2>> = (0..12).map(|_| traj(&mut rng, 10)).collect();
        let cfg = MeasureConfig {
            kind: MeasureKind::Frechet,
            eps_m: 1.0,
        };
        let seq = pairwise_matrix(&ts, &cfg, false).unwrap();
        let par = pairwise_matrix(&ts, &cfg, true).unwrap();
        assert_eq!(seq, par);
        for i in 0..12 {
            assert_eq!(seq.get(i, i), 0.0);
            for j in 0..12 {
                assert_eq!(seq.get(i, j), seq.get(j, i));
            }
            let nb = seq.neighbors(i);
            assert_eq!(nb.len(), 11);
            assert!(nb.windows(2).all(|w| seq.get(i, w[0]) <= seq.get(i, w[1])));
        }
        let two = pairwise_matrix(&ts[..2], &cfg, false).unwrap();
        assert_eq!(two.get(0, 1), two.get(1, 0));
        let mut buf = Vec::new();
        two.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 1 + 8 + 8);
        assert!(pairwise_matrix(&ts[..1], &cfg, false).is_err());
    }
}

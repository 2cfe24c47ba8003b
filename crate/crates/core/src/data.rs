//! Trajectories: CSV ingestion, a synthetic generator, the robustness
//! augmentations (down-sampling, distortion), odd/even query splitting and
//! padded embedding batches.

use crate::error::{Error, Result};
use crate::hexgrid::{GpsPoint, HexGridSpec, Point2};
use crate::region_embed::EmbeddingTable;
use crate::rng::stream;
use crate::tensor::Tensor;
use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub points: Vec<GpsPoint>,
    pub timestamps: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, points: Vec<GpsPoint>) -> Self {
        Self {
            id: id.into(),
            points,
            timestamps: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn projected(&self, spec: &HexGridSpec) -> Vec<Point2> {
        self.points.iter().map(|p| spec.project(p)).collect()
    }

    fn select(&self, keep: &[usize]) -> Self {
        Self {
            id: self.id.clone(),
            points: keep.iter().map(|&i| self.points[i]).collect(),
            timestamps: self.timestamps.as_ref().map(|ts| keep.iter().map(|&i| ts[i]).collect()),
        }
    }
}

/// Accepted trajectory lengths, inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthFilter {
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for LengthFilter {
    fn default() -> Self {
        Self {
            min_len: 20,
            max_len: 200,
        }
    }
}

impl LengthFilter {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < 4 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "length filter [{}, {}] must satisfy 4 <= min_len <= max_len",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    pub fn accepts(&self, n: usize) -> bool {
        (self.min_len..=self.max_len).contains(&n)
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct LoadReport {
    pub rows: usize,
    pub dropped_points: usize,
    pub filtered_trajectories: usize,
}

/// Reads `traj_id,seq,lon,lat[,t]` rows (header required), groups them by
/// trajectory in first-appearance order and sorts each by `seq`.
pub fn load_csv(path: &Path, spec: &HexGridSpec, filter: &LengthFilter) -> Result<(Vec<Trajectory>, LoadReport)> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_csv(file, spec, filter)
}

pub fn read_csv(
    input: impl std::io::Read,
    spec: &HexGridSpec,
    filter: &LengthFilter,
) -> Result<(Vec<Trajectory>, LoadReport)> {
    filter.validate()?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(c_id), Some(c_seq), Some(c_lon), Some(c_lat)) = (col("traj_id"), col("seq"), col("lon"), col("lat"))
    else {
        return Err(Error::Parse {
            line: 1,
            msg: "header must contain traj_id, seq, lon, lat".into(),
        });
    };
    let c_t = col("t");

    struct Row {
        seq: i64,
        point: GpsPoint,
        t: Option<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    let mut report = LoadReport::default();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| {
            rec.get(i).ok_or_else(|| Error::Parse {
                line,
                msg: format!("missing column {i}"),
            })
        };
        let num = |i: usize| -> Result<f64> {
            let s = field(i)?;
            s.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("not a number: {s:?}"),
            })
        };
        let id = field(c_id)?.to_string();
        let seq = field(c_seq)?.parse::<i64>().map_err(|_| Error::Parse {
            line,
            msg: "seq must be an integer".into(),
        })?;
        let point = GpsPoint::new(num(c_lon)?, num(c_lat)?);
        let t = match c_t {
            Some(i) if !field(i)?.is_empty() => Some(num(i)?),
            _ => None,
        };
        report.rows += 1;
        if !spec.contains(&point) {
            report.dropped_points += 1;
            continue;
        }
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(Row { seq, point, t });
    }
    if report.dropped_points > 0 {
        warn!("dropped {} out-of-region points", report.dropped_points);
    }
    let mut out = Vec::new();
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by_key(|r| r.seq);
        if !filter.accepts(rows.len()) {
            warn!(
                "trajectory {id} has {} points, outside [{}, {}]",
                rows.len(),
                filter.min_len,
                filter.max_len
            );
            report.filtered_trajectories += 1;
            continue;
        }
        let timestamps = if rows.iter().all(|r| r.t.is_some()) {
            Some(rows.iter().map(|r| r.t.unwrap()).collect())
        } else {
            None
        };
        out.push(Trajectory {
            id,
            points: rows.iter().map(|r| r.point).collect(),
            timestamps,
        });
    }
    if out.is_empty() {
        return Err(Error::Data("no trajectories left after filtering".into()));
    }
    Ok((out, report))
}

pub fn write_csv(trajs: &[Trajectory], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let with_t = trajs.iter().all(|t| t.timestamps.is_some());
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    if with_t {
        w.write_record(["traj_id", "seq", "lon", "lat", "t"]).map_err(csv_err)?;
    } else {
        w.write_record(["traj_id", "seq", "lon", "lat"]).map_err(csv_err)?;
    }
    for t in trajs {
        for (i, p) in t.points.iter().enumerate() {
            let mut rec = vec![
                t.id.clone(),
                i.to_string(),
                format!("{:.8}", p.lon),
                format!("{:.8}", p.lat),
            ];
            if let (true, Some(ts)) = (with_t, &t.timestamps) {
                rec.push(format!("{}", ts[i]));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Correlated random-walk generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub step_min_m: f64,
    pub step_max_m: f64,
    /// Std of the per-step heading drift, radians.
    pub heading_noise: f64,
    /// Probability of a ±90° turn at each step.
    pub turn_prob: f64,
    pub sample_interval_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            step_min_m: 20.0,
            step_max_m: 60.0,
            heading_noise: 0.15,
            turn_prob: 0.05,
            sample_interval_s: 15.0,
        }
    }
}

/// `n_traj` synthetic trajectories inside the grid's bounding box.
pub fn synth_generate(
    n_traj: usize,
    spec: &HexGridSpec,
    filter: &LengthFilter,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_traj == 0 {
        return Err(Error::Config("n_traj must be >= 1".into()));
    }
    filter.validate()?;
    spec.validate()?;
    if !(cfg.step_min_m > 0.0 && cfg.step_min_m <= cfg.step_max_m) {
        return Err(Error::Config("need 0 < step_min_m <= step_max_m".into()));
    }
    let lo = spec.project(&GpsPoint::new(spec.min_lon, spec.min_lat));
    let hi = spec.project(&GpsPoint::new(spec.max_lon, spec.max_lat));
    // a centimetre inside the box so that unprojection stays in bounds
    let (x0, x1, y0, y1) = (lo.x + 0.01, hi.x - 0.01, lo.y + 0.01, hi.y - 0.01);
    let noise = Normal::new(0.0, cfg.heading_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    Ok((0..n_traj)
        .map(|i| {
            let mut rng = stream(seed, &[0x5E7, i as u64]);
            let n = rng.random_range(filter.min_len..=filter.max_len);
            let mut p = Point2::new(rng.random_range(x0..x1), rng.random_range(y0..y1));
            let mut heading = rng.random_range(-PI..PI);
            let mut pts = Vec::with_capacity(n);
            pts.push(spec.unproject(&p));
            for _ in 1..n {
                heading += noise.sample(&mut rng);
                if rng.random::<f64>() < cfg.turn_prob {
                    heading += if rng.random_bool(0.5) { FRAC_PI_2 } else { -FRAC_PI_2 };
                }
                let step = rng.random_range(cfg.step_min_m..=cfg.step_max_m);
                let mut nx = p.x + step * heading.cos();
                let mut ny = p.y + step * heading.sin();
                if nx < x0 || nx > x1 {
                    heading = PI - heading;
                    nx = nx.clamp(x0, x1);
                }
                if ny < y0 || ny > y1 {
                    heading = -heading;
                    ny = ny.clamp(y0, y1);
                }
                p = Point2::new(nx, ny);
                pts.push(spec.unproject(&p));
            }
            Trajectory {
                id: format!("synth-{i}"),
                timestamps: Some((0..n).map(|k| k as f64 * cfg.sample_interval_s).collect()),
                points: pts,
            }
        })
        .collect())
}

fn check_rate(name: &str, rate: f64) -> Result<()> {
    if !(0.0..=0.9).contains(&rate) {
        return Err(Error::Config(format!("{name} must lie in [0, 0.9], got {rate}")));
    }
    Ok(())
}

/// Drops each interior point independently with probability `rate`;
/// the first and last points are always kept.
pub fn downsample(t: &Trajectory, rate: f64, seed: u64) -> Result<Trajectory> {
    check_rate("down-sampling rate", rate)?;
    if rate == 0.0 || t.len() <= 2 {
        return Ok(t.clone());
    }
    let mut rng = stream(seed, &[0xD0]);
    let last = t.len() - 1;
    let keep: Vec<usize> = (0..t.len())
        .filter(|&i| i == 0 || i == last || rng.random::<f64>() >= rate)
        .collect();
    Ok(t.select(&keep))
}

/// Shifts each point independently with probability `rate` by a planar
/// Gaussian offset of standard deviation `std_m` metres per axis.
pub fn distort(t: &Trajectory, rate: f64, std_m: f64, spec: &HexGridSpec, seed: u64) -> Result<Trajectory> {
    check_rate("distortion rate", rate)?;
    if rate == 0.0 {
        return Ok(t.clone());
    }
    let normal = Normal::new(0.0, std_m).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = stream(seed, &[0xD1]);
    let points = t
        .points
        .iter()
        .map(|p| {
            if rng.random::<f64>() < rate {
                let xy = spec.project(p);
                let moved = Point2::new(xy.x + normal.sample(&mut rng), xy.y + normal.sample(&mut rng));
                spec.unproject(&moved)
            } else {
                *p
            }
        })
        .collect();
    Ok(Trajectory {
        id: t.id.clone(),
        points,
        timestamps: t.timestamps.clone(),
    })
}

/// Seeded train/test partition; both halves keep the input order.
pub fn split_train_test(
    trajs: Vec<Trajectory>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let n = trajs.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::Data(format!(
            "{n} trajectories cannot be split at {test_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[0x5917]));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (test, train): (Vec<_>, Vec<_>) = trajs.into_iter().zip(is_test).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|p| p.0).collect(),
        test.into_iter().map(|p| p.0).collect(),
    ))
}

/// Splits a query into its odd-indexed (1-based) and even-indexed points.
pub fn odd_even_split(q: &Trajectory) -> Result<(Trajectory, Trajectory)> {
    if q.len() < 4 {
        return Err(Error::Length(format!(
            "odd/even split needs >= 4 points, got {}",
            q.len()
        )));
    }
    let odd: Vec<usize> = (0..q.len()).step_by(2).collect();
    let even: Vec<usize> = (1..q.len()).step_by(2).collect();
    let (mut a, mut b) = (q.select(&odd), q.select(&even));
    a.id = format!("{}#a", q.id);
    b.id = format!("{}#b", q.id);
    Ok((a, b))
}

/// Per-point lookup of a trajectory's cell embeddings: `n × d`.
pub fn embed_trajectory(t: &Trajectory, table: &EmbeddingTable, spec: &HexGridSpec) -> Result<Tensor> {
    let d = table.dim();
    let mut data = Vec::with_capacity(t.len() * d);
    for p in &t.points {
        data.extend_from_slice(table.lookup(p, spec)?);
    }
    Tensor::matrix(t.len(), d, data)
}

/// Zero-padded embeddings `B × n_max × d` with a real-token mask.
#[derive(Clone, Debug)]
pub struct Batch {
    pub embeddings: Tensor,
    pub pad_mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn n_max(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[2]
    }

    /// The real (unpadded) rows of item `b`: `n_b × d`.
    pub fn item(&self, b: usize) -> Tensor {
        let (n_max, d) = (self.n_max(), self.dim());
        let start = b * n_max * d;
        let data = self.embeddings.data()[start..start + self.lengths[b] * d].to_vec();
        Tensor::matrix(self.lengths[b], d, data).expect("consistent batch")
    }

    /// Mean of item `b`'s rows over real positions only.
    pub fn masked_mean(&self, b: usize) -> Vec<f64> {
        let (n_max, d) = (self.n_max(), self.dim());
        let mut out = vec![0.0; d];
        let mut count = 0.0;
        for j in 0..n_max {
            if self.pad_mask[b][j] {
                let row = &self.embeddings.data()[(b * n_max + j) * d..(b * n_max + j + 1) * d];
                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                count += 1.0;
            }
        }
        out.iter_mut().for_each(|o| *o /= count);
        out
    }
}

pub fn embed_batch(trajs: &[&Trajectory], table: &EmbeddingTable, spec: &HexGridSpec) -> Result<Batch> {
    if trajs.is_empty() {
        return Err(Error::Length("empty batch".into()));
    }
    let d = table.dim();
    let n_max = trajs.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut data = vec![0.0; trajs.len() * n_max * d];
    let mut pad_mask = Vec::with_capacity(trajs.len());
    let mut lengths = Vec::with_capacity(trajs.len());
    for (b, t) in trajs.iter().enumerate() {
        let e = embed_trajectory(t, table, spec)?;
        let start = b * n_max * d;
        data[start..start + e.numel()].copy_from_slice(e.data());
        pad_mask.push((0..n_max).map(|j| j < t.len()).collect());
        lengths.push(t.len());
    }
    Ok(Batch {
        embeddings: Tensor::new(vec![trajs.len(), n_max, d], data)?,
        pad_mask,
        lengths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hexgrid::HexCellId;

    fn spec() -> HexGridSpec {
        HexGridSpec::around(-8.61, 41.15, 4_000.0, 100.0)
    }

    fn line(n: usize) -> Trajectory {
        let s = spec();
        Trajectory::new(
            "t",
            (0..n)
                .map(|i| s.unproject(&Point2::new(i as f64 * 10.0, 0.0)))
                .collect(),
        )
    }

    fn csv_rows(ids: &[(&str, usize)]) -> String {
        let s = spec();
        let mut out = String::from("traj_id,seq,lon,lat\n");
        for (id, n) in ids {
            for k in 0..*n {
                let p = s.unproject(&Point2::new(k as f64 * 15.0, 3.0));
                out.push_str(&format!("{id},{k},{},{}\n", p.lon, p.lat));
            }
        }
        out
    }

    #[test]
    fn csv_groups_and_filters() {
        let text = csv_rows(&[("a", 20), ("b", 20), ("short", 5)]);
        let (ds, rep) = read_csv(text.as_bytes(), &spec(), &LengthFilter::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(rep.filtered_trajectories, 1);
        assert_eq!(rep.rows, 45);
    }

    #[test]
    fn csv_sorts_by_seq_and_drops_out_of_region() {
        let s = spec();
        let mut text = String::from("traj_id,seq,lon,lat,t\n");
        let order = [3usize, 0, 2, 1];
        for &k in &order {
            let p = s.unproject(&Point2::new(k as f64 * 100.0, 0.0));
            text.push_str(&format!("x,{k},{},{},{}\n", p.lon, p.lat, k as f64));
        }
        text.push_str(&format!("x,9,{},{},9\n", s.max_lon + 1.0, s.origin_lat));
        let filter = LengthFilter {
            min_len: 4,
            max_len: 10,
        };
        let (ds, rep) = read_csv(text.as_bytes(), &s, &filter).unwrap();
        assert_eq!(rep.dropped_points, 1);
        let xs: Vec<f64> = ds[0].projected(&s).iter().map(|p| p.x.round()).collect();
        assert_eq!(xs, vec![0.0, 100.0, 200.0, 300.0]);
        assert_eq!(ds[0].timestamps.as_deref(), Some(&[0.0, 1.0, 2.0, 3.0][..]));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "traj_id,seq,lon,lat\na,0,-8.61,41.15\na,1,oops,41.15\n";
        match read_csv(text.as_bytes(), &spec(), &LengthFilter::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = "traj_id,seq,lon,lat\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &spec(), &LengthFilter::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn csv_round_trip_through_writer() {
        let s = spec();
        let ds = synth_generate(3, &s, &LengthFilter::default(), &SynthConfig::default(), 4).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let (back, _) = read_csv(buf.as_slice(), &s, &LengthFilter::default()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in ds.iter().zip(&back) {
            assert_eq!(a.len(), b.len());
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!((p.lon - q.lon).abs() < 1e-7 && (p.lat - q.lat).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn synth_is_deterministic_bounded_and_step_limited() {
        let s = spec();
        let cfg = SynthConfig::default();
        let f = LengthFilter::default();
        let a = synth_generate(50, &s, &f, &cfg, 7).unwrap();
        assert_eq!(a, synth_generate(50, &s, &f, &cfg, 7).unwrap());
        for t in &a {
            assert!(f.accepts(t.len()));
            assert!(t.points.iter().all(|p| s.contains(p)));
            let xy = t.projected(&s);
            for w in xy.windows(2) {
                assert!(w[0].dist(&w[1]) <= cfg.step_max_m + 1e-6);
            }
        }
    }

    #[test]
    fn downsample_identity_endpoints_and_expectation() {
        let t = line(102);
        assert_eq!(downsample(&t, 0.0, 1).unwrap(), t);
        let mut total = 0usize;
        let runs = 10_000;
        for seed in 0..runs {
            let d = downsample(&t, 0.5, seed).unwrap();
            assert_eq!(d.points[0], t.points[0]);
            assert_eq!(d.points.last(), t.points.last());
            total += d.len();
        }
        let mean = total as f64 / runs as f64;
        assert!((mean - 52.0).abs() <= 1.0, "mean kept {mean}");
        assert!(matches!(downsample(&t, 0.95, 1), Err(Error::Config(_))));
    }

    #[test]
    fn distort_identity_determinism_and_rayleigh_mean() {
        let s = spec();
        let t = line(200);
        assert_eq!(distort(&t, 0.0, 30.0, &s, 1).unwrap(), t);
        assert_eq!(
            distort(&t, 0.3, 30.0, &s, 5).unwrap(),
            distort(&t, 0.3, 30.0, &s, 5).unwrap()
        );
        let std_m = 30.0;
        let (mut sum, mut count) = (0.0, 0usize);
        let orig = t.projected(&s);
        for seed in 0..100 {
            let d = distort(&t, 0.5, std_m, &s, seed).unwrap();
            for (a, b) in orig.iter().zip(d.projected(&s)) {
                let m = a.dist(&b);
                if m > 0.0 {
                    sum += m;
                    count += 1;
                }
            }
        }
        assert!(count >= 9_000);
        let mean = sum / count as f64;
        let want = std_m * (PI / 2.0).sqrt();
        assert!(((mean - want) / want).abs() < 0.05, "mean shift {mean} vs {want}");
    }

    #[test]
    fn odd_even_split_partitions() {
        let t = line(5);
        let (a, b) = odd_even_split(&t).unwrap();
        assert_eq!(a.points, vec![t.points[0], t.points[2], t.points[4]]);
        assert_eq!(b.points, vec![t.points[1], t.points[3]]);
        let (a, b) = odd_even_split(&line(4)).unwrap();
        assert_eq!((a.len(), b.len()), (2, 2));
        assert!(matches!(odd_even_split(&line(3)), Err(Error::Length(_))));
    }

    #[test]
    fn batch_padding_and_unbatching() {
        let s = spec();
        let cells: Vec<(HexCellId, Vec<f64>)> = (-50..50)
            .flat_map(|q| (-50..50).map(move |r| (q, r)))
            .map(|(q, r)| (HexCellId::new(q, r), vec![q as f64, r as f64, 1.0]))
            .collect();
        let table = EmbeddingTable::new(3, cells).unwrap();
        let (a, b) = (line(10), line(20));
        let one = embed_batch(&[&a], &table, &s).unwrap();
        assert_eq!(one.n_max(), 10);
        assert!(one.pad_mask[0].iter().all(|m| *m));
        let two = embed_batch(&[&a, &b], &table, &s).unwrap();
        assert_eq!(two.n_max(), 20);
        assert_eq!(two.pad_mask[0].iter().filter(|m| !**m).count(), 10);
        let pad_start = 10 * 3;
        assert!(two.embeddings.data()[pad_start..20 * 3].iter().all(|v| *v == 0.0));
        assert_eq!(two.item(0), embed_trajectory(&a, &table, &s).unwrap());
        assert_eq!(two.item(1), embed_trajectory(&b, &table, &s).unwrap());
        // padding does not leak into the masked mean
        assert_eq!(two.masked_mean(0), one.masked_mean(0));
    }

    #[test]
    fn seeded_split() {
        let trajs: Vec<Trajectory> = (0..40)
            .map(|i| Trajectory::new(format!("t{i}"), line(5).points))
            .collect();
        let (train, test) = split_train_test(trajs.clone(), 0.25, 3).unwrap();
        assert_eq!((train.len(), test.len()), (30, 10));
        let (train2, test2) = split_train_test(trajs.clone(), 0.25, 3).unwrap();
        assert_eq!((&train, &test), (&train2, &test2));
        let mut ids: Vec<&str> = train.iter().chain(&test).map(|t| t.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 40);
        assert!(split_train_test(trajs, 0.0, 3).is_err());
    }
}

//! Planar hexagonal tessellation of a study region.
//!
//! GPS points are projected with a local equirectangular projection about
//! the grid origin and tiled with pointy-top hexagons in axial `(q, r)`
//! coordinates. Adjacent centres are `√3 · edge_len_m` apart.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

const EARTH_RADIUS_M: f64 = 6_371_008.8;
const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Axial directions, in the order returned by [`HexCellId::neighbors`].
pub const AXIAL_DIRECTIONS: [(i32, i32); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GpsPoint {
    pub fn new(lon: f64, lat: f64) -> Self {
        Self { lon, lat }
    }
}

/// A projected point in metres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HexCellId {
    pub q: i32,
    pub r: i32,
}

impl HexCellId {
    pub fn new(q: i32, r: i32) -> Self {
        Self { q, r }
    }

    pub fn neighbors(&self) -> [HexCellId; 6] {
        AXIAL_DIRECTIONS.map(|(dq, dr)| HexCellId::new(self.q + dq, self.r + dr))
    }

    pub fn is_adjacent(&self, other: &HexCellId) -> bool {
        let (dq, dr) = (other.q - self.q, other.r - self.r);
        AXIAL_DIRECTIONS.contains(&(dq, dr))
    }
}

/// Grid definition: origin, cell size and the bounding box that limits it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HexGridSpec {
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub edge_len_m: f64,
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl HexGridSpec {
    /// A grid centred on `(lon, lat)` covering `half_extent_m` in each direction.
    pub fn around(lon: f64, lat: f64, half_extent_m: f64, edge_len_m: f64) -> Self {
        let dlat = (half_extent_m / EARTH_RADIUS_M).to_degrees();
        let dlon = dlat / lat.to_radians().cos();
        Self {
            origin_lon: lon,
            origin_lat: lat,
            edge_len_m,
            min_lon: lon - dlon,
            min_lat: lat - dlat,
            max_lon: lon + dlon,
            max_lat: lat + dlat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.edge_len_m > 0.0 && self.edge_len_m.is_finite()) {
            return Err(Error::Config(format!(
                "edge_len_m must be > 0, got {}",
                self.edge_len_m
            )));
        }
        if !(self.min_lon < self.max_lon && self.min_lat < self.max_lat) {
            return Err(Error::Config("bounding box is empty".into()));
        }
        if self.min_lat <= -89.0 || self.max_lat >= 89.0 {
            return Err(Error::Config("bounding box must stay away from the poles".into()));
        }
        Ok(())
    }

    pub fn contains(&self, p: &GpsPoint) -> bool {
        p.lon >= self.min_lon && p.lon <= self.max_lon && p.lat >= self.min_lat && p.lat <= self.max_lat
    }

    fn cos_lat0(&self) -> f64 {
        self.origin_lat.to_radians().cos()
    }

    pub fn project(&self, p: &GpsPoint) -> Point2 {
        Point2 {
            x: EARTH_RADIUS_M * (p.lon - self.origin_lon).to_radians() * self.cos_lat0(),
            y: EARTH_RADIUS_M * (p.lat - self.origin_lat).to_radians(),
        }
    }

    pub fn unproject(&self, p: &Point2) -> GpsPoint {
        GpsPoint {
            lon: self.origin_lon + (p.x / (EARTH_RADIUS_M * self.cos_lat0())).to_degrees(),
            lat: self.origin_lat + (p.y / EARTH_RADIUS_M).to_degrees(),
        }
    }

    /// Planar centre of a cell, in metres.
    pub fn center_xy(&self, c: HexCellId) -> Point2 {
        let s = self.edge_len_m;
        Point2 {
            x: s * SQRT3 * (c.q as f64 + c.r as f64 / 2.0),
            y: s * 1.5 * c.r as f64,
        }
    }

    pub fn center(&self, c: HexCellId) -> GpsPoint {
        self.unproject(&self.center_xy(c))
    }

    /// Cell containing a planar point: cube rounding followed by an exact
    /// nearest-centre check over the candidate and its ring, ties going to
    /// the lexicographically smaller `(q, r)`.
    pub fn cell_of_xy(&self, p: &Point2) -> HexCellId {
        let s = self.edge_len_m;
        let qf = (SQRT3 / 3.0 * p.x - p.y / 3.0) / s;
        let rf = (2.0 / 3.0 * p.y) / s;
        let guess = cube_round(qf, rf);
        let mut best = guess;
        let mut best_d = self.center_xy(guess).dist(p);
        for c in guess.neighbors() {
            let d = self.center_xy(c).dist(p);
            if d < best_d || (d == best_d && c < best) {
                best = c;
                best_d = d;
            }
        }
        best
    }

    /// Cell assignment δ for a GPS point.
    pub fn assign(&self, p: &GpsPoint) -> Result<HexCellId> {
        if !self.contains(p) {
            return Err(Error::OutOfRegion { lon: p.lon, lat: p.lat });
        }
        Ok(self.cell_of_xy(&self.project(p)))
    }
}

fn cube_round(qf: f64, rf: f64) -> HexCellId {
    let sf = -qf - rf;
    let (mut q, mut r, s) = (qf.round(), rf.round(), sf.round());
    let (dq, dr, ds) = ((q - qf).abs(), (r - rf).abs(), (s - sf).abs());
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    HexCellId::new(q as i32, r as i32)
}

/// Occupied cells and their 6-neighbour adjacency.
#[derive(Clone, Debug, Default)]
pub struct RegionGraph {
    nodes: Vec<HexCellId>,
    index: HashMap<HexCellId, usize>,
    adjacency: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
}

impl RegionGraph {
    pub fn from_cells(cells: impl IntoIterator<Item = HexCellId>) -> Result<Self> {
        let set: BTreeSet<HexCellId> = cells.into_iter().collect();
        if set.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let nodes: Vec<HexCellId> = set.into_iter().collect();
        let index: HashMap<HexCellId, usize> = nodes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        let mut adjacency = vec![Vec::new(); nodes.len()];
        let mut edges = Vec::new();
        for (i, c) in nodes.iter().enumerate() {
            for nb in c.neighbors() {
                if let Some(&j) = index.get(&nb) {
                    adjacency[i].push(j);
                    if i < j {
                        edges.push((i, j));
                    }
                }
            }
            adjacency[i].sort_unstable();
        }
        Ok(Self {
            nodes,
            index,
            adjacency,
            edges,
        })
    }

    pub fn nodes(&self) -> &[HexCellId] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn index_of(&self, c: &HexCellId) -> Option<usize> {
        self.index.get(c).copied()
    }

    /// Sorted neighbour indices of node `i`.
    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }
}

/// Builds the region graph from every in-bounds point; out-of-bounds points
/// are skipped. Returns the graph and the number of skipped points.
pub fn build_region_graph<'a>(
    points: impl IntoIterator<Item = &'a GpsPoint>,
    spec: &HexGridSpec,
) -> Result<(RegionGraph, usize)> {
    let mut dropped = 0;
    let mut cells = BTreeSet::new();
    for p in points {
        match spec.assign(p) {
            Ok(c) => {
                cells.insert(c);
            }
            Err(Error::OutOfRegion { .. }) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((RegionGraph::from_cells(cells)?, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> HexGridSpec {
        HexGridSpec::around(-8.61, 41.15, 5_000.0, 50.0)
    }

    #[test]
    fn origin_is_cell_zero() {
        let s = spec();
        assert_eq!(
            s.assign(&GpsPoint::new(s.origin_lon, s.origin_lat)).unwrap(),
            HexCellId::new(0, 0)
        );
    }

    #[test]
    fn center_round_trips() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let c = HexCellId::new(rng.random_range(-30..=30), rng.random_range(-30..=30));
            assert_eq!(s.assign(&s.center(c)).unwrap(), c);
        }
    }

    #[test]
    fn assignment_matches_brute_force_nearest_center() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let patch: Vec<HexCellId> = (-2..=2)
            .flat_map(|q| (-2..=2).map(move |r| HexCellId::new(q, r)))
            .collect();
        // points just past the midpoint between two adjacent centres
        for _ in 0..500 {
            let a = HexCellId::new(rng.random_range(-1..=1), rng.random_range(-1..=1));
            let b = a.neighbors()[rng.random_range(0..6)];
            let (ca, cb) = (s.center_xy(a), s.center_xy(b));
            let t = 0.5 + 1e-6 * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let p = Point2::new(ca.x + t * (cb.x - ca.x), ca.y + t * (cb.y - ca.y));
            let brute = *patch
                .iter()
                .min_by(|x, y| {
                    s.center_xy(**x)
                        .dist(&p)
                        .total_cmp(&s.center_xy(**y).dist(&p))
                        .then(x.cmp(y))
                })
                .unwrap();
            assert_eq!(s.cell_of_xy(&p), brute);
            assert_eq!(s.cell_of_xy(&p), if t > 0.5 { b } else { a });
        }
        for _ in 0..2000 {
            let p = Point2::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            let brute = *patch
                .iter()
                .min_by(|x, y| {
                    s.center_xy(**x)
                        .dist(&p)
                        .total_cmp(&s.center_xy(**y).dist(&p))
                        .then(x.cmp(y))
                })
                .unwrap();
            assert_eq!(s.cell_of_xy(&p), brute);
        }
    }

    #[test]
    fn neighbors_are_the_axial_directions_at_equal_distance() {
        let s = spec();
        let n = HexCellId::new(0, 0).neighbors();
        let want = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)].map(|(q, r)| HexCellId::new(q, r));
        assert_eq!(n, want);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = HexCellId::new(rng.random_range(-100..100), rng.random_range(-100..100));
            let expect = SQRT3 * s.edge_len_m;
            let nb = c.neighbors();
            let distinct: BTreeSet<_> = nb.iter().collect();
            assert_eq!(distinct.len(), 6);
            for m in nb {
                let d = s.center_xy(c).dist(&s.center_xy(m));
                assert!(((d - expect) / expect).abs() < 1e-9);
                assert!(m.neighbors().contains(&c));
            }
        }
    }

    #[test]
    fn out_of_region_is_an_error() {
        let s = spec();
        let p = GpsPoint::new(s.max_lon + 0.01, s.origin_lat);
        assert!(matches!(s.assign(&p), Err(Error::OutOfRegion { .. })));
    }

    #[test]
    fn projection_inverts() {
        let s = spec();
        let p = GpsPoint::new(-8.6, 41.16);
        let q = s.unproject(&s.project(&p));
        assert!((p.lon - q.lon).abs() < 1e-12 && (p.lat - q.lat).abs() < 1e-12);
    }

    #[test]
    fn region_graph_small_cases() {
        let s = spec();
        let (g, _) = build_region_graph(&[GpsPoint::new(s.origin_lon, s.origin_lat)], &s).unwrap();
        assert_eq!((g.node_count(), g.edges().len()), (1, 0));
        let pts = [s.center(HexCellId::new(0, 0)), s.center(HexCellId::new(1, 0))];
        let (g, _) = build_region_graph(&pts, &s).unwrap();
        assert_eq!((g.node_count(), g.edges().len()), (2, 1));
        let empty: [GpsPoint; 0] = [];
        assert!(matches!(build_region_graph(&empty, &s), Err(Error::EmptyGraph)));
    }

    #[test]
    fn dense_line_gives_path_like_graph() {
        let s = spec();
        let start = Point2::new(-1000.0, -300.0);
        let end = Point2::new(1200.0, 450.0);
        let pts: Vec<GpsPoint> = (0..=5000)
            .map(|i| {
                let t = i as f64 / 5000.0;
                s.unproject(&Point2::new(
                    start.x + t * (end.x - start.x),
                    start.y + t * (end.y - start.y),
                ))
            })
            .collect();
        let brute: BTreeSet<HexCellId> = pts.iter().map(|p| s.cell_of_xy(&s.project(p))).collect();
        let (g, dropped) = build_region_graph(&pts, &s).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(g.node_count(), brute.len());
        assert!(g.edges().len() >= g.node_count() - 1);
        for &(i, j) in g.edges() {
            assert!(i != j && g.nodes()[i].is_adjacent(&g.nodes()[j]));
        }
    }
}

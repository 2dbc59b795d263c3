//! Radius-neighbourhood spatio-temporal graphs over sampled events.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::event_io::{Event, EventStream};
use crate::sampling::{sample_events, SamplingParams};
use crate::seed;

mod batch;
pub mod io;

pub use batch::GraphBatch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphParams {
    #[serde(default = "defaults::radius")]
    pub radius: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    /// Temporal weight, with timestamps in microseconds.
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::d_max")]
    pub d_max: usize,
    /// Event window per graph, in seconds.
    #[serde(default = "defaults::t_vol")]
    pub t_vol: f64,
}

mod defaults {
    pub fn radius() -> f64 {
        3.0
    }
    pub fn alpha() -> f64 {
        1.0
    }
    pub fn beta() -> f64 {
        0.5e-5
    }
    pub fn d_max() -> usize {
        32
    }
    pub fn t_vol() -> f64 {
        1.0 / 30.0
    }
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            radius: defaults::radius(),
            alpha: defaults::alpha(),
            beta: defaults::beta(),
            d_max: defaults::d_max(),
            t_vol: defaults::t_vol(),
        }
    }
}

impl GraphParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(invalid!("radius must be positive"));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(invalid!("alpha and beta must be non-negative"));
        }
        if self.d_max == 0 {
            return Err(invalid!("d_max must be at least 1"));
        }
        if !(self.t_vol > 0.0) {
            return Err(invalid!("t_vol must be positive"));
        }
        Ok(())
    }

    pub fn t_vol_us(&self) -> f64 {
        self.t_vol * 1e6
    }
}

/// Spatial coordinate range of a graph: rows (`y`) by columns (`x`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Extent {
    pub height: usize,
    pub width: usize,
}

impl Extent {
    pub fn new(height: usize, width: usize) -> Self {
        Extent { height, width }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Extent after pooling with `s_h x s_w` clusters.
    pub fn pooled(&self, s_h: usize, s_w: usize) -> Extent {
        Extent {
            height: self.height.div_ceil(s_h),
            width: self.width.div_ceil(s_w),
        }
    }

    /// Integer cell `(row, col)` for a coordinate, or `None` outside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (col, row) = (x.floor(), y.floor());
        if col < 0.0
            || row < 0.0
            || col >= self.width as f64
            || row >= self.height as f64
            || col.is_nan()
            || row.is_nan()
        {
            return None;
        }
        Some((row as usize, col as usize))
    }
}

/// A directed event graph. Edge `(i, j)` means node `i` aggregates from its
/// out-neighbour `j`; `pseudo[e]` is the normalized `(|dx|, |dy|)` of edge `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventGraph {
    /// Per-node `(x, y, t)`.
    pub coords: Vec<[f64; 3]>,
    /// Row-major `nodes x channels`.
    pub features: Vec<f64>,
    pub channels: usize,
    pub edges: Vec<(usize, usize)>,
    pub pseudo: Vec<[f64; 2]>,
    pub extent: Extent,
}

impl EventGraph {
    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes()];
        for &(i, _) in &self.edges {
            deg[i] += 1;
        }
        deg
    }

    /// Checks the structural invariants shared by every stage of the pipeline.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.features.len() != n * self.channels {
            return Err(invalid!(
                "feature table has {} values for {n} nodes x {} channels",
                self.features.len(),
                self.channels
            ));
        }
        if self.pseudo.len() != self.edges.len() {
            return Err(invalid!(
                "{} pseudo-coordinates for {} edges",
                self.pseudo.len(),
                self.edges.len()
            ));
        }
        if let Some(&(i, j)) = self
            .edges
            .iter()
            .find(|&&(i, j)| i >= n || j >= n || i == j)
        {
            return Err(invalid!("edge ({i}, {j}) invalid for {n} nodes"));
        }
        if self
            .pseudo
            .iter()
            .flatten()
            .any(|u| !(0.0..=1.0).contains(u))
        {
            return Err(invalid!("pseudo-coordinate outside [0, 1]"));
        }
        if let Some(c) = self
            .coords
            .iter()
            .find(|c| self.extent.cell_of(c[0], c[1]).is_none())
        {
            return Err(invalid!(
                "node at ({}, {}) outside extent {:?}",
                c[0],
                c[1],
                self.extent
            ));
        }
        Ok(())
    }
}

/// Frames built from one stream, in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSequence {
    pub graphs: Vec<EventGraph>,
    pub label: Option<usize>,
}

impl GraphSequence {
    pub fn s_count(&self) -> usize {
        self.graphs.len()
    }
}

/// Weighted spatio-temporal distance between two events.
pub fn pair_distance(a: &Event, b: &Event, alpha: f64, beta: f64) -> f64 {
    let dx = f64::from(a.x) - f64::from(b.x);
    let dy = f64::from(a.y) - f64::from(b.y);
    let dt = a.t as f64 - b.t as f64;
    coord_distance(&[dx, dy, dt], alpha, beta)
}

fn coord_distance(d: &[f64; 3], alpha: f64, beta: f64) -> f64 {
    (alpha * (d[0] * d[0] + d[1] * d[1]) + beta * d[2] * d[2]).sqrt()
}

/// Builds the radius graph over `events`, one node per event with its
/// polarity as the single input channel.
pub fn build_graph(events: &[Event], params: &GraphParams, extent: Extent) -> Result<EventGraph> {
    params.validate()?;
    if events.is_empty() {
        return Err(invalid!("cannot build a graph from zero events"));
    }
    let coords: Vec<[f64; 3]> = events
        .iter()
        .map(|e| [f64::from(e.x), f64::from(e.y), e.t as f64])
        .collect();
    let edges = radius_edges(&coords, params);
    let pseudo = compute_pseudo(&coords, &edges);
    let graph = EventGraph {
        features: events.iter().map(|e| e.p.sign()).collect(),
        channels: 1,
        coords,
        edges,
        pseudo,
        extent,
    };
    graph.validate()?;
    Ok(graph)
}

/// Directed radius edges with the per-node degree cap: each node keeps its
/// `d_max` nearest candidates, ties broken by lower index. Edges are grouped
/// by source in ascending order, nearest first within a source.
pub fn radius_edges(coords: &[[f64; 3]], params: &GraphParams) -> Vec<(usize, usize)> {
    // Slightly inflated cells so a neighbour at exactly R never lands two
    // buckets away through rounding.
    let inflate = 1.0 + 1e-9;
    let cell = |w: f64| {
        if w > 0.0 {
            params.radius / w.sqrt() * inflate
        } else {
            f64::INFINITY
        }
    };
    let (cs, ct) = (cell(params.alpha), cell(params.beta));
    let key = |c: &[f64; 3]| {
        let q = |v: f64, s: f64| {
            if s.is_finite() {
                (v / s).floor() as i64
            } else {
                0
            }
        };
        (q(c[0], cs), q(c[1], cs), q(c[2], ct))
    };
    let mut buckets: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, c) in coords.iter().enumerate() {
        buckets.entry(key(c)).or_default().push(i);
    }
    let mut edges = Vec::new();
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for (i, ci) in coords.iter().enumerate() {
        cand.clear();
        let (bx, by, bt) = key(ci);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dt in -1..=1 {
                    let Some(members) = buckets.get(&(bx + dx, by + dy, bt + dt)) else {
                        continue;
                    };
                    for &j in members {
                        if j == i {
                            continue;
                        }
                        let cj = &coords[j];
                        let d = coord_distance(
                            &[ci[0] - cj[0], ci[1] - cj[1], ci[2] - cj[2]],
                            params.alpha,
                            params.beta,
                        );
                        if d <= params.radius {
                            cand.push((d, j));
                        }
                    }
                }
            }
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(cand.iter().take(params.d_max).map(|&(_, j)| (i, j)));
    }
    edges
}

/// `(|x_i - x_j|, |y_i - y_j|)` scaled per axis by the largest value over
/// all edges; a constant axis maps to 0.
pub fn compute_pseudo(coords: &[[f64; 3]], edges: &[(usize, usize)]) -> Vec<[f64; 2]> {
    let raw: Vec<[f64; 2]> = edges
        .iter()
        .map(|&(i, j)| {
            [
                (coords[i][0] - coords[j][0]).abs(),
                (coords[i][1] - coords[j][1]).abs(),
            ]
        })
        .collect();
    let mut max = [0.0f64; 2];
    for u in &raw {
        max[0] = max[0].max(u[0]);
        max[1] = max[1].max(u[1]);
    }
    raw.into_iter()
        .map(|u| {
            let scale = |v: f64, m: f64| if m > 0.0 { (v / m).min(1.0) } else { 0.0 };
            [scale(u[0], max[0]), scale(u[1], max[1])]
        })
        .collect()
}

/// Splits `stream` into `s_count` equal-duration volumes and builds one graph
/// per volume from a randomly placed `t_vol` window. Volume `n` draws from a
/// generator derived from `(rng_seed, n)`.
pub fn segment_stream(
    stream: &EventStream,
    s_count: usize,
    params: &GraphParams,
    sampling: &SamplingParams,
    rng_seed: u64,
) -> Result<GraphSequence> {
    params.validate()?;
    sampling.validate()?;
    if s_count == 0 {
        return Err(invalid!("s_count must be at least 1"));
    }
    let t_vol = params.t_vol_us();
    let (t0, t1) = stream.time_span().unwrap_or((0, 0));
    let duration = (t1 - t0) as f64;
    if duration < s_count as f64 * t_vol {
        return Err(invalid!(
            "stream lasts {duration} us, shorter than {s_count} windows of {t_vol} us"
        ));
    }
    let extent = Extent::new(usize::from(stream.height()), usize::from(stream.width()));
    let volume = duration / s_count as f64;
    let mut graphs = Vec::with_capacity(s_count);
    for n in 0..s_count {
        let mut rng = seed::rng(rng_seed, &[n as u64]);
        let vol_start = t0 as f64 + n as f64 * volume;
        let slack = volume - t_vol;
        let start = vol_start
            + if slack > 0.0 {
                rng.gen_range(0.0..slack)
            } else {
                0.0
            };
        let window = stream.window(start, start + t_vol);
        let sp = SamplingParams {
            k_max: sampling.k_max,
            rng_seed: seed::derive(rng_seed, &[n as u64, sampling.rng_seed]),
        };
        let sampled = sample_events(window, &sp);
        let graph = if sampled.is_empty() {
            placeholder(extent, vol_start + 0.5 * volume)
        } else {
            build_graph(&sampled, params, extent)?
        };
        graphs.push(graph);
    }
    Ok(GraphSequence {
        graphs,
        label: stream.label,
    })
}

/// Single zero-feature node at the spatial centre, standing in for an empty window.
pub fn placeholder(extent: Extent, t: f64) -> EventGraph {
    EventGraph {
        coords: vec![[(extent.width / 2) as f64, (extent.height / 2) as f64, t]],
        features: vec![0.0],
        channels: 1,
        edges: Vec::new(),
        pseudo: Vec::new(),
        extent,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_io::Polarity;

    fn ev(x: u16, y: u16, t: u64) -> Event {
        Event::new(x, y, t, Polarity::On)
    }

    #[test]
    fn distance_examples() {
        let (a, b) = (1.0, 0.5e-5);
        assert_eq!(pair_distance(&ev(0, 0, 0), &ev(3, 0, 0), a, b), 3.0);
        assert_eq!(pair_distance(&ev(5, 6, 7), &ev(5, 6, 7), a, b), 0.0);
        let d = pair_distance(&ev(0, 0, 0), &ev(0, 0, 1000), a, b);
        assert!((d - 5.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn radius_is_inclusive() {
        let p = GraphParams::default();
        let g = build_graph(&[ev(0, 0, 0), ev(3, 0, 0)], &p, Extent::new(8, 8)).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (1, 0)]);
        assert_eq!(g.pseudo, vec![[1.0, 0.0], [1.0, 0.0]]);
        let g = build_graph(&[ev(0, 0, 0), ev(4, 0, 0)], &p, Extent::new(8, 8)).unwrap();
        assert!(g.edges.is_empty());
    }

    #[test]
    fn node_features_are_polarity() {
        let e = [
            Event::new(0, 0, 0, Polarity::Off),
            Event::new(1, 0, 0, Polarity::On),
        ];
        let g = build_graph(&e, &GraphParams::default(), Extent::new(2, 2)).unwrap();
        assert_eq!(g.features, vec![-1.0, 1.0]);
    }

    #[test]
    fn rejects_empty_and_bad_params() {
        assert!(build_graph(&[], &GraphParams::default(), Extent::new(2, 2)).is_err());
        let p = GraphParams {
            d_max: 0,
            ..GraphParams::default()
        };
        assert!(build_graph(&[ev(0, 0, 0)], &p, Extent::new(2, 2)).is_err());
    }

    #[test]
    fn zero_alpha_uses_time_only() {
        let p = GraphParams {
            alpha: 0.0,
            ..GraphParams::default()
        };
        let g = build_graph(&[ev(0, 0, 0), ev(7, 7, 100)], &p, Extent::new(8, 8)).unwrap();
        assert_eq!(g.edges.len(), 2);
    }

    #[test]
    fn short_stream_is_rejected() {
        let s = EventStream::new(4, 4, vec![ev(0, 0, 0), ev(1, 1, 10_000)], None).unwrap();
        assert!(segment_stream(
            &s,
            1,
            &GraphParams::default(),
            &SamplingParams::default(),
            0
        )
        .is_err());
    }

    #[test]
    fn empty_window_gets_placeholder() {
        // events only at both ends of a 200 ms stream; middle volumes are empty
        let s = EventStream::new(10, 6, vec![ev(0, 0, 0), ev(1, 1, 200_000)], Some(2)).unwrap();
        let seq = segment_stream(
            &s,
            4,
            &GraphParams::default(),
            &SamplingParams::default(),
            3,
        )
        .unwrap();
        assert_eq!(seq.s_count(), 4);
        assert_eq!(seq.label, Some(2));
        let g = &seq.graphs[1];
        assert_eq!(g.num_nodes(), 1);
        assert_eq!(g.features, vec![0.0]);
        assert_eq!(g.coords[0], [5.0, 3.0, 75_000.0]);
    }
}

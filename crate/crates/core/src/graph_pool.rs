//! Cluster max pooling over spatial cells.
//!
//! Node `n` falls in cell `(floor(floor(y) / s_h), floor(floor(x) / s_w))` of
//! its own graph. Each non-empty cell becomes one node whose features are the
//! per-channel maximum over the cell and whose coordinates are the cell mean,
//! expressed in coarse units (`x / s_w`, `y / s_h`, time unchanged). Coarse
//! nodes are ordered by `(graph, row, column)`; two coarse nodes are linked
//! when any fine edge crosses between their cells.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::diffengine::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::graph_build::compute_pseudo;
use crate::graph_build::GraphBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolParams {
    pub s_h: usize,
    pub s_w: usize,
}

impl PoolParams {
    pub fn new(s_h: usize, s_w: usize) -> Result<Self> {
        let p = PoolParams { s_h, s_w };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_h == 0 || self.s_w == 0 {
            return Err(invalid!(
                "cluster size must be positive, got ({}, {})",
                self.s_h,
                self.s_w
            ));
        }
        Ok(())
    }
}

/// Coarse topology and the coarse node index of every fine node.
pub fn pool_topology(graph: &GraphBatch, params: PoolParams) -> Result<(GraphBatch, Vec<usize>)> {
    params.validate()?;
    let extent = graph.extent;
    let mut cells: BTreeMap<(usize, usize, usize), Vec<usize>> = BTreeMap::new();
    for (n, (c, &g)) in graph.coords.iter().zip(&graph.graph_of).enumerate() {
        let (row, col) = extent.cell_of(c[0], c[1]).ok_or_else(|| {
            Error::Index(format!(
                "node at ({}, {}) lies outside extent {extent:?}",
                c[0], c[1]
            ))
        })?;
        cells
            .entry((g, row / params.s_h, col / params.s_w))
            .or_default()
            .push(n);
    }
    let mut cluster_of = vec![0; graph.num_nodes()];
    let mut coords = Vec::with_capacity(cells.len());
    let mut graph_of = Vec::with_capacity(cells.len());
    for (k, (&(g, _, _), members)) in cells.iter().enumerate() {
        let mut sum = [0.0; 3];
        for &n in members {
            cluster_of[n] = k;
            for a in 0..3 {
                sum[a] += graph.coords[n][a];
            }
        }
        let count = members.len() as f64;
        coords.push([
            sum[0] / count / params.s_w as f64,
            sum[1] / count / params.s_h as f64,
            sum[2] / count,
        ]);
        graph_of.push(g);
    }
    let edge_set: BTreeSet<(usize, usize)> = graph
        .edges
        .iter()
        .map(|&(i, j)| (cluster_of[i], cluster_of[j]))
        .filter(|(a, b)| a != b)
        .collect();
    let edges: Vec<(usize, usize)> = edge_set.into_iter().collect();
    let mut pseudo = vec![[0.0; 2]; edges.len()];
    let mut start = 0;
    while start < edges.len() {
        let g = graph_of[edges[start].0];
        let end = start
            + edges[start..]
                .iter()
                .take_while(|e| graph_of[e.0] == g)
                .count();
        pseudo[start..end].copy_from_slice(&compute_pseudo(&coords, &edges[start..end]));
        start = end;
    }
    let coarse = GraphBatch {
        coords,
        edges,
        pseudo,
        graph_of,
        num_graphs: graph.num_graphs,
        extent: extent.pooled(params.s_h, params.s_w),
    };
    Ok((coarse, cluster_of))
}

/// Pools `graph` and its `nodes x channels` features `x`. Gradients flow to
/// the maximising fine node of each coarse channel (lowest index on ties).
pub fn max_pool_graph(
    tape: &mut Tape,
    graph: &GraphBatch,
    x: Var,
    params: PoolParams,
) -> Result<(GraphBatch, Var)> {
    let (coarse, cluster_of) = pool_topology(graph, params)?;
    let y = tape.scatter_max(x, &cluster_of, coarse.num_nodes())?;
    Ok((coarse, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_build::Extent;

    fn batch(coords: Vec<[f64; 3]>, edges: Vec<(usize, usize)>, extent: Extent) -> GraphBatch {
        let pseudo = compute_pseudo(&coords, &edges);
        let n = coords.len();
        GraphBatch {
            coords,
            edges,
            pseudo,
            graph_of: vec![0; n],
            num_graphs: 1,
            extent,
        }
    }

    #[test]
    fn single_cell_max_and_mean() {
        let g = batch(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 2.0],
                [0.0, 1.0, 4.0],
                [1.0, 1.0, 6.0],
            ],
            vec![(0, 1), (2, 3)],
            Extent::new(4, 4),
        );
        let mut tape = Tape::new();
        let x = tape.constant(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (c, y) = max_pool_graph(&mut tape, &g, x, PoolParams::new(2, 2).unwrap()).unwrap();
        assert_eq!(tape.data(y), &[4.0]);
        assert_eq!(c.coords, vec![[0.25, 0.25, 3.0]]);
        assert!(c.edges.is_empty());
        assert_eq!(c.extent, Extent::new(2, 2));
    }

    #[test]
    fn identity_cell_preserves_node() {
        let g = batch(vec![[3.0, 2.0, 7.0]], vec![], Extent::new(5, 5));
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 2], vec![-1.5, 2.0]).unwrap();
        let (c, y) = max_pool_graph(&mut tape, &g, x, PoolParams::new(1, 1).unwrap()).unwrap();
        assert_eq!(tape.data(y), &[-1.5, 2.0]);
        assert_eq!(c.coords, vec![[3.0, 2.0, 7.0]]);
    }

    #[test]
    fn crossing_edges_link_cells() {
        let g = batch(
            vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [3.5, 0.5, 0.0]],
            vec![(0, 1), (1, 2), (2, 1)],
            Extent::new(4, 4),
        );
        let (c, map) = pool_topology(&g, PoolParams::new(2, 2).unwrap()).unwrap();
        assert_eq!(map, vec![0, 1, 1]);
        assert_eq!(c.edges, vec![(0, 1)]);
        assert_eq!(c.pseudo, vec![[1.0, 1.0]]);
    }

    #[test]
    fn out_of_extent_is_an_error() {
        let g = batch(vec![[4.0, 0.0, 0.0]], vec![], Extent::new(4, 4));
        assert!(matches!(
            pool_topology(&g, PoolParams { s_h: 2, s_w: 2 }),
            Err(Error::Index(_))
        ));
        assert!(PoolParams::new(0, 1).is_err());
    }
}

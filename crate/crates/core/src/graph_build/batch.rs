use super::{EventGraph, Extent};
use crate::error::{invalid, Result};

/// Several graphs sharing one extent, concatenated into a single disjoint
/// graph. Node `n` belongs to graph `graph_of[n]`; edges keep per-graph
/// pseudo-coordinates and are grouped by source node.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub coords: Vec<[f64; 3]>,
    pub edges: Vec<(usize, usize)>,
    pub pseudo: Vec<[f64; 2]>,
    pub graph_of: Vec<usize>,
    pub num_graphs: usize,
    pub extent: Extent,
}

impl GraphBatch {
    /// Returns the batch topology and the concatenated `nodes x channels` features.
    pub fn from_graphs(graphs: &[&EventGraph]) -> Result<(GraphBatch, Vec<f64>, usize)> {
        let first = graphs
            .first()
            .ok_or_else(|| invalid!("empty graph batch"))?;
        let (extent, channels) = (first.extent, first.channels);
        let mut batch = GraphBatch {
            coords: Vec::new(),
            edges: Vec::new(),
            pseudo: Vec::new(),
            graph_of: Vec::new(),
            num_graphs: graphs.len(),
            extent,
        };
        let mut features = Vec::new();
        for (gi, g) in graphs.iter().enumerate() {
            if g.extent != extent || g.channels != channels {
                return Err(invalid!(
                    "graphs in a batch must share extent and channel count"
                ));
            }
            let offset = batch.coords.len();
            batch.coords.extend_from_slice(&g.coords);
            batch
                .graph_of
                .extend(std::iter::repeat(gi).take(g.num_nodes()));
            let mut order: Vec<usize> = (0..g.num_edges()).collect();
            order.sort_by_key(|&e| g.edges[e].0);
            for e in order {
                let (i, j) = g.edges[e];
                batch.edges.push((i + offset, j + offset));
                batch.pseudo.push(g.pseudo[e]);
            }
            features.extend_from_slice(&g.features);
        }
        Ok((batch, features, channels))
    }

    pub fn single(graph: &EventGraph) -> (GraphBatch, Vec<f64>, usize) {
        Self::from_graphs(&[graph]).expect("a single graph always forms a batch")
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Splits back into per-graph pieces with the given features.
    pub fn to_graphs(&self, features: &[f64], channels: usize) -> Vec<EventGraph> {
        let mut local = vec![0usize; self.num_nodes()];
        let mut graphs: Vec<EventGraph> = (0..self.num_graphs)
            .map(|_| EventGraph {
                coords: Vec::new(),
                features: Vec::new(),
                channels,
                edges: Vec::new(),
                pseudo: Vec::new(),
                extent: self.extent,
            })
            .collect();
        for (n, &g) in self.graph_of.iter().enumerate() {
            local[n] = graphs[g].coords.len();
            graphs[g].coords.push(self.coords[n]);
            graphs[g]
                .features
                .extend_from_slice(&features[n * channels..(n + 1) * channels]);
        }
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            let g = &mut graphs[self.graph_of[i]];
            g.edges.push((local[i], local[j]));
            g.pseudo.push(self.pseudo[e]);
        }
        graphs
    }
}

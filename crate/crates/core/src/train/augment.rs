use rand::Rng as _;

use crate::graph_build::{compute_pseudo, EventGraph};
use crate::seed::Rng;

use super::config::AugmentParams;

/// One drawn similarity transform, applied about the spatial centre
/// `((W - 1) / 2, (H - 1) / 2)`: scale, then mirror, then in-plane rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    pub flip_x: bool,
    pub flip_y: bool,
    pub angle_deg: f64,
}

impl AugmentDraw {
    pub fn sample(params: &AugmentParams, rng: &mut Rng) -> Self {
        let [lo, hi] = params.scale;
        let scale = if lo < hi { rng.gen_range(lo..hi) } else { lo };
        let flip_x = rng.gen_bool(params.flip_x);
        let flip_y = rng.gen_bool(params.flip_y);
        let angle_deg = if params.rotate_deg > 0.0 {
            rng.gen_range(0.0..=params.rotate_deg)
        } else {
            0.0
        };
        AugmentDraw {
            scale,
            flip_x,
            flip_y,
            angle_deg,
        }
    }

    /// Transformed copy of `graph`: coordinates are moved and clamped to the
    /// extent, pseudo-coordinates recomputed; features and edges are kept.
    pub fn apply(&self, graph: &EventGraph) -> EventGraph {
        let (w, h) = (
            (graph.extent.width as f64 - 1.0).max(0.0),
            (graph.extent.height as f64 - 1.0).max(0.0),
        );
        let (cx, cy) = (0.5 * w, 0.5 * h);
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let mut out = graph.clone();
        for c in &mut out.coords {
            let mut dx = (c[0] - cx) * self.scale;
            let mut dy = (c[1] - cy) * self.scale;
            if self.flip_x {
                dx = -dx;
            }
            if self.flip_y {
                dy = -dy;
            }
            let (rx, ry) = (cos * dx - sin * dy, sin * dx + cos * dy);
            c[0] = (cx + rx).clamp(0.0, w);
            c[1] = (cy + ry).clamp(0.0, h);
        }
        out.pseudo = compute_pseudo(&out.coords, &out.edges);
        out
    }
}

/// Augments a single graph with a fresh draw from `rng`.
pub fn augment_graph(graph: &EventGraph, params: &AugmentParams, rng: &mut Rng) -> EventGraph {
    AugmentDraw::sample(params, rng).apply(graph)
}

//! Dense grids from graph node features and their stacking into clips.
//!
//! A node with coordinates `(x, y)` lands in grid row `floor(y)` and column
//! `floor(x)`. Cells with several nodes keep the per-channel maximum; empty
//! cells are zero.
//!
//! Clip files (`CLP1`, little-endian): magic, u32 rank, u64 dims, then the
//! f64 values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffengine::{DiffArray, Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::gnn::slot_index;
use crate::graph_build::Extent;
use crate::graph_build::GraphBatch;

/// Scatters `nodes x channels` features onto one `height x width x channels`
/// grid per graph; the result is `[graphs, height, width, channels]`.
pub fn graph_to_grid(tape: &mut Tape, graph: &GraphBatch, x: Var, extent: Extent) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != graph.num_nodes() {
        return Err(shape_err!(
            "graph_to_grid expects [{}, channels], got {shape:?}",
            graph.num_nodes()
        ));
    }
    let idx = slot_index(graph, extent)?;
    let grid = tape.scatter_max(x, &idx, graph.num_graphs * extent.cells())?;
    tape.reshape(
        grid,
        &[graph.num_graphs, extent.height, extent.width, shape[1]],
    )
}

/// Turns `[batch * s, H, W, C]` frames (sample-major) into `[batch, H, W, C, s]` clips.
pub fn frames_to_clips(tape: &mut Tape, frames: Var, s: usize) -> Result<Var> {
    let shape = tape.shape(frames).to_vec();
    if shape.len() != 4 || s == 0 || shape[0] % s != 0 {
        return Err(shape_err!(
            "cannot split frames {shape:?} into clips of {s}"
        ));
    }
    let b = shape[0] / s;
    let split = tape.reshape(frames, &[b, s, shape[1], shape[2], shape[3]])?;
    tape.permute(split, &[0, 2, 3, 4, 1])
}

/// Values laid out `H x W x C x S`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridClip {
    pub values: Vec<f64>,
    pub dims: [usize; 4],
}

impl GridClip {
    pub fn get(&self, row: usize, col: usize, c: usize, s: usize) -> f64 {
        let [_, w, ch, st] = self.dims;
        self.values[((row * w + col) * ch + c) * st + s]
    }

    /// Frame `s` as an `H x W x C` array.
    pub fn frame(&self, s: usize) -> DiffArray {
        let [h, w, c, _] = self.dims;
        let data = (0..h * w * c)
            .map(|i| self.values[i * self.dims[3] + s])
            .collect();
        DiffArray::new(vec![h, w, c], data).expect("frame size matches")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| {
            w.write_all(b"CLP1")?;
            w.write_all(&4u32.to_le_bytes())?;
            for d in self.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &self.values {
                w.write_all(&v.to_le_bytes())?;
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<GridClip> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        let bad = |offset: usize, msg: &str| Error::MalformedBytes {
            offset: offset as u64,
            msg: msg.into(),
        };
        if buf.len() < 8 || &buf[..4] != b"CLP1" {
            return Err(bad(0, "not a CLP1 clip"));
        }
        let rank = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        if rank != 4 || buf.len() < 8 + 32 {
            return Err(bad(4, "clip header must declare 4 dims"));
        }
        let mut dims = [0usize; 4];
        for (a, d) in dims.iter_mut().enumerate() {
            *d = u64::from_le_bytes(buf[8 + 8 * a..16 + 8 * a].try_into().unwrap()) as usize;
        }
        let n: usize = dims.iter().product();
        let body = &buf[40..];
        if body.len() != n * 8 {
            return Err(bad(40, "value count does not match dims"));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(GridClip { values, dims })
    }
}

/// Stacks `H x W x C` grids along a trailing temporal axis, in input order.
pub fn stack_clip(grids: &[DiffArray]) -> Result<GridClip> {
    let first = grids
        .first()
        .ok_or_else(|| invalid!("stack_clip needs at least one grid"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 {
        return Err(shape_err!("grids must be H x W x C, got {shape:?}"));
    }
    if let Some(g) = grids.iter().find(|g| g.shape() != shape.as_slice()) {
        return Err(shape_err!(
            "grid shape {:?} differs from {shape:?}",
            g.shape()
        ));
    }
    let s = grids.len();
    let n = first.len();
    let mut values = vec![0.0; n * s];
    for (t, g) in grids.iter().enumerate() {
        for (i, v) in g.data().iter().enumerate() {
            values[i * s + t] = *v;
        }
    }
    Ok(GridClip {
        values,
        dims: [shape[0], shape[1], shape[2], s],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_build::compute_pseudo;

    fn batch(coords: Vec<[f64; 3]>, extent: Extent) -> GraphBatch {
        let n = coords.len();
        GraphBatch {
            pseudo: compute_pseudo(&coords, &[]),
            coords,
            edges: vec![],
            graph_of: vec![0; n],
            num_graphs: 1,
            extent,
        }
    }

    #[test]
    fn single_node_lands_at_row_y_column_x() {
        let g = batch(vec![[2.0, 3.0, 0.0]], Extent::new(4, 4));
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 1], vec![7.0]).unwrap();
        let grid = graph_to_grid(&mut tape, &g, x, Extent::new(4, 4)).unwrap();
        let data = tape.data(grid);
        assert_eq!(data[3 * 4 + 2], 7.0);
        assert_eq!(data.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn empty_graph_gives_zero_grid() {
        let g = batch(vec![], Extent::new(2, 3));
        let mut tape = Tape::new();
        let x = tape.constant(&[0, 2], vec![]).unwrap();
        let grid = graph_to_grid(&mut tape, &g, x, Extent::new(2, 3)).unwrap();
        assert_eq!(tape.shape(grid), &[1, 2, 3, 2]);
        assert!(tape.data(grid).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collisions_keep_the_max() {
        let g = batch(vec![[1.2, 0.5, 0.0], [1.7, 0.1, 0.0]], Extent::new(2, 2));
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 1], vec![2.0, 5.0]).unwrap();
        let grid = graph_to_grid(&mut tape, &g, x, Extent::new(2, 2)).unwrap();
        assert_eq!(tape.data(grid), &[0.0, 5.0, 0.0, 0.0]);
        let outside = batch(vec![[2.0, 0.0, 0.0]], Extent::new(2, 2));
        let y = tape.constant(&[1, 1], vec![1.0]).unwrap();
        assert!(graph_to_grid(&mut tape, &outside, y, Extent::new(2, 2)).is_err());
    }

    #[test]
    fn stacking_keeps_frames() {
        let a = DiffArray::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap();
        let b = DiffArray::new(vec![1, 2, 1], vec![3.0, 4.0]).unwrap();
        let single = stack_clip(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.dims, [1, 2, 1, 1]);
        assert_eq!(single.values, a.data());
        let clip = stack_clip(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(clip.frame(0), a);
        assert_eq!(clip.frame(1), b);
        let c = DiffArray::zeros(&[2, 2, 1]);
        assert!(stack_clip(&[a, c]).is_err());
    }

    #[test]
    fn clip_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.clp");
        let clip = GridClip {
            values: (0..12).map(f64::from).collect(),
            dims: [1, 2, 3, 2],
        };
        clip.write(&path).unwrap();
        assert_eq!(GridClip::read(&path).unwrap(), clip);
    }

    #[test]
    fn frames_become_sample_clips() {
        let mut tape = Tape::new();
        // two samples, s = 2, 1x1 grid, 1 channel: frames ordered (b0 s0, b0 s1, b1 s0, b1 s1)
        let f = tape
            .constant(&[4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let c = frames_to_clips(&mut tape, f, 2).unwrap();
        assert_eq!(tape.shape(c), &[2, 1, 1, 1, 2]);
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }
}

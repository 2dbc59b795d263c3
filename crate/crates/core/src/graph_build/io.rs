//! `GRF1` container for built graph sequences.
//!
//! Little-endian layout: magic `GRF1`, u32 version (1), i64 label (-1 when
//! absent), u32 graph count; then per graph: u32 height, u32 width,
//! u32 channels, u64 nodes, u64 edges, the node table (`x, y, t` followed by
//! the channel values, all f64), the edge table (u32 source, u32 target) and
//! the pseudo table (two f64 per edge).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EventGraph, Extent, GraphSequence};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GRF1";
const VERSION: u32 = 1;

pub fn write_sequence(seq: &GraphSequence, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(seq, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_sequence(path: &Path) -> Result<GraphSequence> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode(&mut BufReader::new(file))
}

pub fn encode<W: Write>(seq: &GraphSequence, w: &mut W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let label = seq.label.map_or(-1i64, |l| l as i64);
    w.write_all(&label.to_le_bytes())?;
    w.write_all(&(seq.graphs.len() as u32).to_le_bytes())?;
    for g in &seq.graphs {
        w.write_all(&(g.extent.height as u32).to_le_bytes())?;
        w.write_all(&(g.extent.width as u32).to_le_bytes())?;
        w.write_all(&(g.channels as u32).to_le_bytes())?;
        w.write_all(&(g.num_nodes() as u64).to_le_bytes())?;
        w.write_all(&(g.num_edges() as u64).to_le_bytes())?;
        for (n, c) in g.coords.iter().enumerate() {
            for v in c
                .iter()
                .chain(&g.features[n * g.channels..(n + 1) * g.channels])
            {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for &(i, j) in &g.edges {
            w.write_all(&(i as u32).to_le_bytes())?;
            w.write_all(&(j as u32).to_le_bytes())?;
        }
        for u in &g.pseudo {
            w.write_all(&u[0].to_le_bytes())?;
            w.write_all(&u[1].to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a, R> {
    inner: &'a mut R,
    offset: u64,
}

impl<R: Read> Cursor<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::MalformedBytes {
                offset: self.offset,
                msg: "unexpected end of graph file".into(),
            })?;
        self.offset += N as u64;
        Ok(buf)
    }
    fn u32(&mut self) -> Result<u32> {
        self.bytes::<4>().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Result<u64> {
        self.bytes::<8>().map(u64::from_le_bytes)
    }
    fn f64(&mut self) -> Result<f64> {
        self.bytes::<8>().map(f64::from_le_bytes)
    }
}

pub fn decode<R: Read>(r: &mut R) -> Result<GraphSequence> {
    let mut c = Cursor {
        inner: r,
        offset: 0,
    };
    if &c.bytes::<4>()? != MAGIC {
        return Err(Error::MalformedBytes {
            offset: 0,
            msg: "bad magic, expected GRF1".into(),
        });
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::MalformedBytes {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let label = i64::from_le_bytes(c.bytes::<8>()?);
    let count = c.u32()?;
    let mut graphs = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = c.offset;
        let extent = Extent::new(c.u32()? as usize, c.u32()? as usize);
        let channels = c.u32()? as usize;
        let nodes = c.u64()? as usize;
        let edges = c.u64()? as usize;
        let mut coords = Vec::with_capacity(nodes.min(1 << 20));
        let mut features = Vec::with_capacity((nodes * channels).min(1 << 22));
        for _ in 0..nodes {
            coords.push([c.f64()?, c.f64()?, c.f64()?]);
            for _ in 0..channels {
                features.push(c.f64()?);
            }
        }
        let mut edge_list = Vec::with_capacity(edges.min(1 << 22));
        for _ in 0..edges {
            edge_list.push((c.u32()? as usize, c.u32()? as usize));
        }
        let mut pseudo = Vec::with_capacity(edges.min(1 << 22));
        for _ in 0..edges {
            pseudo.push([c.f64()?, c.f64()?]);
        }
        let g = EventGraph {
            coords,
            features,
            channels,
            edges: edge_list,
            pseudo,
            extent,
        };
        g.validate().map_err(|e| Error::MalformedBytes {
            offset: at,
            msg: e.to_string(),
        })?;
        graphs.push(g);
    }
    Ok(GraphSequence {
        graphs,
        label: (label >= 0).then_some(label as usize),
    })
}

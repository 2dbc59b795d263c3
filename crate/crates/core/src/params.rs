//! Named parameter storage, forward contexts and the `CKP1` checkpoint container.
//!
//! Parameters are keyed by layer path (for example `spatial.1.main1.weight`).
//! Trainable entries receive gradients; the others are buffers such as
//! batch-norm running statistics.
//!
//! Checkpoint layout (little-endian): magic `CKP1`, u32 version (1), u64
//! config length and the UTF-8 config text, u32 entry count; then per entry:
//! u32 name length, name bytes, u8 trainable flag, u32 rank, u64 dims and the
//! f64 values in row-major order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;

use crate::diffengine::{DiffArray, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: DiffArray,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: DiffArray, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(invalid!("duplicate parameter {name}"));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(())
    }

    /// Adds a trainable array drawn from `U(-bound, bound)`.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut Rng,
    ) -> Result<()> {
        let mut value = DiffArray::zeros(shape);
        if bound > 0.0 {
            value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-bound..bound));
        }
        self.add(name, value, true)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.position(name).map(|i| &mut self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .map(|p| p.value.data())
            .ok_or_else(|| invalid!("unknown parameter {name}"))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        self.get_mut(name)
            .map(|p| p.value.data_mut())
            .ok_or_else(|| invalid!("unknown parameter {name}"))
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Replaces every value with the same-named entry of `other`, which must
    /// have identical names, shapes and flags.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(invalid!(
                "checkpoint has {} entries, model has {}",
                other.params.len(),
                self.params.len()
            ));
        }
        for p in &mut self.params {
            let q = other
                .get(&p.name)
                .ok_or_else(|| invalid!("checkpoint lacks parameter {}", p.name))?;
            if q.value.shape() != p.value.shape() || q.trainable != p.trainable {
                return Err(invalid!(
                    "parameter {}: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    q.value.shape(),
                    p.value.shape()
                ));
            }
            p.value.data_mut().copy_from_slice(q.value.data());
        }
        Ok(())
    }
}

/// One forward pass: a fresh tape, lazily bound parameters, the mode flag
/// and a generator for stochastic layers.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a mut ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
    rng: Rng,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a mut ParamStore, train: bool, seed: u64) -> Self {
        let n = store.len();
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            train,
            rng: seed::rng(seed, &[]),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The tape variable holding parameter `name`, recorded on first use.
    /// Trainable parameters require gradients in training mode.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let p = &self.store.params[i];
        let mut value = p.value.clone();
        value.requires_grad = p.trainable && self.train;
        let v = self.tape.leaf(value);
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// Mutable access to a buffer; used for running statistics.
    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        self.store.value_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Result<&[f64]> {
        self.store.value(name)
    }

    /// Gradients of every bound trainable parameter after `tape.backward`,
    /// indexed by store position. Unreached parameters get zeros.
    pub fn take_grads(&mut self) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![None; self.store.len()];
        for (i, b) in self.bound.iter().enumerate() {
            let p = &self.store.params[i];
            if let (Some(v), true) = (b, p.trainable) {
                out[i] = Some(
                    self.tape
                        .grad(*v)
                        .map_or_else(|| vec![0.0; p.value.len()], <[f64]>::to_vec),
                );
            }
        }
        out
    }
}

const MAGIC: &[u8; 4] = b"CKP1";
const VERSION: u32 = 1;

/// Parameters plus the configuration text needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.encode(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&mut BufReader::new(file))
    }

    pub fn encode<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.config.len() as u64).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in self.params.iter() {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&[u8::from(p.trainable)])?;
            w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn decode<R: Read>(r: &mut R) -> Result<Checkpoint> {
        let mut reader = Reader { r, offset: 0 };
        let magic = reader.bytes(4)?;
        if magic != MAGIC {
            return Err(Error::MalformedBytes {
                offset: 0,
                msg: "not a CKP1 checkpoint".into(),
            });
        }
        let version = reader.u32()?;
        if version != VERSION {
            return Err(Error::MalformedBytes {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let len = reader.u64()? as usize;
        let config = String::from_utf8(reader.bytes(len)?).map_err(|_| Error::MalformedBytes {
            offset: 16,
            msg: "config is not UTF-8".into(),
        })?;
        let count = reader.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let at = reader.offset;
            let name_len = reader.u32()? as usize;
            let name =
                String::from_utf8(reader.bytes(name_len)?).map_err(|_| Error::MalformedBytes {
                    offset: at,
                    msg: "parameter name is not UTF-8".into(),
                })?;
            let trainable = reader.bytes(1)?[0] != 0;
            let rank = reader.u32()? as usize;
            let shape = (0..rank)
                .map(|_| reader.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| reader.f64()).collect::<Result<Vec<_>>>()?;
            let value = DiffArray::new(shape, data)?;
            params
                .add(&name, value, trainable)
                .map_err(|e| Error::MalformedBytes {
                    offset: at,
                    msg: e.to_string(),
                })?;
        }
        Ok(Checkpoint { config, params })
    }
}

struct Reader<'r, R: Read> {
    r: &'r mut R,
    offset: u64,
}

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = self.r.by_ref().take(n as u64).read_to_end(&mut buf)?;
        if got != n {
            return Err(Error::MalformedBytes {
                offset: self.offset,
                msg: format!("truncated: wanted {n} bytes, got {got}"),
            });
        }
        self.offset += n as u64;
        Ok(buf)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

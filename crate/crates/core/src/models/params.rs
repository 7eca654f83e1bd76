//! Named parameter storage, deterministic initialization, Adam updates and
//! the single-file checkpoint format shared by the bundled models.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Ordered map of parameter name to tensor. Iteration order is the sorted
/// name order, which keeps training and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self.entries[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.entries.get_mut(name).expect("unknown parameter")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    /// Registers every parameter as a tape leaf and returns the handles.
    pub fn leaves(&self, tape: &Tape) -> BTreeMap<String, Var> {
        self.entries
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect()
    }

    /// Uniform Kaiming-style init: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn init_conv(
        &mut self,
        name: &str,
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let bound = (6.0 / (kh * kw * cin) as f64).sqrt();
        let weight = ArrayD::from_shape_fn(IxDyn(&[kh, kw, cin, cout]), |_| {
            rng.random_range(-bound..bound)
        });
        self.insert(format!("{name}.w"), weight);
        self.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
    }

    pub fn init_linear(&mut self, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) {
        let bound = (6.0 / cin as f64).sqrt();
        let weight =
            ArrayD::from_shape_fn(IxDyn(&[cin, cout]), |_| rng.random_range(-bound..bound));
        self.insert(format!("{name}.w"), weight);
        self.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
    }

    pub fn init_scalar(&mut self, name: &str, value: f64) {
        self.insert(name, ArrayD::from_elem(IxDyn(&[]), value));
    }
}

/// Plain Adam optimizer over a [`ParamStore`].
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: usize,
    first: BTreeMap<String, ArrayD<f64>>,
    second: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update. Parameters without a gradient entry are skipped.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, ArrayD<f64>>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = params.entries.keys().cloned().collect();
        for name in names {
            let Some(grad) = grads.get(&name) else {
                continue;
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            m.zip_mut_with(grad, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(grad, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let param = params.get_mut(&name);
            ndarray::Zip::from(&mut *param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    *p -= self.lr * (m / bias1) / ((v / bias2).sqrt() + self.eps);
                });
        }
    }
}

/// FNV-1a hash rendered as hex; stable across platforms and releases.
pub fn stable_hash_hex(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SWCKPT01";

/// Writes a checkpoint: magic, JSON header, then each parameter as
/// `name / ndim / dims / f64 little-endian payload`, in sorted name order.
pub fn save_checkpoint(path: &Path, header_json: &str, params: &ParamStore) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    let header = header_json.as_bytes();
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(header).map_err(io_err)?;
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, value) in params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        let shape = value.shape();
        w.write_all(&[shape.len() as u8]).map_err(io_err)?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &x in value.iter() {
            w.write_all(&x.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads a checkpoint back; returns the JSON header and the parameters.
pub fn load_checkpoint(path: &Path) -> Result<(String, ParamStore)> {
    let io_err = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut offset = 0u64;

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path, 0u64, "bad checkpoint magic"));
    }
    offset += 8;

    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4).map_err(io_err)?;
    offset += 4;
    let header_len = u32::from_le_bytes(len4) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)
        .map_err(|_| Error::format(path, offset, "truncated checkpoint header"))?;
    offset += header_len as u64;
    let header = String::from_utf8(header)
        .map_err(|_| Error::format(path, offset, "checkpoint header is not UTF-8"))?;

    r.read_exact(&mut len4).map_err(io_err)?;
    offset += 4;
    let count = u32::from_le_bytes(len4) as usize;

    let mut params = ParamStore::new();
    for _ in 0..count {
        let mut len2 = [0u8; 2];
        r.read_exact(&mut len2)
            .map_err(|_| Error::format(path, offset, "truncated parameter record"))?;
        offset += 2;
        let name_len = u16::from_le_bytes(len2) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::format(path, offset, "truncated parameter name"))?;
        offset += name_len as u64;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format(path, offset, "parameter name is not UTF-8"))?;

        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)
            .map_err(|_| Error::format(path, offset, "truncated shape"))?;
        offset += 1;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            r.read_exact(&mut len4)
                .map_err(|_| Error::format(path, offset, "truncated shape"))?;
            offset += 4;
            shape.push(u32::from_le_bytes(len4) as usize);
        }
        let numel: usize = shape.iter().product::<usize>().max(1);
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(path, offset, "truncated parameter payload"))?;
            offset += 8;
            data.push(f64::from_le_bytes(buf));
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::format(path, offset, format!("bad parameter shape: {e}")))?;
        params.insert(name, value);
    }
    Ok((header, params))
}

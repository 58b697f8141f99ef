//! Named parameter storage and the checkpoint file format.
//!
//! A [`ParamStore`] is an ordered map from dotted names to dense arrays.
//! Trainable entries receive optimizer updates; non-trainable entries hold
//! state that must survive a save/load round trip bit-for-bit (batch-norm
//! running statistics, spectral-norm power-iteration vectors, optimizer
//! moments).
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic "KGCK" | u32 schema version | u64 json header length | json header
//! per array: u32 name len | name bytes | u8 dtype tag len | dtype |
//!            u8 trainable | u32 ndim | u64 dims... | u64 byte len | data
//! ```
//!
//! The json header carries caller metadata (model config, step counters);
//! this module treats it as an opaque string.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"KGCK";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone)]
struct Entry<F: Scalar> {
    array: ArrayD<F>,
    trainable: bool,
}

/// Ordered collection of named arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Scalar> {
    entries: IndexMap<String, Entry<F>>,
}

/// Graph leaves for one store, in insertion order.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayD<F>) {
        self.entries.insert(name.into(), Entry { array, trainable: true });
    }

    /// Insert state that is saved and restored but never optimized.
    pub fn insert_buffer(&mut self, name: impl Into<String>, array: ArrayD<F>) {
        self.entries.insert(name.into(), Entry { array, trainable: false });
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
            .array
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
            .array
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Total element count over trainable entries.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.array.len())
            .sum()
    }

    /// Bind every entry into `g`: trainable entries as gradient leaves,
    /// buffers as constants.
    pub fn bind(&self, g: &mut Graph<F>) -> BoundParams {
        self.bind_mode(g, true)
    }

    /// Bind every entry as a constant (no gradients), for forward passes
    /// through frozen networks.
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> BoundParams {
        self.bind_where(g, |_| false)
    }

    /// Bind trainable entries matching `grads_for` as gradient leaves and
    /// everything else as constants. Alternating optimization phases use
    /// this to train one network while the other stays frozen in the same
    /// graph.
    pub fn bind_where(&self, g: &mut Graph<F>, grads_for: impl Fn(&str) -> bool) -> BoundParams {
        let mut vars = IndexMap::new();
        for (name, entry) in &self.entries {
            let v = if entry.trainable && grads_for(name) {
                g.param(entry.array.clone())
            } else {
                g.constant(entry.array.clone())
            };
            vars.insert(name.clone(), v);
        }
        BoundParams { vars }
    }

    fn bind_mode(&self, g: &mut Graph<F>, with_grads: bool) -> BoundParams {
        self.bind_where(g, |_| with_grads)
    }

    /// Append this store's entries under `prefix.` into `target`.
    pub fn merge_into(&self, prefix: &str, target: &mut ParamStore<F>) {
        for (name, entry) in &self.entries {
            target.entries.insert(format!("{prefix}.{name}"), entry.clone());
        }
    }

    /// Split off the entries under `prefix.`, stripping the prefix.
    pub fn extract_prefix(&self, prefix: &str) -> ParamStore<F> {
        let mut out = ParamStore::new();
        let pat = format!("{prefix}.");
        for (name, entry) in &self.entries {
            if let Some(stripped) = name.strip_prefix(&pat) {
                out.entries.insert(stripped.to_string(), entry.clone());
            }
        }
        out
    }

    // ---- serialization ----

    pub fn write_to(&self, w: &mut impl Write, json_header: &str) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_SCHEMA_VERSION.to_le_bytes())?;
        let hb = json_header.as_bytes();
        w.write_all(&(hb.len() as u64).to_le_bytes())?;
        w.write_all(hb)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, entry) in &self.entries {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            let dt = F::DTYPE.as_bytes();
            w.write_all(&[dt.len() as u8])?;
            w.write_all(dt)?;
            w.write_all(&[u8::from(entry.trainable)])?;
            let shape = entry.array.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut bytes = Vec::with_capacity(entry.array.len() * F::BYTE_WIDTH);
            for v in entry.array.iter() {
                v.append_le_bytes(&mut bytes);
            }
            w.write_all(&(bytes.len() as u64).to_le_bytes())?;
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<(Self, String)> {
        let bad = |msg: &str| Error::data(format!("checkpoint: {msg}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r).map_err(|_| bad("truncated version"))?;
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::data(format!(
                "checkpoint: schema version {version} unsupported (expected {CHECKPOINT_SCHEMA_VERSION})"
            )));
        }
        let hlen = read_u64(r).map_err(|_| bad("truncated header length"))? as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf).map_err(|_| bad("truncated header"))?;
        let header = String::from_utf8(hbuf).map_err(|_| bad("header not utf-8"))?;
        let count = read_u64(r).map_err(|_| bad("truncated entry count"))? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = read_u32(r).map_err(|_| bad("truncated name length"))? as usize;
            let mut nbuf = vec![0u8; nlen];
            r.read_exact(&mut nbuf).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(nbuf).map_err(|_| bad("name not utf-8"))?;
            let mut dlen = [0u8; 1];
            r.read_exact(&mut dlen).map_err(|_| bad("truncated dtype"))?;
            let mut dbuf = vec![0u8; dlen[0] as usize];
            r.read_exact(&mut dbuf).map_err(|_| bad("truncated dtype"))?;
            let dtype = String::from_utf8(dbuf).map_err(|_| bad("dtype not utf-8"))?;
            if dtype != F::DTYPE {
                return Err(Error::data(format!(
                    "checkpoint: array {name} has dtype {dtype}, expected {}",
                    F::DTYPE
                )));
            }
            let mut tr = [0u8; 1];
            r.read_exact(&mut tr).map_err(|_| bad("truncated flags"))?;
            let ndim = read_u32(r).map_err(|_| bad("truncated ndim"))? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u64(r).map_err(|_| bad("truncated dims"))? as usize);
            }
            let blen = read_u64(r).map_err(|_| bad("truncated data length"))? as usize;
            let expected: usize = dims.iter().product::<usize>() * F::BYTE_WIDTH;
            if blen != expected {
                return Err(bad("data length disagrees with shape"));
            }
            let mut data = vec![0u8; blen];
            r.read_exact(&mut data).map_err(|_| bad("truncated data"))?;
            let values: Vec<F> = data
                .chunks_exact(F::BYTE_WIDTH)
                .map(F::from_le_bytes)
                .collect();
            let array = ArrayD::from_shape_vec(IxDyn(&dims), values)
                .map_err(|_| bad("shape/data mismatch"))?;
            store.entries.insert(name, Entry { array, trainable: tr[0] != 0 });
        }
        Ok((store, header))
    }

    pub fn save(&self, path: &Path, json_header: &str) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(&mut f, json_header).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut store = ParamStore::<f32>::new();
        store.insert("layer.w", arr2(&[[1.0f32, -2.5], [3.25, 0.1]]).into_dyn());
        store.insert_buffer("layer.running_mean", ndarray::arr1(&[0.5f32, -0.5]).into_dyn());
        let mut buf = Vec::new();
        store.write_to(&mut buf, "{\"step\":7}").unwrap();
        let (loaded, header) = ParamStore::<f32>::read_from(&mut &buf[..]).unwrap();
        assert_eq!(header, "{\"step\":7}");
        assert_eq!(loaded.get("layer.w"), store.get("layer.w"));
        assert_eq!(loaded.get("layer.running_mean"), store.get("layer.running_mean"));
        assert_eq!(loaded.trainable_names(), vec!["layer.w".to_string()]);
        // order preserved
        let names: Vec<_> = loaded.names().collect();
        assert_eq!(names, vec!["layer.w", "layer.running_mean"]);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", ndarray::arr1(&[1.0f32]).into_dyn());
        let mut buf = Vec::new();
        store.write_to(&mut buf, "{}").unwrap();
        let err = ParamStore::<f64>::read_from(&mut &buf[..]).unwrap_err();
        assert!(err.to_string().contains("dtype"));
    }
}

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

const CKPT_MAGIC: &[u8; 8] = b"STFCKPT1";

/// Named learnable tensors. Enumeration is name-sorted (BTreeMap), and every
/// tensor is initialized from an rng keyed by (seed, name), so registration
/// order never affects values.
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            params: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()))
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    /// Register a tensor initialized uniformly on [-scale, scale].
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], scale: f64) -> Result<()> {
        let mut rng = self.rng_for(name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Names in deterministic (sorted) order.
    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Bind every parameter onto a tape, returning name → node.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> BTreeMap<String, NodeId> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable)))
            .collect()
    }

    /// Checkpoint: magic, frozen flag, seed, then name-sorted tensors with
    /// shape headers and little-endian f64 payloads.
    pub fn save(&self, path: &Path, frozen: bool) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&[frozen as u8])?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, t) in &self.params {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u64).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Returns the store and its frozen flag.
    pub fn load(path: &Path) -> Result<(Self, bool)> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Parse(format!(
                "{}: not a parameter checkpoint",
                path.display()
            )));
        }
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        let frozen = byte[0] != 0;
        let seed = read_u64(&mut r)?;
        let count = read_u64(&mut r)? as usize;
        let mut store = ParameterStore::new(seed);
        for _ in 0..count {
            let name_len = read_u64(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Parse(e.to_string()))?;
            let rank = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        Ok((store, frozen))
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reinit_with_same_seed_is_bit_identical() {
        let mut a = ParameterStore::new(42);
        a.init_uniform("w", &[3, 4], 0.5).unwrap();
        a.init_uniform("b", &[4], 0.1).unwrap();
        // different registration order, same seed
        let mut b = ParameterStore::new(42);
        b.init_uniform("b", &[4], 0.1).unwrap();
        b.init_uniform("w", &[3, 4], 0.5).unwrap();
        assert_eq!(a.get("w").unwrap(), b.get("w").unwrap());
        assert_eq!(a.get("b").unwrap(), b.get("b").unwrap());
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = ParameterStore::new(1);
        s.init_zeros("x", &[2]).unwrap();
        assert!(s.init_zeros("x", &[2]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_bits_and_frozen_flag() {
        let mut s = ParameterStore::new(7);
        s.init_uniform("enc.w", &[2, 3], 1.0).unwrap();
        s.init_uniform("head.b", &[5], 0.3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        s.save(&path, true).unwrap();
        let (loaded, frozen) = ParameterStore::load(&path).unwrap();
        assert!(frozen);
        assert_eq!(loaded.seed(), 7);
        assert_eq!(s.get("enc.w").unwrap(), loaded.get("enc.w").unwrap());
        assert_eq!(s.get("head.b").unwrap(), loaded.get("head.b").unwrap());
    }
}

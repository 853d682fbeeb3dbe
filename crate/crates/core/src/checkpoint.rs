//! Named-tensor checkpoint container.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes   "SCMRCKPT"
//! version  u32       1
//! count    u32       number of tensors
//! count x {
//!     name_len  u32
//!     name      name_len bytes, UTF-8
//!     ndim      u32
//!     dims      ndim x u64
//!     values    prod(dims) x f64 (IEEE-754 bits, little-endian)
//! }
//! ```
//!
//! Values are stored as raw bit patterns, so a write/read round trip is
//! bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::NetworkState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SCMRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adds every parameter of `net` under `prefix`.
    pub fn add_network(&mut self, prefix: &str, net: &NetworkState) {
        for (name, t) in net.named_params() {
            self.push(format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Overwrites the parameters of `net` from tensors stored under `prefix`.
    pub fn load_network(&self, prefix: &str, net: &mut NetworkState) -> Result<()> {
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(net.params_mut()) {
            let key = format!("{prefix}.{name}");
            let t = self.get(&key).ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks {key}")))?;
            t.expect_shape(p.shape())?;
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R, origin: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(origin, m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = read_u32(&mut r).map_err(|_| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r).map_err(|_| bad("truncated header"))?;
        let mut tensors = Vec::with_capacity(count as usize);
        for i in 0..count {
            let trunc = |_| bad(&format!("truncated at tensor {i}"));
            let name_len = read_u32(&mut r).map_err(trunc)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(trunc)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndim = read_u32(&mut r).map_err(trunc)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(trunc)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(trunc)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f), path)
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            name in "[a-z.0-9]{1,12}",
        ) {
            let mut ck = Checkpoint::default();
            let n = vals.len();
            ck.push(name, Tensor::new(vec![n], vals).unwrap());
            ck.push("scalar", Tensor::vector(vec![-0.0]));
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(buf.as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.tensors.len(), 2);
            for ((na, a), (nb, b)) in ck.tensors.iter().zip(&back.tensors) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(a.shape(), b.shape());
                let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn truncation_and_bad_magic_are_reported() {
        let mut ck = Checkpoint::default();
        ck.push("w", Tensor::vector(vec![1.0, 2.0]));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let cut = &buf[..buf.len() - 3];
        assert!(Checkpoint::read_from(cut, Path::new("x")).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(bad.as_slice(), Path::new("x")).is_err());
    }
}

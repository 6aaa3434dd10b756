//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! b"NEVAECK1"  u32 version  u64 json_len  json metadata
//! u32 tensor_count
//! per tensor: u32 name_len  name  u32 ndim  u64 dims[ndim]  f64 data[product(dims)]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Hyperparams, ModelParams};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"NEVAECK1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub lambda_n: f64,
    pub hyper: Hyperparams,
    pub iteration: usize,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    hyper: Hyperparams,
    lambda_n: f64,
    iteration: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(bad("truncated file"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&Metadata {
            hyper: self.hyper.clone(),
            lambda_n: self.lambda_n,
            iteration: self.iteration,
        })
        .expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let names = self.params.names();
        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in names.iter().zip(tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = r.u64()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(len)?).map_err(|e| bad(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut names = Vec::with_capacity(count);
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        if !r.buf.is_empty() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        let params = ModelParams::from_tensors(meta.hyper.k, tensors)?;
        if params.names() != names {
            return Err(bad("tensor names do not match the model layout"));
        }
        Ok(Checkpoint {
            params,
            lambda_n: meta.lambda_n,
            hyper: meta.hyper,
            iteration: meta.iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{Atom, MolecularGraph};
    use crate::training::{elbo, Hyperparams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checkpoint() -> Checkpoint {
        let hyper = Hyperparams {
            k: 3,
            seed: 42,
            ..Hyperparams::molecules()
        };
        let params = ModelParams::init(&hyper, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        Checkpoint {
            params,
            lambda_n: 7.123456789012345,
            hyper,
            iteration: 17,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.lambda_n.to_bits(), ck.lambda_n.to_bits());

        let g = MolecularGraph::new(vec![Atom::C, Atom::O, Atom::H], [(0, 1, 1), (1, 2, 1)]).unwrap();
        let a = elbo(
            &g,
            &ck.params,
            &ck.hyper,
            ck.lambda_n,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let b = elbo(
            &g,
            &back.params,
            &back.hyper,
            back.lambda_n,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = checkpoint().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = std::env::temp_dir().join(format!("nevae-ck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let ck = checkpoint();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}

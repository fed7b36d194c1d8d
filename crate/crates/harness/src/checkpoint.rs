//! Little-endian named-tensor container with a JSON trailer.
//!
//! Layout: `DPCKPT\0\0`, u32 version, u32 tensor count, then per tensor
//! u32 name length, name bytes, u8 dtype (0 = f32), u32 rank, u64 dims,
//! raw data; finally u64 trailer length and the trailer JSON.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use diffperc_core::nn::{LrGroup, ParamStore};
use diffperc_core::tensor::RngState;
use diffperc_core::{Error, Result};

use crate::config::RunConfig;
use crate::optim::Moments;

pub const MAGIC: &[u8; 8] = b"DPCKPT\0\0";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Codec,
    Pretrain,
    Perception,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorFlags {
    pub frozen: bool,
    pub lr_group: LrGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trailer {
    pub stage: Stage,
    pub config: RunConfig,
    pub flags: IndexMap<String, TensorFlags>,
    pub rng: RngState,
    pub step: u64,
    pub vocab: String,
    /// Conditioning rows the head was sized for.
    #[serde(default)]
    pub prompt_rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: IndexMap<String, NamedTensor>,
    pub trailer: Trailer,
}

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

impl Checkpoint {
    /// Snapshot of a parameter store plus optimizer moments.
    pub fn capture(store: &ParamStore<f32>, moments: &IndexMap<String, Moments>, trailer: Trailer) -> Self {
        let mut tensors = IndexMap::new();
        let mut flags = IndexMap::new();
        for p in store.all() {
            tensors.insert(
                p.name().to_string(),
                NamedTensor {
                    shape: p.shape(),
                    data: p.tensor().to_vec(),
                },
            );
            flags.insert(
                p.name().to_string(),
                TensorFlags {
                    frozen: p.is_frozen(),
                    lr_group: p.group(),
                },
            );
        }
        for (name, m) in moments {
            let shape = tensors.get(name).map_or(vec![m.m.len()], |t| t.shape.clone());
            for (prefix, data) in [(M_PREFIX, &m.m), (V_PREFIX, &m.v)] {
                tensors.insert(
                    format!("{prefix}{name}"),
                    NamedTensor {
                        shape: shape.clone(),
                        data: data.clone(),
                    },
                );
            }
        }
        Self {
            version: VERSION,
            tensors,
            trailer: Trailer { flags, ..trailer },
        }
    }

    /// Copies every stored tensor whose name starts with one of `prefixes`
    /// into `store`; each must exist there with the same shape.
    pub fn load_into(&self, store: &ParamStore<f32>, prefixes: &[&str]) -> Result<usize> {
        let mut n = 0;
        for (name, t) in &self.tensors {
            if name.starts_with("optim.") || !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let p = store
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has no matching parameter")))?;
            if p.shape() != t.shape {
                return Err(Error::Checkpoint(format!(
                    "`{name}`: stored shape {:?}, parameter shape {:?}",
                    t.shape,
                    p.shape()
                )));
            }
            p.set_data(t.data.clone())?;
            n += 1;
        }
        Ok(n)
    }

    /// Fails unless some tensor starts with each prefix.
    pub fn require(&self, prefixes: &[&str]) -> Result<()> {
        for p in prefixes {
            if !self.tensors.keys().any(|k| k.starts_with(p)) {
                return Err(Error::Checkpoint(format!("no `{p}*` tensors in checkpoint")));
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> IndexMap<String, Moments> {
        let mut out = IndexMap::new();
        for (name, t) in &self.tensors {
            if let Some(base) = name.strip_prefix(M_PREFIX) {
                if let Some(v) = self.tensors.get(&format!("{V_PREFIX}{base}")) {
                    out.insert(
                        base.to_string(),
                        Moments {
                            m: t.data.clone(),
                            v: v.data.clone(),
                        },
                    );
                }
            }
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F32])?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        let json = serde_json::to_vec(&self.trailer).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(r)?;
        let mut tensors = IndexMap::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let mut dtype = [0u8];
            r.read_exact(&mut dtype)?;
            if dtype[0] != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("`{name}`: unknown dtype {}", dtype[0])));
            }
            let rank = read_u32(r)? as usize;
            let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.insert(name, NamedTensor { shape, data });
        }
        let len = read_u64(r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let trailer = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("trailer: {e}")))?;
        Ok(Self {
            version,
            tensors,
            trailer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffperc_core::nn::VarBuilder;
    use diffperc_core::tensor::SeededRng;

    fn trailer() -> Trailer {
        Trailer {
            stage: Stage::Codec,
            config: RunConfig::default(),
            flags: IndexMap::new(),
            rng: SeededRng::new(5).state(),
            step: 3,
            vocab: "<unk>\n<eos>\n".into(),
            prompt_rows: 0,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let store = ParamStore::<f32>::new();
        let vb = VarBuilder::new(&store, 1);
        vb.normal("a.w", &[2, 3], 1.0).unwrap();
        vb.with_group(LrGroup::Backbone).constant("b", &[4], 0.5).unwrap().set_frozen(true);
        let mut moments = IndexMap::new();
        moments.insert("a.w".to_string(), Moments { m: vec![0.1; 6], v: vec![0.2; 6] });
        let ck = Checkpoint::capture(&store, &moments, trailer());
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.moments(), moments);
        assert!(back.trailer.flags["b"].frozen);
        assert_eq!(back.tensors["optim.m.a.w"].shape, vec![2, 3]);
    }

    #[test]
    fn corrupt_input_is_a_checkpoint_error() {
        let mut bad: &[u8] = b"NOTACKPT\x01\0\0\0";
        assert!(matches!(Checkpoint::read_from(&mut bad), Err(Error::Checkpoint(_))));
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/ck.bin")),
            Err(Error::Checkpoint(_))
        ));
    }
}

//! Checkpoint container: `STCK` magic, `u32` version, `u64` header length,
//! key-value header text, `u32` entry count, an index of
//! `(u16 name length, name, u64 offset, u64 length)` entries, then the STNT
//! blobs. Offsets are relative to the start of the blob area; integers are
//! little-endian.

use std::path::Path;

use stcl_core::optim::{ModelParams, Param};
use stcl_core::tensor::Tensor;
use stcl_core::train::TrainConfig;

use crate::config::{train_from_kv, train_to_kv};
use crate::error::{read_file, write_file, Error, Result};
use crate::kv::KvMap;
use crate::stnt::{self, Cursor};

pub const MAGIC: &[u8; 4] = b"STCK";
pub const VERSION: u32 = 1;

/// Generic container of a header and named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: KvMap,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let header = self.header.to_text().into_bytes();
        let blobs: Vec<Vec<u8>> = self.tensors.iter().map(|(_, t)| stnt::encode(t)).collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for ((name, _), blob) in self.tensors.iter().zip(&blobs) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            offset += blob.len() as u64;
        }
        for blob in blobs {
            out.extend_from_slice(&blob);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut c = Cursor::new(bytes);
        if c.take(4)? != MAGIC {
            return Err(String::from("bad magic, expected STCK"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {}", version));
        }
        let hlen = usize::try_from(c.u64()?).map_err(|_| String::from("header length overflows"))?;
        let text = std::str::from_utf8(c.take(hlen)?).map_err(|_| String::from("header is not UTF-8"))?;
        let header = KvMap::from_text(text)?;
        let n = c.u32()? as usize;
        let mut index = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = c.u16()? as usize;
            let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| String::from("entry name is not UTF-8"))?;
            index.push((name, c.u64()?, c.u64()?));
        }
        let base = c.position();
        let mut tensors = Vec::with_capacity(index.len());
        let mut expected = 0u64;
        for (name, off, len) in index {
            if off != expected {
                return Err(format!("entry {} at offset {}, expected {}", name, off, expected));
            }
            expected = off + len;
            let start = base + off as usize;
            let end = start
                .checked_add(len as usize)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| format!("entry {} runs past the end of the file", name))?;
            let t = stnt::decode(&bytes[start..end]).map_err(|e| format!("entry {}: {}", name, e))?;
            tensors.push((name, t));
        }
        if base + expected as usize != bytes.len() {
            return Err(String::from("trailing bytes after the last entry"));
        }
        Ok(Self { header, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Model, optimizer state and everything needed to resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Iterations completed.
    pub iteration: u64,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut header = KvMap::new();
        header.set("format", "stcl-checkpoint");
        header.set("iteration", self.iteration);
        header.set("adam.step", self.params.step);
        header.set("params", self.params.len());
        header.merge(&train_to_kv(&self.config));
        let mut tensors = Vec::with_capacity(3 * self.params.len());
        for p in &self.params.params {
            tensors.push((p.name.clone(), p.value.clone()));
        }
        for (p, m) in self.params.params.iter().zip(&self.params.m) {
            tensors.push((format!("adam.m.{}", p.name), m.clone()));
        }
        for (p, v) in self.params.params.iter().zip(&self.params.v) {
            tensors.push((format!("adam.v.{}", p.name), v.clone()));
        }
        Container { header, tensors }
    }

    pub fn from_container(c: &Container) -> std::result::Result<Self, String> {
        let mut h = c.header.clone();
        if h.get("format") != Some("stcl-checkpoint") {
            return Err(String::from("not a checkpoint"));
        }
        let num = |k: &str| -> std::result::Result<u64, String> {
            h.parse_required::<u64>(k).map_err(|e| e.to_string())
        };
        let iteration = num("iteration")?;
        let step = num("adam.step")?;
        let n = num("params")? as usize;
        let mut cfg_kv = KvMap::new();
        for (k, v) in h.iter() {
            if !matches!(k, "format" | "iteration" | "adam.step" | "params") {
                cfg_kv.set(k, v);
            }
        }
        h = cfg_kv;
        let mut config = TrainConfig::default();
        train_from_kv(&h, &mut config).map_err(|e| e.to_string())?;
        if c.tensors.len() != 3 * n {
            return Err(format!("{} tensors for {} parameters", c.tensors.len(), n));
        }
        let mut params = Vec::with_capacity(n);
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for (name, t) in &c.tensors[..n] {
            params.push(Param {
                name: name.clone(),
                value: t.clone(),
            });
            let moment = |kind: &str| {
                c.get(&format!("adam.{}.{}", kind, name))
                    .cloned()
                    .ok_or_else(|| format!("missing adam.{} for {}", kind, name))
            };
            m.push(moment("m")?);
            v.push(moment("v")?);
        }
        let params = ModelParams { params, m, v, step };
        params.validate().map_err(|e| e.to_string())?;
        Ok(Self {
            config,
            iteration,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_container().encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c = Container::decode(&read_file(path)?).map_err(|e| Error::format(path, e))?;
        Self::from_container(&c).map_err(|e| Error::format(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use stcl_core::model::{ModelConfig, SrModel};

    #[test]
    fn round_trip_is_exact() {
        let config = TrainConfig {
            model: ModelConfig {
                blocks: 1,
                width: 4,
                global_skip: true,
            },
            seed: 3,
            ..TrainConfig::default()
        };
        let mut params = SrModel::new(config.model).unwrap().init(3);
        params.step = 17;
        params.m[0].data_mut()[0] = 0.125;
        let ck = Checkpoint {
            config,
            iteration: 17,
            params,
        };
        let bytes = ck.to_container().encode();
        let back = Checkpoint::from_container(&Container::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_container().encode(), bytes);
    }

    #[test]
    fn damaged_container_rejected() {
        let c = Container {
            header: KvMap::from_text("format = x\n").unwrap(),
            tensors: vec![(String::from("a"), Tensor::zeros(&[2]))],
        };
        let b = c.encode();
        assert_eq!(Container::decode(&b).unwrap(), c);
        assert!(Container::decode(&b[..b.len() - 3]).is_err());
        let mut bad = b.clone();
        bad[3] = b'X';
        assert!(Container::decode(&bad).is_err());
    }
}

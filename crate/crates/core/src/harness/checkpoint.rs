//! Checkpoint container: a metadata block, a named-tensor index, then tensor records.
//!
//! Layout (little-endian):
//! `"LBDT"`, version u8, `0xFF`, u32 metadata length, metadata text,
//! u32 entry count, per entry (u32 name length, name, u64 offset, u64 length),
//! then the concatenated tensor records; offsets are relative to the first record.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::tensor::io::{self, MAGIC, VERSION};

pub const CONTAINER_MARKER: u8 = 0xFF;

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub best_mean_iou: f64,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub rng: ChaCha8Rng,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return Err(Error::Format(format!("odd hex length in {s:?}")));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| Error::Format(format!("bad hex {s:?}"))))
        .collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    fn metadata(&self) -> String {
        let mut s = self.config.to_text();
        s.push_str(&format!("ckpt.epoch = {}\n", self.epoch));
        s.push_str(&format!("ckpt.best_mean_iou = {:016x}\n", self.best_mean_iou.to_bits()));
        s.push_str(&format!("ckpt.adam_step = {}\n", self.adam.step));
        s.push_str(&format!("ckpt.rng_seed = {}\n", hex(&self.rng.get_seed())));
        s.push_str(&format!("ckpt.rng_stream = {}\n", self.rng.get_stream()));
        s.push_str(&format!("ckpt.rng_word_pos = {}\n", self.rng.get_word_pos()));
        s
    }

    fn tensors(&self) -> Vec<(String, &crate::tensor::Tensor<f32>)> {
        let mut out = Vec::new();
        for (prefix, store) in [("param", &self.params), ("adam_m", &self.adam.m), ("adam_v", &self.adam.v)] {
            for (name, t) in store.iter() {
                out.push((format!("{prefix}/{name}"), t));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.metadata();
        let entries = self.tensors();
        let records: Vec<Vec<u8>> = entries.iter().map(|(_, t)| io::encode(*t)).collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(CONTAINER_MARKER);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for ((name, _), rec) in entries.iter().zip(&records) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
            offset += rec.len() as u64;
        }
        for rec in records {
            out.extend_from_slice(&rec);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        if r.take(1)?[0] != CONTAINER_MARKER {
            return Err(Error::Format("not a checkpoint container".into()));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            index.push((name, r.u64()? as usize, r.u64()? as usize));
        }
        let data = &bytes[r.pos..];

        let mut config_text = String::new();
        let mut fields = BTreeMap::new();
        for line in meta.lines() {
            match line.strip_prefix("ckpt.") {
                Some(rest) => {
                    let (k, v) = rest
                        .split_once('=')
                        .ok_or_else(|| Error::Format(format!("bad metadata line {line:?}")))?;
                    fields.insert(k.trim().to_string(), v.trim().to_string());
                }
                None => {
                    config_text.push_str(line);
                    config_text.push('\n');
                }
            }
        }
        let field = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")))
        };
        let num = |k: &str| -> Result<u128> {
            field(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad {k}")))
        };
        let config = RunConfig::parse(&config_text)?;
        let seed: [u8; 32] = unhex(&field("rng_seed")?)?
            .try_into()
            .map_err(|_| Error::Format("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(num("rng_stream")? as u64);
        rng.set_word_pos(num("rng_word_pos")?);
        let best_bits = u64::from_str_radix(&field("best_mean_iou")?, 16)
            .map_err(|_| Error::Format("bad best_mean_iou".into()))?;

        let mut params = ParamStore::new();
        let mut adam = Adam::new(AdamConfig {
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
        });
        adam.step = num("adam_step")? as u64;
        for (name, off, len) in index {
            let rec = data
                .get(off..off + len)
                .ok_or_else(|| Error::Format(format!("record {name} out of range")))?;
            let (t, used) = io::decode::<f32>(rec)?;
            if used != len {
                return Err(Error::Format(format!("record {name} has trailing bytes")));
            }
            let (kind, key) = name
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("bad tensor name {name:?}")))?;
            match kind {
                "param" => params.insert(key, t),
                "adam_m" => adam.m.insert(key, t),
                "adam_v" => adam.v.insert(key, t),
                _ => return Err(Error::Format(format!("unknown tensor group {kind:?}"))),
            }
        }
        Ok(Self {
            config,
            epoch: num("epoch")? as usize,
            best_mean_iou: f64::from_bits(best_bits),
            params,
            adam,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-8, 7.0]).unwrap());
        params.insert("b", Tensor::new(&[1], vec![0.25]).unwrap());
        let mut adam = Adam::new(AdamConfig::default());
        adam.step = 7;
        adam.m.insert("a.w", Tensor::full(&[2, 3], 0.5));
        adam.v.insert("a.w", Tensor::full(&[2, 3], 0.125));
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        rng.set_stream(3);
        rng.next_u64();
        Checkpoint {
            config: RunConfig::default(),
            epoch: 4,
            best_mean_iou: 0.123456789,
            params,
            adam,
            rng,
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_continues_identically() {
        let c = sample();
        let mut back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        let mut orig = c.rng.clone();
        assert_eq!(back.rng.next_u64(), orig.next_u64());
    }

    #[test]
    fn corrupt_containers_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[5] = 0;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(b"LB").is_err());
    }
}

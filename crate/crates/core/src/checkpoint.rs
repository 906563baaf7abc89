//! Binary checkpoint format.
//!
//! Layout (little-endian throughout):
//! magic `MMHC` | version u32 | config text (u32 len + bytes) | config hash
//! u64 | step u64 | rng seed [32] + word_pos u128 + stream u64 | param count
//! u32 | per param: name (u16 len + bytes), dtype u8, rank u8, dims u32 each,
//! raw values. Save -> load -> save is byte-identical.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{fnv1a, RunConfig};
use crate::tensor::{DType, Element, Tensor};

const MAGIC: &[u8; 4] = b"MMHC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint: bad magic (not a checkpoint file)")]
    BadMagic,
    #[error("checkpoint: unsupported version {0}")]
    BadVersion(u32),
    #[error("checkpoint: corrupt field: {0}")]
    Corrupt(&'static str),
    #[error("checkpoint: config hash mismatch (stored {stored:#x}, expected {expected:#x}); pass force to override")]
    ConfigMismatch { stored: u64, expected: u64 },
    #[error("checkpoint: parameter `{0}` missing or shaped differently in the target store")]
    ParamMismatch(String),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type CheckpointResult<T> = Result<T, CheckpointError>;

/// Captured RNG state (ChaCha8: seed + word position + stream).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct SavedParam {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Values widened to f64; f32 payloads round-trip losslessly.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub config: RunConfig,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<SavedParam>,
}

impl Checkpoint {
    pub fn capture<T: Element>(
        config: &RunConfig,
        store: &crate::autodiff::ParamStore<T>,
        step: u64,
        rng: &ChaCha8Rng,
    ) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| SavedParam {
                name: p.name.clone(),
                dtype: T::DTYPE,
                shape: p.value.shape().to_vec(),
                values: p.value.data().iter().map(|v| v.to_f64()).collect(),
            })
            .collect();
        Checkpoint {
            config_text: config.to_text(),
            config: config.clone(),
            step,
            rng: RngState::capture(rng),
            params,
        }
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a(self.config_text.as_bytes())
    }

    /// Copies saved values into a freshly built store; every parameter must
    /// exist with the same shape.
    pub fn apply_to<T: Element>(&self, store: &mut crate::autodiff::ParamStore<T>) -> CheckpointResult<()> {
        for p in &self.params {
            let id = store
                .id_of(&p.name)
                .ok_or_else(|| CheckpointError::ParamMismatch(p.name.clone()))?;
            if store.value(id).shape() != &p.shape[..] {
                return Err(CheckpointError::ParamMismatch(p.name.clone()));
            }
            let t = Tensor::new(p.shape.clone(), p.values.iter().map(|&v| T::from_f64(v)).collect())
                .map_err(|_| CheckpointError::ParamMismatch(p.name.clone()))?;
            *store.value_mut(id) = t;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> CheckpointResult<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let cfg_bytes = self.config_text.as_bytes();
        buf.extend_from_slice(&(cfg_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg_bytes);
        buf.extend_from_slice(&self.config_hash().to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.rng.seed);
        buf.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        buf.extend_from_slice(&self.rng.stream.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(p.dtype.tag());
            buf.push(p.shape.len() as u8);
            for &d in &p.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match p.dtype {
                DType::F32 => {
                    for &v in &p.values {
                        buf.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                DType::F64 => {
                    for &v in &p.values {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> CheckpointResult<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { buf: &bytes, pos: 0 };
        if r.take(4)? != &MAGIC[..] {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let cfg_len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("config text"))?;
        let stored_hash = r.u64()?;
        if stored_hash != fnv1a(config_text.as_bytes()) {
            return Err(CheckpointError::Corrupt("config hash"));
        }
        let config = RunConfig::from_text(&config_text)?;
        let step = r.u64()?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let word_pos = u128::from_le_bytes(
            r.take(16)?
                .try_into()
                .map_err(|_| CheckpointError::Corrupt("rng word_pos"))?,
        );
        let stream = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("param name"))?;
            let dtype = DType::from_tag(r.u8()?).ok_or(CheckpointError::Corrupt("dtype"))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            match dtype {
                DType::F32 => {
                    for _ in 0..n {
                        values.push(f32::from_le_bytes(
                            r.take(4)?.try_into().map_err(|_| CheckpointError::Corrupt("values"))?,
                        ) as f64);
                    }
                }
                DType::F64 => {
                    for _ in 0..n {
                        values.push(f64::from_le_bytes(
                            r.take(8)?.try_into().map_err(|_| CheckpointError::Corrupt("values"))?,
                        ));
                    }
                }
            }
            params.push(SavedParam {
                name,
                dtype,
                shape,
                values,
            });
        }
        Ok(Checkpoint {
            config_text,
            config,
            step,
            rng: RngState {
                seed,
                word_pos,
                stream,
            },
            params,
        })
    }

    /// Errors when the stored config differs from `expected`, unless forced.
    pub fn check_config(&self, expected: &RunConfig, force: bool) -> CheckpointResult<()> {
        let expected_hash = fnv1a(expected.to_text().as_bytes());
        if self.config_hash() != expected_hash && !force {
            return Err(CheckpointError::ConfigMismatch {
                stored: self.config_hash(),
                expected: expected_hash,
            });
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CheckpointResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> CheckpointResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> CheckpointResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> CheckpointResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> CheckpointResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;

    fn tmp(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!(
            "heatnet-ckpt-{tag}-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ))
    }

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add_param("a.w", Tensor::from_fn(&[2, 3], |i| (i as f32) * 0.25 - 0.3), true);
        s.add_param("a.b", Tensor::from_fn(&[3], |i| (i as f32).sin()), true);
        s.add_param("bn.rm", Tensor::zeros(&[3]), false);
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tmp("roundtrip");
        let store = sample_store();
        let cfg = RunConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        let _: f64 = rng.random(); // advance the stream
        let ck = Checkpoint::capture(&cfg, &store, 17, &rng);
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.rng, ck.rng);
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn restored_rng_continues_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let _: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let state = RngState::capture(&rng);
        let mut restored = state.restore();
        let a: f64 = rng.random();
        let b: f64 = restored.random();
        assert_eq!(a, b);
    }

    #[test]
    fn apply_restores_values() {
        let dir = tmp("apply");
        let store = sample_store();
        let cfg = RunConfig::desk();
        let rng = ChaCha8Rng::seed_from_u64(1);
        let ck = Checkpoint::capture(&cfg, &store, 0, &rng);
        let path = dir.join("x.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let mut fresh = sample_store();
        for (_, p) in fresh.clone().iter() {
            let _ = p;
        }
        // wipe values, then restore
        let ids: Vec<_> = fresh.iter().map(|(id, _)| id).collect();
        for id in ids {
            let z = Tensor::zeros(fresh.value(id).shape());
            *fresh.value_mut(id) = z;
        }
        loaded.apply_to(&mut fresh).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(fresh.iter()) {
            assert_eq!(a.value, b.value);
        }
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn config_mismatch_rejected_unless_forced() {
        let store = sample_store();
        let cfg = RunConfig::desk();
        let rng = ChaCha8Rng::seed_from_u64(1);
        let ck = Checkpoint::capture(&cfg, &store, 0, &rng);
        let mut other = RunConfig::desk();
        other.seed = 999;
        assert!(ck.check_config(&other, false).is_err());
        assert!(ck.check_config(&other, true).is_ok());
        assert!(ck.check_config(&cfg, false).is_ok());
    }

    #[test]
    fn rejects_non_checkpoint_file() {
        let dir = tmp("badmagic");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::BadMagic)));
        fs::remove_dir_all(dir).ok();
    }
}

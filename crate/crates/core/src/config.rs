//! Run configuration: plain `key=value` text with CLI overrides.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::fusion::FusionMode;
use crate::head::LossMode;
use crate::model::ModelSpec;
use crate::tensor::DType;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: unknown key `{0}`")]
    UnknownKey(String),
    #[error("config: bad value for `{key}`: `{value}`")]
    BadValue { key: String, value: String },
    #[error("config: malformed line `{0}` (expected key=value)")]
    BadLine(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training/evaluation configuration. Serialization is canonical (fixed key
/// order), so identical configs produce identical text and hashes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub frames: usize,
    pub resolution: usize,
    pub stage_depths: Vec<usize>,
    pub base_channels: usize,
    pub fve_dim: usize,
    pub num_classes: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossMode,
    pub fusion: FusionMode,
    pub precision: DType,
    /// Worker threads for kernels and data loading; 0 picks min(4, cores).
    pub threads: usize,
    pub residual: bool,
    pub msf_per_channel: bool,
    /// Stop once train top-1 stays at or above this for two consecutive
    /// epochs; 0 disables early stopping.
    pub early_stop_train_top1: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// Desk-scale defaults: 64x64 inputs, 4 frames, 5 blocks.
    pub fn desk() -> Self {
        RunConfig {
            frames: 4,
            resolution: 64,
            stage_depths: vec![1, 1, 2, 1],
            base_channels: 32,
            fve_dim: 32,
            num_classes: 4,
            lr: 0.001,
            weight_decay: 0.0001,
            epochs: 30,
            batch_size: 8,
            seed: 42,
            loss: LossMode::CrossEntropy,
            fusion: FusionMode::Route,
            precision: DType::F32,
            threads: 0,
            residual: true,
            msf_per_channel: false,
            early_stop_train_top1: 0.0,
        }
    }

    /// Full-size settings: 8 frames at 224x224 through 24 blocks.
    pub fn paper() -> Self {
        RunConfig {
            frames: 8,
            resolution: 224,
            stage_depths: vec![2, 2, 18, 2],
            base_channels: 128,
            fve_dim: 128,
            num_classes: 300,
            ..RunConfig::desk()
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            in_channels: 3,
            base_channels: self.base_channels,
            stage_depths: self.stage_depths.clone(),
            fve_dim: self.fve_dim,
            resolution: self.resolution,
            frames: self.frames,
            num_classes: self.num_classes,
            residual: self.residual,
            msf_per_channel: self.msf_per_channel,
        }
    }

    pub fn effective_threads(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
                .min(4)
        }
    }

    /// Canonical text form; also the checkpoint config snapshot.
    pub fn to_text(&self) -> String {
        let depths: Vec<String> = self.stage_depths.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "resolution={}", self.resolution);
        let _ = writeln!(s, "stage_depths={}", depths.join(","));
        let _ = writeln!(s, "base_channels={}", self.base_channels);
        let _ = writeln!(s, "fve_dim={}", self.fve_dim);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "loss={}", self.loss.name());
        let _ = writeln!(s, "fusion={}", self.fusion.name());
        let _ = writeln!(s, "precision={}", self.precision.name());
        let _ = writeln!(s, "threads={}", self.threads);
        let _ = writeln!(s, "residual={}", self.residual);
        let _ = writeln!(s, "msf_per_channel={}", self.msf_per_channel);
        let _ = writeln!(s, "early_stop_train_top1={}", self.early_stop_train_top1);
        s
    }

    /// FNV-1a over the canonical text.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        match key {
            "frames" => self.frames = value.parse().map_err(|_| bad())?,
            "resolution" => self.resolution = value.parse().map_err(|_| bad())?,
            "stage_depths" => {
                self.stage_depths = value
                    .split(',')
                    .map(|v| v.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad())?;
            }
            "base_channels" => self.base_channels = value.parse().map_err(|_| bad())?,
            "fve_dim" => self.fve_dim = value.parse().map_err(|_| bad())?,
            "num_classes" => self.num_classes = value.parse().map_err(|_| bad())?,
            "lr" => self.lr = value.parse().map_err(|_| bad())?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad())?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad())?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "loss" => self.loss = LossMode::parse(value).ok_or_else(bad)?,
            "fusion" => self.fusion = FusionMode::parse(value).ok_or_else(bad)?,
            "precision" => {
                self.precision = match value {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(bad()),
                }
            }
            "threads" => self.threads = value.parse().map_err(|_| bad())?,
            "residual" => self.residual = value.parse().map_err(|_| bad())?,
            "msf_per_channel" => self.msf_per_channel = value.parse().map_err(|_| bad())?,
            "early_stop_train_top1" => self.early_stop_train_top1 = value.parse().map_err(|_| bad())?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::desk();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::BadLine(line.to_string()))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("frames", self.frames),
            ("resolution", self.resolution),
            ("base_channels", self.base_channels),
            ("fve_dim", self.fve_dim),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(ConfigError::BadValue {
                    key: k.into(),
                    value: "0".into(),
                });
            }
        }
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(ConfigError::BadValue {
                key: "lr/weight_decay".into(),
                value: format!("{}/{}", self.lr, self.weight_decay),
            });
        }
        Ok(())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::desk();
        cfg.lr = 0.003;
        cfg.fusion = FusionMode::Mdf;
        cfg.stage_depths = vec![2, 1];
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::desk();
        let mut b = RunConfig::desk();
        assert_eq!(a.hash(), b.hash());
        b.seed = 7;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_unknown_key_and_bad_value() {
        let mut cfg = RunConfig::desk();
        assert!(cfg.set("nonsense", "1").is_err());
        assert!(cfg.set("lr", "fast").is_err());
    }

    #[test]
    fn paper_settings() {
        let p = RunConfig::paper();
        assert_eq!(p.stage_depths.iter().sum::<usize>(), 24);
        assert_eq!(p.frames, 8);
        assert_eq!(p.lr, 0.001);
        assert_eq!(p.weight_decay, 0.0001);
        assert_eq!(p.epochs, 30);
    }
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::calibrate::{CalibOptions, LnMode};
use crate::alloc::{AllocMode, AllocOptions};
use crate::error::{Error, Result};
use crate::lrp::Target;
use crate::quant::Scheme;
use crate::vit::{OutlierOptions, TrainOptions, ViTConfig};

/// Sizes of the three generated splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub calib_per_class: usize,
    pub eval_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_per_class: 100,
            calib_per_class: 100,
            eval_per_class: 200,
        }
    }
}

/// Everything a run depends on. Missing fields in a config file take their
/// defaults; unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub vit: ViTConfig,
    pub outliers: OutlierOptions,
    pub train: TrainOptions,
    pub data: DataConfig,
    pub base_bits: u32,
    pub mode: AllocMode,
    pub boosted_blocks: usize,
    pub demotion: u32,
    pub n_sigma: f64,
    pub percentile: f64,
    pub calib_size: usize,
    pub ln_mode: LnMode,
    pub attn_scheme: Scheme,
    pub importance_samples: usize,
    pub importance_target: Target,
    /// Master seed. Splits use `seed`, `seed + 1`, `seed + 2`
    /// (train, calib, eval); initialization, shuffling, calibration sampling
    /// and importance sampling use `seed` directly.
    pub seed: u64,
    /// Run directory. Not part of the config hash.
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            vit: ViTConfig::default(),
            outliers: OutlierOptions {
                channels: 4,
                gain: 16.0,
                shift: 64.0,
            },
            train: TrainOptions::default(),
            data: DataConfig::default(),
            base_bits: 4,
            mode: AllocMode::Greedy,
            boosted_blocks: 2,
            demotion: 1,
            n_sigma: 2.0,
            percentile: 99.99,
            calib_size: 32,
            ln_mode: LnMode::Clipped,
            attn_scheme: Scheme::LogSqrt2,
            importance_samples: 256,
            importance_target: Target::GroundTruth,
            seed: 0,
            out: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=32).contains(&self.base_bits) {
            return bad(format!("base_bits {} outside [2, 32]", self.base_bits));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return bad(format!("percentile {} outside (0, 100]", self.percentile));
        }
        if !(self.n_sigma > 0.0) {
            return bad(format!("n_sigma {} must be positive", self.n_sigma));
        }
        if self.calib_size == 0 || self.importance_samples == 0 {
            return bad("calib_size and importance_samples must be positive".into());
        }
        if self.data.train_per_class == 0
            || self.data.calib_per_class == 0
            || self.data.eval_per_class == 0
        {
            return bad("every split needs at least one image per class".into());
        }
        if self.calib_size > self.data.calib_per_class * self.vit.classes {
            return bad(format!(
                "calib_size {} exceeds the calibration split",
                self.calib_size
            ));
        }
        if self.importance_samples > self.data.train_per_class * self.vit.classes {
            return bad(format!(
                "importance_samples {} exceeds the training split",
                self.importance_samples
            ));
        }
        if !(self.train.lr > 0.0) || self.train.batch_size == 0 {
            return bad("training needs lr > 0 and batch_size > 0".into());
        }
        if self.attn_scheme == Scheme::Uniform {
            return bad("attention maps need a logarithmic scheme".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = super::io::read_text(path)?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON with `out` cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let digest = Sha256::digest(serde_json::to_vec(&c).expect("config serializes"));
        let mut s = String::with_capacity(64);
        for b in digest.iter() {
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn alloc_options(&self) -> AllocOptions {
        AllocOptions {
            base_bits: self.base_bits,
            mode: self.mode,
            boosted_blocks: self.boosted_blocks,
            demotion: self.demotion,
            ..AllocOptions::default()
        }
    }

    pub fn calib_options(&self) -> CalibOptions {
        CalibOptions {
            percentile: self.percentile,
            ln_mode: self.ln_mode,
            n_sigma: self.n_sigma,
            attn_scheme: self.attn_scheme,
            seed: self.seed,
        }
    }

    pub fn run_dir(&self) -> RunDir {
        RunDir(self.out.clone())
    }
}

/// Artifact locations inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn root(&self) -> &Path {
        &self.0
    }

    pub fn dataset(&self, split: super::Split) -> PathBuf {
        self.0
            .join("data")
            .join(format!("{}.manifest", split.name()))
    }

    pub fn params(&self) -> PathBuf {
        self.0.join("model").join("params.manifest")
    }

    /// Quantized-model directory for a stage (`calib` or `quant`).
    pub fn quant_params(&self, stage: &str) -> PathBuf {
        self.0.join(stage).join("params.manifest")
    }

    pub fn quant_model(&self, stage: &str) -> PathBuf {
        self.0.join(stage).join("qmodel.json")
    }

    pub fn train_log(&self) -> PathBuf {
        self.0.join("model").join("train_log.json")
    }

    pub fn importance(&self) -> PathBuf {
        self.0.join("importance.tsv")
    }

    pub fn allocation(&self) -> PathBuf {
        self.0.join("allocation.tsv")
    }

    pub fn eval(&self) -> PathBuf {
        self.0.join("eval.json")
    }

    pub fn report(&self, ext: &str) -> PathBuf {
        self.0.join(format!("report.{ext}"))
    }

    pub fn ablation(&self, ext: &str) -> PathBuf {
        self.0.join("ablation").join(format!("report.{ext}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_partial_files() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig =
            serde_json::from_str(r#"{"base_bits": 6, "mode": "per-block"}"#).unwrap();
        assert_eq!(partial.base_bits, 6);
        assert_eq!(partial.mode, AllocMode::PerBlock);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn hash_ignores_out_dir() {
        let a = RunConfig::default();
        let b = RunConfig {
            out: "elsewhere".into(),
            ..a.clone()
        };
        let c = RunConfig {
            seed: 1,
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn validation_catches_bad_ranges() {
        for bad in [
            RunConfig {
                percentile: 0.0,
                ..RunConfig::default()
            },
            RunConfig {
                n_sigma: -1.0,
                ..RunConfig::default()
            },
            RunConfig {
                calib_size: 0,
                ..RunConfig::default()
            },
            RunConfig {
                base_bits: 1,
                ..RunConfig::default()
            },
            RunConfig {
                attn_scheme: Scheme::Uniform,
                ..RunConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}

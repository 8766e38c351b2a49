use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{build_dataset, synth_dataset_with, Dataset, DatasetManifest, SynthSpec};
use crate::crossbar::{Chip, DeviceModel, PeripheryModel};
use crate::error::{Error, Result};
use crate::quant::{QuantMap, QuantSpec};
use crate::rng::derive_seed;
use crate::ssm::ModelConfig;
use crate::train::{RangeChoice, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

/// A fixed range written as a number, or the string `"dynamic"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RangeSetting {
    Value(f64),
    Mode(RangeMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeMode {
    Dynamic,
}

impl RangeSetting {
    pub fn choice(&self) -> Result<RangeChoice> {
        match *self {
            RangeSetting::Value(f) if f.is_finite() && f > 0.0 => Ok(RangeChoice::Fixed(f)),
            RangeSetting::Value(f) => Err(Error::InvalidConfig(format!("f_scale must be positive, got {f}"))),
            RangeSetting::Mode(RangeMode::Dynamic) => Ok(RangeChoice::Dynamic),
        }
    }
}

impl fmt::Display for RangeSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RangeSetting::Value(v) => write!(f, "{v}"),
            RangeSetting::Mode(RangeMode::Dynamic) => f.write_str("dynamic"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub ssm_learning_rate: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub cosine_decay: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.learning_rate,
            ssm_learning_rate: t.ssm_learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            cosine_decay: t.cosine_decay,
        }
    }
}

/// Quantization of the trained model. `bits = 0` trains without kernel
/// quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub bits: u32,
    pub f_scale: RangeSetting,
    /// Bits of the digital encoder, mixer and decoder; 0 leaves them unquantized.
    pub dense_bits: u32,
}

impl Default for QuantSection {
    fn default() -> Self {
        QuantSection {
            bits: 2,
            f_scale: RangeSetting::Value(1.0),
            dense_bits: 8,
        }
    }
}

impl QuantSection {
    pub fn quant_map(&self) -> Result<QuantMap> {
        let mut q = if self.bits == 0 {
            QuantMap::off()
        } else {
            self.f_scale.choice()?.quant_map(self.bits)
        };
        let dense = if self.dense_bits == 0 {
            QuantSpec::off()
        } else {
            QuantSpec::dynamic(self.dense_bits)
        };
        q.encoder = dense;
        q.mixer = dense;
        q.decoder = dense;
        q.validate()?;
        Ok(q)
    }

    /// The same section at another bit width.
    pub fn with_bits(&self, bits: u32) -> Self {
        QuantSection { bits, ..self.clone() }
    }
}

/// Where the data comes from. A prepared dataset file wins over a manifest;
/// with neither, a synthetic dataset is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dataset: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub synth_per_class: usize,
    pub synth: SynthSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset: None,
            manifest: None,
            synth_per_class: 200,
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub bits: Vec<u32>,
    pub f_scales: Vec<RangeSetting>,
    /// Bit widths compared in the noise study.
    pub noise_bits: Vec<u32>,
    /// Write-noise levels, µS.
    pub sigmas: Vec<f64>,
    pub instances: usize,
    pub ci_instances: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            bits: vec![2, 3, 4, 5, 8],
            f_scales: vec![
                RangeSetting::Value(1.0),
                RangeSetting::Value(3.0),
                RangeSetting::Value(10.0),
                RangeSetting::Mode(RangeMode::Dynamic),
            ],
            noise_bits: vec![2, 5],
            sigmas: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            instances: 100,
            ci_instances: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub train: u64,
    pub device: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 7,
            init: 1,
            train: 3,
            device: 11,
        }
    }
}

impl Seeds {
    /// Every stream derived from one base seed.
    pub fn from_base(base: u64) -> Seeds {
        Seeds {
            data: derive_seed(base, &[1]),
            init: derive_seed(base, &[2]),
            train: derive_seed(base, &[3]),
            device: derive_seed(base, &[4]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub quant: QuantSection,
    #[serde(default)]
    pub device: DeviceModel,
    #[serde(default)]
    pub periphery: PeripheryModel,
    #[serde(default)]
    pub chip: Chip,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            output_dir: None,
            seeds: Seeds::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            quant: QuantSection::default(),
            device: DeviceModel::default(),
            periphery: PeripheryModel::default(),
            chip: Chip::default(),
            data: DataSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = ExperimentConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.dataset, &mut cfg.data.manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.train_config(&self.quant)?.validate()?;
        self.device.validate()?;
        self.periphery.validate()?;
        if self.chip.arrays == 0 {
            return Err(Error::InvalidConfig("chip needs at least one array".into()));
        }
        if self.data.synth_per_class == 0 {
            return Err(Error::InvalidConfig("synth_per_class must be at least 1".into()));
        }
        let s = &self.sweep;
        if s.bits.is_empty() || s.f_scales.is_empty() || s.noise_bits.is_empty() || s.sigmas.is_empty() {
            return Err(Error::InvalidConfig("sweep axes must be non-empty".into()));
        }
        for r in &s.f_scales {
            r.choice()?;
        }
        if let Some(bad) = s.sigmas.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {bad}")));
        }
        for &b in s.bits.iter().chain(&s.noise_bits) {
            QuantSpec::fixed(b, 1.0).validate()?;
        }
        if s.instances == 0 || s.ci_instances == 0 {
            return Err(Error::InvalidConfig("instance counts must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialized form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Reduced instance counts for continuous integration.
    pub fn ci_profile(mut self) -> Self {
        self.sweep.instances = self.sweep.ci_instances;
        self
    }

    pub fn train_config(&self, quant: &QuantSection) -> Result<TrainConfig> {
        Ok(TrainConfig {
            learning_rate: self.train.learning_rate,
            ssm_learning_rate: self.train.ssm_learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seeds.train,
            cosine_decay: self.train.cosine_decay,
            quant: quant.quant_map()?,
            ..TrainConfig::default()
        })
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        if let Some(path) = &self.data.dataset {
            return Dataset::load(path);
        }
        if let Some(path) = &self.data.manifest {
            return build_dataset(&DatasetManifest::from_csv(path)?, self.seeds.data);
        }
        synth_dataset_with(&self.data.synth, self.data.synth_per_class, self.seeds.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("version = 1\n").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn version_is_required() {
        assert!(matches!(ExperimentConfig::from_toml(""), Err(Error::Toml(_))));
        assert!(matches!(
            ExperimentConfig::from_toml("version = 2\n"),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "version = 1\nbogus = 3\n",
            "version = 1\n[train]\nlr = 0.1\n",
            "version = 1\n[device]\nsigma = 5.0\n",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn round_trip_and_hash() {
        let text = r#"
version = 1
[quant]
bits = 5
f_scale = "dynamic"
[sweep]
f_scales = [1, 3.0, "dynamic"]
sigmas = [0, 7.5]
[seeds]
device = 99
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.quant.f_scale.choice().unwrap(), RangeChoice::Dynamic);
        assert_eq!(cfg.sweep.f_scales.len(), 3);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash().unwrap(), again.hash().unwrap());
        assert_ne!(cfg.hash().unwrap(), ExperimentConfig::default().hash().unwrap());
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "version = 1\n[quant]\nf_scale = -1.0\n",
            "version = 1\n[sweep]\nsigmas = [-1.0]\n",
            "version = 1\n[train]\nlearning_rate = 0.0\n",
            "version = 1\n[model]\nh = 0\n",
        ] {
            let e = ExperimentConfig::from_toml(text).unwrap_err();
            assert_eq!(e.class(), crate::error::ErrorClass::Config, "{text}: {e}");
        }
    }
}

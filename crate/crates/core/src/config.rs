//! Run configuration: a TOML file with sections per subsystem, overridden
//! by CLI flags, validated before any work, and snapshotted verbatim into
//! the output directory so a run can be reproduced from the snapshot alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversarial::{AdvOpts, GpSign};
use crate::model::HyperParams;
use crate::train::TrainOptions;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory.
    pub dir: Option<PathBuf>,
    /// Modality subset to use (structural is always active). Omitted means
    /// every declared modality.
    pub modalities: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_e: usize,
    pub d_r: usize,
    pub gamma: f64,
    pub beta: f64,
    pub relation_guidance: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let hp = HyperParams::default();
        Self { d_e: hp.d_e, d_r: hp.d_r, gamma: hp.gamma, beta: hp.beta, relation_guidance: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub k_negatives: usize,
    pub lr_d: f64,
    pub lr_g: f64,
    /// Checkpoint every N epochs (0 = final checkpoint only).
    pub save_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let hp = HyperParams::default();
        Self {
            batch_size: hp.batch_size,
            epochs: hp.epochs,
            k_negatives: hp.k_negatives,
            lr_d: hp.lr_d,
            lr_g: hp.lr_g,
            save_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialSection {
    pub comat: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub noise_dim: usize,
    pub n_critic: usize,
    pub vanilla_gan: bool,
    pub mlp_discriminator: bool,
    pub gradient_penalty: bool,
    pub gp_sign: GpSign,
}

impl Default for AdversarialSection {
    fn default() -> Self {
        let hp = HyperParams::default();
        Self {
            comat: true,
            lambda1: hp.lambda1,
            lambda2: hp.lambda2,
            noise_dim: hp.noise_dim,
            n_critic: hp.n_critic,
            vanilla_gan: false,
            mlp_discriminator: false,
            gradient_penalty: true,
            gp_sign: GpSign::Paper,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Evaluation worker count; training stays single-threaded.
    pub threads: usize,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub adversarial: AdversarialSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            threads: 1,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            adversarial: AdversarialSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// CLI-level overrides; every field is optional and wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub modalities: Option<Vec<String>>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub save_every: Option<usize>,
    pub no_comat: bool,
    pub no_relation_guidance: bool,
    pub no_gp: bool,
    pub vanilla_gan: bool,
    pub mlp_discriminator: bool,
    pub gp_sign: Option<GpSign>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(v) = ov.seed {
            self.seed = v;
        }
        if let Some(v) = ov.threads {
            self.threads = v;
        }
        if let Some(v) = &ov.data_dir {
            self.data.dir = Some(v.clone());
        }
        if let Some(v) = &ov.out_dir {
            self.output.dir = Some(v.clone());
        }
        if let Some(v) = &ov.modalities {
            self.data.modalities = Some(v.clone());
        }
        if let Some(v) = ov.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = ov.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = ov.save_every {
            self.train.save_every = v;
        }
        if ov.no_comat {
            self.adversarial.comat = false;
        }
        if ov.no_relation_guidance {
            self.model.relation_guidance = false;
        }
        if ov.no_gp {
            self.adversarial.gradient_penalty = false;
        }
        if ov.vanilla_gan {
            self.adversarial.vanilla_gan = true;
        }
        if ov.mlp_discriminator {
            self.adversarial.mlp_discriminator = true;
        }
        if let Some(v) = ov.gp_sign {
            self.adversarial.gp_sign = v;
        }
    }

    pub fn hyperparams(&self) -> HyperParams {
        HyperParams {
            d_e: self.model.d_e,
            d_r: self.model.d_r,
            gamma: self.model.gamma,
            beta: self.model.beta,
            k_negatives: self.train.k_negatives,
            lambda1: self.adversarial.lambda1,
            lambda2: self.adversarial.lambda2,
            noise_dim: self.adversarial.noise_dim,
            lr_d: self.train.lr_d,
            lr_g: self.train.lr_g,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            n_critic: self.adversarial.n_critic,
        }
    }

    pub fn adv_opts(&self) -> AdvOpts {
        AdvOpts {
            comat: self.adversarial.comat,
            vanilla_gan: self.adversarial.vanilla_gan,
            mlp_discriminator: self.adversarial.mlp_discriminator,
            gradient_penalty: self.adversarial.gradient_penalty,
            gp_sign: self.adversarial.gp_sign,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            hp: self.hyperparams(),
            adv: self.adv_opts(),
            seed: self.seed,
            relation_guidance: self.model.relation_guidance,
            save_every: self.train.save_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyperparams().validate().map_err(ConfigError::Invalid)?;
        if self.threads == 0 {
            return Err(ConfigError::Invalid("threads must be positive".into()));
        }
        if let Some(mods) = &self.data.modalities {
            for m in mods {
                if m.is_empty() {
                    return Err(ConfigError::Invalid("empty modality name".into()));
                }
            }
        }
        Ok(())
    }

    /// Serialized snapshot of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_hyperparams() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.hyperparams(), HyperParams::default());
        assert_eq!(cfg.seed, 7);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn toml_round_trip_preserves_everything() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        cfg.threads = 4;
        cfg.model.d_e = 64;
        cfg.model.d_r = 32;
        cfg.adversarial.gp_sign = GpSign::Standard;
        cfg.data.modalities = Some(vec!["S".into(), "txt".into()]);
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[model]\nd_e = 16\nunknown_knob = 3\n")
            .map(|_| ())
            .unwrap_err();
        assert!(err.to_string().contains("unknown_knob"));
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut cfg: RunConfig =
            toml::from_str("seed = 1\n[train]\nepochs = 50\n[adversarial]\ncomat = true\n")
                .unwrap();
        cfg.apply(&Overrides {
            seed: Some(9),
            epochs: Some(5),
            no_comat: true,
            gp_sign: Some(GpSign::Standard),
            ..Overrides::default()
        });
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 5);
        assert!(!cfg.adversarial.comat);
        assert_eq!(cfg.adversarial.gp_sign, GpSign::Standard);
    }

    #[test]
    fn validation_rejects_odd_dimensions() {
        let mut cfg = RunConfig::default();
        cfg.model.d_e = 15;
        assert!(cfg.validate().is_err());
        cfg.model.d_e = 16;
        cfg.model.d_r = 7;
        assert!(cfg.validate().is_err());
        cfg.model.d_r = 8;
        cfg.threads = 1;
        assert!(cfg.validate().is_ok());
    }
}

//! Run configuration stored as TOML with one section per subsystem.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Command-line flags are applied on top of the parsed file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationSpec, Method};
use crate::encoder::{EncoderConfig, DEFAULT_HASH_DIM};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::loss::{LossConfig, LossKind};
use crate::optim::AdamConfig;
use crate::train::TrainConfig;

pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub augment: AugmentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            augment: AugmentSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub corpus: PathBuf,
    pub hash_dim: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus.jsonl"),
            hash_dim: DEFAULT_HASH_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Widths after the input layer; the last one is the embedding size.
    pub hidden: Vec<usize>,
    pub normalize_output: bool,
    pub shared_towers: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128],
            normalize_output: false,
            shared_towers: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub aug_copies: usize,
    pub epochs: usize,
    pub aug_enabled: bool,
    pub eval_every: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            aug_copies: t.aug_copies,
            epochs: t.epochs,
            aug_enabled: t.aug_enabled,
            eval_every: t.eval_every,
            lr: t.optimizer.lr,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            eps: t.optimizer.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossKind,
    pub margin: f64,
    pub temperature: f64,
    pub printed_signs: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            kind: l.kind,
            margin: l.margin,
            temperature: l.temperature,
            printed_signs: l.printed_signs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub menu: Vec<Method>,
    pub interp_lambda: [f64; 2],
    pub extrap_lambda: [f64; 2],
    pub mixed_lambda: [f64; 2],
    pub drop_prob: f64,
    pub bernoulli_prob: f64,
    pub sigma: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let spec = |m| AugmentationSpec::for_method(m);
        let range = |m| {
            let s = spec(m);
            [s.lambda_low, s.lambda_high]
        };
        let base = spec(Method::MixedInterpExtrap);
        Self {
            menu: Method::TRAINING_MENU.to_vec(),
            interp_lambda: range(Method::LinearInterp),
            extrap_lambda: range(Method::LinearExtrap),
            mixed_lambda: range(Method::MixedInterpExtrap),
            drop_prob: base.drop_prob,
            bernoulli_prob: base.bernoulli_prob,
            sigma: base.sigma,
        }
    }
}

impl AugmentSection {
    pub fn spec(&self, method: Method) -> AugmentationSpec {
        let [lambda_low, lambda_high] = match method {
            Method::LinearInterp => self.interp_lambda,
            Method::LinearExtrap => self.extrap_lambda,
            _ => self.mixed_lambda,
        };
        AugmentationSpec {
            method,
            lambda_low,
            lambda_high,
            drop_prob: self.drop_prob,
            bernoulli_prob: self.bernoulli_prob,
            sigma: self.sigma,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Writes the resolved configuration into the output directory.
    pub fn save_resolved(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let path = self.out_dir.join(RESOLVED_CONFIG_FILE);
        atomic_write(&path, self.to_toml().as_bytes())?;
        Ok(path)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let mut layer_sizes = vec![self.data.hash_dim];
        layer_sizes.extend(&self.model.hidden);
        EncoderConfig {
            layer_sizes,
            normalize_output: self.model.normalize_output,
            shared_towers: self.model.shared_towers,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.loss.kind,
            margin: self.loss.margin,
            temperature: self.loss.temperature,
            printed_signs: self.loss.printed_signs,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            aug_copies: t.aug_copies,
            epochs: t.epochs,
            optimizer: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            seed: self.seed,
            aug_menu: self.augment.menu.iter().map(|&m| self.augment.spec(m)).collect(),
            aug_enabled: t.aug_enabled,
            eval_every: t.eval_every,
        }
    }

    /// Checks every section and reports all offending keys at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        let mut check = |key: &str, r: Result<()>| {
            if let Err(e) = r {
                bad.push(format!("{key}: {e}"));
            }
        };
        let t = &self.train;
        if t.batch_size < 2 {
            check("train.batch_size", Err(Error::config("must be at least 2")));
        }
        if t.epochs < 1 {
            check("train.epochs", Err(Error::config("must be at least 1")));
        }
        if t.eval_every < 1 {
            check("train.eval_every", Err(Error::config("must be at least 1")));
        }
        check("train.lr/beta1/beta2/eps", self.train_config().optimizer.validate());
        check("loss", self.loss_config().validate());
        check("model", self.encoder_config().validate());
        if t.aug_enabled && t.aug_copies > 0 && self.augment.menu.is_empty() {
            check("augment.menu", Err(Error::config("empty while augmentation is enabled")));
        }
        for &m in &self.augment.menu {
            check(&format!("augment ({})", m.name()), self.augment.spec(m).validate());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train_config(), TrainConfig {
            seed: 0,
            ..TrainConfig::default()
        });
        assert_eq!(c.encoder_config(), EncoderConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig {
            seed: 17,
            ..RunConfig::default()
        };
        c.loss.kind = LossKind::Triplet;
        c.augment.menu = vec![Method::GaussianScaling];
        c.model.normalize_output = true;
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn sections_parse() {
        let c = RunConfig::from_toml(
            "seed = 3\n[train]\naug_copies = 15\n[loss]\nkind = \"logistic\"\n[augment]\nmenu = [\"perturb\"]\n",
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.aug_copies, 15);
        assert_eq!(c.loss.kind, LossKind::Logistic);
        assert_eq!(c.train_config().aug_menu[0].method, Method::StochasticPerturb);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(RunConfig::from_toml("[train]\nbatchsize = 3\n").is_err());
    }

    #[test]
    fn validation_lists_every_offending_key() {
        let mut c = RunConfig::default();
        c.train.batch_size = 1;
        c.loss.margin = -1.0;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("train.batch_size"), "{msg}");
        assert!(msg.contains("loss"), "{msg}");
    }
}

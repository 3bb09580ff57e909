//! Representation-level augmentation for contrastive query/item retrieval.
//!
//! The crate bundles a small tape autodiff engine, the augmentation
//! operators, contrastive losses over augmented pools, a hashed-feature
//! encoder, a trainer, retrieval metrics and a mutual-information lab.

// Validation uses `!(x > 0.0)` style checks on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod milab;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use augment::{AugmentationSpec, Method};
pub use autodiff::{Tape, Var};
pub use config::RunConfig;
pub use encoder::{EncoderConfig, EncoderModel, Featurizer, Side};
pub use error::{Error, Result};
pub use eval::{EvalSet, NormReport};
pub use io::{Corpus, CorpusRecord, Split};
pub use loss::{LossConfig, LossKind, PairSet};
pub use milab::{BoundConfig, BoundReport, GaussianPairSource};
pub use tensor::Tensor;
pub use train::{EpochMetrics, PairData, TrainConfig, Trainer};

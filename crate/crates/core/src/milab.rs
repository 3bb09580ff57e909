//! Empirical checks of the InfoNCE mutual-information lower bounds on
//! correlated Gaussian pairs, where the true MI is known in closed form.

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::augment::{AugmentationSpec, Method};
use crate::autodiff::Tape;
use crate::encoder::{EncoderConfig, EncoderModel, Side};
use crate::error::{Error, Result};
use crate::loss::{augmented_infonce, augmented_pools, infonce};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, label, Rng};
use crate::tensor::Tensor;

/// Pairs `(q, c)` with `corr(q_k, c_k) = rho[k]`, independent across `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPairSource {
    rho: Vec<f64>,
}

impl GaussianPairSource {
    pub fn new(rho: Vec<f64>) -> Result<Self> {
        if rho.is_empty() {
            return Err(Error::config("need at least one dimension"));
        }
        if let Some(r) = rho.iter().find(|r| !(r.abs() < 1.0)) {
            return Err(Error::config(format!("correlation must satisfy |rho| < 1, got {r}")));
        }
        Ok(Self { rho })
    }

    pub fn uniform(dim: usize, rho: f64) -> Result<Self> {
        Self::new(vec![rho; dim])
    }

    pub fn dim(&self) -> usize {
        self.rho.len()
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// Mutual information in nats.
    pub fn true_mi(&self) -> f64 {
        -0.5 * self.rho.iter().map(|r| (1.0 - r * r).ln()).sum::<f64>()
    }

    pub fn sample(&self, count: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        if count < 1 {
            return Err(Error::contract("sample count must be at least 1"));
        }
        let d = self.dim();
        let mut q = Vec::with_capacity(count * d);
        let mut c = Vec::with_capacity(count * d);
        for _ in 0..count {
            for &r in &self.rho {
                let z1: f64 = StandardNormal.sample(rng);
                let z2: f64 = StandardNormal.sample(rng);
                q.push(z1);
                c.push(r * z1 + (1.0 - r * r).sqrt() * z2);
            }
        }
        Ok((Tensor::matrix(count, d, q), Tensor::matrix(count, d, c)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundConfig {
    pub batch: usize,
    pub copies: usize,
    /// Fixed interpolation weight for the augmented check.
    pub lambda: f64,
    pub steps: usize,
    pub eval_batches: usize,
    /// Critic hidden and output widths; the input width is the source dim.
    pub hidden: Vec<usize>,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Subtracted from the measured loss before the bound is formed. Only
    /// useful for exercising the violation path.
    pub loss_shift: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            copies: 5,
            lambda: 0.95,
            steps: 1500,
            eval_batches: 50,
            hidden: vec![64, 32],
            optimizer: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            seed: 0,
            loss_shift: 0.0,
        }
    }
}

impl BoundConfig {
    fn validate(&self, augmented: bool) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::config("bound checks need a batch of at least 2"));
        }
        if self.steps < 1 || self.eval_batches < 1 {
            return Err(Error::config("steps and eval_batches must be at least 1"));
        }
        if augmented {
            if self.copies < 1 {
                return Err(Error::config("the augmented bound needs at least one copy"));
            }
            if !(self.lambda > 0.0 && self.lambda <= 1.0) {
                return Err(Error::config(format!("lambda must lie in (0, 1], got {}", self.lambda)));
            }
        }
        self.optimizer.validate()
    }

    fn spec(&self) -> AugmentationSpec {
        AugmentationSpec {
            lambda_low: self.lambda,
            lambda_high: self.lambda,
            ..AugmentationSpec::for_method(Method::LinearInterp)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BoundReport {
    pub theorem: u8,
    pub seed: u64,
    pub batch: usize,
    pub copies: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Held-out loss of the trained critic.
    pub loss: f64,
    pub bound: f64,
    /// Largest value the bound can take (loss = 0).
    pub ceiling: f64,
    pub true_mi: f64,
    /// `true_mi - bound`; negative means the bound overshot.
    pub margin: f64,
}

impl BoundReport {
    pub fn holds(&self, tolerance: f64) -> bool {
        self.bound <= self.true_mi + tolerance
    }
}

pub fn theorem1_ceiling(batch: usize) -> f64 {
    (batch as f64).ln()
}

pub fn theorem2_ceiling(batch: usize, copies: usize, alpha: f64) -> f64 {
    ((copies * batch) as f64).ln() / (alpha * alpha)
}

fn critic(source: &GaussianPairSource, cfg: &BoundConfig) -> Result<EncoderModel> {
    let mut layer_sizes = vec![source.dim()];
    layer_sizes.extend(&cfg.hidden);
    let ec = EncoderConfig {
        layer_sizes,
        normalize_output: false,
        shared_towers: false,
    };
    EncoderModel::new(ec, rng::derive_seed(cfg.seed, &[label::INIT]))
}

/// Batch loss, optionally with gradients.
fn critic_loss(
    model: &EncoderModel,
    q: &Tensor,
    c: &Tensor,
    cfg: &BoundConfig,
    augmented: bool,
    aug_seed: u64,
    want_grads: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let enc = model.bind(&tape);
    let qv = enc.forward(Side::Query, tape.constant(q.clone()))?;
    let cv = enc.forward(Side::Item, tape.constant(c.clone()))?;
    let l = if augmented {
        let (qp, cp, pairs) = augmented_pools(qv, cv, &cfg.spec(), cfg.copies, aug_seed)?;
        augmented_infonce(qp, cp, &pairs, 1.0)?
    } else {
        infonce(qv, cv, 1.0)?
    };
    let value = l.item();
    if !want_grads {
        return Ok((value, Vec::new()));
    }
    let mut grads = l.backward()?;
    Ok((value, enc.params().iter().map(|&p| grads.take(p)).collect()))
}

/// Trains a critic on fresh batches and returns its mean loss on held-out
/// batches drawn from an independent stream.
fn train_and_measure(source: &GaussianPairSource, cfg: &BoundConfig, augmented: bool) -> Result<f64> {
    let mut model = critic(source, cfg)?;
    let mut adam = Adam::for_params(cfg.optimizer, &model.params());
    let mut train_rng = rng::stream(cfg.seed, &[label::MI_TRAIN]);
    for step in 0..cfg.steps {
        let (q, c) = source.sample(cfg.batch, &mut train_rng)?;
        let aug_seed = rng::derive_seed(cfg.seed, &[label::MI_TRAIN, step as u64]);
        let (_, grads) = critic_loss(&model, &q, &c, cfg, augmented, aug_seed, true)?;
        adam.update(&mut model.params_mut(), &grads)?;
    }
    let mut eval_rng = rng::stream(cfg.seed, &[label::MI_EVAL]);
    let mut total = 0.0;
    for k in 0..cfg.eval_batches {
        let (q, c) = source.sample(cfg.batch, &mut eval_rng)?;
        let aug_seed = rng::derive_seed(cfg.seed, &[label::MI_EVAL, k as u64]);
        total += critic_loss(&model, &q, &c, cfg, augmented, aug_seed, false)?.0;
    }
    Ok(total / cfg.eval_batches as f64 - cfg.loss_shift)
}

/// `log B - L_N` after plain InfoNCE training.
pub fn verify_theorem1(source: &GaussianPairSource, cfg: &BoundConfig) -> Result<BoundReport> {
    cfg.validate(false)?;
    let loss = train_and_measure(source, cfg, false)?;
    let bound = (cfg.batch as f64).ln() - loss;
    let true_mi = source.true_mi();
    Ok(BoundReport {
        theorem: 1,
        seed: cfg.seed,
        batch: cfg.batch,
        copies: 0,
        alpha: 1.0,
        beta: 0.0,
        loss,
        bound,
        ceiling: theorem1_ceiling(cfg.batch),
        true_mi,
        margin: true_mi - bound,
    })
}

/// `(1/α²)(log NB - L_N)` after augmented InfoNCE training with fixed-λ
/// interpolation; the negative-pair MI terms are taken as 0.
pub fn verify_theorem2(source: &GaussianPairSource, cfg: &BoundConfig) -> Result<BoundReport> {
    cfg.validate(true)?;
    let loss = train_and_measure(source, cfg, true)?;
    let alpha = cfg.lambda;
    let bound = (((cfg.copies * cfg.batch) as f64).ln() - loss) / (alpha * alpha);
    let true_mi = source.true_mi();
    Ok(BoundReport {
        theorem: 2,
        seed: cfg.seed,
        batch: cfg.batch,
        copies: cfg.copies,
        alpha,
        beta: 1.0 - alpha,
        loss,
        bound,
        ceiling: theorem2_ceiling(cfg.batch, cfg.copies, alpha),
        true_mi,
        margin: true_mi - bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_mi() {
        let s = GaussianPairSource::uniform(8, 0.9).unwrap();
        assert!((s.true_mi() - 6.643).abs() < 1e-3);
        assert!((s.true_mi() + 4.0 * 0.19f64.ln()).abs() < 1e-12);
        assert_eq!(GaussianPairSource::uniform(3, 0.0).unwrap().true_mi(), 0.0);
    }

    #[test]
    fn bad_rho_is_a_config_error() {
        assert!(matches!(GaussianPairSource::uniform(2, 1.0), Err(Error::Config(_))));
        assert!(matches!(GaussianPairSource::new(vec![0.2, -1.5]), Err(Error::Config(_))));
    }

    #[test]
    fn independent_source_is_uncorrelated() {
        let s = GaussianPairSource::uniform(1, 0.0).unwrap();
        let (q, c) = s.sample(10_000, &mut rng::from_seed(4)).unwrap();
        let corr: f64 = q.data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>() / 10_000.0;
        assert!(corr.abs() < 0.05, "{corr}");
    }

    #[test]
    fn sample_covariance_matches_rho() {
        let n = 20_000;
        let s = GaussianPairSource::new(vec![0.9, -0.4]).unwrap();
        let (q, c) = s.sample(n, &mut rng::from_seed(8)).unwrap();
        let tol = 3.0 / (n as f64).sqrt();
        for k in 0..2 {
            let mut m = [0.0; 3];
            for i in 0..n {
                let (a, b) = (q.get(i, k), c.get(i, k));
                m[0] += a * a;
                m[1] += b * b;
                m[2] += a * b;
            }
            let m = m.map(|v| v / n as f64);
            assert!((m[0] - 1.0).abs() < 2.0 * tol, "{m:?}");
            assert!((m[1] - 1.0).abs() < 2.0 * tol, "{m:?}");
            assert!((m[2] - s.rho()[k]).abs() < tol, "{m:?}");
        }
    }

    #[test]
    fn ceiling_algebra() {
        for b in [2, 8, 64, 256] {
            for n in 1..=25 {
                for alpha in [0.5, 0.9, 0.95, 1.0] {
                    let (t1, t2) = (theorem1_ceiling(b), theorem2_ceiling(b, n, alpha));
                    assert!(t2 >= t1);
                    if n > 1 || alpha < 1.0 {
                        assert!(t2 > t1);
                    } else {
                        assert_eq!(t2, t1);
                    }
                }
            }
        }
    }

    #[test]
    fn lambda_outside_unit_interval_is_rejected() {
        let s = GaussianPairSource::uniform(2, 0.5).unwrap();
        let cfg = BoundConfig {
            lambda: 1.2,
            steps: 1,
            ..BoundConfig::default()
        };
        assert!(matches!(verify_theorem2(&s, &cfg), Err(Error::Config(_))));
    }
}

//! Representation-level augmentation.
//!
//! Every method is an instance of `h⁺ = α ⊙ h + β ⊙ h′`. The specialized
//! functions below compute that formula directly; [`draw_coefficients`]
//! produces the explicit `(α, β, h′)` for the same random stream so the two
//! routes can be checked against each other bit-for-bit.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "interp")]
    LinearInterp,
    #[serde(rename = "extrap")]
    LinearExtrap,
    #[serde(rename = "perturb")]
    StochasticPerturb,
    #[serde(rename = "binary")]
    BinaryInterp,
    #[serde(rename = "gaussian")]
    GaussianScaling,
    #[serde(rename = "mixed")]
    MixedInterpExtrap,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::LinearInterp,
        Method::LinearExtrap,
        Method::StochasticPerturb,
        Method::BinaryInterp,
        Method::GaussianScaling,
        Method::MixedInterpExtrap,
    ];

    /// The four-way menu used for training: interpolation and extrapolation
    /// merged into one approach.
    pub const TRAINING_MENU: [Method; 4] = [
        Method::MixedInterpExtrap,
        Method::StochasticPerturb,
        Method::BinaryInterp,
        Method::GaussianScaling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::LinearInterp => "interp",
            Method::LinearExtrap => "extrap",
            Method::StochasticPerturb => "perturb",
            Method::BinaryInterp => "binary",
            Method::GaussianScaling => "gaussian",
            Method::MixedInterpExtrap => "mixed",
        }
    }

    pub fn uses_partner(self) -> bool {
        matches!(
            self,
            Method::LinearInterp
                | Method::LinearExtrap
                | Method::MixedInterpExtrap
                | Method::BinaryInterp
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::config(format!(
                    "unknown augmentation method `{s}` (valid: {})",
                    valid.join(", ")
                ))
            })
    }
}

/// An augmentation method together with all of its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    pub method: Method,
    pub lambda_low: f64,
    pub lambda_high: f64,
    pub drop_prob: f64,
    pub bernoulli_prob: f64,
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl AugmentationSpec {
    /// Training defaults: λ ~ U(0.9, 1.1) split at 1.0 for the pure interp and
    /// extrap variants, dropout p = 0.1, swap probability 0.25, σ = 0.1.
    pub fn for_method(method: Method) -> Self {
        let (lambda_low, lambda_high) = match method {
            Method::LinearInterp => (0.9, 1.0),
            Method::LinearExtrap => (1.0, 1.1),
            _ => (0.9, 1.1),
        };
        Self {
            method,
            lambda_low,
            lambda_high,
            drop_prob: 0.1,
            bernoulli_prob: 0.25,
            sigma: 0.1,
            seed: 0,
        }
    }

    /// The method's null parameters, under which it returns its input.
    pub fn null(method: Method) -> Self {
        Self {
            lambda_low: 1.0,
            lambda_high: 1.0,
            drop_prob: 0.0,
            bernoulli_prob: 0.0,
            sigma: 0.0,
            ..Self::for_method(method)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.lambda_low,
            self.lambda_high,
            self.drop_prob,
            self.bernoulli_prob,
            self.sigma,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("augmentation parameters must be finite"));
        }
        if self.lambda_low > self.lambda_high {
            return Err(Error::config(format!(
                "lambda_low {} exceeds lambda_high {}",
                self.lambda_low, self.lambda_high
            )));
        }
        match self.method {
            Method::LinearInterp if self.lambda_high > 1.0 => {
                return Err(Error::config("interpolation requires lambda_high <= 1"));
            }
            Method::LinearExtrap if self.lambda_low < 1.0 => {
                return Err(Error::config("extrapolation requires lambda_low >= 1"));
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::config(format!(
                "drop_prob must lie in [0, 1), got {}",
                self.drop_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.bernoulli_prob) {
            return Err(Error::config(format!(
                "bernoulli_prob must lie in [0, 1], got {}",
                self.bernoulli_prob
            )));
        }
        if self.sigma < 0.0 {
            return Err(Error::config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// For each row `i`, the batch row whose representation plays `h′`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartnerAssignment(Vec<usize>);

impl PartnerAssignment {
    pub fn new(partners: Vec<usize>) -> Result<Self> {
        let b = partners.len();
        for (i, &j) in partners.iter().enumerate() {
            if j == i {
                return Err(Error::contract(format!("row {i} is its own partner")));
            }
            if j >= b {
                return Err(Error::contract(format!("partner {j} out of range for batch {b}")));
            }
        }
        Ok(Self(partners))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Uniform partner draw over the `b − 1` other rows.
pub fn sample_partners(b: usize, rng: &mut Rng) -> Result<PartnerAssignment> {
    if b < 2 {
        return Err(Error::contract(format!("need at least 2 rows to pick partners, got {b}")));
    }
    let partners = (0..b)
        .map(|i| {
            let j = rng.random_range(0..b - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect();
    Ok(PartnerAssignment(partners))
}

/// `α ⊙ h + β ⊙ h′`.
pub fn general_augment(h: &[f64], h_prime: &[f64], alpha: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    let e = h.len();
    if h_prime.len() != e || alpha.len() != e || beta.len() != e {
        return Err(Error::contract(format!(
            "general_augment dimensions differ: h {e}, h' {}, alpha {}, beta {}",
            h_prime.len(),
            alpha.len(),
            beta.len()
        )));
    }
    Ok((0..e).map(|k| alpha[k] * h[k] + beta[k] * h_prime[k]).collect())
}

fn check_partners(batch: &Tensor, partners: &PartnerAssignment) -> Result<()> {
    if partners.len() != batch.rows() {
        return Err(Error::contract(format!(
            "{} partners for {} rows",
            partners.len(),
            batch.rows()
        )));
    }
    Ok(())
}

fn mix_rows(batch: &Tensor, partners: &PartnerAssignment, lambdas: &[f64]) -> Result<Tensor> {
    check_partners(batch, partners)?;
    if lambdas.len() != batch.rows() {
        return Err(Error::contract(format!(
            "{} lambda draws for {} rows",
            lambdas.len(),
            batch.rows()
        )));
    }
    let mut out = batch.clone();
    for (i, (&j, &lambda)) in partners.as_slice().iter().zip(lambdas).enumerate() {
        let partner = batch.row(j);
        let own = batch.row(i);
        let beta = 1.0 - lambda;
        for ((o, &h), &hp) in out.row_mut(i).iter_mut().zip(own).zip(partner) {
            *o = lambda * h + beta * hp;
        }
    }
    Ok(out)
}

/// Row `i` becomes `λᵢ·hᵢ + (1 − λᵢ)·h_{j(i)}` with `λᵢ ≤ 1`.
pub fn linear_interpolate(batch: &Tensor, partners: &PartnerAssignment, lambdas: &[f64]) -> Result<Tensor> {
    if let Some(l) = lambdas.iter().find(|l| !(**l <= 1.0)) {
        return Err(Error::contract(format!("interpolation lambda {l} exceeds 1")));
    }
    mix_rows(batch, partners, lambdas)
}

/// Same formula as interpolation with `λᵢ ≥ 1`, pushing outside the chord.
pub fn linear_extrapolate(batch: &Tensor, partners: &PartnerAssignment, lambdas: &[f64]) -> Result<Tensor> {
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 1.0)) {
        return Err(Error::contract(format!("extrapolation lambda {l} below 1")));
    }
    mix_rows(batch, partners, lambdas)
}

/// Inverted dropout: each feature is zeroed with probability `p`, survivors
/// are scaled by `1/(1 − p)`.
pub fn stochastic_perturb(batch: &Tensor, drop_prob: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::contract(format!("drop probability {drop_prob} outside [0, 1)")));
    }
    let scale = 1.0 / (1.0 - drop_prob);
    let mut out = batch.clone();
    for v in out.data_mut() {
        let u: f64 = rng.random();
        *v = if u < drop_prob { 0.0 } else { *v * scale };
    }
    Ok(out)
}

/// Each feature is swapped for the partner's with probability `p_b`.
pub fn binary_interpolate(
    batch: &Tensor,
    partners: &PartnerAssignment,
    swap_prob: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    check_partners(batch, partners)?;
    if !(0.0..=1.0).contains(&swap_prob) {
        return Err(Error::contract(format!("swap probability {swap_prob} outside [0, 1]")));
    }
    let mut out = batch.clone();
    for (i, &j) in partners.as_slice().iter().enumerate() {
        let partner = batch.row(j);
        for (o, &hp) in out.row_mut(i).iter_mut().zip(partner) {
            let u: f64 = rng.random();
            if u < swap_prob {
                *o = hp;
            }
        }
    }
    Ok(out)
}

/// Multiplicative noise `(1 + βₖ)·hₖ` with `βₖ ~ N(0, σ²)`; computed as
/// `hₖ + βₖ·hₖ` so it matches the general form exactly.
pub fn gaussian_scale(batch: &Tensor, sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::contract(format!("sigma {sigma} must be >= 0")));
    }
    let mut out = batch.clone();
    for v in out.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        let beta = sigma * z;
        *v = 1.0 * *v + beta * *v;
    }
    Ok(out)
}

fn draw_lambdas(b: usize, low: f64, high: f64, rng: &mut Rng) -> Vec<f64> {
    (0..b)
        .map(|_| {
            let u: f64 = rng.random();
            low + (high - low) * u
        })
        .collect()
}

/// Applies `spec` to every row of `batch`, drawing partners and coefficients
/// from `rng`.
pub fn augment(batch: &Tensor, spec: &AugmentationSpec, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    match spec.method {
        Method::LinearInterp | Method::LinearExtrap | Method::MixedInterpExtrap => {
            let partners = sample_partners(batch.rows(), rng)?;
            let lambdas = draw_lambdas(batch.rows(), spec.lambda_low, spec.lambda_high, rng);
            match spec.method {
                Method::LinearInterp => linear_interpolate(batch, &partners, &lambdas),
                Method::LinearExtrap => linear_extrapolate(batch, &partners, &lambdas),
                _ => mix_rows(batch, &partners, &lambdas),
            }
        }
        Method::StochasticPerturb => stochastic_perturb(batch, spec.drop_prob, rng),
        Method::BinaryInterp => {
            let partners = sample_partners(batch.rows(), rng)?;
            binary_interpolate(batch, &partners, spec.bernoulli_prob, rng)
        }
        Method::GaussianScaling => gaussian_scale(batch, spec.sigma, rng),
    }
}

/// Where `h′` comes from in the general form.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Partner(PartnerAssignment),
    Zero,
    SelfRow,
}

/// Explicit general-form coefficients for a whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub source: Source,
}

/// Draws the `(α, β, h′)` that [`augment`] would use for a `b × e` batch,
/// consuming `rng` identically.
pub fn draw_coefficients(spec: &AugmentationSpec, b: usize, e: usize, rng: &mut Rng) -> Result<Coefficients> {
    spec.validate()?;
    let mut alpha = Tensor::zeros(&[b, e]);
    let mut beta = Tensor::zeros(&[b, e]);
    let source = match spec.method {
        Method::LinearInterp | Method::LinearExtrap | Method::MixedInterpExtrap => {
            let partners = sample_partners(b, rng)?;
            let lambdas = draw_lambdas(b, spec.lambda_low, spec.lambda_high, rng);
            for (i, &l) in lambdas.iter().enumerate() {
                alpha.row_mut(i).fill(l);
                beta.row_mut(i).fill(1.0 - l);
            }
            Source::Partner(partners)
        }
        Method::StochasticPerturb => {
            let scale = 1.0 / (1.0 - spec.drop_prob);
            for (a, bt) in alpha.data_mut().iter_mut().zip(beta.data_mut()) {
                let u: f64 = rng.random();
                *a = if u < spec.drop_prob { 0.0 } else { scale };
                *bt = scale - *a;
            }
            Source::Zero
        }
        Method::BinaryInterp => {
            let partners = sample_partners(b, rng)?;
            for (a, bt) in alpha.data_mut().iter_mut().zip(beta.data_mut()) {
                let u: f64 = rng.random();
                *a = if u < spec.bernoulli_prob { 0.0 } else { 1.0 };
                *bt = 1.0 - *a;
            }
            Source::Partner(partners)
        }
        Method::GaussianScaling => {
            alpha.data_mut().fill(1.0);
            for bt in beta.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *bt = spec.sigma * z;
            }
            Source::SelfRow
        }
    };
    Ok(Coefficients { alpha, beta, source })
}

/// Evaluates the general form row by row via [`general_augment`].
pub fn apply_general(batch: &Tensor, coeffs: &Coefficients) -> Result<Tensor> {
    let (b, e) = (batch.rows(), batch.cols());
    if coeffs.alpha.shape() != [b, e] || coeffs.beta.shape() != [b, e] {
        return Err(Error::Dimension {
            op: "apply_general",
            left: batch.shape().to_vec(),
            right: coeffs.alpha.shape().to_vec(),
        });
    }
    let zero = vec![0.0; e];
    let mut out = Vec::with_capacity(b * e);
    for i in 0..b {
        let h_prime: &[f64] = match &coeffs.source {
            Source::Partner(p) => {
                check_partners(batch, p)?;
                batch.row(p.as_slice()[i])
            }
            Source::Zero => &zero,
            Source::SelfRow => batch.row(i),
        };
        out.extend(general_augment(batch.row(i), h_prime, coeffs.alpha.row(i), coeffs.beta.row(i))?);
    }
    Ok(Tensor::matrix(b, e, out))
}

//! Contrastive objectives over dot-product similarities.
//!
//! Augmented pools are laid out as `[originals; copy 1; …; copy N]`, so pool
//! row `r` belongs to base index `r % B`. Rows sharing a base index are
//! positives of each other; everything else is a negative.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::augment::{draw_coefficients, augment, AugmentationSpec, Source};
use crate::autodiff::{HingeAnchor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, label};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    InfoNce,
    Triplet,
    Logistic,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infonce" => Ok(LossKind::InfoNce),
            "triplet" => Ok(LossKind::Triplet),
            "logistic" => Ok(LossKind::Logistic),
            other => Err(Error::config(format!(
                "unknown loss `{other}` (valid: infonce, triplet, logistic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Triplet margin ε.
    pub margin: f64,
    /// Divides similarities inside InfoNCE; 1 disables it.
    pub temperature: f64,
    /// Use the triplet and logistic formulas with their literal outer signs
    /// instead of the standard hinge / NCE forms.
    #[serde(default)]
    pub printed_signs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::InfoNce,
            margin: 5.0,
            temperature: 1.0,
            printed_signs: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::config(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Positive and negative pairs over a pool of `(N + 1)·B` rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    base: usize,
    copies: usize,
    positives: Vec<(usize, usize)>,
    negatives: Vec<Vec<usize>>,
}

impl PairSet {
    pub fn new(base: usize, copies: usize) -> Result<Self> {
        if base < 2 {
            return Err(Error::contract(format!("need B >= 2 for negatives, got {base}")));
        }
        let rows = (copies + 1) * base;
        let mut positives = Vec::with_capacity((copies + 1) * rows);
        let mut negatives = Vec::with_capacity(rows);
        for a in 0..rows {
            let mut neg = Vec::with_capacity((base - 1) * (copies + 1));
            for p in 0..rows {
                if p % base == a % base {
                    positives.push((a, p));
                } else {
                    neg.push(p);
                }
            }
            negatives.push(neg);
        }
        Ok(Self {
            base,
            copies,
            positives,
            negatives,
        })
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn copies(&self) -> usize {
        self.copies
    }

    pub fn rows(&self) -> usize {
        (self.copies + 1) * self.base
    }

    pub fn positives(&self) -> &[(usize, usize)] {
        &self.positives
    }

    pub fn negatives_of(&self, anchor: usize) -> &[usize] {
        &self.negatives[anchor]
    }

    pub fn base_index(&self, row: usize) -> usize {
        row % self.base
    }

    fn mask(&self, positive: bool) -> Vec<bool> {
        let r = self.rows();
        (0..r * r)
            .map(|k| ((k / r) % self.base == (k % r) % self.base) == positive)
            .collect()
    }

    fn hinge_anchors(&self) -> Vec<HingeAnchor> {
        let r = self.rows();
        (0..r)
            .map(|a| HingeAnchor {
                row: a,
                positives: (0..r).filter(|p| p % self.base == a % self.base).collect(),
                negatives: self.negatives[a].clone(),
            })
            .collect()
    }

    /// Per-entry weights that average each anchor's negatives and then
    /// average over all positive pairs.
    fn negative_weights(&self) -> Tensor {
        let r = self.rows();
        let per_anchor_pos = (self.copies + 1) as f64;
        let total_pos = self.positives.len() as f64;
        let per_neg = ((self.base - 1) * (self.copies + 1)) as f64;
        let w = per_anchor_pos / (total_pos * per_neg);
        let data = self.mask(false).into_iter().map(|m| if m { w } else { 0.0 }).collect();
        Tensor::matrix(r, r, data)
    }
}

fn check_aligned(q: &Tensor, c: &Tensor) -> Result<usize> {
    if q.shape() != c.shape() || q.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "contrastive loss",
            left: q.shape().to_vec(),
            right: c.shape().to_vec(),
        });
    }
    if q.rows() < 2 {
        return Err(Error::contract(format!(
            "contrastive losses need at least 2 rows, got {}",
            q.rows()
        )));
    }
    Ok(q.rows())
}

fn similarities<'t>(q: Var<'t>, c: Var<'t>) -> Result<Var<'t>> {
    q.matmul(c.t())
}

/// Mean over rows of `−log softmax(q_i · C)[i]`.
pub fn infonce<'t>(q: Var<'t>, c: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    check_aligned(&q.value(), &c.value())?;
    let s = similarities(q, c)?.scale(1.0 / temperature);
    let lse = s.row_logsumexp(None)?;
    let diag = q.mul(c)?.row_sum().scale(1.0 / temperature);
    Ok(lse.sub(diag)?.mean())
}

/// One InfoNCE term per positive pair; each anchor's denominator holds the
/// positive itself plus the anchor's `(B − 1)(N + 1)` cross-index items.
pub fn augmented_infonce<'t>(
    qpool: Var<'t>,
    cpool: Var<'t>,
    pairs: &PairSet,
    temperature: f64,
) -> Result<Var<'t>> {
    let r = check_aligned(&qpool.value(), &cpool.value())?;
    if r != pairs.rows() {
        return Err(Error::contract(format!("pool has {r} rows, pair set expects {}", pairs.rows())));
    }
    let s = similarities(qpool, cpool)?.scale(1.0 / temperature);
    let neg_lse = s.row_logsumexp(Some(Rc::new(pairs.mask(false))))?;
    let anchors: Vec<usize> = pairs.positives().iter().map(|&(a, _)| a).collect();
    let flat: Vec<usize> = pairs.positives().iter().map(|&(a, p)| a * r + p).collect();
    let margin = neg_lse.gather_rows(&anchors)?.sub(s.gather_entries(&flat)?)?;
    Ok(margin.softplus().mean())
}

fn squared_distances<'t>(q: Var<'t>, c: Var<'t>) -> Result<Var<'t>> {
    let tape = q.tape();
    let r = q.value().rows();
    let ones_row = tape.constant(Tensor::full(&[1, r], 1.0));
    let ones_col = tape.constant(Tensor::full(&[r, 1], 1.0));
    let qn = q.mul(q)?.row_sum().matmul(ones_row)?;
    let cn = ones_col.matmul(c.mul(c)?.row_sum().t())?;
    qn.add(cn)?.sub(similarities(q, c)?.scale(2.0))
}

/// Hinge on squared Euclidean distances, averaged over each anchor's
/// negatives and then over positive pairs.
pub fn augmented_triplet<'t>(
    qpool: Var<'t>,
    cpool: Var<'t>,
    pairs: &PairSet,
    margin: f64,
    printed_signs: bool,
) -> Result<Var<'t>> {
    if !(margin > 0.0) {
        return Err(Error::config(format!("margin must be > 0, got {margin}")));
    }
    let r = check_aligned(&qpool.value(), &cpool.value())?;
    if r != pairs.rows() {
        return Err(Error::contract(format!("pool has {r} rows, pair set expects {}", pairs.rows())));
    }
    let d = squared_distances(qpool, cpool)?;
    let loss = d.hinge(Rc::new(pairs.hinge_anchors()), margin)?;
    Ok(if printed_signs { loss.scale(-1.0) } else { loss })
}

pub fn triplet<'t>(q: Var<'t>, c: Var<'t>, margin: f64, printed_signs: bool) -> Result<Var<'t>> {
    let b = check_aligned(&q.value(), &c.value())?;
    augmented_triplet(q, c, &PairSet::new(b, 0)?, margin, printed_signs)
}

/// Sigmoid (NCE-style) loss. The standard form is
/// `−log σ(s⁺) − mean log σ(−s⁻)`; with `printed_signs` the negative term is
/// `+mean log σ(s⁻)` instead, which is unbounded below.
pub fn augmented_logistic<'t>(
    qpool: Var<'t>,
    cpool: Var<'t>,
    pairs: &PairSet,
    printed_signs: bool,
) -> Result<Var<'t>> {
    let r = check_aligned(&qpool.value(), &cpool.value())?;
    if r != pairs.rows() {
        return Err(Error::contract(format!("pool has {r} rows, pair set expects {}", pairs.rows())));
    }
    let tape = qpool.tape();
    let s = similarities(qpool, cpool)?;
    let pos = tape.constant(Tensor::matrix(
        r,
        r,
        pairs
            .mask(true)
            .into_iter()
            .map(|m| if m { 1.0 } else { 0.0 })
            .collect(),
    ));
    let pos_term = s
        .log_sigmoid()
        .mul(pos)?
        .sum()
        .scale(-1.0 / pairs.positives().len() as f64);
    let w = tape.constant(pairs.negative_weights());
    let neg_term = if printed_signs {
        s.log_sigmoid().mul(w)?.sum()
    } else {
        s.scale(-1.0).log_sigmoid().mul(w)?.sum().scale(-1.0)
    };
    pos_term.add(neg_term)
}

pub fn logistic<'t>(q: Var<'t>, c: Var<'t>, printed_signs: bool) -> Result<Var<'t>> {
    let b = check_aligned(&q.value(), &c.value())?;
    augmented_logistic(q, c, &PairSet::new(b, 0)?, printed_signs)
}

/// The configured loss over an augmented pool.
pub fn augmented_variant<'t>(cfg: &LossConfig, qpool: Var<'t>, cpool: Var<'t>, pairs: &PairSet) -> Result<Var<'t>> {
    cfg.validate()?;
    match cfg.kind {
        LossKind::InfoNce => augmented_infonce(qpool, cpool, pairs, cfg.temperature),
        LossKind::Triplet => augmented_triplet(qpool, cpool, pairs, cfg.margin, cfg.printed_signs),
        LossKind::Logistic => augmented_logistic(qpool, cpool, pairs, cfg.printed_signs),
    }
}

/// The configured loss on aligned, unaugmented rows.
pub fn plain_variant<'t>(cfg: &LossConfig, q: Var<'t>, c: Var<'t>) -> Result<Var<'t>> {
    cfg.validate()?;
    match cfg.kind {
        LossKind::InfoNce => infonce(q, c, cfg.temperature),
        LossKind::Triplet => triplet(q, c, cfg.margin, cfg.printed_signs),
        LossKind::Logistic => logistic(q, c, cfg.printed_signs),
    }
}

/// Seed for the augmentation stream of one copy on one side.
fn copy_seed(seed: u64, copy: usize, side: u64) -> u64 {
    rng::derive_seed(seed, &[label::AUGMENT, copy as u64, side])
}

/// Builds `[originals; N augmented copies]` for both sides. Query and item
/// sides use independent streams, so their partners are drawn independently.
pub fn build_augmented_pairs(
    q: &Tensor,
    c: &Tensor,
    spec: &AugmentationSpec,
    copies: usize,
    seed: u64,
) -> Result<(Tensor, Tensor, PairSet)> {
    let b = check_aligned(q, c)?;
    let pairs = PairSet::new(b, copies)?;
    let mut qs = vec![q.clone()];
    let mut cs = vec![c.clone()];
    for n in 1..=copies {
        let mut rq = rng::from_seed(copy_seed(seed, n, label::QUERY_SIDE));
        let mut rc = rng::from_seed(copy_seed(seed, n, label::ITEM_SIDE));
        qs.push(augment(q, spec, &mut rq)?);
        cs.push(augment(c, spec, &mut rc)?);
    }
    let qpool = Tensor::vstack(&qs.iter().collect::<Vec<_>>())?;
    let cpool = Tensor::vstack(&cs.iter().collect::<Vec<_>>())?;
    Ok((qpool, cpool, pairs))
}

fn augment_var<'t>(h: Var<'t>, spec: &AugmentationSpec, rng: &mut rng::Rng) -> Result<Var<'t>> {
    let (b, e) = {
        let v = h.value();
        (v.rows(), v.cols())
    };
    let tape = h.tape();
    let coeffs = draw_coefficients(spec, b, e, rng)?;
    let scaled = tape.constant(coeffs.alpha).mul(h)?;
    let beta = tape.constant(coeffs.beta);
    match coeffs.source {
        Source::Zero => Ok(scaled),
        Source::SelfRow => scaled.add(beta.mul(h)?),
        Source::Partner(p) => scaled.add(beta.mul(h.gather_rows(p.as_slice())?)?),
    }
}

/// Differentiable counterpart of [`build_augmented_pairs`]: the augmented
/// copies are functions of `q` and `c`, so gradients reach the encoder
/// through the augmentation coefficients.
pub fn augmented_pools<'t>(
    q: Var<'t>,
    c: Var<'t>,
    spec: &AugmentationSpec,
    copies: usize,
    seed: u64,
) -> Result<(Var<'t>, Var<'t>, PairSet)> {
    let b = check_aligned(&q.value(), &c.value())?;
    let pairs = PairSet::new(b, copies)?;
    let mut qs = vec![q];
    let mut cs = vec![c];
    for n in 1..=copies {
        let mut rq = rng::from_seed(copy_seed(seed, n, label::QUERY_SIDE));
        let mut rc = rng::from_seed(copy_seed(seed, n, label::ITEM_SIDE));
        qs.push(augment_var(q, spec, &mut rq)?);
        cs.push(augment_var(c, spec, &mut rc)?);
    }
    Ok((Var::concat_rows(&qs)?, Var::concat_rows(&cs)?, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn pair_counts_for_b4_n5() {
        let p = PairSet::new(4, 5).unwrap();
        assert_eq!(p.positives().len(), 144);
        assert_eq!(p.rows(), 24);
        for a in 0..p.rows() {
            assert_eq!(p.negatives_of(a).len(), 18);
        }
    }

    #[test]
    fn n0_pairs_are_plain_structure() {
        let p = PairSet::new(3, 0).unwrap();
        assert_eq!(p.positives(), &[(0, 0), (1, 1), (2, 2)]);
        assert_eq!(p.negatives_of(1), &[0, 2]);
    }

    #[test]
    fn uniform_similarities_give_ln2() {
        let tape = Tape::new();
        let q = tape.param(Tensor::zeros(&[2, 3]));
        let c = tape.param(Tensor::zeros(&[2, 3]));
        let l = infonce(q, c, 1.0).unwrap().item();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_case_b3() {
        // q_i · c_j = 2 on the diagonal, 0 elsewhere.
        let tape = Tape::new();
        let s2 = 2f64.sqrt();
        let q = tape.param(Tensor::matrix(3, 3, vec![s2, 0., 0., 0., s2, 0., 0., 0., s2]));
        let c = q;
        let l = infonce(q, c, 1.0).unwrap().item();
        let e2 = 2f64.exp();
        let expected = -(e2 / (e2 + 2.0)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.2395).abs() < 1e-4);
    }

    #[test]
    fn b_below_two_is_rejected() {
        let tape = Tape::new();
        let q = tape.param(Tensor::zeros(&[1, 3]));
        assert!(infonce(q, q, 1.0).is_err());
        assert!(PairSet::new(1, 2).is_err());
    }

    #[test]
    fn triplet_margin_cases() {
        let tape = Tape::new();
        // positives coincide, negatives far away
        let q = tape.param(Tensor::matrix(2, 2, vec![0.0, 0.0, 10.0, 0.0]));
        let l = triplet(q, q, 5.0, false).unwrap().item();
        assert_eq!(l, 0.0);
        // all points equal: every term is exactly ε
        let z = tape.param(Tensor::full(&[3, 2], 0.5));
        let l = triplet(z, z, 5.0, false).unwrap().item();
        assert!((l - 5.0).abs() < 1e-12);
        assert!(triplet(z, z, 0.0, false).is_err());
        assert!((triplet(z, z, 5.0, true).unwrap().item() + 5.0).abs() < 1e-12);
    }

    #[test]
    fn logistic_zero_similarity() {
        let tape = Tape::new();
        let q = tape.param(Tensor::zeros(&[3, 2]));
        let printed = logistic(q, q, true).unwrap().item();
        assert!(printed.abs() < 1e-15);
        let standard = logistic(q, q, false).unwrap().item();
        assert!((standard - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("triplet".parse::<LossKind>().unwrap(), LossKind::Triplet);
        assert!("maxmargin".parse::<LossKind>().is_err());
    }
}

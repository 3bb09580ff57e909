//! Retrieval metrics and embedding-geometry diagnostics.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::encoder::{EncoderModel, Side};
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Queries and a fixed codebase, both as encoder inputs.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub queries: Tensor,
    pub codebase: Tensor,
    /// `truth[i]` is the codebase row that answers query `i`.
    pub truth: Vec<usize>,
}

impl EvalSet {
    pub fn new(queries: Tensor, codebase: Tensor, truth: Vec<usize>) -> Result<Self> {
        if queries.rows() == 0 || queries.is_empty() {
            return Err(Error::contract("evaluation needs at least one query"));
        }
        if truth.len() != queries.rows() {
            return Err(Error::contract(format!(
                "{} truth entries for {} queries",
                truth.len(),
                queries.rows()
            )));
        }
        if let Some(&t) = truth.iter().find(|&&t| t >= codebase.rows()) {
            return Err(Error::contract(format!(
                "truth target {t} outside codebase of {}",
                codebase.rows()
            )));
        }
        Ok(Self {
            queries,
            codebase,
            truth,
        })
    }
}

/// 1 + #strictly greater scores + #equal scores at a smaller index.
pub fn rank_of(scores: &[f64], true_idx: usize) -> Result<usize> {
    let Some(&target) = scores.get(true_idx) else {
        return Err(Error::contract(format!(
            "true index {true_idx} out of range for {} scores",
            scores.len()
        )));
    };
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j < true_idx))
        .count();
    Ok(1 + ahead)
}

/// Mean reciprocal rank; ranks beyond `k` contribute 0.
pub fn mrr_from_ranks(ranks: &[usize], k: Option<usize>) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::contract("MRR of an empty query set"));
    }
    let total: f64 = ranks
        .iter()
        .map(|&r| match k {
            Some(k) if r > k => 0.0,
            _ => 1.0 / r as f64,
        })
        .sum();
    Ok(total / ranks.len() as f64)
}

/// Ranks of each query's true item under dot-product scoring.
pub fn ranks_from_embeddings(queries: &Tensor, codebase: &Tensor, truth: &[usize]) -> Result<Vec<usize>> {
    if queries.cols() != codebase.cols() {
        return Err(Error::Dimension {
            op: "ranks_from_embeddings",
            left: queries.shape().to_vec(),
            right: codebase.shape().to_vec(),
        });
    }
    let mut scores = vec![0.0; codebase.rows()];
    queries
        .iter_rows()
        .zip(truth)
        .map(|(q, &t)| {
            for (s, c) in scores.iter_mut().zip(codebase.iter_rows()) {
                *s = dot(q, c);
            }
            rank_of(&scores, t)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Retrieval {
    pub ranks: Vec<usize>,
    pub query_embeddings: Tensor,
    pub code_embeddings: Tensor,
}

/// Encodes both sides once and ranks every query against the codebase.
pub fn retrieve(set: &EvalSet, model: &EncoderModel) -> Result<Retrieval> {
    let query_embeddings = model.encode(Side::Query, &set.queries)?;
    let code_embeddings = model.encode(Side::Item, &set.codebase)?;
    let ranks = ranks_from_embeddings(&query_embeddings, &code_embeddings, &set.truth)?;
    Ok(Retrieval {
        ranks,
        query_embeddings,
        code_embeddings,
    })
}

pub fn mrr(set: &EvalSet, model: &EncoderModel) -> Result<f64> {
    mrr_from_ranks(&retrieve(set, model)?.ranks, None)
}

pub fn mrr_at_k(set: &EvalSet, model: &EncoderModel, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::config("MRR@K needs K >= 1"));
    }
    mrr_from_ranks(&retrieve(set, model)?.ranks, Some(k))
}

pub const KDE_POINTS: usize = 256;

#[derive(Debug, Clone, Serialize)]
pub struct NormReport {
    pub norms: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub bandwidth: f64,
    pub kde_grid: Vec<f64>,
    pub kde_density: Vec<f64>,
    /// First two principal-component coordinates per vector.
    pub pca: Vec<[f64; 2]>,
}

impl NormReport {
    /// Trapezoid-rule integral of the KDE over its grid.
    pub fn kde_mass(&self) -> f64 {
        self.kde_grid
            .windows(2)
            .zip(self.kde_density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule, falling back to a small positive width when the
/// sample has no spread.
fn silverman_bandwidth(values: &[f64], std: f64, mean: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    let h = 0.9 * spread * (values.len() as f64).powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1e-3 * mean.abs().max(1.0)
    }
}

pub fn norm_report(reps: &Tensor) -> Result<NormReport> {
    if reps.rows() < 2 || reps.is_empty() {
        return Err(Error::contract("norm report needs at least 2 vectors"));
    }
    let norms = reps.row_norms();
    let (mean, std) = mean_std(&norms);
    let bandwidth = silverman_bandwidth(&norms, std, mean);
    let lo = norms.iter().copied().fold(f64::INFINITY, f64::min) - 5.0 * bandwidth;
    let hi = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 5.0 * bandwidth;
    let step = (hi - lo) / (KDE_POINTS - 1) as f64;
    let kde_grid: Vec<f64> = (0..KDE_POINTS).map(|i| lo + step * i as f64).collect();
    let norm_const = 1.0 / (norms.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let kde_density = kde_grid
        .iter()
        .map(|&x| {
            norms
                .iter()
                .map(|&n| (-0.5 * ((x - n) / bandwidth).powi(2)).exp())
                .sum::<f64>()
                * norm_const
        })
        .collect();
    Ok(NormReport {
        norms,
        mean,
        std,
        bandwidth,
        kde_grid,
        kde_density,
        pca: pca_2d(reps),
    })
}

/// Projection onto the top two principal axes of the centered rows.
pub fn pca_2d(reps: &Tensor) -> Vec<[f64; 2]> {
    let (n, e) = (reps.rows(), reps.cols());
    let mut means = vec![0.0; e];
    for r in reps.iter_rows() {
        for (m, v) in means.iter_mut().zip(r) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, e, |i, j| reps.get(i, j) - means[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| order.get(k).map(|&c| eig.eigenvectors.column(c).into_owned());
    let (a0, a1) = (axis(0), axis(1));
    (0..n)
        .map(|i| {
            let row = centered.row(i);
            let proj = |a: &Option<nalgebra::DVector<f64>>| a.as_ref().map_or(0.0, |a| row.dot(&a.transpose()));
            [proj(&a0), proj(&a1)]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of(&[0.1, 0.9, 0.3], 1).unwrap(), 1);
        assert_eq!(rank_of(&[0.5; 4], 0).unwrap(), 1);
        assert_eq!(rank_of(&[0.5; 4], 3).unwrap(), 4);
        assert!(rank_of(&[0.5; 4], 4).is_err());
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr_from_ranks(&[1, 1, 1], None).unwrap(), 1.0);
        let m = mrr_from_ranks(&[1, 2, 4], None).unwrap();
        assert!((m - 0.583_333_333_333_333_4).abs() < 1e-15);
        assert_eq!(mrr_from_ranks(&[1, 5], Some(4)).unwrap(), 0.5);
        assert!(mrr_from_ranks(&[], None).is_err());
    }

    #[test]
    fn norm_stats_of_one_and_three() {
        let m = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 3.0]);
        let r = norm_report(&m).unwrap();
        assert!((r.mean - 2.0).abs() < 1e-15);
        assert!((r.std - 1.0).abs() < 1e-15);
        assert!((r.kde_mass() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn unit_vectors_have_zero_norm_spread() {
        let m = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]);
        let r = norm_report(&m).unwrap();
        assert!(r.std < 1e-15);
        assert!((r.kde_mass() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rank_one_cloud_has_flat_second_axis() {
        let dir = [0.3, -1.2, 0.5, 2.0];
        let data: Vec<f64> = (0..10)
            .flat_map(|i| dir.iter().map(move |d| d * (i as f64 - 4.5)))
            .collect();
        let m = Tensor::matrix(10, 4, data);
        for p in pca_2d(&m) {
            assert!(p[1].abs() < 1e-8, "{p:?}");
        }
    }

    #[test]
    fn single_vector_is_rejected() {
        assert!(norm_report(&Tensor::matrix(1, 2, vec![1.0, 2.0])).is_err());
    }
}

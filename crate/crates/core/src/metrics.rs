//! Map and barycenter quality metrics.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian_oracle::{bw2, fit_gaussian, GaussianParams};
use crate::numeric::Tensor;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            context: what.into(),
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean over rows of `|T_hat(x_i) - T*(x_i)|^2`.
pub fn l2_map_metric(t_hat: &Tensor, t_star: &Tensor) -> Result<f64> {
    same_shape(t_hat, t_star, "l2 metric")?;
    if t_hat.rows() == 0 {
        return Err(Error::InvalidArgument("l2 metric on empty batch".into()));
    }
    let total: f64 = t_hat
        .data()
        .iter()
        .zip(t_star.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / t_hat.rows() as f64)
}

/// Trace of the sample covariance (population normalization).
pub fn total_variance(samples: &Tensor) -> f64 {
    let n = samples.rows() as f64;
    (0..samples.cols())
        .map(|c| {
            let mean = samples.iter_rows().map(|r| r[c]).sum::<f64>() / n;
            samples.iter_rows().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n
        })
        .sum()
}

/// `100 * l2 / var(Q*)` with `var` the total variance.
pub fn l2_uvp_with_variance(t_hat: &Tensor, t_star: &Tensor, variance: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::InvalidArgument("reference variance is zero".into()));
    }
    Ok(100.0 * l2_map_metric(t_hat, t_star)? / variance)
}

pub fn l2_uvp(t_hat: &Tensor, t_star: &Tensor, q_star: &Tensor) -> Result<f64> {
    l2_uvp_with_variance(t_hat, t_star, total_variance(q_star))
}

/// `sum_k lambda_k * value_k`.
pub fn weighted(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.len() != weights.len() {
        return Err(Error::Shape {
            context: "weighted metric".into(),
            expected: vec![weights.len()],
            got: vec![values.len()],
        });
    }
    Ok(values.iter().zip(weights).map(|(v, w)| v * w).sum())
}

/// `100 * BW2(Q_hat, Q*) / (var(Q*) / 2)` on Gaussian parameters.
pub fn bw2_uvp_params(q_hat: &GaussianParams, q_star: &GaussianParams) -> Result<f64> {
    let var = q_star.total_variance();
    if !(var > 0.0) {
        return Err(Error::InvalidArgument("reference variance is zero".into()));
    }
    Ok(100.0 * bw2(q_hat, q_star)? / (0.5 * var))
}

/// Moment-fit `Q_hat` from samples, then [`bw2_uvp_params`].
pub fn bw2_uvp(q_hat: &Tensor, q_star: &GaussianParams) -> Result<f64> {
    bw2_uvp_params(&fit_gaussian(q_hat)?, q_star)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAcceptance {
    /// Mean acceptance probability over candidates of the class.
    pub rate: f64,
    /// Candidates of the class.
    pub count: usize,
    /// Share of the accepted set belonging to the class.
    pub accepted_share: f64,
}

/// Per-label acceptance statistics. `accepted` are indices into the
/// candidate arrays.
pub fn acceptance_stats(
    probabilities: &[f64],
    labels: &[usize],
    accepted: &[usize],
    classes: &[usize],
) -> Result<BTreeMap<usize, ClassAcceptance>> {
    if probabilities.len() != labels.len() {
        return Err(Error::Shape {
            context: "acceptance labels".into(),
            expected: vec![probabilities.len()],
            got: vec![labels.len()],
        });
    }
    let mut out = BTreeMap::new();
    for &c in classes {
        let members: Vec<f64> = probabilities
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(p, _)| *p)
            .collect();
        if members.is_empty() {
            return Err(Error::EmptyClass(c.to_string()));
        }
        let acc = accepted.iter().filter(|&&i| labels[i] == c).count();
        out.insert(
            c,
            ClassAcceptance {
                rate: members.iter().sum::<f64>() / members.len() as f64,
                count: members.len(),
                accepted_share: if accepted.is_empty() {
                    0.0
                } else {
                    acc as f64 / accepted.len() as f64
                },
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricReport {
    pub fn new(metric: &str, value: f64, n: usize, seed: u64, config_hash: &str) -> Result<Self> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::NonFinite(format!("metric {metric} = {value}")));
        }
        Ok(Self {
            metric: metric.into(),
            value,
            n,
            seed,
            config_hash: config_hash.into(),
        })
    }
}

//! Inference by rejection sampling from the learned plan marginals.
//!
//! A candidate `x ~ P_k` is kept with probability `w(x) / c` where
//! `w(x) = conj_grad_k(-fc(x))`, `fc` is the c-transform estimated through
//! the learned map and `c` is the largest weight in the candidate pool.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cost::CostFn;
use crate::datagen::PointSource;
use crate::divergence::Divergence;
use crate::error::{Error, Result};
use crate::model::{MapBank, PotentialBank};
use crate::numeric::Tensor;
use crate::trainer::{repeat_rows, row_costs};

/// Noise draws per c-transform estimate for stochastic maps.
pub const STOCHASTIC_DRAWS: usize = 16;
pub const MIN_ACCEPTANCE: f64 = 1e-4;
pub const MAX_CANDIDATES: usize = 1_000_000;

/// `fc(x) ~ mean_s [c(x, T_k(x, s)) - f_k(T_k(x, s))]` for every row of `xs`.
pub fn estimate_ctransform(
    potentials: &PotentialBank,
    maps: &MapBank,
    k: usize,
    cost: &CostFn,
    xs: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let draws = if maps.is_stochastic() { STOCHASTIC_DRAWS } else { 1 };
    let x = repeat_rows(xs, draws);
    let noise = maps.sample_noise(x.rows(), rng);
    let y = maps.map_batch(k, &x, noise.as_ref())?;
    let c = row_costs(cost, &x, &y)?;
    let f = potentials.potentials(k, &y)?;
    Ok(c.chunks(draws)
        .zip(f.chunks(draws))
        .map(|(cc, ff)| cc.iter().zip(ff).map(|(a, b)| a - b).sum::<f64>() / draws as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AcceptanceWeights {
    pub weights: Vec<f64>,
    /// Largest weight in the pool.
    pub c_rej: f64,
}

impl AcceptanceWeights {
    /// `w_i = conj_grad(-fc_i)`, normalized by the pool maximum.
    pub fn from_ctransform(divergence: &Divergence, fc: &[f64]) -> Result<Self> {
        if fc.is_empty() {
            return Err(Error::InvalidArgument("empty candidate batch".into()));
        }
        let weights = fc
            .iter()
            .map(|&v| divergence.conj_grad(-v))
            .collect::<Result<Vec<_>>>()?;
        let c_rej = weights.iter().cloned().fold(0.0, f64::max);
        if !(c_rej > 0.0) {
            return Err(Error::DegenerateAcceptance);
        }
        Ok(Self { weights, c_rej })
    }

    /// Acceptance probabilities `w_i / c_rej`, all in `[0, 1]`.
    pub fn probabilities(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w / self.c_rej).collect()
    }
}

pub fn acceptance_weights(
    potentials: &PotentialBank,
    maps: &MapBank,
    k: usize,
    cost: &CostFn,
    divergence: &Divergence,
    xs: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<AcceptanceWeights> {
    let fc = estimate_ctransform(potentials, maps, k, cost, xs, rng)?;
    AcceptanceWeights::from_ctransform(divergence, &fc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Accepted {
    /// Candidate indices kept, in candidate order.
    pub indices: Vec<usize>,
    pub candidates: usize,
    pub rate: f64,
}

/// Keep candidate `i` when `u_i <= p_i`; one uniform per candidate in order.
pub fn filter(probabilities: &[f64], rng: &mut ChaCha8Rng) -> Accepted {
    let indices: Vec<usize> = probabilities
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| (rng.gen::<f64>() <= p).then_some(i))
        .collect();
    let candidates = probabilities.len();
    Accepted {
        rate: indices.len() as f64 / candidates.max(1) as f64,
        indices,
        candidates,
    }
}

#[derive(Debug, Clone)]
pub struct RejectionSample {
    /// Candidate pool with labels.
    pub candidates: Tensor,
    pub labels: Vec<usize>,
    pub weights: AcceptanceWeights,
    pub accepted: Accepted,
    /// Accepted inputs.
    pub inputs: Tensor,
    /// Accepted inputs pushed through `T_k` with fresh noise.
    pub barycenter: Tensor,
}

/// Draw a candidate pool from `source` and filter it; if fewer than
/// `n_target` survive, redraw a larger pool sized from the observed rate.
/// The acceptance constant is the largest weight in the pool being filtered,
/// and the returned set may overshoot `n_target`.
#[allow(clippy::too_many_arguments)]
pub fn rejection_sample(
    potentials: &PotentialBank,
    maps: &MapBank,
    k: usize,
    cost: &CostFn,
    divergence: &Divergence,
    source: &dyn PointSource,
    n_target: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RejectionSample> {
    if n_target == 0 {
        return Err(Error::InvalidArgument("n_target must be >= 1".into()));
    }
    let mut pool = n_target;
    loop {
        let s = source.sample_labeled(pool, rng)?;
        let weights = acceptance_weights(potentials, maps, k, cost, divergence, &s.points, rng)?;
        let accepted = filter(&weights.probabilities(), rng);
        if accepted.indices.len() >= n_target || pool >= MAX_CANDIDATES {
            if accepted.rate < MIN_ACCEPTANCE && pool >= MAX_CANDIDATES {
                return Err(Error::LowAcceptance {
                    rate: accepted.rate,
                    candidates: pool,
                });
            }
            let inputs = s.points.select_rows(&accepted.indices);
            let noise = maps.sample_noise(inputs.rows(), rng);
            let barycenter = maps.map_batch(k, &inputs, noise.as_ref())?;
            return Ok(RejectionSample {
                candidates: s.points,
                labels: s.labels,
                weights,
                accepted,
                inputs,
                barycenter,
            });
        }
        // Grow the pool in proportion to the observed rate.
        let rate = accepted.rate.max(1.0 / pool as f64);
        let need = (n_target as f64 / rate * 1.1).ceil() as usize;
        pool = need.clamp(pool * 2, MAX_CANDIDATES);
    }
}

//! Discrete reference solvers: log-domain Sinkhorn (balanced and with a
//! KL-relaxed source marginal), exhaustive search for tiny instances, the
//! empirical W2 metric and the two-marginal interpolation barycenter.

use itertools::Itertools;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{vexp, Tensor};

/// Ratio of the final entropic temperature to the mean cost.
pub const DEFAULT_EPS_RATIO: f64 = 1e-3;
pub const DEFAULT_MAX_ITER: usize = 100_000;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const MAX_BRUTE_FORCE: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePlan {
    /// `n x m`
    pub plan: Tensor,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `sum_ij pi_ij C_ij`
    pub cost: f64,
    /// Transport cost plus the marginal penalty, if any.
    pub objective: f64,
    pub iterations: usize,
    /// Largest absolute violation of the row optimality condition at exit.
    pub residual: f64,
}

impl DiscretePlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.iter_rows().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.plan.cols()];
        for r in self.plan.iter_rows() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Halve epsilon from `max(C)` down to `epsilon`, warm-starting the duals.
    pub anneal: bool,
}

impl SinkhornOptions {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            anneal: true,
        }
    }

    /// `epsilon = ratio * mean(C)`.
    pub fn relative(c: &Tensor, ratio: f64) -> Self {
        let mean = c.sum() / c.len().max(1) as f64;
        Self::new((ratio * mean).max(1e-12))
    }
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + vals.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `out_i = -eps * LSE_j(log_w_j + (dual_j - C_ij) / eps)` over rows of `c`.
fn soft_min_rows(c: &Tensor, dual: &[f64], log_w: &[f64], eps: f64, out: &mut [f64]) {
    let cols = c.cols();
    let inv = 1.0 / eps;
    let h: Vec<f64> = dual.iter().zip(log_w).map(|(g, lw)| lw + g * inv).collect();
    out.par_iter_mut()
        .zip(c.data().par_chunks(cols))
        .for_each(|(o, row)| *o = -eps * vexp::log_sum_exp_affine(&h, row, inv));
}

fn check_problem(c: &Tensor, a: &[f64], b: &[f64], opts: &SinkhornOptions) -> Result<()> {
    let (n, m) = c.as_matrix("cost matrix")?;
    if a.len() != n || b.len() != m {
        return Err(Error::Shape {
            context: "Sinkhorn marginals".into(),
            expected: vec![n, m],
            got: vec![a.len(), b.len()],
        });
    }
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("empty transport problem".into()));
    }
    for (name, w) in [("a", a), ("b", b)] {
        if w.iter().any(|v| !(*v > 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "marginal {name} must be a positive probability vector"
            )));
        }
    }
    if !c.is_finite() {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    if !(opts.epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    Ok(())
}

fn transpose(c: &Tensor) -> Tensor {
    let (n, m) = (c.rows(), c.cols());
    let mut data = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            data[j * n + i] = c.data()[i * m + j];
        }
    }
    Tensor::matrix(m, n, data)
}

/// Shared solver. `tau = None` keeps both marginals; `Some(tau)` relaxes the
/// row marginal with `tau * KL(pi 1 | a)`.
fn solve(c: &Tensor, a: &[f64], b: &[f64], tau: Option<f64>, opts: &SinkhornOptions) -> Result<DiscretePlan> {
    check_problem(c, a, b, opts)?;
    let (n, m) = (c.rows(), c.cols());
    let ct = transpose(c);
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let cmax = c.data().iter().cloned().fold(0.0, f64::max);

    let mut schedule = Vec::new();
    if opts.anneal {
        let mut e = cmax.max(opts.epsilon);
        while e > opts.epsilon {
            schedule.push(e);
            e *= 0.5;
        }
    }
    schedule.push(opts.epsilon);
    let last = schedule.len() - 1;

    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut tmp = vec![0.0; n];
    for (stage, &eps) in schedule.iter().enumerate() {
        let shrink = tau.map_or(1.0, |t| t / (t + eps));
        let stage_tol = if stage == last { opts.tol } else { opts.tol.max(1e-4) };
        // `tmp` holds the row soft-min for the current `g` once the first
        // residual of the stage has been measured.
        let mut rows_fresh = false;
        loop {
            if iterations >= opts.max_iter {
                return Err(Error::NoConvergence {
                    what: "Sinkhorn",
                    iterations,
                    residual,
                });
            }
            iterations += 1;
            if !rows_fresh {
                soft_min_rows(c, &g, &log_b, eps, &mut tmp);
            }
            for (fi, t) in f.iter_mut().zip(&tmp) {
                *fi = shrink * t;
            }
            if let Some(t) = tau {
                // Optimal common shift of (f, -g): makes the relaxed mass
                // match the exact one, which plain damped updates approach
                // only at rate tau / (tau + eps).
                let shift = t * log_sum_exp(f.iter().zip(&log_a).map(|(fi, la)| la - fi / t));
                f.iter_mut().for_each(|fi| *fi += shift);
            }
            soft_min_rows(&ct, &f, &log_a, eps, &mut g);
            // Columns are now exact; measure the row optimality condition.
            soft_min_rows(c, &g, &log_b, eps, &mut tmp);
            rows_fresh = true;
            residual = f
                .iter()
                .zip(&tmp)
                .zip(a)
                .map(|((fi, t), ai)| {
                    let row = ai * ((fi - t) / eps).exp();
                    let target = tau.map_or(*ai, |tv| ai * (-fi / tv).exp());
                    (row - target).abs()
                })
                .fold(0.0, f64::max);
            if !residual.is_finite() {
                return Err(Error::NonFinite("Sinkhorn duals".into()));
            }
            if residual <= stage_tol {
                break;
            }
        }
    }
    let eps = opts.epsilon;
    let mut plan = vec![0.0; n * m];
    plan.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        for j in 0..m {
            let cij = c.data()[i * m + j];
            row[j] = ((f[i] + g[j] - cij) / eps + log_a[i] + log_b[j]).exp();
        }
    });
    let cost: f64 = plan.iter().zip(c.data()).map(|(p, cij)| p * cij).sum();
    let plan = Tensor::matrix(n, m, plan);
    let mut out = DiscretePlan {
        plan,
        a: a.to_vec(),
        b: b.to_vec(),
        cost,
        objective: cost,
        iterations,
        residual,
    };
    if let Some(t) = tau {
        let rows = out.row_sums();
        let kl: f64 = rows
            .iter()
            .zip(a)
            .map(|(p, q)| if *p > 0.0 { p * (p / q).ln() - p + q } else { *q })
            .sum();
        out.objective = cost + t * kl;
    }
    Ok(out)
}

/// Entropic OT with both marginals fixed.
pub fn sinkhorn_balanced(c: &Tensor, a: &[f64], b: &[f64], opts: &SinkhornOptions) -> Result<DiscretePlan> {
    solve(c, a, b, None, opts)
}

/// Entropic OT with the row marginal relaxed by `tau * KL`; the column
/// marginal stays exact. Row duals are damped by `tau / (tau + eps)`.
pub fn sinkhorn_semi_unbalanced(
    c: &Tensor,
    a: &[f64],
    b: &[f64],
    tau: f64,
    opts: &SinkhornOptions,
) -> Result<DiscretePlan> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("tau must be positive".into()));
    }
    solve(c, a, b, Some(tau), opts)
}

/// Exact OT between uniform measures of equal size `n <= 7` by enumerating
/// permutations.
pub fn brute_force_ot(c: &Tensor) -> Result<DiscretePlan> {
    let (n, m) = c.as_matrix("cost matrix")?;
    if n != m || n == 0 {
        return Err(Error::InvalidArgument(format!("brute force needs a square matrix, got {n}x{m}")));
    }
    if n > MAX_BRUTE_FORCE {
        return Err(Error::InvalidArgument(format!(
            "brute force limited to n <= {MAX_BRUTE_FORCE}, got {n}"
        )));
    }
    let total = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(i, &j)| c.data()[i * n + j]).sum() };
    let best = (0..n)
        .permutations(n)
        .min_by(|x, y| total(x).total_cmp(&total(y)))
        .expect("at least one permutation");
    let w = 1.0 / n as f64;
    let mut plan = vec![0.0; n * n];
    for (i, &j) in best.iter().enumerate() {
        plan[i * n + j] = w;
    }
    let cost = total(&best) * w;
    Ok(DiscretePlan {
        plan: Tensor::matrix(n, n, plan),
        a: vec![w; n],
        b: vec![w; n],
        cost,
        objective: cost,
        iterations: 0,
        residual: 0.0,
    })
}

/// Pairwise costs `scale * |x_i - y_j|^2`.
pub fn squared_distances(x: &Tensor, y: &Tensor, scale: f64) -> Result<Tensor> {
    if x.cols() != y.cols() {
        return Err(Error::Shape {
            context: "point clouds".into(),
            expected: vec![x.cols()],
            got: vec![y.cols()],
        });
    }
    let m = y.rows();
    let mut data = vec![0.0; x.rows() * m];
    data.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let xi = x.row(i);
        for (j, out) in row.iter_mut().enumerate() {
            let s: f64 = xi.iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            *out = scale * s;
        }
    });
    Ok(Tensor::matrix(x.rows(), m, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct W2 {
    /// Squared distance under `|x - y|^2` (not halved).
    pub squared: f64,
    pub distance: f64,
}

/// Empirical W2 between equal-size uniform clouds via annealed Sinkhorn at
/// `epsilon = eps_ratio * mean(C)`.
pub fn w2_empirical(x: &Tensor, y: &Tensor, eps_ratio: f64) -> Result<W2> {
    if x.rows() != y.rows() {
        return Err(Error::Shape {
            context: "w2_empirical sample sizes".into(),
            expected: vec![x.rows()],
            got: vec![y.rows()],
        });
    }
    let n = x.rows();
    let c = squared_distances(x, y, 1.0)?;
    if c.data().iter().all(|&v| v == 0.0) {
        return Ok(W2 {
            squared: 0.0,
            distance: 0.0,
        });
    }
    let w = vec![1.0 / n as f64; n];
    let mut opts = SinkhornOptions::relative(&c, eps_ratio);
    opts.tol = 1e-6;
    let plan = sinkhorn_balanced(&c, &w, &w, &opts)?;
    let squared = plan.cost.max(0.0);
    Ok(W2 {
        squared,
        distance: squared.sqrt(),
    })
}

#[derive(Debug, Clone)]
pub struct InterpolationOracle {
    /// `T*(x_i)` for every row of the first cloud; this is also `Q*`.
    pub t_star: Tensor,
    /// Barycentric projection `T_uot(x_i)` onto the second cloud.
    pub t_uot: Tensor,
    /// Relaxed-marginal mass on each point of the second cloud.
    pub second_marginal: Vec<f64>,
    pub plan: DiscretePlan,
}

/// Two-marginal barycenter with the first side balanced and the second
/// relaxed by `tau * KL`, both under `|x - y|^2 / 2`.
///
/// The optimal barycenter lies on the displacement segments of a single
/// plan between the clouds. Dividing the weighted objective by
/// `lambda_1 lambda_2` leaves the transport term `|x - z|^2 / 2` with penalty
/// `tau / lambda_1` on the second marginal, so the plan is solved with the
/// second cloud on the (relaxed) rows and the first cloud on the exact
/// columns. `T*(x) = lambda_1 x + lambda_2 T_uot(x)`.
pub fn interpolated_barycenter_oracle(
    x1: &Tensor,
    x2: &Tensor,
    lambda: [f64; 2],
    tau: f64,
    eps_ratio: f64,
) -> Result<InterpolationOracle> {
    crate::model::validate_weights(&lambda)?;
    let c = squared_distances(x2, x1, 0.5)?;
    let a = vec![1.0 / x2.rows() as f64; x2.rows()];
    let b = vec![1.0 / x1.rows() as f64; x1.rows()];
    let mut opts = SinkhornOptions::relative(&c, eps_ratio);
    opts.tol = 1e-7;
    let plan = sinkhorn_semi_unbalanced(&c, &a, &b, tau / lambda[0], &opts)?;
    let d = x1.cols();
    let cols = plan.col_sums();
    let mut proj = vec![0.0; x1.rows() * d];
    for (i, prow) in plan.plan.iter_rows().enumerate() {
        let zi = x2.row(i);
        for (j, &p) in prow.iter().enumerate() {
            for (t, zv) in proj[j * d..(j + 1) * d].iter_mut().zip(zi) {
                *t += p * zv;
            }
        }
    }
    for (j, &mass) in cols.iter().enumerate() {
        if !(mass >= 1e-12) {
            return Err(Error::DegenerateRow { row: j, mass });
        }
        proj[j * d..(j + 1) * d].iter_mut().for_each(|v| *v /= mass);
    }
    let t_uot = Tensor::matrix(x1.rows(), d, proj);
    let t_star: Vec<f64> = x1
        .data()
        .iter()
        .zip(t_uot.data())
        .map(|(x, t)| lambda[0] * x + lambda[1] * t)
        .collect();
    Ok(InterpolationOracle {
        t_star: Tensor::matrix(x1.rows(), d, t_star),
        t_uot,
        second_marginal: plan.row_sums(),
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    #[test]
    fn one_by_one() {
        let c = Tensor::matrix(1, 1, vec![5.0]);
        let p = sinkhorn_balanced(&c, &[1.0], &[1.0], &SinkhornOptions::new(0.1)).unwrap();
        assert!((p.plan.data()[0] - 1.0).abs() < 1e-12);
        assert!((p.cost - 5.0).abs() < 1e-12);
    }

    #[test]
    fn identical_two_point_sets() {
        let x = Tensor::matrix(2, 1, vec![0.0, 1.0]);
        let c = squared_distances(&x, &x, 1.0).unwrap();
        let p = sinkhorn_balanced(&c, &uniform(2), &uniform(2), &SinkhornOptions::new(1e-3)).unwrap();
        assert!(p.cost < 1e-9);
        assert!((p.plan.data()[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn brute_force_examples() {
        let p = brute_force_ot(&Tensor::matrix(2, 2, vec![0., 1., 1., 0.])).unwrap();
        assert_eq!(p.cost, 0.0);
        assert_eq!(p.plan.data(), &[0.5, 0.0, 0.0, 0.5]);
        let p = brute_force_ot(&Tensor::matrix(2, 2, vec![1., 0., 0., 1.])).unwrap();
        assert_eq!(p.cost, 0.0);
        assert_eq!(p.plan.data(), &[0.0, 0.5, 0.5, 0.0]);
        assert!(brute_force_ot(&Tensor::zeros(&[8, 8])).is_err());
    }

    #[test]
    fn sinkhorn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let c = Tensor::matrix(5, 5, (0..25).map(|_| rng.gen::<f64>()).collect());
            let exact = brute_force_ot(&c).unwrap();
            let p = sinkhorn_balanced(&c, &uniform(5), &uniform(5), &SinkhornOptions::relative(&c, 1e-3))
                .unwrap();
            assert!((p.cost - exact.cost).abs() <= 1e-3 * exact.cost.max(1e-12));
        }
    }

    #[test]
    fn marginals_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Tensor::matrix(4, 6, (0..24).map(|_| rng.gen::<f64>() * 3.0).collect());
        let a = uniform(4);
        let b = uniform(6);
        let opts = SinkhornOptions::relative(&c, 1e-2);
        let p = sinkhorn_balanced(&c, &a, &b, &opts).unwrap();
        for (r, ai) in p.row_sums().iter().zip(&a) {
            assert!((r - ai).abs() < 1e-6);
        }
        let u = sinkhorn_semi_unbalanced(&c, &a, &b, 0.5, &opts).unwrap();
        for (s, bj) in u.col_sums().iter().zip(&b) {
            assert!((s - bj).abs() < 1e-6);
        }
        assert!(u.plan.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn one_atom_softmin() {
        for tau in [0.1, 1.0, 10.0] {
            let c = Tensor::matrix(2, 1, vec![0.0, 1.0]);
            let mut opts = SinkhornOptions::new(1e-4);
            opts.tol = 1e-12;
            let p = sinkhorn_semi_unbalanced(&c, &[0.5, 0.5], &[1.0], tau, &opts).unwrap();
            let expected = -tau * ((1.0 + (-1.0 / tau).exp()) / 2.0).ln();
            assert!((p.objective - expected).abs() <= 1e-3 * expected, "{tau}: {}", p.objective);
            let rows = p.row_sums();
            let z = 1.0 + (-1.0 / tau).exp();
            assert!((rows[0] - 1.0 / z).abs() < 1e-3);
        }
    }

    #[test]
    fn large_tau_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Tensor::matrix(4, 4, (0..16).map(|_| rng.gen::<f64>()).collect());
        let opts = SinkhornOptions::relative(&c, 0.05);
        let b = sinkhorn_balanced(&c, &uniform(4), &uniform(4), &opts).unwrap();
        let u = sinkhorn_semi_unbalanced(&c, &uniform(4), &uniform(4), 1e6, &opts).unwrap();
        for (x, y) in b.plan.data().iter().zip(u.plan.data()) {
            assert!((x - y).abs() <= 1e-4);
        }
    }

    #[test]
    fn small_tau_drops_far_cluster() {
        // Rows: two near points, two far points. One target atom at 0.
        let c = Tensor::matrix(4, 1, vec![0.0, 0.01, 4.0, 4.2]);
        let p = sinkhorn_semi_unbalanced(&c, &uniform(4), &[1.0], 0.01, &SinkhornOptions::new(1e-4))
            .unwrap();
        let rows = p.row_sums();
        assert!(rows[2] + rows[3] < 0.01);
    }

    #[test]
    fn entropic_cost_decreases_with_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Tensor::matrix(6, 6, (0..36).map(|_| rng.gen::<f64>()).collect());
        let mut prev = f64::INFINITY;
        for eps in [1.0, 0.3, 0.1, 0.03, 0.01] {
            let p = sinkhorn_balanced(&c, &uniform(6), &uniform(6), &SinkhornOptions::new(eps)).unwrap();
            assert!(p.cost <= prev + 1e-9);
            prev = p.cost;
        }
    }

    #[test]
    fn w2_examples() {
        let x = Tensor::matrix(3, 2, vec![0., 1., 2., 3., 4., 5.]);
        assert!(w2_empirical(&x, &x, 1e-3).unwrap().squared <= 1e-6);
        let w = w2_empirical(&Tensor::matrix(1, 1, vec![0.0]), &Tensor::matrix(1, 1, vec![1.0]), 1e-3).unwrap();
        assert!((w.squared - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::matrix(6, 2, (0..12).map(|_| rng.gen::<f64>()).collect());
        let b = Tensor::matrix(6, 2, (0..12).map(|_| rng.gen::<f64>() + 0.5).collect());
        let exact = brute_force_ot(&squared_distances(&a, &b, 1.0).unwrap()).unwrap();
        let w = w2_empirical(&a, &b, 1e-3).unwrap();
        assert!((w.squared - exact.cost).abs() <= 1e-3 * exact.cost);
    }

    #[test]
    fn oracle_midpoint() {
        let o = interpolated_barycenter_oracle(
            &Tensor::matrix(1, 1, vec![0.0]),
            &Tensor::matrix(1, 1, vec![2.0]),
            [0.5, 0.5],
            1e6,
            1e-3,
        )
        .unwrap();
        assert!((o.t_star.data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_identity_on_equal_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::matrix(30, 2, (0..60).map(|_| rng.gen::<f64>() * 4.0).collect());
        let o = interpolated_barycenter_oracle(&x, &x, [0.5, 0.5], 1e6, 1e-3).unwrap();
        let err = o
            .t_star
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }
}

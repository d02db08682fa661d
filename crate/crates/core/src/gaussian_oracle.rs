//! Closed-form Gaussian machinery: Bures–Wasserstein distance, the
//! fixed-point barycenter iteration for the quadratic cost, Gaussian OT maps
//! and moment fitting.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const SYMMETRY_TOL: f64 = 1e-10;

/// Mean and covariance of a Gaussian; serialized as `{mean, cov}` with `cov`
/// a list of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    DMatrix::from_fn(d, d, |i, j| rows[i][j])
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_spd(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let asym = (m - m.transpose()).abs().max();
    let scale = m.abs().max().max(1.0);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSpd(format!("{what}: asymmetry {asym:e}")));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        return Err(Error::NotSpd(format!("{what}: smallest eigenvalue {min:e}")));
    }
    Ok(eig)
}

fn eig_apply(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    let v = &eig.eigenvectors;
    symmetrize(&(v * d * v.transpose()))
}

/// Principal square root of a symmetric positive (semi)definite matrix.
pub fn sqrtm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let asym = (m - m.transpose()).abs().max();
    if asym > SYMMETRY_TOL * m.abs().max().max(1.0) {
        return Err(Error::NotSpd(format!("sqrtm: asymmetry {asym:e}")));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig.eigenvalues.min();
    if min < -1e-10 * eig.eigenvalues.max().abs().max(1.0) {
        return Err(Error::NotSpd(format!("sqrtm: eigenvalue {min:e}")));
    }
    Ok(eig_apply(&eig, |l| l.max(0.0).sqrt()))
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(Error::Shape {
                context: "Gaussian covariance".into(),
                expected: vec![d, d],
                got: vec![cov.len(), cov.first().map_or(0, Vec::len)],
            });
        }
        check_spd(&to_matrix(&cov), "covariance")?;
        Ok(Self { mean, cov })
    }

    pub fn from_matrix(mean: Vec<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        Self::new(mean, from_matrix(cov))
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            cov: from_matrix(&DMatrix::identity(dim, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.cov)
    }

    /// Trace of the covariance.
    pub fn total_variance(&self) -> f64 {
        (0..self.dim()).map(|i| self.cov[i][i]).sum()
    }

    /// `n` draws via the Cholesky factor.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        let d = self.dim();
        let chol = nalgebra::Cholesky::new(self.cov_matrix())
            .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?;
        let l = chol.l();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            let x = &l * z;
            data.extend((0..d).map(|i| self.mean[i] + x[i]));
        }
        Ok(Tensor::matrix(n, d, data))
    }
}

/// Squared Bures–Wasserstein distance
/// `|m1 - m2|^2 + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2})`.
pub fn bw2(g1: &GaussianParams, g2: &GaussianParams) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::Shape {
            context: "bw2".into(),
            expected: vec![g1.dim()],
            got: vec![g2.dim()],
        });
    }
    let s1 = g1.cov_matrix();
    let s2 = g2.cov_matrix();
    check_spd(&s1, "bw2 lhs")?;
    check_spd(&s2, "bw2 rhs")?;
    let mean_term: f64 = g1.mean.iter().zip(&g2.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let r1 = sqrtm(&s1)?;
    let cross = sqrtm(&symmetrize(&(&r1 * &s2 * &r1)))?;
    let trace = s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(mean_term + trace.max(0.0))
}

#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub barycenter: GaussianParams,
    pub iterations: usize,
    pub residual: f64,
}

/// Fixed-point iteration for the quadratic-cost barycenter of Gaussians:
///
/// ```text
/// S <- S^{-1/2} (sum_k lambda_k (S^{1/2} S_k S^{1/2})^{1/2})^2 S^{-1/2}
/// ```
///
/// started from `sum_k lambda_k S_k`; stops when the Bures–Wasserstein change
/// between iterates is at most `tol`.
pub fn fixed_point_barycenter(
    gaussians: &[GaussianParams],
    weights: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointResult> {
    if gaussians.is_empty() || gaussians.len() != weights.len() {
        return Err(Error::InvalidArgument(
            "need one weight per Gaussian".into(),
        ));
    }
    crate::model::validate_weights(weights)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let d = gaussians[0].dim();
    let covs: Vec<DMatrix<f64>> = gaussians.iter().map(GaussianParams::cov_matrix).collect();
    for (k, c) in covs.iter().enumerate() {
        check_spd(c, &format!("input {}", k + 1))?;
    }
    let mut mean = vec![0.0; d];
    for (g, w) in gaussians.iter().zip(weights) {
        for (m, v) in mean.iter_mut().zip(&g.mean) {
            *m += w * v;
        }
    }
    let mut s = covs
        .iter()
        .zip(weights)
        .fold(DMatrix::zeros(d, d), |acc, (c, w)| acc + c * *w);
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let eig = check_spd(&s, "fixed-point iterate")?;
        let root = eig_apply(&eig, f64::sqrt);
        let inv_root = eig_apply(&eig, |l| 1.0 / l.sqrt());
        let mut inner = DMatrix::zeros(d, d);
        for (c, w) in covs.iter().zip(weights) {
            inner += sqrtm(&symmetrize(&(&root * c * &root)))? * *w;
        }
        let next = symmetrize(&(&inv_root * &inner * &inner * &inv_root));
        let prev = GaussianParams::from_matrix(mean.clone(), &s)?;
        let cur = GaussianParams::from_matrix(mean.clone(), &next)?;
        residual = bw2(&prev, &cur)?;
        s = next;
        if residual <= tol {
            return Ok(FixedPointResult {
                barycenter: cur,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::NoConvergence {
        what: "fixed-point barycenter",
        iterations: max_iter,
        residual,
    })
}

/// Affine OT map between Gaussians: `T(x) = mean_to + A (x - mean_from)` with
/// `A = S1^{-1/2} (S1^{1/2} S2 S1^{1/2})^{1/2} S1^{-1/2}`.
#[derive(Debug, Clone)]
pub struct GaussianMap {
    pub matrix: DMatrix<f64>,
    pub mean_from: Vec<f64>,
    pub mean_to: Vec<f64>,
}

impl GaussianMap {
    pub fn between(from: &GaussianParams, to: &GaussianParams) -> Result<Self> {
        let s1 = from.cov_matrix();
        let eig = check_spd(&s1, "map source")?;
        let r = eig_apply(&eig, f64::sqrt);
        let ri = eig_apply(&eig, |l| 1.0 / l.sqrt());
        let mid = sqrtm(&symmetrize(&(&r * to.cov_matrix() * &r)))?;
        Ok(Self {
            matrix: symmetrize(&(&ri * mid * &ri)),
            mean_from: from.mean.clone(),
            mean_to: to.mean.clone(),
        })
    }

    pub fn apply(&self, xs: &Tensor) -> Tensor {
        let d = self.mean_from.len();
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.iter_rows() {
            let c = DVector::from_fn(d, |i, _| row[i] - self.mean_from[i]);
            let y = &self.matrix * c;
            out.extend((0..d).map(|i| self.mean_to[i] + y[i]));
        }
        Tensor::matrix(xs.rows(), d, out)
    }
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(samples: &Tensor) -> Result<GaussianParams> {
    let (n, d) = (samples.rows(), samples.cols());
    if n <= d {
        return Err(Error::RankDeficient { n, dim: d });
    }
    let mut mean = vec![0.0; d];
    for row in samples.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for row in samples.iter_rows() {
        let c = DVector::from_fn(d, |i, _| row[i] - mean[i]);
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    let cov = symmetrize(&cov);
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.max();
    if !(eig.eigenvalues.min() > 1e-12 * max.max(f64::MIN_POSITIVE)) {
        return Err(Error::RankDeficient { n, dim: d });
    }
    GaussianParams::from_matrix(mean, &cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag(mean: Vec<f64>, vars: &[f64]) -> GaussianParams {
        let d = vars.len();
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { vars[i] } else { 0.0 }).collect())
            .collect();
        GaussianParams::new(mean, cov).unwrap()
    }

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> GaussianParams {
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.5;
        let mean = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        GaussianParams::from_matrix(mean, &cov).unwrap()
    }

    #[test]
    fn bw2_closed_forms() {
        let a = diag(vec![0.0], &[1.0]);
        let b = diag(vec![0.0], &[4.0]);
        assert!((bw2(&a, &b).unwrap() - 1.0).abs() <= 1e-10);
        assert_eq!(bw2(&a, &a).unwrap(), 0.0);
        let c = diag(vec![1.0, 2.0], &[2.0, 3.0]);
        let d = diag(vec![-1.0, 0.0], &[2.0, 3.0]);
        assert!((bw2(&c, &d).unwrap() - 8.0).abs() < 1e-10);
    }

    #[test]
    fn bw2_symmetric_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = random_spd(3, &mut rng);
            let b = random_spd(3, &mut rng);
            let ab = bw2(&a, &b).unwrap();
            assert!(ab >= 0.0);
            assert!((ab - bw2(&b, &a).unwrap()).abs() < 1e-9);
            assert!(bw2(&a, &a).unwrap() < 1e-10);
        }
    }

    #[test]
    fn sqrtm_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in [1, 2, 5, 16] {
            let s = random_spd(d, &mut rng).cov_matrix();
            let r = sqrtm(&s).unwrap();
            assert!((&r * &r - &s).norm() <= 1e-10 * s.norm().max(1.0));
        }
    }

    #[test]
    fn rejects_non_spd() {
        assert!(GaussianParams::new(vec![0.0, 0.0], vec![vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
        assert!(GaussianParams::new(vec![0.0, 0.0], vec![vec![1.0, 0.5], vec![0.4, 1.0]]).is_err());
        assert!(GaussianParams::new(vec![0.0], vec![vec![0.0]]).is_err());
    }

    #[test]
    fn fixed_point_one_dimensional() {
        let gs = [diag(vec![0.0], &[1.0]), diag(vec![2.0], &[9.0])];
        let r = fixed_point_barycenter(&gs, &[0.5, 0.5], 1e-12, 10_000).unwrap();
        assert!((r.barycenter.cov[0][0].sqrt() - 2.0).abs() <= 1e-8);
        assert!((r.barycenter.mean[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_commuting() {
        let gs = [diag(vec![0.0, 0.0], &[1.0, 4.0]), diag(vec![0.0, 0.0], &[4.0, 1.0])];
        let r = fixed_point_barycenter(&gs, &[0.5, 0.5], 1e-12, 10_000).unwrap();
        assert!((r.barycenter.cov[0][0] - 2.25).abs() < 1e-8);
        assert!((r.barycenter.cov[1][1] - 2.25).abs() < 1e-8);
        assert!(r.barycenter.cov[0][1].abs() < 1e-8);
    }

    #[test]
    fn fixed_point_identical_inputs_one_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_spd(4, &mut rng);
        let r = fixed_point_barycenter(&[g.clone(), g.clone(), g.clone()], &[0.25, 0.25, 0.5], 1e-10, 100)
            .unwrap();
        assert_eq!(r.iterations, 1);
        assert!(bw2(&r.barycenter, &g).unwrap() < 1e-10);
    }

    #[test]
    fn fixed_point_is_stationary_for_maps() {
        // Maps from the barycenter to each input average to the identity.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gs: Vec<_> = (0..3).map(|_| random_spd(3, &mut rng)).collect();
        let w = [0.25, 0.25, 0.5];
        let r = fixed_point_barycenter(&gs, &w, 1e-12, 10_000).unwrap();
        let mut sum = DMatrix::zeros(3, 3);
        for (g, wk) in gs.iter().zip(w) {
            sum += GaussianMap::between(&r.barycenter, g).unwrap().matrix * wk;
        }
        assert!((sum - DMatrix::identity(3, 3)).norm() < 1e-6);
    }

    #[test]
    fn gaussian_map_pushes_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_spd(2, &mut rng);
        let b = random_spd(2, &mut rng);
        let map = GaussianMap::between(&a, &b).unwrap();
        // A S_a A = S_b
        let pushed = &map.matrix * a.cov_matrix() * &map.matrix;
        assert!((pushed - b.cov_matrix()).norm() < 1e-9);
    }

    #[test]
    fn fit_constant_is_rank_deficient() {
        let s = Tensor::matrix(10, 2, vec![1.0; 20]);
        assert!(matches!(fit_gaussian(&s), Err(Error::RankDeficient { .. })));
        let few = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        assert!(fit_gaussian(&few).is_err());
    }

    #[test]
    fn fit_symmetric_points() {
        let s = Tensor::matrix(4, 2, vec![1.0, 2.0, -1.0, -2.0, 2.0, -1.0, -2.0, 1.0]);
        let g = fit_gaussian(&s).unwrap();
        assert_eq!(g.mean, vec![0.0, 0.0]);
    }

    #[test]
    fn fit_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = GaussianParams::standard(2).sample(100_000, &mut rng).unwrap();
        let g = fit_gaussian(&s).unwrap();
        let mean_norm = g.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(mean_norm <= 0.02);
        let diff = g.cov_matrix() - DMatrix::<f64>::identity(2, 2);
        assert!(diff.norm() <= 0.05);
    }
}

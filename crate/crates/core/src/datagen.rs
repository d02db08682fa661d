//! Seeded synthetic marginals.
//!
//! Every generator is a mixture; each draw first picks a component, then a
//! point from it, so component counts are multinomial. Labels are component
//! indices.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform, WeightedIndex};

use crate::error::{Error, Result};
use crate::gaussian_oracle::GaussianParams;
use crate::numeric::Tensor;

/// Something that can produce i.i.d. batches.
pub trait PointSource: Send + Sync {
    fn dim(&self) -> usize;
    fn sample_labeled(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Sample>;

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(self.sample_labeled(n, rng)?.points)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub points: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Spiral,
    Moons,
    Gm8,
    ImbalanceP1,
    ImbalanceP2,
    OutlierP1,
    OutlierP2,
    OutlierP3,
    Gaussian(GaussianParams),
}

pub const NAMES: [&str; 9] = [
    "spiral",
    "moons",
    "gm8",
    "imbalance_p1",
    "imbalance_p2",
    "outlier_p1",
    "outlier_p2",
    "outlier_p3",
    "gaussian",
];

impl FromStr for Dataset {
    type Err = Error;

    /// Named datasets only; Gaussians need parameters and are built directly.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "spiral" => Self::Spiral,
            "moons" => Self::Moons,
            "gm8" => Self::Gm8,
            "imbalance_p1" => Self::ImbalanceP1,
            "imbalance_p2" => Self::ImbalanceP2,
            "outlier_p1" => Self::OutlierP1,
            "outlier_p2" => Self::OutlierP2,
            "outlier_p3" => Self::OutlierP3,
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset `{other}` (expected one of {})",
                    NAMES.join(", ")
                )))
            }
        })
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Spiral => "spiral",
            Self::Moons => "moons",
            Self::Gm8 => "gm8",
            Self::ImbalanceP1 => "imbalance_p1",
            Self::ImbalanceP2 => "imbalance_p2",
            Self::OutlierP1 => "outlier_p1",
            Self::OutlierP2 => "outlier_p2",
            Self::OutlierP3 => "outlier_p3",
            Self::Gaussian(_) => "gaussian",
        };
        f.write_str(s)
    }
}

/// Isotropic 2-D component.
struct Blob {
    weight: f64,
    mean: [f64; 2],
    sigma: f64,
}

fn blobs(spec: &[(f64, [f64; 2], f64)]) -> Vec<Blob> {
    spec.iter()
        .map(|&(weight, mean, sigma)| Blob { weight, mean, sigma })
        .collect()
}

const OUTLIER_SHARE: f64 = 0.05;

fn with_outliers(inliers: [[f64; 2]; 4], outliers: [[f64; 2]; 4]) -> Vec<Blob> {
    let wi = (1.0 - OUTLIER_SHARE) / 4.0;
    let wo = OUTLIER_SHARE / 4.0;
    let mut v: Vec<_> = inliers.iter().map(|&m| (wi, m, 0.1)).collect();
    v.extend(outliers.iter().map(|&m| (wo, m, 0.02)));
    blobs(&v)
}

// Moons before standardization: outer arc (cos t, sin t), inner arc
// (1 - cos t, 0.5 - sin t), t ~ U[0, pi], equal shares, noise 0.1.
const MOONS_NOISE: f64 = 0.1;
const MOONS_MEAN: [f64; 2] = [0.5, 0.25];

fn moons_std() -> [f64; 2] {
    let n2 = MOONS_NOISE * MOONS_NOISE;
    let var_x = 0.75 + n2;
    let var_y = 0.5625 - std::f64::consts::FRAC_1_PI + n2;
    [var_x.sqrt(), var_y.sqrt()]
}

const SPIRAL_RATE: f64 = 0.35;
const SPIRAL_NOISE: f64 = 0.05;

impl Dataset {
    fn mixture(&self) -> Option<Vec<Blob>> {
        Some(match self {
            Self::Gm8 => {
                let v: Vec<_> = (0..8)
                    .map(|i| {
                        let a = std::f64::consts::TAU * i as f64 / 8.0;
                        (1.0 / 8.0, [4.0 * a.cos(), 4.0 * a.sin()], 0.2)
                    })
                    .collect();
                blobs(&v)
            }
            Self::ImbalanceP1 => blobs(&[(0.25, [-5.0, 4.0], 0.4), (0.75, [-5.0, -4.0], 0.4)]),
            Self::ImbalanceP2 => blobs(&[(0.75, [5.0, 4.0], 0.4), (0.25, [5.0, -4.0], 0.4)]),
            Self::OutlierP1 => with_outliers(
                [[-5.0, -1.0], [5.0, 1.0], [1.0, -5.0], [-1.0, 5.0]],
                [[10.0, 2.0], [10.0, 1.0], [10.0, 0.0], [10.0, -1.0]],
            ),
            Self::OutlierP2 => with_outliers(
                [[-5.0, 1.0], [5.0, -1.0], [1.0, 5.0], [-1.0, -5.0]],
                [[-10.0, 1.0], [-10.0, 0.0], [10.0, -1.0], [10.0, -2.0]],
            ),
            Self::OutlierP3 => blobs(&[
                (0.25, [-5.0, 0.0], 0.1),
                (0.25, [5.0, 0.0], 0.1),
                (0.25, [0.0, 5.0], 0.1),
                (0.25, [0.0, -5.0], 0.1),
            ]),
            _ => return None,
        })
    }

    /// Whether `label` marks an outlier component.
    pub fn is_outlier(&self, label: usize) -> bool {
        matches!(self, Self::OutlierP1 | Self::OutlierP2) && label >= 4
    }

    /// Label of the heavier component for the imbalance pair.
    pub fn majority_label(&self) -> Option<usize> {
        match self {
            Self::ImbalanceP1 => Some(1),
            Self::ImbalanceP2 => Some(0),
            _ => None,
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Sample> {
        if n == 0 {
            return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_labeled(n, &mut rng)
    }
}

impl PointSource for Dataset {
    fn dim(&self) -> usize {
        match self {
            Self::Gaussian(g) => g.dim(),
            _ => 2,
        }
    }

    fn sample_labeled(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
        if let Self::Gaussian(g) = self {
            return Ok(Sample {
                points: g.sample(n, rng)?,
                labels: vec![0; n],
            });
        }
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        match self {
            Self::Spiral => {
                let phi = Uniform::new_inclusive(1.0, 4.0 * std::f64::consts::PI);
                let noise = Normal::new(0.0, SPIRAL_NOISE).expect("valid sigma");
                let scale = 2.0 / (SPIRAL_RATE * 4.0 * std::f64::consts::PI);
                for _ in 0..n {
                    let p: f64 = phi.sample(rng);
                    let r = SPIRAL_RATE * p * scale;
                    data.push(r * p.cos() + noise.sample(rng));
                    data.push(r * p.sin() + noise.sample(rng));
                    labels.push(0);
                }
            }
            Self::Moons => {
                let t = Uniform::new_inclusive(0.0, std::f64::consts::PI);
                let sd = moons_std();
                for _ in 0..n {
                    let inner = rng.gen_bool(0.5);
                    let a: f64 = t.sample(rng);
                    let (x, y) = if inner {
                        (1.0 - a.cos(), 0.5 - a.sin())
                    } else {
                        (a.cos(), a.sin())
                    };
                    let ex: f64 = StandardNormal.sample(rng);
                    let ey: f64 = StandardNormal.sample(rng);
                    data.push((x + MOONS_NOISE * ex - MOONS_MEAN[0]) / sd[0]);
                    data.push((y + MOONS_NOISE * ey - MOONS_MEAN[1]) / sd[1]);
                    labels.push(usize::from(inner));
                }
            }
            _ => {
                let comps = self.mixture().expect("mixture dataset");
                let pick = WeightedIndex::new(comps.iter().map(|c| c.weight))
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                for _ in 0..n {
                    let j = pick.sample(rng);
                    let c = &comps[j];
                    let ex: f64 = StandardNormal.sample(rng);
                    let ey: f64 = StandardNormal.sample(rng);
                    data.push(c.mean[0] + c.sigma * ex);
                    data.push(c.mean[1] + c.sigma * ey);
                    labels.push(j);
                }
            }
        }
        Ok(Sample {
            points: Tensor::matrix(n, 2, data),
            labels,
        })
    }
}

/// Resamples rows of a fixed point set uniformly with replacement.
#[derive(Debug, Clone)]
pub struct Empirical {
    points: Tensor,
    labels: Vec<usize>,
}

impl Empirical {
    pub fn new(points: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if points.rows() == 0 {
            return Err(Error::InvalidArgument("empty empirical source".into()));
        }
        let labels = labels.unwrap_or_else(|| vec![0; points.rows()]);
        if labels.len() != points.rows() {
            return Err(Error::Shape {
                context: "empirical labels".into(),
                expected: vec![points.rows()],
                got: vec![labels.len()],
            });
        }
        Ok(Self { points, labels })
    }
}

impl PointSource for Empirical {
    fn dim(&self) -> usize {
        self.points.cols()
    }

    fn sample_labeled(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.points.rows())).collect();
        Ok(Sample {
            points: self.points.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// `k` random Gaussians in dimension `dim`: means uniform in `[-2, 2]^dim`,
/// covariances `Q diag(e) Q^T` with `e` uniform in `[0.5, 2]` and `Q` a random
/// orthogonal matrix.
pub fn gaussian_instances(dim: usize, k: usize, seed: u64) -> Result<Vec<GaussianParams>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let mean: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..=2.0)).collect();
            let a = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
            let q = a.qr().q();
            let e = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(dim, |_, _| {
                rng.gen_range(0.5f64..=2.0)
            }));
            let cov: DMatrix<f64> = &q * e * q.transpose();
            GaussianParams::from_matrix(mean, &((&cov + cov.transpose()) * 0.5))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frac(labels: &[usize], pred: impl Fn(usize) -> bool) -> f64 {
        labels.iter().filter(|&&l| pred(l)).count() as f64 / labels.len() as f64
    }

    #[test]
    fn deterministic_per_seed() {
        for name in &NAMES[..8] {
            let d: Dataset = name.parse().unwrap();
            let a = d.generate(100, 7).unwrap();
            assert_eq!(a, d.generate(100, 7).unwrap());
            assert_ne!(a.points, d.generate(100, 8).unwrap().points);
        }
    }

    #[test]
    fn unknown_name() {
        assert!("swissroll".parse::<Dataset>().is_err());
    }

    #[test]
    fn imbalance_upper_mode_quarter() {
        let n = 10_000;
        let s = Dataset::ImbalanceP1.generate(n, 1).unwrap();
        let upper = s.points.iter_rows().filter(|r| r[1] > 0.0).count() as f64 / n as f64;
        let se = (0.25f64 * 0.75 / n as f64).sqrt();
        assert!((upper - 0.25).abs() <= 3.0 * se, "{upper}");
    }

    #[test]
    fn outlier_p3_bounded() {
        let s = Dataset::OutlierP3.generate(20_000, 2).unwrap();
        assert!(s.points.iter_rows().all(|r| (r[0] * r[0] + r[1] * r[1]).sqrt() <= 6.0));
    }

    #[test]
    fn outlier_p1_five_percent_far_right() {
        let n = 10_000;
        let s = Dataset::OutlierP1.generate(n, 3).unwrap();
        let far = s.points.iter_rows().filter(|r| (r[0] - 10.0).abs() < 0.5).count() as f64 / n as f64;
        let se = (0.05f64 * 0.95 / n as f64).sqrt();
        assert!((far - 0.05).abs() <= 3.0 * se, "{far}");
        let lab = frac(&s.labels, |l| Dataset::OutlierP1.is_outlier(l));
        assert_eq!(lab, far);
    }

    #[test]
    fn component_frequencies() {
        let n = 100_000;
        let s = Dataset::Gm8.generate(n, 4).unwrap();
        for j in 0..8 {
            let p = frac(&s.labels, |l| l == j);
            assert!((p - 0.125).abs() <= 4.0 * (0.125f64 * 0.875 / n as f64).sqrt());
        }
        let s = Dataset::OutlierP2.generate(n, 5).unwrap();
        let p = frac(&s.labels, |l| l >= 4);
        assert!((p - 0.05).abs() <= 4.0 * (0.05f64 * 0.95 / n as f64).sqrt());
    }

    #[test]
    fn moons_standardized() {
        let n = 200_000;
        let s = Dataset::Moons.generate(n, 6).unwrap();
        for c in 0..2 {
            let v: Vec<f64> = s.points.iter_rows().map(|r| r[c]).collect();
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.01, "{mean}");
            assert!((var - 1.0).abs() < 0.02, "{var}");
        }
    }

    #[test]
    fn spiral_inside_box() {
        let s = Dataset::Spiral.generate(5000, 7).unwrap();
        assert!(s.points.data().iter().all(|v| v.abs() <= 2.3));
    }

    #[test]
    fn gaussian_instances_spectrum() {
        let gs = gaussian_instances(4, 3, 11).unwrap();
        assert_eq!(gs, gaussian_instances(4, 3, 11).unwrap());
        for g in gs {
            let e = nalgebra::SymmetricEigen::new(g.cov_matrix()).eigenvalues;
            assert!(e.iter().all(|&l| (0.5 - 1e-9..=2.0 + 1e-9).contains(&l)));
        }
    }

    #[test]
    fn empirical_resamples() {
        let pts = Tensor::matrix(2, 1, vec![0.0, 1.0]);
        let src = Empirical::new(pts, Some(vec![3, 4])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = src.sample_labeled(50, &mut rng).unwrap();
        assert!(s.labels.iter().all(|&l| l == 3 || l == 4));
        assert!(s
            .points
            .data()
            .iter()
            .zip(&s.labels)
            .all(|(&p, &l)| p == (l - 3) as f64));
    }
}

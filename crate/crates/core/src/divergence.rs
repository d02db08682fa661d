//! ψ-divergences through their convex conjugates.
//!
//! Each kind is scaled by an unbalancedness `tau > 0`; the conjugate satisfies
//! `conj(0) = 0` and `conj_grad(0) = 1` because the generator vanishes only at
//! `u = 1`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Largest `t / tau` accepted by exponential conjugates.
pub const EXP_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DivergenceKind {
    /// Hard marginal constraint; conjugate is the identity.
    Balanced,
    Kl,
    ChiSquared,
    Softplus,
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Self::Balanced),
            "kl" => Ok(Self::Kl),
            "chi2" => Ok(Self::ChiSquared),
            "softplus" => Ok(Self::Softplus),
            other => Err(Error::Config(format!(
                "unknown divergence `{other}` (expected balanced|kl|chi2|softplus)"
            ))),
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Balanced => "balanced",
            Self::Kl => "kl",
            Self::ChiSquared => "chi2",
            Self::Softplus => "softplus",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    kind: DivergenceKind,
    tau: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Divergence {
    pub fn new(kind: DivergenceKind, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {tau}")));
        }
        Ok(Self { kind, tau })
    }

    pub fn balanced() -> Self {
        Self {
            kind: DivergenceKind::Balanced,
            tau: 1.0,
        }
    }

    pub fn kl(tau: f64) -> Result<Self> {
        Self::new(DivergenceKind::Kl, tau)
    }

    pub fn kind(&self) -> DivergenceKind {
        self.kind
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn is_balanced(&self) -> bool {
        self.kind == DivergenceKind::Balanced
    }

    fn check(&self, t: f64) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("divergence argument t = {t}")));
        }
        if self.kind == DivergenceKind::Kl && t > EXP_LIMIT * self.tau {
            return Err(Error::Overflow { t, tau: self.tau });
        }
        Ok(())
    }

    /// Convex conjugate `ψ̄(t)`.
    pub fn conj(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        let tau = self.tau;
        Ok(match self.kind {
            DivergenceKind::Balanced => t,
            DivergenceKind::Kl => tau * (t / tau).exp_m1(),
            DivergenceKind::ChiSquared => {
                if t >= -2.0 * tau {
                    t + t * t / (4.0 * tau)
                } else {
                    -tau
                }
            }
            DivergenceKind::Softplus => {
                2.0 * tau * softplus(t / tau) - 2.0 * tau * std::f64::consts::LN_2
            }
        })
    }

    /// Derivative `∇ψ̄(t)`: the density ratio of the relaxed marginal.
    pub fn conj_grad(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        let tau = self.tau;
        Ok(match self.kind {
            DivergenceKind::Balanced => 1.0,
            DivergenceKind::Kl => (t / tau).exp(),
            DivergenceKind::ChiSquared => (1.0 + t / (2.0 * tau)).max(0.0),
            DivergenceKind::Softplus => 2.0 * sigmoid(t / tau),
        })
    }

    /// Generator `ψ(u)` for `u >= 0`; `+inf` outside its domain.
    pub fn primal(&self, u: f64) -> f64 {
        let tau = self.tau;
        let xlogx = |x: f64| if x == 0.0 { 0.0 } else { x * x.ln() };
        match self.kind {
            DivergenceKind::Balanced => {
                if u == 1.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            DivergenceKind::Kl if u >= 0.0 => tau * (xlogx(u) - u + 1.0),
            DivergenceKind::ChiSquared if u >= 0.0 => tau * (u - 1.0) * (u - 1.0),
            DivergenceKind::Softplus if (0.0..=2.0).contains(&u) => {
                tau * (xlogx(u) + xlogx(2.0 - u))
            }
            _ => f64::INFINITY,
        }
    }
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_balanced() {
            write!(f, "balanced")
        } else {
            write!(f, "{}(tau={})", self.kind, self.tau)
        }
    }
}

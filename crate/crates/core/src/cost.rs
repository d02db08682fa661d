//! Transport costs `c(x, y)`.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numeric::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    Quadratic,
}

impl FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(Self::Quadratic),
            other => Err(Error::Config(format!(
                "unknown cost `{other}` (expected quadratic)"
            ))),
        }
    }
}

/// `alpha/2 * |x - y|^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostFn {
    pub kind: CostKind,
    pub alpha: f64,
}

impl Default for CostFn {
    fn default() -> Self {
        Self::quadratic()
    }
}

impl CostFn {
    pub fn quadratic() -> Self {
        Self {
            kind: CostKind::Quadratic,
            alpha: 1.0,
        }
    }

    pub fn new(kind: CostKind, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("cost alpha must be positive, got {alpha}")));
        }
        Ok(Self { kind, alpha })
    }

    fn check(x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != y.len() {
            return Err(Error::Shape {
                context: "cost arguments".into(),
                expected: vec![x.len()],
                got: vec![y.len()],
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Self::check(x, y)?;
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(0.5 * self.alpha * sq)
    }

    pub fn grad_y(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        Self::check(x, y)?;
        Ok(x.iter().zip(y).map(|(a, b)| self.alpha * (b - a)).collect())
    }

    /// Row-wise cost between two `n x d` batches, recorded on `tape` (`n x 1`).
    pub fn record(&self, tape: &mut Tape, x: NodeId, y: NodeId) -> Result<NodeId> {
        let diff = tape.sub(y, x)?;
        let sq = tape.square(diff);
        let s = tape.sum_cols(sq);
        Ok(tape.scale(s, 0.5 * self.alpha))
    }
}

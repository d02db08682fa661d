use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// `(beta1, beta2) = (0, 0.9)`, `eps = 1e-8`.
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter group. Minimizes; negate gradients to ascend.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = first.clone();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} moment buffers, {} params, {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            p.same_shape(g, "adam grad")?;
            p.same_shape(&self.first[i], "adam moment")?;
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("param{i}"));
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]);
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), [&p]);
        for _ in 0..5 {
            st.step(&mut [&mut p], &[Tensor::zeros(&[1, 3])], &names(1)).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn beta1_zero_first_moment_is_gradient() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(AdamConfig::with_lr(1e-3), [&p]);
        for g in [0.5, -2.0, 3.25] {
            st.step(&mut [&mut p], &[Tensor::scalar(g)], &names(1)).unwrap();
            assert_eq!(st.first_moments()[0].data(), &[g]);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(AdamConfig::with_lr(1e-3), [&p]);
        st.step(&mut [&mut p], &[Tensor::scalar(1.0)], &names(1)).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_reports_name() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(AdamConfig::with_lr(1e-3), [&p]);
        let err = st
            .step(&mut [&mut p], &[Tensor::scalar(f64::NAN)], &["g1.layer0.bias".into()])
            .unwrap_err();
        assert!(err.to_string().contains("g1.layer0.bias"));
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::matrix(1, 2, vec![3.0, 4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].squared_norm() - 1.0).abs() < 1e-12);
    }
}

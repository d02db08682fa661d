#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unotb::numeric::{Mlp, Tape, Tensor};

const H: f64 = 1e-6;

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Random MLP with random biases, a random batch and a nonlinear scalar loss.
pub struct GradCase {
    pub net: Mlp,
    pub x: Tensor,
}

impl GradCase {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = rng.gen_range(1..=3);
        let mut widths = vec![rng.gen_range(1..=4)];
        for _ in 0..depth {
            widths.push(rng.gen_range(2..=8));
        }
        widths.push(rng.gen_range(1..=3));
        let mut net = Mlp::new(&widths, &mut rng).unwrap();
        for p in net.parameters_mut() {
            let shape = p.shape().to_vec();
            *p = random_tensor(shape[0], shape[1], &mut rng);
        }
        let x = random_tensor(rng.gen_range(1..=6), widths[0], &mut rng);
        Self { net, x }
    }

    /// `mean(out^2) + mean(out)`.
    fn loss(&self, net: &Mlp, x: &Tensor) -> f64 {
        let out = net.forward(x).unwrap();
        let n = out.len() as f64;
        out.data().iter().map(|v| v * v + v).sum::<f64>() / n
    }

    /// Parameter gradients followed by the input gradient.
    pub fn analytic(&self) -> Vec<Tensor> {
        let mut tape = Tape::new();
        let binding = self.net.bind(&mut tape, true);
        let x = tape.param(self.x.clone());
        let out = self.net.record(&mut tape, &binding, x).unwrap();
        let sq = tape.square(out);
        let sum = tape.add(sq, out).unwrap();
        let loss = tape.mean(sum);
        let grads = tape.backward(loss).unwrap();
        let mut all = binding.gradients(&self.net, &grads);
        all.push(grads.get_or_zeros(x, self.x.shape()));
        all
    }

    pub fn numeric(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        let n_params = self.net.parameters().len();
        for p in 0..n_params {
            let shape = self.net.parameters()[p].shape().to_vec();
            let mut g = Vec::new();
            for i in 0..self.net.parameters()[p].len() {
                let eval = |delta: f64| {
                    let mut net = self.net.clone();
                    let mut params = net.parameters_mut();
                    let mut data = params[p].data().to_vec();
                    data[i] += delta;
                    *params[p] = Tensor::new(shape.clone(), data).unwrap();
                    self.loss(&net, &self.x)
                };
                g.push((eval(H) - eval(-H)) / (2.0 * H));
            }
            out.push(Tensor::new(shape, g).unwrap());
        }
        let mut g = Vec::new();
        for i in 0..self.x.len() {
            let eval = |delta: f64| {
                let mut data = self.x.data().to_vec();
                data[i] += delta;
                self.loss(&self.net, &Tensor::new(self.x.shape().to_vec(), data).unwrap())
            };
            g.push((eval(H) - eval(-H)) / (2.0 * H));
        }
        out.push(Tensor::new(self.x.shape().to_vec(), g).unwrap());
        out
    }

    /// `|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)` over the concatenated gradients.
    pub fn relative_error(&self) -> f64 {
        let a: Vec<f64> = self.analytic().iter().flat_map(|t| t.data().to_vec()).collect();
        let n: Vec<f64> = self.numeric().iter().flat_map(|t| t.data().to_vec()).collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(&n).map(|(x, y)| x - y).collect();
        norm(&diff) / norm(&a).max(norm(&n)).max(1e-8)
    }
}

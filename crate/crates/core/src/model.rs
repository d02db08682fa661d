//! Congruent dual potentials and the transport maps that parametrize the
//! conditional plans.
//!
//! The potentials are built from `K` free networks `g_k` and a scalar `m`:
//!
//! ```text
//! f_k = g_k - sum_{n != k} lambda_n / (lambda_k (K - 1)) g_n + m / (K lambda_k)
//! ```
//!
//! which makes `sum_k lambda_k f_k == m` hold identically for `K >= 2`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numeric::{Activation, Dense, Mlp, MlpBinding, NodeId, Tape, Tensor};

/// Tolerance on `sum(lambda) == 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

pub fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Config("at least one marginal is required".into()));
    }
    if let Some((k, w)) = weights.iter().enumerate().find(|(_, w)| !(**w > 0.0)) {
        return Err(Error::Config(format!(
            "lambda_{} = {w} must be positive",
            k + 1
        )));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Config(format!("lambda must sum to 1, got {s}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialBank {
    nets: Vec<Mlp>,
    m: f64,
    weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PotentialBinding {
    pub nets: Vec<MlpBinding>,
    pub m: NodeId,
}

impl PotentialBank {
    pub fn new(nets: Vec<Mlp>, weights: Vec<f64>, m: f64) -> Result<Self> {
        validate_weights(&weights)?;
        if nets.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} potential networks for {} weights",
                nets.len(),
                weights.len()
            )));
        }
        let dim = nets[0].input_dim();
        for (k, n) in nets.iter().enumerate() {
            if n.output_dim() != 1 || n.input_dim() != dim {
                return Err(Error::InvalidArgument(format!(
                    "g{} must map R^{dim} -> R, has widths {:?}",
                    k + 1,
                    n.widths()
                )));
            }
        }
        Ok(Self { nets, m, weights })
    }

    /// Fresh networks of widths `[dim, hidden..., 1]` and `m = 0`.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        hidden: &[usize],
        weights: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let nets = (0..weights.len())
            .map(|_| Mlp::new(&widths, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(nets, weights, 0.0)
    }

    pub fn len(&self) -> usize {
        self.nets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.nets[0].input_dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn set_m(&mut self, m: f64) {
        self.m = m;
    }

    pub fn nets(&self) -> &[Mlp] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [Mlp] {
        &mut self.nets
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k >= self.nets.len() {
            return Err(Error::InvalidArgument(format!(
                "potential index {k} out of range for K = {}",
                self.nets.len()
            )));
        }
        Ok(())
    }

    /// Coefficient of `g_n` inside `f_k` (zero-based indices).
    pub fn coefficient(&self, k: usize, n: usize) -> f64 {
        if n == k {
            1.0
        } else {
            let kk = self.nets.len() as f64;
            -self.weights[n] / (self.weights[k] * (kk - 1.0))
        }
    }

    /// Constant term `m / (K lambda_k)` of `f_k`.
    pub fn m_coefficient(&self, k: usize) -> f64 {
        1.0 / (self.nets.len() as f64 * self.weights[k])
    }

    /// `f_k` on a batch (`n x D`), one value per row.
    pub fn potentials(&self, k: usize, ys: &Tensor) -> Result<Vec<f64>> {
        self.check_k(k)?;
        let mut out = vec![self.m * self.m_coefficient(k); ys.rows()];
        for (n, net) in self.nets.iter().enumerate() {
            let c = self.coefficient(k, n);
            let g = net.forward(ys)?;
            for (o, v) in out.iter_mut().zip(g.data()) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    /// `f_k(y)` for a single point.
    pub fn potential_eval(&self, k: usize, y: &[f64]) -> Result<f64> {
        let ys = Tensor::matrix(1, y.len(), y.to_vec());
        Ok(self.potentials(k, &ys)?[0])
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> PotentialBinding {
        let nets = self.nets.iter().map(|n| n.bind(tape, trainable)).collect();
        let m = tape.leaf(Tensor::scalar(self.m), trainable);
        PotentialBinding { nets, m }
    }

    /// Record `f_k(y)` for a batch node `y` (`n x D`); returns an `n x 1` node.
    pub fn record(
        &self,
        tape: &mut Tape,
        binding: &PotentialBinding,
        k: usize,
        y: NodeId,
    ) -> Result<NodeId> {
        self.check_k(k)?;
        let mut terms = Vec::with_capacity(self.nets.len());
        for (n, net) in self.nets.iter().enumerate() {
            let g = net.record(tape, &binding.nets[n], y)?;
            terms.push((g, self.coefficient(k, n)));
        }
        let f = tape.lin_comb(&terms)?;
        let offset = tape.scale(binding.m, self.m_coefficient(k));
        tape.add_scalar(f, offset)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapBank {
    nets: Vec<Mlp>,
    noise_dim: usize,
}

#[derive(Debug, Clone)]
pub struct MapBinding {
    pub nets: Vec<MlpBinding>,
}

impl MapBank {
    pub fn new(nets: Vec<Mlp>, noise_dim: usize) -> Result<Self> {
        if nets.is_empty() {
            return Err(Error::InvalidArgument("empty map bank".into()));
        }
        let out = nets[0].output_dim();
        for (k, n) in nets.iter().enumerate() {
            if n.output_dim() != out || n.input_dim() <= noise_dim {
                return Err(Error::InvalidArgument(format!(
                    "T{} has widths {:?}, incompatible with output {out} and noise dim {noise_dim}",
                    k + 1,
                    n.widths()
                )));
            }
        }
        Ok(Self { nets, noise_dim })
    }

    /// Networks `[D_k + D_s, hidden..., D]` for each input dimension `D_k`.
    pub fn init<R: Rng + ?Sized>(
        input_dims: &[usize],
        out_dim: usize,
        hidden: &[usize],
        noise_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let nets = input_dims
            .iter()
            .map(|&d| {
                let widths: Vec<usize> = std::iter::once(d + noise_dim)
                    .chain(hidden.iter().copied())
                    .chain(std::iter::once(out_dim))
                    .collect();
                Mlp::new(&widths, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(nets, noise_dim)
    }

    pub fn len(&self) -> usize {
        self.nets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn is_stochastic(&self) -> bool {
        self.noise_dim > 0
    }

    pub fn input_dim(&self, k: usize) -> usize {
        self.nets[k].input_dim() - self.noise_dim
    }

    pub fn output_dim(&self) -> usize {
        self.nets[0].output_dim()
    }

    pub fn nets(&self) -> &[Mlp] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [Mlp] {
        &mut self.nets
    }

    /// Standard-normal noise for `rows` inputs; `None` in deterministic mode.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Option<Tensor> {
        (self.noise_dim > 0).then(|| {
            let data = (0..rows * self.noise_dim)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            Tensor::matrix(rows, self.noise_dim, data)
        })
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k >= self.nets.len() {
            return Err(Error::InvalidArgument(format!(
                "map index {k} out of range for K = {}",
                self.nets.len()
            )));
        }
        Ok(())
    }

    fn join(&self, k: usize, xs: &Tensor, noise: Option<&Tensor>) -> Result<Tensor> {
        let dk = self.input_dim(k);
        if xs.cols() != dk {
            return Err(Error::Shape {
                context: format!("T{} input", k + 1),
                expected: vec![xs.rows(), dk],
                got: xs.shape().to_vec(),
            });
        }
        match (self.noise_dim, noise) {
            (0, None) => Ok(xs.clone()),
            (0, Some(s)) if s.is_empty() => Ok(xs.clone()),
            (ds, Some(s)) if s.cols() == ds && s.rows() == xs.rows() => {
                let mut data = Vec::with_capacity(xs.rows() * (dk + ds));
                for i in 0..xs.rows() {
                    data.extend_from_slice(xs.row(i));
                    data.extend_from_slice(s.row(i));
                }
                Ok(Tensor::matrix(xs.rows(), dk + ds, data))
            }
            (ds, s) => Err(Error::Shape {
                context: format!("T{} noise", k + 1),
                expected: vec![xs.rows(), ds],
                got: s.map_or(vec![0], |s| s.shape().to_vec()),
            }),
        }
    }

    /// `T_k(x, s)` on a batch.
    pub fn map_batch(&self, k: usize, xs: &Tensor, noise: Option<&Tensor>) -> Result<Tensor> {
        self.check_k(k)?;
        let input = self.join(k, xs, noise)?;
        self.nets[k].forward(&input)
    }

    /// `T_k(x, s)` for one point; pass an empty `s` in deterministic mode.
    pub fn map_eval(&self, k: usize, x: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        let xs = Tensor::matrix(1, x.len(), x.to_vec());
        let noise = (!s.is_empty()).then(|| Tensor::matrix(1, s.len(), s.to_vec()));
        Ok(self.map_batch(k, &xs, noise.as_ref())?.into_data())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MapBinding {
        MapBinding {
            nets: self.nets.iter().map(|n| n.bind(tape, trainable)).collect(),
        }
    }

    /// Record `T_k` on the tape. The input batch is a constant.
    pub fn record(
        &self,
        tape: &mut Tape,
        binding: &MapBinding,
        k: usize,
        xs: &Tensor,
        noise: Option<&Tensor>,
    ) -> Result<NodeId> {
        self.check_k(k)?;
        let input = tape.constant(self.join(k, xs, noise)?);
        self.nets[k].record(tape, &binding.nets[k], input)
    }
}

fn mlp_tensors(prefix: &str, net: &Mlp, out: &mut Vec<(String, Tensor)>) {
    for (name, t) in net.parameter_names().into_iter().zip(net.parameters()) {
        out.push((format!("{prefix}.{name}"), t.clone()));
    }
}

/// Named tensors for a checkpoint: `g{k}.layer{i}.{weight,bias}`,
/// `T{k}.layer{i}.{weight,bias}` and `m`, with `k` starting at 1.
pub fn checkpoint_tensors(potentials: &PotentialBank, maps: &MapBank) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (k, net) in potentials.nets().iter().enumerate() {
        mlp_tensors(&format!("g{}", k + 1), net, &mut out);
    }
    for (k, net) in maps.nets().iter().enumerate() {
        mlp_tensors(&format!("T{}", k + 1), net, &mut out);
    }
    out.push(("m".into(), Tensor::scalar(potentials.m())));
    out
}

fn mlp_from(prefix: &str, table: &BTreeMap<String, Tensor>) -> Result<Mlp> {
    let mut layers = Vec::new();
    loop {
        let i = layers.len();
        let (Some(w), Some(b)) = (
            table.get(&format!("{prefix}.layer{i}.weight")),
            table.get(&format!("{prefix}.layer{i}.bias")),
        ) else {
            break;
        };
        layers.push(Dense::new(w.clone(), b.clone(), Activation::Relu)?);
    }
    if let Some(last) = layers.last_mut() {
        last.activation = Activation::Identity;
    } else {
        return Err(Error::Checkpoint(format!("no layers for `{prefix}`")));
    }
    Mlp::from_layers(layers)
}

/// Inverse of [`checkpoint_tensors`].
pub fn from_checkpoint_tensors(
    tensors: Vec<(String, Tensor)>,
    weights: Vec<f64>,
    noise_dim: usize,
) -> Result<(PotentialBank, MapBank)> {
    let k = weights.len();
    let table: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let g = (1..=k)
        .map(|i| mlp_from(&format!("g{i}"), &table))
        .collect::<Result<Vec<_>>>()?;
    let t = (1..=k)
        .map(|i| mlp_from(&format!("T{i}"), &table))
        .collect::<Result<Vec<_>>>()?;
    let m = table
        .get("m")
        .and_then(Tensor::item)
        .ok_or_else(|| Error::Checkpoint("missing scalar `m`".into()))?;
    Ok((PotentialBank::new(g, weights, m)?, MapBank::new(t, noise_dim)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_net(dim: usize) -> Mlp {
        Mlp::from_layers(vec![Dense::new(
            Tensor::zeros(&[dim, 1]),
            Tensor::zeros(&[1, 1]),
            Activation::Identity,
        )
        .unwrap()])
        .unwrap()
    }

    fn linear_net(w: Vec<f64>, b: f64) -> Mlp {
        let d = w.len();
        Mlp::from_layers(vec![Dense::new(
            Tensor::matrix(d, 1, w),
            Tensor::scalar(b),
            Activation::Identity,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn two_marginal_algebra() {
        let g1 = linear_net(vec![1.0, 2.0], 0.5);
        let g2 = linear_net(vec![-1.0, 0.0], 1.0);
        let bank = PotentialBank::new(vec![g1, g2], vec![0.5, 0.5], 0.7).unwrap();
        let y = [0.3, -1.2];
        let gv1 = 0.3 - 2.4 + 0.5;
        let gv2 = -0.3 + 1.0;
        let f1 = bank.potential_eval(0, &y).unwrap();
        let f2 = bank.potential_eval(1, &y).unwrap();
        assert!((f1 - (gv1 - gv2 + 0.7)).abs() < 1e-12);
        assert!((f2 - (gv2 - gv1 + 0.7)).abs() < 1e-12);
        assert!((0.5 * f1 + 0.5 * f2 - 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_nets_give_m() {
        let bank = PotentialBank::new(vec![zero_net(2), zero_net(2)], vec![0.5, 0.5], 2.0).unwrap();
        for k in 0..2 {
            assert_eq!(bank.potential_eval(k, &[4.0, -3.0]).unwrap(), 2.0);
        }
    }

    #[test]
    fn invalid_weights() {
        let nets = || vec![zero_net(1), zero_net(1)];
        assert!(PotentialBank::new(nets(), vec![0.0, 1.0], 0.0).is_err());
        assert!(PotentialBank::new(nets(), vec![0.5, 0.6], 0.0).is_err());
        assert!(PotentialBank::new(nets(), vec![1.0], 0.0).is_err());
        // K = 1 is allowed at the type level.
        assert!(PotentialBank::new(vec![zero_net(1)], vec![1.0], 0.0).is_ok());
    }

    #[test]
    fn congruence_random_banks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [2usize, 3, 5] {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let mut w: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let tail: f64 = w[..k - 1].iter().sum();
            w[k - 1] = 1.0 - tail;
            let mut bank = PotentialBank::init(3, &[16, 16], w.clone(), &mut rng).unwrap();
            bank.set_m(rng.gen_range(-3.0..3.0));
            let ys = Tensor::matrix(
                200,
                3,
                (0..600).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            );
            let fs: Vec<Vec<f64>> = (0..k).map(|i| bank.potentials(i, &ys).unwrap()).collect();
            for r in 0..200 {
                let s: f64 = (0..k).map(|i| w[i] * fs[i][r]).sum();
                assert!((s - bank.m()).abs() <= 1e-6, "K={k} residual {}", s - bank.m());
            }
        }
    }

    #[test]
    fn common_shift_scales_per_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = vec![0.2, 0.3, 0.5];
        let bank = PotentialBank::init(2, &[8], w.clone(), &mut rng).unwrap();
        let mut shifted = bank.clone();
        let gamma = 1.75;
        for net in shifted.nets_mut() {
            let last = net.parameters_mut().pop().unwrap();
            last.data_mut()[0] += gamma;
        }
        let y = [0.4, -0.9];
        for k in 0..3 {
            let expected: f64 = gamma
                * (1.0
                    - (0..3)
                        .filter(|&n| n != k)
                        .map(|n| w[n] / (w[k] * 2.0))
                        .sum::<f64>());
            let d = shifted.potential_eval(k, &y).unwrap() - bank.potential_eval(k, &y).unwrap();
            assert!((d - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn recorded_potential_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bank = PotentialBank::init(2, &[8, 8], vec![0.25, 0.75], &mut rng).unwrap();
        bank.set_m(-0.4);
        let ys = Tensor::matrix(4, 2, vec![0.1, 0.2, -1.0, 3.0, 0.0, 0.0, 2.0, -2.0]);
        let mut tape = Tape::new();
        let b = bank.bind(&mut tape, true);
        let y = tape.constant(ys.clone());
        for k in 0..2 {
            let f = bank.record(&mut tape, &b, k, y).unwrap();
            let plain = bank.potentials(k, &ys).unwrap();
            for (a, p) in tape.value(f).data().iter().zip(&plain) {
                assert!((a - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let maps = MapBank::init(&[2, 2], 2, &[8], 0, &mut rng).unwrap();
        let a = maps.map_eval(0, &[0.3, 0.4], &[]).unwrap();
        let b = maps.map_eval(0, &[0.3, 0.4], &[]).unwrap();
        assert_eq!(a, b);
        assert!(maps.map_eval(0, &[0.3], &[]).is_err());
        assert!(maps.sample_noise(3, &mut rng).is_none());
    }

    #[test]
    fn stochastic_maps_take_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps = MapBank::init(&[2], 2, &[8], 3, &mut rng).unwrap();
        assert!(maps.is_stochastic());
        let s1 = maps.sample_noise(1, &mut rng).unwrap();
        let s2 = maps.sample_noise(1, &mut rng).unwrap();
        let a = maps.map_eval(0, &[0.1, 0.2], s1.data()).unwrap();
        let b = maps.map_eval(0, &[0.1, 0.2], s2.data()).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(b.len(), 2);
        assert!(maps.map_eval(0, &[0.1, 0.2], &[]).is_err());
    }

    #[test]
    fn zero_map_outputs_bias() {
        let net = Mlp::from_layers(vec![Dense::new(
            Tensor::zeros(&[2, 2]),
            Tensor::matrix(1, 2, vec![1.5, -0.5]),
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let maps = MapBank::new(vec![net], 0).unwrap();
        assert_eq!(maps.map_eval(0, &[9.0, 9.0], &[]).unwrap(), vec![1.5, -0.5]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pots = PotentialBank::init(2, &[4], vec![0.5, 0.5], &mut rng).unwrap();
        pots.set_m(0.125);
        let maps = MapBank::init(&[2, 2], 2, &[4, 4], 0, &mut rng).unwrap();
        let named = checkpoint_tensors(&pots, &maps);
        assert!(named.iter().any(|(n, _)| n == "g1.layer0.weight"));
        assert!(named.iter().any(|(n, _)| n == "T2.layer2.bias"));
        let (p2, m2) = from_checkpoint_tensors(named, vec![0.5, 0.5], 0).unwrap();
        assert_eq!(p2, pots);
        assert_eq!(m2, maps);
    }
}

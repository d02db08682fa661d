//! Adversarial max-min training of the congruent potentials and the maps.
//!
//! Each outer iteration takes one ascent step on the potentials and `m`
//! over
//!
//! ```text
//! L = sum_k lambda_k mean_x[ -conj_k( mean_s f_k(T_k(x,s)) - c_k(x, T_k(x,s)) ) ] + m
//! ```
//!
//! followed by `N_T` descent steps on each map over
//! `mean_{x,s}[ c_k(x, T_k(x,s)) - f_k(T_k(x,s)) ]`.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cost::CostFn;
use crate::datagen::PointSource;
use crate::divergence::Divergence;
use crate::error::{Error, Result};
use crate::model::{validate_weights, MapBank, MapBinding, PotentialBank, PotentialBinding};
use crate::numeric::{clip_global_norm, AdamConfig, AdamState, NodeId, Tape, Tensor};

/// Losses beyond this magnitude abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalConfig {
    pub weight: f64,
    pub divergence: Divergence,
    pub cost: CostFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarycenterConfig {
    pub marginals: Vec<MarginalConfig>,
    pub batch_size: usize,
    pub iterations: usize,
    pub inner_steps: usize,
    pub lr_potential: f64,
    pub lr_map: f64,
    pub lr_m: f64,
    pub seed: u64,
    /// Noise dimension of the maps; 0 means deterministic maps.
    pub noise_dim: usize,
    /// Noise draws per input in stochastic mode.
    pub noise_draws: usize,
    pub potential_hidden: Vec<usize>,
    pub map_hidden: Vec<usize>,
    pub clip_norm: f64,
}

impl BarycenterConfig {
    /// Defaults for `K` marginals with equal weights: deterministic maps,
    /// batch 1024, 10K iterations, 3 inner steps, learning rates 1e-3.
    pub fn new(marginals: Vec<MarginalConfig>) -> Self {
        Self {
            marginals,
            batch_size: 1024,
            iterations: 10_000,
            inner_steps: 3,
            lr_potential: 1e-3,
            lr_map: 1e-3,
            lr_m: 1e-3,
            seed: 0,
            noise_dim: 0,
            noise_draws: 1,
            potential_hidden: vec![64, 64, 64],
            map_hidden: vec![64, 64, 64],
            clip_norm: 100.0,
        }
    }

    pub fn k(&self) -> usize {
        self.marginals.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.marginals.iter().map(|m| m.weight).collect()
    }

    /// Draws per input actually used: 1 for deterministic maps.
    pub fn draws(&self) -> usize {
        if self.noise_dim == 0 {
            1
        } else {
            self.noise_draws
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_weights(&self.weights())?;
        if self.inner_steps == 0 {
            return Err(Error::Config("N_T must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if self.noise_dim > 0 && self.noise_draws == 0 {
            return Err(Error::Config("noise draws must be ≥ 1".into()));
        }
        for (name, lr) in [
            ("lr_potential", self.lr_potential),
            ("lr_map", self.lr_map),
            ("lr_m", self.lr_m),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// One marginal's batch pushed through its map: `x` holds each input
/// repeated `draws` times in consecutive rows, `y = T_k(x, s)` row by row.
#[derive(Debug, Clone)]
pub struct MappedBatch {
    pub x: Tensor,
    pub noise: Option<Tensor>,
    pub y: Tensor,
    pub draws: usize,
}

impl MappedBatch {
    pub fn new(
        maps: &MapBank,
        k: usize,
        inputs: &Tensor,
        draws: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let x = repeat_rows(inputs, draws);
        let noise = maps.sample_noise(x.rows(), rng);
        let y = maps.map_batch(k, &x, noise.as_ref())?;
        Ok(Self { x, noise, y, draws })
    }
}

pub fn repeat_rows(t: &Tensor, times: usize) -> Tensor {
    if times == 1 {
        return t.clone();
    }
    let idx: Vec<usize> = (0..t.rows()).flat_map(|i| std::iter::repeat(i).take(times)).collect();
    t.select_rows(&idx)
}

/// Row-wise `c(x_i, y_i)` without recording.
pub fn row_costs(cost: &CostFn, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    x.iter_rows().zip(y.iter_rows()).map(|(a, b)| cost.eval(a, b)).collect()
}

/// Reject arguments the conjugate cannot take, naming the marginal and row.
fn check_conj_args(div: &Divergence, k: usize, vals: &[f64]) -> Result<()> {
    for (i, &t) in vals.iter().enumerate() {
        if let Err(e) = div.conj(t) {
            return Err(Error::NonFinite(format!(
                "conjugate of marginal {} at sample {i}: {e}",
                k + 1
            )));
        }
    }
    Ok(())
}

/// Record the potential objective (to be maximized in the potentials and
/// `m`). `batches[k]` must come from marginal `k`.
pub fn potential_loss(
    tape: &mut Tape,
    potentials: &PotentialBank,
    binding: &PotentialBinding,
    batches: &[MappedBatch],
    marginals: &[MarginalConfig],
) -> Result<NodeId> {
    if batches.len() != marginals.len() || batches.len() != potentials.len() {
        return Err(Error::InvalidArgument(format!(
            "{} batches for {} marginals",
            batches.len(),
            marginals.len()
        )));
    }
    let mut terms = Vec::with_capacity(batches.len());
    for (k, (b, mc)) in batches.iter().zip(marginals).enumerate() {
        let y = tape.constant(b.y.clone());
        let f = potentials.record(tape, binding, k, y)?;
        let c = row_costs(&mc.cost, &b.x, &b.y)?;
        let c = tape.constant(Tensor::matrix(c.len(), 1, c));
        let diff = tape.sub(f, c)?;
        let arg = tape.mean_groups(diff, b.draws)?;
        check_conj_args(&mc.divergence, k, tape.value(arg).data())?;
        let div = mc.divergence;
        let neg = tape.pointwise(arg, move |t| div.conj(t).map(|v| -v), move |t| {
            div.conj_grad(t).map(|v| -v)
        })?;
        terms.push((tape.mean(neg), mc.weight));
    }
    let total = tape.lin_comb(&terms)?;
    tape.add_scalar(total, binding.m)
}

/// Record `mean(c_k(x, T_k(x, s)) - f_k(T_k(x, s)))` (to be minimized in the
/// map of marginal `k`).
#[allow(clippy::too_many_arguments)]
pub fn map_loss(
    tape: &mut Tape,
    potentials: &PotentialBank,
    pot_binding: &PotentialBinding,
    maps: &MapBank,
    map_binding: &MapBinding,
    k: usize,
    x: &Tensor,
    noise: Option<&Tensor>,
    cost: &CostFn,
) -> Result<NodeId> {
    let t = maps.record(tape, map_binding, k, x, noise)?;
    let xn = tape.constant(x.clone());
    let c = cost.record(tape, xn, t)?;
    let f = potentials.record(tape, pot_binding, k, t)?;
    let d = tape.sub(c, f)?;
    Ok(tape.mean(d))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    /// Potential objective per outer iteration.
    pub losses: Vec<f64>,
    /// Map loss per marginal per outer iteration (last inner step).
    pub map_losses: Vec<Vec<f64>>,
    pub m_trajectory: Vec<f64>,
    #[serde(skip)]
    pub wall_time_sec: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub potentials: PotentialBank,
    pub maps: MapBank,
    pub report: TrainReport,
}

/// Independent ChaCha streams derived from one seed.
pub mod streams {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub const INIT: u64 = 0;
    pub const NOISE: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const ORACLE: u64 = 3;
    pub const METRICS: u64 = 4;

    /// Data stream for marginal `k`.
    pub fn data(k: usize) -> u64 {
        16 + k as u64
    }

    pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        r
    }
}

fn check_loss(iteration: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Diverged { iteration, loss });
    }
    Ok(())
}

fn named(prefix: &str, names: Vec<String>) -> Vec<String> {
    names.into_iter().map(|n| format!("{prefix}.{n}")).collect()
}

struct Optimizers {
    potentials: AdamState,
    m: AdamState,
    maps: Vec<AdamState>,
    potential_names: Vec<String>,
    map_names: Vec<Vec<String>>,
}

impl Optimizers {
    fn new(cfg: &BarycenterConfig, pots: &PotentialBank, maps: &MapBank) -> Self {
        let potential_names = pots
            .nets()
            .iter()
            .enumerate()
            .flat_map(|(k, n)| named(&format!("g{}", k + 1), n.parameter_names()))
            .collect();
        let map_names = maps
            .nets()
            .iter()
            .enumerate()
            .map(|(k, n)| named(&format!("T{}", k + 1), n.parameter_names()))
            .collect();
        Self {
            potentials: AdamState::new(
                AdamConfig::with_lr(cfg.lr_potential),
                pots.nets().iter().flat_map(|n| n.parameters()),
            ),
            m: AdamState::new(AdamConfig::with_lr(cfg.lr_m), [&Tensor::scalar(0.0)]),
            maps: maps
                .nets()
                .iter()
                .map(|n| AdamState::new(AdamConfig::with_lr(cfg.lr_map), n.parameters()))
                .collect(),
            potential_names,
            map_names,
        }
    }
}

/// One ascent step on the potentials and `m`; returns the objective before
/// the step.
fn potential_step(
    cfg: &BarycenterConfig,
    pots: &mut PotentialBank,
    batches: &[MappedBatch],
    opt: &mut Optimizers,
) -> Result<f64> {
    let mut tape = Tape::new();
    let binding = pots.bind(&mut tape, true);
    let loss = potential_loss(&mut tape, pots, &binding, batches, &cfg.marginals)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let mut g: Vec<Tensor> = pots
        .nets()
        .iter()
        .zip(&binding.nets)
        .flat_map(|(net, b)| b.gradients(net, &grads))
        .collect();
    g.push(grads.get_or_zeros(binding.m, &[1, 1]));
    // Ascent: Adam minimizes, so flip the sign.
    for t in g.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = -*v);
    }
    clip_global_norm(&mut g, cfg.clip_norm);
    let gm = g.pop().expect("m gradient");
    let mut params: Vec<&mut Tensor> = pots
        .nets_mut()
        .iter_mut()
        .flat_map(|n| n.parameters_mut())
        .collect();
    opt.potentials.step(&mut params, &g, &opt.potential_names)?;
    let mut m = Tensor::scalar(pots.m());
    opt.m.step(&mut [&mut m], &[gm], &["m".to_string()])?;
    pots.set_m(m.data()[0]);
    Ok(value)
}

/// One descent step on every map; returns the per-marginal losses.
fn map_step(
    cfg: &BarycenterConfig,
    pots: &PotentialBank,
    maps: &mut MapBank,
    inputs: &[Tensor],
    noise_rng: &mut ChaCha8Rng,
    opt: &mut Optimizers,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let pb = pots.bind(&mut tape, false);
    let mb = maps.bind(&mut tape, true);
    let mut losses = Vec::with_capacity(inputs.len());
    let mut nodes = Vec::with_capacity(inputs.len());
    for (k, x) in inputs.iter().enumerate() {
        let x = repeat_rows(x, cfg.draws());
        let noise = maps.sample_noise(x.rows(), noise_rng);
        let l = map_loss(&mut tape, pots, &pb, maps, &mb, k, &x, noise.as_ref(), &cfg.marginals[k].cost)?;
        losses.push(tape.value(l).data()[0]);
        nodes.push((l, 1.0));
    }
    // Maps have disjoint parameters, so one sweep over the sum serves all.
    let total = tape.lin_comb(&nodes)?;
    let grads = tape.backward(total)?;
    for k in 0..inputs.len() {
        let mut g = mb.nets[k].gradients(&maps.nets()[k], &grads);
        clip_global_norm(&mut g, cfg.clip_norm);
        let mut params = maps.nets_mut()[k].parameters_mut();
        opt.maps[k].step(&mut params, &g, &opt.map_names[k])?;
    }
    Ok(losses)
}

/// Progress hook: `(iteration, potential loss, map losses, m)`.
pub type Observer<'a> = dyn FnMut(usize, f64, &[f64], f64) + 'a;

pub fn train(cfg: &BarycenterConfig, sources: &[&dyn PointSource]) -> Result<Trained> {
    train_observed(cfg, sources, &mut |_, _, _, _| {})
}

pub fn train_observed(
    cfg: &BarycenterConfig,
    sources: &[&dyn PointSource],
    observer: &mut Observer<'_>,
) -> Result<Trained> {
    cfg.validate()?;
    let k = cfg.k();
    if k < 2 {
        return Err(Error::Config(format!("training needs K ≥ 2 marginals, got {k}")));
    }
    if sources.len() != k {
        return Err(Error::Config(format!("{} data sources for K = {k}", sources.len())));
    }
    let dim = sources[0].dim();
    if let Some(bad) = sources.iter().position(|s| s.dim() != dim) {
        return Err(Error::Config(format!(
            "marginal {} has dimension {}, expected {dim}",
            bad + 1,
            sources[bad].dim()
        )));
    }
    let start = Instant::now();
    let mut init = streams::rng(cfg.seed, streams::INIT);
    let mut pots = PotentialBank::init(dim, &cfg.potential_hidden, cfg.weights(), &mut init)?;
    let mut maps = MapBank::init(&vec![dim; k], dim, &cfg.map_hidden, cfg.noise_dim, &mut init)?;
    let mut data_rngs: Vec<ChaCha8Rng> = (0..k).map(|i| streams::rng(cfg.seed, streams::data(i))).collect();
    let mut noise_rng = streams::rng(cfg.seed, streams::NOISE);
    let mut opt = Optimizers::new(cfg, &pots, &maps);
    let mut report = TrainReport {
        map_losses: vec![Vec::with_capacity(cfg.iterations); k],
        ..Default::default()
    };

    for it in 0..cfg.iterations {
        let batches = (0..k)
            .map(|i| {
                let x = sources[i].sample(cfg.batch_size, &mut data_rngs[i])?;
                MappedBatch::new(&maps, i, &x, cfg.draws(), &mut noise_rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = potential_step(cfg, &mut pots, &batches, &mut opt)?;
        check_loss(it, loss)?;

        let mut last = Vec::new();
        for _ in 0..cfg.inner_steps {
            let inputs = (0..k)
                .map(|i| sources[i].sample(cfg.batch_size, &mut data_rngs[i]))
                .collect::<Result<Vec<_>>>()?;
            last = map_step(cfg, &pots, &mut maps, &inputs, &mut noise_rng, &mut opt)?;
            for &l in &last {
                check_loss(it, l)?;
            }
        }
        report.losses.push(loss);
        for (dst, &l) in report.map_losses.iter_mut().zip(&last) {
            dst.push(l);
        }
        report.m_trajectory.push(pots.m());
        observer(it, loss, &last, pots.m());
    }
    report.wall_time_sec = start.elapsed().as_secs_f64();
    Ok(Trained {
        potentials: pots,
        maps,
        report,
    })
}

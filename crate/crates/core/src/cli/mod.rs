//! Command-line entry points. Every subcommand reads one config file and
//! writes into the run's output directory:
//!
//! ```text
//! <out>/manifest_<cmd>.json
//! <out>/data/k{i}.csv, k{i}_labels.csv                    generate
//! <out>/checkpoint.bin, report.json, timing.json          train
//! <out>/eval/k{i}_inputs.csv, k{i}_barycenter.csv, acceptance.json
//! <out>/oracle/...                                        oracle
//! <out>/metrics.json                                      metrics
//! <out>/plot/scatter.svg, series.csv                      plot
//! ```

pub mod config;
pub mod io;
pub mod plot;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::{Dataset, PointSource};
use crate::discrete_ot::{interpolated_barycenter_oracle, w2_empirical, InterpolationOracle};
use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::gaussian_oracle::{fixed_point_barycenter, FixedPointResult, GaussianMap, GaussianParams};
use crate::metrics::{acceptance_stats, bw2_uvp, l2_map_metric, l2_uvp_with_variance, weighted, ClassAcceptance, MetricReport};
use crate::model::{checkpoint_tensors, from_checkpoint_tensors, MapBank, PotentialBank};
use crate::numeric::{checkpoint, Tensor};
use crate::sampler::{rejection_sample, RejectionSample};
use crate::trainer::{streams, train_observed, Trained};

pub use config::{RunConfig, SourceSpec};

#[derive(Debug, Parser)]
#[command(name = "unotb", version, about = "Semi-unbalanced OT barycenters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Run configuration (flat TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a header row in CSV outputs.
    #[arg(long)]
    pub header: bool,
    /// No progress output on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample every marginal to CSV.
    Generate(Common),
    /// Train potentials and maps; writes a checkpoint and a loss report.
    Train(Common),
    /// Rejection-sample the barycenter from a trained checkpoint.
    Eval(Common),
    /// Reference solution: discrete interpolation or Gaussian fixed point.
    Oracle(Common),
    /// Compare the trained model against the oracle.
    Metrics(Common),
    /// Render SVG scatters from CSVs already written by other commands.
    Plot(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Generate(c) => ("generate", c),
            Command::Train(c) => ("train", c),
            Command::Eval(c) => ("eval", c),
            Command::Oracle(c) => ("oracle", c),
            Command::Metrics(c) => ("metrics", c),
            Command::Plot(c) => ("plot", c),
        }
    }
}

/// Process entry point: parses arguments, runs, maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("UNOTB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("UNOTB_THREADS must be a positive integer, got `{v}`")))?;
    // A second call in the same process (tests) finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(command: &Command) -> Result<()> {
    configure_threads()?;
    let (name, common) = command.parts();
    let cfg = RunConfig::from_file(&common.config)?;
    let ctx = Context {
        out: common.out.clone().unwrap_or_else(|| cfg.output_dir.clone()),
        header: common.header,
        quiet: common.quiet,
        cfg,
    };
    io::ensure_dir(&ctx.out)?;
    write_manifest(&ctx, name)?;
    match command {
        Command::Generate(_) => generate(&ctx),
        Command::Train(_) => train(&ctx),
        Command::Eval(_) => eval(&ctx),
        Command::Oracle(_) => oracle(&ctx),
        Command::Metrics(_) => metrics(&ctx),
        Command::Plot(_) => plot_run(&ctx),
    }
}

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub header: bool,
    pub quiet: bool,
}

impl Context {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

fn write_manifest(ctx: &Context, subcommand: &str) -> Result<()> {
    let m = io::Manifest {
        subcommand,
        name: &ctx.cfg.name,
        seed: ctx.cfg.seed,
        config_sha256: &ctx.cfg.hash,
        source_hash: io::SOURCE_HASH,
        version: env!("CARGO_PKG_VERSION"),
        config: &ctx.cfg.text,
    };
    io::write_json(&ctx.path(&format!("manifest_{subcommand}.json")), &m)
}

fn source_refs(sources: &[Box<dyn PointSource>]) -> Vec<&dyn PointSource> {
    sources.iter().map(|s| s.as_ref()).collect()
}

fn generate(ctx: &Context) -> Result<()> {
    let sources = ctx.cfg.sources()?;
    for (k, src) in sources.iter().enumerate() {
        let mut rng = streams::rng(ctx.cfg.seed, streams::data(k));
        let s = src.sample_labeled(ctx.cfg.generate_n, &mut rng)?;
        io::write_csv(&ctx.path(&format!("data/k{}.csv", k + 1)), &s.points, ctx.header)?;
        io::write_labels(&ctx.path(&format!("data/k{}_labels.csv", k + 1)), &s.labels, ctx.header)?;
    }
    ctx.log(&format!("wrote {} marginals to {}", sources.len(), ctx.path("data").display()));
    Ok(())
}

/// Train with the config's hyperparameters, logging progress unless quiet.
pub fn train_model(cfg: &RunConfig, quiet: bool) -> Result<Trained> {
    let sources = cfg.sources()?;
    let every = (cfg.train.iterations / 20).max(1);
    train_observed(&cfg.train, &source_refs(&sources), &mut |it, loss, maps, m| {
        if !quiet && (it % every == 0 || it + 1 == cfg.train.iterations) {
            let maps: Vec<String> = maps.iter().map(|l| format!("{l:.4}")).collect();
            eprintln!("iter {it:>6}  potential {loss:.5}  maps [{}]  m {m:.5}", maps.join(", "));
        }
    })
}

#[derive(Serialize)]
struct Timing {
    wall_time_sec: f64,
}

fn train(ctx: &Context) -> Result<()> {
    let trained = train_model(&ctx.cfg, ctx.quiet)?;
    let tensors = checkpoint_tensors(&trained.potentials, &trained.maps);
    io::write_bytes(&ctx.path("checkpoint.bin"), &checkpoint::encode(&tensors))?;
    io::write_json(&ctx.path("report.json"), &trained.report)?;
    io::write_json(
        &ctx.path("timing.json"),
        &Timing {
            wall_time_sec: trained.report.wall_time_sec,
        },
    )?;
    ctx.log(&format!("trained in {:.1}s", trained.report.wall_time_sec));
    Ok(())
}

pub fn load_checkpoint(cfg: &RunConfig, out: &Path) -> Result<(PotentialBank, MapBank)> {
    let path = out.join("checkpoint.bin");
    let tensors = checkpoint::decode(&io::read_bytes(&path)?)?;
    from_checkpoint_tensors(tensors, cfg.weights(), cfg.train.noise_dim)
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginalAcceptance {
    pub k: usize,
    pub dataset: Option<String>,
    pub candidates: usize,
    pub accepted: usize,
    pub rate: f64,
    pub c_rej: f64,
    pub mean_probability: f64,
    pub classes: BTreeMap<usize, ClassAcceptance>,
    /// Share of accepted points from the heavier mode (imbalance datasets).
    pub majority_fraction: Option<f64>,
    /// Mean acceptance probability of outlier / inlier candidates.
    pub outlier_rate: Option<f64>,
    pub inlier_rate: Option<f64>,
}

fn mean_where(p: &[f64], labels: &[usize], pred: impl Fn(usize) -> bool) -> Option<f64> {
    let v: Vec<f64> = p.iter().zip(labels).filter(|(_, &l)| pred(l)).map(|(p, _)| *p).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize_acceptance(k: usize, dataset: Option<&Dataset>, r: &RejectionSample) -> Result<MarginalAcceptance> {
    let probs = r.weights.probabilities();
    let classes: Vec<usize> = r.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let stats = acceptance_stats(&probs, &r.labels, &r.accepted.indices, &classes)?;
    let majority_fraction = dataset
        .and_then(Dataset::majority_label)
        .map(|l| stats.get(&l).map_or(0.0, |c| c.accepted_share));
    let (outlier_rate, inlier_rate) = match dataset {
        Some(d @ (Dataset::OutlierP1 | Dataset::OutlierP2)) => (
            mean_where(&probs, &r.labels, |l| d.is_outlier(l)),
            mean_where(&probs, &r.labels, |l| !d.is_outlier(l)),
        ),
        _ => (None, None),
    };
    Ok(MarginalAcceptance {
        k: k + 1,
        dataset: dataset.map(ToString::to_string),
        candidates: r.accepted.candidates,
        accepted: r.accepted.indices.len(),
        rate: r.accepted.rate,
        c_rej: r.weights.c_rej,
        mean_probability: probs.iter().sum::<f64>() / probs.len() as f64,
        classes: stats,
        majority_fraction,
        outlier_rate,
        inlier_rate,
    })
}

/// Rejection-sample every marginal of a trained model.
pub fn evaluate(
    cfg: &RunConfig,
    pots: &PotentialBank,
    maps: &MapBank,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(RejectionSample, MarginalAcceptance)>> {
    let sources = cfg.sources()?;
    (0..cfg.k())
        .map(|k| {
            let m = &cfg.marginals[k];
            let r = rejection_sample(pots, maps, k, &m.cost, &m.divergence, sources[k].as_ref(), cfg.eval_n, rng)?;
            let s = summarize_acceptance(k, cfg.dataset(k), &r)?;
            Ok((r, s))
        })
        .collect()
}

fn eval(ctx: &Context) -> Result<()> {
    let (pots, maps) = load_checkpoint(&ctx.cfg, &ctx.out)?;
    let mut rng = streams::rng(ctx.cfg.seed, streams::EVAL);
    let results = evaluate(&ctx.cfg, &pots, &maps, &mut rng)?;
    let mut summary = Vec::new();
    for (k, (r, s)) in results.into_iter().enumerate() {
        let i = k + 1;
        io::write_csv(&ctx.path(&format!("eval/k{i}_inputs.csv")), &r.inputs, ctx.header)?;
        io::write_csv(&ctx.path(&format!("eval/k{i}_barycenter.csv")), &r.barycenter, ctx.header)?;
        let labels: Vec<usize> = r.accepted.indices.iter().map(|&j| r.labels[j]).collect();
        io::write_labels(&ctx.path(&format!("eval/k{i}_labels.csv")), &labels, ctx.header)?;
        ctx.log(&format!("k{i}: accepted {} of {} ({:.3})", s.accepted, s.candidates, s.rate));
        summary.push(s);
    }
    io::write_json(&ctx.path("eval/acceptance.json"), &summary)?;
    if ctx.cfg.plot {
        plot_run(ctx)?;
    }
    Ok(())
}

/// Oracle for two marginals with the first balanced and the second KL-relaxed.
pub fn interpolation_inputs(cfg: &RunConfig) -> Result<(Tensor, Tensor, f64)> {
    if cfg.k() != 2 {
        return Err(Error::Config(format!("the discrete oracle needs K = 2, got {}", cfg.k())));
    }
    let (m1, m2) = (&cfg.marginals[0], &cfg.marginals[1]);
    if !m1.divergence.is_balanced() || m2.divergence.kind() != DivergenceKind::Kl {
        return Err(Error::Config(
            "the discrete oracle needs k.1 balanced and k.2 kl".into(),
        ));
    }
    let sources = cfg.sources()?;
    let mut rng = streams::rng(cfg.oracle.seed, streams::ORACLE);
    let mut draw = |k: usize| -> Result<Tensor> {
        match &cfg.marginals[k].source {
            SourceSpec::Csv(path) => io::read_csv(path),
            _ => sources[k].sample(cfg.oracle.n, &mut rng),
        }
    };
    let x1 = draw(0)?;
    let x2 = draw(1)?;
    Ok((x1, x2, m2.divergence.tau()))
}

pub fn interpolation_oracle(cfg: &RunConfig) -> Result<(Tensor, InterpolationOracle)> {
    let (x1, x2, tau) = interpolation_inputs(cfg)?;
    let o = interpolated_barycenter_oracle(&x1, &x2, [cfg.marginals[0].lambda, cfg.marginals[1].lambda], tau, cfg.oracle.eps_ratio)?;
    Ok((x1, o))
}

pub fn gaussian_oracle(cfg: &RunConfig) -> Result<(Vec<GaussianParams>, FixedPointResult)> {
    let inputs = cfg
        .gaussian_inputs()?
        .ok_or_else(|| Error::Config("no gaussian setup".into()))?;
    let r = fixed_point_barycenter(&inputs, &cfg.weights(), cfg.oracle.fixed_point_tol, cfg.oracle.fixed_point_max_iter)?;
    Ok((inputs, r))
}

#[derive(Serialize)]
struct InterpolationSummary {
    n1: usize,
    n2: usize,
    epsilon_ratio: f64,
    tau: f64,
    iterations: usize,
    residual: f64,
    transport_cost: f64,
    objective: f64,
    second_marginal_mass: f64,
}

#[derive(Serialize)]
struct FixedPointSummary<'a> {
    inputs: &'a [GaussianParams],
    weights: Vec<f64>,
    iterations: usize,
    residual: f64,
}

fn oracle(ctx: &Context) -> Result<()> {
    if ctx.cfg.gaussian.is_some() {
        let (inputs, r) = gaussian_oracle(&ctx.cfg)?;
        io::write_json(&ctx.path("oracle/barycenter.json"), &r.barycenter)?;
        io::write_json(
            &ctx.path("oracle/summary.json"),
            &FixedPointSummary {
                inputs: &inputs,
                weights: ctx.cfg.weights(),
                iterations: r.iterations,
                residual: r.residual,
            },
        )?;
        ctx.log(&format!("fixed point converged in {} iterations", r.iterations));
        return Ok(());
    }
    let (x1, x2, tau) = interpolation_inputs(&ctx.cfg)?;
    let o = interpolated_barycenter_oracle(
        &x1,
        &x2,
        [ctx.cfg.marginals[0].lambda, ctx.cfg.marginals[1].lambda],
        tau,
        ctx.cfg.oracle.eps_ratio,
    )?;
    io::write_csv(&ctx.path("oracle/x1.csv"), &x1, ctx.header)?;
    io::write_csv(&ctx.path("oracle/x2.csv"), &x2, ctx.header)?;
    io::write_csv(&ctx.path("oracle/t_star.csv"), &o.t_star, ctx.header)?;
    io::write_csv(&ctx.path("oracle/q_star.csv"), &o.t_star, ctx.header)?;
    io::write_csv(&ctx.path("oracle/t_uot.csv"), &o.t_uot, ctx.header)?;
    io::write_json(
        &ctx.path("oracle/summary.json"),
        &InterpolationSummary {
            n1: x1.rows(),
            n2: x2.rows(),
            epsilon_ratio: ctx.cfg.oracle.eps_ratio,
            tau,
            iterations: o.plan.iterations,
            residual: o.plan.residual,
            transport_cost: o.plan.cost,
            objective: o.plan.objective,
            second_marginal_mass: o.second_marginal.iter().sum(),
        },
    )?;
    ctx.log(&format!("oracle solved in {} Sinkhorn iterations", o.plan.iterations));
    Ok(())
}

/// `(L2, squared W2)` of the first map against an interpolation oracle.
pub fn interpolation_metrics(maps: &MapBank, x1: &Tensor, t_star: &Tensor, eps_ratio: f64, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let noise = maps.sample_noise(x1.rows(), rng);
    let t_hat = maps.map_batch(0, x1, noise.as_ref())?;
    let l2 = l2_map_metric(&t_hat, t_star)?;
    let w2 = w2_empirical(&t_hat, t_star, eps_ratio)?;
    Ok((l2, w2.squared))
}

#[derive(Debug, Clone, Serialize)]
pub struct GaussianScores {
    pub l2_uvp: Vec<f64>,
    pub l2_uvp_weighted: f64,
    pub bw2_uvp: Vec<f64>,
    pub bw2_uvp_weighted: f64,
}

/// Per-marginal L2-UVP against the closed-form maps to the fixed-point
/// barycenter, and BW2-UVP of the rejection-sampled barycenter.
pub fn gaussian_metrics(
    cfg: &RunConfig,
    pots: &PotentialBank,
    maps: &MapBank,
    barycenter: &GaussianParams,
    rng: &mut ChaCha8Rng,
) -> Result<GaussianScores> {
    let inputs = cfg
        .gaussian_inputs()?
        .ok_or_else(|| Error::Config("no gaussian setup".into()))?;
    let var = barycenter.total_variance();
    let mut l2 = Vec::new();
    let mut bw = Vec::new();
    for (k, p) in inputs.iter().enumerate() {
        let x = p.sample(cfg.metrics_n, rng)?;
        let noise = maps.sample_noise(x.rows(), rng);
        let t_hat = maps.map_batch(k, &x, noise.as_ref())?;
        let t_star = GaussianMap::between(p, barycenter)?.apply(&x);
        l2.push(l2_uvp_with_variance(&t_hat, &t_star, var)?);
        let m = &cfg.marginals[k];
        let source = Dataset::Gaussian(p.clone());
        let r = rejection_sample(pots, maps, k, &m.cost, &m.divergence, &source, cfg.metrics_n, rng)?;
        bw.push(bw2_uvp(&r.barycenter, barycenter)?);
    }
    let w = cfg.weights();
    Ok(GaussianScores {
        l2_uvp_weighted: weighted(&l2, &w)?,
        bw2_uvp_weighted: weighted(&bw, &w)?,
        l2_uvp: l2,
        bw2_uvp: bw,
    })
}

fn metrics(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let (pots, maps) = load_checkpoint(cfg, &ctx.out)?;
    let mut rng = streams::rng(cfg.seed, streams::METRICS);
    let report = |name: &str, v: f64, n: usize| MetricReport::new(name, v, n, cfg.seed, &cfg.hash);
    let mut out: BTreeMap<String, MetricReport> = BTreeMap::new();
    if cfg.gaussian.is_some() {
        let barycenter: GaussianParams = io::read_json(&ctx.path("oracle/barycenter.json"))?;
        let s = gaussian_metrics(cfg, &pots, &maps, &barycenter, &mut rng)?;
        out.insert("L2_UVP".into(), report("L2_UVP", s.l2_uvp_weighted, cfg.metrics_n)?);
        out.insert("BW2_UVP".into(), report("BW2_UVP", s.bw2_uvp_weighted, cfg.metrics_n)?);
        for (k, (l, b)) in s.l2_uvp.iter().zip(&s.bw2_uvp).enumerate() {
            out.insert(format!("L2_UVP_k{}", k + 1), report("L2_UVP", *l, cfg.metrics_n)?);
            out.insert(format!("BW2_UVP_k{}", k + 1), report("BW2_UVP", *b, cfg.metrics_n)?);
        }
    } else {
        interpolation_inputs(cfg)?;
        let x1 = io::read_csv(&ctx.path("oracle/x1.csv"))?;
        let t_star = io::read_csv(&ctx.path("oracle/t_star.csv"))?;
        let (l2, w2) = interpolation_metrics(&maps, &x1, &t_star, cfg.oracle.eps_ratio, &mut rng)?;
        out.insert("L2".into(), report("L2", l2, x1.rows())?);
        out.insert("W2".into(), report("W2", w2, x1.rows())?);
    }
    for (k, r) in &out {
        ctx.log(&format!("{k} = {:.5}", r.value));
    }
    io::write_json(&ctx.path("metrics.json"), &out)
}

/// At most this many points per plotted series.
const PLOT_CAP: usize = 5000;

fn plot_run(ctx: &Context) -> Result<()> {
    let mut series = Vec::new();
    let mut add = |name: String, rel: String| -> Result<()> {
        let path = ctx.path(&rel);
        if path.exists() {
            let t = io::read_csv(&path)?;
            let idx: Vec<usize> = (0..t.rows().min(PLOT_CAP)).collect();
            series.push(plot::Series {
                name,
                points: t.select_rows(&idx),
            });
        }
        Ok(())
    };
    for i in 1..=ctx.cfg.k() {
        add(format!("P{i}"), format!("data/k{i}.csv"))?;
    }
    for i in 1..=ctx.cfg.k() {
        add(format!("P{i} accepted"), format!("eval/k{i}_inputs.csv"))?;
    }
    for i in 1..=ctx.cfg.k() {
        add(format!("T{i} barycenter"), format!("eval/k{i}_barycenter.csv"))?;
    }
    add("Q* oracle".into(), "oracle/q_star.csv".into())?;
    if series.is_empty() {
        return Err(Error::io(
            ctx.path("eval"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "nothing to plot; run generate or eval first"),
        ));
    }
    io::write_text(&ctx.path("plot/scatter.svg"), &plot::scatter_svg(&ctx.cfg.name, &series))?;
    io::write_text(&ctx.path("plot/series.csv"), &plot::series_csv(&series, ctx.header))?;
    ctx.log(&format!("plotted {} series to {}", series.len(), ctx.path("plot").display()));
    Ok(())
}

//! Run configuration: a flat TOML file of dotted keys.
//!
//! ```toml
//! name = "spiral_gm"
//! seed = 0
//! iterations = 10000
//! k.1.dataset = "spiral"
//! k.1.lambda = 0.5
//! k.1.divergence = "balanced"
//! k.2.dataset = "gm8"
//! k.2.lambda = 0.5
//! k.2.divergence = "kl"
//! k.2.tau = 5
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use toml::Value;

use crate::cost::{CostFn, CostKind};
use crate::datagen::{gaussian_instances, Dataset, Empirical, PointSource};
use crate::divergence::{Divergence, DivergenceKind};
use crate::error::{Error, Result};
use crate::model::validate_weights;
use crate::trainer::{BarycenterConfig, MarginalConfig};

use super::io::read_csv;

#[derive(Debug, Clone, PartialEq)]
pub enum SourceSpec {
    Named(Dataset),
    /// Instance `index` of the seeded Gaussian family.
    Gaussian(usize),
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSpec {
    pub source: SourceSpec,
    pub lambda: f64,
    pub divergence: Divergence,
    pub cost: CostFn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSetup {
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSettings {
    pub n: usize,
    pub eps_ratio: f64,
    pub seed: u64,
    pub fixed_point_tol: f64,
    pub fixed_point_max_iter: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub marginals: Vec<MarginalSpec>,
    pub train: BarycenterConfig,
    pub gaussian: Option<GaussianSetup>,
    pub generate_n: usize,
    pub eval_n: usize,
    pub metrics_n: usize,
    pub oracle: OracleSettings,
    pub plot: bool,
    /// Verbatim file contents and their SHA-256.
    pub text: String,
    pub hash: String,
}

/// Dotted-key view of a TOML document with consumption tracking.
struct Keys {
    map: BTreeMap<String, Value>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn type_error(key: &str, want: &str, got: &Value) -> Error {
    Error::Config(format!("`{key}` must be {want}, got {got}"))
}

impl Keys {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.map.remove(key)
    }

    fn float(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Float(v)) => Ok(v),
            Some(Value::Integer(v)) => Ok(v as f64),
            Some(v) => Err(type_error(key, "a number", &v)),
        }
    }

    fn uint(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Integer(v)) if v >= 0 => Ok(v as u64),
            Some(v) => Err(type_error(key, "a non-negative integer", &v)),
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        Ok(self.uint(key, default as u64)? as usize)
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(type_error(key, "a string", &v)),
        }
    }

    fn boolean(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(b),
            Some(v) => Err(type_error(key, "true or false", &v)),
        }
    }

    fn widths(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Integer(w) if *w > 0 => Ok(*w as usize),
                    other => Err(type_error(key, "an array of positive integers", other)),
                })
                .collect(),
            Some(v) => Err(type_error(key, "an array of positive integers", &v)),
        }
    }

    fn marginal_indices(&self) -> Result<Vec<usize>> {
        let mut idx = Vec::new();
        for key in self.map.keys() {
            let mut parts = key.split('.');
            if parts.next() != Some("k") {
                continue;
            }
            let i: usize = parts
                .next()
                .and_then(|p| p.parse().ok())
                .filter(|&i| i >= 1)
                .ok_or_else(|| Error::UnknownKey(key.clone()))?;
            if !idx.contains(&i) {
                idx.push(i);
            }
        }
        idx.sort_unstable();
        if let Some(gap) = idx.iter().enumerate().find(|(p, &i)| i != p + 1) {
            return Err(Error::Config(format!(
                "marginals must be numbered 1..K without gaps; found k.{}",
                gap.1
            )));
        }
        Ok(idx)
    }
}

fn marginal(keys: &mut Keys, i: usize, base: &Path) -> Result<MarginalSpec> {
    let p = format!("k.{i}");
    let dataset = keys.string(&format!("{p}.dataset"))?;
    let csv = keys.string(&format!("{p}.csv"))?;
    let source = match (dataset, csv) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(format!("{p}: set either dataset or csv, not both")))
        }
        (None, None) => return Err(Error::Config(format!("{p}: missing dataset or csv"))),
        (None, Some(path)) => SourceSpec::Csv(base.join(path)),
        (Some(name), None) if name == "gaussian" => SourceSpec::Gaussian(i - 1),
        (Some(name), None) => SourceSpec::Named(name.parse()?),
    };
    let lambda = keys
        .take(&format!("{p}.lambda"))
        .ok_or_else(|| Error::Config(format!("{p}.lambda is required")))?;
    let lambda = match lambda {
        Value::Float(v) => v,
        Value::Integer(v) => v as f64,
        v => return Err(type_error(&format!("{p}.lambda"), "a number", &v)),
    };
    let kind: DivergenceKind = keys
        .string(&format!("{p}.divergence"))?
        .unwrap_or_else(|| "balanced".into())
        .parse()?;
    let tau_key = format!("{p}.tau");
    let divergence = if kind == DivergenceKind::Balanced {
        if keys.take(&tau_key).is_some() {
            return Err(Error::Config(format!("{tau_key} has no effect with a balanced divergence")));
        }
        Divergence::balanced()
    } else {
        let tau = keys.float(&tau_key, f64::NAN)?;
        if tau.is_nan() {
            return Err(Error::Config(format!("{tau_key} is required for {kind}")));
        }
        Divergence::new(kind, tau).map_err(|e| Error::Config(format!("{tau_key}: {e}")))?
    };
    let cost_kind: CostKind = keys
        .string(&format!("{p}.cost"))?
        .unwrap_or_else(|| "quadratic".into())
        .parse()?;
    let cost = CostFn::new(cost_kind, keys.float(&format!("{p}.cost_alpha"), 1.0)?)?;
    Ok(MarginalSpec {
        source,
        lambda,
        divergence,
        cost,
    })
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        Self::parse(&text, &base, &stem)
    }

    /// Relative paths in the file resolve against `base`.
    pub fn parse(text: &str, base: &Path, default_name: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut map = BTreeMap::new();
        flatten("", &table, &mut map);
        let mut keys = Keys { map };

        let name = keys.string("name")?.unwrap_or_else(|| default_name.into());
        let seed = keys.uint("seed", 0)?;
        let output_dir = keys
            .string("output_dir")?
            .map(|p| base.join(p))
            .unwrap_or_else(|| PathBuf::from("runs").join(&name));

        let indices = keys.marginal_indices()?;
        if indices.is_empty() {
            return Err(Error::Config("no marginals (k.1.dataset = ...)".into()));
        }
        let marginals = indices
            .iter()
            .map(|&i| marginal(&mut keys, i, base))
            .collect::<Result<Vec<_>>>()?;
        let weights: Vec<f64> = marginals.iter().map(|m| m.lambda).collect();
        validate_weights(&weights).map_err(|e| Error::Config(e.to_string()))?;

        let mut train = BarycenterConfig::new(
            marginals
                .iter()
                .map(|m| MarginalConfig {
                    weight: m.lambda,
                    divergence: m.divergence,
                    cost: m.cost,
                })
                .collect(),
        );
        train.seed = seed;
        train.batch_size = keys.usize("batch_size", train.batch_size)?;
        train.iterations = keys.usize("iterations", train.iterations)?;
        train.inner_steps = keys.usize("inner_steps", train.inner_steps)?;
        train.lr_potential = keys.float("lr_potential", train.lr_potential)?;
        train.lr_map = keys.float("lr_map", train.lr_map)?;
        train.lr_m = keys.float("lr_m", train.lr_m)?;
        train.noise_dim = keys.usize("noise_dim", train.noise_dim)?;
        train.noise_draws = keys.usize("noise_draws", train.noise_draws)?;
        train.potential_hidden = keys.widths("potential_hidden", &train.potential_hidden)?;
        train.map_hidden = keys.widths("map_hidden", &train.map_hidden)?;
        train.clip_norm = keys.float("clip_norm", train.clip_norm)?;

        let gaussian = match (keys.take("gaussian.dim"), keys.take("gaussian.seed")) {
            (None, None) => None,
            (Some(Value::Integer(dim)), seed) if dim >= 1 => Some(GaussianSetup {
                dim: dim as usize,
                seed: match seed {
                    None => 0,
                    Some(Value::Integer(s)) if s >= 0 => s as u64,
                    Some(v) => return Err(type_error("gaussian.seed", "a non-negative integer", &v)),
                },
            }),
            (Some(v), _) => return Err(type_error("gaussian.dim", "a positive integer", &v)),
            (None, Some(_)) => return Err(Error::Config("gaussian.seed needs gaussian.dim".into())),
        };
        let uses_gaussian = marginals.iter().any(|m| matches!(m.source, SourceSpec::Gaussian(_)));
        if uses_gaussian && gaussian.is_none() {
            return Err(Error::Config("dataset \"gaussian\" needs gaussian.dim".into()));
        }

        let generate_n = keys.usize("generate.n", 1000)?;
        let eval_n = keys.usize("eval.n", 2000)?;
        let metrics_n = keys.usize("metrics.n", 10_000)?;
        let oracle = OracleSettings {
            n: keys.usize("oracle.n", 2000)?,
            eps_ratio: keys.float("oracle.eps_ratio", crate::discrete_ot::DEFAULT_EPS_RATIO)?,
            seed: keys.uint("oracle.seed", seed)?,
            fixed_point_tol: keys.float("oracle.fixed_point_tol", 1e-10)?,
            fixed_point_max_iter: keys.usize("oracle.fixed_point_max_iter", 10_000)?,
        };
        let plot = keys.boolean("plot.enabled", true)?;

        if let Some(key) = keys.map.keys().next() {
            return Err(Error::UnknownKey(key.clone()));
        }
        for (what, n) in [("generate.n", generate_n), ("eval.n", eval_n), ("metrics.n", metrics_n), ("oracle.n", oracle.n)] {
            if n == 0 {
                return Err(Error::Config(format!("{what} must be ≥ 1")));
            }
        }
        if !(oracle.eps_ratio > 0.0) {
            return Err(Error::Config("oracle.eps_ratio must be positive".into()));
        }
        train.validate()?;

        let hash = Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        Ok(Self {
            name,
            seed,
            output_dir,
            marginals,
            train,
            gaussian,
            generate_n,
            eval_n,
            metrics_n,
            oracle,
            plot,
            text: text.to_string(),
            hash,
        })
    }

    pub fn k(&self) -> usize {
        self.marginals.len()
    }

    /// Same run with another training seed; oracle samples are unaffected.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn weights(&self) -> Vec<f64> {
        self.marginals.iter().map(|m| m.lambda).collect()
    }

    /// Gaussian inputs of the seeded family, when configured.
    pub fn gaussian_inputs(&self) -> Result<Option<Vec<crate::gaussian_oracle::GaussianParams>>> {
        self.gaussian
            .map(|g| gaussian_instances(g.dim, self.k(), g.seed))
            .transpose()
    }

    /// Concrete data sources in marginal order.
    pub fn sources(&self) -> Result<Vec<Box<dyn PointSource>>> {
        let gaussians = self.gaussian_inputs()?;
        self.marginals
            .iter()
            .map(|m| -> Result<Box<dyn PointSource>> {
                Ok(match &m.source {
                    SourceSpec::Named(d) => Box::new(d.clone()),
                    SourceSpec::Gaussian(i) => {
                        let g = gaussians.as_ref().expect("checked at parse time")[*i].clone();
                        Box::new(Dataset::Gaussian(g))
                    }
                    SourceSpec::Csv(path) => Box::new(Empirical::new(read_csv(path)?, None)?),
                })
            })
            .collect()
    }

    /// The named dataset behind marginal `k`, if any.
    pub fn dataset(&self, k: usize) -> Option<&Dataset> {
        match &self.marginals[k].source {
            SourceSpec::Named(d) => Some(d),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
name = "toy"
seed = 3
iterations = 10
k.1.dataset = "spiral"
k.1.lambda = 0.5
k.2.dataset = "gm8"
k.2.lambda = 0.5
k.2.divergence = "kl"
k.2.tau = 5
"#;

    fn parse(s: &str) -> Result<RunConfig> {
        RunConfig::parse(s, Path::new("."), "x")
    }

    #[test]
    fn parses_toy() {
        let c = parse(TOY).unwrap();
        assert_eq!(c.k(), 2);
        assert_eq!(c.train.iterations, 10);
        assert_eq!(c.train.seed, 3);
        assert!(c.marginals[0].divergence.is_balanced());
        assert_eq!(c.marginals[1].divergence, Divergence::kl(5.0).unwrap());
        assert_eq!(c.output_dir, PathBuf::from("runs/toy"));
        assert_eq!(c.hash.len(), 64);
    }

    #[test]
    fn nested_tables_are_equivalent() {
        let nested = "iterations = 10\nseed = 3\nname = \"toy\"\n[k.1]\ndataset = \"spiral\"\nlambda = 0.5\n[k.2]\ndataset = \"gm8\"\nlambda = 0.5\ndivergence = \"kl\"\ntau = 5\n";
        let (a, b) = (parse(TOY).unwrap(), parse(nested).unwrap());
        assert_eq!(a.train, b.train);
        assert_eq!(a.marginals, b.marginals);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse(&format!("{TOY}\nbatchsize = 3\n")).unwrap_err();
        assert!(matches!(&err, Error::UnknownKey(k) if k == "batchsize"));
        assert_eq!(err.exit_code(), 2);
        let err = parse(&format!("{TOY}\nk.2.temperature = 3\n")).unwrap_err();
        assert!(err.to_string().contains("k.2.temperature"));
    }

    #[test]
    fn validation_errors() {
        let bad_sum = TOY.replace("k.2.lambda = 0.5", "k.2.lambda = 0.6");
        assert_eq!(parse(&bad_sum).unwrap_err().exit_code(), 2);
        let bad_tau = TOY.replace("k.2.tau = 5", "k.2.tau = 0");
        assert_eq!(parse(&bad_tau).unwrap_err().exit_code(), 2);
        let bad_name = TOY.replace("gm8", "gm9");
        assert_eq!(parse(&bad_name).unwrap_err().exit_code(), 2);
        let nt = parse(&format!("{TOY}\ninner_steps = 0\n")).unwrap_err();
        assert!(nt.to_string().contains("N_T must be ≥ 1"));
        let gap = TOY.replace("k.2.", "k.3.");
        assert!(parse(&gap).is_err());
        assert!(parse("k.1.dataset = \"gaussian\"\nk.1.lambda = 1").is_err());
    }
}

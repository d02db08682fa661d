//! CSV, JSON and run-manifest persistence.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const SOURCE_HASH: &str = env!("UNOTB_SOURCE_HASH");

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Shortest round-trip decimal form; never locale dependent.
fn push_num(out: &mut String, v: f64) {
    write!(out, "{v}").expect("writing to a String");
}

pub fn csv_string(t: &Tensor, header: Option<&[String]>) -> String {
    let mut out = String::with_capacity(t.len() * 20);
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for row in t.iter_rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            push_num(&mut out, *v);
        }
        out.push('\n');
    }
    out
}

/// Column names `x1, x2, ...` when `header` is set.
pub fn write_csv(path: &Path, t: &Tensor, header: bool) -> Result<()> {
    let names: Vec<String> = (1..=t.cols()).map(|j| format!("x{j}")).collect();
    write_text(path, &csv_string(t, header.then_some(&names[..])))
}

pub fn write_labels(path: &Path, labels: &[usize], header: bool) -> Result<()> {
    let mut out = String::new();
    if header {
        out.push_str("label\n");
    }
    for l in labels {
        writeln!(out, "{l}").expect("writing to a String");
    }
    write_text(path, &out)
}

/// Numeric CSV; a first line that does not parse is taken as a header.
pub fn read_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text).map_err(|msg| Error::Config(format!("{}: {msg}", path.display())))
}

fn parse_csv(text: &str) -> std::result::Result<Tensor, String> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(format!("line {}: not a numeric row", i + 1)),
        }
    }
    if rows.is_empty() {
        return Err("no data rows".into());
    }
    let width = rows[0].len();
    if let Some(bad) = rows.iter().position(|r| r.len() != width) {
        return Err(format!("row {} has {} fields, expected {width}", bad + 1, rows[bad].len()));
    }
    Tensor::from_rows(&rows).map_err(|e| e.to_string())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::NonFinite(e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub subcommand: &'a str,
    pub name: &'a str,
    pub seed: u64,
    pub config_sha256: &'a str,
    pub source_hash: &'a str,
    pub version: &'a str,
    pub config: &'a str,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let t = Tensor::matrix(2, 2, vec![0.1, -2.5e-12, 3.0, 1.0 / 3.0]);
        let s = csv_string(&t, None);
        assert_eq!(s.lines().next().unwrap(), "0.1,-0.0000000000025");
        assert_eq!(parse_csv(&s).unwrap(), t);
        let h = csv_string(&t, Some(&["a".into(), "b".into()]));
        assert!(h.starts_with("a,b\n"));
        assert_eq!(parse_csv(&h).unwrap(), t);
    }

    #[test]
    fn csv_errors() {
        assert!(parse_csv("").is_err());
        assert!(parse_csv("1,2\n3\n").is_err());
        assert!(parse_csv("1,2\nx,y\n").is_err());
    }
}

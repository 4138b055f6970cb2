//! Benchmark selection and parameters.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct SpecError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Benchmark {
    Pingpong,
    PingpongCompute,
    Halo2d,
    TransposePipeline,
    SendrecvPipeline,
    LatencyVsSync,
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    Tcp,
    Simnet,
    Loopback,
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportKind::Tcp => "tcp",
            TransportKind::Simnet => "simnet",
            TransportKind::Loopback => "loopback",
        })
    }
}

/// Computation inserted between receiving and sending.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ComputeSpec {
    #[default]
    None,
    Fixed(f64),
    Normal { mean: f64, sd: f64 },
}

impl FromStr for ComputeSpec {
    type Err = SpecError;

    /// `none`, `fixed:T` or `normal:MEAN,SD`.
    fn from_str(s: &str) -> Result<Self, SpecError> {
        let bad = || SpecError(format!("compute model {s:?}: expected none, fixed:T or normal:T,SD"));
        let f = |x: &str| x.trim().parse::<f64>().ok().filter(|v| v.is_finite() && *v >= 0.0);
        match s.split_once(':') {
            None if s == "none" => Ok(ComputeSpec::None),
            Some(("fixed", t)) => Ok(ComputeSpec::Fixed(f(t).ok_or_else(bad)?)),
            Some(("normal", rest)) => {
                let (m, sd) = rest.split_once(',').ok_or_else(bad)?;
                Ok(ComputeSpec::Normal {
                    mean: f(m).ok_or_else(bad)?,
                    sd: f(sd).ok_or_else(bad)?,
                })
            }
            _ => Err(bad()),
        }
    }
}

impl ComputeSpec {
    pub fn mean(&self) -> f64 {
        match *self {
            ComputeSpec::None => 0.0,
            ComputeSpec::Fixed(t) => t,
            ComputeSpec::Normal { mean, .. } => mean,
        }
    }
}

/// Parse one size with an optional K/M/G suffix (powers of 1024).
pub fn parse_size(s: &str) -> Result<u64, SpecError> {
    let s = s.trim();
    let (digits, mult) = match s.char_indices().last() {
        Some((i, 'K' | 'k')) => (&s[..i], 1u64 << 10),
        Some((i, 'M' | 'm')) => (&s[..i], 1 << 20),
        Some((i, 'G' | 'g')) => (&s[..i], 1 << 30),
        _ => (s, 1),
    };
    digits
        .parse::<u64>()
        .ok()
        .and_then(|d| d.checked_mul(mult))
        .ok_or_else(|| SpecError(format!("bad size {s:?}")))
}

/// `4K..4M` expands to powers of two; `1K,8K` lists sizes; a single size stands alone.
pub fn parse_sizes(s: &str) -> Result<Vec<u64>, SpecError> {
    if let Some((a, b)) = s.split_once("..") {
        let (lo, hi) = (parse_size(a)?, parse_size(b)?);
        if lo == 0 || lo > hi {
            return Err(SpecError(format!("bad size range {s:?}")));
        }
        let mut v = Vec::new();
        let mut x = lo;
        while x <= hi {
            v.push(x);
            x = x.checked_mul(2).unwrap_or(u64::MAX);
        }
        return Ok(v);
    }
    s.split(',').map(parse_size).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSpec {
    pub benchmark: Benchmark,
    pub sizes: Vec<u64>,
    pub iterations: u64,
    pub warmup: u64,
    pub compute: ComputeSpec,
    pub transport: TransportKind,
    pub preset: String,
    pub seed: u64,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.iterations <= self.warmup {
            return Err(SpecError(format!(
                "iterations ({}) must exceed warmup ({})",
                self.iterations, self.warmup
            )));
        }
        if self.sizes.is_empty() {
            return Err(SpecError("no message sizes".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_sizes("4K..32K").unwrap(), vec![4096, 8192, 16384, 32768]);
        assert_eq!(parse_sizes("1M").unwrap(), vec![1 << 20]);
        assert_eq!(parse_sizes("100,2k").unwrap(), vec![100, 2048]);
        assert!(parse_sizes("8K..4K").is_err());
        assert!(parse_sizes("x").is_err());
    }

    #[test]
    fn compute_models() {
        assert_eq!("none".parse::<ComputeSpec>().unwrap(), ComputeSpec::None);
        assert_eq!("fixed:2.5".parse::<ComputeSpec>().unwrap(), ComputeSpec::Fixed(2.5));
        assert_eq!(
            "normal:100,30".parse::<ComputeSpec>().unwrap(),
            ComputeSpec::Normal { mean: 100.0, sd: 30.0 }
        );
        assert!("normal:1".parse::<ComputeSpec>().is_err());
        assert!("fixed:-1".parse::<ComputeSpec>().is_err());
    }

    #[test]
    fn iterations_must_exceed_warmup() {
        let s = BenchSpec {
            benchmark: Benchmark::Pingpong,
            sizes: vec![1],
            iterations: 5,
            warmup: 5,
            compute: ComputeSpec::None,
            transport: TransportKind::Simnet,
            preset: "glex".into(),
            seed: 0,
        };
        assert!(s.validate().is_err());
        assert_eq!(Benchmark::PingpongCompute.to_string(), "pingpong_compute");
    }
}

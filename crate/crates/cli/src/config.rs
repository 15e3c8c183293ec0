//! Experiment settings: defaults, JSON config file, command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use kt_core::models::gaussian::SigmaChoice;
use kt_core::models::SearchOptions;
use kt_core::SearchStrategy;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub version: u32,
    pub rank: usize,
    pub order: usize,
    pub tau: Vec<f64>,
    /// Column bound; model-specific default when absent.
    pub rho: Option<f64>,
    /// Target error; 1e-6 for `decompose`, 1e-9 for the learners when absent.
    pub eps: Option<f64>,
    /// Frobenius norm of the noise added by `generate tensor`.
    pub eta: f64,
    pub samples: usize,
    pub seed: u64,
    pub budget: u64,
    pub net_resolution: Option<f64>,
    /// `estimate`, `grid:LO:HI:STEP` or a number.
    pub sigma: String,
    pub window_q: usize,
    pub window_budget: u64,
    pub strategy: SearchStrategy,
    pub starts: usize,
    pub max_sweeps: usize,
    pub least_squares_last_mode: bool,
    pub replications: usize,
    pub n_grid: Vec<usize>,
    /// Ambient dimension for `generate cp`.
    pub dim: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let search = SearchOptions::default();
        Self {
            version: CONFIG_VERSION,
            rank: 2,
            order: 3,
            tau: vec![10.0],
            rho: None,
            eps: None,
            eta: 0.0,
            samples: 10_000,
            seed: 0,
            budget: search.budget,
            net_resolution: None,
            sigma: "estimate".into(),
            window_q: 1,
            window_budget: kt_core::models::hmm::DEFAULT_WINDOW_BUDGET,
            strategy: search.strategy,
            starts: search.starts,
            max_sweeps: search.max_sweeps,
            least_squares_last_mode: false,
            replications: 5,
            n_grid: vec![1_000, 10_000, 100_000],
            dim: 3,
        }
    }
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON settings file (flags take precedence)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub rank: Option<usize>,
    #[arg(long, global = true)]
    pub order: Option<usize>,
    /// Robustness parameter; repeat or comma-separate for one per mode
    #[arg(long, global = true, value_delimiter = ',')]
    pub tau: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub rho: Option<f64>,
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub budget: Option<u64>,
    #[arg(long, global = true)]
    pub net_resolution: Option<f64>,
    /// `estimate`, `grid:LO:HI:STEP` or a value
    #[arg(long, global = true)]
    pub sigma: Option<String>,
    #[arg(long, global = true)]
    pub window_q: Option<usize>,
    #[arg(long, global = true)]
    pub strategy: Option<SearchStrategy>,
    #[arg(long, global = true)]
    pub replications: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    /// Output file; stdout when absent
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Add wall-clock timings to the report
    #[arg(long, global = true)]
    pub timings: bool,
}

impl Settings {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let s: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if s.version != CONFIG_VERSION {
            bail!("config version {} is not supported (expected {CONFIG_VERSION})", s.version);
        }
        Ok(s)
    }

    pub fn resolve(o: &Overrides) -> anyhow::Result<Self> {
        let mut s = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { s.$f = v; } )* };
        }
        set!(rank, order, tau, eta, samples, seed, budget, sigma, window_q, strategy, replications, n_grid, dim);
        if o.rho.is_some() {
            s.rho = o.rho;
        }
        if o.eps.is_some() {
            s.eps = o.eps;
        }
        if o.net_resolution.is_some() {
            s.net_resolution = o.net_resolution;
        }
        Ok(s)
    }

    pub fn search(&self) -> SearchOptions {
        SearchOptions {
            rho: self.rho,
            target_eps: self.eps.unwrap_or(SearchOptions::default().target_eps),
            net_resolution: self.net_resolution,
            seed: self.seed,
            budget: self.budget,
            strategy: self.strategy,
            starts: self.starts,
            max_sweeps: self.max_sweeps,
            least_squares_last_mode: self.least_squares_last_mode,
        }
    }

    pub fn sigma_choice(&self) -> anyhow::Result<SigmaChoice> {
        parse_sigma(&self.sigma)
    }
}

pub fn parse_sigma(s: &str) -> anyhow::Result<SigmaChoice> {
    let s = s.trim();
    if s == "estimate" {
        return Ok(SigmaChoice::Estimate);
    }
    if let Some(rest) = s.strip_prefix("grid:") {
        let v: Vec<f64> = rest
            .split(':')
            .map(|x| x.parse::<f64>())
            .collect::<Result<_, _>>()
            .context("sigma grid must be grid:LO:HI:STEP")?;
        let [lo, hi, step] = v[..] else {
            bail!("sigma grid must be grid:LO:HI:STEP");
        };
        return Ok(SigmaChoice::Grid { lo, hi, step });
    }
    let v: f64 = s.parse().with_context(|| format!("cannot parse sigma {s:?}"))?;
    Ok(SigmaChoice::Known(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let s = Settings::default();
        let back: Settings = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<Settings>(r#"{"rank": 2, "bogus": 1}"#).is_err());
    }

    #[test]
    fn sigma_forms() {
        assert_eq!(parse_sigma("estimate").unwrap(), SigmaChoice::Estimate);
        assert_eq!(parse_sigma("0.5").unwrap(), SigmaChoice::Known(0.5));
        assert_eq!(parse_sigma("grid:0.1:1:0.1").unwrap(), SigmaChoice::Grid { lo: 0.1, hi: 1.0, step: 0.1 });
        assert!(parse_sigma("grid:1:2").is_err());
    }
}

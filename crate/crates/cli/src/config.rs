//! JSON configuration file and flag overrides.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;
use tvcm_core::error_cov::ErrorModelSpec;
use tvcm_core::graph::Symmetrization;
use tvcm_core::inference::{InferenceConfig, PipelineConfig};
use tvcm_core::lasso::{Lambda1Rule, LambdaGrid, LassoConfig, PenaltyRegime};
use tvcm_core::local_design::{KernelKind, KernelSpec, DEFAULT_RANK_TOL};
use tvcm_core::simulate::SimulationConfig;

use crate::error::{CliError, Result};
use crate::CommonArgs;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSpec {
    pub kernel: KernelSpec,
    pub lasso: LassoConfig,
    pub lambda2: Option<f64>,
    pub error_model: ErrorModelSpec,
    pub inference: InferenceConfig,
    pub rank_tol: f64,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::default(),
            lasso: LassoConfig::default(),
            lambda2: None,
            error_model: ErrorModelSpec::IidEstimated,
            inference: InferenceConfig::default(),
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

impl PipelineSpec {
    pub fn build(&self) -> PipelineConfig {
        PipelineConfig {
            kernel: self.kernel,
            lasso: self.lasso.clone(),
            lambda2: self.lambda2,
            error_model: self.error_model.build(),
            inference: self.inference.clone(),
            rank_tol: self.rank_tol,
            fail_fast: false,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSpec {
    pub rule: Symmetrization,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// Time points; every interior observation time when absent.
    pub grid: Option<Vec<f64>>,
    pub pipeline: PipelineSpec,
    pub simulation: SimulationConfig,
    pub graph: GraphSpec,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies command-line overrides shared by every subcommand.
    pub fn apply(&mut self, args: &CommonArgs) -> Result<()> {
        if let Some(seed) = args.seed {
            self.seed = Some(seed);
        }
        if let Some(threads) = args.threads {
            self.threads = Some(threads);
        }
        let kind = args.kernel.as_deref().map(KernelKind::from_str).transpose()?;
        let error_model = args
            .error_model
            .as_deref()
            .map(ErrorModelSpec::from_str)
            .transpose()?;
        let lambda1 = args.lambda1.as_deref().map(parse_lambda1).transpose()?;

        let p = &mut self.pipeline;
        let s = &mut self.simulation;
        if let Some(seed) = self.seed {
            p.inference.seed = seed;
            s.seed = seed;
        }
        if let Some(k) = kind {
            p.kernel.kind = k;
            s.kernel.kind = k;
        }
        if let Some(b) = args.bandwidth {
            p.kernel.bandwidth = b;
            s.kernel.bandwidth = b;
        }
        if let Some(a) = args.alpha {
            p.inference.alpha = a;
            s.alpha = a;
        }
        if let Some(l) = args.lambda2 {
            p.lambda2 = Some(l);
            s.lambda2 = Some(l);
        }
        if let Some(x) = args.xi {
            p.inference.xi = x;
            s.xi = x;
        }
        if let Some(z) = args.zeta {
            p.inference.zeta = z;
            s.zeta = z;
        }
        if let Some(n) = args.nmc {
            p.inference.n_mc = n;
            s.n_mc = n;
        }
        if let Some(m) = error_model {
            p.error_model = m.clone();
            s.error_model = m;
        }
        if let Some(rule) = lambda1 {
            p.lasso.lambda1 = rule.clone();
            s.lasso.lambda1 = rule;
        }
        Ok(())
    }
}

/// `cv`, `recommended[:MULTIPLIER]` or a fixed positive number.
pub fn parse_lambda1(s: &str) -> Result<Lambda1Rule> {
    let bad = || CliError::Config(format!("invalid lambda1 rule `{s}`"));
    let mut parts = s.splitn(2, ':');
    let head = parts.next().unwrap_or_default();
    match (head, parts.next()) {
        ("cv", None) => Ok(Lambda1Rule::CrossValidated(LambdaGrid::default())),
        ("recommended", m) => {
            let multiplier = match m {
                Some(v) => v.parse().map_err(|_| bad())?,
                None => 2.0,
            };
            Ok(Lambda1Rule::Recommended {
                regime: PenaltyRegime::IidGaussian,
                multiplier,
            })
        }
        (v, None) => v.parse().map(Lambda1Rule::Fixed).map_err(|_| bad()),
        _ => Err(bad()),
    }
}

//! Simulation protocol: data generators, comparison methods and error-rate metrics.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, StudentT, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_cov::ErrorModelSpec;
use crate::inference::{
    inference_stage, infer_path_with, interior_grid, lasso_stage, shared_draws, InferenceConfig,
    NormalDraws, PipelineConfig, WindowNoise,
};
use crate::lasso::{
    cross_validate_lambda1, weighted_lasso, LambdaGrid, LassoConfig, LassoProblem,
};
use crate::local_design::{
    build_local_design, kernel_weights, Dataset, KernelSpec, Neighborhood, DEFAULT_RANK_TOL,
};
use crate::stats::{stream_rng, stream_seed};

/// Truncation lag of the long-memory moving average.
pub const LRD_MAX_LAG: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignKind {
    Identity,
    /// Covariance `r^{|j - k|}`.
    Toeplitz { r: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorProcess {
    IidNormal,
    Ar1 { phi: f64 },
    /// Student t with 3 degrees of freedom scaled to unit variance.
    T3Scaled,
    /// `e_i = sum_m (m + 1)^{-rho} xi_{i - m}`.
    Lrd { rho: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposed,
    TvLasso,
    FpLasso,
    NonTv,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::TvLasso => "tv_lasso",
            Method::FpLasso => "fp_lasso",
            Method::NonTv => "non_tv",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Proposed, Method::TvLasso, Method::FpLasso, Method::NonTv]
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| {
                Error::invalid(
                    "method",
                    format!("unknown method `{s}`; expected proposed, tv_lasso, fp_lasso or non_tv"),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub design: DesignKind,
    pub error: ErrorProcess,
    pub n_knots: usize,
    pub kernel: KernelSpec,
    pub replications: usize,
    pub alpha: f64,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Error covariance model used by the proposed and non-time-varying methods.
    pub error_model: ErrorModelSpec,
    pub lasso: LassoConfig,
    pub lambda2: Option<f64>,
    pub xi: f64,
    pub zeta: f64,
    pub n_mc: usize,
    /// Replications in the FP-Lasso calibration batch.
    pub calibration_replications: usize,
    /// FWER targeted by FP-Lasso; the proposed method's FWER when absent.
    pub fp_target_fwer: Option<f64>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: 200,
            p: 100,
            s: 3,
            design: DesignKind::Identity,
            error: ErrorProcess::IidNormal,
            n_knots: 6,
            kernel: KernelSpec::default(),
            replications: 100,
            alpha: 0.05,
            seed: 0,
            methods: vec![Method::Proposed],
            error_model: ErrorModelSpec::IidKnown { sigma: 1.0 },
            lasso: LassoConfig::default(),
            lambda2: None,
            xi: 0.05,
            zeta: 0.0,
            n_mc: 50_000,
            calibration_replications: 100,
            fp_target_fwer: None,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.s > self.p {
            return Err(Error::invalid("s", format!("need 0 <= s <= p, got s = {}, p = {}", self.s, self.p)));
        }
        if self.n < 4 {
            return Err(Error::invalid("n", "need at least 4 observations"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("replications", "must be positive"));
        }
        if self.n_knots < 2 {
            return Err(Error::invalid("n_knots", "need at least 2 knots"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("methods", "no method selected"));
        }
        match self.design {
            DesignKind::Toeplitz { r } if !(r > -1.0 && r < 1.0) => {
                return Err(Error::invalid("toeplitz r", format!("must lie in (-1, 1), got {r}")))
            }
            _ => {}
        }
        match self.error {
            ErrorProcess::Ar1 { phi } if !(phi > -1.0 && phi < 1.0) => {
                return Err(Error::invalid("phi", format!("must lie in (-1, 1), got {phi}")))
            }
            ErrorProcess::Lrd { rho } if !(rho > 0.5 && rho < 1.0) => {
                return Err(Error::invalid("rho", format!("must lie in (1/2, 1), got {rho}")))
            }
            _ => {}
        }
        if self.methods.contains(&Method::FpLasso) && self.calibration_replications == 0 {
            return Err(Error::invalid("calibration_replications", "must be positive"));
        }
        if let Some(f) = self.fp_target_fwer {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid("fp_target_fwer", "must lie in [0, 1]"));
            }
        }
        self.pipeline().validate(self.n)
    }

    /// Pipeline configuration of the proposed method.
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            kernel: self.kernel,
            lasso: self.lasso.clone(),
            lambda2: self.lambda2,
            error_model: self.error_model.build(),
            inference: InferenceConfig {
                xi: self.xi,
                zeta: self.zeta,
                alpha: self.alpha,
                n_mc: self.n_mc,
                seed: stream_seed(self.seed, u64::MAX),
                common_random_numbers: true,
            },
            rank_tol: DEFAULT_RANK_TOL,
            fail_fast: true,
        }
    }
}

/// Rows iid `N(0, Sigma_X)`.
pub fn gen_design(n: usize, p: usize, kind: DesignKind, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let z = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    match kind {
        DesignKind::Identity => Ok(z),
        DesignKind::Toeplitz { r } => {
            let t = DMatrix::from_fn(p, p, |j, k| r.powi(j.abs_diff(k) as i32));
            let l = t
                .cholesky()
                .ok_or_else(|| Error::invalid("toeplitz r", "covariance is not positive definite"))?
                .l();
            Ok(z * l.transpose())
        }
    }
}

/// Natural cubic spline through `(knots[k], values[k])`.
#[derive(Debug, Clone)]
pub struct NaturalSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let k = knots.len();
        if k < 2 || values.len() != k {
            return Err(Error::invalid("spline", "need at least two knots with one value each"));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("spline", "knots must be strictly increasing"));
        }
        let mut m = vec![0.0; k];
        if k > 2 {
            // tridiagonal system for the interior second derivatives
            let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
            let size = k - 2;
            let mut diag = vec![0.0; size];
            let mut upper = vec![0.0; size];
            let mut rhs = vec![0.0; size];
            for i in 0..size {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                upper[i] = h[i + 1];
                rhs[i] = 6.0
                    * ((values[i + 2] - values[i + 1]) / h[i + 1] - (values[i + 1] - values[i]) / h[i]);
            }
            for i in 1..size {
                let f = h[i] / diag[i - 1];
                diag[i] -= f * upper[i - 1];
                rhs[i] -= f * rhs[i - 1];
            }
            for i in (0..size).rev() {
                let next = if i + 1 < size { m[i + 2] } else { 0.0 };
                m[i + 1] = (rhs[i] - upper[i] * next) / diag[i];
            }
        }
        Ok(Self { knots, values, m })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = self.knots.len();
        let seg = match self.knots.partition_point(|&v| v <= x) {
            0 => 0,
            i if i >= k => k - 2,
            i => i - 1,
        };
        let (x0, x1) = (self.knots[seg], self.knots[seg + 1]);
        let h = x1 - x0;
        let (a, b) = ((x1 - x) / h, (x - x0) / h);
        a * self.values[seg]
            + b * self.values[seg + 1]
            + ((a * a * a - a) * self.m[seg] + (b * b * b - b) * self.m[seg + 1]) * h * h / 6.0
    }
}

/// Coefficient path (`n x p`, row `i` at `t_i`) and its support.
#[derive(Debug, Clone)]
pub struct CoefficientPath {
    pub beta: DMatrix<f64>,
    pub support: Vec<usize>,
}

impl CoefficientPath {
    pub fn at(&self, row: usize) -> DVector<f64> {
        self.beta.row(row).transpose()
    }

    /// Nonzero coordinates at observation `row`.
    pub fn support_at(&self, row: usize) -> BTreeSet<usize> {
        (0..self.beta.ncols())
            .filter(|&j| self.beta[(row, j)] != 0.0)
            .collect()
    }
}

/// Coefficients on `s` random coordinates, each a natural cubic spline through
/// `n_knots` equally spaced knots with `U(-2.5, 2.5)` values.
pub fn gen_coefficients(
    n: usize,
    p: usize,
    s: usize,
    n_knots: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CoefficientPath> {
    if n_knots < 2 {
        return Err(Error::invalid("n_knots", "need at least 2 knots"));
    }
    if s > p {
        return Err(Error::invalid("s", "support larger than p"));
    }
    let mut support = sample_indices(rng, p, s).into_vec();
    support.sort_unstable();
    let knots: Vec<f64> = (0..n_knots).map(|k| k as f64 / (n_knots - 1) as f64).collect();
    let unif = Uniform::new(-2.5, 2.5).map_err(|e| Error::invalid("uniform", e.to_string()))?;
    let mut beta = DMatrix::zeros(n, p);
    for &j in &support {
        let values: Vec<f64> = (0..n_knots).map(|_| rng.sample(unif)).collect();
        let spline = NaturalSpline::new(knots.clone(), values)?;
        for i in 0..n {
            beta[(i, j)] = spline.eval((i + 1) as f64 / n as f64);
        }
    }
    Ok(CoefficientPath { beta, support })
}

/// Share of the long-memory variance dropped by truncating at `LRD_MAX_LAG`.
pub fn lrd_truncation_ratio(rho: f64) -> f64 {
    let head: f64 = (0..=LRD_MAX_LAG).map(|m| ((m + 1) as f64).powf(-2.0 * rho)).sum();
    // integral tail estimate of sum_{k > M + 1} k^{-2 rho}
    let tail = (LRD_MAX_LAG as f64 + 1.5).powf(1.0 - 2.0 * rho) / (2.0 * rho - 1.0);
    tail / (head + tail)
}

pub fn gen_errors(kind: ErrorProcess, n: usize, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    match kind {
        ErrorProcess::IidNormal => Ok(DVector::from_fn(n, |_, _| rng.sample(StandardNormal))),
        ErrorProcess::Ar1 { phi } => {
            let mut prev: f64 = rng.sample::<f64, _>(StandardNormal) / (1.0 - phi * phi).sqrt();
            Ok(DVector::from_fn(n, |_, _| {
                let v = prev;
                prev = phi * prev + rng.sample::<f64, _>(StandardNormal);
                v
            }))
        }
        ErrorProcess::T3Scaled => {
            let t = StudentT::new(3.0).map_err(|e| Error::invalid("student t", e.to_string()))?;
            let scale = 3f64.sqrt();
            Ok(DVector::from_fn(n, |_, _| rng.sample(t) / scale))
        }
        ErrorProcess::Lrd { rho } => {
            let coef: Vec<f64> = (0..=LRD_MAX_LAG).map(|m| ((m + 1) as f64).powf(-rho)).collect();
            // innovations xi_{i - m} for i in 0..n, m in 0..=LRD_MAX_LAG
            let xi: Vec<f64> = (0..n + LRD_MAX_LAG).map(|_| rng.sample(StandardNormal)).collect();
            Ok(DVector::from_fn(n, |i, _| {
                let now = i + LRD_MAX_LAG;
                coef.iter().enumerate().map(|(m, c)| c * xi[now - m]).sum()
            }))
        }
    }
}

/// One replicated data set with its truth.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub data: Dataset,
    pub truth: CoefficientPath,
}

pub fn gen_replicate(cfg: &SimulationConfig, index: u64) -> Result<Replicate> {
    let mut rng = stream_rng(cfg.seed, index);
    let x = gen_design(cfg.n, cfg.p, cfg.design, &mut rng)?;
    let truth = gen_coefficients(cfg.n, cfg.p, cfg.s, cfg.n_knots, &mut rng)?;
    let e = gen_errors(cfg.error, cfg.n, &mut rng)?;
    let y = DVector::from_fn(cfg.n, |i, _| x.row(i).dot(&truth.beta.row(i)) + e[i]);
    Ok(Replicate {
        data: Dataset::new(x, y)?,
        truth,
    })
}

/// Error counts of one method, mergeable across replications.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Tally {
    pub false_positives: u64,
    pub null_tests: u64,
    pub false_negatives: u64,
    pub nonnull_tests: u64,
    pub familywise_errors: u64,
    pub points: u64,
    pub squared_error: f64,
    pub coefficients: u64,
}

impl Tally {
    /// Records one time point given the true support, the rejected set and
    /// optionally the estimate against the truth.
    pub fn record(
        &mut self,
        p: usize,
        support: &BTreeSet<usize>,
        rejected: &BTreeSet<usize>,
        estimate: Option<(&DVector<f64>, &DVector<f64>)>,
    ) {
        let mut any_false = false;
        for j in 0..p {
            let rej = rejected.contains(&j);
            if support.contains(&j) {
                self.nonnull_tests += 1;
                self.false_negatives += u64::from(!rej);
            } else {
                self.null_tests += 1;
                if rej {
                    self.false_positives += 1;
                    any_false = true;
                }
            }
        }
        self.points += 1;
        self.familywise_errors += u64::from(any_false);
        if let Some((est, truth)) = estimate {
            self.squared_error += (est - truth).norm_squared();
            self.coefficients += p as u64;
        }
    }

    pub fn merge(&mut self, other: &Tally) {
        self.false_positives += other.false_positives;
        self.null_tests += other.null_tests;
        self.false_negatives += other.false_negatives;
        self.nonnull_tests += other.nonnull_tests;
        self.familywise_errors += other.familywise_errors;
        self.points += other.points;
        self.squared_error += other.squared_error;
        self.coefficients += other.coefficients;
    }

    fn ratio(num: u64, den: u64) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn fpr(&self) -> f64 {
        Self::ratio(self.false_positives, self.null_tests)
    }

    pub fn fnr(&self) -> f64 {
        Self::ratio(self.false_negatives, self.nonnull_tests)
    }

    pub fn fwer(&self) -> f64 {
        Self::ratio(self.familywise_errors, self.points)
    }

    pub fn rmse(&self) -> f64 {
        if self.coefficients == 0 {
            f64::NAN
        } else {
            (self.squared_error / self.coefficients as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub fpr: f64,
    pub fnr: f64,
    pub fwer: f64,
    pub rmse: f64,
    pub counts: Tally,
    pub replications: usize,
    pub failed_replications: usize,
    /// Calibrated penalty (FP-Lasso only).
    pub lambda1: Option<f64>,
}

impl MethodMetrics {
    fn new(method: Method, counts: Tally, replications: usize, failed: usize) -> Self {
        Self {
            method,
            fpr: counts.fpr(),
            fnr: counts.fnr(),
            fwer: counts.fwer(),
            rmse: counts.rmse(),
            counts,
            replications,
            failed_replications: failed,
            lambda1: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub config: SimulationConfig,
    pub grid_points: usize,
    pub methods: Vec<MethodMetrics>,
    /// Share of the long-memory variance lost to truncation, when applicable.
    pub lrd_truncation_ratio: Option<f64>,
    /// Wall-clock seconds; excluded from the serialized forms.
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl MetricsReport {
    pub fn method(&self, m: Method) -> Option<&MethodMetrics> {
        self.methods.iter().find(|x| x.method == m)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,fpr,fnr,fwer,rmse,false_positives,null_tests,false_negatives,nonnull_tests,familywise_errors,points,replications,failed_replications,lambda1\n",
        );
        for m in &self.methods {
            let c = &m.counts;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                m.method.name(),
                m.fpr,
                m.fnr,
                m.fwer,
                m.rmse,
                c.false_positives,
                c.null_tests,
                c.false_negatives,
                c.nonnull_tests,
                c.familywise_errors,
                c.points,
                m.replications,
                m.failed_replications,
                m.lambda1.map(|l| l.to_string()).unwrap_or_default()
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<10} {:>12} {:>12} {:>12} {:>12} {:>8}\n",
            "method", "FPR", "FNR", "FWER", "RMSE", "failed"
        );
        for m in &self.methods {
            let _ = writeln!(
                out,
                "{:<10} {:>12.6} {:>12.4} {:>12.4} {:>12.4} {:>8}",
                m.method.name(),
                m.fpr,
                m.fnr,
                m.fwer,
                m.rmse,
                m.failed_replications
            );
        }
        out
    }
}

struct ReplicateOutcome {
    proposed: Option<Tally>,
    tv_lasso: Option<Tally>,
    non_tv: Option<Tally>,
}

fn row_of(t: f64, n: usize) -> usize {
    ((t * n as f64).round() as usize).saturating_sub(1)
}

fn support_of(beta: &DVector<f64>) -> BTreeSet<usize> {
    (0..beta.len()).filter(|&j| beta[j] != 0.0).collect()
}

fn run_pipeline_methods(
    cfg: &SimulationConfig,
    pipeline: &PipelineConfig,
    grid: &[f64],
    draws: Option<&NormalDraws>,
    global_draws: Option<&NormalDraws>,
    rep: &Replicate,
) -> Result<ReplicateOutcome> {
    let p = cfg.p;
    let wants = |m| cfg.methods.contains(&m);
    let mut proposed = None;
    if wants(Method::Proposed) {
        let fits = infer_path_with(&rep.data, grid, pipeline, draws)?;
        let mut tally = Tally::default();
        for (fit, &t) in fits.into_iter().zip(grid) {
            let fit = fit?;
            let row = row_of(t, cfg.n);
            let rejected: BTreeSet<usize> = fit.rejected.iter().copied().collect();
            tally.record(
                p,
                &rep.truth.support_at(row),
                &rejected,
                Some((&fit.estimate.beta_hat, &rep.truth.at(row))),
            );
        }
        proposed = Some(tally);
    }
    let tv_lasso = if wants(Method::TvLasso) {
        Some(run_tv_lasso(cfg, grid, rep)?)
    } else {
        None
    };
    let non_tv = if wants(Method::NonTv) {
        Some(run_non_tv(cfg, pipeline, grid, global_draws, rep)?)
    } else {
        None
    };
    Ok(ReplicateOutcome {
        proposed,
        tv_lasso,
        non_tv,
    })
}

/// Kernel-weighted Lasso with a cross-validated penalty at every grid point;
/// its support counts as the rejection set.
fn run_tv_lasso(cfg: &SimulationConfig, grid: &[f64], rep: &Replicate) -> Result<Tally> {
    let grid_spec = LambdaGrid::default();
    let mut tally = Tally::default();
    for &t in grid {
        let nb = kernel_weights(&cfg.kernel, t, cfg.n)?;
        let design = build_local_design(&rep.data, &nb)?;
        let lambda = cross_validate_lambda1(&design, &grid_spec, &cfg.lasso)?.lambda1;
        let fit = weighted_lasso(&design, lambda, &cfg.lasso)?;
        let row = row_of(t, cfg.n);
        tally.record(
            cfg.p,
            &rep.truth.support_at(row),
            &support_of(&fit.beta),
            Some((&fit.beta, &rep.truth.at(row))),
        );
    }
    Ok(tally)
}

/// One global fit with weights `1 / n` and `lambda1 = sqrt(2 log p / n)`,
/// scored against the truth at every grid point.
fn run_non_tv(
    cfg: &SimulationConfig,
    pipeline: &PipelineConfig,
    grid: &[f64],
    draws: Option<&NormalDraws>,
    rep: &Replicate,
) -> Result<Tally> {
    let n = cfg.n;
    let design = build_local_design(&rep.data, &Neighborhood::global(n))?;
    let lambda1 = (2.0 * (cfg.p as f64).ln() / n as f64).sqrt().max(crate::lasso::LAMBDA0_FLOOR);
    let mut global = pipeline.clone();
    global.lasso.lambda1 = crate::lasso::Lambda1Rule::Fixed(lambda1);
    let stage = lasso_stage(design, &global, n)?;
    let noise = match stage.sigma_hat {
        Some(s) => WindowNoise::Iid(s),
        None => match &global.error_model {
            crate::error_cov::ErrorCovModel::IidKnown { sigma } => WindowNoise::Iid(*sigma),
            model => {
                // residuals of the global fit stand in for pooled residuals
                let resid = rep.data.y() - rep.data.x() * &stage.beta_tilde;
                WindowNoise::Matrix(crate::error_cov::build_sigma_et(
                    model,
                    &stage.design,
                    Some(&resid),
                    None,
                )?)
            }
        },
    };
    let owned;
    let draws = match draws {
        Some(d) => d,
        None => {
            owned = NormalDraws::new(pipeline.inference.seed, pipeline.inference.n_mc, n.min(cfg.p));
            &owned
        }
    };
    let fit = inference_stage(
        stage,
        &noise,
        global.lambda2_for(n),
        global.rank_tol,
        &global.inference,
        draws,
    )?;
    let rejected: BTreeSet<usize> = fit.rejected.iter().copied().collect();
    let mut tally = Tally::default();
    for &t in grid {
        let row = row_of(t, n);
        tally.record(
            cfg.p,
            &rep.truth.support_at(row),
            &rejected,
            Some((&fit.estimate.beta_hat, &rep.truth.at(row))),
        );
    }
    Ok(tally)
}

/// Support-based family-wise error of the Lasso at a fixed penalty over a batch,
/// updating the warm starts in place.
fn support_fwer(
    batch: &[(Replicate, Vec<(LassoProblem, usize)>)],
    warm: &mut [Vec<DVector<f64>>],
    lambda: f64,
    lasso: &LassoConfig,
) -> Result<f64> {
    let results: Vec<Result<(u64, u64)>> = batch
        .par_iter()
        .zip(warm.par_iter_mut())
        .map(|((rep, problems), starts)| {
            let mut events = 0;
            for ((problem, row), start) in problems.iter().zip(starts.iter_mut()) {
                let fit = problem.solve(lambda, Some(start), lasso.max_iter, lasso.conv_tol)?;
                let support = rep.truth.support_at(*row);
                if fit.beta.iter().enumerate().any(|(j, b)| *b != 0.0 && !support.contains(&j)) {
                    events += 1;
                }
                *start = fit.beta;
            }
            Ok((events, problems.len() as u64))
        })
        .collect();
    let (mut events, mut points) = (0, 0);
    for r in results {
        let (e, n) = r?;
        events += e;
        points += n;
    }
    Ok(if points == 0 { 0.0 } else { events as f64 / points as f64 })
}

fn local_problems(rep: &Replicate, grid: &[f64], kernel: &KernelSpec, n: usize) -> Result<Vec<(LassoProblem, usize)>> {
    grid.iter()
        .map(|&t| {
            let nb = kernel_weights(kernel, t, n)?;
            let design = build_local_design(&rep.data, &nb)?;
            Ok((LassoProblem::new(&design), row_of(t, n)))
        })
        .collect()
}

const FP_BISECTION_STEPS: usize = 20;
const FP_TOLERANCE: f64 = 0.005;

/// Penalty whose support-based FWER on a calibration batch is closest to `target`.
fn calibrate_fp_lasso(cfg: &SimulationConfig, grid: &[f64], target: f64) -> Result<f64> {
    let offset = cfg.replications as u64;
    let batch: Vec<(Replicate, Vec<(LassoProblem, usize)>)> = (0..cfg.calibration_replications as u64)
        .into_par_iter()
        .map(|k| {
            let rep = gen_replicate(cfg, offset + k)?;
            let problems = local_problems(&rep, grid, &cfg.kernel, cfg.n)?;
            Ok((rep, problems))
        })
        .collect::<Result<_>>()?;
    let mut hi = batch
        .iter()
        .flat_map(|(_, probs)| probs.iter().map(|(pr, _)| pr.lambda_max()))
        .fold(0.0_f64, f64::max)
        .max(crate::lasso::LAMBDA0_FLOOR);
    let mut lo = hi * 1e-4;
    let p = cfg.p;
    let mut warm: Vec<Vec<DVector<f64>>> = batch
        .iter()
        .map(|(_, probs)| vec![DVector::zeros(p); probs.len()])
        .collect();
    let mut best = (f64::INFINITY, hi);
    for step in 0..FP_BISECTION_STEPS {
        let mid = (lo.ln() + hi.ln()).mul_add(0.5, 0.0).exp();
        let fwer = support_fwer(&batch, &mut warm, mid, &cfg.lasso)?;
        info!("fp-lasso calibration step {step}: lambda1 = {mid:e}, fwer = {fwer}");
        let gap = (fwer - target).abs();
        if gap < best.0 {
            best = (gap, mid);
        }
        if gap <= FP_TOLERANCE {
            break;
        }
        // larger penalties select fewer null coordinates
        if fwer > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 > FP_TOLERANCE {
        warn!(
            "fp-lasso calibration ended {:.4} away from the target fwer {target}",
            best.0
        );
    }
    Ok(best.1)
}

fn run_fp_lasso(cfg: &SimulationConfig, grid: &[f64], lambda: f64) -> Result<(Tally, usize)> {
    let outcomes: Vec<Result<Tally>> = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|k| {
            let rep = gen_replicate(cfg, k)?;
            let mut tally = Tally::default();
            for (problem, row) in local_problems(&rep, grid, &cfg.kernel, cfg.n)? {
                let fit = problem.solve(lambda, None, cfg.lasso.max_iter, cfg.lasso.conv_tol)?;
                let truth = rep.truth.at(row);
                tally.record(
                    cfg.p,
                    &rep.truth.support_at(row),
                    &support_of(&fit.beta),
                    Some((&fit.beta, &truth)),
                );
            }
            Ok(tally)
        })
        .collect();
    let mut total = Tally::default();
    let mut failed = 0;
    for o in outcomes {
        match o {
            Ok(t) => total.merge(&t),
            Err(e) => {
                warn!("fp-lasso replication failed: {e}");
                failed += 1;
            }
        }
    }
    Ok((total, failed))
}

/// Runs every configured method over `replications` data sets.
pub fn run_simulation(cfg: &SimulationConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let start = Instant::now();
    let grid = interior_grid(cfg.n, &cfg.kernel);
    if grid.is_empty() {
        return Err(Error::invalid("bandwidth", "no grid point inside the interior interval"));
    }
    let pipeline = cfg.pipeline();
    let draws = shared_draws(cfg.n, cfg.p, &grid, &pipeline);
    let global_draws = cfg
        .methods
        .contains(&Method::NonTv)
        .then(|| NormalDraws::new(pipeline.inference.seed, cfg.n_mc, cfg.n.min(cfg.p)));

    let outcomes: Vec<Result<ReplicateOutcome>> = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|k| {
            let rep = gen_replicate(cfg, k)?;
            run_pipeline_methods(cfg, &pipeline, &grid, draws.as_ref(), global_draws.as_ref(), &rep)
        })
        .collect();

    let mut proposed = Tally::default();
    let mut tv_lasso = Tally::default();
    let mut non_tv = Tally::default();
    let mut failed = 0;
    for (k, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                if let Some(t) = o.proposed {
                    proposed.merge(&t);
                }
                if let Some(t) = o.tv_lasso {
                    tv_lasso.merge(&t);
                }
                if let Some(t) = o.non_tv {
                    non_tv.merge(&t);
                }
            }
            Err(e) => {
                warn!("replication {k} failed: {e}");
                failed += 1;
            }
        }
    }
    let used = cfg.replications - failed;

    let mut methods = Vec::new();
    let mut sorted = cfg.methods.clone();
    sorted.sort();
    sorted.dedup();
    for m in sorted {
        let metrics = match m {
            Method::Proposed => MethodMetrics::new(m, proposed.clone(), used, failed),
            Method::TvLasso => MethodMetrics::new(m, tv_lasso.clone(), used, failed),
            Method::NonTv => MethodMetrics::new(m, non_tv.clone(), used, failed),
            Method::FpLasso => {
                let target = match cfg.fp_target_fwer {
                    Some(t) => t,
                    None if cfg.methods.contains(&Method::Proposed) => proposed.fwer(),
                    None => cfg.alpha,
                };
                let lambda = calibrate_fp_lasso(cfg, &grid, target)?;
                let (tally, fp_failed) = run_fp_lasso(cfg, &grid, lambda)?;
                let mut mm = MethodMetrics::new(m, tally, cfg.replications - fp_failed, fp_failed);
                mm.lambda1 = Some(lambda);
                mm
            }
        };
        methods.push(metrics);
    }

    let report = MetricsReport {
        config: cfg.clone(),
        grid_points: grid.len(),
        methods,
        lrd_truncation_ratio: match cfg.error {
            ErrorProcess::Lrd { rho } => Some(lrd_truncation_ratio(rho)),
            _ => None,
        },
        runtime_secs: start.elapsed().as_secs_f64(),
    };
    info!("simulation finished in {:.1} s", report.runtime_secs);
    Ok(report)
}

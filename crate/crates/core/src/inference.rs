//! Bias-corrected p-values, the Monte-Carlo null distribution of the minimum
//! p-value, multiplicity adjustment and the end-to-end pointwise pipeline.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::error_cov::{build_sigma_et, ErrorCovModel};
use crate::estimator::{bias_correct, tv_ridge, PointEstimate};
use crate::lasso::{
    cross_validate_lambda1, cycle_sigma, recommend_lambda, scaled_lasso_sigma, weighted_lasso,
    Lambda1Rule, LambdaGrid,
    LassoConfig,
};
use crate::local_design::{
    build_local_design, kernel_weights, ridge_covariance, svd_projection, Dataset, KernelSpec,
    LocalDesign, RidgeCovariance, SpectralDesign, DEFAULT_RANK_TOL,
};
use crate::stats::{max_abs, stream_rng, stream_seed, two_sided_p};

const MIN_NMC: usize = 1000;
const WARN_NMC: usize = 10_000;
const NULL_BLOCK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Exponent in the bias-correction term `lambda1^{1 - xi}`.
    pub xi: f64,
    /// Offset added to raw p-values before adjustment.
    pub zeta: f64,
    pub alpha: f64,
    /// Monte-Carlo draws for the null distribution.
    pub n_mc: usize,
    pub seed: u64,
    /// Share the standard normal draws across time points.
    pub common_random_numbers: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            xi: 0.05,
            zeta: 0.0,
            alpha: 0.05,
            n_mc: 50_000,
            seed: 0,
            common_random_numbers: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.xi) {
            return Err(Error::invalid("xi", format!("must lie in [0, 1), got {}", self.xi)));
        }
        if !(self.zeta >= 0.0) || !self.zeta.is_finite() {
            return Err(Error::invalid("zeta", format!("must be nonnegative, got {}", self.zeta)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        if self.n_mc < MIN_NMC {
            return Err(Error::invalid(
                "n_mc",
                format!("must be at least {MIN_NMC}, got {}", self.n_mc),
            ));
        }
        if self.n_mc < WARN_NMC {
            warn!("n_mc = {} gives a coarse null distribution", self.n_mc);
        }
        Ok(())
    }
}

/// Sorted Monte-Carlo sample of the minimum p-value under the null.
#[derive(Debug, Clone, PartialEq)]
pub struct NullDistribution {
    sorted: Vec<f64>,
}

impl NullDistribution {
    pub fn from_sample(mut sample: Vec<f64>) -> Result<Self> {
        if sample.is_empty() {
            return Err(Error::InvalidData("empty null sample".into()));
        }
        if sample.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData("null sample outside [0, 1]".into()));
        }
        sample.sort_by(f64::total_cmp);
        Ok(Self { sorted: sample })
    }

    pub fn sample(&self) -> &[f64] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Right-continuous empirical CDF.
    pub fn cdf(&self, z: f64) -> f64 {
        if z >= 1.0 {
            return 1.0;
        }
        self.sorted.partition_point(|&v| v <= z) as f64 / self.sorted.len() as f64
    }
}

/// Standard normal draws stored as a `cols x n_mc` matrix, one draw per
/// column. Coordinate `k` of every draw comes from its own stream so that the
/// leading coordinates do not depend on `cols`.
#[derive(Debug, Clone)]
pub struct NormalDraws {
    g: DMatrix<f64>,
}

impl NormalDraws {
    pub fn new(seed: u64, n_mc: usize, cols: usize) -> Self {
        let mut g = DMatrix::zeros(cols, n_mc);
        for k in 0..cols {
            let mut rng = stream_rng(seed, k as u64);
            for v in g.row_mut(k).iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        Self { g }
    }

    pub fn n_mc(&self) -> usize {
        self.g.ncols()
    }

    pub fn cols(&self) -> usize {
        self.g.nrows()
    }
}

/// Null distribution of `min_j 2 (1 - Phi(|V_j| / Omega_jj^{1/2}))` for `V = M g`.
pub fn null_from_covariance(cov: &RidgeCovariance, draws: &NormalDraws) -> Result<NullDistribution> {
    let m = cov.factor();
    let (p, r) = m.shape();
    if r > draws.cols() {
        return Err(Error::invalid(
            "draws",
            format!("need {r} normal columns, have {}", draws.cols()),
        ));
    }
    let diag = cov.diag();
    if let Some(j) = (0..p).find(|&j| !(diag[j] > 0.0)) {
        return Err(Error::DegenerateVariance {
            index: j,
            value: diag[j],
        });
    }
    // rows scaled to unit variance
    let mut standardized = m.clone();
    for (j, mut row) in standardized.row_iter_mut().enumerate() {
        row /= diag[j].sqrt();
    }
    let n = draws.n_mc();
    let mut sample = Vec::with_capacity(n);
    let mut v = DMatrix::zeros(p, NULL_BLOCK.min(n));
    let mut start = 0;
    while start < n {
        let len = NULL_BLOCK.min(n - start);
        if v.ncols() != len {
            v = DMatrix::zeros(p, len);
        }
        v.gemm(1.0, &standardized, &draws.g.view((0, start), (r, len)), 0.0);
        sample.extend(v.column_iter().map(|col| two_sided_p(max_abs(col.as_slice()))));
        start += len;
    }
    NullDistribution::from_sample(sample)
}

/// Monte-Carlo null distribution at one window with error covariance `sigma_et`.
pub fn estimate_null_distribution(
    sd: &SpectralDesign,
    sigma_et: &DMatrix<f64>,
    lambda2: f64,
    cfg: &InferenceConfig,
) -> Result<NullDistribution> {
    cfg.validate()?;
    let cov = ridge_covariance(sd, sigma_et, lambda2)?;
    let draws = NormalDraws::new(cfg.seed, cfg.n_mc, cov.factor().ncols());
    null_from_covariance(&cov, &draws)
}

/// Raw two-sided p-values with the projection-bias correction, and the correction terms.
pub fn raw_pvalues(
    est: &PointEstimate,
    sd: &SpectralDesign,
    omega_diag: &DVector<f64>,
    lambda1: f64,
    xi: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let p = est.beta_hat.len();
    if omega_diag.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "{} variances for {p} coefficients",
            omega_diag.len()
        )));
    }
    if !(lambda1 > 0.0) {
        return Err(Error::invalid("lambda1", format!("must be positive, got {lambda1}")));
    }
    if let Some(j) = (0..p).find(|&j| !(omega_diag[j] > 0.0)) {
        return Err(Error::DegenerateVariance {
            index: j,
            value: omega_diag[j],
        });
    }
    let correction = sd.offdiag_row_maxima() * lambda1.powf(1.0 - xi);
    let raw = DVector::from_fn(p, |j, _| {
        let excess = (est.beta_hat[j].abs() - correction[j]).max(0.0);
        two_sided_p(excess / omega_diag[j].sqrt())
    });
    Ok((raw, correction))
}

/// `F(min(1, raw + zeta))`.
pub fn adjust_pvalues(raw: &DVector<f64>, null: &NullDistribution, zeta: f64) -> DVector<f64> {
    raw.map(|r| null.cdf((r + zeta).min(1.0)))
}

/// Everything computed at one time point.
#[derive(Debug, Clone)]
pub struct PointwiseFit {
    pub estimate: PointEstimate,
    pub lambda1: f64,
    /// Noise level used for iid error models.
    pub sigma: Option<f64>,
    pub window: usize,
    pub rank: usize,
    pub omega_diag: DVector<f64>,
    pub raw_p: DVector<f64>,
    pub adj_p: DVector<f64>,
    pub rejected: Vec<usize>,
    pub correction: DVector<f64>,
}

/// Configuration of the full pointwise pipeline.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub kernel: KernelSpec,
    pub lasso: LassoConfig,
    /// Ridge penalty; `1 / n` when absent.
    pub lambda2: Option<f64>,
    pub error_model: ErrorCovModel,
    pub inference: InferenceConfig,
    pub rank_tol: f64,
    /// Stop at the first failing time point instead of collecting errors.
    pub fail_fast: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::default(),
            lasso: LassoConfig::default(),
            lambda2: None,
            error_model: ErrorCovModel::default(),
            inference: InferenceConfig::default(),
            rank_tol: DEFAULT_RANK_TOL,
            fail_fast: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        self.kernel.validate()?;
        self.lasso.validate()?;
        if let Some(l2) = self.lambda2 {
            if !(l2 > 0.0) || !l2.is_finite() {
                return Err(Error::invalid("lambda2", format!("must be positive, got {l2}")));
            }
        }
        if !(self.rank_tol > 0.0) {
            return Err(Error::invalid("rank_tol", "must be positive"));
        }
        self.error_model.validate(n)?;
        self.inference.validate()
    }

    pub fn lambda2_for(&self, n: usize) -> f64 {
        self.lambda2.unwrap_or(1.0 / n as f64)
    }
}

/// Lasso output at one window.
#[derive(Debug, Clone)]
pub struct LassoStage {
    pub design: LocalDesign,
    pub beta_tilde: DVector<f64>,
    pub lambda1: f64,
    pub sigma_hat: Option<f64>,
}

/// Noise description on one window.
#[derive(Debug, Clone)]
pub enum WindowNoise {
    /// `sigma^2 I`; the null distribution is computed free of `sigma`.
    Iid(f64),
    Matrix(DMatrix<f64>),
}

fn needs_scaled_lasso(cfg: &PipelineConfig) -> bool {
    match cfg.error_model {
        ErrorCovModel::IidEstimated => true,
        ErrorCovModel::IidKnown { .. } | ErrorCovModel::KnownMatrix(_) => false,
        ErrorCovModel::BandedEstimate(_) => false,
    }
}

/// Selects `lambda1` and fits the Lasso on one window.
pub fn lasso_stage(design: LocalDesign, cfg: &PipelineConfig, n_total: usize) -> Result<LassoStage> {
    lasso_stage_with(design, cfg, n_total, None)
}

/// [`lasso_stage`] where `residual_sd`, the marginal noise scale of pooled
/// residuals, sets the penalty under the banded model.
fn lasso_stage_with(
    design: LocalDesign,
    cfg: &PipelineConfig,
    n_total: usize,
    residual_sd: Option<f64>,
) -> Result<LassoStage> {
    let sigma_hat = if needs_scaled_lasso(cfg) {
        match scaled_lasso_sigma(&design, &cfg.lasso) {
            Ok(fit) => Some(fit.sigma),
            Err(Error::ScaledLassoNonConvergence { rounds, trace }) => match cycle_sigma(&trace) {
                Some(sigma) => {
                    warn!("scaled lasso at t = {} cycles; using sigma = {sigma}", design.t);
                    Some(sigma)
                }
                None => {
                    return Err(Error::ScaledLassoNonConvergence { rounds, trace })
                        .stage("scaled lasso")
                }
            },
            Err(e) => return Err(e).stage("scaled lasso"),
        }
    } else {
        None
    };
    let lambda1 = match &cfg.lasso.lambda1 {
        Lambda1Rule::Fixed(l) => *l,
        Lambda1Rule::CrossValidated(grid) => {
            cross_validate_lambda1(&design, grid, &cfg.lasso)
                .stage("cross-validation")?
                .lambda1
        }
        Lambda1Rule::Recommended { regime, multiplier } => {
            let sigma = match &cfg.error_model {
                ErrorCovModel::IidKnown { sigma } => *sigma,
                ErrorCovModel::KnownMatrix(s) => {
                    let m = design.indices.len() as f64;
                    (design.indices.iter().map(|&i| s[(i, i)]).sum::<f64>() / m).sqrt()
                }
                ErrorCovModel::BandedEstimate(_) => residual_sd.unwrap_or(0.0),
                ErrorCovModel::IidEstimated => sigma_hat.unwrap_or(0.0),
            };
            // a vanishing noise estimate still needs a positive penalty
            let sigma = sigma.max(f64::MIN_POSITIVE);
            recommend_lambda(regime, &design, sigma, n_total, *multiplier)
                .stage("penalty")?
                .lambda1
        }
    };
    let fit = weighted_lasso(&design, lambda1, &cfg.lasso).stage("lasso")?;
    Ok(LassoStage {
        design,
        beta_tilde: fit.beta,
        lambda1,
        sigma_hat,
    })
}

/// Ridge fit, bias correction, p-values and adjustment on one window.
pub fn inference_stage(
    stage: LassoStage,
    noise: &WindowNoise,
    lambda2: f64,
    rank_tol: f64,
    cfg: &InferenceConfig,
    draws: &NormalDraws,
) -> Result<PointwiseFit> {
    let LassoStage {
        design,
        beta_tilde,
        lambda1,
        ..
    } = stage;
    let window = design.m();
    let sd = svd_projection(design, rank_tol).stage("svd")?;
    let theta = tv_ridge(&sd, lambda2).stage("ridge")?;
    let estimate = bias_correct(theta, beta_tilde, &sd)?;
    let m = sd.design().m();
    let (cov, null, sigma) = match noise {
        WindowNoise::Iid(sigma) => {
            let unit = ridge_covariance(&sd, &DMatrix::identity(m, m), lambda2)
                .stage("ridge covariance")?;
            let null = null_from_covariance(&unit, draws).stage("null distribution")?;
            (unit.scaled(sigma * sigma), null, Some(*sigma))
        }
        WindowNoise::Matrix(s) => {
            let cov = ridge_covariance(&sd, s, lambda2).stage("ridge covariance")?;
            let null = null_from_covariance(&cov, draws).stage("null distribution")?;
            (cov, null, None)
        }
    };
    let omega_diag = cov.diag().clone();
    let (raw_p, correction) =
        raw_pvalues(&estimate, &sd, &omega_diag, lambda1, cfg.xi).stage("p-values")?;
    let adj_p = adjust_pvalues(&raw_p, &null, cfg.zeta);
    let rejected = (0..adj_p.len()).filter(|&j| adj_p[j] <= cfg.alpha).collect();
    Ok(PointwiseFit {
        estimate,
        lambda1,
        sigma,
        window,
        rank: sd.rank(),
        omega_diag,
        raw_p,
        adj_p,
        rejected,
        correction,
    })
}

fn window_noise(
    cfg: &PipelineConfig,
    stage: &LassoStage,
    residuals: Option<&DVector<f64>>,
) -> Result<WindowNoise> {
    match &cfg.error_model {
        ErrorCovModel::IidKnown { sigma } => Ok(WindowNoise::Iid(*sigma)),
        ErrorCovModel::IidEstimated => Ok(WindowNoise::Iid(stage.sigma_hat.unwrap_or(0.0))),
        model => Ok(WindowNoise::Matrix(build_sigma_et(
            model,
            &stage.design,
            residuals,
            stage.sigma_hat,
        )?)),
    }
}

fn local_design_at(data: &Dataset, t: f64, kernel: &KernelSpec) -> Result<LocalDesign> {
    let nb = kernel_weights(kernel, t, data.n()).stage("kernel weights")?;
    build_local_design(data, &nb).stage("local design")
}

/// Residuals `y_i - x_i^T beta_tilde(t_i)` pooled over all observations, with
/// each time clamped to the interior interval. The pilot fits use a
/// cross-validated penalty whatever `cfg` prescribes; they are returned for
/// reuse when `cfg` asks for the same rule.
pub fn pooled_residuals(
    data: &Dataset,
    cfg: &PipelineConfig,
) -> Result<(DVector<f64>, Vec<(usize, LassoStage)>)> {
    let n = data.n();
    let rows = cfg.kernel.interior_rows(n);
    if rows.is_empty() {
        return Err(Error::invalid("bandwidth", "no observation lies in the interior interval"));
    }
    let mut pilot = cfg.clone();
    if !matches!(pilot.lasso.lambda1, Lambda1Rule::CrossValidated(_)) {
        pilot.lasso.lambda1 = Lambda1Rule::CrossValidated(LambdaGrid::default());
    }
    let pilot = &pilot;
    let stages: Vec<(usize, LassoStage)> = rows
        .par_iter()
        .map(|&i| {
            let design = local_design_at(data, data.time(i), &pilot.kernel)?;
            Ok((i, lasso_stage(design, pilot, n)?))
        })
        .collect::<Result<_>>()
        .stage("pilot residuals")?;
    let (first, last) = (rows[0], rows[rows.len() - 1]);
    let residuals = DVector::from_fn(n, |i, _| {
        let row = i.clamp(first, last);
        let beta = &stages[row - first].1.beta_tilde;
        data.y()[i] - data.x().row(i).dot(&beta.transpose())
    });
    Ok((residuals, stages))
}

fn time_index(t: f64, n: usize) -> u64 {
    (t * n as f64).round().max(0.0) as u64
}

/// Pointwise fits over `grid`; per-point failures are collected unless
/// `cfg.fail_fast` is set.
pub fn infer_path(
    data: &Dataset,
    grid: &[f64],
    cfg: &PipelineConfig,
) -> Result<Vec<Result<PointwiseFit>>> {
    cfg.validate(data.n())?;
    infer_path_with(data, grid, cfg, None)
}

/// Draws shared by every time point when common random numbers are enabled:
/// enough coordinates for the largest window on `grid`.
pub fn shared_draws(n: usize, p: usize, grid: &[f64], cfg: &PipelineConfig) -> Option<NormalDraws> {
    let inf = &cfg.inference;
    if !inf.common_random_numbers {
        return None;
    }
    let max_window = grid
        .iter()
        .filter_map(|&t| kernel_weights(&cfg.kernel, t, n).ok().map(|nb| nb.len()))
        .max()
        .unwrap_or(0);
    Some(NormalDraws::new(inf.seed, inf.n_mc, max_window.min(p)))
}

/// [`infer_path`] with a validated configuration and optionally precomputed
/// shared draws (see [`shared_draws`]).
pub fn infer_path_with(
    data: &Dataset,
    grid: &[f64],
    cfg: &PipelineConfig,
    draws: Option<&NormalDraws>,
) -> Result<Vec<Result<PointwiseFit>>> {
    let n = data.n();
    let lambda2 = cfg.lambda2_for(n);
    let inf = &cfg.inference;

    let (residuals, pilots) = if cfg.error_model.needs_residuals() {
        let (r, s) = pooled_residuals(data, cfg)?;
        let reuse = matches!(cfg.lasso.lambda1, Lambda1Rule::CrossValidated(_));
        (Some(r), if reuse { s } else { Vec::new() })
    } else {
        (None, Vec::new())
    };
    let residual_sd = residuals
        .as_ref()
        .map(|r| (r.norm_squared() / r.len() as f64).sqrt());

    let designs: Vec<Result<LocalDesign>> = grid
        .iter()
        .map(|&t| local_design_at(data, t, &cfg.kernel))
        .collect();
    let owned_shared;
    let shared = match draws {
        Some(d) => Some(d),
        None => {
            owned_shared = shared_draws(n, data.p(), grid, cfg);
            owned_shared.as_ref()
        }
    };

    let fits: Vec<Result<PointwiseFit>> = designs
        .into_par_iter()
        .zip(grid.par_iter())
        .map(|(design, &t)| {
            let design = design?;
            let pilot = pilots
                .iter()
                .find(|(i, _)| (data.time(*i) - t).abs() <= 1e-12)
                .map(|(_, s)| s.clone());
            let stage = match pilot {
                Some(s) => s,
                None => lasso_stage_with(design, cfg, n, residual_sd)?,
            };
            let noise = window_noise(cfg, &stage, residuals.as_ref()).stage("error covariance")?;
            let own;
            let draws = match shared {
                Some(d) => d,
                None => {
                    let r = stage.design.m().min(data.p());
                    own = NormalDraws::new(stream_seed(inf.seed, time_index(t, n)), inf.n_mc, r);
                    &own
                }
            };
            inference_stage(stage, &noise, lambda2, cfg.rank_tol, inf, draws)
        })
        .collect();

    if cfg.fail_fast {
        if let Some(pos) = fits.iter().position(|f| f.is_err()) {
            return Err(fits.into_iter().nth(pos).unwrap().unwrap_err());
        }
    }
    Ok(fits)
}

/// Null distribution of the minimum p-value at `t`, drawn exactly as
/// [`infer_path`] draws it for that point. Under iid models it does not depend
/// on the noise level or the response.
pub fn null_distribution_at(data: &Dataset, t: f64, cfg: &PipelineConfig) -> Result<NullDistribution> {
    cfg.validate(data.n())?;
    let n = data.n();
    let design = local_design_at(data, t, &cfg.kernel)?;
    let m = design.m();
    let sigma_et = if cfg.error_model.is_iid() {
        DMatrix::identity(m, m)
    } else {
        let residuals = if cfg.error_model.needs_residuals() {
            Some(pooled_residuals(data, cfg)?.0)
        } else {
            None
        };
        build_sigma_et(&cfg.error_model, &design, residuals.as_ref(), None)
            .stage("error covariance")?
    };
    let sd = svd_projection(design, cfg.rank_tol).stage("svd")?;
    let cov = ridge_covariance(&sd, &sigma_et, cfg.lambda2_for(n)).stage("ridge covariance")?;
    let inf = &cfg.inference;
    let draws = match shared_draws(n, data.p(), &[t], cfg) {
        Some(d) => d,
        None => NormalDraws::new(
            stream_seed(inf.seed, time_index(t, n)),
            inf.n_mc,
            m.min(data.p()),
        ),
    };
    null_from_covariance(&cov, &draws).stage("null distribution")
}

/// The full pipeline at a single time point.
pub fn test_pointwise(data: &Dataset, t: f64, cfg: &PipelineConfig) -> Result<PointwiseFit> {
    let mut cfg = cfg.clone();
    cfg.fail_fast = true;
    infer_path(data, &[t], &cfg)?.pop().unwrap()
}

/// Every observation time inside the interior interval.
pub fn interior_grid(n: usize, kernel: &KernelSpec) -> Vec<f64> {
    kernel
        .interior_rows(n)
        .into_iter()
        .map(|i| (i + 1) as f64 / n as f64)
        .collect()
}

//! Kernel-weighted Lasso.
//!
//! The objective at a time point is `|Y_t - X_t b|_2^2 + lambda1 |b|_1` where
//! `X_t`, `Y_t` are the square-root weighted local design and response. The
//! solver is cyclic coordinate descent on the Gram matrix with the gradient
//! `G b` carried along (covariance updates), alternating full sweeps with
//! sweeps over the active set, and warm starts along descending penalty grids.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local_design::LocalDesign;

/// Floor applied to theory-guided penalties, which vanish when `p = 1`.
pub const LAMBDA0_FLOOR: f64 = 1e-12;

/// Penalty grid, always used in descending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaGrid {
    /// Explicit values.
    Values(Vec<f64>),
    /// `count` log-spaced values from `2 |X_t^T Y_t|_inf` down to `min_ratio` times that.
    Auto { count: usize, min_ratio: f64 },
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Auto {
            count: 20,
            min_ratio: 0.01,
        }
    }
}

impl LambdaGrid {
    pub fn validate(&self) -> Result<()> {
        match self {
            LambdaGrid::Values(v) => {
                if v.is_empty() {
                    return Err(Error::invalid("lambda grid", "grid is empty"));
                }
                if v.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                    return Err(Error::invalid("lambda grid", "values must be positive"));
                }
                if v.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(Error::invalid(
                        "lambda grid",
                        "values must be strictly descending",
                    ));
                }
            }
            LambdaGrid::Auto { count, min_ratio } => {
                if *count == 0 {
                    return Err(Error::invalid("lambda grid", "count must be positive"));
                }
                if !(*min_ratio > 0.0 && *min_ratio < 1.0) {
                    return Err(Error::invalid("lambda grid", "min_ratio must lie in (0, 1)"));
                }
            }
        }
        Ok(())
    }

    /// Concrete descending values for a problem with the given `lambda_max`.
    pub fn resolve(&self, lambda_max: f64) -> Vec<f64> {
        match self {
            LambdaGrid::Values(v) => v.clone(),
            LambdaGrid::Auto { count, min_ratio } => {
                let top = lambda_max.max(LAMBDA0_FLOOR);
                if *count == 1 {
                    return vec![top];
                }
                (0..*count)
                    .map(|k| top * min_ratio.powf(k as f64 / (*count - 1) as f64))
                    .collect()
            }
        }
    }
}

/// How `lambda1` is chosen at each time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda1Rule {
    Fixed(f64),
    CrossValidated(LambdaGrid),
    /// `multiplier * lambda0` with `lambda0` from [`recommend_lambda`].
    Recommended {
        regime: PenaltyRegime,
        multiplier: f64,
    },
}

impl Default for Lambda1Rule {
    fn default() -> Self {
        Lambda1Rule::Recommended {
            regime: PenaltyRegime::IidGaussian,
            multiplier: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoConfig {
    pub lambda1: Lambda1Rule,
    /// Maximum number of coordinate sweeps.
    pub max_iter: usize,
    /// Tolerance on the KKT residual.
    pub conv_tol: f64,
    pub cv_folds: usize,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            lambda1: Lambda1Rule::default(),
            max_iter: 100_000,
            conv_tol: 1e-8,
            cv_folds: 5,
        }
    }
}

impl LassoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.conv_tol > 0.0) {
            return Err(Error::invalid("conv_tol", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter", "must be positive"));
        }
        if self.cv_folds < 2 {
            return Err(Error::invalid("cv_folds", "need at least 2 folds"));
        }
        match &self.lambda1 {
            Lambda1Rule::Fixed(l) if !(*l > 0.0) || !l.is_finite() => {
                Err(Error::invalid("lambda1", format!("must be positive, got {l}")))
            }
            Lambda1Rule::CrossValidated(grid) => grid.validate(),
            Lambda1Rule::Recommended { regime, multiplier } => {
                regime.validate()?;
                if !(*multiplier > 0.0) {
                    return Err(Error::invalid("multiplier", "must be positive"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LassoFit {
    pub lambda: f64,
    pub beta: DVector<f64>,
    pub sweeps: usize,
    pub kkt_residual: f64,
}

impl LassoFit {
    pub fn support(&self) -> Vec<usize> {
        self.beta
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Sufficient statistics `X^T X`, `X^T Y`, `Y^T Y` of one local problem.
#[derive(Debug, Clone)]
pub struct LassoProblem {
    gram: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

impl LassoProblem {
    pub fn new(design: &LocalDesign) -> Self {
        Self {
            gram: design.xt.tr_mul(&design.xt),
            xty: design.xt.tr_mul(&design.yt),
            yty: design.yt.norm_squared(),
        }
    }

    pub fn p(&self) -> usize {
        self.xty.len()
    }

    /// Smallest penalty for which the solution is identically zero.
    pub fn lambda_max(&self) -> f64 {
        2.0 * self.xty.amax()
    }

    pub fn objective(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        let quad = beta.dot(&(&self.gram * beta));
        (self.yty - 2.0 * self.xty.dot(beta) + quad).max(0.0) + lambda * beta.lp_norm(1)
    }

    fn kkt_from_gradient(beta: &DVector<f64>, grad: &DVector<f64>, lambda: f64) -> f64 {
        beta.iter()
            .zip(grad.iter())
            .map(|(&b, &g)| {
                if b == 0.0 {
                    (g.abs() - lambda).max(0.0)
                } else {
                    (g - lambda * b.signum()).abs()
                }
            })
            .fold(0.0, f64::max)
    }

    /// Largest violation of the optimality conditions, with `g = 2 X^T (Y - X b)`.
    pub fn kkt_residual(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        let grad = (&self.xty - &self.gram * beta) * 2.0;
        Self::kkt_from_gradient(beta, &grad, lambda)
    }

    /// Coordinate descent from `warm` (or zero) at penalty `lambda >= 0`.
    pub fn solve(
        &self,
        lambda: f64,
        warm: Option<&DVector<f64>>,
        max_iter: usize,
        tol: f64,
    ) -> Result<LassoFit> {
        let p = self.p();
        let mut beta = match warm {
            Some(w) if w.len() == p => w.clone(),
            _ => DVector::zeros(p),
        };
        let half = 0.5 * lambda;
        let mut gb = &self.gram * &beta;
        let mut sweeps = 0;
        let mut kkt = f64::INFINITY;

        let update = |j: usize, beta: &mut DVector<f64>, gb: &mut DVector<f64>| -> f64 {
            let gjj = self.gram[(j, j)];
            let old = beta[j];
            let new = if gjj > 0.0 {
                let z = self.xty[j] - (gb[j] - gjj * old);
                soft_threshold(z, half) / gjj
            } else {
                0.0
            };
            let delta = new - old;
            if delta != 0.0 {
                beta[j] = new;
                gb.axpy(delta, &self.gram.column(j), 1.0);
            }
            delta.abs() * gjj.sqrt()
        };

        while sweeps < max_iter {
            // full sweep
            let mut full_change = 0.0_f64;
            for j in 0..p {
                full_change = full_change.max(update(j, &mut beta, &mut gb));
            }
            sweeps += 1;

            // polish the active set
            let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
            for _ in 0..ACTIVE_SWEEPS {
                if sweeps >= max_iter || active.is_empty() {
                    break;
                }
                let mut change = 0.0_f64;
                for &j in &active {
                    change = change.max(update(j, &mut beta, &mut gb));
                }
                sweeps += 1;
                if change <= 0.1 * tol {
                    break;
                }
            }

            match self.active_set_step(&active, &beta, lambda) {
                Some(ActiveStep::Solution(candidate)) => {
                    let residual = self.kkt_residual(&candidate, lambda);
                    if residual <= tol {
                        return Ok(LassoFit {
                            lambda,
                            beta: candidate,
                            sweeps,
                            kkt_residual: residual,
                        });
                    }
                }
                Some(ActiveStep::Partial(moved)) => {
                    beta = moved;
                    gb = &self.gram * &beta;
                }
                None => {}
            }

            let grad = (&self.xty - &gb) * 2.0;
            kkt = Self::kkt_from_gradient(&beta, &grad, lambda);
            if kkt <= tol || full_change == 0.0 {
                gb = &self.gram * &beta;
                kkt = self.kkt_residual(&beta, lambda);
                if kkt <= tol {
                    return Ok(LassoFit {
                        lambda,
                        beta,
                        sweeps,
                        kkt_residual: kkt,
                    });
                }
            }
        }
        Err(Error::LassoNonConvergence {
            iterations: sweeps,
            kkt_residual: kkt,
            last_iterate: beta.as_slice().to_vec(),
        })
    }

    /// Solves the stationarity equations `G_AA b_A = c_A - (lambda / 2) s_A` on the
    /// active set with the signs of `beta`. When the solution flips a sign, moves
    /// from `beta` toward it up to the first zero crossing instead; the objective
    /// decreases along that segment.
    fn active_set_step(
        &self,
        active: &[usize],
        beta: &DVector<f64>,
        lambda: f64,
    ) -> Option<ActiveStep> {
        if active.is_empty() {
            return None;
        }
        let k = active.len();
        let g_aa = DMatrix::from_fn(k, k, |a, b| self.gram[(active[a], active[b])]);
        let rhs = DVector::from_fn(k, |a, _| {
            let j = active[a];
            self.xty[j] - 0.5 * lambda * beta[j].signum()
        });
        let b_a = g_aa.cholesky()?.solve(&rhs);
        if b_a.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut step = 1.0_f64;
        let mut blocking = None;
        for (a, (&j, &v)) in active.iter().zip(b_a.iter()).enumerate() {
            if v == 0.0 || v.signum() != beta[j].signum() {
                let t = beta[j] / (beta[j] - v);
                if t < step {
                    step = t;
                    blocking = Some(a);
                }
            }
        }
        let mut out = DVector::zeros(self.p());
        match blocking {
            None if step == 1.0 && b_a.iter().zip(active).all(|(v, &j)| v.signum() == beta[j].signum()) => {
                for (&j, &v) in active.iter().zip(b_a.iter()) {
                    out[j] = v;
                }
                Some(ActiveStep::Solution(out))
            }
            _ => {
                for (&j, &v) in active.iter().zip(b_a.iter()) {
                    out[j] = beta[j] + step * (v - beta[j]);
                }
                if let Some(a) = blocking {
                    out[active[a]] = 0.0;
                }
                Some(ActiveStep::Partial(out))
            }
        }
    }

    /// Solutions along a descending grid, each warm-started from the previous one.
    pub fn path(&self, grid: &[f64], max_iter: usize, tol: f64) -> Vec<Result<LassoFit>> {
        let mut warm: Option<DVector<f64>> = None;
        grid.iter()
            .map(|&lambda| {
                let fit = self.solve(lambda, warm.as_ref(), max_iter, tol);
                if let Ok(f) = &fit {
                    warm = Some(f.beta.clone());
                }
                fit
            })
            .collect()
    }
}

/// The kernel-weighted Lasso at a fixed penalty.
pub fn weighted_lasso(design: &LocalDesign, lambda1: f64, cfg: &LassoConfig) -> Result<LassoFit> {
    if !(lambda1 > 0.0) || !lambda1.is_finite() {
        return Err(Error::invalid("lambda1", format!("must be positive, got {lambda1}")));
    }
    LassoProblem::new(design).solve(lambda1, None, cfg.max_iter, cfg.conv_tol)
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub lambda1: f64,
    pub grid: Vec<f64>,
    /// Out-of-fold weighted squared error per grid value (infinite where a fit failed).
    pub errors: Vec<f64>,
}

/// Interleaved folds: window position `k` belongs to fold `k mod folds`.
fn interleaved_folds(m: usize, folds: usize) -> Vec<Vec<usize>> {
    (0..folds)
        .map(|f| (f..m).step_by(folds).collect())
        .collect()
}

/// K-fold cross-validation of `lambda1` on one local window.
///
/// Training rows keep their kernel weights renormalized to one; the held-out
/// error is the kernel-weighted squared prediction error. Ties go to the
/// smallest penalty.
pub fn cross_validate_lambda1(
    design: &LocalDesign,
    grid: &LambdaGrid,
    cfg: &LassoConfig,
) -> Result<CvResult> {
    grid.validate()?;
    let values = grid.resolve(LassoProblem::new(design).lambda_max());
    if values.len() == 1 {
        return Ok(CvResult {
            lambda1: values[0],
            errors: vec![0.0],
            grid: values,
        });
    }
    let m = design.m();
    let folds = cfg.cv_folds.min(m);
    if folds < 2 {
        return Err(Error::InvalidData(format!(
            "window of {m} rows is too small for cross-validation"
        )));
    }
    let mut errors = vec![0.0; values.len()];
    for held in interleaved_folds(m, folds) {
        let train: Vec<usize> = (0..m).filter(|k| k % folds != held[0] % folds).collect();
        let sub = design.subset(&train);
        let problem = LassoProblem::new(&sub);
        let fits = problem.path(&values, cfg.max_iter, cfg.conv_tol);
        for (e, fit) in errors.iter_mut().zip(fits) {
            match fit {
                Ok(f) => {
                    for &k in &held {
                        let pred = design.xt.row(k).dot(&f.beta.transpose());
                        *e += (design.yt[k] - pred).powi(2);
                    }
                }
                Err(_) => *e = f64::INFINITY,
            }
        }
    }
    let best = errors.iter().copied().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::CrossValidationFailed);
    }
    let tie = 1e-12 * best.max(f64::MIN_POSITIVE);
    let lambda1 = values
        .iter()
        .zip(&errors)
        .filter(|(_, e)| **e <= best + tie)
        .map(|(l, _)| *l)
        .fold(f64::INFINITY, f64::min);
    Ok(CvResult {
        lambda1,
        grid: values,
        errors,
    })
}

#[derive(Debug, Clone)]
pub struct ScaledLassoFit {
    pub sigma: f64,
    pub beta: DVector<f64>,
    pub rounds: usize,
    pub trace: Vec<f64>,
}

enum ActiveStep {
    Solution(DVector<f64>),
    Partial(DVector<f64>),
}

/// Active-set sweeps between full sweeps.
const ACTIVE_SWEEPS: usize = 5;

const SCALED_LASSO_ROUNDS: usize = 50;
const SCALED_LASSO_TOL: f64 = 1e-6;

/// Joint estimate of the noise level and coefficients by alternating a Lasso
/// fit at penalty `2 sigma sqrt(2 log p / |N_t|)` with the degrees-of-freedom
/// corrected residual variance.
pub fn scaled_lasso_sigma(design: &LocalDesign, cfg: &LassoConfig) -> Result<ScaledLassoFit> {
    let m = design.m();
    if m < 4 {
        return Err(Error::InvalidData(format!(
            "scaled lasso needs at least 4 rows, window has {m}"
        )));
    }
    let p = design.p();
    let universal = (2.0 * (p as f64).ln() / m as f64).sqrt();
    let problem = LassoProblem::new(design);
    let mut sigma = design.yt.norm();
    let mut beta = DVector::zeros(p);
    let mut trace = vec![sigma];
    for round in 1..=SCALED_LASSO_ROUNDS {
        if sigma < 1e-12 {
            return Ok(ScaledLassoFit {
                sigma,
                beta,
                rounds: round - 1,
                trace,
            });
        }
        let fit = problem.solve(2.0 * sigma * universal, Some(&beta), cfg.max_iter, cfg.conv_tol)?;
        beta = fit.beta;
        let s_hat = beta.iter().filter(|b| **b != 0.0).count();
        let rss = (&design.yt - &design.xt * &beta).norm_squared();
        let dof = (m as f64 - s_hat as f64).max(1.0);
        let next = (rss * m as f64 / dof).sqrt();
        trace.push(next);
        let change = (next - sigma).abs();
        sigma = next;
        if change < SCALED_LASSO_TOL {
            return Ok(ScaledLassoFit {
                sigma,
                beta,
                rounds: round,
                trace,
            });
        }
    }
    Err(Error::ScaledLassoNonConvergence {
        rounds: SCALED_LASSO_ROUNDS,
        trace,
    })
}

/// Largest value on the periodic orbit that ends a non-converged scaled-Lasso
/// trace, or `None` when the tail is not periodic.
///
/// The support size enters the variance update, so the iteration can hop
/// between a few supports forever instead of settling.
pub fn cycle_sigma(trace: &[f64]) -> Option<f64> {
    const MAX_PERIOD: usize = 10;
    let n = trace.len();
    let last = *trace.last()?;
    (2..=MAX_PERIOD.min(n.saturating_sub(1)))
        .find(|&k| {
            (0..k.min(n - k)).all(|i| {
                let (a, b) = (trace[n - 1 - i], trace[n - 1 - i - k]);
                (a - b).abs() <= SCALED_LASSO_TOL * a.abs().max(1.0)
            })
        })
        .map(|k| trace[n - k..].iter().copied().fold(last, f64::max))
}

/// Error regime that sets the theory-guided penalty level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltyRegime {
    IidGaussian,
    /// Short-range dependent linear process with `|a|_1 = sum_m |a_m|`.
    Srd { a_l1: f64 },
    /// Long-range dependent linear process with decay exponent `rho` in (1/2, 1).
    Lrd { rho: f64, c: f64 },
    /// Finite `q`-th moment errors.
    HeavyTail {
        q: f64,
        #[serde(default = "default_c_q")]
        c_q: f64,
    },
}

fn default_c_q() -> f64 {
    2.0
}

impl PenaltyRegime {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PenaltyRegime::IidGaussian => Ok(()),
            PenaltyRegime::Srd { a_l1 } if !(a_l1 > 0.0) => {
                Err(Error::invalid("a_l1", "must be positive"))
            }
            PenaltyRegime::Lrd { rho, .. } if !(rho > 0.5 && rho < 1.0) => {
                Err(Error::invalid("rho", format!("must lie in (1/2, 1), got {rho}")))
            }
            PenaltyRegime::Lrd { c, .. } if !(c > 0.0) => {
                Err(Error::invalid("c", "must be positive"))
            }
            PenaltyRegime::HeavyTail { q, .. } if !(q > 2.0) => {
                Err(Error::invalid("q", format!("must exceed 2, got {q}")))
            }
            PenaltyRegime::HeavyTail { c_q, .. } if !(c_q > 0.0) => {
                Err(Error::invalid("c_q", "must be positive"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyLevels {
    pub lambda0: f64,
    pub lambda1: f64,
    /// `max_j (sum_i w_i X_ij^2)^{1/2}`.
    pub l1: f64,
    /// `max_j (sum_i w_i^2 X_ij^2)^{1/2}`.
    pub l2: f64,
}

/// Theory-guided penalty `lambda0` for the given regime and `lambda1 = multiplier * lambda0`.
///
/// `n_total` is the full sample size, used by the long-range dependent regime.
pub fn recommend_lambda(
    regime: &PenaltyRegime,
    design: &LocalDesign,
    sigma: f64,
    n_total: usize,
    multiplier: f64,
) -> Result<PenaltyLevels> {
    regime.validate()?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("sigma", format!("must be positive, got {sigma}")));
    }
    let p = design.p();
    let mut l1_sq = 0.0_f64;
    let mut l2_sq = 0.0_f64;
    for j in 0..p {
        let col = design.xt.column(j);
        // xt_ij^2 = w_i X_ij^2
        let s1: f64 = col.iter().map(|v| v * v).sum();
        let s2: f64 = col
            .iter()
            .zip(&design.weights)
            .map(|(v, w)| w * v * v)
            .sum();
        l1_sq = l1_sq.max(s1);
        l2_sq = l2_sq.max(s2);
    }
    let (l1, l2) = (l1_sq.sqrt(), l2_sq.sqrt());
    let log_p = (p as f64).ln().sqrt();
    let lambda0 = match *regime {
        PenaltyRegime::IidGaussian => 4.0 * sigma * l2 * log_p,
        PenaltyRegime::Srd { a_l1 } => 4.0 * sigma * l2 * a_l1 * log_p,
        PenaltyRegime::Lrd { rho, c } => c * sigma * l2 * (n_total as f64).powf(1.0 - rho) * log_p,
        PenaltyRegime::HeavyTail { q, c_q } => {
            let mu = (0..p)
                .map(|j| {
                    design
                        .xt
                        .column(j)
                        .iter()
                        .zip(&design.weights)
                        // w_i X_ij = sqrt(w_i) * xt_ij
                        .map(|(v, w)| (w.sqrt() * v).abs().powf(q))
                        .sum::<f64>()
                })
                .fold(0.0, f64::max);
            c_q * ((p as f64) * mu).powf(1.0 / q).max(sigma * l2 * log_p)
        }
    }
    .max(LAMBDA0_FLOOR);
    Ok(PenaltyLevels {
        lambda0,
        lambda1: multiplier * lambda0,
        l1,
        l2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_design::{build_local_design, kernel_weights, Dataset, KernelSpec, Neighborhood};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_design(m: usize, p: usize, seed: u64) -> LocalDesign {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(m, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(m, |i, _| x[(i, 0)] * 1.5 - x[(i, 1 % p)] + rng.sample::<f64, _>(StandardNormal));
        let data = Dataset::new(x, y).unwrap();
        build_local_design(&data, &Neighborhood::global(m)).unwrap()
    }

    #[test]
    fn large_penalty_gives_zero() {
        let d = random_design(20, 6, 1);
        let prob = LassoProblem::new(&d);
        let fit = weighted_lasso(&d, prob.lambda_max(), &LassoConfig::default()).unwrap();
        assert!(fit.beta.iter().all(|b| *b == 0.0));
        let fit = weighted_lasso(&d, 10.0 * prob.lambda_max(), &LassoConfig::default()).unwrap();
        assert!(fit.beta.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn orthonormal_design_is_soft_threshold() {
        // columns of xt orthonormal: the solution is soft(X^T Y, lambda / 2)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(12, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = a.qr().q();
        let yt = DVector::from_fn(12, |_, _| rng.sample::<f64, _>(StandardNormal));
        let d = LocalDesign {
            t: 0.5,
            indices: (0..12).collect(),
            weights: vec![1.0 / 12.0; 12],
            xt: q.clone(),
            yt: yt.clone(),
        };
        let lambda = 0.8;
        let fit = weighted_lasso(&d, lambda, &LassoConfig::default()).unwrap();
        let xty = q.tr_mul(&yt);
        for j in 0..4 {
            let z = xty[j];
            let expected = z.signum() * (z.abs() - lambda / 2.0).max(0.0);
            assert_relative_eq!(fit.beta[j], expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn kkt_holds_and_objective_beats_zero() {
        let cfg = LassoConfig::default();
        for seed in 0..10 {
            let d = random_design(15, 40, 100 + seed);
            let prob = LassoProblem::new(&d);
            for frac in [0.5, 0.1, 0.02] {
                let lambda = frac * prob.lambda_max();
                let fit = weighted_lasso(&d, lambda, &cfg).unwrap();
                assert!(fit.kkt_residual <= cfg.conv_tol);
                assert!(prob.kkt_residual(&fit.beta, lambda) <= cfg.conv_tol);
                assert!(
                    prob.objective(&fit.beta, lambda)
                        <= prob.objective(&DVector::zeros(40), lambda) + 1e-12
                );
            }
        }
    }

    #[test]
    fn l1_norm_is_monotone_along_path() {
        let d = random_design(25, 30, 7);
        let prob = LassoProblem::new(&d);
        let grid = LambdaGrid::default().resolve(prob.lambda_max());
        let norms: Vec<f64> = prob
            .path(&grid, 100_000, 1e-10)
            .into_iter()
            .map(|f| f.unwrap().beta.lp_norm(1))
            .collect();
        for w in norms.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{norms:?}");
        }
    }

    #[test]
    fn non_convergence_carries_last_iterate() {
        let d = random_design(10, 30, 8);
        let prob = LassoProblem::new(&d);
        let err = prob.solve(1e-4 * prob.lambda_max(), None, 1, 1e-14).unwrap_err();
        match err {
            Error::LassoNonConvergence {
                last_iterate,
                kkt_residual,
                ..
            } => {
                assert_eq!(last_iterate.len(), 30);
                assert!(kkt_residual > 1e-14);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_penalty_rejected() {
        let d = random_design(10, 3, 9);
        assert!(weighted_lasso(&d, 0.0, &LassoConfig::default()).is_err());
        assert!(weighted_lasso(&d, f64::NAN, &LassoConfig::default()).is_err());
    }

    #[test]
    fn cv_single_value_grid() {
        let d = random_design(20, 5, 10);
        let cv = cross_validate_lambda1(&d, &LambdaGrid::Values(vec![0.3]), &LassoConfig::default())
            .unwrap();
        assert_eq!(cv.lambda1, 0.3);
    }

    #[test]
    fn cv_ties_pick_smallest_penalty() {
        // every grid value above lambda_max of every fold gives the zero fit,
        // so all errors tie
        let d = random_design(20, 5, 11);
        let top = 100.0 * LassoProblem::new(&d).lambda_max();
        let cv = cross_validate_lambda1(
            &d,
            &LambdaGrid::Values(vec![3.0 * top, 2.0 * top, top]),
            &LassoConfig::default(),
        )
        .unwrap();
        assert_eq!(cv.lambda1, top);
    }

    #[test]
    fn cv_grid_must_descend() {
        let d = random_design(20, 5, 12);
        let grid = LambdaGrid::Values(vec![0.1, 0.2]);
        assert!(cross_validate_lambda1(&d, &grid, &LassoConfig::default()).is_err());
    }

    #[test]
    fn cv_recovers_planted_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (n, p) = (200, 30);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| {
            2.0 * x[(i, 3)] - 2.0 * x[(i, 17)] + 0.5 * rng.sample::<f64, _>(StandardNormal)
        });
        let data = Dataset::new(x, y).unwrap();
        let spec = KernelSpec::uniform(0.2).unwrap();
        let nb = kernel_weights(&spec, 0.5, n).unwrap();
        let d = build_local_design(&data, &nb).unwrap();
        let cfg = LassoConfig::default();
        let cv = cross_validate_lambda1(&d, &LambdaGrid::default(), &cfg).unwrap();
        let fit = weighted_lasso(&d, cv.lambda1, &cfg).unwrap();
        assert!(fit.beta[3] > 1.0 && fit.beta[17] < -1.0);
        let top: Vec<usize> = {
            let mut idx: Vec<usize> = (0..p).collect();
            idx.sort_by(|&a, &b| fit.beta[b].abs().total_cmp(&fit.beta[a].abs()));
            idx[..2].to_vec()
        };
        assert!(top.contains(&3) && top.contains(&17));
    }

    fn null_design(n: usize, p: usize, sigma: f64, seed: u64) -> LocalDesign {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
        let data = Dataset::new(x, y).unwrap();
        build_local_design(&data, &Neighborhood::global(n)).unwrap()
    }

    #[test]
    fn cycle_sigma_detects_orbits() {
        let orbit = [3.0, 2.5, 2.38, 2.40, 2.41, 2.38, 2.40, 2.41, 2.38, 2.40, 2.41];
        assert_eq!(cycle_sigma(&orbit), Some(2.41));
        let drifting = [3.0, 2.0, 1.5, 1.2, 1.1, 1.05, 1.02];
        assert_eq!(cycle_sigma(&drifting), None);
        assert_eq!(cycle_sigma(&[]), None);
    }

    #[test]
    fn scaled_lasso_is_consistent_under_the_null() {
        let cfg = LassoConfig::default();
        for seed in 0..20 {
            let fit = scaled_lasso_sigma(&null_design(500, 50, 1.0, 200 + seed), &cfg).unwrap();
            assert!((0.9..=1.1).contains(&fit.sigma), "seed {seed}: {}", fit.sigma);
        }
    }

    #[test]
    fn scaled_lasso_is_scale_equivariant() {
        let cfg = LassoConfig::default();
        let mut ratio = 0.0;
        for seed in 0..20 {
            let a = scaled_lasso_sigma(&null_design(500, 50, 1.0, 300 + seed), &cfg).unwrap();
            let b = scaled_lasso_sigma(&null_design(500, 50, 2.0, 300 + seed), &cfg).unwrap();
            ratio += b.sigma / a.sigma / 20.0;
        }
        assert!((1.8..=2.2).contains(&ratio), "{ratio}");
    }

    #[test]
    fn scaled_lasso_noiseless_goes_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (n, p) = (60, 10);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| 3.0 * x[(i, 2)] - x[(i, 5)]);
        let data = Dataset::new(x, y).unwrap();
        let d = build_local_design(&data, &Neighborhood::global(n)).unwrap();
        let fit = scaled_lasso_sigma(&d, &LassoConfig::default()).unwrap();
        assert!(fit.sigma < 1e-3, "{}", fit.sigma);
    }

    #[test]
    fn recommended_penalty_under_standardized_design() {
        // uniform weights and columns with unit mean square inside the window
        let m = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut x = DMatrix::from_fn(m, 8, |_, _| rng.sample::<f64, _>(StandardNormal));
        for mut col in x.column_iter_mut() {
            let rms = (col.norm_squared() / m as f64).sqrt();
            col /= rms;
        }
        let data = Dataset::new(x, DVector::zeros(m)).unwrap();
        let d = build_local_design(&data, &Neighborhood::global(m)).unwrap();
        let sigma = 1.3;
        let lv = recommend_lambda(&PenaltyRegime::IidGaussian, &d, sigma, m, 2.0).unwrap();
        assert_relative_eq!(lv.l1, 1.0, epsilon = 1e-12);
        assert_relative_eq!(lv.l2, (m as f64).powf(-0.5), epsilon = 1e-12);
        let expected = 4.0 * sigma * ((8f64).ln() / m as f64).sqrt();
        assert_relative_eq!(lv.lambda0, expected, epsilon = 1e-12);
        assert_relative_eq!(lv.lambda1, 2.0 * expected, epsilon = 1e-12);

        let srd = recommend_lambda(&PenaltyRegime::Srd { a_l1: 1.0 }, &d, sigma, m, 2.0).unwrap();
        assert_relative_eq!(srd.lambda0, lv.lambda0, epsilon = 1e-15);
    }

    #[test]
    fn recommended_penalty_is_homogeneous_and_floored() {
        let d = random_design(30, 12, 16);
        for regime in [
            PenaltyRegime::IidGaussian,
            PenaltyRegime::Srd { a_l1: 2.5 },
            PenaltyRegime::Lrd { rho: 0.75, c: 1.0 },
        ] {
            let a = recommend_lambda(&regime, &d, 1.0, 300, 2.0).unwrap();
            let b = recommend_lambda(&regime, &d, 2.0, 300, 2.0).unwrap();
            assert_relative_eq!(b.lambda0, 2.0 * a.lambda0, max_relative = 1e-14);
        }
        let d1 = random_design(30, 1, 17);
        let lv = recommend_lambda(&PenaltyRegime::IidGaussian, &d1, 1.0, 30, 2.0).unwrap();
        assert_eq!(lv.lambda0, LAMBDA0_FLOOR);
        assert!(recommend_lambda(&PenaltyRegime::Lrd { rho: 1.2, c: 1.0 }, &d, 1.0, 30, 2.0).is_err());
        assert!(recommend_lambda(&PenaltyRegime::HeavyTail { q: 2.0, c_q: 2.0 }, &d, 1.0, 30, 2.0).is_err());
        assert!(recommend_lambda(&PenaltyRegime::IidGaussian, &d, 0.0, 30, 2.0).is_err());
    }

    #[test]
    fn heavy_tail_penalty_uses_moment_term() {
        let d = random_design(30, 12, 18);
        let q = 3.0;
        let lv = recommend_lambda(&PenaltyRegime::HeavyTail { q, c_q: 2.0 }, &d, 1.0, 30, 2.0).unwrap();
        let mu = (0..12)
            .map(|j| {
                (0..30)
                    .map(|i| (d.weights[i] * d.xt[(i, j)] / d.weights[i].sqrt()).abs().powf(q))
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        let expected = 2.0 * (12.0 * mu).powf(1.0 / q).max(lv.l2 * (12f64).ln().sqrt());
        assert_relative_eq!(lv.lambda0, expected, max_relative = 1e-12);
    }
}

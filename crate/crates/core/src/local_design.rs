//! Kernel-localized weighted designs.
//!
//! At a time point `t` the observations inside the bandwidth window are
//! reweighted by Nadaraya-Watson weights `w(i, t)`. The local design has rows
//! `sqrt(w(i, t)) * x_i` and the local response has entries `sqrt(w(i, t)) * y_i`,
//! so that a weighted least-squares problem becomes an ordinary one.
//!
//! [`svd_projection`] factors the local design as `U D Q^T` and exposes the
//! projection onto its row space through the thin factor `Q`; the `p x p`
//! projection matrix is only materialized on request.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when deciding whether a time point lies on a boundary.
const BOUNDARY_SLACK: f64 = 1e-12;

/// Default relative cutoff for retained singular values.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Design matrix and response observed on the grid `t_i = i / n`.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "design has {} rows but response has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() < 2 {
            return Err(Error::InvalidData(format!(
                "need at least 2 observations, got {}",
                x.nrows()
            )));
        }
        if x.ncols() < 1 {
            return Err(Error::InvalidData("design has no columns".into()));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos % x.nrows(), pos / x.nrows());
            return Err(Error::InvalidData(format!(
                "non-finite design entry at row {row}, column {col}"
            )));
        }
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite response at row {row}"
            )));
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Normalized time of the row with 0-based index `row`, i.e. `(row + 1) / n`.
    pub fn time(&self, row: usize) -> f64 {
        (row + 1) as f64 / self.n() as f64
    }

    /// Same design with a different response.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        Dataset::new(self.x.clone(), y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `K(x) = 0.5` on `[-1, 1]`.
    #[default]
    Uniform,
    /// `K(x) = 0.75 (1 - x^2)` on `[-1, 1]`.
    Epanechnikov,
    /// `K(x) = 1 - |x|` on `[-1, 1]`.
    Triangular,
}

impl KernelKind {
    pub fn eval(self, x: f64) -> f64 {
        let ax = x.abs();
        if ax > 1.0 {
            return 0.0;
        }
        match self {
            KernelKind::Uniform => 0.5,
            KernelKind::Epanechnikov => 0.75 * (1.0 - x * x),
            KernelKind::Triangular => 1.0 - ax,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Uniform => "uniform",
            KernelKind::Epanechnikov => "epanechnikov",
            KernelKind::Triangular => "triangular",
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(KernelKind::Uniform),
            "epanechnikov" => Ok(KernelKind::Epanechnikov),
            "triangular" => Ok(KernelKind::Triangular),
            other => Err(Error::invalid("kernel", format!("unknown kernel `{other}`"))),
        }
    }
}

/// Kernel shape together with its bandwidth `b_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            kind: KernelKind::Uniform,
            bandwidth: 0.1,
        }
    }
}

impl KernelSpec {
    pub fn new(kind: KernelKind, bandwidth: f64) -> Result<Self> {
        let spec = Self { kind, bandwidth };
        spec.validate()?;
        Ok(spec)
    }

    pub fn uniform(bandwidth: f64) -> Result<Self> {
        Self::new(KernelKind::Uniform, bandwidth)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth < 0.5) {
            return Err(Error::invalid(
                "bandwidth",
                format!("must lie in (0, 1/2), got {}", self.bandwidth),
            ));
        }
        Ok(())
    }

    /// Interior interval `[b_n, 1 - b_n]` where full windows exist.
    pub fn interior(&self) -> (f64, f64) {
        (self.bandwidth, 1.0 - self.bandwidth)
    }

    pub fn contains(&self, t: f64) -> bool {
        let (lo, hi) = self.interior();
        let slack = BOUNDARY_SLACK * self.bandwidth;
        t >= lo - slack && t <= hi + slack
    }

    /// 0-based indices of observations whose time lies in the interior interval.
    pub fn interior_rows(&self, n: usize) -> Vec<usize> {
        (0..n)
            .filter(|&i| self.contains((i + 1) as f64 / n as f64))
            .collect()
    }
}

/// Observations inside a kernel window and their normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub t: f64,
    /// 0-based row indices, ascending.
    pub indices: Vec<usize>,
    /// Positive weights aligned with `indices`, summing to one.
    pub weights: Vec<f64>,
}

impl Neighborhood {
    /// A single window covering all `n` observations with weights `1 / n`.
    pub fn global(n: usize) -> Self {
        Self {
            t: 0.5,
            indices: (0..n).collect(),
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Nadaraya-Watson weights at `t` on the grid `t_i = i / n`.
///
/// The neighborhood is closed: rows with `|t_i - t|` equal to the bandwidth
/// are included whenever the kernel is positive there.
pub fn kernel_weights(spec: &KernelSpec, t: f64, n: usize) -> Result<Neighborhood> {
    spec.validate()?;
    if !t.is_finite() || !spec.contains(t) {
        let (lo, hi) = spec.interior();
        return Err(Error::Boundary { t, lo, hi });
    }
    let b = spec.bandwidth;
    if (n as f64) * b < 2.0 * (1.0 - BOUNDARY_SLACK) {
        return Err(Error::DegenerateBandwidth {
            t,
            bandwidth: b,
            n,
        });
    }
    let reach = b * (1.0 + BOUNDARY_SLACK);
    let mut indices = Vec::new();
    let mut raw = Vec::new();
    for i in 0..n {
        let ti = (i + 1) as f64 / n as f64;
        let dist = ti - t;
        if dist.abs() > reach {
            continue;
        }
        // clamp so rows sitting on the boundary within slack evaluate at |x| = 1
        let x = (dist / b).clamp(-1.0, 1.0);
        let k = spec.kind.eval(x);
        if k > 0.0 {
            indices.push(i);
            raw.push(k);
        }
    }
    let total: f64 = raw.iter().sum();
    if indices.is_empty() || total <= 0.0 {
        return Err(Error::DegenerateBandwidth {
            t,
            bandwidth: b,
            n,
        });
    }
    let weights = raw.into_iter().map(|k| k / total).collect();
    Ok(Neighborhood { t, indices, weights })
}

/// Square-root weighted rows of the design and response inside one window.
#[derive(Debug, Clone)]
pub struct LocalDesign {
    pub t: f64,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// `|N_t| x p`, row `i` equal to `sqrt(w_i) x_i`.
    pub xt: DMatrix<f64>,
    /// `sqrt(w_i) y_i`.
    pub yt: DVector<f64>,
}

impl LocalDesign {
    /// Number of rows in the window.
    pub fn m(&self) -> usize {
        self.xt.nrows()
    }

    pub fn p(&self) -> usize {
        self.xt.ncols()
    }

    pub fn sqrt_weights(&self) -> DVector<f64> {
        DVector::from_iterator(self.weights.len(), self.weights.iter().map(|w| w.sqrt()))
    }

    /// Same window and weights with the response replaced by `y` (full length `n`).
    pub fn with_response(&self, y: &DVector<f64>) -> LocalDesign {
        let yt = DVector::from_iterator(
            self.indices.len(),
            self.indices
                .iter()
                .zip(&self.weights)
                .map(|(&i, &w)| w.sqrt() * y[i]),
        );
        LocalDesign {
            t: self.t,
            indices: self.indices.clone(),
            weights: self.weights.clone(),
            xt: self.xt.clone(),
            yt,
        }
    }

    /// Sub-design on a subset of window positions with weights renormalized to one.
    pub fn subset(&self, positions: &[usize]) -> LocalDesign {
        let total: f64 = positions.iter().map(|&k| self.weights[k]).sum();
        let scale = (1.0 / total).sqrt();
        let mut xt = DMatrix::zeros(positions.len(), self.p());
        let mut yt = DVector::zeros(positions.len());
        for (row, &k) in positions.iter().enumerate() {
            xt.row_mut(row).copy_from(&(self.xt.row(k) * scale));
            yt[row] = self.yt[k] * scale;
        }
        LocalDesign {
            t: self.t,
            indices: positions.iter().map(|&k| self.indices[k]).collect(),
            weights: positions.iter().map(|&k| self.weights[k] / total).collect(),
            xt,
            yt,
        }
    }
}

pub fn build_local_design(data: &Dataset, nbhd: &Neighborhood) -> Result<LocalDesign> {
    if nbhd.indices.len() != nbhd.weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} indices but {} weights",
            nbhd.indices.len(),
            nbhd.weights.len()
        )));
    }
    if let Some(&bad) = nbhd.indices.iter().find(|&&i| i >= data.n()) {
        return Err(Error::DimensionMismatch(format!(
            "row index {bad} out of range for n = {}",
            data.n()
        )));
    }
    if let Some(w) = nbhd.weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::invalid("weights", format!("weight {w} is not positive")));
    }
    let m = nbhd.len();
    let p = data.p();
    let mut xt = DMatrix::zeros(m, p);
    let mut yt = DVector::zeros(m);
    for (row, (&i, &w)) in nbhd.indices.iter().zip(&nbhd.weights).enumerate() {
        let s = w.sqrt();
        for j in 0..p {
            xt[(row, j)] = s * data.x()[(i, j)];
        }
        yt[row] = s * data.y()[i];
    }
    Ok(LocalDesign {
        t: nbhd.t,
        indices: nbhd.indices.clone(),
        weights: nbhd.weights.clone(),
        xt,
        yt,
    })
}

/// Local design together with its thin SVD `xt = U diag(d) Q^T`.
#[derive(Debug, Clone)]
pub struct SpectralDesign {
    design: LocalDesign,
    u: DMatrix<f64>,
    d: DVector<f64>,
    q: DMatrix<f64>,
}

impl SpectralDesign {
    pub fn design(&self) -> &LocalDesign {
        &self.design
    }

    pub fn into_design(self) -> LocalDesign {
        self.design
    }

    pub fn rank(&self) -> usize {
        self.d.len()
    }

    /// Left singular vectors, `|N_t| x r`.
    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.d
    }

    /// Right singular vectors, `p x r`.
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Projection of `v` onto the row space, computed as `Q (Q^T v)`.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.rank() == 0 {
            return DVector::zeros(v.len());
        }
        &self.q * self.q.tr_mul(v)
    }

    /// Row `j` of the projection matrix.
    pub fn projection_row(&self, j: usize) -> DVector<f64> {
        if self.rank() == 0 {
            return DVector::zeros(self.q.nrows());
        }
        &self.q * self.q.row(j).transpose()
    }

    /// `max_{k != j} |P_jk|` for every `j`, one row of the projection at a time.
    pub fn offdiag_row_maxima(&self) -> DVector<f64> {
        let p = self.q.nrows();
        DVector::from_iterator(
            p,
            (0..p).map(|j| {
                let row = self.projection_row(j);
                row.iter()
                    .enumerate()
                    .filter(|&(k, _)| k != j)
                    .fold(0.0_f64, |acc, (_, v)| acc.max(v.abs()))
            }),
        )
    }

    /// The dense `p x p` projection `Q Q^T`.
    pub fn projection_dense(&self) -> DMatrix<f64> {
        &self.q * self.q.transpose()
    }
}

/// Thin SVD of the local design, keeping singular values above `rank_tol * d_1`.
pub fn svd_projection(design: LocalDesign, rank_tol: f64) -> Result<SpectralDesign> {
    if !(rank_tol > 0.0) {
        return Err(Error::invalid("rank_tol", "must be positive"));
    }
    if design.xt.iter().any(|v| !v.is_finite()) {
        return Err(Error::Svd("local design has non-finite entries".into()));
    }
    let (m, p) = design.xt.shape();
    let svd = design
        .xt
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Svd("iteration did not converge".into()))?;
    let u_full = svd.u.ok_or_else(|| Error::Svd("missing U".into()))?;
    let vt_full = svd.v_t.ok_or_else(|| Error::Svd("missing V^T".into()))?;
    let sv = svd.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let d_max = order.first().map(|&k| sv[k]).unwrap_or(0.0);
    let kept: Vec<usize> = if d_max > 0.0 {
        order
            .into_iter()
            .filter(|&k| sv[k] > rank_tol * d_max)
            .collect()
    } else {
        Vec::new()
    };
    let r = kept.len();
    let mut u = DMatrix::zeros(m, r);
    let mut q = DMatrix::zeros(p, r);
    let mut d = DVector::zeros(r);
    for (col, &k) in kept.iter().enumerate() {
        u.set_column(col, &u_full.column(k));
        q.set_column(col, &vt_full.row(k).transpose());
        d[col] = sv[k];
    }
    Ok(SpectralDesign { design, u, d, q })
}

/// Covariance `Omega(lambda2)` of the ridge estimator held as a factor `M`
/// with `Omega = M M^T`.
#[derive(Debug, Clone)]
pub struct RidgeCovariance {
    factor: DMatrix<f64>,
    diag: DVector<f64>,
}

impl RidgeCovariance {
    /// `p x k` factor with `Omega = factor * factor^T`, `k <= rank`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn min_diag(&self) -> f64 {
        self.diag.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn dense(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    /// Same covariance multiplied by `c` (for `c >= 0`).
    pub fn scaled(&self, c: f64) -> RidgeCovariance {
        RidgeCovariance {
            factor: &self.factor * c.sqrt(),
            diag: &self.diag * c,
        }
    }
}

/// Checks symmetry and positive semi-definiteness up to a relative tolerance.
pub(crate) fn check_psd(s: &DMatrix<f64>, rel_tol: f64) -> Result<()> {
    let scale = s.amax().max(f64::MIN_POSITIVE);
    let asym = (s - s.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(Error::InvalidData(format!(
            "covariance matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let eig = s.clone().symmetric_eigenvalues();
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -rel_tol * scale {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    Ok(())
}

/// Symmetric square root factor `L` with `c = L L^T`, negative eigenvalues clipped.
pub(crate) fn psd_factor(c: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut l = eig.eigenvectors;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        l.column_mut(k).scale_mut(s);
    }
    l
}

/// Covariance of the ridge estimator under error covariance `sigma_et` on the window.
///
/// With `xt = U D Q^T` the ridge map is `Q diag(d / (d^2 + lambda2)) U^T`, so
/// `Omega = Q C Q^T` for the `r x r` core `C = K S K^T` with
/// `K = diag(d / (d^2 + lambda2)) U^T W^{1/2}` and `S = sigma_et`.
pub fn ridge_covariance(
    sd: &SpectralDesign,
    sigma_et: &DMatrix<f64>,
    lambda2: f64,
) -> Result<RidgeCovariance> {
    if !(lambda2 > 0.0) || !lambda2.is_finite() {
        return Err(Error::invalid("lambda2", format!("must be positive, got {lambda2}")));
    }
    let m = sd.design.m();
    if sigma_et.shape() != (m, m) {
        return Err(Error::DimensionMismatch(format!(
            "error covariance is {}x{} but the window has {m} rows",
            sigma_et.nrows(),
            sigma_et.ncols()
        )));
    }
    check_psd(sigma_et, 1e-10)?;
    let p = sd.design.p();
    let r = sd.rank();
    if r == 0 {
        return Ok(RidgeCovariance {
            factor: DMatrix::zeros(p, 0),
            diag: DVector::zeros(p),
        });
    }
    let sw = sd.design.sqrt_weights();
    let mut k = sd.u.transpose();
    for a in 0..r {
        let da = sd.d[a];
        let g = da / (da * da + lambda2);
        for i in 0..m {
            k[(a, i)] *= g * sw[i];
        }
    }
    let core = &k * sigma_et * k.transpose();
    let root = psd_factor(&core);
    let factor = &sd.q * root;
    let diag = DVector::from_iterator(p, factor.row_iter().map(|row| row.norm_squared()));
    Ok(RidgeCovariance { factor, diag })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn uniform_weights_are_equal() {
        let spec = KernelSpec::uniform(0.25).unwrap();
        let nb = kernel_weights(&spec, 0.5, 10).unwrap();
        // t_i in {0.3, ..., 0.7} are rows 3..=7 (1-based)
        assert_eq!(nb.indices, vec![2, 3, 4, 5, 6]);
        for w in &nb.weights {
            assert_relative_eq!(*w, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn epanechnikov_matches_direct_evaluation() {
        let spec = KernelSpec::new(KernelKind::Epanechnikov, 0.25).unwrap();
        let nb = kernel_weights(&spec, 0.5, 10).unwrap();
        assert_eq!(nb.indices, vec![2, 3, 4, 5, 6]);
        // direct scalar evaluation of K((t_i - t) / b)
        let raw: Vec<f64> = [0.3, 0.4, 0.5, 0.6, 0.7]
            .iter()
            .map(|ti: &f64| {
                let x: f64 = (ti - 0.5) / 0.25;
                0.75 * (1.0 - x * x)
            })
            .collect();
        let total: f64 = raw.iter().sum();
        for (w, r) in nb.weights.iter().zip(&raw) {
            assert_relative_eq!(*w, r / total, epsilon = 1e-14);
        }
        assert_relative_eq!(nb.weights[0] / nb.weights[2], 0.36, epsilon = 1e-12);
        assert_relative_eq!(nb.weights[1] / nb.weights[2], 0.84, epsilon = 1e-12);
    }

    #[test]
    fn closed_window_includes_rows_on_the_edge() {
        let spec = KernelSpec::uniform(0.1).unwrap();
        let nb = kernel_weights(&spec, 0.5, 200).unwrap();
        assert_eq!(nb.len(), 41);
        assert_eq!(nb.indices.first(), Some(&79));
        assert_eq!(nb.indices.last(), Some(&119));
    }

    #[test]
    fn boundary_and_degenerate_errors() {
        let spec = KernelSpec::uniform(0.1).unwrap();
        assert!(matches!(
            kernel_weights(&spec, 0.05, 100),
            Err(Error::Boundary { .. })
        ));
        assert!(matches!(
            kernel_weights(&spec, 0.5, 10),
            Err(Error::DegenerateBandwidth { .. })
        ));
        assert!(KernelSpec::uniform(0.5).is_err());
        assert!(KernelSpec::uniform(0.0).is_err());
    }

    #[test]
    fn weights_sum_to_one_for_every_kernel() {
        for kind in [
            KernelKind::Uniform,
            KernelKind::Epanechnikov,
            KernelKind::Triangular,
        ] {
            let spec = KernelSpec::new(kind, 0.13).unwrap();
            for row in spec.interior_rows(137) {
                let t = (row + 1) as f64 / 137.0;
                let nb = kernel_weights(&spec, t, 137).unwrap();
                let s: f64 = nb.weights.iter().sum();
                assert_relative_eq!(s, 1.0, epsilon = 1e-12);
                assert!(nb.weights.iter().all(|w| *w > 0.0));
            }
        }
    }

    #[test]
    fn local_design_scales_rows() {
        let x = gaussian(5, 3, 1);
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, 4.0]);
        let data = Dataset::new(x.clone(), y.clone()).unwrap();
        let nb = Neighborhood {
            t: 0.5,
            indices: vec![0, 1, 2, 3, 4],
            weights: vec![0.1, 0.3, 0.2, 0.25, 0.15],
        };
        let ld = build_local_design(&data, &nb).unwrap();
        for i in 0..5 {
            let s = nb.weights[i].sqrt();
            for j in 0..3 {
                assert_eq!(ld.xt[(i, j)], s * x[(i, j)]);
            }
            assert_eq!(ld.yt[i], s * y[i]);
        }
    }

    #[test]
    fn equal_weights_and_single_row() {
        let x = gaussian(6, 4, 2);
        let data = Dataset::new(x.clone(), DVector::zeros(6)).unwrap();
        let nb = Neighborhood {
            t: 0.5,
            indices: vec![1, 2, 3],
            weights: vec![1.0 / 3.0; 3],
        };
        let ld = build_local_design(&data, &nb).unwrap();
        for (row, i) in [1, 2, 3].iter().enumerate() {
            for j in 0..4 {
                assert_relative_eq!(ld.xt[(row, j)], x[(*i, j)] / 3f64.sqrt(), epsilon = 1e-15);
            }
        }
        let single = Neighborhood {
            t: 0.5,
            indices: vec![4],
            weights: vec![1.0],
        };
        let ld = build_local_design(&data, &single).unwrap();
        assert_eq!(ld.xt.row(0), x.row(4));
    }

    #[test]
    fn local_design_rejects_bad_indices() {
        let data = Dataset::new(gaussian(4, 2, 3), DVector::zeros(4)).unwrap();
        let nb = Neighborhood {
            t: 0.5,
            indices: vec![1, 9],
            weights: vec![0.5, 0.5],
        };
        assert!(matches!(
            build_local_design(&data, &nb),
            Err(Error::DimensionMismatch(_))
        ));
        let nb = Neighborhood {
            t: 0.5,
            indices: vec![1],
            weights: vec![0.5, 0.5],
        };
        assert!(build_local_design(&data, &nb).is_err());
    }

    fn design_from(xt: DMatrix<f64>) -> LocalDesign {
        let m = xt.nrows();
        LocalDesign {
            t: 0.5,
            indices: (0..m).collect(),
            weights: vec![1.0 / m as f64; m],
            yt: DVector::zeros(m),
            xt,
        }
    }

    #[test]
    fn identity_design_projects_to_identity() {
        let sd = svd_projection(design_from(DMatrix::identity(3, 3)), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(sd.rank(), 3);
        assert!((sd.projection_dense() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-14);
    }

    #[test]
    fn single_row_gives_rank_one_projection() {
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let sd = svd_projection(design_from(DMatrix::from_row_slice(1, 4, v.as_slice())), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(sd.rank(), 1);
        let expected = &v * v.transpose() / v.norm_squared();
        assert!((sd.projection_dense() - expected).amax() < 1e-14);
    }

    #[test]
    fn random_projection_is_idempotent_and_fixes_rows() {
        let xt = gaussian(8, 20, 4);
        let sd = svd_projection(design_from(xt.clone()), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(sd.rank(), 8);
        let p = sd.projection_dense();
        assert!((&p * &p - &p).amax() < 1e-8);
        assert!((&p - p.transpose()).amax() < 1e-12);
        assert!((&p * xt.transpose() - xt.transpose()).amax() < 1e-8);
        let utu = sd.u().transpose() * sd.u();
        let qtq = sd.q().transpose() * sd.q();
        assert!((utu - DMatrix::<f64>::identity(8, 8)).amax() < 1e-10);
        assert!((qtq - DMatrix::<f64>::identity(8, 8)).amax() < 1e-10);
        let maxima = sd.offdiag_row_maxima();
        for j in 0..20 {
            let direct = (0..20)
                .filter(|&k| k != j)
                .map(|k| p[(j, k)].abs())
                .fold(0.0, f64::max);
            assert_relative_eq!(maxima[j], direct, epsilon = 1e-14);
        }
    }

    #[test]
    fn rank_deficient_design_drops_small_singular_values() {
        let a = gaussian(6, 2, 5);
        let b = gaussian(2, 10, 6);
        let sd = svd_projection(design_from(a * b), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(sd.rank(), 2);
        let d = sd.singular_values();
        assert!(d[0] >= d[1]);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut xt = gaussian(3, 3, 7);
        xt[(1, 1)] = f64::NAN;
        assert!(matches!(
            svd_projection(design_from(xt), DEFAULT_RANK_TOL),
            Err(Error::Svd(_))
        ));
    }

    fn dense_omega(ld: &LocalDesign, s: &DMatrix<f64>, lambda2: f64) -> DMatrix<f64> {
        let p = ld.p();
        let g = ld.xt.transpose() * &ld.xt + DMatrix::<f64>::identity(p, p) * lambda2;
        let ginv = g.try_inverse().unwrap();
        let sw = DMatrix::from_diagonal(&ld.sqrt_weights());
        &ginv * ld.xt.transpose() * &sw * s * &sw * &ld.xt * &ginv
    }

    fn ar1_cov(m: usize, phi: f64) -> DMatrix<f64> {
        DMatrix::from_fn(m, m, |i, j| {
            phi.powi((i as i32 - j as i32).abs()) / (1.0 - phi * phi)
        })
    }

    #[test]
    fn omega_matches_dense_formula() {
        for (seed, (m, p)) in [(6usize, 12usize), (10, 7), (25, 50)].iter().enumerate() {
            let mut ld = design_from(gaussian(*m, *p, 10 + seed as u64));
            let w: Vec<f64> = (0..*m).map(|i| 1.0 + (i % 3) as f64).collect();
            let tot: f64 = w.iter().sum();
            ld.weights = w.iter().map(|v| v / tot).collect();
            let s = ar1_cov(*m, 0.4);
            let sd = svd_projection(ld.clone(), DEFAULT_RANK_TOL).unwrap();
            let om = ridge_covariance(&sd, &s, 0.05).unwrap();
            let dense = dense_omega(&ld, &s, 0.05);
            let rel = (om.dense() - &dense).amax() / dense.amax();
            assert!(rel < 1e-8, "relative error {rel}");
            for j in 0..*p {
                assert_relative_eq!(om.diag()[j], dense[(j, j)], max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn omega_is_linear_in_sigma_squared() {
        let ld = design_from(gaussian(9, 15, 20));
        let sd = svd_projection(ld, DEFAULT_RANK_TOL).unwrap();
        let id = DMatrix::<f64>::identity(9, 9);
        let one = ridge_covariance(&sd, &id, 0.1).unwrap();
        let four = ridge_covariance(&sd, &(id * 4.0), 0.1).unwrap();
        assert!((four.dense() - one.dense() * 4.0).amax() < 1e-12 * four.dense().amax());
    }

    #[test]
    fn zero_design_gives_zero_omega() {
        let sd = svd_projection(design_from(DMatrix::zeros(4, 6)), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(sd.rank(), 0);
        let om = ridge_covariance(&sd, &DMatrix::identity(4, 4), 0.1).unwrap();
        assert_eq!(om.dense(), DMatrix::zeros(6, 6));
    }

    #[test]
    fn omega_errors() {
        let sd = svd_projection(design_from(gaussian(4, 6, 30)), DEFAULT_RANK_TOL).unwrap();
        let id = DMatrix::<f64>::identity(4, 4);
        assert!(ridge_covariance(&sd, &id, 0.0).is_err());
        assert!(ridge_covariance(&sd, &DMatrix::identity(3, 3), 0.1).is_err());
        let mut bad = id.clone();
        bad[(0, 0)] = -1.0;
        assert!(matches!(
            ridge_covariance(&sd, &bad, 0.1),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn omega_matches_monte_carlo_covariance() {
        // 6 x 12 design with AR(1) window errors; the ridge noise component is
        // (X^T X + lambda I)^{-1} X^T W^{1/2} e.
        let (m, p, lambda2) = (6, 12, 0.2);
        let ld = design_from(gaussian(m, p, 40));
        let s = ar1_cov(m, 0.5);
        let sd = svd_projection(ld.clone(), DEFAULT_RANK_TOL).unwrap();
        let om = ridge_covariance(&sd, &s, lambda2).unwrap().dense();

        let g = ld.xt.transpose() * &ld.xt + DMatrix::<f64>::identity(p, p) * lambda2;
        let map = g.try_inverse().unwrap() * ld.xt.transpose() * DMatrix::from_diagonal(&ld.sqrt_weights());
        let chol = s.clone().cholesky().unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let draws = 100_000;
        let mut samples = DMatrix::zeros(p, draws);
        for k in 0..draws {
            let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            samples.set_column(k, &(&map * (&chol * z)));
        }
        let mut worst = 0.0_f64;
        for a in 0..p {
            for b in a..p {
                let prods: Vec<f64> = (0..draws).map(|k| samples[(a, k)] * samples[(b, k)]).collect();
                let mean = prods.iter().sum::<f64>() / draws as f64;
                let var = prods.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
                let se = (var / draws as f64).sqrt();
                worst = worst.max((mean - om[(a, b)]).abs() / se);
            }
        }
        assert!(worst <= 3.0, "worst deviation {worst} standard errors");
    }
}

//! Mean-model fitting: OLS, ridge, lasso and elastic net with an unpenalized
//! intercept, plus conjugate Bayesian linear regression.
//!
//! Penalized fits minimize
//! `(1/2n)‖y − β0 − Φβ‖² + λ((1−α)/2 ‖β‖² + α‖β‖₁)` for the elastic net and
//! `(1/2n)‖y − β0 − Φβ‖² + λ‖β‖²` for ridge.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{apply_standardizer, fit_standardizer, DesignMatrix, Standardizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    None,
    Ridge,
    Lasso,
    Enet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub lambda: f64,
    pub alpha: f64,
}

impl PenaltySpec {
    pub fn none() -> Self {
        Self {
            kind: PenaltyKind::None,
            lambda: 0.0,
            alpha: 0.0,
        }
    }

    pub fn ridge(lambda: f64) -> Self {
        Self {
            kind: PenaltyKind::Ridge,
            lambda,
            alpha: 0.0,
        }
    }

    pub fn lasso(lambda: f64) -> Self {
        Self {
            kind: PenaltyKind::Lasso,
            lambda,
            alpha: 1.0,
        }
    }

    pub fn enet(lambda: f64, alpha: f64) -> Self {
        Self {
            kind: PenaltyKind::Enet,
            lambda,
            alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != PenaltyKind::None && !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be non-negative (got {})", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1] (got {})", self.alpha)));
        }
        Ok(())
    }
}

/// A fitted linear mean model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitModel {
    pub names: Vec<String>,
    /// Intercept and coefficients on the scale of the training design.
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// The same model expressed on raw (unstandardized) regressors.
    pub natural_intercept: f64,
    pub natural_coefficients: Vec<f64>,
    pub penalty: PenaltySpec,
    pub standardizer: Option<Standardizer>,
    pub n: usize,
    pub rss: f64,
    /// NaN when the training response is constant.
    pub r2: f64,
}

impl FitModel {
    fn assemble(design: &DesignMatrix, intercept: f64, beta: Vec<f64>, penalty: PenaltySpec) -> FitModel {
        let (natural_intercept, natural_coefficients) = match &design.standardizer {
            Some(s) => {
                let mut b0 = intercept;
                let mut nat = Vec::with_capacity(beta.len());
                for (j, b) in beta.iter().enumerate() {
                    let (shift, scale) = s.shift_scale(j);
                    nat.push(b / scale);
                    b0 -= b * shift / scale;
                }
                (b0, nat)
            }
            None => (intercept, beta.clone()),
        };
        let fitted = &design.values * DVector::from_column_slice(&beta);
        let y = &design.response;
        let rss: f64 = y.iter().zip(fitted.iter()).map(|(y, f)| (y - intercept - f).powi(2)).sum();
        let ybar = y.mean();
        let sst: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
        let r2 = if sst > 0.0 { 1.0 - rss / sst } else { f64::NAN };
        FitModel {
            names: design.columns.iter().map(|c| c.name.clone()).collect(),
            intercept,
            coefficients: beta,
            natural_intercept,
            natural_coefficients,
            penalty,
            standardizer: design.standardizer.clone(),
            n: design.nrows(),
            rss,
            r2,
        }
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|j| self.coefficients[j])
    }

    pub fn natural_coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|j| self.natural_coefficients[j])
    }
}

/// Position of each model column inside `design`, matched by name.
pub(crate) fn align(names: &[String], design: &DesignMatrix) -> Result<Vec<usize>> {
    if names.len() != design.ncols() {
        return Err(Error::ColumnMismatch(format!(
            "model has {} columns, design has {}",
            names.len(),
            design.ncols()
        )));
    }
    names
        .iter()
        .map(|n| design.column_index(n).ok_or_else(|| Error::ColumnMismatch(format!("design lacks column {n}"))))
        .collect()
}

/// `ŷ = β0 + Φβ`, matching columns by name.
///
/// A standardized design is scored with the standardized coefficients; a raw
/// design with the natural ones.
pub fn predict(model: &FitModel, design: &DesignMatrix) -> Result<DVector<f64>> {
    let idx = align(&model.names, design)?;
    let (b0, beta) = if design.standardizer.is_some() || model.standardizer.is_none() {
        (model.intercept, &model.coefficients)
    } else {
        (model.natural_intercept, &model.natural_coefficients)
    };
    let mut out = DVector::from_element(design.nrows(), b0);
    for (k, &j) in idx.iter().enumerate() {
        out.axpy(beta[k], &design.values.column(j), 1.0);
    }
    Ok(out)
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

fn centered(x: &DMatrix<f64>, means: &DVector<f64>) -> DMatrix<f64> {
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    xc
}

/// QR of `x` when its columns are numerically independent.
fn full_rank(x: &DMatrix<f64>) -> Option<(nalgebra::linalg::QR<f64, nalgebra::Dyn, nalgebra::Dyn>, DMatrix<f64>)> {
    if x.nrows() < x.ncols() {
        return None;
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let rmax = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if rmax == 0.0 || r.diagonal().iter().any(|v| v.abs() <= 1e-10 * rmax) {
        return None;
    }
    Some((qr, r))
}

/// Least squares on centered data via Householder QR.
fn ols_centered(xc: &DMatrix<f64>, yc: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, p) = xc.shape();
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    if n <= p {
        return Err(Error::RankDeficient);
    }
    let (qr, r) = full_rank(xc).ok_or(Error::RankDeficient)?;
    let mut qty = yc.clone();
    qr.q_tr_mul(&mut qty);
    let head = qty.rows(0, p).into_owned();
    r.solve_upper_triangular(&head).ok_or(Error::RankDeficient)
}

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Cyclic coordinate descent in covariance form.
///
/// `gram = XcᵀXc/n`, `xty = Xcᵀyc/n`. Converged when the largest coefficient
/// change over a full sweep falls below `tol`.
fn enet_coordinate_descent(
    gram: &DMatrix<f64>,
    xty: &DVector<f64>,
    lambda: f64,
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let p = xty.len();
    let l1 = lambda * alpha;
    let l2 = lambda * (1.0 - alpha);
    let mut beta = DVector::<f64>::zeros(p);
    // grad[j] = xty[j] − Σ_k gram[j,k] β_k
    let mut grad = xty.clone();
    for _ in 0..max_iter {
        let mut max_delta = 0.0f64;
        for j in 0..p {
            let gjj = gram[(j, j)];
            let old = beta[j];
            let denom = gjj + l2;
            let new = if denom > 0.0 {
                soft_threshold(grad[j] + gjj * old, l1) / denom
            } else {
                0.0
            };
            let delta = new - old;
            if delta != 0.0 {
                beta[j] = new;
                grad.axpy(-delta, &gram.column(j), 1.0);
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < tol {
            return Ok(beta);
        }
    }
    Err(Error::NotConverged(max_iter))
}

/// Fits the penalized (or plain) linear model on `design`.
pub fn fit_linear(design: &DesignMatrix, penalty: PenaltySpec, tol: f64, max_iter: usize) -> Result<FitModel> {
    penalty.validate()?;
    let n = design.nrows();
    if n == 0 {
        return Err(Error::EmptySample);
    }
    let x = &design.values;
    let y = &design.response;
    let xbar = column_means(x);
    let ybar = y.mean();
    let xc = centered(x, &xbar);
    let yc = y.add_scalar(-ybar);
    let nf = n as f64;

    let beta = match penalty.kind {
        PenaltyKind::None => ols_centered(&xc, &yc)?,
        PenaltyKind::Ridge => {
            let mut a = xc.tr_mul(&xc);
            for j in 0..a.ncols() {
                a[(j, j)] += 2.0 * nf * penalty.lambda;
            }
            let rhs = xc.tr_mul(&yc);
            match a.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => a.lu().solve(&rhs).ok_or(Error::RankDeficient)?,
            }
        }
        PenaltyKind::Lasso | PenaltyKind::Enet => {
            let alpha = if penalty.kind == PenaltyKind::Lasso { 1.0 } else { penalty.alpha };
            let gram = xc.tr_mul(&xc) / nf;
            let xty = xc.tr_mul(&yc) / nf;
            enet_coordinate_descent(&gram, &xty, penalty.lambda, alpha, tol, max_iter)?
        }
    };
    let intercept = ybar - xbar.dot(&beta);
    Ok(FitModel::assemble(design, intercept, beta.iter().copied().collect(), penalty))
}

/// Picks the grid point with the smallest mean validation RMSE.
///
/// `design` is raw; each `(train, validation)` split refits its own
/// standardizer on its training rows. Ties (relative 1e-12) go to the larger
/// λ, then the larger α.
pub fn select_hyperparameters(
    design: &DesignMatrix,
    kind: PenaltyKind,
    lambda_grid: &[f64],
    alpha_grid: &[f64],
    splits: &[(Vec<usize>, Vec<usize>)],
    tol: f64,
    max_iter: usize,
) -> Result<PenaltySpec> {
    if lambda_grid.is_empty() || splits.is_empty() {
        return Err(Error::invalid("hyperparameter grid and splits must be non-empty"));
    }
    let alphas: Vec<f64> = match kind {
        PenaltyKind::None => return Ok(PenaltySpec::none()),
        PenaltyKind::Ridge => vec![0.0],
        PenaltyKind::Lasso => vec![1.0],
        PenaltyKind::Enet => {
            if alpha_grid.is_empty() {
                return Err(Error::invalid("alpha grid must be non-empty"));
            }
            alpha_grid.to_vec()
        }
    };

    let prepared = splits
        .iter()
        .map(|(train, val)| {
            let raw_train = design.select_rows(train);
            let all: Vec<usize> = (0..train.len()).collect();
            let s = fit_standardizer(&raw_train, &all)?;
            Ok((apply_standardizer(&s, &raw_train)?, apply_standardizer(&s, &design.select_rows(val))?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best: Option<(f64, PenaltySpec)> = None;
    for &lambda in lambda_grid {
        for &alpha in &alphas {
            let spec = PenaltySpec { kind, lambda, alpha };
            let mut total = 0.0;
            for (train, val) in &prepared {
                let model = fit_linear(train, spec, tol, max_iter)?;
                let pred = predict(&model, val)?;
                let mse = (&val.response - pred).norm_squared() / val.nrows() as f64;
                total += mse.sqrt();
            }
            let score = total / prepared.len() as f64;
            let better = match &best {
                None => true,
                Some((s, b)) => {
                    let tie = (score - s).abs() <= 1e-12 * s.abs().max(1e-300);
                    if tie {
                        (lambda, alpha) > (b.lambda, b.alpha)
                    } else {
                        score < *s
                    }
                }
            };
            if better {
                best = Some((score, spec));
            }
        }
    }
    Ok(best.expect("non-empty grid").1)
}

/// Normal-inverse-gamma prior on `[β0, β]`, stored by its precision so a
/// diffuse (zero-precision) prior is representable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NigPrior {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub a0: f64,
    pub b0: f64,
}

impl NigPrior {
    /// `β ~ N(0, σ²·v·I)` over intercept and `p` slopes.
    pub fn isotropic(p: usize, v: f64, a0: f64, b0: f64) -> Self {
        Self {
            mean: DVector::zeros(p + 1),
            precision: DMatrix::identity(p + 1, p + 1) / v,
            a0,
            b0,
        }
    }

    /// Zero mean, `V0 = 1e6·I`, `a0 = b0 = 1e-3`.
    pub fn weak(p: usize) -> Self {
        Self::isotropic(p, 1e6, 1e-3, 1e-3)
    }

    /// Flat prior on the coefficients (zero precision).
    pub fn diffuse(p: usize) -> Self {
        Self {
            mean: DVector::zeros(p + 1),
            precision: DMatrix::zeros(p + 1, p + 1),
            a0: 1e-3,
            b0: 1e-3,
        }
    }
}

/// Conjugate posterior over `[β0, β]` and σ².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NigPosterior {
    pub names: Vec<String>,
    /// Posterior mean, intercept first.
    pub mean: DVector<f64>,
    /// `Vₙ`, the covariance factor (posterior covariance is `σ²Vₙ`).
    pub cov: DMatrix<f64>,
    pub a: f64,
    pub b: f64,
    pub n: usize,
    pub standardizer: Option<Standardizer>,
}

/// Student-t predictive for one row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentT {
    pub location: f64,
    pub scale: f64,
    pub dof: f64,
}

impl StudentT {
    pub fn cdf(&self, x: f64) -> f64 {
        crate::stats::student_t_cdf((x - self.location) / self.scale, self.dof)
    }

    /// Central interval with the given coverage.
    pub fn interval(&self, coverage: f64) -> (f64, f64) {
        let t = crate::stats::student_t_ppf(0.5 + coverage / 2.0, self.dof);
        (self.location - t * self.scale, self.location + t * self.scale)
    }
}

fn augmented(design: &DesignMatrix) -> DMatrix<f64> {
    let n = design.nrows();
    let mut a = DMatrix::<f64>::zeros(n, design.ncols() + 1);
    a.column_mut(0).fill(1.0);
    a.columns_mut(1, design.ncols()).copy_from(&design.values);
    a
}

/// Closed-form normal-inverse-gamma update.
pub fn fit_blr_nig(design: &DesignMatrix, prior: &NigPrior) -> Result<NigPosterior> {
    let p1 = design.ncols() + 1;
    if prior.mean.len() != p1 || prior.precision.shape() != (p1, p1) {
        return Err(Error::invalid("prior dimension does not match the design"));
    }
    if !(prior.a0 > 0.0 && prior.b0 > 0.0) {
        return Err(Error::invalid("a0 and b0 must be positive"));
    }
    let a = augmented(design);
    let y = &design.response;
    let lambda_n = &prior.precision + a.tr_mul(&a);
    let chol = lambda_n.clone().cholesky().ok_or(Error::SingularPrior)?;
    let rhs = &prior.precision * &prior.mean + a.tr_mul(y);
    let mean = chol.solve(&rhs);
    let cov = chol.inverse();
    let resid = y - &a * &mean;
    let dev = &mean - &prior.mean;
    let quad = dev.dot(&(&prior.precision * &dev));
    let n = design.nrows();
    Ok(NigPosterior {
        names: design.columns.iter().map(|c| c.name.clone()).collect(),
        mean,
        cov,
        a: prior.a0 + n as f64 / 2.0,
        b: prior.b0 + 0.5 * (resid.norm_squared() + quad),
        n,
        standardizer: design.standardizer.clone(),
    })
}

/// Zellner g-prior: `β | σ² ~ N(0, g σ² (XcᵀXc)⁻¹)` with a flat intercept.
pub fn fit_blr_zellner(design: &DesignMatrix, g: f64, a0: f64, b0: f64) -> Result<NigPosterior> {
    if !(g > 0.0) {
        return Err(Error::invalid(format!("g must be positive (got {g})")));
    }
    let p = design.ncols();
    let xc = centered(&design.values, &column_means(&design.values));
    if full_rank(&xc).is_none() {
        return Err(Error::SingularGram);
    }
    let gram = xc.tr_mul(&xc);
    let mut precision = DMatrix::<f64>::zeros(p + 1, p + 1);
    precision.view_mut((1, 1), (p, p)).copy_from(&(gram / g));
    let prior = NigPrior {
        mean: DVector::zeros(p + 1),
        precision,
        a0,
        b0,
    };
    fit_blr_nig(design, &prior)
}

impl NigPosterior {
    /// Posterior-mean point model.
    pub fn point_model(&self, design: &DesignMatrix) -> FitModel {
        let beta: Vec<f64> = self.mean.iter().skip(1).copied().collect();
        FitModel::assemble(design, self.mean[0], beta, PenaltySpec::none())
    }

    /// Posterior mean of σ² (`b/(a−1)` when `a > 1`).
    pub fn sigma2_mean(&self) -> f64 {
        if self.a > 1.0 {
            self.b / (self.a - 1.0)
        } else {
            f64::INFINITY
        }
    }
}

/// Per-row Student-t posterior predictive.
pub fn blr_predictive(post: &NigPosterior, design: &DesignMatrix) -> Result<Vec<StudentT>> {
    let idx = align(&post.names, design)?;
    let dof = 2.0 * post.a;
    let s2 = post.b / post.a;
    let p1 = idx.len() + 1;
    let mut phi = DVector::<f64>::zeros(p1);
    let mut out = Vec::with_capacity(design.nrows());
    for i in 0..design.nrows() {
        phi[0] = 1.0;
        for (k, &j) in idx.iter().enumerate() {
            phi[k + 1] = design.values[(i, j)];
        }
        let location = phi.dot(&post.mean);
        let lev = phi.dot(&(&post.cov * &phi));
        out.push(StudentT {
            location,
            scale: (s2 * (1.0 + lev)).sqrt(),
            dof,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn design(x: DMatrix<f64>, y: DVector<f64>) -> DesignMatrix {
        let names: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        DesignMatrix::from_columns(&refs, x, y).unwrap()
    }

    fn random_problem(n: usize, p: usize, seed: u64) -> DesignMatrix {
        let mut rng = crate::rng::rng_from(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let beta: Vec<f64> = (0..p).map(|j| if j % 3 == 0 { 0.0 } else { 1.0 + j as f64 * 0.5 }).collect();
        let y = DVector::from_fn(n, |i, _| {
            3.0 + (0..p).map(|j| x[(i, j)] * beta[j]).sum::<f64>() + rng.sample::<f64, _>(StandardNormal)
        });
        let d = design(x, y);
        let rows: Vec<usize> = (0..n).collect();
        apply_standardizer(&fit_standardizer(&d, &rows).unwrap(), &d).unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn exact_line() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let y = DVector::from_column_slice(&[2.0, 4.0, 6.0, 8.0]);
        let m = fit_linear(&design(x, y), PenaltySpec::none(), 1e-10, 1000).unwrap();
        assert!((m.coefficients[0] - 2.0).abs() < 1e-12);
        assert!(m.intercept.abs() < 1e-12);
        assert!(m.rss < 1e-20);
    }

    #[test]
    fn ols_rejects_collinear_and_wide() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 4.0, 8.0]);
        let y = DVector::from_column_slice(&[1.0, 2.0, 0.0, 1.0]);
        assert_eq!(fit_linear(&design(x, y.clone()), PenaltySpec::none(), 1e-10, 10).unwrap_err(), Error::RankDeficient);
        let wide = DMatrix::from_fn(4, 4, |i, j| ((i + 1) * (j + 2)) as f64 + (i * j) as f64);
        assert_eq!(fit_linear(&design(wide, y), PenaltySpec::none(), 1e-10, 10).unwrap_err(), Error::RankDeficient);
    }

    #[test]
    fn ols_residuals_are_orthogonal() {
        let d = random_problem(300, 6, 1);
        let m = fit_linear(&d, PenaltySpec::none(), 1e-10, 10).unwrap();
        let r = &d.response - predict(&m, &d).unwrap();
        assert!(r.mean().abs() < 1e-10);
        assert!(d.values.tr_mul(&r).amax() < 1e-6);
    }

    #[test]
    fn ridge_on_orthonormal_columns() {
        // columns with (1/n)ΦᵀΦ = I and zero mean
        let n = 8;
        let c1 = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let c2 = [1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0];
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { c1[i] } else { c2[i] });
        let y = DVector::from_fn(n, |i, _| 5.0 + 2.0 * c1[i] - 3.0 * c2[i] + 0.1 * (i as f64).sin());
        let d = design(x, y);
        let ols = fit_linear(&d, PenaltySpec::none(), 1e-12, 10).unwrap();
        for lambda in [0.1, 0.5, 2.0] {
            let r = fit_linear(&d, PenaltySpec::ridge(lambda), 1e-12, 10).unwrap();
            for j in 0..2 {
                assert!((r.coefficients[j] - ols.coefficients[j] / (1.0 + 2.0 * lambda)).abs() < 1e-8);
            }
            assert!((r.intercept - ols.intercept).abs() < 1e-12);
        }
    }

    #[test]
    fn ridge_norm_decreases_in_lambda() {
        let d = random_problem(200, 8, 2);
        let mut last = f64::INFINITY;
        for lambda in [0.0, 0.01, 0.1, 1.0, 10.0, 100.0] {
            let m = fit_linear(&d, PenaltySpec::ridge(lambda), 1e-12, 10).unwrap();
            let norm: f64 = m.coefficients.iter().map(|b| b * b).sum();
            assert!(norm <= last + 1e-12);
            last = norm;
        }
    }

    #[test]
    fn lasso_full_shrinkage_threshold() {
        let d = random_problem(150, 5, 3);
        let n = d.nrows() as f64;
        let yc = d.response.add_scalar(-d.response.mean());
        let lmax = d.values.tr_mul(&yc).amax() / n;
        let m = fit_linear(&d, PenaltySpec::lasso(lmax), 1e-12, 10_000).unwrap();
        assert!(m.coefficients.iter().all(|b| *b == 0.0));
        assert!((m.intercept - d.response.mean()).abs() < 1e-12);
        let m = fit_linear(&d, PenaltySpec::lasso(0.98 * lmax), 1e-12, 10_000).unwrap();
        assert!(m.coefficients.iter().any(|b| *b != 0.0));
    }

    #[test]
    fn lasso_satisfies_kkt() {
        let d = random_problem(400, 10, 4);
        let lambda = 0.15;
        let tol = 1e-10;
        let m = fit_linear(&d, PenaltySpec::lasso(lambda), tol, 100_000).unwrap();
        let r = &d.response - predict(&m, &d).unwrap();
        let g = d.values.tr_mul(&r) / d.nrows() as f64;
        let zeros = m.coefficients.iter().filter(|b| **b == 0.0).count();
        assert!(zeros > 0 && zeros < 10);
        for (j, b) in m.coefficients.iter().enumerate() {
            if *b == 0.0 {
                assert!(g[j].abs() <= lambda + 1e-8);
            } else {
                assert!((g[j] - lambda * b.signum()).abs() < 1e-8, "{} vs {}", g[j], lambda * b.signum());
            }
        }
    }

    #[test]
    fn enet_endpoints() {
        let d = random_problem(250, 7, 5);
        let lambda = 0.05;
        let lasso = fit_linear(&d, PenaltySpec::lasso(lambda), 1e-13, 100_000).unwrap();
        let e1 = fit_linear(&d, PenaltySpec::enet(lambda, 1.0), 1e-13, 100_000).unwrap();
        assert!(max_diff(&lasso.coefficients, &e1.coefficients) < 1e-8);
        // α = 0 leaves λ/2·‖β‖², which is ridge at λ/2
        let ridge = fit_linear(&d, PenaltySpec::ridge(lambda / 2.0), 1e-13, 10).unwrap();
        let e0 = fit_linear(&d, PenaltySpec::enet(lambda, 0.0), 1e-13, 100_000).unwrap();
        assert!(max_diff(&ridge.coefficients, &e0.coefficients) < 1e-8);
    }

    #[test]
    fn coordinate_descent_reports_non_convergence() {
        let d = random_problem(100, 6, 6);
        assert_eq!(fit_linear(&d, PenaltySpec::lasso(1e-4), 1e-15, 2).unwrap_err(), Error::NotConverged(2));
    }

    #[test]
    fn natural_coefficients_reproduce_predictions() {
        let mut rng = crate::rng::rng_from(9);
        let x = DMatrix::from_fn(120, 3, |_, j| 100.0 * j as f64 + rng.gen_range(0.0..10.0));
        let y = DVector::from_fn(120, |i, _| 1.0 + x[(i, 0)] - 0.2 * x[(i, 2)] + rng.gen_range(-1.0..1.0));
        let raw = design(x, y);
        let rows: Vec<usize> = (0..120).collect();
        let z = apply_standardizer(&fit_standardizer(&raw, &rows).unwrap(), &raw).unwrap();
        let m = fit_linear(&z, PenaltySpec::ridge(0.01), 1e-12, 10).unwrap();
        let a = predict(&m, &z).unwrap();
        let b = predict(&m, &raw).unwrap();
        assert!((a - b).amax() < 1e-10);
    }

    #[test]
    fn predict_aligns_by_name() {
        let d = random_problem(50, 4, 7);
        let m = fit_linear(&d, PenaltySpec::none(), 1e-12, 10).unwrap();
        let permuted = d.select_columns(&["x2", "x0", "x3", "x1"]).unwrap();
        assert!((predict(&m, &d).unwrap() - predict(&m, &permuted).unwrap()).amax() < 1e-12);
        let short = d.select_columns(&["x0", "x1", "x2"]).unwrap();
        assert!(matches!(predict(&m, &short), Err(Error::ColumnMismatch(_))));
        let zero = FitModel {
            coefficients: vec![0.0; 4],
            ..m.clone()
        };
        assert!(predict(&zero, &d).unwrap().iter().all(|v| *v == m.intercept));
    }

    #[test]
    fn selection_prefers_larger_lambda_on_ties() {
        let mut rng = crate::rng::rng_from(11);
        let n = 200;
        let x = DMatrix::from_fn(n, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let d = design(x, y);
        let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..4)
            .map(|f| {
                let val: Vec<usize> = (f * 50..(f + 1) * 50).collect();
                let train: Vec<usize> = (0..n).filter(|i| !val.contains(i)).collect();
                (train, val)
            })
            .collect();
        // on pure noise every λ above the full-shrinkage threshold gives the
        // same intercept-only model
        let grid = [1e-4, 10.0, 100.0, 1000.0];
        let spec = select_hyperparameters(&d, PenaltyKind::Lasso, &grid, &[], &splits, 1e-10, 10_000).unwrap();
        assert_eq!(spec.lambda, 1000.0);
    }

    #[test]
    fn selection_keeps_signal() {
        let mut rng = crate::rng::rng_from(12);
        let n = 200;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| 4.0 * x[(i, 0)] - 2.0 * x[(i, 1)] + 0.1 * rng.sample::<f64, _>(StandardNormal));
        let d = design(x, y);
        let splits = vec![((0..150).collect(), (150..200).collect()), ((50..200).collect(), (0..50).collect())];
        let spec = select_hyperparameters(&d, PenaltyKind::Ridge, &[0.0, 1e6], &[], &splits, 1e-10, 10).unwrap();
        assert_eq!(spec.lambda, 0.0);
    }

    #[test]
    fn diffuse_nig_matches_ols() {
        let d = random_problem(200, 5, 13);
        let ols = fit_linear(&d, PenaltySpec::none(), 1e-12, 10).unwrap();
        let post = fit_blr_nig(&d, &NigPrior::diffuse(5)).unwrap();
        assert!((post.mean[0] - ols.intercept).abs() < 1e-8);
        assert!(max_diff(&post.mean.as_slice()[1..], &ols.coefficients) < 1e-8);
        let pred = blr_predictive(&post, &d).unwrap();
        let yhat = predict(&ols, &d).unwrap();
        assert!(pred.iter().zip(yhat.iter()).all(|(t, y)| (t.location - y).abs() < 1e-8));
        assert!((pred[0].dof - (2.0 * 1e-3 + 200.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_data_returns_prior() {
        let d = random_problem(20, 3, 14).select_rows(&[]);
        let prior = NigPrior::isotropic(3, 2.0, 3.0, 4.0);
        let post = fit_blr_nig(&d, &prior).unwrap();
        assert_eq!(post.mean, prior.mean);
        assert!((post.cov.clone() - DMatrix::identity(4, 4) * 2.0).amax() < 1e-12);
        assert_eq!((post.a, post.b), (3.0, 4.0));
        assert_eq!(fit_blr_nig(&d, &NigPrior::diffuse(3)).unwrap_err(), Error::SingularPrior);
    }

    #[test]
    fn ridge_prior_gives_ridge_mode() {
        let d = random_problem(120, 4, 15);
        let lambda = 0.3;
        let n = d.nrows() as f64;
        let mut prior = NigPrior::diffuse(4);
        for j in 1..5 {
            prior.precision[(j, j)] = 2.0 * lambda * n;
        }
        let post = fit_blr_nig(&d, &prior).unwrap();
        let ridge = fit_linear(&d, PenaltySpec::ridge(lambda), 1e-12, 10).unwrap();
        assert!(max_diff(&post.mean.as_slice()[1..], &ridge.coefficients) < 1e-8);
        assert!((post.mean[0] - ridge.intercept).abs() < 1e-8);
    }

    #[test]
    fn dof_grows_with_n() {
        let d = random_problem(100, 2, 16);
        let mut last = 0.0;
        for n in [10, 40, 100] {
            let rows: Vec<usize> = (0..n).collect();
            let post = fit_blr_nig(&d.select_rows(&rows), &NigPrior::weak(2)).unwrap();
            let dof = blr_predictive(&post, &d).unwrap()[0].dof;
            assert!(dof > last);
            last = dof;
        }
    }

    #[test]
    fn zellner_shrinkage() {
        let d = random_problem(150, 4, 17);
        let ols = fit_linear(&d, PenaltySpec::none(), 1e-12, 10).unwrap();
        for g in [1.0, 9.0, 150.0] {
            let post = fit_blr_zellner(&d, g, 1e-3, 1e-3).unwrap();
            let f = g / (1.0 + g);
            for j in 0..4 {
                assert!((post.mean[j + 1] - f * ols.coefficients[j]).abs() < 1e-10);
            }
        }
        let big = fit_blr_zellner(&d, 1e12, 1e-3, 1e-3).unwrap();
        assert!(max_diff(&big.mean.as_slice()[1..], &ols.coefficients) < 1e-9);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let sing = design(x, DVector::from_column_slice(&[1.0, 2.0, 3.0]));
        assert_eq!(fit_blr_zellner(&sing, 1.0, 1e-3, 1e-3).unwrap_err(), Error::SingularGram);
    }

    #[test]
    fn predictive_interval_coverage() {
        let train = random_problem(10_000, 3, 18);
        let test = random_problem(10_000, 3, 19);
        let post = fit_blr_nig(&train, &NigPrior::weak(3)).unwrap();
        let pred = blr_predictive(&post, &test).unwrap();
        let covered = pred
            .iter()
            .zip(test.response.iter())
            .filter(|(t, y)| {
                let (lo, hi) = t.interval(0.5);
                (lo..=hi).contains(*y)
            })
            .count();
        let frac = covered as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.03, "{frac}");
    }
}

//! Per-term Wald ANOVA (classical or HC3), nested partial-F tests and VIFs.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DesignMatrix;
use crate::regression::{align, FitModel, PenaltyKind};
use crate::stats::{f_sf, format_p};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnovaType {
    #[serde(rename = "II")]
    II,
    #[serde(rename = "III")]
    III,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaRow {
    pub term: String,
    pub df1: f64,
    pub df2: f64,
    pub f: f64,
    pub p: f64,
    pub partial_eta2: f64,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaTable {
    pub kind: AnovaType,
    pub robust: bool,
    pub n: usize,
    pub rows: Vec<AnovaRow>,
}

impl AnovaTable {
    pub fn row(&self, term: &str) -> Option<&AnovaRow> {
        self.rows.iter().find(|r| r.term == term)
    }

    /// Rows sorted by decreasing partial η².
    pub fn ranked(&self) -> Vec<&AnovaRow> {
        let mut v: Vec<&AnovaRow> = self.rows.iter().filter(|r| r.term != "intercept").collect();
        v.sort_by(|a, b| b.partial_eta2.total_cmp(&a.partial_eta2));
        v
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["term", "df1", "df2", "F", "p", "partial_eta2", "sign"])?;
        for r in &self.rows {
            let sign = if r.coefficient > 0.0 {
                "+"
            } else if r.coefficient < 0.0 {
                "-"
            } else {
                "0"
            };
            w.write_record([
                r.term.clone(),
                format!("{}", r.df1),
                format!("{}", r.df2),
                format!("{:.6}", r.f),
                format_p(r.p),
                format!("{:.6}", r.partial_eta2),
                sign.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn partial_eta2(f: f64, df1: f64, df2: f64) -> f64 {
    f * df1 / (f * df1 + df2)
}

/// `[1, X]`.
fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = DMatrix::<f64>::zeros(x.nrows(), x.ncols() + 1);
    a.column_mut(0).fill(1.0);
    a.columns_mut(1, x.ncols()).copy_from(x);
    a
}

/// OLS pieces on a regressor matrix that already contains any intercept.
struct OlsCore {
    beta: DVector<f64>,
    resid: DVector<f64>,
    /// `(AᵀA)⁻¹`
    xtx_inv: DMatrix<f64>,
    q: DMatrix<f64>,
}

fn ols_core(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsCore> {
    let (n, p) = a.shape();
    if n < p {
        return Err(Error::RankDeficient);
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let rmax = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if rmax == 0.0 || r.diagonal().iter().any(|v| v.abs() <= 1e-10 * rmax) {
        return Err(Error::RankDeficient);
    }
    let q = qr.q();
    let beta = r.solve_upper_triangular(&q.tr_mul(y)).ok_or(Error::RankDeficient)?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(Error::RankDeficient)?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let resid = y - a * &beta;
    Ok(OlsCore {
        beta,
        resid,
        xtx_inv,
        q,
    })
}

fn hc3_from_core(a: &DMatrix<f64>, core: &OlsCore) -> Result<DMatrix<f64>> {
    let p = a.ncols();
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for i in 0..a.nrows() {
        let h = core.q.row(i).norm_squared();
        if h >= 1.0 - 1e-10 {
            return Err(Error::LeverageOne(i));
        }
        let w = (core.resid[i] / (1.0 - h)).powi(2);
        let row = a.row(i);
        meat.ger(w, &row.transpose(), &row.transpose(), 1.0);
    }
    let cov = &core.xtx_inv * meat * &core.xtx_inv;
    Ok((&cov + cov.transpose()) * 0.5)
}

/// HC3 sandwich covariance of the least-squares coefficients of `x` (which
/// must already contain an intercept column if one is wanted).
pub fn hc3_covariance(x: &DMatrix<f64>, residuals: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (n, p) = x.shape();
    if residuals.len() != n {
        return Err(Error::invalid("residual length differs from the design"));
    }
    if n <= p {
        return Err(Error::LeverageOne(0));
    }
    let mut core = ols_core(x, residuals)?;
    core.resid = residuals.clone();
    hc3_from_core(x, &core)
}

fn classical_cov(core: &OlsCore, n: usize, p: usize) -> DMatrix<f64> {
    let s2 = core.resid.norm_squared() / (n - p) as f64;
    &core.xtx_inv * s2
}

/// Wald F for the coefficient block `idx` of `beta`.
fn wald(beta: &DVector<f64>, cov: &DMatrix<f64>, idx: &[usize]) -> Result<f64> {
    let b = DVector::from_iterator(idx.len(), idx.iter().map(|&j| beta[j]));
    let v = cov.select_rows(idx).select_columns(idx);
    let chol = v.cholesky().ok_or(Error::RankDeficient)?;
    Ok(b.dot(&chol.solve(&b)) / idx.len() as f64)
}

fn is_proper_submultiset(small: &[String], big: &[String]) -> bool {
    if small.len() >= big.len() {
        return false;
    }
    let mut rest: Vec<&String> = big.iter().collect();
    for s in small {
        match rest.iter().position(|b| *b == s) {
            Some(k) => {
                rest.swap_remove(k);
            }
            None => return false,
        }
    }
    true
}

/// Per-column Wald F tests.
///
/// Type III tests every coefficient (and the intercept) in the full model.
/// Type II tests each term in the model without the terms that contain it
/// (by monomial marginality); on an additive design the two agree.
pub fn anova(fit: &FitModel, design: &DesignMatrix, kind: AnovaType, robust: bool) -> Result<AnovaTable> {
    if fit.penalty.kind != PenaltyKind::None {
        return Err(Error::PenalizedModelRejected);
    }
    align(&fit.names, design)?;
    let n = design.nrows();
    let y = &design.response;

    let test = |cols: &[usize], target: usize| -> Result<(f64, f64, f64)> {
        // target is a position inside `cols`, offset by the intercept
        let a = with_intercept(&design.values.select_columns(cols));
        let p = a.ncols();
        if n <= p {
            return Err(Error::RankDeficient);
        }
        let core = ols_core(&a, y)?;
        let cov = if robust {
            hc3_from_core(&a, &core)?
        } else {
            classical_cov(&core, n, p)
        };
        let f = wald(&core.beta, &cov, &[target])?;
        Ok((f, (n - p) as f64, core.beta[target]))
    };

    let all: Vec<usize> = (0..design.ncols()).collect();
    let mut rows = Vec::new();
    let mut push = |term: &str, (f, df2, coef): (f64, f64, f64)| {
        rows.push(AnovaRow {
            term: term.to_string(),
            df1: 1.0,
            df2,
            f,
            p: f_sf(f, 1.0, df2),
            partial_eta2: partial_eta2(f, 1.0, df2),
            coefficient: coef,
        });
    };
    match kind {
        AnovaType::III => {
            push("intercept", test(&all, 0)?);
            for j in 0..design.ncols() {
                push(&design.columns[j].name, test(&all, j + 1)?);
            }
        }
        AnovaType::II => {
            for j in 0..design.ncols() {
                let own = &design.columns[j].factors;
                let keep: Vec<usize> = all
                    .iter()
                    .copied()
                    .filter(|&k| !is_proper_submultiset(own, &design.columns[k].factors))
                    .collect();
                let pos = keep.iter().position(|&k| k == j).expect("term keeps itself");
                push(&design.columns[j].name, test(&keep, pos + 1)?);
            }
        }
    }
    Ok(AnovaTable {
        kind,
        robust,
        n,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedComparison {
    pub restricted_terms: Vec<String>,
    pub full_terms: Vec<String>,
    pub delta_df: usize,
    pub df2: usize,
    pub f: f64,
    pub p: f64,
    pub partial_eta2: f64,
}

/// Classical RSS partial-F for nested OLS fits on the same `n` rows.
pub fn partial_f(restricted: &FitModel, full: &FitModel, n: usize) -> Result<NestedComparison> {
    if restricted.penalty.kind != PenaltyKind::None || full.penalty.kind != PenaltyKind::None {
        return Err(Error::PenalizedModelRejected);
    }
    if restricted.n != n || full.n != n {
        return Err(Error::invalid("both fits must use the same n rows"));
    }
    if let Some(missing) = restricted.names.iter().find(|t| !full.names.contains(t)) {
        return Err(Error::NotNested(format!("{missing} is absent from the full model")));
    }
    let p0 = restricted.names.len() + 1;
    let p1 = full.names.len() + 1;
    if p1 <= p0 {
        return Err(Error::NotNested("full model adds no terms".into()));
    }
    if n <= p1 {
        return Err(Error::RankDeficient);
    }
    let df1 = p1 - p0;
    let df2 = n - p1;
    let f = ((restricted.rss - full.rss) / df1 as f64) / (full.rss / df2 as f64);
    let f = f.max(0.0);
    Ok(NestedComparison {
        restricted_terms: restricted.names.clone(),
        full_terms: full.names.clone(),
        delta_df: df1,
        df2,
        f,
        p: f_sf(f, df1 as f64, df2 as f64),
        partial_eta2: partial_eta2(f, df1 as f64, df2 as f64),
    })
}

/// Variance inflation factors, one per column.
pub fn vif(design: &DesignMatrix) -> Result<Vec<(String, f64)>> {
    let (n, p) = design.values.shape();
    if n <= p {
        return Err(Error::invalid("VIF needs more rows than columns"));
    }
    (0..p)
        .map(|j| {
            let name = design.columns[j].name.clone();
            if p == 1 {
                return Ok((name, 1.0));
            }
            let y = design.values.column(j).into_owned();
            let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
            let a = with_intercept(&design.values.select_columns(&others));
            let core = ols_core(&a, &y).map_err(|_| Error::PerfectCollinearity(name.clone()))?;
            let ybar = y.mean();
            let sst: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
            if sst == 0.0 {
                return Err(Error::PerfectCollinearity(name));
            }
            let r2 = 1.0 - core.resid.norm_squared() / sst;
            if r2 >= 1.0 - 1e-12 {
                return Err(Error::PerfectCollinearity(name));
            }
            Ok((name, 1.0 / (1.0 - r2)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::{fit_linear, PenaltySpec};
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn design(names: &[&str], x: DMatrix<f64>, y: DVector<f64>) -> DesignMatrix {
        DesignMatrix::from_columns(names, x, y).unwrap()
    }

    fn gaussian(n: usize, p: usize, seed: u64, beta: &[f64], hetero: bool) -> DesignMatrix {
        let mut rng = crate::rng::rng_from(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| {
            let mean: f64 = 1.0 + (0..p).map(|j| beta[j] * x[(i, j)]).sum::<f64>();
            let sd = if hetero { x[(i, 0)].abs() * 2.0 } else { 1.0 };
            mean + sd * rng.sample::<f64, _>(StandardNormal)
        });
        let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        design(&refs, x, y)
    }

    fn ols(d: &DesignMatrix) -> FitModel {
        fit_linear(d, PenaltySpec::none(), 1e-12, 10).unwrap()
    }

    #[test]
    fn hc3_close_to_classical_when_homoscedastic() {
        let d = gaussian(10_000, 3, 1, &[1.0, -0.5, 0.0], false);
        let a = with_intercept(&d.values);
        let core = ols_core(&a, &d.response).unwrap();
        let hc3 = hc3_covariance(&a, &core.resid).unwrap();
        let classical = classical_cov(&core, 10_000, 4);
        for i in 0..4 {
            assert!((hc3[(i, i)] / classical[(i, i)] - 1.0).abs() < 0.05);
            for j in 0..4 {
                let scale = (classical[(i, i)] * classical[(j, j)]).sqrt();
                assert!((hc3[(i, j)] - classical[(i, j)]).abs() < 0.05 * scale);
            }
        }
        assert!((hc3.clone() - hc3.transpose()).amax() < 1e-18);
        assert!(hc3.symmetric_eigenvalues().iter().all(|e| *e >= -1e-15));
    }

    #[test]
    fn hc3_inflates_heteroscedastic_coefficient() {
        let d = gaussian(2000, 2, 2, &[1.0, 1.0], true);
        let a = with_intercept(&d.values);
        let core = ols_core(&a, &d.response).unwrap();
        let hc3 = hc3_covariance(&a, &core.resid).unwrap();
        let classical = classical_cov(&core, 2000, 3);
        assert!(hc3[(1, 1)] > 1.5 * classical[(1, 1)]);
    }

    #[test]
    fn saturated_design_hits_leverage_one() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 2.0, 1.0, 1.0, 0.0, 1.0, 3.0, 1.0]);
        let r = DVector::from_column_slice(&[0.1, -0.1, 0.0]);
        assert!(matches!(hc3_covariance(&x, &r), Err(Error::LeverageOne(_))));
    }

    #[test]
    fn type_iii_adds_intercept_and_agrees_on_additive_model() {
        let d = gaussian(500, 3, 3, &[2.0, 0.3, 0.0], false);
        let fit = ols(&d);
        let t2 = anova(&fit, &d, AnovaType::II, true).unwrap();
        let t3 = anova(&fit, &d, AnovaType::III, true).unwrap();
        assert!(t2.row("intercept").is_none());
        assert!(t3.row("intercept").is_some());
        for r in &t2.rows {
            let s = t3.row(&r.term).unwrap();
            assert!((r.f - s.f).abs() < 1e-9 * r.f.max(1.0));
        }
        assert_eq!(t2.ranked()[0].term, "x0");
        for r in &t3.rows {
            assert!((0.0..1.0).contains(&r.partial_eta2));
            assert!((r.partial_eta2 - r.f / (r.f + r.df2)).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&r.p));
        }
        assert!(t3.row("x0").unwrap().coefficient > 0.0);
    }

    #[test]
    fn type_ii_respects_marginality() {
        let mut rng = crate::rng::rng_from(4);
        let n = 400;
        let x1: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..3.0)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..3.0)).collect();
        let mut m = DMatrix::zeros(n, 3);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            m[(i, 0)] = x1[i];
            m[(i, 1)] = x2[i];
            m[(i, 2)] = x1[i] * x2[i];
            y[i] = x1[i] + x2[i] + 0.5 * x1[i] * x2[i] + rng.sample::<f64, _>(StandardNormal);
        }
        let mut d = design(&["a", "b", "a*b"], m, y);
        d.columns[2].factors = vec!["a".into(), "b".into()];
        let fit = ols(&d);
        let t2 = anova(&fit, &d, AnovaType::II, false).unwrap();
        let t3 = anova(&fit, &d, AnovaType::III, false).unwrap();
        // the main effect is tested without the product under Type II only
        let reduced = d.select_columns(&["a", "b"]).unwrap();
        let main = anova(&ols(&reduced), &reduced, AnovaType::III, false).unwrap();
        assert!((t2.row("a").unwrap().f - main.row("a").unwrap().f).abs() < 1e-9);
        assert!((t2.row("a").unwrap().f - t3.row("a").unwrap().f).abs() > 1.0);
        assert!((t2.row("a*b").unwrap().f - t3.row("a*b").unwrap().f).abs() < 1e-9);
    }

    #[test]
    fn penalized_fit_is_rejected() {
        let d = gaussian(100, 2, 5, &[1.0, 1.0], false);
        let fit = fit_linear(&d, PenaltySpec::ridge(0.1), 1e-12, 10).unwrap();
        assert_eq!(anova(&fit, &d, AnovaType::II, true).unwrap_err(), Error::PenalizedModelRejected);
    }

    #[test]
    fn partial_f_matches_squared_t() {
        let d = gaussian(300, 3, 6, &[1.0, 0.2, 0.1], false);
        let full = ols(&d);
        let restricted = ols(&d.select_columns(&["x0", "x1"]).unwrap());
        let cmp = partial_f(&restricted, &full, 300).unwrap();
        let t = anova(&full, &d, AnovaType::III, false).unwrap();
        let f = t.row("x2").unwrap().f;
        assert!((cmp.f - f).abs() < 1e-8 * f.max(1.0));
        assert_eq!(cmp.delta_df, 1);
        assert_eq!(cmp.df2, 296);
    }

    #[test]
    fn partial_f_rejects_non_nested() {
        let d = gaussian(100, 3, 7, &[1.0, 1.0, 1.0], false);
        let a = ols(&d.select_columns(&["x0", "x1"]).unwrap());
        let b = ols(&d.select_columns(&["x0", "x2"]).unwrap());
        assert!(matches!(partial_f(&a, &b, 100), Err(Error::NotNested(_))));
        assert!(matches!(partial_f(&a, &a, 100), Err(Error::NotNested(_))));
        // a duplicated column cannot be fit at all
        let mut dup = d.values.clone().insert_column(3, 0.0);
        let c0 = dup.column(0).into_owned();
        dup.set_column(3, &c0);
        let dd = design(&["x0", "x1", "x2", "x0b"], dup, d.response.clone());
        assert_eq!(fit_linear(&dd, PenaltySpec::none(), 1e-12, 10).unwrap_err(), Error::RankDeficient);
    }

    #[test]
    fn noise_column_f_averages_one() {
        let mut total = 0.0;
        for seed in 0..200 {
            let d = gaussian(200, 3, 100 + seed, &[1.0, 0.5, 0.0], false);
            let full = ols(&d);
            let restricted = ols(&d.select_columns(&["x0", "x1"]).unwrap());
            total += partial_f(&restricted, &full, 200).unwrap().f;
        }
        let mean = total / 200.0;
        assert!((mean - 1.0).abs() < 0.2, "{mean}");
    }

    #[test]
    fn null_p_values_are_uniform() {
        let mut p: Vec<f64> = (0..200)
            .map(|seed| {
                let d = gaussian(150, 2, 1000 + seed, &[1.0, 0.0], false);
                anova(&ols(&d), &d, AnovaType::II, true).unwrap().row("x1").unwrap().p
            })
            .collect();
        p.sort_by(f64::total_cmp);
        let n = p.len() as f64;
        let ks = p
            .iter()
            .enumerate()
            .map(|(i, v)| ((i as f64 + 1.0) / n - v).max(v - i as f64 / n))
            .fold(0.0, f64::max);
        // 5% critical value of the one-sample KS statistic at n = 200
        assert!(ks < 1.358 / n.sqrt(), "{ks}");
    }

    #[test]
    fn vif_cases() {
        let n = 8;
        let c1 = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let c2 = [1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0];
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { c1[i] } else { c2[i] });
        let d = design(&["a", "b"], x, DVector::zeros(n));
        for (_, v) in vif(&d).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let mut rng = crate::rng::rng_from(8);
        let x1: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
        let x = DMatrix::from_fn(200, 2, |i, j| if j == 0 { x1[i] } else { x1[i] + 1e-3 * rng.sample::<f64, _>(StandardNormal) });
        let d = design(&["a", "b"], x, DVector::zeros(200));
        assert!(vif(&d).unwrap().iter().all(|(_, v)| *v > 100.0));
        let single = design(&["a"], DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 4.0]), DVector::zeros(3));
        assert_eq!(vif(&single).unwrap()[0].1, 1.0);
        let x = DMatrix::from_fn(10, 2, |i, j| (i * (j + 1)) as f64);
        let d = design(&["a", "b"], x, DVector::zeros(10));
        assert!(matches!(vif(&d), Err(Error::PerfectCollinearity(_))));
    }
}

//! Python bindings.
//!
//! Campaigns, fitted models and CV results are classes; structured reports
//! (ledgers, ANOVA tables, residual fits, fade-margin rows) come back as
//! plain dicts.

use pathloss_core::anova::{anova as anova_table, AnovaType};
use pathloss_core::campaign::{
    chronological_split, clean as clean_records, parse_campaign_csv, write_campaign, CampaignRecord, CleaningConfig,
    ColumnSchema,
};
use pathloss_core::cv::{fit_final, make_time_blocked_folds, run_cv, CvOptions, CvResult as CoreCv, FinalModel, ModelSpec};
use pathloss_core::fade_margin::{
    achieved_pdr_residuals, bootstrap_ci as core_bootstrap_ci, calibrate as core_calibrate, prescribe_fm,
    CalibrationOptions, CiMethod,
};
use pathloss_core::features::{apply_standardizer, build_design, fit_standardizer, FeatureKind, FeatureSpec};
use pathloss_core::nonparam::{dip_test as core_dip_test, kde_fft, silverman_bandwidth, silverman_critical_bandwidth, KdeOptions};
use pathloss_core::regression::{fit_linear, PenaltySpec};
use pathloss_core::residuals::{default_candidates, fit_candidates, fit_gmm, select_residual_model, GmmOptions};
use pathloss_core::synth::{generate_campaign, GroundTruth};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(pathloss_py, PathlossError, PyException, "Raised for any failure inside the toolkit.");

fn err(e: pathloss_core::Error) -> PyErr {
    let kind: String = format!("{:?}", e.root()).chars().take_while(|c| c.is_ascii_alphanumeric()).collect();
    PathlossError::new_err(format!("{kind}: {e}"))
}

/// Serializable value → Python object (dict, list, float, ...).
fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

pub fn feature_spec(kind: &str, include_snr: bool) -> PyResult<FeatureSpec> {
    let kind = match kind {
        "linear" => FeatureKind::Linear,
        "poly2" => FeatureKind::Poly2,
        other => return Err(PyValueError::new_err(format!("features must be 'linear' or 'poly2', not {other:?}"))),
    };
    Ok(FeatureSpec {
        kind,
        include_snr,
        ..FeatureSpec::linear()
    })
}

pub fn penalty_spec(penalty: &str, lam: f64, alpha: f64) -> PyResult<PenaltySpec> {
    let p = match penalty {
        "none" | "ols" => PenaltySpec::none(),
        "ridge" => PenaltySpec::ridge(lam),
        "lasso" => PenaltySpec::lasso(lam),
        "enet" => PenaltySpec::enet(lam, alpha),
        other => return Err(PyValueError::new_err(format!("unknown penalty {other:?}"))),
    };
    p.validate().map_err(err)?;
    Ok(p)
}

pub fn ci_method(method: &str, block_len: Option<usize>) -> PyResult<CiMethod> {
    match method {
        "bca_iid" => Ok(CiMethod::BcaIid),
        "moving_block" => Ok(CiMethod::MovingBlock { block_len }),
        other => Err(PyValueError::new_err(format!("method must be 'bca_iid' or 'moving_block', not {other:?}"))),
    }
}

/// A set of campaign records.
#[pyclass(module = "pathloss_py")]
pub struct Campaign {
    pub records: Vec<CampaignRecord>,
}

#[pymethods]
impl Campaign {
    /// Reads a campaign CSV with the default column names. Rows that fail to
    /// parse are skipped.
    #[staticmethod]
    fn read_csv(path: &str) -> PyResult<Campaign> {
        let parsed = parse_campaign_csv(path, &ColumnSchema::default()).map_err(err)?;
        Ok(Campaign { records: parsed.records })
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        let file = std::fs::File::create(path).map_err(|e| err(e.into()))?;
        write_campaign(&self.records, file).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.records.len()
    }

    fn __repr__(&self) -> String {
        let devices: std::collections::BTreeSet<&str> = self.records.iter().map(|r| r.device_id.as_str()).collect();
        format!("Campaign({} records, {} devices)", self.records.len(), devices.len())
    }

    #[getter]
    fn path_loss_db(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.path_loss_db).collect()
    }

    #[getter]
    fn device_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.device_id.clone()).collect()
    }

    #[getter]
    fn timestamps(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.timestamp).collect()
    }

    /// Deduplicate, filter spreading factors and drop isolation-forest
    /// outliers. Returns the kept campaign and the drop ledger.
    #[pyo3(signature = (contamination = 0.01, seed = 0))]
    fn clean<'py>(&self, py: Python<'py>, contamination: f64, seed: u64) -> PyResult<(Campaign, Bound<'py, PyAny>)> {
        let cfg = CleaningConfig {
            contamination,
            ..CleaningConfig::new(seed)
        };
        let out = clean_records(&self.records, &cfg).map_err(err)?;
        Ok((Campaign { records: out.kept }, to_py(py, &out.ledger)?))
    }

    /// Per-device chronological (train, test) split.
    #[pyo3(signature = (test_fraction = 0.2))]
    fn split(&self, test_fraction: f64) -> PyResult<(Campaign, Campaign)> {
        let (a, b) = chronological_split(&self.records, test_fraction).map_err(err)?;
        Ok((Campaign { records: a }, Campaign { records: b }))
    }

    /// Number of regressors the design would have.
    #[pyo3(signature = (features = "linear", include_snr = true))]
    fn design_columns(&self, features: &str, include_snr: bool) -> PyResult<Vec<String>> {
        let d = build_design(&self.records, &feature_spec(features, include_snr)?).map_err(err)?;
        Ok(d.names().into_iter().map(str::to_string).collect())
    }
}

/// Synthetic campaign from the default ground truth, or from a JSON truth.
#[pyfunction]
#[pyo3(signature = (n_per_device, seed = 0, truth_json = None))]
fn synth_campaign(n_per_device: usize, seed: u64, truth_json: Option<&str>) -> PyResult<Campaign> {
    let truth: GroundTruth = match truth_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => GroundTruth::default(),
    };
    Ok(Campaign {
        records: generate_campaign(&truth, n_per_device, seed).map_err(err)?,
    })
}

/// A model fitted on every row of a training campaign.
#[pyclass(module = "pathloss_py")]
pub struct Model {
    pub inner: FinalModel,
}

#[pymethods]
impl Model {
    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.model.names.clone()
    }

    /// Coefficients on the raw regressor scale.
    #[getter]
    fn coefficients(&self) -> Vec<f64> {
        self.inner.model.natural_coefficients.clone()
    }

    #[getter]
    fn intercept(&self) -> f64 {
        self.inner.model.natural_intercept
    }

    #[getter]
    fn r2(&self) -> f64 {
        self.inner.model.r2
    }

    fn coefficient(&self, name: &str) -> Option<f64> {
        self.inner.model.natural_coefficient(name)
    }

    fn predict(&self, campaign: PyRef<'_, Campaign>) -> PyResult<Vec<f64>> {
        let pairs = self.inner.predict_records(&campaign.records).map_err(err)?;
        Ok(pairs.into_iter().map(|(_, p)| p).collect())
    }

    /// Observed minus predicted path loss.
    fn residuals(&self, campaign: PyRef<'_, Campaign>) -> PyResult<Vec<f64>> {
        let pairs = self.inner.predict_records(&campaign.records).map_err(err)?;
        Ok(pairs.into_iter().map(|(o, p)| o - p).collect())
    }
}

#[pyfunction]
#[pyo3(signature = (campaign, features = "linear", penalty = "none", lam = 0.0, alpha = 1.0, include_snr = true))]
fn fit(
    campaign: PyRef<'_, Campaign>,
    features: &str,
    penalty: &str,
    lam: f64,
    alpha: f64,
    include_snr: bool,
) -> PyResult<Model> {
    let spec = feature_spec(features, include_snr)?;
    let model = ModelSpec::Fixed {
        penalty: penalty_spec(penalty, lam, alpha)?,
    };
    let inner = fit_final(&campaign.records, &spec, &model, 2, 0.0, &CvOptions::default()).map_err(err)?;
    Ok(Model { inner })
}

/// Time-blocked cross-validation outcome.
#[pyclass(module = "pathloss_py")]
pub struct CvResult {
    pub inner: CoreCv,
}

#[pymethods]
impl CvResult {
    /// (mean, sd) of the validation RMSE across folds.
    #[getter]
    fn rmse(&self) -> (f64, f64) {
        self.inner.validation_rmse()
    }

    #[getter]
    fn r2(&self) -> (f64, f64) {
        self.inner.validation_r2()
    }

    /// Out-of-fold residuals in record order.
    #[getter]
    fn residuals(&self) -> Vec<f64> {
        self.inner.residual_values()
    }

    #[getter]
    fn folds(&self) -> Vec<usize> {
        self.inner.residuals.iter().map(|r| r.fold).collect()
    }
}

#[pyfunction]
#[pyo3(signature = (campaign, features = "linear", penalty = "none", lam = 0.0, alpha = 1.0, k = 5, gap_hours = 24.0, include_snr = true))]
#[allow(clippy::too_many_arguments)]
fn cross_validate(
    campaign: PyRef<'_, Campaign>,
    features: &str,
    penalty: &str,
    lam: f64,
    alpha: f64,
    k: usize,
    gap_hours: f64,
    include_snr: bool,
) -> PyResult<CvResult> {
    let spec = feature_spec(features, include_snr)?;
    let model = ModelSpec::Fixed {
        penalty: penalty_spec(penalty, lam, alpha)?,
    };
    let plan = make_time_blocked_folds(&campaign.records, k, gap_hours).map_err(err)?;
    let inner = run_cv(&campaign.records, &spec, &model, &plan, &CvOptions::default()).map_err(err)?;
    Ok(CvResult { inner })
}

/// OLS ANOVA table (`kind` "II" or "III") as a dict.
#[pyfunction]
#[pyo3(signature = (campaign, features = "linear", kind = "II", robust = true))]
fn anova<'py>(py: Python<'py>, campaign: PyRef<'_, Campaign>, features: &str, kind: &str, robust: bool) -> PyResult<Bound<'py, PyAny>> {
    let kind = match kind {
        "II" => AnovaType::II,
        "III" => AnovaType::III,
        other => return Err(PyValueError::new_err(format!("kind must be 'II' or 'III', not {other:?}"))),
    };
    let raw = build_design(&campaign.records, &feature_spec(features, true)?).map_err(err)?;
    let rows: Vec<usize> = (0..raw.nrows()).collect();
    let design = apply_standardizer(&fit_standardizer(&raw, &rows).map_err(err)?, &raw).map_err(err)?;
    let fit = fit_linear(&design, PenaltySpec::none(), 1e-10, 1000).map_err(err)?;
    let table = anova_table(&fit, &design, kind, robust).map_err(err)?;
    to_py(py, &table)
}

/// Fits every candidate law (Normal, Student-t, Skew-Normal, Cauchy,
/// GMM 1..=kmax) and applies the BIC/KS selection rule.
/// Returns `{"selected": fit, "fits": [fit, ...]}`.
#[pyfunction]
#[pyo3(signature = (residuals, kmax = 5, n_init = 8, seed = 0, bic_tie_tol = 10.0, ks_tie_tol = 0.002))]
fn select_residual_law<'py>(
    py: Python<'py>,
    residuals: Vec<f64>,
    kmax: usize,
    n_init: usize,
    seed: u64,
    bic_tie_tol: f64,
    ks_tie_tol: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = GmmOptions {
        n_init,
        seed,
        ..GmmOptions::default()
    };
    let fits = fit_candidates(&residuals, &default_candidates(kmax), &opts).map_err(err)?;
    let best = select_residual_model(&fits, bic_tie_tol, ks_tie_tol).map_err(err)?;
    let kinds: Vec<String> = fits.iter().map(|f| f.kind().to_string()).collect();
    to_py(
        py,
        &serde_json::json!({ "selected": best, "selected_kind": best.kind().to_string(), "fits": fits, "kinds": kinds }),
    )
}

/// FFT kernel density estimate; Silverman bandwidth when `bandwidth` is None.
/// Returns (grid, density, bandwidth).
#[pyfunction]
#[pyo3(signature = (x, bandwidth = None, grid_size = 16384))]
fn kde(x: Vec<f64>, bandwidth: Option<f64>, grid_size: usize) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
    let h = match bandwidth {
        Some(h) => h,
        None => silverman_bandwidth(&x).map_err(err)?,
    };
    let d = kde_fft(&x, h, grid_size, KdeOptions::default().pad).map_err(err)?;
    Ok((d.grid, d.density, d.bandwidth))
}

/// Hartigan dip test with a uniform-null bootstrap p-value.
#[pyfunction]
#[pyo3(signature = (x, n_boot = 1000, seed = 0))]
fn dip_test<'py>(py: Python<'py>, x: Vec<f64>, n_boot: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &core_dip_test(&x, n_boot, seed).map_err(err)?)
}

/// Silverman critical bandwidth for `k_modes` modes with its bootstrap p-value.
#[pyfunction]
#[pyo3(signature = (x, k_modes = 1, n_boot = 200, seed = 0, grid_size = 4096))]
fn critical_bandwidth<'py>(py: Python<'py>, x: Vec<f64>, k_modes: usize, n_boot: usize, seed: u64, grid_size: usize) -> PyResult<Bound<'py, PyAny>> {
    let opts = KdeOptions {
        grid_size,
        ..KdeOptions::default()
    };
    to_py(py, &silverman_critical_bandwidth(&x, k_modes, n_boot, seed, &opts).map_err(err)?)
}

/// Fade margin for outage target `p`. A mixture tail model with `gmm_k`
/// components backs targets at or below 2 %; pass `gmm_k=None` for the
/// empirical quantile only.
#[pyfunction]
#[pyo3(signature = (residuals, p, gmm_k = Some(3), seed = 0))]
fn prescribe_fade_margin<'py>(py: Python<'py>, residuals: Vec<f64>, p: f64, gmm_k: Option<usize>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let gmm = match gmm_k {
        Some(k) => Some(
            fit_gmm(
                &residuals,
                &GmmOptions {
                    k,
                    seed,
                    ..GmmOptions::default()
                },
            )
            .map_err(err)?
            .family,
        ),
        None => None,
    };
    to_py(py, &prescribe_fm(&residuals, gmm.as_ref(), p).map_err(err)?)
}

/// Bootstrap interval (lo, hi) for the (1 − p) quantile.
#[pyfunction]
#[pyo3(signature = (x, p, method = "bca_iid", replicates = 1000, seed = 0, level = 0.95, block_len = None))]
fn bootstrap_ci(x: Vec<f64>, p: f64, method: &str, replicates: usize, seed: u64, level: f64, block_len: Option<usize>) -> PyResult<(f64, f64)> {
    let iv = core_bootstrap_ci(&x, p, ci_method(method, block_len)?, replicates, seed, level).map_err(err)?;
    Ok((iv.lo, iv.hi))
}

/// Share of residuals at or below the margin.
#[pyfunction]
fn achieved_pdr(residuals: Vec<f64>, fm_db: f64) -> PyResult<f64> {
    achieved_pdr_residuals(&residuals, fm_db).map_err(err)
}

/// Fade-margin report rows from CV residuals, optionally scored on hold-out
/// residuals.
#[pyfunction]
#[pyo3(signature = (cv, holdout_residuals = None, targets = vec![0.05, 0.02, 0.01], replicates = Some(1000), gmm_k = 3, seed = 0, model = "model"))]
#[allow(clippy::too_many_arguments)]
fn calibrate<'py>(
    py: Python<'py>,
    cv: PyRef<'_, CvResult>,
    holdout_residuals: Option<Vec<f64>>,
    targets: Vec<f64>,
    replicates: Option<usize>,
    gmm_k: usize,
    seed: u64,
    model: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let x = cv.inner.residual_values();
    let gmm = fit_gmm(
        &x,
        &GmmOptions {
            k: gmm_k,
            seed,
            ..GmmOptions::default()
        },
    )
    .map_err(err)?;
    let opts = CalibrationOptions {
        targets,
        replicates,
        seed,
        ..CalibrationOptions::default()
    };
    let rows = core_calibrate(model, &cv.inner.residuals, Some(&gmm.family), holdout_residuals.as_deref(), &opts).map_err(err)?;
    to_py(py, &rows)
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PathlossError", m.py().get_type::<PathlossError>())?;
    m.add_class::<Campaign>()?;
    m.add_class::<Model>()?;
    m.add_class::<CvResult>()?;
    m.add_function(wrap_pyfunction!(synth_campaign, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_function(wrap_pyfunction!(anova, m)?)?;
    m.add_function(wrap_pyfunction!(select_residual_law, m)?)?;
    m.add_function(wrap_pyfunction!(kde, m)?)?;
    m.add_function(wrap_pyfunction!(dip_test, m)?)?;
    m.add_function(wrap_pyfunction!(critical_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(prescribe_fade_margin, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_ci, m)?)?;
    m.add_function(wrap_pyfunction!(achieved_pdr, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    Ok(())
}

#[pymodule]
fn pathloss_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn option_strings_parse() {
        assert_eq!(feature_spec("poly2", false).unwrap().kind, FeatureKind::Poly2);
        assert!(!feature_spec("linear", false).unwrap().include_snr);
        assert_eq!(penalty_spec("lasso", 0.1, 0.3).unwrap(), PenaltySpec::lasso(0.1));
        assert_eq!(ci_method("moving_block", Some(4)).unwrap(), CiMethod::MovingBlock { block_len: Some(4) });
        Python::attach(|_| {
            assert!(feature_spec("cubic", true).is_err());
            assert!(penalty_spec("ridge", -1.0, 0.0).is_err());
            assert!(ci_method("percentile", None).is_err());
        });
    }
}

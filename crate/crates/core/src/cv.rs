//! Device-aware, time-blocked k-fold cross-validation with an embargo gap.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::campaign::CampaignRecord;
use crate::error::{Error, Result};
use crate::features::{apply_standardizer, build_design, fit_standardizer, DesignMatrix, FeatureSpec, Standardizer};
use crate::regression::{
    fit_blr_nig, fit_blr_zellner, fit_linear, predict, select_hyperparameters, FitModel, NigPrior, PenaltyKind,
    PenaltySpec,
};

/// Fold layout: per-device block edges, validation fold of every record, and
/// the embargoed training set of every fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub gap_hours: f64,
    /// `k + 1` block edges (UNIX seconds) per device.
    pub boundaries: BTreeMap<String, Vec<f64>>,
    /// Validation fold of each record, in record order.
    pub fold_of: Vec<usize>,
    /// Training record indices per fold, ascending.
    pub train: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn validation(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }
}

/// Cuts every device's timeline into `k` equal-duration blocks.
///
/// Block `j` of every device forms validation fold `j`. Training rows of fold
/// `j` exclude that fold and every row of the same device lying within
/// `gap_hours` of either edge of the device's block `j`.
pub fn make_time_blocked_folds(records: &[CampaignRecord], k: usize, gap_hours: f64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2 (got {k})")));
    }
    if !(gap_hours >= 0.0) {
        return Err(Error::invalid("gap_hours must be non-negative"));
    }
    if records.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut by_device: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_device.entry(r.device_id.as_str()).or_default().push(i);
    }
    let gap = gap_hours * 3600.0;
    let mut fold_of = vec![0usize; records.len()];
    let mut boundaries = BTreeMap::new();
    for (dev, idx) in &by_device {
        let t0 = idx.iter().map(|&i| records[i].timestamp).fold(f64::INFINITY, f64::min);
        let t1 = idx.iter().map(|&i| records[i].timestamp).fold(f64::NEG_INFINITY, f64::max);
        let span = t1 - t0;
        if idx.len() < k || !(span > 0.0) {
            return Err(Error::DeviceSpanTooShort(dev.to_string()));
        }
        let mut counts = vec![0usize; k];
        for &i in idx {
            let b = (((records[i].timestamp - t0) * k as f64 / span).floor() as usize).min(k - 1);
            fold_of[i] = b;
            counts[b] += 1;
        }
        if counts.contains(&0) {
            return Err(Error::DeviceSpanTooShort(dev.to_string()));
        }
        let edges: Vec<f64> = (0..=k).map(|j| if j == k { t1 } else { t0 + span * j as f64 / k as f64 }).collect();
        boundaries.insert(dev.to_string(), edges);
    }
    let train: Vec<Vec<usize>> = (0..k)
        .map(|j| {
            (0..records.len())
                .filter(|&i| {
                    if fold_of[i] == j {
                        return false;
                    }
                    let e = &boundaries[&records[i].device_id];
                    let t = records[i].timestamp;
                    !(t >= e[j] - gap && t <= e[j + 1] + gap)
                })
                .collect()
        })
        .collect();
    if let Some(j) = train.iter().position(|t| t.is_empty()) {
        return Err(Error::invalid(format!(
            "fold {j} has no training rows outside the {gap_hours} h embargo; lower gap_hours or k"
        )));
    }
    Ok(FoldPlan {
        k,
        gap_hours,
        boundaries,
        fold_of,
        train,
    })
}

/// Inner `(train, validation)` splits over `rows`, expressed as positions
/// inside `rows`.
pub fn inner_splits(
    records: &[CampaignRecord],
    rows: &[usize],
    k: usize,
    gap_hours: f64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let subset: Vec<CampaignRecord> = rows.iter().map(|&i| records[i].clone()).collect();
    let plan = make_time_blocked_folds(&subset, k, gap_hours)?;
    Ok((0..k).map(|j| (plan.train[j].clone(), plan.validation(j))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub r2: f64,
}

pub fn metrics(y: &[f64], yhat: &[f64]) -> Result<Metrics> {
    if y.len() != yhat.len() || y.len() < 2 {
        return Err(Error::invalid("metrics need two equal-length vectors with n >= 2"));
    }
    let n = y.len() as f64;
    let ybar = y.iter().sum::<f64>() / n;
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    let sst: f64 = y.iter().map(|a| (a - ybar).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(Metrics {
        rmse: (sse / n).sqrt(),
        r2: 1.0 - sse / sst,
    })
}

/// What to fit inside each fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelSpec {
    Fixed {
        penalty: PenaltySpec,
    },
    /// Penalty chosen per fold by inner time-blocked CV.
    Tuned {
        kind: PenaltyKind,
        lambda_grid: Vec<f64>,
        alpha_grid: Vec<f64>,
    },
    /// Conjugate prior `β ~ N(0, σ²·prior_var·I)`, `σ² ~ IG(a0, b0)`.
    BlrNig {
        prior_var: f64,
        a0: f64,
        b0: f64,
    },
    /// Zellner g-prior; `g = None` means unit information (`g = n_train`).
    BlrZellner {
        g: Option<f64>,
        a0: f64,
        b0: f64,
    },
}

impl ModelSpec {
    pub fn ols() -> Self {
        ModelSpec::Fixed {
            penalty: PenaltySpec::none(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub train: Metrics,
    pub validation: Metrics,
    pub model: FitModel,
    pub standardizer: Standardizer,
}

/// One out-of-fold residual `observed − predicted`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OofResidual {
    pub record_id: usize,
    pub device_id: String,
    pub timestamp: f64,
    pub fold: usize,
    pub observed_db: f64,
    pub predicted_db: f64,
    pub residual_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: Vec<FoldOutcome>,
    /// Pooled residuals in record order.
    pub residuals: Vec<OofResidual>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = crate::stats::mean(v);
    let sd = if v.len() > 1 { crate::stats::std_dev(v, 1) } else { 0.0 };
    (m, sd)
}

impl CvResult {
    pub fn residual_values(&self) -> Vec<f64> {
        self.residuals.iter().map(|r| r.residual_db).collect()
    }

    /// Mean and sample standard deviation of the validation RMSE over folds.
    pub fn validation_rmse(&self) -> (f64, f64) {
        mean_sd(&self.folds.iter().map(|f| f.validation.rmse).collect::<Vec<_>>())
    }

    pub fn validation_r2(&self) -> (f64, f64) {
        mean_sd(&self.folds.iter().map(|f| f.validation.r2).collect::<Vec<_>>())
    }

    pub fn write_fold_metrics_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "fold",
            "n_train",
            "n_val",
            "train_rmse_db",
            "train_r2",
            "val_rmse_db",
            "val_r2",
            "penalty",
            "lambda",
            "alpha",
        ])?;
        for f in &self.folds {
            let kind = serde_json::to_value(f.model.penalty.kind).unwrap_or_default();
            w.write_record([
                f.fold.to_string(),
                f.n_train.to_string(),
                f.n_val.to_string(),
                format!("{:?}", f.train.rmse),
                format!("{:?}", f.train.r2),
                format!("{:?}", f.validation.rmse),
                format!("{:?}", f.validation.r2),
                kind.as_str().unwrap_or("").to_string(),
                format!("{:?}", f.model.penalty.lambda),
                format!("{:?}", f.model.penalty.alpha),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_residuals_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_residuals_csv(&self.residuals, writer)
    }
}

pub fn write_residuals_csv<W: Write>(residuals: &[OofResidual], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in residuals {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a residual table written by [`write_residuals_csv`]; `#` lines are
/// comments.
pub fn read_residuals_csv<R: Read>(reader: R) -> Result<Vec<OofResidual>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        let r: OofResidual = row.map_err(|e| Error::RowParseError {
            line: i + 2,
            reason: e.to_string(),
        })?;
        if !r.residual_db.is_finite() {
            return Err(Error::RowParseError {
                line: i + 2,
                reason: "non-finite residual".into(),
            });
        }
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::EmptyFile);
    }
    Ok(out)
}

/// A model refit on every training row, with its scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalModel {
    pub feature_spec: FeatureSpec,
    pub model: FitModel,
    pub standardizer: Standardizer,
}

impl FinalModel {
    /// `(observed, predicted)` in response units for each record.
    pub fn predict_records(&self, records: &[CampaignRecord]) -> Result<Vec<(f64, f64)>> {
        let raw = build_design(records, &self.feature_spec)?;
        let design = apply_standardizer(&self.standardizer, &raw)?;
        let pred = predict(&self.model, &design)?;
        Ok(design.response.iter().zip(pred.iter()).map(|(o, p)| (*o, *p)).collect())
    }
}

/// Fits `model` on all of `records`, tuning (if any) by `k_inner`
/// time-blocked inner folds.
pub fn fit_final(
    records: &[CampaignRecord],
    feature_spec: &FeatureSpec,
    model: &ModelSpec,
    k_inner: usize,
    gap_hours: f64,
    opts: &CvOptions,
) -> Result<FinalModel> {
    let raw = build_design(records, feature_spec)?;
    let rows: Vec<usize> = (0..records.len()).collect();
    let standardizer = fit_standardizer(&raw, &rows)?;
    let train = apply_standardizer(&standardizer, &raw)?;
    let fit = fit_fold_model(model, &raw, &train, records, k_inner, gap_hours, opts)?;
    Ok(FinalModel {
        feature_spec: *feature_spec,
        model: fit,
        standardizer,
    })
}

/// Fits `model` on the standardized training design.
///
/// `raw_train` is needed for inner hyperparameter selection, `train_records`
/// for the inner fold layout.
fn fit_fold_model(
    model: &ModelSpec,
    raw_train: &DesignMatrix,
    train: &DesignMatrix,
    train_records: &[CampaignRecord],
    k_inner: usize,
    gap_hours: f64,
    opts: &CvOptions,
) -> Result<FitModel> {
    match model {
        ModelSpec::Fixed { penalty } => fit_linear(train, *penalty, opts.tol, opts.max_iter),
        ModelSpec::Tuned {
            kind,
            lambda_grid,
            alpha_grid,
        } => {
            let rows: Vec<usize> = (0..train_records.len()).collect();
            let splits = inner_splits(train_records, &rows, k_inner, gap_hours)?;
            let spec = select_hyperparameters(raw_train, *kind, lambda_grid, alpha_grid, &splits, opts.tol, opts.max_iter)?;
            fit_linear(train, spec, opts.tol, opts.max_iter)
        }
        ModelSpec::BlrNig { prior_var, a0, b0 } => {
            let prior = NigPrior::isotropic(train.ncols(), *prior_var, *a0, *b0);
            Ok(fit_blr_nig(train, &prior)?.point_model(train))
        }
        ModelSpec::BlrZellner { g, a0, b0 } => {
            let g = g.unwrap_or(train.nrows() as f64);
            Ok(fit_blr_zellner(train, g, *a0, *b0)?.point_model(train))
        }
    }
}

/// Runs the fold plan. Feature scaling and any hyperparameter search are fit
/// on each fold's training rows only.
pub fn run_cv(
    records: &[CampaignRecord],
    feature_spec: &FeatureSpec,
    model: &ModelSpec,
    plan: &FoldPlan,
    opts: &CvOptions,
) -> Result<CvResult> {
    if plan.fold_of.len() != records.len() {
        return Err(Error::invalid("fold plan does not cover the records"));
    }
    let raw = build_design(records, feature_spec)?;
    let k_inner = (plan.k - 1).max(2);
    let folds = (0..plan.k)
        .into_par_iter()
        .map(|j| {
            let wrap = |e: Error| Error::Fold {
                fold: j,
                source: Box::new(e),
            };
            let train_rows = &plan.train[j];
            let val_rows = plan.validation(j);
            let std = fit_standardizer(&raw, train_rows).map_err(wrap)?;
            let raw_train = raw.select_rows(train_rows);
            let train = apply_standardizer(&std, &raw_train).map_err(wrap)?;
            let val = apply_standardizer(&std, &raw.select_rows(&val_rows)).map_err(wrap)?;
            let train_records: Vec<CampaignRecord> = train_rows.iter().map(|&i| records[i].clone()).collect();
            let fit = fit_fold_model(model, &raw_train, &train, &train_records, k_inner, plan.gap_hours, opts)
                .map_err(wrap)?;
            let train_pred = predict(&fit, &train).map_err(wrap)?;
            let val_pred = predict(&fit, &val).map_err(wrap)?;
            let train_m = metrics(train.response.as_slice(), train_pred.as_slice()).map_err(wrap)?;
            let val_m = metrics(val.response.as_slice(), val_pred.as_slice()).map_err(wrap)?;
            let resid: Vec<(usize, f64, f64)> = val_rows
                .iter()
                .enumerate()
                .map(|(k, &i)| (i, val.response[k], val_pred[k]))
                .collect();
            Ok((
                FoldOutcome {
                    fold: j,
                    n_train: train_rows.len(),
                    n_val: val_rows.len(),
                    train: train_m,
                    validation: val_m,
                    model: fit,
                    standardizer: std,
                },
                resid,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut residuals: Vec<OofResidual> = Vec::with_capacity(records.len());
    let mut outcomes = Vec::with_capacity(plan.k);
    for (outcome, resid) in folds {
        for (i, obs, pred) in resid {
            residuals.push(OofResidual {
                record_id: i,
                device_id: records[i].device_id.clone(),
                timestamp: records[i].timestamp,
                fold: outcome.fold,
                observed_db: obs,
                predicted_db: pred,
                residual_db: obs - pred,
            });
        }
        outcomes.push(outcome);
    }
    residuals.sort_by_key(|r| r.record_id);
    Ok(CvResult {
        folds: outcomes,
        residuals,
    })
}

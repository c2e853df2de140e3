//! Subcommand implementations.

use std::path::PathBuf;

use pathloss_core::anova::{anova, partial_f, vif, AnovaTable};
use pathloss_core::campaign::{chronological_split, clean, read_campaign, write_campaign, CampaignRecord, ColumnSchema};
use pathloss_core::cv::{fit_final, make_time_blocked_folds, read_residuals_csv, run_cv, OofResidual};
use pathloss_core::fade_margin::{calibrate, pdr_sweep, time_ordered, write_report_csv, write_sweep_csv, FadeMarginReport};
use pathloss_core::features::{apply_standardizer, build_design, fit_standardizer, ColumnBlock, DesignMatrix, FeatureKind};
use pathloss_core::nonparam::{
    cv_loglik_bandwidth, dip_test, group_tests, kde_fft, log_grid, los_labels, mode_curve, serial_diagnostics,
    silverman_bandwidth, silverman_critical_bandwidth, tercile_labels, write_mode_curve_csv, GroupTests, KdeOptions,
};
use pathloss_core::regression::{fit_linear, FitModel, PenaltySpec};
use pathloss_core::residuals::{
    fit_candidates, fit_gmm, normality_tests, qq_points, select_residual_model, write_fit_table, write_qq_csv,
    FamilyKind,
};
use pathloss_core::synth::generate_detailed;
use pathloss_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{BandwidthRule, ModelEntry, RunConfig};
use crate::output::{read_holdout_csv, write_holdout_csv, write_pairs_csv, Artifacts, HoldoutRow, Provenance};
use crate::{CliError, Command};

const CAMPAIGN: &str = "campaign.csv";
const CLEANED: &str = "cleaned.csv";
const FIT_REPORT: &str = "fit_report.json";
const FADE_MARGIN: &str = "fade_margin.json";

pub fn dispatch(command: &Command, cfg: &RunConfig, out_dir: PathBuf) -> Result<(), CliError> {
    let prov = Provenance::new(command.name(), cfg.hash(), cfg.seed);
    let out = Artifacts::new(out_dir, prov)?;
    out.json(&format!("run_config_{}.json", command.name()), json!({ "config": cfg }))?;
    match command {
        Command::Synth { .. } => cmd_synth(cfg, &out),
        Command::Ingest { .. } => cmd_ingest(cfg, &out),
        Command::Fit { models } => cmd_fit(cfg, &out, &selected(cfg, models)?),
        Command::Anova => cmd_anova(cfg, &out),
        Command::Residuals { models } => cmd_residuals(cfg, &out, &selected(cfg, models)?),
        Command::Calibrate { models } => cmd_calibrate(cfg, &out, &selected(cfg, models)?),
        Command::Report => cmd_report(cfg, &out),
    }
}

fn selected<'a>(cfg: &'a RunConfig, names: &[String]) -> Result<Vec<&'a ModelEntry>, CliError> {
    if names.is_empty() {
        return Ok(cfg.models.iter().collect());
    }
    names.iter().map(|n| cfg.model(n)).collect()
}

pub fn cmd_synth(cfg: &RunConfig, out: &Artifacts) -> Result<(), CliError> {
    let s = &cfg.synth;
    let camp = generate_detailed(&s.truth, s.n_per_device, cfg.stream_seed("synth"))?;
    out.csv(CAMPAIGN, |w| write_campaign(&camp.records, w))?;
    let noise_mean = camp.noise_db.iter().sum::<f64>() / camp.noise_db.len() as f64;
    out.json(
        "truth.json",
        json!({
            "truth": s.truth,
            "n_per_device": s.n_per_device,
            "records": camp.records.len(),
            "realized_noise_mean_db": noise_mean,
        }),
    )?;
    Ok(())
}

pub fn cmd_ingest(cfg: &RunConfig, out: &Artifacts) -> Result<(), CliError> {
    let input = cfg.input.clone().unwrap_or_else(|| out.path(CAMPAIGN));
    // the default location is recorded relative to the output directory
    let shown_input = match &cfg.input {
        Some(p) => p.display().to_string(),
        None => CAMPAIGN.to_string(),
    };
    let file = std::fs::File::open(&input)
        .map_err(|e| CliError::input("InputNotFound", format!("{}: {e}", input.display())))?;
    let parsed = read_campaign(file, &cfg.schema)?;
    if parsed.records.is_empty() {
        return Err(match parsed.row_errors.first() {
            Some(e) => CliError::input("RowParseError", format!("no parsable rows; line {}: {}", e.line, e.reason)),
            None => CliError::from(Error::EmptyFile),
        });
    }
    let cleaned = clean(&parsed.records, &cfg.cleaning_config())?;
    out.csv(CLEANED, |w| write_campaign(&cleaned.kept, w))?;
    out.csv("outliers.csv", |w| write_campaign(&cleaned.outlier_rows, w))?;
    let shown: Vec<_> = parsed.row_errors.iter().take(50).collect();
    out.json(
        "drop_ledger.json",
        json!({
            "input": shown_input,
            "rows_read": parsed.records.len() + parsed.row_errors.len(),
            "parse_errors": parsed.row_errors.len(),
            "row_errors": shown,
            "ledger": cleaned.ledger,
        }),
    )?;
    Ok(())
}

/// Cleaned records split chronologically into (train, hold-out).
fn load_split(cfg: &RunConfig, out: &Artifacts) -> Result<(Vec<CampaignRecord>, Vec<CampaignRecord>), CliError> {
    let bytes = out.read(CLEANED, "ingest")?;
    let parsed = read_campaign(bytes.as_slice(), &ColumnSchema::default())?;
    if let Some(e) = parsed.row_errors.first() {
        return Err(CliError::input("CorruptArtifact", format!("{CLEANED} line {}: {}", e.line, e.reason)));
    }
    Ok(chronological_split(&parsed.records, cfg.holdout_fraction)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub features: FeatureKind,
    pub n_train: usize,
    pub n_holdout: usize,
    pub n_columns: usize,
    pub cv_rmse_db: f64,
    pub cv_rmse_sd_db: f64,
    pub cv_r2: f64,
    pub cv_r2_sd: f64,
    pub holdout_rmse_db: f64,
    pub final_penalty: PenaltySpec,
    pub final_train_r2: f64,
}

fn coefficient_rows(m: &FitModel) -> Vec<(String, f64)> {
    std::iter::once(("intercept".to_string(), m.natural_intercept))
        .chain(m.names.iter().cloned().zip(m.natural_coefficients.iter().copied()))
        .collect()
}

pub fn cmd_fit(cfg: &RunConfig, out: &Artifacts, models: &[&ModelEntry]) -> Result<(), CliError> {
    let (train, test) = load_split(cfg, out)?;
    let opts = cfg.cv_options();
    let plan = make_time_blocked_folds(&train, cfg.cv.k, cfg.cv.gap_hours)?;
    let mut summaries = Vec::with_capacity(models.len());
    for m in models {
        let spec = cfg.feature_spec(m.features);
        let cv = run_cv(&train, &spec, &m.model, &plan, &opts)?;
        let fin = fit_final(&train, &spec, &m.model, cfg.cv.k, cfg.cv.gap_hours, &opts)?;
        let holdout: Vec<HoldoutRow> = fin
            .predict_records(&test)?
            .into_iter()
            .zip(&test)
            .map(|((obs, pred), r)| HoldoutRow {
                device_id: r.device_id.clone(),
                timestamp: r.timestamp,
                observed_db: obs,
                predicted_db: pred,
                residual_db: obs - pred,
            })
            .collect();
        let hold_rmse = (holdout.iter().map(|h| h.residual_db.powi(2)).sum::<f64>() / holdout.len() as f64).sqrt();

        out.csv(&format!("cv_folds_{}.csv", m.name), |w| cv.write_fold_metrics_csv(w))?;
        out.csv(&format!("oof_{}.csv", m.name), |w| cv.write_residuals_csv(w))?;
        out.csv(&format!("holdout_{}.csv", m.name), |w| write_holdout_csv(&holdout, w))?;
        out.csv(&format!("coefficients_{}.csv", m.name), |w| {
            write_pairs_csv(["term", "coefficient"], &coefficient_rows(&fin.model), w)
        })?;

        let (rmse, rmse_sd) = cv.validation_rmse();
        let (r2, r2_sd) = cv.validation_r2();
        summaries.push(ModelSummary {
            name: m.name.clone(),
            features: m.features,
            n_train: train.len(),
            n_holdout: test.len(),
            n_columns: fin.model.names.len(),
            cv_rmse_db: rmse,
            cv_rmse_sd_db: rmse_sd,
            cv_r2: r2,
            cv_r2_sd: r2_sd,
            holdout_rmse_db: hold_rmse,
            final_penalty: fin.model.penalty,
            final_train_r2: fin.model.r2,
        });
    }
    out.json(
        FIT_REPORT,
        json!({
            "folds": cfg.cv.k,
            "gap_hours": cfg.cv.gap_hours,
            "holdout_fraction": cfg.holdout_fraction,
            "models": summaries,
        }),
    )?;
    Ok(())
}

fn ols(design: &DesignMatrix, cfg: &RunConfig) -> Result<FitModel, CliError> {
    Ok(fit_linear(design, PenaltySpec::none(), cfg.cv.tol, cfg.cv.max_iter)?)
}

/// Nested partial-F dropping the columns of `blocks` from `full_design`.
fn block_test(name: &str, full_design: &DesignMatrix, full: &FitModel, blocks: &[ColumnBlock], cfg: &RunConfig) -> Result<Value, CliError> {
    let dropped = full_design.block_names(blocks);
    let keep: Vec<&str> = full_design.names().into_iter().filter(|n| !dropped.contains(n)).collect();
    let restricted_design = full_design.select_columns(&keep)?;
    let restricted = ols(&restricted_design, cfg)?;
    let cmp = partial_f(&restricted, full, full_design.nrows())?;
    Ok(json!({ "test": name, "dropped": dropped, "result": cmp }))
}

pub fn cmd_anova(cfg: &RunConfig, out: &Artifacts) -> Result<(), CliError> {
    let (train, _) = load_split(cfg, out)?;
    let rows: Vec<usize> = (0..train.len()).collect();
    let mut tables = serde_json::Map::new();
    let mut nested = Vec::new();
    for (label, kind) in [("linear", FeatureKind::Linear), ("poly2", FeatureKind::Poly2)] {
        let raw = build_design(&train, &cfg.feature_spec(kind))?;
        let design = apply_standardizer(&fit_standardizer(&raw, &rows)?, &raw)?;
        let full = ols(&design, cfg)?;
        let table: AnovaTable = anova(&full, &design, cfg.anova.kind, cfg.anova.robust)?;
        let vifs = vif(&design)?;
        out.csv(&format!("anova_{label}.csv"), |w| table.write_csv(w))?;
        out.csv(&format!("vif_{label}.csv"), |w| write_pairs_csv(["term", "vif"], &vifs, w))?;
        let ranked: Vec<&str> = table.ranked().iter().map(|r| r.term.as_str()).collect();
        tables.insert(label.into(), json!({ "table": table, "ranked_terms": ranked, "train_r2": full.r2 }));
        match kind {
            FeatureKind::Linear => nested.push(block_test("environment_block", &design, &full, &[ColumnBlock::Environment], cfg)?),
            FeatureKind::Poly2 => nested.push(block_test("second_order_terms", &design, &full, &[ColumnBlock::Interaction], cfg)?),
        }
    }
    out.json("anova.json", json!({ "n_train": train.len(), "models": tables, "nested": nested }))?;
    Ok(())
}

fn read_oof(out: &Artifacts, model: &str) -> Result<Vec<OofResidual>, CliError> {
    let bytes = out.read(&format!("oof_{model}.csv"), "fit")?;
    Ok(read_residuals_csv(bytes.as_slice())?)
}

/// Group tests are undefined with a single group; that case is reported as null.
fn optional_groups(x: &[f64], labels: &[String]) -> Result<Option<GroupTests>, CliError> {
    match group_tests(x, labels) {
        Ok(g) => Ok(Some(g)),
        Err(Error::GroupTooSmall(_)) | Err(Error::InvalidInput(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_residuals(cfg: &RunConfig, out: &Artifacts, models: &[&ModelEntry]) -> Result<(), CliError> {
    let (train, _) = load_split(cfg, out)?;
    let r = &cfg.residuals;
    let kde_opts = KdeOptions { grid_size: r.kde_grid, ..KdeOptions::default() };
    let crit_opts = KdeOptions { grid_size: r.critical_grid, ..KdeOptions::default() };
    for m in models {
        let oof = read_oof(out, &m.name)?;
        if oof.iter().any(|o| o.record_id >= train.len()) {
            return Err(CliError::input("StaleArtifact", format!("oof_{}.csv does not match {CLEANED}; rerun fit", m.name)));
        }
        let x: Vec<f64> = oof.iter().map(|o| o.residual_db).collect();

        let fits = fit_candidates(&x, &r.families, &cfg.gmm_options(3))?;
        let best = select_residual_model(&fits, r.bic_tie_tol, r.ks_tie_tol)?;
        let gmm3 = match fits.iter().find(|f| f.kind() == FamilyKind::Gmm(3)) {
            Some(f) => f.clone(),
            None => fit_gmm(&x, &cfg.gmm_options(3))?,
        };
        out.csv(&format!("residual_fits_{}.csv", m.name), |w| write_fit_table(&fits, w))?;
        out.csv(&format!("qq_{}.csv", m.name), |w| write_qq_csv(&qq_points(&x, &best.family), w))?;

        let h_silverman = silverman_bandwidth(&x)?;
        let h = match r.bandwidth {
            BandwidthRule::Silverman => h_silverman,
            BandwidthRule::CvLoglik => cv_loglik_bandwidth(
                &x,
                &log_grid(h_silverman / 4.0, h_silverman * 4.0, 25),
                5,
                cfg.stream_seed("kde-bandwidth"),
                20_000,
                &kde_opts,
            )?,
        };
        let kde = kde_fft(&x, h, kde_opts.grid_size, kde_opts.pad)?;
        out.csv(&format!("kde_{}.csv", m.name), |w| kde.write_csv(w))?;
        let (lo, hi, count) = r.mode_sweep;
        let curve = mode_curve(&x, &log_grid(lo, hi, count), &kde_opts)?;
        out.csv(&format!("mode_curve_{}.csv", m.name), |w| write_mode_curve_csv(&curve, w))?;

        let normality = normality_tests(&x)?;
        let dip = dip_test(&x, r.dip_replicates, cfg.stream_seed("dip"))?;
        let critical = silverman_critical_bandwidth(&x, 1, r.critical_replicates, cfg.stream_seed("critical-bandwidth"), &crit_opts)?;
        let serial = serial_diagnostics(&time_ordered(&oof), r.max_lag.min(x.len() - 1))?;

        let recs: Vec<CampaignRecord> = oof.iter().map(|o| train[o.record_id].clone()).collect();
        let los = optional_groups(&x, &los_labels(&recs))?;
        let co2: Vec<f64> = recs.iter().map(|r| r.env[0]).collect();
        let terciles = optional_groups(&x, &tercile_labels(&co2))?;

        out.json(
            &format!("residuals_{}.json", m.name),
            json!({
                "model": m.name,
                "n": x.len(),
                "selected": {
                    "kind": best.kind().to_string(),
                    "fit": best,
                    "bic_tie_tol": r.bic_tie_tol,
                    "ks_tie_tol": r.ks_tie_tol,
                },
                "fits": fits,
                "gmm3": gmm3,
                "normality": normality,
                "kde": { "rule": r.bandwidth, "bandwidth_db": h, "silverman_db": h_silverman },
                "dip": dip,
                "critical_bandwidth": critical,
                "serial": serial,
                "groups": { "los_nlos": los, "co2_tercile": terciles },
            }),
        )?;
    }
    Ok(())
}

pub fn cmd_calibrate(cfg: &RunConfig, out: &Artifacts, models: &[&ModelEntry]) -> Result<(), CliError> {
    let opts = cfg.calibration_options();
    let mut per_model = serde_json::Map::new();
    for m in models {
        let oof = read_oof(out, &m.name)?;
        let hold = read_holdout_csv(&out.read(&format!("holdout_{}.csv", m.name), "fit")?)?;
        let hold_res: Vec<f64> = hold.iter().map(|h| h.residual_db).collect();
        let x: Vec<f64> = oof.iter().map(|o| o.residual_db).collect();
        let gmm = fit_gmm(&x, &cfg.gmm_options(cfg.fade_margin.gmm_k))?;
        let reports = calibrate(&m.name, &oof, Some(&gmm.family), Some(&hold_res), &opts)?;
        let sweep = pdr_sweep(&reports, &hold_res, Some(cfg.fade_margin.heuristic_fm_db))?;
        out.csv(&format!("fade_margin_{}.csv", m.name), |w| write_report_csv(&reports, w))?;
        out.csv(&format!("pdr_sweep_{}.csv", m.name), |w| write_sweep_csv(&sweep, w))?;
        per_model.insert(
            m.name.clone(),
            json!({
                "n_oof": x.len(),
                "n_holdout": hold_res.len(),
                "tail_model": gmm.family,
                "reports": reports,
                "sweep": sweep,
            }),
        );
    }
    out.json(FADE_MARGIN, json!({ "level": opts.level, "method": opts.method, "models": per_model }))?;
    Ok(())
}

fn corrupt(name: &str, what: impl std::fmt::Display) -> CliError {
    CliError::input("CorruptArtifact", format!("{name}: {what}"))
}

pub fn cmd_report(cfg: &RunConfig, out: &Artifacts) -> Result<(), CliError> {
    let fit = out.read_json(FIT_REPORT, "fit")?;
    let summaries: Vec<ModelSummary> = serde_json::from_value(fit["models"].clone()).map_err(|e| corrupt(FIT_REPORT, e))?;
    let fm = out.read_json(FADE_MARGIN, "calibrate")?;
    let anova = out.read_json("anova.json", "anova").ok();

    let mut models = Vec::new();
    let mut rows: Vec<Vec<String>> = Vec::new();
    for s in &summaries {
        if cfg.models.iter().all(|m| m.name != s.name) {
            continue;
        }
        let residual = out.read_json(&format!("residuals_{}.json", s.name), "residuals").ok();
        let family = residual.as_ref().and_then(|r| r["selected"]["kind"].as_str().map(str::to_string));
        let reports: Vec<FadeMarginReport> = match fm["models"].get(&s.name) {
            Some(v) => serde_json::from_value(v["reports"].clone()).map_err(|e| corrupt(FADE_MARGIN, e))?,
            None => Vec::new(),
        };
        for rep in &reports {
            rows.push(vec![
                s.name.clone(),
                format!("{:?}", rep.p),
                rep.estimator.as_str().to_string(),
                format!("{:?}", rep.fm_db),
                rep.ci.map(|c| format!("{:?}", c.lo)).unwrap_or_default(),
                rep.ci.map(|c| format!("{:?}", c.hi)).unwrap_or_default(),
                rep.achieved_pdr.map(|v| format!("{v:?}")).unwrap_or_default(),
                format!("{:?}", s.cv_rmse_db),
                format!("{:?}", s.cv_rmse_sd_db),
                format!("{:?}", s.holdout_rmse_db),
                family.clone().unwrap_or_default(),
            ]);
        }
        models.push(json!({
            "fit": s,
            "residual_family": family,
            "fade_margins": reports,
        }));
    }
    if models.is_empty() {
        return Err(CliError::empty("EmptySample", "no configured model has fit results"));
    }
    let top_terms = anova.as_ref().map(|a| {
        let mut m = serde_json::Map::new();
        if let Some(obj) = a["models"].as_object() {
            for (k, v) in obj {
                let terms: Vec<Value> = v["ranked_terms"].as_array().map(|t| t.iter().take(5).cloned().collect()).unwrap_or_default();
                m.insert(k.clone(), Value::Array(terms));
            }
        }
        m
    });
    out.json("report.json", json!({ "models": models, "anova_top_terms": top_terms }))?;
    out.csv("summary.csv", |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "model",
            "p",
            "estimator",
            "fm_db",
            "ci_lo",
            "ci_hi",
            "achieved_pdr",
            "cv_rmse_db",
            "cv_rmse_sd_db",
            "holdout_rmse_db",
            "residual_family",
        ])?;
        for r in &rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(())
}

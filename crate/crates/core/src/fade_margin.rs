//! Fade-margin prescription from out-of-fold residual tails, bootstrap
//! intervals and held-out delivery-ratio validation.
//!
//! Residuals are `ε = PL_true − PL_pred`; an outage is `ε > FM` (strict).

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::OofResidual;
use crate::error::{Error, Result};
use crate::nonparam::serial_diagnostics;
use crate::residuals::{refit_gmm_warm, DistFamily, GmmOptions};
use crate::rng::stream_rng;
use crate::stats::{normal_cdf, normal_ppf, quantile_select, quantile_sorted, sorted_copy, std_dev};

/// Outage targets at or below this use the conservative max rule.
pub const TAIL_SWITCH: f64 = 0.02;

pub const MIN_REPLICATES: usize = 200;

fn check_prob(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("probability must lie in (0, 1) (got {q})")))
    }
}

/// Order-statistic quantile, linear between closest ranks at `(n−1)q`.
pub fn empirical_quantile(x: &[f64], q: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptySample);
    }
    check_prob(q)?;
    Ok(quantile_select(&mut x.to_vec(), q))
}

/// `x` with `F(x) = q` for a fitted law, by bisection on the upper tail.
pub fn gmm_tail_quantile(family: &DistFamily, q: f64) -> Result<f64> {
    check_prob(q)?;
    let (centre, scale) = match family {
        DistFamily::Gmm { weights, means, sds } => {
            let total: f64 = weights.iter().sum();
            if weights.is_empty()
                || weights.len() != means.len()
                || weights.len() != sds.len()
                || (total - 1.0).abs() > 1e-6
                || weights.iter().any(|w| !(*w >= 0.0))
                || sds.iter().any(|s| !(*s > 0.0))
            {
                return Err(Error::invalid("malformed mixture"));
            }
            let m: f64 = weights.iter().zip(means).map(|(w, m)| w * m).sum();
            (m, sds.iter().copied().fold(0.0, f64::max))
        }
        DistFamily::Normal { mu, sigma } => (*mu, *sigma),
        DistFamily::SkewNormal { xi, omega, .. } => (*xi, *omega),
        DistFamily::StudentT { loc, scale, .. } | DistFamily::Cauchy { loc, scale } => (*loc, *scale),
    };
    let tail = 1.0 - q;
    // g is increasing in x and vanishes at the quantile
    let g = |x: f64| tail - family.sf(x);
    let mut half = scale.max(1e-12);
    let (mut lo, mut hi) = (centre - half, centre + half);
    let mut expansions = 0;
    while g(lo) > 0.0 || g(hi) < 0.0 {
        half *= 2.0;
        lo = centre - half;
        hi = centre + half;
        expansions += 1;
        if expansions > 200 || !half.is_finite() {
            return Err(Error::BracketFailure);
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let v = g(mid);
        if v.abs() < 1e-10 * tail.min(1.0) || hi - lo <= 1e-13 * mid.abs().max(1.0) {
            return Ok(mid);
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmEstimator {
    Empirical,
    GmmTail,
}

impl FmEstimator {
    pub fn as_str(&self) -> &'static str {
        match self {
            FmEstimator::Empirical => "empirical",
            FmEstimator::GmmTail => "gmm_tail",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prescription {
    pub p: f64,
    pub fm_db: f64,
    pub estimator: FmEstimator,
    pub empirical_db: f64,
    pub gmm_tail_db: Option<f64>,
}

/// Empirical `(1−p)`-quantile for `p > 0.02`; below that, the larger of the
/// empirical and mixture-tail quantiles.
pub fn prescribe_fm(residuals: &[f64], gmm: Option<&DistFamily>, p: f64) -> Result<Prescription> {
    check_prob(p)?;
    let empirical = empirical_quantile(residuals, 1.0 - p)?;
    if p > TAIL_SWITCH {
        return Ok(Prescription {
            p,
            fm_db: empirical,
            estimator: FmEstimator::Empirical,
            empirical_db: empirical,
            gmm_tail_db: None,
        });
    }
    let fam = gmm.ok_or_else(|| Error::invalid(format!("p = {p} needs a fitted mixture")))?;
    let tail = gmm_tail_quantile(fam, 1.0 - p)?;
    let (fm, est) = if tail > empirical {
        (tail, FmEstimator::GmmTail)
    } else {
        (empirical, FmEstimator::Empirical)
    };
    Ok(Prescription {
        p,
        fm_db: fm,
        estimator: est,
        empirical_db: empirical,
        gmm_tail_db: Some(tail),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum CiMethod {
    BcaIid,
    MovingBlock { block_len: Option<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    /// Block length actually used (moving-block only).
    pub block_len: Option<usize>,
    pub replicates: usize,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Quantile `q` of `sorted` with the ascending ranks in `removed` deleted.
fn quantile_without(sorted: &[f64], removed: &[usize], q: f64) -> f64 {
    let m = sorted.len() - removed.len();
    let kth = |k: usize| {
        let mut idx = k;
        for r in removed {
            if *r <= idx {
                idx += 1;
            } else {
                break;
            }
        }
        sorted[idx]
    };
    if m == 1 {
        return kth(0);
    }
    let pos = (m - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 || lo + 1 >= m {
        kth(lo.min(m - 1))
    } else {
        let a = kth(lo);
        a + frac * (kth(lo + 1) - a)
    }
}

/// Acceleration from delete-one-group jackknife values.
fn acceleration(jack: &[f64]) -> f64 {
    let m = jack.iter().sum::<f64>() / jack.len() as f64;
    let (mut s2, mut s3) = (0.0, 0.0);
    for v in jack {
        let d = m - v;
        s2 += d * d;
        s3 += d * d * d;
    }
    if s2 > 0.0 {
        s3 / (6.0 * s2.powf(1.5))
    } else {
        0.0
    }
}

/// BCa endpoints at coverage `level` from replicates, the point estimate and
/// the acceleration. With zero bias and zero acceleration this is the
/// percentile interval.
pub fn bca_from_replicates(theta: f64, reps: &[f64], a: f64, level: f64) -> (f64, f64) {
    let b = reps.len() as f64;
    let sorted = sorted_copy(reps);
    let less = reps.iter().filter(|r| **r < theta).count() as f64;
    let equal = reps.iter().filter(|r| **r == theta).count() as f64;
    let prop = ((less + 0.5 * equal) / b).clamp(0.5 / b, 1.0 - 0.5 / b);
    let z0 = normal_ppf(prop);
    let adjust = |alpha: f64| {
        let z = z0 + normal_ppf(alpha);
        let den = 1.0 - a * z;
        if den <= 0.0 {
            if alpha < 0.5 {
                0.0
            } else {
                1.0
            }
        } else {
            normal_cdf(z0 + z / den)
        }
    };
    let tail = 0.5 * (1.0 - level);
    (quantile_sorted(&sorted, adjust(tail)), quantile_sorted(&sorted, adjust(1.0 - tail)))
}

/// Smallest lag whose sample autocorrelation falls inside `±2/√n`, clamped
/// to `[10, n/50]`.
pub fn auto_block_length(x: &[f64]) -> Result<usize> {
    let n = x.len();
    let upper = (n / 50).max(10);
    let max_lag = upper.min(n.saturating_sub(1));
    if max_lag == 0 {
        return Err(Error::invalid("series too short for block selection"));
    }
    let band = 2.0 / (n as f64).sqrt();
    let acf = match serial_diagnostics(x, max_lag) {
        Ok(d) => d.acf,
        Err(Error::DegenerateSample) => return Ok(10.min(upper)),
        Err(e) => return Err(e),
    };
    let lag = (1..=max_lag).find(|k| acf[*k].abs() < band).unwrap_or(upper);
    Ok(lag.clamp(10, upper))
}

/// `level` BCa interval for the `(1−p)`-quantile.
///
/// `BcaIid` resamples points. Because the resample is monotone in the drawn
/// uniforms, the two order statistics the quantile needs are drawn directly
/// from their Beta laws, which is exact and O(1) per replicate.
/// `MovingBlock` resamples overlapping blocks of length `L` (auto when not
/// given) from the time-ordered series; its acceleration uses a
/// delete-one-block jackknife.
pub fn bootstrap_ci(x: &[f64], p: f64, method: CiMethod, b: usize, seed: u64, level: f64) -> Result<Interval> {
    if b < MIN_REPLICATES {
        return Err(Error::InsufficientReplicates { min: MIN_REPLICATES, got: b });
    }
    check_prob(p)?;
    check_prob(level)?;
    let n = x.len();
    if n < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 residuals"));
    }
    let q = 1.0 - p;
    let sorted = sorted_copy(x);
    let theta = quantile_sorted(&sorted, q);
    match method {
        CiMethod::BcaIid => {
            let pos = (n - 1) as f64 * q;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            // k-th smallest of n uniforms is Beta(k, n−k+1); the next one
            // sits at U_(k) + (1 − U_(k))·Beta(1, n−k)
            let k = lo + 1;
            let first = Beta::new(k as f64, (n - k + 1) as f64).map_err(|e| Error::invalid(e.to_string()))?;
            let next = if k < n {
                Some(Beta::new(1.0, (n - k) as f64).map_err(|e| Error::invalid(e.to_string()))?)
            } else {
                None
            };
            let pick = |u: f64| sorted[((u * n as f64) as usize).min(n - 1)];
            let reps: Vec<f64> = (0..b)
                .into_par_iter()
                .map(|r| {
                    let mut rng = stream_rng(seed, "fm-bca", r as u64);
                    let u = first.sample(&mut rng);
                    let a = pick(u);
                    match next {
                        Some(nb) if frac > 0.0 => {
                            let v = u + (1.0 - u) * nb.sample(&mut rng);
                            a + frac * (pick(v) - a)
                        }
                        _ => a,
                    }
                })
                .collect();
            let jack: Vec<f64> = (0..n).map(|j| quantile_without(&sorted, &[j], q)).collect();
            let (lo, hi) = bca_from_replicates(theta, &reps, acceleration(&jack), level);
            Ok(Interval {
                lo,
                hi,
                block_len: None,
                replicates: b,
            })
        }
        CiMethod::MovingBlock { block_len } => {
            let l = match block_len {
                Some(l) => l,
                None => auto_block_length(x)?,
            };
            if l == 0 || 2 * l > n {
                return Err(Error::invalid(format!("block length {l} does not fit {n} residuals")));
            }
            let reps: Vec<f64> = (0..b)
                .into_par_iter()
                .map(|r| {
                    let mut rng = stream_rng(seed, "fm-block", r as u64);
                    let mut buf = Vec::with_capacity(n + l);
                    while buf.len() < n {
                        let s = rng.gen_range(0..=n - l);
                        buf.extend_from_slice(&x[s..s + l]);
                    }
                    buf.truncate(n);
                    quantile_select(&mut buf, q)
                })
                .collect();
            // ranks of each position in the sorted order
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|a, c| x[*a].total_cmp(&x[*c]));
            let mut rank = vec![0usize; n];
            for (r, i) in order.iter().enumerate() {
                rank[*i] = r;
            }
            let jack: Vec<f64> = (0..n / l)
                .map(|blk| {
                    let mut removed: Vec<usize> = rank[blk * l..(blk + 1) * l].to_vec();
                    removed.sort_unstable();
                    quantile_without(&sorted, &removed, q)
                })
                .collect();
            let (lo, hi) = bca_from_replicates(theta, &reps, acceleration(&jack), level);
            Ok(Interval {
                lo,
                hi,
                block_len: Some(l),
                replicates: b,
            })
        }
    }
}

/// Percentile interval for the mixture-tail quantile: each replicate draws
/// `n` points from the fitted mixture, refits it from the fitted parameters
/// and re-solves the quantile. Failed refits are skipped.
pub fn parametric_gmm_ci(
    gmm: &DistFamily,
    n: usize,
    p: f64,
    b: usize,
    seed: u64,
    level: f64,
    opts: &GmmOptions,
) -> Result<Interval> {
    if b < MIN_REPLICATES {
        return Err(Error::InsufficientReplicates { min: MIN_REPLICATES, got: b });
    }
    check_prob(p)?;
    check_prob(level)?;
    let reps: Vec<f64> = (0..b)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = stream_rng(seed, "fm-parametric", r as u64);
            let sample: Vec<f64> = (0..n).map(|_| gmm.sample(&mut rng)).collect();
            let fit = refit_gmm_warm(&sample, gmm, opts).ok()?;
            gmm_tail_quantile(&fit.family, 1.0 - p).ok()
        })
        .collect();
    if reps.len() < MIN_REPLICATES {
        return Err(Error::InsufficientReplicates { min: MIN_REPLICATES, got: reps.len() });
    }
    let sorted = sorted_copy(&reps);
    let tail = 0.5 * (1.0 - level);
    Ok(Interval {
        lo: quantile_sorted(&sorted, tail),
        hi: quantile_sorted(&sorted, 1.0 - tail),
        block_len: None,
        replicates: reps.len(),
    })
}

/// `1 − (1/N)·#{PL_true > PL_pred + FM}`.
pub fn achieved_pdr(true_pl: &[f64], pred_pl: &[f64], fm_db: f64) -> Result<f64> {
    if true_pl.len() != pred_pl.len() || true_pl.is_empty() {
        return Err(Error::invalid("need equal-length, non-empty test vectors"));
    }
    let out = true_pl.iter().zip(pred_pl).filter(|(t, p)| **t > **p + fm_db).count();
    Ok(1.0 - out as f64 / true_pl.len() as f64)
}

/// Same as [`achieved_pdr`] from residuals `true − pred`.
pub fn achieved_pdr_residuals(residuals: &[f64], fm_db: f64) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::EmptySample);
    }
    let out = residuals.iter().filter(|e| **e > fm_db).count();
    Ok(1.0 - out as f64 / residuals.len() as f64)
}

/// Residual values ordered by device, then time.
pub fn time_ordered(residuals: &[OofResidual]) -> Vec<f64> {
    let mut v: Vec<&OofResidual> = residuals.iter().collect();
    v.sort_by(|a, b| a.device_id.cmp(&b.device_id).then(a.timestamp.total_cmp(&b.timestamp)));
    v.iter().map(|r| r.residual_db).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadeMarginReport {
    pub model: String,
    pub p: f64,
    pub estimator: FmEstimator,
    pub fm_db: f64,
    /// Interval for the winning estimator.
    pub ci: Option<Interval>,
    pub empirical_db: f64,
    pub gmm_tail_db: Option<f64>,
    pub achieved_pdr: Option<f64>,
    /// Sample SD of the per-fold prescriptions.
    pub fold_sd_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub targets: Vec<f64>,
    /// Bootstrap replicates; `None` skips intervals.
    pub replicates: Option<usize>,
    pub method: CiMethod,
    pub level: f64,
    pub seed: u64,
    pub gmm: GmmOptions,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            targets: vec![0.05, 0.02, 0.01],
            replicates: Some(1000),
            method: CiMethod::MovingBlock { block_len: None },
            level: 0.95,
            seed: 0,
            // refits start at the pooled fit, so a looser stop suffices
            gmm: GmmOptions {
                tol: 1e-6,
                max_iter: 200,
                ..GmmOptions::default()
            },
        }
    }
}

/// Spread of the prescription across CV folds. Tail targets refit the
/// mixture on each fold, warm-started from the pooled fit.
pub fn fold_dispersion(residuals: &[OofResidual], gmm: Option<&DistFamily>, p: f64, opts: &GmmOptions) -> Result<Option<f64>> {
    let mut by_fold: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in residuals {
        by_fold.entry(r.fold).or_default().push(r.residual_db);
    }
    if by_fold.len() < 2 {
        return Ok(None);
    }
    let mut fms = Vec::with_capacity(by_fold.len());
    for vals in by_fold.values() {
        let local = match gmm {
            Some(g) if p <= TAIL_SWITCH => Some(refit_gmm_warm(vals, g, opts)?.family),
            _ => None,
        };
        fms.push(prescribe_fm(vals, local.as_ref().or(gmm), p)?.fm_db);
    }
    Ok(Some(std_dev(&fms, 1)))
}

/// Prescriptions for every target with intervals, fold dispersion and,
/// when hold-out residuals are given, the achieved delivery ratio.
pub fn calibrate(
    model: &str,
    cv: &[OofResidual],
    gmm: Option<&DistFamily>,
    holdout: Option<&[f64]>,
    opts: &CalibrationOptions,
) -> Result<Vec<FadeMarginReport>> {
    let series = time_ordered(cv);
    let mut targets = opts.targets.clone();
    targets.sort_by(|a, b| b.total_cmp(a));
    let mut out = Vec::with_capacity(targets.len());
    for (i, &p) in targets.iter().enumerate() {
        let pres = prescribe_fm(&series, gmm, p)?;
        let seed = crate::rng::derive_seed(opts.seed, "fm-target", i as u64);
        let ci = match opts.replicates {
            None => None,
            Some(b) => Some(match (pres.estimator, gmm) {
                (FmEstimator::GmmTail, Some(g)) => parametric_gmm_ci(g, series.len(), p, b, seed, opts.level, &opts.gmm)?,
                _ => bootstrap_ci(&series, p, opts.method, b, seed, opts.level)?,
            }),
        };
        let pdr = holdout.map(|h| achieved_pdr_residuals(h, pres.fm_db)).transpose()?;
        out.push(FadeMarginReport {
            model: model.to_string(),
            p,
            estimator: pres.estimator,
            fm_db: pres.fm_db,
            ci,
            empirical_db: pres.empirical_db,
            gmm_tail_db: pres.gmm_tail_db,
            achieved_pdr: pdr,
            fold_sd_db: fold_dispersion(cv, gmm, p, &opts.gmm)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub estimator: String,
    pub p_target: Option<f64>,
    pub fm_db: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub pdr: f64,
}

/// Hold-out delivery ratio of each prescription plus a fixed heuristic
/// margin row.
pub fn pdr_sweep(reports: &[FadeMarginReport], holdout: &[f64], heuristic_fm_db: Option<f64>) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(reports.len() + 1);
    for r in reports {
        rows.push(SweepRow {
            model: r.model.clone(),
            estimator: r.estimator.as_str().to_string(),
            p_target: Some(r.p),
            fm_db: r.fm_db,
            ci_lo: r.ci.map(|c| c.lo),
            ci_hi: r.ci.map(|c| c.hi),
            pdr: achieved_pdr_residuals(holdout, r.fm_db)?,
        });
    }
    if let Some(h) = heuristic_fm_db {
        rows.push(SweepRow {
            model: reports.first().map(|r| r.model.clone()).unwrap_or_default(),
            estimator: "heuristic".to_string(),
            p_target: None,
            fm_db: h,
            ci_lo: None,
            ci_hi: None,
            pdr: achieved_pdr_residuals(holdout, h)?,
        });
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "estimator", "fm_db", "pdr", "p_target", "ci_lo", "ci_hi"])?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.estimator.clone(),
            format!("{:?}", r.fm_db),
            format!("{:?}", r.pdr),
            opt(r.p_target),
            opt(r.ci_lo),
            opt(r.ci_hi),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_csv<W: Write>(reports: &[FadeMarginReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "model",
        "p",
        "estimator",
        "fm_db",
        "ci_lo",
        "ci_hi",
        "empirical_db",
        "gmm_tail_db",
        "achieved_pdr",
        "fold_sd_db",
    ])?;
    for r in reports {
        w.write_record([
            r.model.clone(),
            format!("{:?}", r.p),
            r.estimator.as_str().to_string(),
            format!("{:.2}", r.fm_db),
            r.ci.map(|c| format!("{:.2}", c.lo)).unwrap_or_default(),
            r.ci.map(|c| format!("{:.2}", c.hi)).unwrap_or_default(),
            format!("{:.2}", r.empirical_db),
            r.gmm_tail_db.map(|v| format!("{v:.2}")).unwrap_or_default(),
            r.achieved_pdr.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.fold_sd_db.map(|v| format!("{v:.2}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

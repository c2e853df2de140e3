//! Parametric laws for out-of-fold residuals: maximum-likelihood fits,
//! Gaussian mixtures by EM, information criteria, KS distance and the
//! BIC-then-KS-then-parsimony selection rule.

use std::fmt;
use std::io::Write;

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::optim;
use crate::rng::{stream_rng, Rng};
use crate::stats::{
    chi2_sf, log_normal_cdf, mad, mean, median, normal_cdf, normal_ppf, quantile_sorted, sorted_copy,
    student_t_cdf, student_t_ppf, LN_SQRT_2PI,
};

/// A fitted (or hand-specified) residual law. Mixture means are ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DistFamily {
    Normal { mu: f64, sigma: f64 },
    SkewNormal { xi: f64, omega: f64, alpha: f64 },
    StudentT { nu: f64, loc: f64, scale: f64 },
    Cauchy { loc: f64, scale: f64 },
    Gmm { weights: Vec<f64>, means: Vec<f64>, sds: Vec<f64> },
}

/// Candidate family to fit; also the final tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Normal,
    SkewNormal,
    StudentT,
    Cauchy,
    Gmm(usize),
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FamilyKind::Normal => write!(f, "Normal"),
            FamilyKind::SkewNormal => write!(f, "Skew-Normal"),
            FamilyKind::StudentT => write!(f, "Student-t"),
            FamilyKind::Cauchy => write!(f, "Cauchy"),
            FamilyKind::Gmm(k) => write!(f, "GMM (K={k})"),
        }
    }
}

/// Owen's T function `T(h, a)`.
pub fn owens_t(h: f64, a: f64) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    if a < 0.0 {
        return -owens_t(h, -a);
    }
    let h = h.abs();
    if a > 1.0 {
        // T(h,a) + T(ah,1/a) = ½(Q(h) + Q(ah)) − Q(h)Q(ah) with Q the normal sf
        let (q1, q2) = (crate::stats::normal_sf(h), crate::stats::normal_sf(a * h));
        return 0.5 * (q1 + q2) - q1 * q2 - owens_t(a * h, 1.0 / a);
    }
    // T(h,a) = (1/2π) ∫_0^{atan a} exp(−h²/(2cos²θ)) dθ
    thread_local! {
        static GL: (Vec<f64>, Vec<f64>) = crate::stats::gauss_legendre(24);
    }
    let top = a.atan();
    let panels = 6;
    let width = top / panels as f64;
    let hh = 0.5 * h * h;
    GL.with(|(x, w)| {
        let mut s = 0.0;
        for p in 0..panels {
            let mid = width * (p as f64 + 0.5);
            for (xi, wi) in x.iter().zip(w) {
                let th = mid + 0.5 * width * xi;
                let c = th.cos();
                s += wi * (-hh / (c * c)).exp();
            }
        }
        s * 0.5 * width / (2.0 * std::f64::consts::PI)
    })
}

fn bisect_quantile<F: Fn(f64) -> f64>(cdf: F, p: f64, center: f64, spread: f64) -> f64 {
    let spread = if spread > 0.0 && spread.is_finite() { spread } else { 1.0 };
    let mut lo = center - spread;
    let mut hi = center + spread;
    let mut step = spread;
    while cdf(lo) > p {
        step *= 2.0;
        lo = center - step;
        if !lo.is_finite() {
            return f64::NEG_INFINITY;
        }
    }
    step = spread;
    while cdf(hi) < p {
        step *= 2.0;
        hi = center + step;
        if !hi.is_finite() {
            return f64::INFINITY;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl DistFamily {
    pub fn kind(&self) -> FamilyKind {
        match self {
            DistFamily::Normal { .. } => FamilyKind::Normal,
            DistFamily::SkewNormal { .. } => FamilyKind::SkewNormal,
            DistFamily::StudentT { .. } => FamilyKind::StudentT,
            DistFamily::Cauchy { .. } => FamilyKind::Cauchy,
            DistFamily::Gmm { weights, .. } => FamilyKind::Gmm(weights.len()),
        }
    }

    pub fn k_params(&self) -> usize {
        match self {
            DistFamily::Normal { .. } | DistFamily::Cauchy { .. } => 2,
            DistFamily::SkewNormal { .. } | DistFamily::StudentT { .. } => 3,
            DistFamily::Gmm { weights, .. } => 3 * weights.len() - 1,
        }
    }

    pub fn logpdf(&self, x: f64) -> f64 {
        match self {
            DistFamily::Normal { mu, sigma } => {
                let z = (x - mu) / sigma;
                -0.5 * z * z - LN_SQRT_2PI - sigma.ln()
            }
            DistFamily::SkewNormal { xi, omega, alpha } => {
                let z = (x - xi) / omega;
                std::f64::consts::LN_2 - omega.ln() - 0.5 * z * z - LN_SQRT_2PI + log_normal_cdf(alpha * z)
            }
            DistFamily::StudentT { nu, loc, scale } => {
                let z = (x - loc) / scale;
                ln_gamma(0.5 * (nu + 1.0))
                    - ln_gamma(0.5 * nu)
                    - 0.5 * (nu * std::f64::consts::PI).ln()
                    - scale.ln()
                    - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p()
            }
            DistFamily::Cauchy { loc, scale } => {
                let z = (x - loc) / scale;
                -std::f64::consts::PI.ln() - scale.ln() - (z * z).ln_1p()
            }
            DistFamily::Gmm { weights, means, sds } => {
                let terms: Vec<f64> = (0..weights.len())
                    .map(|k| {
                        let z = (x - means[k]) / sds[k];
                        weights[k].ln() - 0.5 * z * z - LN_SQRT_2PI - sds[k].ln()
                    })
                    .collect();
                log_sum_exp(&terms)
            }
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.logpdf(x).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            DistFamily::Normal { mu, sigma } => normal_cdf((x - mu) / sigma),
            DistFamily::SkewNormal { xi, omega, alpha } => {
                let z = (x - xi) / omega;
                (normal_cdf(z) - 2.0 * owens_t(z, *alpha)).clamp(0.0, 1.0)
            }
            DistFamily::StudentT { nu, loc, scale } => student_t_cdf((x - loc) / scale, *nu),
            DistFamily::Cauchy { loc, scale } => 0.5 + ((x - loc) / scale).atan() / std::f64::consts::PI,
            DistFamily::Gmm { weights, means, sds } => (0..weights.len())
                .map(|k| weights[k] * normal_cdf((x - means[k]) / sds[k]))
                .sum::<f64>()
                .clamp(0.0, 1.0),
        }
    }

    /// Upper tail `P(X > x)`, computed without cancellation where possible.
    pub fn sf(&self, x: f64) -> f64 {
        match self {
            DistFamily::Normal { mu, sigma } => crate::stats::normal_sf((x - mu) / sigma),
            DistFamily::StudentT { nu, loc, scale } => student_t_cdf(-(x - loc) / scale, *nu),
            DistFamily::Gmm { weights, means, sds } => (0..weights.len())
                .map(|k| weights[k] * crate::stats::normal_sf((x - means[k]) / sds[k]))
                .sum(),
            _ => 1.0 - self.cdf(x),
        }
    }

    pub fn ppf(&self, p: f64) -> f64 {
        match self {
            DistFamily::Normal { mu, sigma } => mu + sigma * normal_ppf(p),
            DistFamily::StudentT { nu, loc, scale } => loc + scale * student_t_ppf(p, *nu),
            DistFamily::Cauchy { loc, scale } => loc + scale * (std::f64::consts::PI * (p - 0.5)).tan(),
            DistFamily::SkewNormal { xi, omega, .. } => bisect_quantile(|x| self.cdf(x), p, *xi, 3.0 * omega),
            DistFamily::Gmm { weights, means, sds } => {
                let m: f64 = (0..weights.len()).map(|k| weights[k] * means[k]).sum();
                let s = sds.iter().copied().fold(0.0, f64::max)
                    + means.iter().map(|v| (v - m).abs()).fold(0.0, f64::max);
                bisect_quantile(|x| self.cdf(x), p, m, 3.0 * s)
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        match self {
            DistFamily::Normal { mu, sigma } => mu + sigma * z,
            DistFamily::SkewNormal { xi, omega, alpha } => {
                let delta = alpha / (1.0 + alpha * alpha).sqrt();
                let u: f64 = rng.sample(StandardNormal);
                xi + omega * (delta * z.abs() + (1.0 - delta * delta).sqrt() * u)
            }
            DistFamily::StudentT { nu, loc, scale } => {
                let t = rand_distr::StudentT::new(*nu).expect("positive dof");
                loc + scale * t.sample(rng)
            }
            DistFamily::Cauchy { loc, scale } => {
                let u: f64 = rng.gen_range(0.0..1.0);
                loc + scale * (std::f64::consts::PI * (u - 0.5)).tan()
            }
            DistFamily::Gmm { weights, means, sds } => {
                let u: f64 = rng.gen_range(0.0..1.0);
                let mut acc = 0.0;
                let mut k = weights.len() - 1;
                for (j, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        k = j;
                        break;
                    }
                }
                means[k] + sds[k] * z
            }
        }
    }

    pub fn loglik(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| self.logpdf(*v)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualFit {
    pub family: DistFamily,
    pub loglik: f64,
    pub k_params: usize,
    pub n: usize,
    pub aic: f64,
    pub bic: f64,
    pub ks: f64,
}

impl ResidualFit {
    pub fn new(family: DistFamily, x: &[f64]) -> ResidualFit {
        let loglik = family.loglik(x);
        let k = family.k_params();
        let n = x.len();
        let ks = ks_statistic(x, |v| family.cdf(v));
        ResidualFit {
            k_params: k,
            n,
            aic: 2.0 * k as f64 - 2.0 * loglik,
            bic: k as f64 * (n as f64).ln() - 2.0 * loglik,
            ks,
            loglik,
            family,
        }
    }

    pub fn kind(&self) -> FamilyKind {
        self.family.kind()
    }
}

/// `max_i max(|i/n − F(x_(i))|, |(i−1)/n − F(x_(i))|)`.
pub fn ks_statistic<F: Fn(f64) -> f64>(x: &[f64], cdf: F) -> f64 {
    let s = sorted_copy(x);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, v)| {
            let f = cdf(*v);
            ((i as f64 + 1.0) / n - f).abs().max((i as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn check_sample(x: &[f64], min: usize) -> Result<()> {
    if x.len() < min {
        return Err(Error::invalid(format!("need at least {min} residuals (got {})", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("residuals must be finite"));
    }
    Ok(())
}

/// Mean negative log-likelihood and gradient in the unconstrained
/// parametrization, on standardized data.
fn skew_normal_objective(z: &[f64], th: &DVector<f64>) -> (f64, DVector<f64>) {
    let (xi, lw, alpha) = (th[0], th[1], th[2]);
    let w = lw.exp();
    let n = z.len() as f64;
    let (mut f, mut g0, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0);
    for &x in z {
        let u = (x - xi) / w;
        let lc = log_normal_cdf(alpha * u);
        // φ(αu)/Φ(αu) computed in log space
        let mills = (-0.5 * (alpha * u).powi(2) - LN_SQRT_2PI - lc).exp();
        f -= std::f64::consts::LN_2 - lw - 0.5 * u * u - LN_SQRT_2PI + lc;
        g0 -= (u - alpha * mills) / w;
        g1 -= -1.0 + u * u - alpha * u * mills;
        g2 -= u * mills;
    }
    (f / n, DVector::from_vec(vec![g0 / n, g1 / n, g2 / n]))
}

fn student_t_objective(z: &[f64], th: &DVector<f64>) -> (f64, DVector<f64>) {
    let (loc, ls, lnu) = (th[0], th[1], th[2]);
    let s = ls.exp();
    let nu = lnu.exp();
    let n = z.len() as f64;
    let c = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln();
    let dc = 0.5 * (digamma(0.5 * (nu + 1.0)) - digamma(0.5 * nu)) - 0.5 / nu;
    let (mut f, mut g0, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0);
    for &x in z {
        let u = (x - loc) / s;
        let q = u * u / nu;
        let l1p = q.ln_1p();
        f -= c - ls - 0.5 * (nu + 1.0) * l1p;
        g0 -= (nu + 1.0) * u / (s * (nu + u * u));
        g1 -= -1.0 + (nu + 1.0) * u * u / (nu + u * u);
        g2 -= nu * (dc - 0.5 * l1p + 0.5 * (nu + 1.0) * u * u / (nu * (nu + u * u)));
    }
    (f / n, DVector::from_vec(vec![g0 / n, g1 / n, g2 / n]))
}

fn cauchy_objective(z: &[f64], th: &DVector<f64>) -> (f64, DVector<f64>) {
    let (loc, ls) = (th[0], th[1]);
    let s = ls.exp();
    let n = z.len() as f64;
    let (mut f, mut g0, mut g1) = (0.0, 0.0, 0.0);
    for &x in z {
        let u = (x - loc) / s;
        f -= -std::f64::consts::PI.ln() - ls - (u * u).ln_1p();
        g0 -= 2.0 * u / (s * (1.0 + u * u));
        g1 -= -1.0 + 2.0 * u * u / (1.0 + u * u);
    }
    (f / n, DVector::from_vec(vec![g0 / n, g1 / n]))
}

const GTOL: f64 = 1e-8;

fn run_bfgs<F>(name: &str, f: F, x0: Vec<f64>, lo: &[f64], hi: &[f64]) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    optim::minimize(f, DVector::from_vec(x0), lo, hi, GTOL, 1000)
        .map(|o| o.x)
        .ok_or_else(|| Error::OptimizerDiverged(name.to_string()))
}

/// Maximum-likelihood fit of one family. Mixtures use [`fit_gmm`] with
/// default options and seed 0.
pub fn fit_distribution(x: &[f64], kind: FamilyKind) -> Result<ResidualFit> {
    check_sample(x, 10)?;
    let m = mean(x);
    let sd = crate::stats::std_dev(x, 0);
    if !(sd > 0.0) {
        return Err(Error::DegenerateSample);
    }
    // optimize on z = (x − m)/sd, then map back
    let z: Vec<f64> = x.iter().map(|v| (v - m) / sd).collect();
    let family = match kind {
        FamilyKind::Normal => DistFamily::Normal { mu: m, sigma: sd },
        FamilyKind::SkewNormal => {
            let g = z.iter().map(|v| v.powi(3)).sum::<f64>() / z.len() as f64;
            let g = g.clamp(-0.99, 0.99);
            let ga = g.abs().powf(2.0 / 3.0);
            let c = ((4.0 - std::f64::consts::PI) / 2.0).powf(2.0 / 3.0);
            let delta = (std::f64::consts::FRAC_PI_2 * ga / (ga + c)).sqrt().min(0.99) * g.signum();
            let alpha0 = delta / (1.0 - delta * delta).sqrt();
            let w0 = 1.0 / (1.0 - 2.0 * delta * delta / std::f64::consts::PI).sqrt();
            let xi0 = -w0 * delta * (2.0 / std::f64::consts::PI).sqrt();
            let th = run_bfgs(
                "skew-normal",
                |t| skew_normal_objective(&z, t),
                vec![xi0, w0.ln(), alpha0],
                &[-50.0, (1e-4f64).ln(), -100.0],
                &[50.0, (1e3f64).ln(), 100.0],
            )?;
            DistFamily::SkewNormal {
                xi: m + sd * th[0],
                omega: sd * th[1].exp(),
                alpha: th[2],
            }
        }
        FamilyKind::StudentT => {
            let med = median(&z);
            let s0 = (1.4826 * mad(&z)).max(1e-3);
            let th = run_bfgs(
                "student-t",
                |t| student_t_objective(&z, t),
                vec![med, s0.ln(), 5f64.ln()],
                &[-50.0, (1e-4f64).ln(), (0.1f64).ln()],
                &[50.0, (1e3f64).ln(), (1e6f64).ln()],
            )?;
            DistFamily::StudentT {
                nu: th[2].exp(),
                loc: m + sd * th[0],
                scale: sd * th[1].exp(),
            }
        }
        FamilyKind::Cauchy => {
            let s = sorted_copy(&z);
            let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
            let th = run_bfgs(
                "cauchy",
                |t| cauchy_objective(&z, t),
                vec![median(&z), (0.5 * iqr).max(1e-3).ln()],
                &[-50.0, (1e-4f64).ln()],
                &[50.0, (1e3f64).ln()],
            )?;
            DistFamily::Cauchy {
                loc: m + sd * th[0],
                scale: sd * th[1].exp(),
            }
        }
        FamilyKind::Gmm(k) => {
            return fit_gmm(
                x,
                &GmmOptions {
                    k,
                    ..GmmOptions::default()
                },
            )
        }
    };
    let fit = ResidualFit::new(family, x);
    if !fit.loglik.is_finite() {
        return Err(Error::OptimizerDiverged(kind.to_string()));
    }
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub k: usize,
    pub n_init: usize,
    /// Lower bound on each component variance (dB²).
    pub var_floor: f64,
    pub seed: u64,
    /// Relative log-likelihood change that stops EM.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            k: 3,
            n_init: 8,
            var_floor: 1e-3,
            seed: 0,
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

const MIN_WEIGHT: f64 = 1e-4;

#[derive(Debug, Clone)]
pub(crate) struct EmRun {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    pub loglik: f64,
    /// Log-likelihood after each E-step.
    #[cfg_attr(not(test), allow(dead_code))]
    pub trace: Vec<f64>,
    /// Indices into `trace` where a component was dropped.
    #[cfg_attr(not(test), allow(dead_code))]
    pub drops: Vec<usize>,
}

/// EM from the given starting point.
pub(crate) fn em(
    x: &[f64],
    mut weights: Vec<f64>,
    mut means: Vec<f64>,
    mut vars: Vec<f64>,
    opts: &GmmOptions,
) -> Result<EmRun> {
    let n = x.len();
    let mut resp = vec![0.0; n * weights.len()];
    let mut trace = Vec::new();
    let mut drops = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    let mut lterms = vec![0.0; weights.len()];
    for _ in 0..opts.max_iter {
        let k = weights.len();
        resp.resize(n * k, 0.0);
        lterms.resize(k, 0.0);
        // E-step
        let consts: Vec<f64> = (0..k).map(|j| weights[j].ln() - LN_SQRT_2PI - 0.5 * vars[j].ln()).collect();
        let inv_vars: Vec<f64> = vars.iter().map(|v| 1.0 / v).collect();
        let mut ll = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            let mut top = f64::NEG_INFINITY;
            for j in 0..k {
                lterms[j] = consts[j] - 0.5 * (xi - means[j]).powi(2) * inv_vars[j];
                top = top.max(lterms[j]);
            }
            let row = &mut resp[i * k..(i + 1) * k];
            let mut total = 0.0;
            for j in 0..k {
                row[j] = (lterms[j] - top).exp();
                total += row[j];
            }
            ll += top + total.ln();
            let inv = 1.0 / total;
            row.iter_mut().for_each(|r| *r *= inv);
        }
        if !ll.is_finite() {
            return Err(Error::EmNotConverged);
        }
        trace.push(ll);
        if (ll - prev).abs() <= opts.tol * ll.abs() {
            prev = ll;
            break;
        }
        prev = ll;
        // M-step
        let mut nks = vec![0.0; k];
        let mut s1s = vec![0.0; k];
        for (i, &xi) in x.iter().enumerate() {
            for j in 0..k {
                let r = resp[i * k + j];
                nks[j] += r;
                s1s[j] += r * xi;
            }
        }
        let mus: Vec<f64> = (0..k).map(|j| if nks[j] > 0.0 { s1s[j] / nks[j] } else { means[j] }).collect();
        let mut s2s = vec![0.0; k];
        for (i, &xi) in x.iter().enumerate() {
            for j in 0..k {
                s2s[j] += resp[i * k + j] * (xi - mus[j]).powi(2);
            }
        }
        for j in 0..k {
            let (nk, mu, s2) = (nks[j], mus[j], s2s[j]);
            weights[j] = nk / n as f64;
            means[j] = mu;
            vars[j] = if nk > 0.0 { (s2 / nk).max(opts.var_floor) } else { vars[j] };
        }
        if k > 1 && weights.iter().any(|w| *w < MIN_WEIGHT) {
            let keep: Vec<usize> = (0..k).filter(|&j| weights[j] >= MIN_WEIGHT).collect();
            weights = keep.iter().map(|&j| weights[j]).collect();
            means = keep.iter().map(|&j| means[j]).collect();
            vars = keep.iter().map(|&j| vars[j]).collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            drops.push(trace.len());
            prev = f64::NEG_INFINITY;
        }
    }
    Ok(EmRun {
        weights,
        means,
        vars,
        loglik: prev,
        trace,
        drops,
    })
}

fn finish_gmm(x: &[f64], run: EmRun) -> ResidualFit {
    let mut order: Vec<usize> = (0..run.means.len()).collect();
    order.sort_by(|&a, &b| run.means[a].total_cmp(&run.means[b]));
    let family = DistFamily::Gmm {
        weights: order.iter().map(|&j| run.weights[j]).collect(),
        means: order.iter().map(|&j| run.means[j]).collect(),
        sds: order.iter().map(|&j| run.vars[j].sqrt()).collect(),
    };
    ResidualFit::new(family, x)
}

/// Gaussian mixture by EM, best of `n_init` seeded starts.
///
/// Starts place the means at the `(j + 0.5)/K` sample quantiles; every start
/// after the first adds seeded jitter. Weights start equal and variances at
/// the pooled sample variance.
pub fn fit_gmm(x: &[f64], opts: &GmmOptions) -> Result<ResidualFit> {
    if !(1..=5).contains(&opts.k) {
        return Err(Error::invalid(format!("K must lie in 1..=5 (got {})", opts.k)));
    }
    if opts.n_init == 0 {
        return Err(Error::invalid("n_init must be at least 1"));
    }
    check_sample(x, 10)?;
    let var = crate::stats::variance(x, 0);
    if !(var > 0.0) {
        return Err(Error::DegenerateSample);
    }
    let sd = var.sqrt();
    let sorted = sorted_copy(x);
    let k = opts.k;
    let anchors: Vec<f64> = (0..k).map(|j| quantile_sorted(&sorted, (j as f64 + 0.5) / k as f64)).collect();
    let runs: Vec<Result<EmRun>> = (0..opts.n_init)
        .into_par_iter()
        .map(|init| {
            let mut rng = stream_rng(opts.seed, "gmm-init", init as u64);
            let means: Vec<f64> = anchors
                .iter()
                .map(|a| {
                    if init == 0 {
                        *a
                    } else {
                        a + 0.5 * sd * rng.sample::<f64, _>(StandardNormal)
                    }
                })
                .collect();
            em(x, vec![1.0 / k as f64; k], means, vec![var.max(opts.var_floor); k], opts)
        })
        .collect();
    let mut best: Option<EmRun> = None;
    for r in runs {
        let r = r?;
        if best.as_ref().is_none_or(|b| r.loglik > b.loglik) {
            best = Some(r);
        }
    }
    Ok(finish_gmm(x, best.expect("n_init >= 1")))
}

/// One EM run started from an existing mixture (used by resampling loops).
pub fn refit_gmm_warm(x: &[f64], start: &DistFamily, opts: &GmmOptions) -> Result<ResidualFit> {
    let DistFamily::Gmm { weights, means, sds } = start else {
        return Err(Error::invalid("warm start requires a mixture"));
    };
    check_sample(x, 10)?;
    let vars = sds.iter().map(|s| (s * s).max(opts.var_floor)).collect();
    Ok(finish_gmm(x, em(x, weights.clone(), means.clone(), vars, opts)?))
}

/// Fits every requested family in parallel.
pub fn fit_candidates(x: &[f64], kinds: &[FamilyKind], gmm: &GmmOptions) -> Result<Vec<ResidualFit>> {
    kinds
        .par_iter()
        .map(|kind| match kind {
            FamilyKind::Gmm(k) => fit_gmm(x, &GmmOptions { k: *k, ..*gmm }),
            other => fit_distribution(x, *other),
        })
        .collect()
}

/// The five named families plus mixtures with `K = 1..=kmax`.
pub fn default_candidates(kmax: usize) -> Vec<FamilyKind> {
    let mut v = vec![FamilyKind::Normal, FamilyKind::StudentT, FamilyKind::SkewNormal, FamilyKind::Cauchy];
    v.extend((1..=kmax).map(FamilyKind::Gmm));
    v
}

/// Minimum BIC; fits within `bic_tie_tol` of it are separated by KS, and fits
/// within `ks_tie_tol` of the best KS by parameter count, then family order.
pub fn select_residual_model(fits: &[ResidualFit], bic_tie_tol: f64, ks_tie_tol: f64) -> Result<ResidualFit> {
    if fits.is_empty() {
        return Err(Error::EmptySample);
    }
    let min_bic = fits.iter().map(|f| f.bic).fold(f64::INFINITY, f64::min);
    let tier1: Vec<&ResidualFit> = fits.iter().filter(|f| f.bic - min_bic <= bic_tie_tol).collect();
    let min_ks = tier1.iter().map(|f| f.ks).fold(f64::INFINITY, f64::min);
    let tier2 = tier1.into_iter().filter(|f| f.ks - min_ks <= ks_tie_tol);
    let best = tier2
        .min_by(|a, b| {
            a.k_params
                .cmp(&b.k_params)
                .then(a.kind().cmp(&b.kind()))
                .then(a.bic.total_cmp(&b.bic))
        })
        .expect("minimum-BIC fit is in both tiers");
    Ok(best.clone())
}

/// Table of fits: family, k, log-likelihood, AIC, BIC, KS.
pub fn write_fit_table<W: Write>(fits: &[ResidualFit], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["family", "k_params", "loglik", "aic", "bic", "ks", "parameters"])?;
    for f in fits {
        w.write_record([
            f.kind().to_string(),
            f.k_params.to_string(),
            format!("{:.4}", f.loglik),
            format!("{:.4}", f.aic),
            format!("{:.4}", f.bic),
            format!("{:.6}", f.ks),
            serde_json::to_string(&f.family).map_err(|e| Error::Io(e.to_string()))?,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `(F⁻¹((i − 0.5)/n), x_(i))` pairs.
pub fn qq_points(x: &[f64], family: &DistFamily) -> Vec<(f64, f64)> {
    let s = sorted_copy(x);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, v)| (family.ppf((i as f64 + 0.5) / n), *v))
        .collect()
}

pub fn write_qq_csv<W: Write>(points: &[(f64, f64)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["theoretical_db", "empirical_db"])?;
    for (t, e) in points {
        w.write_record([format!("{t:?}"), format!("{e:?}")])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestStat {
    pub statistic: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalityTests {
    pub jarque_bera: TestStat,
    /// D'Agostino–Pearson K².
    pub dagostino: TestStat,
    pub durbin_watson: f64,
}

fn central_moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = mean(x);
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - m).powi(3)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    (m3 / m2.powf(1.5), m4 / (m2 * m2))
}

fn skew_z(b2: f64, n: f64) -> f64 {
    let y = b2 * ((n + 1.0) * (n + 3.0) / (6.0 * (n - 2.0))).sqrt();
    let beta2 = 3.0 * (n * n + 27.0 * n - 70.0) * (n + 1.0) * (n + 3.0)
        / ((n - 2.0) * (n + 5.0) * (n + 7.0) * (n + 9.0));
    let w2 = -1.0 + (2.0 * (beta2 - 1.0)).sqrt();
    let delta = 1.0 / (0.5 * w2.ln()).sqrt();
    let alpha = (2.0 / (w2 - 1.0)).sqrt();
    let y = if y == 0.0 { 1.0 } else { y };
    delta * (y / alpha + ((y / alpha).powi(2) + 1.0).sqrt()).ln()
}

fn kurtosis_z(b2: f64, n: f64) -> f64 {
    let e = 3.0 * (n - 1.0) / (n + 1.0);
    let varb2 = 24.0 * n * (n - 2.0) * (n - 3.0) / ((n + 1.0).powi(2) * (n + 3.0) * (n + 5.0));
    let x = (b2 - e) / varb2.sqrt();
    let sqrtbeta1 = 6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0))
        * (6.0 * (n + 3.0) * (n + 5.0) / (n * (n - 2.0) * (n - 3.0))).sqrt();
    let a = 6.0 + 8.0 / sqrtbeta1 * (2.0 / sqrtbeta1 + (1.0 + 4.0 / (sqrtbeta1 * sqrtbeta1)).sqrt());
    let term1 = 1.0 - 2.0 / (9.0 * a);
    let denom = 1.0 + x * (2.0 / (a - 4.0)).sqrt();
    let term2 = denom.signum() * ((1.0 - 2.0 / a) / denom.abs()).powf(1.0 / 3.0);
    (term1 - term2) / (2.0 / (9.0 * a)).sqrt()
}

pub fn durbin_watson(r: &[f64]) -> f64 {
    let num: f64 = r.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    let den: f64 = r.iter().map(|v| v * v).sum();
    num / den
}

/// Jarque–Bera, D'Agostino–Pearson and Durbin–Watson (in sequence order).
pub fn normality_tests(r: &[f64]) -> Result<NormalityTests> {
    check_sample(r, 20)?;
    let n = r.len() as f64;
    let (skew, kurt) = central_moments(r);
    if !skew.is_finite() {
        return Err(Error::DegenerateSample);
    }
    let jb = n / 6.0 * (skew * skew + (kurt - 3.0).powi(2) / 4.0);
    let k2 = skew_z(skew, n).powi(2) + kurtosis_z(kurt, n).powi(2);
    Ok(NormalityTests {
        jarque_bera: TestStat {
            statistic: jb,
            p: chi2_sf(jb, 2.0),
        },
        dagostino: TestStat {
            statistic: k2,
            p: chi2_sf(k2, 2.0),
        },
        durbin_watson: durbin_watson(r),
    })
}

/// Density of a mixture evaluated at each grid point (for overlays).
pub fn pdf_curve(family: &DistFamily, grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|x| family.pdf(*x)).collect()
}

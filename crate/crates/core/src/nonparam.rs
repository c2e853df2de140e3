//! Kernel density estimation on an FFT grid, modality diagnostics, group
//! location/scale tests and serial-correlation diagnostics.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::campaign::CampaignRecord;
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::stats::{chi2_sf, f_sf, mad, mean, median, quantile_sorted, sorted_copy, std_dev, SQRT_2PI};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityEstimate {
    pub fn step(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    pub fn integral(&self) -> f64 {
        trapezoid(&self.density, self.step())
    }

    /// Linear interpolation; zero outside the grid.
    pub fn eval(&self, x: f64) -> f64 {
        let lo = self.grid[0];
        let d = self.step();
        let pos = (x - lo) / d;
        if !(pos >= 0.0) || pos > (self.grid.len() - 1) as f64 {
            return 0.0;
        }
        let i = (pos.floor() as usize).min(self.grid.len() - 2);
        let f = pos - i as f64;
        self.density[i] * (1.0 - f) + self.density[i + 1] * f
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["grid_db", "density"])?;
        for (g, d) in self.grid.iter().zip(&self.density) {
            w.write_record([format!("{g:?}"), format!("{d:?}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn trapezoid(y: &[f64], dx: f64) -> f64 {
    if y.len() < 2 {
        return 0.0;
    }
    dx * (y.iter().sum::<f64>() - 0.5 * (y[0] + y[y.len() - 1]))
}

/// Grid `lo + i·(hi − lo)/m`, `i = 0..m` (the upper end is excluded).
fn uniform_grid(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    let d = (hi - lo) / m as f64;
    (0..m).map(|i| lo + i as f64 * d).collect()
}

/// Linear binning of `x` onto the grid starting at `lo` with spacing `d`.
fn linear_bin(x: &[f64], lo: f64, d: f64, m: usize) -> Vec<f64> {
    let mut w = vec![0.0; m];
    for &v in x {
        let pos = (v - lo) / d;
        let i = pos.floor();
        if i < 0.0 || i as usize >= m {
            continue;
        }
        let i = i as usize;
        let f = pos - i as f64;
        if i + 1 < m {
            w[i] += 1.0 - f;
            w[i + 1] += f;
        } else {
            w[i] += 1.0;
        }
    }
    w
}

/// Gaussian kernel `φ(kΔ/h)/h` at offsets `k = 0..m`.
fn kernel_offsets(m: usize, d: f64, h: f64) -> Vec<f64> {
    (0..m)
        .map(|k| {
            let z = k as f64 * d / h;
            (-0.5 * z * z).exp() / (SQRT_2PI * h)
        })
        .collect()
}

/// Linear convolution of binned weights with the symmetric kernel, via a
/// zero-padded FFT of length `2m` (no wrap-around).
fn fft_convolve(weights: &[f64], kernel: &[f64]) -> Vec<f64> {
    let m = weights.len();
    let l = 2 * m;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(l);
    let inv = planner.plan_fft_inverse(l);
    let mut a: Vec<Complex<f64>> = (0..l)
        .map(|i| Complex::new(if i < m { weights[i] } else { 0.0 }, 0.0))
        .collect();
    let mut k = vec![Complex::new(0.0, 0.0); l];
    k[0] = Complex::new(kernel[0], 0.0);
    for j in 1..m {
        k[j] = Complex::new(kernel[j], 0.0);
        k[l - j] = Complex::new(kernel[j], 0.0);
    }
    fwd.process(&mut a);
    fwd.process(&mut k);
    for (x, y) in a.iter_mut().zip(&k) {
        *x *= *y;
    }
    inv.process(&mut a);
    a[..m].iter().map(|c| (c.re / l as f64).max(0.0)).collect()
}

fn kde_on_grid(x: &[f64], h: f64, lo: f64, hi: f64, m: usize) -> DensityEstimate {
    let grid = uniform_grid(lo, hi, m);
    let d = (hi - lo) / m as f64;
    let w = linear_bin(x, lo, d, m);
    let mut density = fft_convolve(&w, &kernel_offsets(m, d, h));
    let total = trapezoid(&density, d);
    if total > 0.0 {
        density.iter_mut().for_each(|v| *v /= total);
    }
    DensityEstimate {
        grid,
        density,
        bandwidth: h,
    }
}

/// Gaussian KDE on `grid_size` points spanning `[min − pad·h, max + pad·h)`.
///
/// The sample is linearly binned onto the grid and convolved with the kernel
/// by FFT; the result is then normalized to unit trapezoid integral.
pub fn kde_fft(x: &[f64], h: f64, grid_size: usize, pad: f64) -> Result<DensityEstimate> {
    if !(h > 0.0) {
        return Err(Error::BandwidthNonPositive(h));
    }
    if x.is_empty() {
        return Err(Error::EmptySample);
    }
    if grid_size < 256 || !grid_size.is_power_of_two() {
        return Err(Error::invalid("grid_size must be a power of two >= 256"));
    }
    if !(pad >= 8.0) {
        return Err(Error::invalid("padding must be at least 8 bandwidths"));
    }
    let (mn, mx) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if !mn.is_finite() || !mx.is_finite() {
        return Err(Error::invalid("sample must be finite"));
    }
    Ok(kde_on_grid(x, h, mn - pad * h, mx + pad * h, grid_size))
}

/// Direct kernel sum over the binned weights; the FFT result must match it.
pub fn kde_binned_direct(x: &[f64], h: f64, grid_size: usize, pad: f64) -> Result<DensityEstimate> {
    let base = kde_fft(x, h, grid_size, pad)?;
    let d = base.step();
    let lo = base.grid[0];
    let w = linear_bin(x, lo, d, grid_size);
    let kern = kernel_offsets(grid_size, d, h);
    let mut density: Vec<f64> = (0..grid_size)
        .map(|i| (0..grid_size).map(|j| w[j] * kern[i.abs_diff(j)]).sum())
        .collect();
    let total = trapezoid(&density, d);
    density.iter_mut().for_each(|v| *v /= total);
    Ok(DensityEstimate { density, ..base })
}

/// `0.9·min(sd, IQR/1.34)·n^(−1/5)`; falls back to `sd` when the IQR is 0.
pub fn silverman_bandwidth(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::invalid("bandwidth needs at least 2 points"));
    }
    let sd = std_dev(x, 1);
    if !(sd > 0.0) {
        return Err(Error::DegenerateSample);
    }
    let s = sorted_copy(x);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let a = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * a * (x.len() as f64).powf(-0.2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeOptions {
    pub grid_size: usize,
    pub pad: f64,
    pub prominence_frac: f64,
}

impl Default for KdeOptions {
    fn default() -> Self {
        Self {
            grid_size: 1 << 14,
            pad: 8.0,
            prominence_frac: 0.01,
        }
    }
}

/// Bandwidth on `h_grid` maximizing the held-out log density over `folds`
/// seeded folds. Samples above `max_points` are subsampled first.
pub fn cv_loglik_bandwidth(
    x: &[f64],
    h_grid: &[f64],
    folds: usize,
    seed: u64,
    max_points: usize,
    opts: &KdeOptions,
) -> Result<f64> {
    if h_grid.is_empty() || folds < 2 {
        return Err(Error::invalid("need a non-empty grid and at least 2 folds"));
    }
    if let Some(h) = h_grid.iter().find(|h| !(**h > 0.0)) {
        return Err(Error::BandwidthNonPositive(*h));
    }
    if h_grid.len() == 1 {
        return Ok(h_grid[0]);
    }
    let mut data = x.to_vec();
    let mut rng = stream_rng(seed, "kde-cv", 0);
    data.shuffle(&mut rng);
    data.truncate(max_points.max(folds));
    if data.len() < folds {
        return Err(Error::invalid("fewer points than folds"));
    }
    let (mn, mx) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let scores: Vec<f64> = h_grid
        .par_iter()
        .map(|&h| {
            let lo = mn - opts.pad * h;
            let hi = mx + opts.pad * h;
            let mut total = 0.0;
            for f in 0..folds {
                let train: Vec<f64> = data.iter().enumerate().filter(|(i, _)| i % folds != f).map(|(_, v)| *v).collect();
                let kde = kde_on_grid(&train, h, lo, hi, opts.grid_size);
                for (i, v) in data.iter().enumerate() {
                    if i % folds == f {
                        let d = kde.eval(*v);
                        if !(d > 1e-300) {
                            return f64::NEG_INFINITY;
                        }
                        total += d.ln();
                    }
                }
            }
            total
        })
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for (h, s) in h_grid.iter().zip(scores) {
        if s.is_finite() && best.is_none_or(|(_, b)| s > b) {
            best = Some((*h, s));
        }
    }
    best.map(|(h, _)| h).ok_or(Error::AllBandwidthsDegenerate)
}

/// Peak prominences, following the usual walk-to-higher-ground definition;
/// flat peaks are reported at their midpoint.
fn peaks_with_prominence(y: &[f64]) -> Vec<(usize, f64)> {
    let n = y.len();
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if y[i - 1] < y[i] {
            let mut ahead = i + 1;
            while ahead + 1 < n && y[ahead] == y[i] {
                ahead += 1;
            }
            if y[ahead] < y[i] {
                let peak = (i + ahead - 1) / 2;
                let h = y[peak];
                let mut left_min = h;
                let mut j = peak;
                while j > 0 {
                    j -= 1;
                    if y[j] > h {
                        break;
                    }
                    left_min = left_min.min(y[j]);
                }
                let mut right_min = h;
                let mut j = peak;
                while j + 1 < n {
                    j += 1;
                    if y[j] > h {
                        break;
                    }
                    right_min = right_min.min(y[j]);
                }
                out.push((peak, h - left_min.max(right_min)));
                i = ahead;
            }
        }
        i += 1;
    }
    out
}

/// Local maxima whose prominence is at least `prominence_frac · max`.
pub fn mode_count(density: &DensityEstimate, prominence_frac: f64) -> usize {
    mode_count_values(&density.density, prominence_frac)
}

fn mode_count_values(y: &[f64], prominence_frac: f64) -> usize {
    let top = y.iter().copied().fold(0.0, f64::max);
    let thr = prominence_frac * top;
    peaks_with_prominence(y).iter().filter(|(_, p)| *p >= thr).count()
}

/// Log-spaced bandwidths `[lo, hi]` with `count` points.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
}

/// `(h, mode count)` over the bandwidth sweep.
pub fn mode_curve(x: &[f64], hs: &[f64], opts: &KdeOptions) -> Result<Vec<(f64, usize)>> {
    hs.par_iter()
        .map(|&h| Ok((h, mode_count(&kde_fft(x, h, opts.grid_size, opts.pad)?, opts.prominence_frac))))
        .collect()
}

pub fn write_mode_curve_csv<W: Write>(curve: &[(f64, usize)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bandwidth_db", "modes"])?;
    for (h, m) in curve {
        w.write_record([format!("{h:?}"), m.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Hartigan's dip statistic of a sorted sample (GCM/LCM construction).
/// The minimum attainable value is `1/(2n)`.
pub fn dip_statistic_sorted(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 || x[n - 1] == x[0] {
        return 1.0 / (2.0 * n.max(1) as f64);
    }
    // 1-based copies keep the index arithmetic of the classic algorithm
    let xs: Vec<f64> = std::iter::once(0.0).chain(x.iter().copied()).collect();
    let mut mn = vec![0usize; n + 1];
    let mut mj = vec![0usize; n + 1];
    let mut gcm = vec![0usize; n + 2];
    let mut lcm = vec![0usize; n + 2];

    mn[1] = 1;
    for j in 2..=n {
        mn[j] = j - 1;
        loop {
            let mnj = mn[j];
            let mnmnj = mn[mnj];
            if mnj == 1
                || (xs[j] - xs[mnj]) * ((mnj - mnmnj) as f64) < (xs[mnj] - xs[mnmnj]) * ((j - mnj) as f64)
            {
                break;
            }
            mn[j] = mnmnj;
        }
    }
    mj[n] = n;
    for k in (1..n).rev() {
        mj[k] = k + 1;
        loop {
            let mjk = mj[k];
            let mjmjk = mj[mjk];
            if mjk == n
                || (xs[k] - xs[mjk]) * (mjk as f64 - mjmjk as f64)
                    < (xs[mjk] - xs[mjmjk]) * (k as f64 - mjk as f64)
            {
                break;
            }
            mj[k] = mjmjk;
        }
    }

    let mut low = 1usize;
    let mut high = n;
    let mut dip = 1.0f64;
    loop {
        let mut ic = 1;
        gcm[1] = high;
        while gcm[ic] > low {
            let i = gcm[ic];
            ic += 1;
            gcm[ic] = mn[i];
        }
        let l_gcm = ic;
        ic = 1;
        lcm[1] = low;
        while lcm[ic] < high {
            let i = lcm[ic];
            ic += 1;
            lcm[ic] = mj[i];
        }
        let l_lcm = ic;

        let mut ig = 1;
        let mut ih = l_lcm;
        let mut d = 0.0f64;
        if l_gcm != 2 || l_lcm != 2 {
            let mut iv = 1;
            let mut ix = l_gcm;
            ig = 1;
            loop {
                let gcmix = gcm[ix];
                let lcmiv = lcm[iv];
                if gcmix > lcmiv {
                    let gcmi1 = gcm[ix + 1];
                    let dx = (lcmiv as f64 - gcmi1 as f64 + 1.0)
                        - (xs[lcmiv] - xs[gcmi1]) * (gcmix - gcmi1) as f64 / (xs[gcmix] - xs[gcmi1]);
                    iv += 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv - 1;
                    }
                } else {
                    let lcmiv1 = lcm[iv - 1];
                    let dx = (xs[gcmix] - xs[lcmiv1]) * (lcmiv - lcmiv1) as f64 / (xs[lcmiv] - xs[lcmiv1])
                        - (gcmix as f64 - lcmiv1 as f64 - 1.0);
                    ix -= 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv;
                    }
                }
                if ix < 1 {
                    ix = 1;
                }
                if iv > l_lcm {
                    iv = l_lcm;
                }
                if gcm[ix] == lcm[iv] {
                    break;
                }
            }
        } else {
            d = 1.0;
        }
        if d < dip {
            break;
        }

        let mut dip_l = 0.0f64;
        for j in ig..l_gcm {
            let mut max_t = 1.0f64;
            let (jb, je) = (gcm[j + 1], gcm[j]);
            if je - jb > 1 && xs[je] != xs[jb] {
                let c = (je - jb) as f64 / (xs[je] - xs[jb]);
                for jj in jb..=je {
                    let t = (jj - jb + 1) as f64 - (xs[jj] - xs[jb]) * c;
                    max_t = max_t.max(t);
                }
            }
            dip_l = dip_l.max(max_t);
        }
        let mut dip_u = 0.0f64;
        for k in ih..l_lcm {
            let mut max_t = 1.0f64;
            let (kb, ke) = (lcm[k], lcm[k + 1]);
            if ke - kb > 1 && xs[ke] != xs[kb] {
                let c = (ke - kb) as f64 / (xs[ke] - xs[kb]);
                for kk in kb..=ke {
                    let t = (xs[kk] - xs[kb]) * c - (kk as f64 - kb as f64 - 1.0);
                    max_t = max_t.max(t);
                }
            }
            dip_u = dip_u.max(max_t);
        }
        dip = dip.max(dip_u.max(dip_l));
        if low == gcm[ig] && high == lcm[ih] {
            break;
        }
        low = gcm[ig];
        high = lcm[ih];
    }
    dip / (2.0 * n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipResult {
    pub dip: f64,
    /// Share of uniform-null replicates with a dip at least as large.
    pub p: f64,
    pub n_boot: usize,
}

/// Dip statistic with a uniform-null bootstrap p-value.
pub fn dip_test(x: &[f64], n_boot: usize, seed: u64) -> Result<DipResult> {
    if x.len() < 10 {
        return Err(Error::invalid("dip test needs at least 10 points"));
    }
    if n_boot == 0 {
        return Err(Error::InsufficientReplicates { min: 1, got: 0 });
    }
    let dip = dip_statistic_sorted(&sorted_copy(x));
    let n = x.len();
    let exceed = (0..n_boot)
        .into_par_iter()
        .filter(|&b| {
            let mut rng = stream_rng(seed, "dip", b as u64);
            let mut u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            u.sort_by(f64::total_cmp);
            dip_statistic_sorted(&u) >= dip
        })
        .count();
    Ok(DipResult {
        dip,
        p: exceed as f64 / n_boot as f64,
        n_boot,
    })
}

fn modes_at(x: &[f64], h: f64, opts: &KdeOptions) -> usize {
    let (mn, mx) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let kde = kde_on_grid(x, h, mn - opts.pad * h, mx + opts.pad * h, opts.grid_size);
    mode_count_values(&kde.density, opts.prominence_frac)
}

/// Smallest `h` (to relative precision 1e-4) whose KDE has at most
/// `k_modes` modes.
pub fn critical_bandwidth(x: &[f64], k_modes: usize, opts: &KdeOptions) -> Result<f64> {
    if k_modes == 0 {
        return Err(Error::invalid("k_modes must be at least 1"));
    }
    let sd = std_dev(x, 1);
    if !(sd > 0.0) {
        return Err(Error::DegenerateSample);
    }
    let mut hi = sd;
    let mut tries = 0;
    while modes_at(x, hi, opts) > k_modes {
        hi *= 2.0;
        tries += 1;
        if tries > 40 {
            return Err(Error::BisectionFailed);
        }
    }
    let mut lo = hi / 2.0;
    tries = 0;
    while modes_at(x, lo, opts) <= k_modes {
        hi = lo;
        lo /= 2.0;
        tries += 1;
        if tries > 60 {
            return Err(Error::BisectionFailed);
        }
    }
    while (hi - lo) > 1e-4 * hi {
        let mid = 0.5 * (lo + hi);
        if modes_at(x, mid, opts) <= k_modes {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalBandwidth {
    pub h_crit: f64,
    pub k_modes: usize,
    /// Share of smoothed-bootstrap resamples with at most `k_modes` modes at
    /// `h_crit`.
    pub p: f64,
    pub n_boot: usize,
}

/// Critical bandwidth and its smoothed-bootstrap p-value.
///
/// Resamples are drawn as `x̄ + (x* − x̄ + h·ε)/√(1 + h²/σ²)`, which keeps the
/// sample variance of the smoothed draw equal to that of the data.
pub fn silverman_critical_bandwidth(
    x: &[f64],
    k_modes: usize,
    n_boot: usize,
    seed: u64,
    opts: &KdeOptions,
) -> Result<CriticalBandwidth> {
    if n_boot == 0 {
        return Err(Error::InsufficientReplicates { min: 1, got: 0 });
    }
    let h = critical_bandwidth(x, k_modes, opts)?;
    let m = mean(x);
    let var = crate::stats::variance(x, 1);
    let shrink = 1.0 / (1.0 + h * h / var).sqrt();
    let n = x.len();
    let ok = (0..n_boot)
        .into_par_iter()
        .filter(|&b| {
            let mut rng = stream_rng(seed, "critical-bandwidth", b as u64);
            let y: Vec<f64> = (0..n)
                .map(|_| {
                    let xi = x[rng.gen_range(0..n)];
                    let e: f64 = rng.sample(StandardNormal);
                    m + (xi - m + h * e) * shrink
                })
                .collect();
            modes_at(&y, h, opts) <= k_modes
        })
        .count();
    Ok(CriticalBandwidth {
        h_crit: h,
        k_modes,
        p: ok as f64 / n_boot as f64,
        n_boot,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub p: f64,
    pub epsilon2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrownForsythe {
    pub f: f64,
    pub p: f64,
    pub eta2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    pub median: f64,
    pub mad: f64,
    /// `1.4826 · MAD`, a robust σ.
    pub sigma_mad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTests {
    pub kruskal_wallis: KruskalWallis,
    pub brown_forsythe: BrownForsythe,
    pub groups: BTreeMap<String, GroupSummary>,
}

/// Average ranks (1-based) and the tie term `Σ(t³ − t)`.
fn ranks(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; n];
    let mut ties = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (r, ties)
}

/// Kruskal–Wallis (tie-corrected) and Brown–Forsythe tests across labels.
pub fn group_tests<S: AsRef<str>>(x: &[f64], labels: &[S]) -> Result<GroupTests> {
    if x.len() != labels.len() {
        return Err(Error::invalid("one label per residual is required"));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.as_ref().to_string()).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::invalid("at least two groups are required"));
    }
    if let Some((name, _)) = groups.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::GroupTooSmall(name.clone()));
    }
    let n = x.len() as f64;
    let k = groups.len() as f64;

    let (r, ties) = ranks(x);
    let mut s = 0.0;
    for idx in groups.values() {
        let rs: f64 = idx.iter().map(|&i| r[i]).sum();
        s += rs * rs / idx.len() as f64;
    }
    let mut h = 12.0 / (n * (n + 1.0)) * s - 3.0 * (n + 1.0);
    let corr = 1.0 - ties / (n * n * n - n);
    if corr > 0.0 {
        h /= corr;
    }
    let kw = KruskalWallis {
        h,
        p: chi2_sf(h, k - 1.0),
        epsilon2: (h - k + 1.0) / (n - k),
    };

    let mut z = vec![0.0; x.len()];
    let mut summaries = BTreeMap::new();
    for (name, idx) in &groups {
        let vals: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let med = median(&vals);
        for &i in idx {
            z[i] = (x[i] - med).abs();
        }
        let m = mad(&vals);
        summaries.insert(
            name.clone(),
            GroupSummary {
                n: idx.len(),
                median: med,
                mad: m,
                sigma_mad: 1.4826 * m,
            },
        );
    }
    let zbar = mean(&z);
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for idx in groups.values() {
        let zg: f64 = idx.iter().map(|&i| z[i]).sum::<f64>() / idx.len() as f64;
        ssb += idx.len() as f64 * (zg - zbar).powi(2);
        ssw += idx.iter().map(|&i| (z[i] - zg).powi(2)).sum::<f64>();
    }
    let f = (ssb / (k - 1.0)) / (ssw / (n - k));
    let bf = BrownForsythe {
        f,
        p: f_sf(f, k - 1.0, n - k),
        eta2: ssb / (ssb + ssw),
    };
    Ok(GroupTests {
        kruskal_wallis: kw,
        brown_forsythe: bf,
        groups: summaries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerialDiagnostics {
    /// Lags `0..=max_lag`.
    pub acf: Vec<f64>,
    /// Lags `0..=max_lag` (`pacf[0] = 1`).
    pub pacf: Vec<f64>,
    pub ljung_box_q: f64,
    pub ljung_box_p: f64,
}

/// Sample ACF, Durbin–Levinson PACF and the Ljung–Box test over `max_lag`.
pub fn serial_diagnostics(r: &[f64], max_lag: usize) -> Result<SerialDiagnostics> {
    let n = r.len();
    if max_lag == 0 || n <= max_lag {
        return Err(Error::invalid("need n > max_lag >= 1"));
    }
    let m = mean(r);
    let c0: f64 = r.iter().map(|v| (v - m).powi(2)).sum();
    if !(c0 > 0.0) {
        return Err(Error::DegenerateSample);
    }
    let acf: Vec<f64> = (0..=max_lag)
        .map(|k| (0..n - k).map(|t| (r[t] - m) * (r[t + k] - m)).sum::<f64>() / c0)
        .collect();
    let mut pacf = vec![1.0; max_lag + 1];
    let mut phi = vec![0.0; max_lag + 1];
    let mut prev = vec![0.0; max_lag + 1];
    for k in 1..=max_lag {
        let num = acf[k] - (1..k).map(|j| prev[j] * acf[k - j]).sum::<f64>();
        let den = 1.0 - (1..k).map(|j| prev[j] * acf[j]).sum::<f64>();
        let pkk = num / den;
        phi[k] = pkk;
        for j in 1..k {
            phi[j] = prev[j] - pkk * prev[k - j];
        }
        pacf[k] = pkk;
        prev[..=k].copy_from_slice(&phi[..=k]);
    }
    let nf = n as f64;
    let q = nf * (nf + 2.0) * (1..=max_lag).map(|k| acf[k].powi(2) / (nf - k as f64)).sum::<f64>();
    Ok(SerialDiagnostics {
        acf,
        pacf,
        ljung_box_q: q,
        ljung_box_p: chi2_sf(q, max_lag as f64),
    })
}

/// `"LoS"` when a record crosses no walls, `"NLoS"` otherwise.
pub fn los_labels(records: &[CampaignRecord]) -> Vec<String> {
    records
        .iter()
        .map(|r| if r.is_los() { "LoS".to_string() } else { "NLoS".to_string() })
        .collect()
}

/// Tercile labels `"T1"`, `"T2"`, `"T3"` of a pooled variable.
pub fn tercile_labels(values: &[f64]) -> Vec<String> {
    let s = sorted_copy(values);
    let q1 = quantile_sorted(&s, 1.0 / 3.0);
    let q2 = quantile_sorted(&s, 2.0 / 3.0);
    values
        .iter()
        .map(|v| {
            if *v <= q1 {
                "T1"
            } else if *v <= q2 {
                "T2"
            } else {
                "T3"
            }
            .to_string()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::stats::normal_pdf;

    fn normal_sample(n: usize, mu: f64, sd: f64, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..n).map(|_| mu + sd * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn bimodal(n: usize, seed: u64, sep: f64, sd: f64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|i| (if i % 2 == 0 { -sep } else { sep }) + sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    #[test]
    fn single_point_gives_the_kernel() {
        let kde = kde_fft(&[0.0], 1.0, 1024, 8.0).unwrap();
        let max_err = kde
            .grid
            .iter()
            .zip(&kde.density)
            .map(|(g, d)| (d - normal_pdf(*g)).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-8, "{max_err}");
        assert!(kde.grid.contains(&0.0));
    }

    #[test]
    fn normalized_on_grid() {
        for (x, h) in [(normal_sample(500, 2.0, 3.0, 1), 0.4), (bimodal(300, 2, 5.0, 0.5), 0.1)] {
            let kde = kde_fft(&x, h, 4096, 8.0).unwrap();
            assert!((kde.integral() - 1.0).abs() < 1e-6);
            assert!(kde.density.iter().all(|d| *d >= 0.0));
        }
        assert_eq!(kde_fft(&[1.0], 0.0, 1024, 8.0).unwrap_err(), Error::BandwidthNonPositive(0.0));
    }

    #[test]
    fn fft_matches_direct_kernel_sum() {
        let x = normal_sample(10_000, 0.0, 1.0, 3);
        let fft = kde_fft(&x, 0.3, 2048, 8.0).unwrap();
        let direct = kde_binned_direct(&x, 0.3, 2048, 8.0).unwrap();
        let err = fft.density.iter().zip(&direct.density).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
        // and binning costs only a second-order error against exact kernels
        let n = x.len() as f64;
        let exact_err = fft
            .grid
            .iter()
            .zip(&fft.density)
            .step_by(16)
            .map(|(g, d)| {
                let e: f64 = x.iter().map(|v| normal_pdf((g - v) / 0.3) / 0.3).sum::<f64>() / n;
                (d - e).abs()
            })
            .fold(0.0, f64::max);
        assert!(exact_err < 1e-4, "{exact_err}");
    }

    #[test]
    fn silverman_rule() {
        let x = normal_sample(100_000, 0.0, 1.0, 4);
        let h = silverman_bandwidth(&x).unwrap();
        assert!((h - 0.09).abs() < 0.003, "{h}");
        let y: Vec<f64> = x.iter().map(|v| 7.0 * v).collect();
        assert!((silverman_bandwidth(&y).unwrap() - 7.0 * h).abs() < 1e-12);
        assert_eq!(silverman_bandwidth(&[1.0, 1.0, 1.0]).unwrap_err(), Error::DegenerateSample);
    }

    #[test]
    fn cv_bandwidth() {
        let x = normal_sample(3000, 0.0, 1.0, 5);
        let hs = log_grid(0.05, 2.0, 25);
        let h = cv_loglik_bandwidth(&x, &hs, 5, 1, 100_000, &KdeOptions { grid_size: 4096, ..Default::default() }).unwrap();
        let s = silverman_bandwidth(&x).unwrap();
        assert!(h > s / 2.0 && h < s * 2.0, "{h} vs {s}");
        assert_eq!(cv_loglik_bandwidth(&x, &[0.7], 5, 1, 100, &KdeOptions::default()).unwrap(), 0.7);
    }

    #[test]
    fn mode_counting() {
        let x = normal_sample(2000, 0.0, 1.0, 6);
        let kde = kde_fft(&x, silverman_bandwidth(&x).unwrap(), 4096, 8.0).unwrap();
        assert_eq!(mode_count(&kde, 0.01), 1);
        let b = bimodal(2000, 7, 5.0, 0.5);
        assert_eq!(mode_count(&kde_fft(&b, 0.3, 4096, 8.0).unwrap(), 0.01), 2);
        assert_eq!(mode_count(&kde_fft(&b, 5.0, 4096, 8.0).unwrap(), 0.01), 1);
        // prominence walk on a hand-made profile
        let y = [0.0, 1.0, 0.5, 0.9, 0.2, 0.21, 0.2, 3.0, 3.0, 0.0];
        let p = peaks_with_prominence(&y);
        assert_eq!(p.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![1, 3, 5, 7]);
        assert!((p[0].1 - 0.8).abs() < 1e-12 && (p[1].1 - 0.4).abs() < 1e-12 && (p[2].1 - 0.01).abs() < 1e-12);
        assert_eq!(mode_count_values(&y, 0.1), 3);
    }

    #[test]
    fn mode_curve_is_monotone() {
        let b = bimodal(1500, 8, 3.0, 1.0);
        let curve = mode_curve(&b, &log_grid(0.05, 5.0, 60), &KdeOptions { grid_size: 4096, ..Default::default() }).unwrap();
        assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1), "{curve:?}");
        assert_eq!(curve.last().unwrap().1, 1);
    }

    #[test]
    fn dip_matches_reference_implementation() {
        // values from the Python `diptest` package (allow_zero=False)
        let a: Vec<f64> = (0..60)
            .map(|i| f64::from((i * 37) % 101) / 10.0 + (0.002 * f64::from(i)).powi(3) * 100.0)
            .collect();
        let b: Vec<f64> = (0..200).map(|i| f64::from((i * 7919) % 1000) / 1000.0).collect();
        let c: Vec<f64> = (0..50)
            .map(|i| (f64::from(i)).sin() * 0.3 - 3.0)
            .chain((0..70).map(|i| (f64::from(i)).cos() * 0.4 + 2.0))
            .collect();
        let d: Vec<f64> = (0..10).map(f64::from).collect();
        let e = [1.0, 2.0, 2.5, 7.0, 7.1, 7.2, 9.0, 12.0, 12.5, 13.0];
        let cases: [(&[f64], f64); 5] = [
            (&a, 0.016_470_259_754_393_82),
            (&b, 0.008_834_563_345_633_453),
            (&c, 0.182_824_444_679_849_54),
            (&d, 0.05),
            (&e, 0.115_517_241_379_310_34),
        ];
        for (x, want) in cases {
            let got = dip_statistic_sorted(&sorted_copy(x));
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn dip_test_calibration() {
        let mut rng = rng_from(9);
        let u: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert!(dip_test(&u, 200, 1).unwrap().p > 0.2);
        let b = bimodal(500, 10, 10.0, 1.0);
        let r = dip_test(&b, 200, 2).unwrap();
        assert!(r.p < 0.01 && r.dip > 0.1);
        let ten: Vec<f64> = (0..10).map(|i| f64::from(i * i)).collect();
        assert!(dip_test(&ten, 10, 3).unwrap().dip > 0.0);
    }

    #[test]
    fn critical_bandwidth_contract() {
        let opts = KdeOptions { grid_size: 2048, ..Default::default() };
        let b = bimodal(600, 11, 5.0, 0.5);
        let h = critical_bandwidth(&b, 1, &opts).unwrap();
        assert!(h > 1.0, "{h}");
        assert!(modes_at(&b, h, &opts) <= 1);
        assert!(modes_at(&b, h * (1.0 - 1e-3), &opts) > 1);
        let x = normal_sample(600, 0.0, 1.0, 12);
        let r = silverman_critical_bandwidth(&x, 1, 100, 4, &opts).unwrap();
        assert!(r.h_crit < 0.5 && r.p > 0.5, "{r:?}");
    }

    #[test]
    fn group_test_cases() {
        let a = normal_sample(300, 0.0, 1.0, 13);
        let shifted: Vec<f64> = normal_sample(300, 5.0, 1.0, 14);
        let labels: Vec<&str> = std::iter::repeat("A").take(300).chain(std::iter::repeat("B").take(300)).collect();
        let x: Vec<f64> = a.iter().chain(&shifted).copied().collect();
        assert!(group_tests(&x, &labels).unwrap().kruskal_wallis.p < 1e-6);
        let wide = normal_sample(300, 0.0, 3.0, 15);
        let x: Vec<f64> = a.iter().chain(&wide).copied().collect();
        let g = group_tests(&x, &labels).unwrap();
        assert!(g.brown_forsythe.p < 1e-6 && g.kruskal_wallis.p > 1e-3);
        // invariances
        let cubed: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0).collect();
        let g2 = group_tests(&cubed, &labels).unwrap();
        assert!((g.kruskal_wallis.h - g2.kruskal_wallis.h).abs() < 1e-9);
        let moved: Vec<f64> = x.iter().enumerate().map(|(i, v)| if i < 300 { v + 11.0 } else { v - 4.0 }).collect();
        let g3 = group_tests(&moved, &labels).unwrap();
        assert!((g.brown_forsythe.f - g3.brown_forsythe.f).abs() < 1e-9 * g.brown_forsythe.f);
        assert_eq!(group_tests(&[1.0, 2.0, 3.0], &["A", "A", "B"]).unwrap_err(), Error::GroupTooSmall("B".into()));
    }

    #[test]
    fn identical_groups_are_null() {
        let mut pass = 0;
        for seed in 0..50 {
            let x = normal_sample(400, 0.0, 1.0, 200 + seed);
            let labels: Vec<&str> = (0..400).map(|i| if i % 2 == 0 { "A" } else { "B" }).collect();
            let g = group_tests(&x, &labels).unwrap();
            if g.kruskal_wallis.p > 0.05 && g.brown_forsythe.p > 0.05 {
                pass += 1;
            }
            assert!(g.kruskal_wallis.epsilon2.abs() < 0.05 && g.brown_forsythe.eta2 < 0.05);
        }
        assert!(pass >= 45 - 5, "{pass}");
    }

    #[test]
    fn kruskal_wallis_reference() {
        // scipy.stats.kruskal([1,2,2,3],[2,4,5,5,6],[7,1,3])
        let x = [1.0, 2.0, 2.0, 3.0, 2.0, 4.0, 5.0, 5.0, 6.0, 7.0, 1.0, 3.0];
        let l = ["a", "a", "a", "a", "b", "b", "b", "b", "b", "c", "c", "c"];
        let g = group_tests(&x, &l).unwrap();
        assert!((g.kruskal_wallis.h - KW_REF.0).abs() < 1e-10, "{}", g.kruskal_wallis.h);
        assert!((g.kruskal_wallis.p - KW_REF.1).abs() < 1e-10);
        assert!((g.brown_forsythe.f - BF_REF.0).abs() < 1e-10, "{}", g.brown_forsythe.f);
        assert!((g.brown_forsythe.p - BF_REF.1).abs() < 1e-10);
    }

    const KW_REF: (f64, f64) = (3.401_194_743_130_226, 0.182_574_426_699_123_63);
    const BF_REF: (f64, f64) = (1.175, 0.352_054_512_731_374_4);

    #[test]
    fn mad_tracks_sigma() {
        let x = normal_sample(100_000, 0.0, 2.0, 16);
        assert!((1.4826 * mad(&x) / std_dev(&x, 1) - 1.0).abs() < 0.03);
    }

    #[test]
    fn serial_examples() {
        let w = normal_sample(5000, 0.0, 1.0, 17);
        let s = serial_diagnostics(&w, 40).unwrap();
        assert_eq!(s.acf[0], 1.0);
        let band = 2.0 / (5000f64).sqrt();
        let inside = s.acf[1..].iter().filter(|a| a.abs() < band).count();
        assert!(inside >= 34, "{inside}");
        let mut rng = rng_from(18);
        let mut ar = vec![0.0; 20_000];
        for i in 1..ar.len() {
            ar[i] = 0.8 * ar[i - 1] + rng.sample::<f64, _>(StandardNormal);
        }
        let s = serial_diagnostics(&ar, 10).unwrap();
        assert!((s.acf[1] - 0.8).abs() < 0.02 && (s.pacf[1] - 0.8).abs() < 0.02);
        assert!(s.pacf[2..].iter().all(|p| p.abs() < 0.03));
        assert!(s.ljung_box_p < 1e-10);
    }

    #[test]
    fn labels() {
        let t = tercile_labels(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t, vec!["T1", "T1", "T2", "T2", "T3", "T3"]);
    }
}

//! Synthetic campaigns from a known mean model plus mixture shadow fading.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::campaign::{CampaignRecord, WallCounts, ENV_NAMES};
use crate::error::{Error, Result};
use crate::features::linearize_distance;
use crate::residuals::DistFamily;
use crate::rng::stream_rng;

/// Daily sinusoid plus stationary AR(1) jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvProcess {
    pub mean: f64,
    pub amplitude: f64,
    pub phase_hours: f64,
    pub ar: f64,
    /// Stationary SD of the AR(1) part.
    pub jitter_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceLayout {
    pub device_id: String,
    pub distance_m: f64,
    pub walls: WallCounts,
}

/// `snr = at_d0_db − slope·z_d + N(0, sd²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrModel {
    pub at_d0_db: f64,
    pub slope: f64,
    pub sd: f64,
}

/// Extra mean term `coef · u_a · u_b` on the raw drivers
/// (`z_d`, `w_brick`, `w_wood`, env names, `snr`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadTerm {
    pub a: String,
    pub b: String,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub intercept: f64,
    pub exponent: f64,
    pub wall_brick_db: f64,
    pub wall_wood_db: f64,
    /// Slopes in record order: CO₂, RH, temperature, pressure, PM2.5.
    pub theta: [f64; 5],
    pub k_snr: f64,
    #[serde(default)]
    pub quadratic: Vec<QuadTerm>,
    pub noise: DistFamily,
    pub devices: Vec<DeviceLayout>,
    pub env: [EnvProcess; 5],
    pub snr: SnrModel,
    pub period_s: f64,
    pub start_ts: f64,
    pub freq_mhz: f64,
    pub d0_m: f64,
}

fn env(mean: f64, amplitude: f64, phase_hours: f64, jitter_sd: f64) -> EnvProcess {
    EnvProcess {
        mean,
        amplitude,
        phase_hours,
        ar: 0.9,
        jitter_sd,
    }
}

impl Default for GroundTruth {
    /// Published linear-model coefficients with the default three-component
    /// noise mixture and six devices.
    fn default() -> Self {
        let dev = |id: &str, d: f64, brick: u32, wood: u32| DeviceLayout {
            device_id: id.into(),
            distance_m: d,
            walls: WallCounts { brick, wood },
        };
        Self {
            intercept: 2.98,
            exponent: 3.85,
            wall_brick_db: 6.87,
            wall_wood_db: 2.01,
            theta: [-0.0024, -0.0874, -0.1468, -0.0095, -0.1007],
            k_snr: -2.0347,
            quadratic: Vec::new(),
            noise: default_noise(),
            devices: vec![
                dev("dev-01", 3.0, 0, 0),
                dev("dev-02", 7.5, 0, 1),
                dev("dev-03", 12.0, 1, 0),
                dev("dev-04", 18.0, 1, 2),
                dev("dev-05", 26.0, 2, 1),
                dev("dev-06", 38.0, 3, 2),
            ],
            env: [
                env(650.0, 180.0, 14.0, 90.0),
                env(45.0, 8.0, 4.0, 6.0),
                env(22.5, 2.5, 16.0, 2.5),
                env(1013.0, 3.0, 9.0, 4.0),
                env(14.0, 6.0, 11.0, 5.0),
            ],
            snr: SnrModel {
                at_d0_db: 12.0,
                slope: 0.35,
                sd: 3.0,
            },
            period_s: 600.0,
            start_ts: 1_700_000_000.0,
            freq_mhz: 868.1,
            d0_m: 1.0,
        }
    }
}

/// Weights (0.45, 0.45, 0.10), means (−1, 0.5, 6) dB, SDs (2, 2, 6) dB.
pub fn default_noise() -> DistFamily {
    DistFamily::Gmm {
        weights: vec![0.45, 0.45, 0.10],
        means: vec![-1.0, 0.5, 6.0],
        sds: vec![2.0, 2.0, 6.0],
    }
}

fn driver_index(name: &str) -> Option<usize> {
    match name {
        "z_d" => Some(0),
        "w_brick" => Some(1),
        "w_wood" => Some(2),
        "snr" => Some(8),
        other => ENV_NAMES.iter().position(|e| *e == other).map(|i| 3 + i),
    }
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTruth(m));
        if self.devices.is_empty() {
            return bad("no devices".into());
        }
        for d in &self.devices {
            if !(d.distance_m > 0.0) {
                return bad(format!("device {} has non-positive distance", d.device_id));
            }
        }
        for (name, p) in ENV_NAMES.iter().zip(&self.env) {
            if !(p.ar.abs() < 1.0) || !(p.jitter_sd >= 0.0) {
                return bad(format!("env process {name} is not stationary"));
            }
        }
        if !(self.period_s > 0.0) || !(self.d0_m > 0.0) || !(self.freq_mhz > 0.0) || !(self.snr.sd >= 0.0) {
            return bad("period, d0, frequency and SNR spread must be positive".into());
        }
        match &self.noise {
            DistFamily::Gmm { weights, means, sds } => {
                let total: f64 = weights.iter().sum();
                if weights.is_empty()
                    || weights.len() != means.len()
                    || weights.len() != sds.len()
                    || (total - 1.0).abs() > 1e-9
                    || weights.iter().any(|w| !(*w > 0.0))
                    || sds.iter().any(|s| !(*s >= 0.0))
                {
                    return bad("noise mixture is malformed".into());
                }
            }
            DistFamily::Normal { sigma, .. } if !(*sigma >= 0.0) => return bad("noise sd is negative".into()),
            DistFamily::SkewNormal { omega: s, .. }
            | DistFamily::StudentT { scale: s, .. }
            | DistFamily::Cauchy { scale: s, .. }
                if !(*s > 0.0) =>
            {
                return bad("noise scale must be positive".into())
            }
            _ => {}
        }
        for q in &self.quadratic {
            if driver_index(&q.a).is_none() || driver_index(&q.b).is_none() {
                return bad(format!("unknown quadratic driver {} * {}", q.a, q.b));
            }
        }
        Ok(())
    }

    /// Noise-free path loss of a record.
    pub fn mean_db(&self, r: &CampaignRecord) -> Result<f64> {
        let z = linearize_distance(r.distance_m, self.d0_m)?;
        let mut m = self.intercept
            + self.exponent * z
            + self.wall_brick_db * f64::from(r.walls.brick)
            + self.wall_wood_db * f64::from(r.walls.wood)
            + self.k_snr * r.snr_db;
        for (t, e) in self.theta.iter().zip(&r.env) {
            m += t * e;
        }
        if !self.quadratic.is_empty() {
            let mut u = [0.0; 9];
            u[0] = z;
            u[1] = f64::from(r.walls.brick);
            u[2] = f64::from(r.walls.wood);
            u[3..8].copy_from_slice(&r.env);
            u[8] = r.snr_db;
            for q in &self.quadratic {
                // validated names
                m += q.coef * u[driver_index(&q.a).unwrap_or(0)] * u[driver_index(&q.b).unwrap_or(0)];
            }
        }
        Ok(m)
    }
}

/// Lowest spreading factor whose demodulation floor sits 5 dB below the SNR.
fn adr_sf(snr: f64) -> u8 {
    for (sf, floor) in [(7u8, -7.5), (8, -10.0), (9, -12.5), (10, -15.0), (11, -17.5)] {
        if snr - 5.0 >= floor {
            return sf;
        }
    }
    12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCampaign {
    pub records: Vec<CampaignRecord>,
    pub mean_db: Vec<f64>,
    pub noise_db: Vec<f64>,
}

/// Campaign plus the mean and noise draw behind every path loss.
pub fn generate_detailed(truth: &GroundTruth, n_per_device: usize, seed: u64) -> Result<SyntheticCampaign> {
    truth.validate()?;
    if n_per_device == 0 {
        return Err(Error::invalid("n_per_device must be at least 1"));
    }
    let total = n_per_device * truth.devices.len();
    let mut out = SyntheticCampaign {
        records: Vec::with_capacity(total),
        mean_db: Vec::with_capacity(total),
        noise_db: Vec::with_capacity(total),
    };
    let day = 2.0 * std::f64::consts::PI / 86_400.0;
    for (di, dev) in truth.devices.iter().enumerate() {
        let mut env_rng = stream_rng(seed, "synth-env", di as u64);
        let mut snr_rng = stream_rng(seed, "synth-snr", di as u64);
        let mut noise_rng = stream_rng(seed, "synth-noise", di as u64);
        let z = linearize_distance(dev.distance_m, truth.d0_m)?;
        // AR states start from their stationary law
        let mut state: Vec<f64> = truth
            .env
            .iter()
            .map(|p| p.jitter_sd * env_rng.sample::<f64, _>(StandardNormal))
            .collect();
        for i in 0..n_per_device {
            let t = truth.start_ts + i as f64 * truth.period_s;
            let mut e = [0.0; 5];
            for (k, p) in truth.env.iter().enumerate() {
                if i > 0 {
                    let innov = p.jitter_sd * (1.0 - p.ar * p.ar).sqrt();
                    state[k] = p.ar * state[k] + innov * env_rng.sample::<f64, _>(StandardNormal);
                }
                e[k] = p.mean + p.amplitude * (day * (t - p.phase_hours * 3600.0)).sin() + state[k];
            }
            let snr = truth.snr.at_d0_db - truth.snr.slope * z + truth.snr.sd * snr_rng.sample::<f64, _>(StandardNormal);
            let mut rec = CampaignRecord {
                device_id: dev.device_id.clone(),
                timestamp: t,
                distance_m: dev.distance_m,
                walls: dev.walls,
                env: e,
                snr_db: snr,
                sf: adr_sf(snr),
                freq_mhz: truth.freq_mhz,
                path_loss_db: 0.0,
            };
            let mean = truth.mean_db(&rec)?;
            let noise = truth.noise.sample(&mut noise_rng);
            rec.path_loss_db = mean + noise;
            // the realized draw, so that response − mean reproduces it exactly
            out.noise_db.push(rec.path_loss_db - mean);
            out.records.push(rec);
            out.mean_db.push(mean);
        }
    }
    Ok(out)
}

/// Deterministic synthetic campaign for `seed`.
pub fn generate_campaign(truth: &GroundTruth, n_per_device: usize, seed: u64) -> Result<Vec<CampaignRecord>> {
    Ok(generate_detailed(truth, n_per_device, seed)?.records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::campaign::{read_campaign, write_campaign, ColumnSchema};
    use crate::features::{build_design, FeatureSpec};
    use crate::regression::{fit_linear, PenaltySpec};
    use crate::residuals::ks_statistic;

    fn quiet() -> GroundTruth {
        GroundTruth {
            noise: DistFamily::Normal { mu: 0.0, sigma: 0.0 },
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_recovery() {
        let truth = quiet();
        let recs = generate_campaign(&truth, 300, 1).unwrap();
        let fit = fit_linear(&build_design(&recs, &FeatureSpec::linear()).unwrap(), PenaltySpec::none(), 1e-10, 1000).unwrap();
        assert!((fit.natural_intercept - truth.intercept).abs() < 1e-6);
        let want = [
            ("z_d", truth.exponent),
            ("w_brick", truth.wall_brick_db),
            ("w_wood", truth.wall_wood_db),
            ("co2", truth.theta[0]),
            ("rh", truth.theta[1]),
            ("temp", truth.theta[2]),
            ("bp", truth.theta[3]),
            ("pm25", truth.theta[4]),
            ("snr", truth.k_snr),
        ];
        for (name, v) in want {
            let got = fit.natural_coefficient(name).unwrap();
            assert!((got - v).abs() < 1e-8, "{name}: {got} vs {v}");
        }
    }

    #[test]
    fn gaussian_recovery() {
        let truth = GroundTruth {
            noise: DistFamily::Normal { mu: 0.0, sigma: 2.0 },
            ..Default::default()
        };
        let recs = generate_campaign(&truth, 20_000 / 6 + 1, 2).unwrap();
        let fit = fit_linear(&build_design(&recs, &FeatureSpec::linear()).unwrap(), PenaltySpec::none(), 1e-10, 1000).unwrap();
        assert!((fit.natural_coefficient("z_d").unwrap() - 3.85).abs() < 0.05);
        assert!((fit.natural_coefficient("w_brick").unwrap() - 6.87).abs() < 0.3);
        assert!((fit.natural_coefficient("w_wood").unwrap() - 2.01).abs() < 0.3);
        for (name, t) in ENV_NAMES.iter().zip(truth.theta) {
            assert!((fit.natural_coefficient(name).unwrap() - t).abs() < 0.01, "{name}");
        }
    }

    #[test]
    fn bookkeeping_and_determinism() {
        let truth = GroundTruth::default();
        let a = generate_detailed(&truth, 200, 3).unwrap();
        let b = generate_detailed(&truth, 200, 3).unwrap();
        assert_eq!(a, b);
        for i in 0..a.records.len() {
            assert_eq!(a.records[i].path_loss_db - a.mean_db[i], a.noise_db[i]);
        }
        let mut w1 = Vec::new();
        let mut w2 = Vec::new();
        write_campaign(&a.records, &mut w1).unwrap();
        write_campaign(&b.records, &mut w2).unwrap();
        assert_eq!(w1, w2);
        let c = generate_campaign(&truth, 200, 4).unwrap();
        assert_ne!(a.records, c);
        // regular time grid
        let t: Vec<f64> = a.records[..200].iter().map(|r| r.timestamp).collect();
        assert!(t.windows(2).all(|w| w[1] - w[0] == truth.period_s));
    }

    #[test]
    fn csv_round_trip() {
        let recs = generate_campaign(&GroundTruth::default(), 50, 5).unwrap();
        let mut buf = Vec::new();
        write_campaign(&recs, &mut buf).unwrap();
        let back = read_campaign(&buf[..], &ColumnSchema::default()).unwrap();
        assert!(back.row_errors.is_empty());
        assert_eq!(back.records.len(), recs.len());
        for (a, b) in recs.iter().zip(&back.records) {
            assert_eq!(a.device_id, b.device_id);
            assert!((a.path_loss_db - b.path_loss_db).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_matches_mixture() {
        let truth = GroundTruth::default();
        let s = generate_detailed(&truth, 100_000 / 6 + 1, 6).unwrap();
        let d = ks_statistic(&s.noise_db, |x| truth.noise.cdf(x));
        assert!(d < 0.01, "{d}");
    }

    #[test]
    fn invalid_truths() {
        let mut t = GroundTruth::default();
        t.devices[0].distance_m = 0.0;
        assert!(matches!(generate_campaign(&t, 10, 1), Err(Error::InvalidTruth(_))));
        let mut t = GroundTruth::default();
        t.env[2].ar = 1.0;
        assert!(matches!(t.validate(), Err(Error::InvalidTruth(_))));
        let t = GroundTruth {
            noise: DistFamily::Gmm {
                weights: vec![0.5, 0.6],
                means: vec![0.0, 1.0],
                sds: vec![1.0, 1.0],
            },
            ..Default::default()
        };
        assert!(matches!(t.validate(), Err(Error::InvalidTruth(_))));
        let t = GroundTruth {
            quadratic: vec![QuadTerm {
                a: "z_d".into(),
                b: "nope".into(),
                coef: 1.0,
            }],
            ..Default::default()
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn quadratic_terms_enter_the_mean() {
        let truth = GroundTruth {
            quadratic: vec![QuadTerm {
                a: "z_d".into(),
                b: "rh".into(),
                coef: 0.01,
            }],
            ..quiet()
        };
        let base = quiet();
        let r = &generate_campaign(&truth, 1, 1).unwrap()[3];
        let z = linearize_distance(r.distance_m, 1.0).unwrap();
        let diff = truth.mean_db(r).unwrap() - base.mean_db(r).unwrap();
        assert!((diff - 0.01 * z * r.env[1]).abs() < 1e-12);
    }
}

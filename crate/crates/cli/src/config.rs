//! Run configuration: loading, validation, hashing and seed streams.

use std::path::{Path, PathBuf};

use pathloss_core::anova::AnovaType;
use pathloss_core::campaign::{CleaningConfig, ColumnSchema};
use pathloss_core::cv::{CvOptions, ModelSpec};
use pathloss_core::fade_margin::{CalibrationOptions, CiMethod, MIN_REPLICATES};
use pathloss_core::features::{FeatureKind, FeatureSpec, FreqHandling};
use pathloss_core::regression::PenaltySpec;
use pathloss_core::residuals::{default_candidates, FamilyKind, GmmOptions};
use pathloss_core::rng::derive_seed;
use pathloss_core::synth::GroundTruth;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningSection {
    pub sf_keep: Vec<u8>,
    pub contamination: f64,
    pub iforest_trees: usize,
    pub iforest_subsample: usize,
}

impl Default for CleaningSection {
    fn default() -> Self {
        let c = CleaningConfig::new(0);
        Self {
            sf_keep: c.sf_keep.into_iter().collect(),
            contamination: c.contamination,
            iforest_trees: c.iforest_trees,
            iforest_subsample: c.iforest_subsample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub d0_m: f64,
    pub include_snr: bool,
    pub freq_handling: FreqHandling,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            d0_m: 1.0,
            include_snr: true,
            freq_handling: FreqHandling::AbsorbIntoIntercept,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub features: FeatureKind,
    pub model: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub k: usize,
    pub gap_hours: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CvSection {
    fn default() -> Self {
        let o = CvOptions::default();
        Self {
            k: 5,
            gap_hours: 24.0,
            tol: o.tol,
            max_iter: o.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnovaSection {
    pub kind: AnovaType,
    pub robust: bool,
}

impl Default for AnovaSection {
    fn default() -> Self {
        Self {
            kind: AnovaType::II,
            robust: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    Silverman,
    CvLoglik,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualSection {
    pub families: Vec<FamilyKind>,
    pub gmm_n_init: usize,
    pub var_floor: f64,
    pub bic_tie_tol: f64,
    pub ks_tie_tol: f64,
    pub bandwidth: BandwidthRule,
    pub kde_grid: usize,
    pub mode_sweep: (f64, f64, usize),
    pub dip_replicates: usize,
    pub critical_replicates: usize,
    pub critical_grid: usize,
    pub max_lag: usize,
}

impl Default for ResidualSection {
    fn default() -> Self {
        Self {
            families: default_candidates(5),
            gmm_n_init: 8,
            var_floor: 1e-3,
            bic_tie_tol: 10.0,
            ks_tie_tol: 0.002,
            bandwidth: BandwidthRule::Silverman,
            kde_grid: 1 << 14,
            mode_sweep: (0.05, 5.0, 60),
            dip_replicates: 1000,
            critical_replicates: 200,
            critical_grid: 1 << 12,
            max_lag: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FadeMarginSection {
    pub targets: Vec<f64>,
    pub replicates: usize,
    pub method: CiMethod,
    pub level: f64,
    /// Mixture order used for the tail estimator.
    pub gmm_k: usize,
    pub heuristic_fm_db: f64,
}

impl Default for FadeMarginSection {
    fn default() -> Self {
        Self {
            targets: vec![0.05, 0.02, 0.01],
            replicates: 1000,
            method: CiMethod::MovingBlock { block_len: None },
            level: 0.95,
            gmm_k: 3,
            heuristic_fm_db: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_per_device: usize,
    pub truth: GroundTruth,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n_per_device: 4000,
            truth: GroundTruth::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub input: Option<PathBuf>,
    pub schema: ColumnSchema,
    pub cleaning: CleaningSection,
    pub holdout_fraction: f64,
    pub features: FeatureSection,
    pub models: Vec<ModelEntry>,
    pub cv: CvSection,
    pub anova: AnovaSection,
    pub residuals: ResidualSection,
    pub fade_margin: FadeMarginSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input: None,
            schema: ColumnSchema::default(),
            cleaning: CleaningSection::default(),
            holdout_fraction: 0.2,
            features: FeatureSection::default(),
            models: vec![
                ModelEntry {
                    name: "linear".into(),
                    features: FeatureKind::Linear,
                    model: ModelSpec::ols(),
                },
                ModelEntry {
                    name: "poly2".into(),
                    features: FeatureKind::Poly2,
                    model: ModelSpec::Fixed {
                        penalty: PenaltySpec::lasso(1e-4),
                    },
                },
            ],
            cv: CvSection::default(),
            anova: AnovaSection::default(),
            residuals: ResidualSection::default(),
            fade_margin: FadeMarginSection::default(),
            synth: SynthSection::default(),
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::input("InvalidConfig", msg)
}

impl RunConfig {
    /// Reads TOML or JSON, chosen by extension (JSON first when unknown).
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input("ConfigUnreadable", format!("{}: {e}", path.display())))?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        let parsed = match ext.as_str() {
            "toml" => toml::from_str(&text).map_err(|e| e.to_string()),
            "json" => serde_json::from_str(&text).map_err(|e| e.to_string()),
            _ => serde_json::from_str(&text).or_else(|_| toml::from_str(&text)).map_err(|e: toml::de::Error| e.to_string()),
        };
        parsed.map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.cleaning_config().validate().map_err(|e| bad(e.to_string()))?;
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(bad("holdout_fraction must lie in (0, 1)"));
        }
        if !(self.features.d0_m > 0.0) {
            return Err(bad("features.d0_m must be positive"));
        }
        if self.models.is_empty() {
            return Err(bad("at least one model is required"));
        }
        for (i, m) in self.models.iter().enumerate() {
            let ok = !m.name.is_empty()
                && m.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok {
                return Err(bad(format!("model name {:?} must be non-empty [A-Za-z0-9_-]", m.name)));
            }
            if self.models[..i].iter().any(|o| o.name == m.name) {
                return Err(bad(format!("duplicate model name {}", m.name)));
            }
            if let ModelSpec::Fixed { penalty } = &m.model {
                penalty.validate().map_err(|e| bad(e.to_string()))?;
            }
        }
        if self.cv.k < 2 || !(self.cv.gap_hours >= 0.0) || !(self.cv.tol > 0.0) || self.cv.max_iter == 0 {
            return Err(bad("cv needs k >= 2, gap_hours >= 0, tol > 0 and max_iter >= 1"));
        }
        let r = &self.residuals;
        if r.families.is_empty() || r.gmm_n_init == 0 || !(r.var_floor > 0.0) {
            return Err(bad("residuals needs families, gmm_n_init >= 1 and var_floor > 0"));
        }
        if r.kde_grid < 256 || !r.kde_grid.is_power_of_two() || r.critical_grid < 256 || !r.critical_grid.is_power_of_two() {
            return Err(bad("KDE grids must be powers of two >= 256"));
        }
        let (lo, hi, count) = r.mode_sweep;
        if !(lo > 0.0 && hi > lo) || count < 2 {
            return Err(bad("mode_sweep must be (lo > 0, hi > lo, count >= 2)"));
        }
        if r.dip_replicates == 0 || r.critical_replicates == 0 || r.max_lag == 0 {
            return Err(bad("dip/critical replicates and max_lag must be positive"));
        }
        let f = &self.fade_margin;
        if f.targets.is_empty() || f.targets.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(bad("fade_margin.targets must lie in (0, 1)"));
        }
        if f.replicates < MIN_REPLICATES {
            return Err(bad(format!("fade_margin.replicates must be at least {MIN_REPLICATES}")));
        }
        if !(f.level > 0.0 && f.level < 1.0) || !(1..=5).contains(&f.gmm_k) {
            return Err(bad("fade_margin.level must lie in (0, 1) and gmm_k in 1..=5"));
        }
        if self.synth.n_per_device == 0 {
            return Err(bad("synth.n_per_device must be positive"));
        }
        self.synth.truth.validate().map_err(|e| bad(e.to_string()))?;
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Seed of a named module stream.
    pub fn stream_seed(&self, stream: &str) -> u64 {
        derive_seed(self.seed, stream, 0)
    }

    pub fn cleaning_config(&self) -> CleaningConfig {
        CleaningConfig {
            sf_keep: self.cleaning.sf_keep.iter().copied().collect(),
            contamination: self.cleaning.contamination,
            iforest_trees: self.cleaning.iforest_trees,
            iforest_subsample: self.cleaning.iforest_subsample,
            seed: self.stream_seed("clean"),
        }
    }

    pub fn feature_spec(&self, kind: FeatureKind) -> FeatureSpec {
        FeatureSpec {
            kind,
            d0_m: self.features.d0_m,
            include_snr: self.features.include_snr,
            freq_handling: self.features.freq_handling,
        }
    }

    pub fn cv_options(&self) -> CvOptions {
        CvOptions {
            tol: self.cv.tol,
            max_iter: self.cv.max_iter,
        }
    }

    pub fn gmm_options(&self, k: usize) -> GmmOptions {
        GmmOptions {
            k,
            n_init: self.residuals.gmm_n_init,
            var_floor: self.residuals.var_floor,
            seed: self.stream_seed("gmm"),
            ..GmmOptions::default()
        }
    }

    pub fn calibration_options(&self) -> CalibrationOptions {
        let base = CalibrationOptions::default();
        CalibrationOptions {
            targets: self.fade_margin.targets.clone(),
            replicates: Some(self.fade_margin.replicates),
            method: self.fade_margin.method,
            level: self.fade_margin.level,
            seed: self.stream_seed("fade-margin"),
            gmm: GmmOptions {
                var_floor: self.residuals.var_floor,
                ..base.gmm
            },
        }
    }

    pub fn model(&self, name: &str) -> Result<&ModelEntry, CliError> {
        self.models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| bad(format!("unknown model {name}")))
    }
}

//! Campaign records: CSV ingestion, cleaning (dedup, spreading-factor filter,
//! isolation-forest screen) and the per-device chronological hold-out.

mod iforest;

pub use iforest::{average_path_length, isolation_forest_scores, top_scores};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Names of the five environmental covariates, in record order.
pub const ENV_NAMES: [&str; 5] = ["co2", "rh", "temp", "bp", "pm25"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WallCounts {
    pub brick: u32,
    pub wood: u32,
}

impl WallCounts {
    pub fn total(&self) -> u32 {
        self.brick + self.wood
    }
}

/// One uplink observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignRecord {
    pub device_id: String,
    /// UTC seconds.
    pub timestamp: f64,
    pub distance_m: f64,
    pub walls: WallCounts,
    /// CO₂ ppm, relative humidity %, temperature °C, pressure hPa, PM2.5 µg/m³.
    pub env: [f64; 5],
    pub snr_db: f64,
    pub sf: u8,
    pub freq_mhz: f64,
    pub path_loss_db: f64,
}

impl CampaignRecord {
    fn dedup_key(&self) -> (String, u64, u64, u64) {
        (
            self.device_id.clone(),
            self.timestamp.to_bits(),
            self.path_loss_db.to_bits(),
            self.snr_db.to_bits(),
        )
    }

    /// Every variable of the additive mean model, as one numeric row.
    pub fn model_variables(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(11);
        v.push(self.distance_m);
        v.push(f64::from(self.walls.brick));
        v.push(f64::from(self.walls.wood));
        v.extend_from_slice(&self.env);
        v.push(self.snr_db);
        v.push(self.freq_mhz);
        v.push(self.path_loss_db);
        v
    }

    pub fn is_los(&self) -> bool {
        self.walls.total() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampFormat {
    #[default]
    Auto,
    Unix,
    Iso8601,
}

/// Column names for each record field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnSchema {
    pub device_id: String,
    pub timestamp: String,
    pub distance: String,
    pub walls_brick: String,
    pub walls_wood: String,
    pub co2: String,
    pub rh: String,
    pub temp: String,
    pub bp: String,
    pub pm25: String,
    pub snr: String,
    pub sf: String,
    pub freq: String,
    pub path_loss: String,
    pub timestamp_format: TimestampFormat,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            device_id: "device_id".into(),
            timestamp: "timestamp".into(),
            distance: "distance_m".into(),
            walls_brick: "walls_brick".into(),
            walls_wood: "walls_wood".into(),
            co2: "co2_ppm".into(),
            rh: "rh_pct".into(),
            temp: "temp_c".into(),
            bp: "pressure_hpa".into(),
            pm25: "pm25_ugm3".into(),
            snr: "snr_db".into(),
            sf: "sf".into(),
            freq: "freq_mhz".into(),
            path_loss: "path_loss_db".into(),
            timestamp_format: TimestampFormat::Auto,
        }
    }
}

impl ColumnSchema {
    fn names(&self) -> [&str; 14] {
        [
            &self.device_id,
            &self.timestamp,
            &self.distance,
            &self.walls_brick,
            &self.walls_wood,
            &self.co2,
            &self.rh,
            &self.temp,
            &self.bp,
            &self.pm25,
            &self.snr,
            &self.sf,
            &self.freq,
            &self.path_loss,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub line: usize,
    pub reason: String,
}

/// Parsed records plus every rejected row.
#[derive(Debug, Clone, Default)]
pub struct ParsedCampaign {
    pub records: Vec<CampaignRecord>,
    pub row_errors: Vec<RowError>,
}

pub fn parse_campaign_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<ParsedCampaign> {
    let file = std::fs::File::open(path)?;
    read_campaign(file, schema)
}

pub fn read_campaign<R: Read>(reader: R, schema: &ColumnSchema) -> Result<ParsedCampaign> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyFile);
    }
    let mut index = [0usize; 14];
    for (slot, name) in index.iter_mut().zip(schema.names()) {
        let hits: Vec<usize> = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| *h == name)
            .map(|(i, _)| i)
            .collect();
        match hits.as_slice() {
            [i] => *slot = *i,
            [] => return Err(Error::MissingColumn(name.to_string())),
            _ => return Err(Error::MissingColumn(format!("{name} (duplicated header)"))),
        }
    }

    let mut out = ParsedCampaign::default();
    for (row_no, row) in rdr.records().enumerate() {
        let line = row
            .as_ref()
            .ok()
            .and_then(|r| r.position().map(|p| p.line() as usize))
            .unwrap_or(row_no + 2);
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.row_errors.push(RowError { line, reason: e.to_string() });
                continue;
            }
        };
        match parse_row(&row, &index, schema.timestamp_format) {
            Ok(rec) => out.records.push(rec),
            Err(reason) => out.row_errors.push(RowError { line, reason }),
        }
    }
    Ok(out)
}

fn parse_row(row: &csv::StringRecord, idx: &[usize; 14], ts_format: TimestampFormat) -> std::result::Result<CampaignRecord, String> {
    let field = |k: usize| row.get(idx[k]).ok_or_else(|| format!("missing field {}", k + 1));
    let num = |k: usize, what: &str| -> std::result::Result<f64, String> {
        let raw = field(k)?;
        let v: f64 = raw.parse().map_err(|_| format!("{what}: cannot parse {raw:?}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("{what}: non-finite value"))
        }
    };
    let count = |k: usize, what: &str| -> std::result::Result<u32, String> {
        let v = num(k, what)?;
        if v < 0.0 || v.fract() != 0.0 || v > f64::from(u32::MAX) {
            return Err(format!("{what}: expected a non-negative integer, got {v}"));
        }
        Ok(v as u32)
    };

    let device_id = field(0)?.to_string();
    if device_id.is_empty() {
        return Err("device id is empty".into());
    }
    let timestamp = parse_timestamp(field(1)?, ts_format)?;
    let distance_m = num(2, "distance")?;
    if distance_m <= 0.0 {
        return Err(format!("distance must be positive, got {distance_m}"));
    }
    let walls = WallCounts {
        brick: count(3, "brick walls")?,
        wood: count(4, "wood walls")?,
    };
    let env = [
        num(5, "co2")?,
        num(6, "relative humidity")?,
        num(7, "temperature")?,
        num(8, "pressure")?,
        num(9, "pm2.5")?,
    ];
    let snr_db = num(10, "snr")?;
    let sf_raw = num(11, "spreading factor")?;
    if sf_raw.fract() != 0.0 || !(7.0..=12.0).contains(&sf_raw) {
        return Err(format!("spreading factor must be an integer in 7..=12, got {sf_raw}"));
    }
    let freq_mhz = num(12, "frequency")?;
    if freq_mhz <= 0.0 {
        return Err(format!("frequency must be positive, got {freq_mhz}"));
    }
    let path_loss_db = num(13, "path loss")?;
    Ok(CampaignRecord {
        device_id,
        timestamp,
        distance_m,
        walls,
        env,
        snr_db,
        sf: sf_raw as u8,
        freq_mhz,
        path_loss_db,
    })
}

/// Parses UNIX seconds or an ISO-8601 timestamp (naive values are UTC).
pub fn parse_timestamp(raw: &str, format: TimestampFormat) -> std::result::Result<f64, String> {
    let as_unix = || -> Option<f64> { raw.parse::<f64>().ok().filter(|v| v.is_finite()) };
    let as_iso = || -> Option<f64> {
        if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
            return Some(dt.timestamp() as f64 + f64::from(dt.timestamp_subsec_nanos()) * 1e-9);
        }
        for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
            if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
                let utc = dt.and_utc();
                return Some(utc.timestamp() as f64 + f64::from(utc.timestamp_subsec_nanos()) * 1e-9);
            }
        }
        None
    };
    let parsed = match format {
        TimestampFormat::Unix => as_unix(),
        TimestampFormat::Iso8601 => as_iso(),
        TimestampFormat::Auto => as_unix().or_else(as_iso),
    };
    parsed.ok_or_else(|| format!("cannot parse timestamp {raw:?}"))
}

/// Writes records with the default column schema.
pub fn write_campaign<W: Write>(records: &[CampaignRecord], writer: W) -> Result<()> {
    let schema = ColumnSchema::default();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(schema.names())?;
    for r in records {
        w.write_record([
            r.device_id.clone(),
            fmt_f64(r.timestamp),
            fmt_f64(r.distance_m),
            r.walls.brick.to_string(),
            r.walls.wood.to_string(),
            fmt_f64(r.env[0]),
            fmt_f64(r.env[1]),
            fmt_f64(r.env[2]),
            fmt_f64(r.env[3]),
            fmt_f64(r.env[4]),
            fmt_f64(r.snr_db),
            r.sf.to_string(),
            fmt_f64(r.freq_mhz),
            fmt_f64(r.path_loss_db),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same bits.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningConfig {
    pub sf_keep: BTreeSet<u8>,
    pub contamination: f64,
    pub iforest_trees: usize,
    pub iforest_subsample: usize,
    pub seed: u64,
}

impl CleaningConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            sf_keep: (7..=10).collect(),
            contamination: 0.01,
            iforest_trees: 100,
            iforest_subsample: 256,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sf_keep.is_empty() || self.sf_keep.iter().any(|sf| !(7..=12).contains(sf)) {
            return Err(Error::invalid("sf_keep must be a non-empty subset of 7..=12"));
        }
        if !(self.contamination > 0.0 && self.contamination < 0.5) {
            return Err(Error::invalid("contamination must lie in (0, 0.5)"));
        }
        if self.iforest_trees == 0 || self.iforest_subsample < 2 {
            return Err(Error::invalid("isolation forest needs >= 1 tree and subsample >= 2"));
        }
        Ok(())
    }
}

/// Rows removed per cleaning stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropLedger {
    pub input: usize,
    pub duplicates: usize,
    pub sf_filter: usize,
    pub outliers: usize,
    pub kept: usize,
}

impl DropLedger {
    pub fn dropped(&self) -> usize {
        self.duplicates + self.sf_filter + self.outliers
    }
}

#[derive(Debug, Clone)]
pub struct CleanOutput {
    pub kept: Vec<CampaignRecord>,
    pub ledger: DropLedger,
    /// Isolation-forest flags, as rows of the deduplicated SF-filtered pool.
    pub outlier_rows: Vec<CampaignRecord>,
}

/// Removes repeats of (device, timestamp, path loss, SNR), keeping the first
/// occurrence.
pub fn deduplicate(records: &[CampaignRecord]) -> Vec<&CampaignRecord> {
    let mut seen = HashSet::new();
    records.iter().filter(|r| seen.insert(r.dedup_key())).collect()
}

/// Deduplicates, applies the spreading-factor filter and removes the
/// `⌈contamination·n⌉` highest isolation-forest scores, in that order.
/// Kept rows preserve input order.
pub fn clean(records: &[CampaignRecord], config: &CleaningConfig) -> Result<CleanOutput> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::invalid("no records to clean"));
    }
    let mut ledger = DropLedger {
        input: records.len(),
        ..Default::default()
    };

    let deduped = deduplicate(records);
    ledger.duplicates = records.len() - deduped.len();

    let filtered: Vec<&CampaignRecord> = deduped.into_iter().filter(|r| config.sf_keep.contains(&r.sf)).collect();
    ledger.sf_filter = records.len() - ledger.duplicates - filtered.len();

    let n = filtered.len();
    let n_flag = (config.contamination * n as f64).ceil() as usize;
    let flagged: Vec<usize> = if n == 0 {
        Vec::new()
    } else if n < 2 {
        (0..n).collect()
    } else {
        let rows: Vec<Vec<f64>> = filtered.iter().map(|r| r.model_variables()).collect();
        let subsample = config.iforest_subsample.min(n);
        let scores = isolation_forest_scores(&rows, config.iforest_trees, subsample, config.seed)?;
        top_scores(&scores, n_flag)
    };
    ledger.outliers = flagged.len();

    let flagged_set: HashSet<usize> = flagged.iter().copied().collect();
    let mut kept = Vec::with_capacity(n - flagged.len());
    let mut outlier_rows = Vec::with_capacity(flagged.len());
    for (i, r) in filtered.into_iter().enumerate() {
        if flagged_set.contains(&i) {
            outlier_rows.push(r.clone());
        } else {
            kept.push(r.clone());
        }
    }
    ledger.kept = kept.len();
    if kept.is_empty() {
        return Err(Error::AllRowsDropped);
    }
    Ok(CleanOutput {
        kept,
        ledger,
        outlier_rows,
    })
}

/// Per-device chronological split: the earliest `ceil((1 - test_fraction)·n)`
/// records of each device train, the rest test. Both outputs keep input order.
pub fn chronological_split(records: &[CampaignRecord], test_fraction: f64) -> Result<(Vec<CampaignRecord>, Vec<CampaignRecord>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid("test_fraction must lie in (0, 1)"));
    }
    let mut by_device: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_device.entry(r.device_id.as_str()).or_default().push(i);
    }
    let mut is_train = vec![false; records.len()];
    for (device, mut idx) in by_device {
        let n = idx.len();
        if n < 2 {
            return Err(Error::DeviceTooSmall(device.to_string()));
        }
        idx.sort_by(|&a, &b| records[a].timestamp.total_cmp(&records[b].timestamp).then(a.cmp(&b)));
        let share = (1.0 - test_fraction) * n as f64;
        let n_train = ((share - 1e-9).ceil() as usize).clamp(1, n - 1);
        for &i in &idx[..n_train] {
            is_train[i] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = records.iter().zip(is_train).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(r, _)| r.clone()).collect(),
        test.into_iter().map(|(r, _)| r.clone()).collect(),
    ))
}

//! Design matrices for the additive multi-wall model and its second-order
//! polynomial extension, plus train-only standardization.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::campaign::{CampaignRecord, ENV_NAMES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Linear,
    Poly2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqHandling {
    /// Single-frequency campaigns: `20·log10(f)` is a constant in the intercept.
    #[default]
    AbsorbIntoIntercept,
    /// Subtract `20·log10(f)` from the response row by row.
    ExplicitOffset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    pub d0_m: f64,
    pub include_snr: bool,
    pub freq_handling: FreqHandling,
}

impl FeatureSpec {
    pub fn linear() -> Self {
        Self {
            kind: FeatureKind::Linear,
            d0_m: 1.0,
            include_snr: true,
            freq_handling: FreqHandling::AbsorbIntoIntercept,
        }
    }

    pub fn poly2() -> Self {
        Self {
            kind: FeatureKind::Poly2,
            ..Self::linear()
        }
    }

    /// Number of continuous drivers `q` (distance, environment, SNR).
    pub fn drivers(&self) -> usize {
        ENV_NAMES.len() + if self.include_snr { 2 } else { 1 }
    }

    pub fn column_count(&self) -> usize {
        let q = self.drivers();
        match self.kind {
            FeatureKind::Linear => q + 2,
            FeatureKind::Poly2 => 2 + q * (q + 3) / 2,
        }
    }
}

/// Which group of the mean model a column belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnBlock {
    Structure,
    Walls,
    Environment,
    Snr,
    Interaction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub block: ColumnBlock,
    /// The monomial as a multiset of driver names (`z_d^2` → `["z_d", "z_d"]`).
    pub factors: Vec<String>,
}

/// Regressors (without intercept), response, and the scaling applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub columns: Vec<Column>,
    pub values: DMatrix<f64>,
    pub response: DVector<f64>,
    pub standardizer: Option<Standardizer>,
}

impl DesignMatrix {
    pub fn new(columns: Vec<Column>, values: DMatrix<f64>, response: DVector<f64>) -> Result<Self> {
        if values.ncols() != columns.len() || values.nrows() != response.len() {
            return Err(Error::invalid("design shape does not match columns/response"));
        }
        if values.iter().chain(response.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("design contains NaN or infinite entries"));
        }
        Ok(Self {
            columns,
            values,
            response,
            standardizer: None,
        })
    }

    /// Plain numeric design; every column is tagged as structure.
    pub fn from_columns(names: &[&str], values: DMatrix<f64>, response: DVector<f64>) -> Result<Self> {
        let columns = names
            .iter()
            .map(|n| Column {
                name: n.to_string(),
                block: ColumnBlock::Structure,
                factors: vec![n.to_string()],
            })
            .collect();
        Self::new(columns, values, response)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        let values = self.values.select_rows(rows);
        let response = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.response[i]));
        DesignMatrix {
            columns: self.columns.clone(),
            values,
            response,
            standardizer: self.standardizer.clone(),
        }
    }

    /// Sub-design with the named columns, in the given order.
    pub fn select_columns(&self, names: &[&str]) -> Result<DesignMatrix> {
        let idx = names
            .iter()
            .map(|n| self.column_index(n).ok_or_else(|| Error::ColumnMismatch(format!("no column {n}"))))
            .collect::<Result<Vec<_>>>()?;
        let standardizer = match &self.standardizer {
            Some(s) => Some(s.subset(&idx)),
            None => None,
        };
        Ok(DesignMatrix {
            columns: idx.iter().map(|&i| self.columns[i].clone()).collect(),
            values: self.values.select_columns(&idx),
            response: self.response.clone(),
            standardizer,
        })
    }

    /// Columns whose block is in `blocks`.
    pub fn block_names(&self, blocks: &[ColumnBlock]) -> Vec<&str> {
        self.columns
            .iter()
            .filter(|c| blocks.contains(&c.block))
            .map(|c| c.name.as_str())
            .collect()
    }

    /// CSV with one header row of column names and a trailing response column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.names();
        header.push("response");
        w.write_record(&header)?;
        for i in 0..self.nrows() {
            let mut row: Vec<String> = self.values.row(i).iter().map(|v| format!("{v:?}")).collect();
            row.push(format!("{:?}", self.response[i]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `10·log10(d / d0)`.
pub fn linearize_distance(d: f64, d0: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::NonPositiveDistance(d));
    }
    if !(d0 > 0.0) {
        return Err(Error::NonPositiveDistance(d0));
    }
    Ok(10.0 * (d / d0).log10())
}

fn driver_block(name: &str) -> ColumnBlock {
    match name {
        "z_d" => ColumnBlock::Structure,
        "snr" => ColumnBlock::Snr,
        _ => ColumnBlock::Environment,
    }
}

/// Builds the design for `records`.
///
/// Linear: `[z_d, w_brick, w_wood, co2, rh, temp, bp, pm25, snr]`.
/// Poly2: the two wall counts, then the linear drivers
/// `u = [z_d, co2, rh, temp, bp, pm25, snr]`, then every product `u_i·u_j`
/// with `i <= j` in row-major order. Walls never enter squares or products.
pub fn build_design(records: &[CampaignRecord], spec: &FeatureSpec) -> Result<DesignMatrix> {
    if records.is_empty() {
        return Err(Error::invalid("cannot build a design from zero records"));
    }
    if spec.freq_handling == FreqHandling::AbsorbIntoIntercept {
        let f0 = records[0].freq_mhz;
        if records.iter().any(|r| r.freq_mhz != f0) {
            return Err(Error::InconsistentFrequency);
        }
    }

    let mut drivers: Vec<&str> = vec!["z_d"];
    drivers.extend(ENV_NAMES);
    if spec.include_snr {
        drivers.push("snr");
    }
    let q = drivers.len();

    let mut columns = Vec::with_capacity(spec.column_count());
    let wall = |name: &str| Column {
        name: name.into(),
        block: ColumnBlock::Walls,
        factors: vec![name.into()],
    };
    let linear = |name: &str| Column {
        name: name.into(),
        block: driver_block(name),
        factors: vec![name.into()],
    };
    match spec.kind {
        FeatureKind::Linear => {
            columns.push(linear("z_d"));
            columns.push(wall("w_brick"));
            columns.push(wall("w_wood"));
            for name in &drivers[1..] {
                columns.push(linear(name));
            }
        }
        FeatureKind::Poly2 => {
            columns.push(wall("w_brick"));
            columns.push(wall("w_wood"));
            for name in &drivers {
                columns.push(linear(name));
            }
            for i in 0..q {
                for j in i..q {
                    let (a, b) = (drivers[i], drivers[j]);
                    columns.push(if i == j {
                        Column {
                            name: format!("{a}^2"),
                            block: driver_block(a),
                            factors: vec![a.into(), a.into()],
                        }
                    } else {
                        Column {
                            name: format!("{a}*{b}"),
                            block: ColumnBlock::Interaction,
                            factors: vec![a.into(), b.into()],
                        }
                    });
                }
            }
        }
    }

    let n = records.len();
    let p = columns.len();
    let mut values = DMatrix::<f64>::zeros(n, p);
    let mut response = DVector::<f64>::zeros(n);
    let mut u = vec![0.0; q];
    for (row, r) in records.iter().enumerate() {
        u[0] = linearize_distance(r.distance_m, spec.d0_m)?;
        u[1..6].copy_from_slice(&r.env);
        if spec.include_snr {
            u[6] = r.snr_db;
        }
        let brick = f64::from(r.walls.brick);
        let wood = f64::from(r.walls.wood);
        match spec.kind {
            FeatureKind::Linear => {
                values[(row, 0)] = u[0];
                values[(row, 1)] = brick;
                values[(row, 2)] = wood;
                for k in 1..q {
                    values[(row, k + 2)] = u[k];
                }
            }
            FeatureKind::Poly2 => {
                values[(row, 0)] = brick;
                values[(row, 1)] = wood;
                for k in 0..q {
                    values[(row, 2 + k)] = u[k];
                }
                let mut c = 2 + q;
                for i in 0..q {
                    for j in i..q {
                        values[(row, c)] = u[i] * u[j];
                        c += 1;
                    }
                }
            }
        }
        response[row] = match spec.freq_handling {
            FreqHandling::AbsorbIntoIntercept => r.path_loss_db,
            FreqHandling::ExplicitOffset => r.path_loss_db - 20.0 * r.freq_mhz.log10(),
        };
    }
    DesignMatrix::new(columns, values, response)
}

/// Per-column location and scale fitted on a subset of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    /// Population (1/n) standard deviations.
    pub stds: Vec<f64>,
    /// Zero-spread columns; these pass through unscaled.
    pub constant: Vec<bool>,
}

impl Standardizer {
    fn subset(&self, idx: &[usize]) -> Standardizer {
        Standardizer {
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            means: idx.iter().map(|&i| self.means[i]).collect(),
            stds: idx.iter().map(|&i| self.stds[i]).collect(),
            constant: idx.iter().map(|&i| self.constant[i]).collect(),
        }
    }

    /// Location and divisor actually applied to column `j`.
    pub fn shift_scale(&self, j: usize) -> (f64, f64) {
        if self.constant[j] {
            (0.0, 1.0)
        } else {
            (self.means[j], self.stds[j])
        }
    }

    pub fn constant_columns(&self) -> Vec<&str> {
        self.names
            .iter()
            .zip(&self.constant)
            .filter(|(_, c)| **c)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

pub fn fit_standardizer(design: &DesignMatrix, rows: &[usize]) -> Result<Standardizer> {
    if rows.is_empty() {
        return Err(Error::invalid("standardizer needs at least one row"));
    }
    let p = design.ncols();
    let n = rows.len() as f64;
    let mut means = vec![0.0; p];
    let mut stds = vec![0.0; p];
    let mut constant = vec![false; p];
    for j in 0..p {
        let col = design.values.column(j);
        let mean = rows.iter().map(|&i| col[i]).sum::<f64>() / n;
        let var = rows.iter().map(|&i| (col[i] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        means[j] = mean;
        stds[j] = sd;
        constant[j] = !(sd > 1e-12 * mean.abs().max(1.0));
    }
    Ok(Standardizer {
        names: design.columns.iter().map(|c| c.name.clone()).collect(),
        means,
        stds,
        constant,
    })
}

/// Applies `(x - mean) / std` to every row of `design`.
pub fn apply_standardizer(std: &Standardizer, design: &DesignMatrix) -> Result<DesignMatrix> {
    if design.standardizer.is_some() {
        return Err(Error::invalid("design is already standardized"));
    }
    if std.names.len() != design.ncols() || std.names.iter().zip(&design.columns).any(|(a, b)| *a != b.name) {
        return Err(Error::ColumnMismatch("standardizer columns differ from the design".into()));
    }
    let mut values = design.values.clone();
    for j in 0..values.ncols() {
        let (shift, scale) = std.shift_scale(j);
        for v in values.column_mut(j).iter_mut() {
            *v = (*v - shift) / scale;
        }
    }
    Ok(DesignMatrix {
        columns: design.columns.clone(),
        values,
        response: design.response.clone(),
        standardizer: Some(std.clone()),
    })
}

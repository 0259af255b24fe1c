//! Tabular input: CSV/JSON loading, validation, opt-in standardization and PCA.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// N×D matrix of finite features with optional gold labels.
///
/// The rows are the support of the empirical distribution every other module
/// averages over, so the invariants (N ≥ 1, D ≥ 1, all finite) are checked on
/// construction and the type is immutable afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Array2<f64>,
    gold_labels: Option<Vec<String>>,
    point_ids: Vec<String>,
    feature_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with generated ids (`"0"`, `"1"`, ...) and feature names (`f0`, ...).
    pub fn new(points: Array2<f64>, gold_labels: Option<Vec<String>>) -> Result<Self> {
        let ids = (0..points.nrows()).map(|j| j.to_string()).collect();
        let names = (0..points.ncols()).map(|d| format!("f{d}")).collect();
        Self::with_metadata(points, gold_labels, ids, names)
    }

    pub fn with_metadata(
        points: Array2<f64>,
        gold_labels: Option<Vec<String>>,
        point_ids: Vec<String>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let (n, d) = points.dim();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if d == 0 {
            return Err(Error::InvalidDataset("no feature columns".into()));
        }
        if let Some((j, _)) = points
            .axis_iter(Axis(0))
            .enumerate()
            .find(|(_, row)| row.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidDataset(format!("non-finite value in row {j}")));
        }
        if let Some(labels) = &gold_labels {
            if labels.len() != n {
                return Err(Error::InvalidDataset(format!(
                    "{} gold labels for {n} points",
                    labels.len()
                )));
            }
        }
        if point_ids.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{} point ids for {n} points",
                point_ids.len()
            )));
        }
        if feature_names.len() != d {
            return Err(Error::InvalidDataset(format!(
                "{} feature names for {d} columns",
                feature_names.len()
            )));
        }
        Ok(Dataset {
            points,
            gold_labels,
            point_ids,
            feature_names,
        })
    }

    /// Array-of-arrays input, as accepted by the service layer.
    pub fn from_rows(rows: &[Vec<f64>], gold_labels: Option<Vec<String>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let d = rows[0].len();
        if let Some((j, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(Error::InvalidDataset(format!(
                "row {j} has {} values, expected {d}",
                r.len()
            )));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let points = Array2::from_shape_vec((n, d), flat)
            .map_err(|e| Error::InvalidDataset(e.to_string()))?;
        Self::new(points, gold_labels)
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn row(&self, j: usize) -> ArrayView1<'_, f64> {
        self.points.row(j)
    }

    pub fn gold_labels(&self) -> Option<&[String]> {
        self.gold_labels.as_deref()
    }

    pub fn point_ids(&self) -> &[String] {
        &self.point_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Per-dimension variance with divisor N.
    pub fn feature_variances(&self) -> Array1<f64> {
        let mean = self.points.mean_axis(Axis(0)).expect("n >= 1");
        let n = self.n() as f64;
        let mut var = Array1::zeros(self.dim());
        for row in self.points.axis_iter(Axis(0)) {
            for ((v, &x), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                *v += (x - m) * (x - m);
            }
        }
        var / n
    }

    /// Opt-in z-scoring. Constant columns are centred but left unscaled.
    pub fn standardized(&self) -> Dataset {
        let mean = self.points.mean_axis(Axis(0)).expect("n >= 1");
        let std = self.feature_variances().mapv(f64::sqrt);
        let mut points = &self.points - &mean;
        for (mut col, &s) in points.axis_iter_mut(Axis(1)).zip(std.iter()) {
            if s > 0.0 {
                col /= s;
            }
        }
        Dataset {
            points,
            ..self.clone()
        }
    }

    /// Drops the gold labels, keeping ids.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            gold_labels: None,
            ..self.clone()
        }
    }

    /// Writes the dataset as CSV: feature columns, then `label` if present.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        if self.gold_labels.is_some() {
            header.push("label");
        }
        w.write_record(&header).map_err(csv_write_err)?;
        for (j, row) in self.points.axis_iter(Axis(0)).enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            if let Some(labels) = &self.gold_labels {
                rec.push(labels[j].clone());
            }
            w.write_record(&rec).map_err(csv_write_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_write_err(e: csv::Error) -> Error {
    Error::MalformedCsv {
        row: 0,
        message: e.to_string(),
    }
}

/// Column roles for CSV loading.
#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    pub label_column: Option<String>,
    pub id_column: Option<String>,
}

/// Loads a headered CSV; every column except the label column is a feature.
pub fn load_csv<R: Read>(source: R, label_column: Option<&str>) -> Result<Dataset> {
    load_csv_with(
        source,
        &CsvOptions {
            label_column: label_column.map(str::to_owned),
            id_column: None,
        },
    )
}

/// Like [`load_csv`] but can also take point ids from a named column.
///
/// Row numbers in errors are 1-based data rows (the header is row 0).
pub fn load_csv_with<R: Read>(source: R, opts: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let header = rdr
        .headers()
        .map_err(|e| Error::MalformedCsv {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::EmptyInput);
    }
    let find = |name: &str| header.iter().position(|h| h == name);
    let label_idx = match &opts.label_column {
        Some(name) => Some(find(name).ok_or_else(|| Error::MissingLabelColumn(name.clone()))?),
        None => None,
    };
    let id_idx = match &opts.id_column {
        Some(name) => Some(find(name).ok_or_else(|| {
            Error::InvalidDataset(format!("id column {name:?} not found in header"))
        })?),
        None => None,
    };
    let feature_idx: Vec<usize> = (0..header.len())
        .filter(|&i| Some(i) != label_idx && Some(i) != id_idx)
        .collect();
    if feature_idx.is_empty() {
        return Err(Error::InvalidDataset("no feature columns".into()));
    }

    let mut flat = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::MalformedCsv {
            row,
            message: e.to_string(),
        })?;
        for &i in &feature_idx {
            let cell = &rec[i];
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => flat.push(v),
                _ => {
                    return Err(Error::NonNumericCell {
                        row,
                        column: header[i].to_string(),
                        value: cell.to_string(),
                    })
                }
            }
        }
        if let Some(i) = label_idx {
            labels.push(rec[i].to_string());
        }
        ids.push(match id_idx {
            Some(i) => rec[i].to_string(),
            None => (row - 1).to_string(),
        });
    }
    if ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = ids.len();
    let points = Array2::from_shape_vec((n, feature_idx.len()), flat)
        .map_err(|e| Error::InvalidDataset(e.to_string()))?;
    let names = feature_idx.iter().map(|&i| header[i].to_string()).collect();
    Dataset::with_metadata(points, label_idx.map(|_| labels), ids, names)
}

/// Serializable form used in session documents and the HTTP API.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetDoc {
    pub feature_names: Vec<String>,
    pub point_ids: Vec<String>,
    pub points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_labels: Option<Vec<String>>,
}

impl From<&Dataset> for DatasetDoc {
    fn from(d: &Dataset) -> Self {
        DatasetDoc {
            feature_names: d.feature_names.clone(),
            point_ids: d.point_ids.clone(),
            points: d.points.outer_iter().map(|r| r.to_vec()).collect(),
            gold_labels: d.gold_labels.clone(),
        }
    }
}

impl TryFrom<DatasetDoc> for Dataset {
    type Error = Error;

    fn try_from(doc: DatasetDoc) -> Result<Self> {
        let base = Dataset::from_rows(&doc.points, None)?;
        Dataset::with_metadata(base.points, doc.gold_labels, doc.point_ids, doc.feature_names)
    }
}

/// Centring vector plus an orthonormal D×D′ basis of principal directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    mean: Vec<f64>,
    /// Column-major list of basis vectors: `basis[c]` is the c-th direction.
    basis: Vec<Vec<f64>>,
    explained_variance_fraction: f64,
    eigenvalues: Vec<f64>,
}

impl PcaProjection {
    /// Builds a projection from explicit columns, checking orthonormality to 1e-8.
    pub fn new(mean: Vec<f64>, columns: Vec<Vec<f64>>, explained_variance_fraction: f64) -> Result<Self> {
        let d = mean.len();
        if columns.is_empty() || columns.len() > d {
            return Err(Error::InvalidParams(format!(
                "basis must have between 1 and {d} columns"
            )));
        }
        for (a, ca) in columns.iter().enumerate() {
            if ca.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: ca.len(),
                });
            }
            for (b, cb) in columns.iter().enumerate() {
                let dot: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                if (dot - target).abs() > 1e-8 {
                    return Err(Error::InvalidParams("basis columns are not orthonormal".into()));
                }
            }
        }
        if !(explained_variance_fraction > 0.0 && explained_variance_fraction <= 1.0 + 1e-12) {
            return Err(Error::InvalidVarianceFraction(explained_variance_fraction));
        }
        Ok(PcaProjection {
            mean,
            basis: columns,
            explained_variance_fraction,
            eigenvalues: Vec::new(),
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// D×D′ basis matrix.
    pub fn basis(&self) -> Array2<f64> {
        let d = self.mean.len();
        Array2::from_shape_fn((d, self.basis.len()), |(r, c)| self.basis[c][r])
    }

    pub fn output_dim(&self) -> usize {
        self.basis.len()
    }

    pub fn explained_variance_fraction(&self) -> f64 {
        self.explained_variance_fraction
    }

    /// Eigenvalues of the retained components, descending. Empty for hand-built projections.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
}

/// Smallest set of leading principal components explaining `variance_fraction`
/// of the total variance (sample covariance, divisor N−1).
pub fn fit_pca(data: &Dataset, variance_fraction: f64) -> Result<PcaProjection> {
    if !(variance_fraction > 0.0 && variance_fraction <= 1.0) {
        return Err(Error::InvalidVarianceFraction(variance_fraction));
    }
    let n = data.n();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, found: n });
    }
    let d = data.dim();
    let mean = data.points.mean_axis(Axis(0)).expect("n >= 1");
    let centred = &data.points - &mean;
    let cov = centred.t().dot(&centred) / (n as f64 - 1.0);
    let total: f64 = cov.diag().sum();
    if total <= 0.0 {
        return Err(Error::ZeroVariance);
    }

    let m = DMatrix::from_fn(d, d, |r, c| cov[[r, c]]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let eig_total: f64 = eigenvalues.iter().sum();
    let mut keep = d;
    let mut cum = 0.0;
    for (c, &ev) in eigenvalues.iter().enumerate() {
        cum += ev;
        if cum / eig_total >= variance_fraction - 1e-12 {
            keep = c + 1;
            break;
        }
    }
    let explained = (eigenvalues[..keep].iter().sum::<f64>() / eig_total).min(1.0);

    let basis = order[..keep]
        .iter()
        .map(|&i| {
            let mut col: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            // Sign convention: the largest-magnitude entry is positive.
            let pivot = col
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(1.0);
            if pivot < 0.0 {
                col.iter_mut().for_each(|v| *v = -*v);
            }
            col
        })
        .collect();

    Ok(PcaProjection {
        mean: mean.to_vec(),
        basis,
        explained_variance_fraction: explained,
        eigenvalues: eigenvalues[..keep].to_vec(),
    })
}

/// Centres by the projection mean and projects onto its basis. Labels and ids carry over.
pub fn apply_pca(data: &Dataset, proj: &PcaProjection) -> Result<Dataset> {
    if data.dim() != proj.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: proj.mean.len(),
            found: data.dim(),
        });
    }
    let mean = Array1::from_vec(proj.mean.clone());
    let projected = (&data.points - &mean).dot(&proj.basis());
    let names = (0..proj.output_dim()).map(|c| format!("pc{c}")).collect();
    Dataset::with_metadata(
        projected,
        data.gold_labels.clone(),
        data.point_ids.clone(),
        names,
    )
}

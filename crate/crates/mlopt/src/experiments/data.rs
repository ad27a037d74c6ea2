//! Wine-quality CSV ingestion and deterministic train/validation splits.
//!
//! Files follow the UCI layout: semicolon-separated, quoted header, eleven
//! physico-chemical feature columns followed by an integer `quality` column.
//! Features and target are z-scored at load time (population std); the
//! normalization constants are kept so predictions can be mapped back.

use std::fs::File;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DataError, Error, Result};

pub const EXPECTED_FEATURES: usize = 11;

/// Which wine file to load from a data directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WineVariant {
    Red,
    White,
}

impl WineVariant {
    pub fn file_name(self) -> &'static str {
        match self {
            WineVariant::Red => "winequality-red.csv",
            WineVariant::White => "winequality-white.csv",
        }
    }
}

/// Per-column constants of the z-scoring applied at load time.
#[derive(Clone, Debug)]
pub struct Normalization {
    pub feature_mean: Array1<f64>,
    pub feature_std: Array1<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

/// A fully normalized regression table.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub target: Array1<f64>,
    pub feature_names: Vec<String>,
    pub normalization: Normalization,
    /// Where the rows came from, for error messages and manifests.
    pub source: String,
}

impl Dataset {
    /// Normalize raw columns into a dataset. Rejects non-finite entries and
    /// constant columns (their z-score is undefined).
    pub fn from_raw(
        features: Array2<f64>,
        target: Array1<f64>,
        feature_names: Vec<String>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let source = source.into();
        let rows = features.nrows();
        let cols = features.ncols();
        if rows == 0 || cols == 0 || target.len() != rows || feature_names.len() != cols {
            return Err(Error::Data(DataError::Format {
                path: source,
                message: format!(
                    "inconsistent table: {rows} rows, {cols} feature columns, {} targets, {} names",
                    target.len(),
                    feature_names.len()
                ),
            }));
        }
        if features.iter().chain(target.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data(DataError::Format {
                path: source,
                message: "non-finite value in table".into(),
            }));
        }

        let mut normalized = features;
        let mut feature_mean = Array1::zeros(cols);
        let mut feature_std = Array1::zeros(cols);
        for j in 0..cols {
            let mut col = normalized.column_mut(j);
            let mean = col.mean().unwrap();
            let std = col.mapv(|v| (v - mean) * (v - mean)).mean().unwrap().sqrt();
            if std < 1e-12 {
                return Err(Error::Data(DataError::Format {
                    path: source,
                    message: format!("column '{}' is constant", feature_names[j]),
                }));
            }
            col.mapv_inplace(|v| (v - mean) / std);
            feature_mean[j] = mean;
            feature_std[j] = std;
        }

        let target_mean = target.mean().unwrap();
        let target_std =
            target.mapv(|v| (v - target_mean) * (v - target_mean)).mean().unwrap().sqrt();
        if target_std < 1e-12 {
            return Err(Error::Data(DataError::Format {
                path: source,
                message: "target column is constant".into(),
            }));
        }
        let target = target.mapv(|v| (v - target_mean) / target_std);

        Ok(Dataset {
            features: normalized,
            target,
            feature_names,
            normalization: Normalization { feature_mean, feature_std, target_mean, target_std },
            source,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }
}

/// Load and normalize one of the wine tables from `dir`.
pub fn load_wine(dir: &Path, variant: WineVariant) -> Result<Dataset> {
    let path = dir.join(variant.file_name());
    let shown = path.display().to_string();
    let file = File::open(&path)
        .map_err(|source| Error::Data(DataError::Io { path: shown.clone(), source }))?;
    let mut reader =
        csv::ReaderBuilder::new().delimiter(b';').has_headers(true).from_reader(file);

    let header = reader.headers().map_err(|e| {
        Error::Data(DataError::Format { path: shown.clone(), message: e.to_string() })
    })?;
    let names: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    if names.len() != EXPECTED_FEATURES + 1 || names.last().map(String::as_str) != Some("quality")
    {
        return Err(Error::Data(DataError::Format {
            path: shown,
            message: format!(
                "expected {} feature columns plus 'quality', got header {:?}",
                EXPECTED_FEATURES, names
            ),
        }));
    }

    let mut rows: Vec<f64> = Vec::new();
    let mut target: Vec<f64> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let record = record.map_err(|e| {
            Error::Data(DataError::Malformed { path: shown.clone(), line, message: e.to_string() })
        })?;
        if record.len() != EXPECTED_FEATURES + 1 {
            return Err(Error::Data(DataError::Malformed {
                path: shown,
                line,
                message: format!("expected {} fields, got {}", EXPECTED_FEATURES + 1, record.len()),
            }));
        }
        for (j, field) in record.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| {
                Error::Data(DataError::Malformed {
                    path: shown.clone(),
                    line,
                    message: format!("field '{}' is not a number", field),
                })
            })?;
            if j < EXPECTED_FEATURES {
                rows.push(value);
            } else {
                target.push(value);
            }
        }
    }
    if target.is_empty() {
        return Err(Error::Data(DataError::Format { path: shown, message: "no data rows".into() }));
    }

    let features = Array2::from_shape_vec((target.len(), EXPECTED_FEATURES), rows)
        .expect("row-major table assembly");
    Dataset::from_raw(features, Array1::from(target), names[..EXPECTED_FEATURES].to_vec(), shown)
}

/// Disjoint validation/training row selections drawn without replacement.
#[derive(Clone, Debug)]
pub struct Split {
    pub valid_x: Array2<f64>,
    pub valid_y: Array1<f64>,
    pub train_x: Array2<f64>,
    pub train_y: Array1<f64>,
    pub valid_indices: Vec<usize>,
    pub train_indices: Vec<usize>,
}

/// Draw `m_valid + n_train` distinct rows seeded by `seed`: the first block
/// becomes the validation set, the second the training set. Deterministic
/// for a given `(dataset, m_valid, n_train, seed)`.
pub fn split(dataset: &Dataset, m_valid: usize, n_train: usize, seed: u64) -> Result<Split> {
    let rows = dataset.n_rows();
    if m_valid == 0 || n_train == 0 {
        return Err(Error::Config("split sizes must be at least 1".into()));
    }
    if m_valid + n_train > rows {
        return Err(Error::Config(format!(
            "split needs {} rows but the dataset has {rows}",
            m_valid + n_train
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, rows, m_valid + n_train).into_vec();
    let (valid_indices, train_indices) = picked.split_at(m_valid);

    let take = |idx: &[usize]| {
        (
            dataset.features.select(Axis(0), idx),
            idx.iter().map(|&i| dataset.target[i]).collect::<Array1<f64>>(),
        )
    };
    let (valid_x, valid_y) = take(valid_indices);
    let (train_x, train_y) = take(train_indices);
    Ok(Split {
        valid_x,
        valid_y,
        train_x,
        train_y,
        valid_indices: valid_indices.to_vec(),
        train_indices: train_indices.to_vec(),
    })
}

//! Adult census preprocessing and the local L2-regularised logistic trainer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegressionError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Schema { line: u64, message: String },

    #[error("input is already a preprocessed snapshot")]
    AlreadyPreprocessed,

    #[error("dataset is empty")]
    Empty,

    #[error("corrupt snapshot: {0}")]
    Snapshot(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("requested {requested} rows but only {available} are available")]
    Size { requested: usize, available: usize },

    #[error("weights became non-finite at iteration {0}")]
    Diverged(usize),

    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

type Result<T> = std::result::Result<T, RegressionError>;

/// Weight vector, one entry per feature column.
pub type Weights = Vec<f64>;

/// Row-major feature matrix with labels in {-1, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_cols: usize,
    labels: Vec<i8>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, n_cols: usize, labels: Vec<i8>) -> Result<Self> {
        if n_cols == 0 {
            return Err(RegressionError::Dimension { expected: 1, got: 0 });
        }
        if features.len() != labels.len() * n_cols {
            return Err(RegressionError::Dimension {
                expected: labels.len() * n_cols,
                got: features.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 1 && y != -1) {
            return Err(RegressionError::Snapshot(format!("label {bad} outside {{-1, +1}}")));
        }
        Ok(Self {
            features,
            n_cols,
            labels,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y > 0).count()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(rows.len() * self.n_cols);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Dataset {
            features,
            n_cols: self.n_cols,
            labels,
        }
    }

    /// SHA-256 of the snapshot payload, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.payload()))
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.features.len() * 8 + self.labels.len());
        out.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.n_cols as u64).to_le_bytes());
        for x in &self.features {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend(self.labels.iter().map(|&y| y as u8));
        out
    }
}

/// A client's local training sample.
pub type LocalData = Dataset;

const ADULT_COLUMNS: [&str; 15] = [
    "age",
    "workclass",
    "fnlwgt",
    "education",
    "education-num",
    "marital-status",
    "occupation",
    "relationship",
    "race",
    "sex",
    "capital-gain",
    "capital-loss",
    "hours-per-week",
    "native-country",
    "income",
];
const CONTINUOUS: [usize; 6] = [0, 2, 4, 10, 11, 12];
const CATEGORICAL: [usize; 8] = [1, 3, 5, 6, 7, 8, 9, 13];
const LABEL: usize = 14;

const SNAPSHOT_MAGIC: &[u8; 8] = b"PPFLDS1\0";

/// Missing values are dropped, continuous columns min-max scaled to [0, 1],
/// categoricals one-hot encoded over their sorted vocabulary, each row
/// L2-normalised, then a constant intercept column appended.
pub fn preprocess_adult<R: Read>(mut input: R) -> Result<Dataset> {
    let mut head = Vec::new();
    input
        .by_ref()
        .take(SNAPSHOT_MAGIC.len() as u64)
        .read_to_end(&mut head)
        .map_err(|source| RegressionError::Io {
            path: PathBuf::from("<input>"),
            source,
        })?;
    if head.as_slice() == SNAPSHOT_MAGIC {
        return Err(RegressionError::AlreadyPreprocessed);
    }
    let reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'|'))
        .from_reader(head.as_slice().chain(input));

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut first = true;
    for record in reader.into_records() {
        let record = record.map_err(|e| RegressionError::Schema {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != ADULT_COLUMNS.len() {
            return Err(RegressionError::Schema {
                line,
                message: format!("expected {} fields, found {}", ADULT_COLUMNS.len(), record.len()),
            });
        }
        if std::mem::take(&mut first) && record[0].parse::<f64>().is_err() {
            for (got, want) in record.iter().zip(ADULT_COLUMNS) {
                if got != want {
                    return Err(RegressionError::Schema {
                        line,
                        message: format!("unknown column '{got}', expected '{want}'"),
                    });
                }
            }
            continue;
        }
        if record.iter().any(|f| f == "?") {
            continue;
        }
        let mut fields: Vec<String> = record.iter().map(str::to_owned).collect();
        let label = fields[LABEL].trim_end_matches('.').to_owned();
        if label != ">50K" && label != "<=50K" {
            return Err(RegressionError::Schema {
                line,
                message: format!("unknown income label '{label}'"),
            });
        }
        fields[LABEL] = label;
        for &c in &CONTINUOUS {
            if fields[c].parse::<f64>().map_or(true, |v| !v.is_finite()) {
                return Err(RegressionError::Schema {
                    line,
                    message: format!("column '{}' is not numeric: '{}'", ADULT_COLUMNS[c], fields[c]),
                });
            }
        }
        rows.push(fields);
    }
    if rows.is_empty() {
        return Err(RegressionError::Empty);
    }

    let numeric: Vec<Vec<f64>> = CONTINUOUS
        .iter()
        .map(|&c| rows.iter().map(|r| r[c].parse().expect("validated above")).collect())
        .collect();
    let ranges: Vec<(f64, f64)> = numeric
        .iter()
        .map(|col| {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        })
        .collect();
    let vocabularies: Vec<BTreeMap<&str, usize>> = CATEGORICAL
        .iter()
        .map(|&c| {
            let values: BTreeSet<&str> = rows.iter().map(|r| r[c].as_str()).collect();
            values.into_iter().enumerate().map(|(i, v)| (v, i)).collect()
        })
        .collect();
    let n_raw = CONTINUOUS.len() + vocabularies.iter().map(BTreeMap::len).sum::<usize>();
    let n_cols = n_raw + 1;

    let mut features = Vec::with_capacity(rows.len() * n_cols);
    let mut labels = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let mut x = vec![0.0; n_cols];
        for (k, &(lo, hi)) in ranges.iter().enumerate() {
            x[k] = if hi > lo { (numeric[k][i] - lo) / (hi - lo) } else { 0.0 };
        }
        let mut offset = CONTINUOUS.len();
        for (vocab, &c) in vocabularies.iter().zip(&CATEGORICAL) {
            x[offset + vocab[r[c].as_str()]] = 1.0;
            offset += vocab.len();
        }
        let norm = x[..n_raw].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut x[..n_raw] {
            *v /= norm;
        }
        x[n_raw] = 1.0;
        features.extend_from_slice(&x);
        labels.push(if r[LABEL] == ">50K" { 1 } else { -1 });
    }
    Dataset::new(features, n_cols, labels)
}

pub fn preprocess_adult_file(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|source| RegressionError::Io {
        path: path.to_owned(),
        source,
    })?;
    preprocess_adult(std::io::BufReader::new(file))
}

/// Writes `<dir>/<stem>.<hash16>.ppfl` and returns its path.
pub fn write_snapshot(ds: &Dataset, dir: &Path, stem: &str) -> Result<PathBuf> {
    let payload = ds.payload();
    let digest = Sha256::digest(&payload);
    let path = dir.join(format!("{stem}.{}.ppfl", &hex::encode(digest)[..16]));
    let mut bytes = Vec::with_capacity(SNAPSHOT_MAGIC.len() + 32 + payload.len());
    bytes.extend_from_slice(SNAPSHOT_MAGIC);
    bytes.extend_from_slice(&digest);
    bytes.extend_from_slice(&payload);
    fs::write(&path, bytes).map_err(|source| RegressionError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

pub fn read_snapshot(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|source| RegressionError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_snapshot(&bytes)
}

fn parse_snapshot(bytes: &[u8]) -> Result<Dataset> {
    let corrupt = |m: &str| RegressionError::Snapshot(m.to_owned());
    let body = bytes
        .strip_prefix(SNAPSHOT_MAGIC.as_slice())
        .ok_or_else(|| corrupt("bad magic"))?;
    if body.len() < 48 {
        return Err(corrupt("truncated header"));
    }
    let (digest, payload) = body.split_at(32);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(corrupt("content hash mismatch"));
    }
    let word = |at: usize| u64::from_le_bytes(payload[at..at + 8].try_into().expect("8 bytes"));
    let rows = word(0) as usize;
    let n_cols = word(8) as usize;
    let n_feat = rows
        .checked_mul(n_cols)
        .ok_or_else(|| corrupt("dimension overflow"))?;
    if payload.len() != 16 + n_feat * 8 + rows {
        return Err(corrupt("length does not match header"));
    }
    let features = payload[16..16 + n_feat * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels = payload[16 + n_feat * 8..].iter().map(|&b| b as i8).collect();
    Dataset::new(features, n_cols, labels)
}

/// Reads a snapshot if `path` holds one, otherwise preprocesses it as CSV.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|source| RegressionError::Io {
        path: path.to_owned(),
        source,
    })?;
    if bytes.starts_with(SNAPSHOT_MAGIC) {
        parse_snapshot(&bytes)
    } else {
        preprocess_adult(bytes.as_slice())
    }
}

/// Linearly separable-ish data for smoke runs: `n_cols - 1` Gaussian
/// features L2-normalised per row, an intercept, and labels from a fixed
/// hidden direction with 10% of them flipped.
pub fn synthetic(rows: usize, n_cols: usize, seed: u64) -> Result<Dataset> {
    if n_cols < 2 || rows == 0 {
        return Err(RegressionError::Empty);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = n_cols - 1;
    let hidden: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 }).collect();
    let mut features = Vec::with_capacity(rows * n_cols);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let margin: f64 = x.iter().zip(&hidden).map(|(a, b)| a * b).sum();
        let mut y: i8 = if margin >= 0.0 { 1 } else { -1 };
        if rng.random::<f64>() < 0.1 {
            y = -y;
        }
        features.extend(x.iter().map(|v| v / norm));
        features.push(1.0);
        labels.push(y);
    }
    Dataset::new(features, n_cols, labels)
}

/// Shuffled train/test partition; the test part has `round(n * test_fraction)` rows.
pub fn train_test_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(RegressionError::InvalidConfig(format!(
            "test fraction {test_fraction} outside [0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..ds.rows()).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let n_test = (ds.rows() as f64 * test_fraction).round() as usize;
    let (test, train) = order.split_at(n_test);
    Ok((ds.select(train), ds.select(test)))
}

/// Independent local samples: without replacement inside a client, with
/// replacement across clients.
pub fn sample_local<R: Rng + ?Sized>(
    train: &Dataset,
    local_size: usize,
    n_clients: usize,
    rng: &mut R,
) -> Result<Vec<LocalData>> {
    if local_size > train.rows() {
        return Err(RegressionError::Size {
            requested: local_size,
            available: train.rows(),
        });
    }
    Ok((0..n_clients)
        .map(|_| train.select(&index::sample(rng, train.rows(), local_size).into_vec()))
        .collect())
}

/// Split once, then draw one round of local samples from a stream seeded by `seed`.
pub fn split_and_sample(
    ds: &Dataset,
    test_fraction: f64,
    local_size: usize,
    n_clients: usize,
    seed: u64,
) -> Result<(Vec<LocalData>, Dataset)> {
    let (train, test) = train_test_split(ds, test_fraction, seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5a17_e5a3_9d1c_0b4f);
    Ok((sample_local(&train, local_size, n_clients, &mut rng)?, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub reg_alpha: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(RegressionError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(RegressionError::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.reg_alpha >= 0.0 && self.reg_alpha.is_finite()) {
            return Err(RegressionError::InvalidConfig(format!(
                "reg_alpha must be non-negative, got {}",
                self.reg_alpha
            )));
        }
        Ok(())
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `1 / (1 + e^z)` without overflow.
fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dim(w: &[f64], data: &Dataset) -> Result<()> {
    if w.len() != data.n_cols() {
        return Err(RegressionError::Dimension {
            expected: data.n_cols(),
            got: w.len(),
        });
    }
    Ok(())
}

/// Mean logistic loss plus `(reg_alpha / 2) ||w||^2`, and its gradient.
pub fn loss_and_gradient(w: &[f64], data: &LocalData, reg_alpha: f64) -> Result<(f64, Vec<f64>)> {
    check_dim(w, data)?;
    let t = data.rows().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; w.len()];
    for (k, &label) in data.labels().iter().enumerate() {
        let x = data.row(k);
        let y = f64::from(label);
        let margin = y * dot(w, x);
        loss += softplus(-margin);
        let coeff = -y * sigmoid_neg(margin);
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += coeff * xi;
        }
    }
    let norm2: f64 = w.iter().map(|v| v * v).sum();
    for (g, wi) in grad.iter_mut().zip(w) {
        *g = *g / t + reg_alpha * wi;
    }
    Ok((loss / t + 0.5 * reg_alpha * norm2, grad))
}

/// Full-batch gradient descent for exactly `cfg.iterations` steps.
pub fn local_train(data: &LocalData, w0: &[f64], cfg: &TrainConfig) -> Result<Weights> {
    cfg.validate()?;
    check_dim(w0, data)?;
    let mut w = w0.to_vec();
    for it in 0..cfg.iterations {
        let (_, grad) = loss_and_gradient(&w, data, cfg.reg_alpha)?;
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= cfg.learning_rate * g;
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(RegressionError::Diverged(it));
        }
    }
    Ok(w)
}

/// `sign(w . x)` with ties going to +1.
pub fn predict(w: &[f64], features: &Dataset) -> Result<Vec<i8>> {
    check_dim(w, features)?;
    Ok((0..features.rows())
        .map(|k| if dot(w, features.row(k)) >= 0.0 { 1 } else { -1 })
        .collect())
}

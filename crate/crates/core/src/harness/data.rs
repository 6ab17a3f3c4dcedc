//! Synthetic datasets and the CSV dataset format.
//!
//! CSV files have a header row; the last column is the target and the rest are
//! features. A target column holding only non-negative integers is read as
//! class labels, anything else as regression values.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::rng::{stream_rng, Stream};
use crate::diffmodel::{Batch, Matrix, Targets};
use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoMoons {
        n_train: usize,
        n_test: usize,
        noise: f64,
    },
    Blobs {
        n_train: usize,
        n_test: usize,
        centers: usize,
        dim: usize,
        std: f64,
    },
    Sine {
        n_train: usize,
        n_test: usize,
        noise: f64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let sizes = |a: usize, b: usize| {
            if a == 0 || b == 0 {
                Err(Error::Config("train and test sets must be non-empty".into()))
            } else {
                Ok(())
            }
        };
        let scale = |s: f64, what: &str| {
            if s.is_finite() && s >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be finite and >= 0")))
            }
        };
        match *self {
            DatasetSpec::TwoMoons { n_train, n_test, noise } | DatasetSpec::Sine { n_train, n_test, noise } => {
                sizes(n_train, n_test)?;
                scale(noise, "noise")
            }
            DatasetSpec::Blobs { n_train, n_test, centers, dim, std } => {
                sizes(n_train, n_test)?;
                if centers < 2 || dim < 2 {
                    return Err(Error::Config("blobs need >= 2 centers and dim >= 2".into()));
                }
                scale(std, "std")
            }
            DatasetSpec::Csv { .. } => Ok(()),
        }
    }

    /// Train and test batches. Synthetic sets draw from the dataset stream of
    /// `seed`.
    pub fn load(&self, seed: u64) -> Result<(Batch, Batch)> {
        match *self {
            DatasetSpec::TwoMoons { n_train, n_test, noise } => gen_two_moons(n_train, n_test, noise, seed),
            DatasetSpec::Blobs { n_train, n_test, centers, dim, std } => {
                gen_blobs(n_train, n_test, centers, dim, std, seed)
            }
            DatasetSpec::Sine { n_train, n_test, noise } => gen_sine_regression(n_train, n_test, noise, seed),
            DatasetSpec::Csv { ref train, ref test } => Ok((load_csv(train)?, load_csv(test)?)),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn moons(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t = rng.gen_range(0.0..=PI);
        let (x, y) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        rows.push(vec![x + noise * normal(rng), y + noise * normal(rng)]);
        labels.push(label);
    }
    Batch::new(Matrix::from_rows(&rows)?, Targets::Labels { classes: 2, labels })
}

/// Two interleaved half circles; classes alternate so each split is balanced.
pub fn gen_two_moons(n_train: usize, n_test: usize, noise: f64, seed: u64) -> Result<(Batch, Batch)> {
    let mut rng = stream_rng(seed, Stream::Dataset);
    Ok((moons(n_train, noise, &mut rng)?, moons(n_test, noise, &mut rng)?))
}

fn blobs(n: usize, centers: usize, dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % centers;
        let angle = 2.0 * PI * c as f64 / centers as f64;
        let row = (0..dim)
            .map(|j| {
                let mu = match j {
                    0 => 3.0 * angle.cos(),
                    1 => 3.0 * angle.sin(),
                    _ => 0.0,
                };
                mu + std * normal(rng)
            })
            .collect();
        rows.push(row);
        labels.push(c);
    }
    Batch::new(Matrix::from_rows(&rows)?, Targets::Labels { classes: centers, labels })
}

/// Gaussian clusters with centers evenly spaced on a circle of radius 3 in
/// the first two coordinates.
pub fn gen_blobs(
    n_train: usize,
    n_test: usize,
    centers: usize,
    dim: usize,
    std: f64,
    seed: u64,
) -> Result<(Batch, Batch)> {
    let mut rng = stream_rng(seed, Stream::Dataset);
    Ok((
        blobs(n_train, centers, dim, std, &mut rng)?,
        blobs(n_test, centers, dim, std, &mut rng)?,
    ))
}

fn sine(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.gen_range(0.0..1.0);
        xs.push(x);
        ys.push((2.0 * PI * x).sin() + noise * normal(rng));
    }
    Batch::new(Matrix::new(n, 1, xs)?, Targets::Values(ys))
}

/// y = sin(2πx) + noise, x uniform on [0, 1).
pub fn gen_sine_regression(n_train: usize, n_test: usize, noise: f64, seed: u64) -> Result<(Batch, Batch)> {
    let mut rng = stream_rng(seed, Stream::Dataset);
    Ok((sine(n_train, noise, &mut rng)?, sine(n_test, noise, &mut rng)?))
}

pub fn load_csv(path: &Path) -> Result<Batch> {
    read_csv(std::fs::File::open(path)?)
}

pub fn read_csv<R: Read>(input: R) -> Result<Batch> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let width = reader.headers()?.len();
    let empty = || Error::Parse {
        line: 1,
        column: 1,
        message: "empty file".into(),
    };
    if width == 0 || reader.headers()?.iter().all(|h| h.trim().is_empty()) {
        return Err(empty());
    }
    if width < 2 {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: "need at least one feature column and a target column".into(),
        });
    }
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i + 2, |p| p.line() as usize);
        if record.len() != width {
            return Err(Error::Parse {
                line,
                column: record.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                column: j + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if j + 1 == width {
                targets.push(v);
            } else {
                features.push(v);
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::Parse {
            line: 2,
            column: 1,
            message: "no data rows".into(),
        });
    }
    let n = targets.len();
    let inputs = Matrix::new(n, width - 1, features)?;
    let integral = targets.iter().all(|&t| t >= 0.0 && t.fract() == 0.0 && t < u32::MAX as f64);
    let targets = if integral {
        let labels: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
        Targets::Labels { classes, labels }
    } else {
        Targets::Values(targets)
    };
    Batch::new(inputs, targets)
}

/// Writes with the shortest representation that round-trips each f64.
pub fn write_csv<W: Write>(batch: &Batch, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = batch.inputs.cols;
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..batch.len() {
        let mut row: Vec<String> = batch.inputs.row(i).iter().map(|v| format!("{v:?}")).collect();
        row.push(match &batch.targets {
            Targets::Labels { labels, .. } => labels[i].to_string(),
            Targets::Values(v) => format!("{:?}", v[i]),
        });
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(batch: &Batch, path: &Path) -> Result<()> {
    write_csv(batch, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Number of classes for a labelled batch, or an error for regression.
pub fn classes_of(batch: &Batch) -> Result<usize> {
    match batch.targets {
        Targets::Labels { classes, .. } => Ok(classes),
        Targets::Values(_) => Err(contract("batch has regression targets")),
    }
}

//! Labeled image datasets: a seeded Gaussian-blob generator and a CSV loader.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::TensorShape;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: TensorShape,
    pub class_count: usize,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn new(
        shape: TensorShape,
        class_count: usize,
        train: Vec<Sample>,
        eval: Vec<Sample>,
        test: Vec<Sample>,
    ) -> Result<Self> {
        let ds = Self {
            shape,
            class_count,
            train,
            eval,
            test,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
            Split::Test => &self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::InvalidInput(
                "dataset needs at least one class".into(),
            ));
        }
        for s in self.train.iter().chain(&self.eval).chain(&self.test) {
            if s.label >= self.class_count {
                return Err(Error::InvalidInput(format!(
                    "label {} out of range for {} classes",
                    s.label, self.class_count
                )));
            }
            if s.input.len() != self.shape.len() {
                return Err(Error::InvalidInput(format!(
                    "sample has {} values, dataset shape {} needs {}",
                    s.input.len(),
                    self.shape,
                    self.shape.len()
                )));
            }
        }
        Ok(())
    }

    /// Same inputs with every label mapped to `(label + shift) % class_count`.
    pub fn label_shifted(&self, shift: usize) -> Dataset {
        let remap = |v: &[Sample]| {
            v.iter()
                .map(|s| Sample {
                    input: s.input.clone(),
                    label: (s.label + shift) % self.class_count,
                })
                .collect()
        };
        Dataset {
            shape: self.shape,
            class_count: self.class_count,
            train: remap(&self.train),
            eval: remap(&self.eval),
            test: remap(&self.test),
        }
    }

    /// Loads `label,p0,p1,...` rows (no header) into one split each.
    pub fn from_csv(
        shape: TensorShape,
        class_count: usize,
        train: impl AsRef<Path>,
        eval: impl AsRef<Path>,
        test: impl AsRef<Path>,
    ) -> Result<Self> {
        let train = read_csv_samples(train.as_ref(), shape)?;
        let eval = read_csv_samples(eval.as_ref(), shape)?;
        let test = read_csv_samples(test.as_ref(), shape)?;
        Self::new(shape, class_count, train, eval, test)
    }

    pub fn write_csv(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| csv_err(path, 0, e))?;
        for s in samples {
            let mut row = vec![s.label.to_string()];
            row.extend(s.input.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| csv_err(path, 0, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, line: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn read_csv_samples(path: &Path, shape: TensorShape) -> Result<Vec<Sample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, 0, e))?;
    let mut samples = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| csv_err(path, line, e))?;
        if rec.len() != shape.len() + 1 {
            return Err(csv_err(
                path,
                line,
                format!("expected {} columns, found {}", shape.len() + 1, rec.len()),
            ));
        }
        let label = rec[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| csv_err(path, line, e))?;
        let input = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>().map_err(|e| csv_err(path, line, e)))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample { input, label });
    }
    Ok(samples)
}

/// Parameters for the synthetic Gaussian-blob image generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobConfig {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub eval: usize,
    pub test: usize,
    /// Blobs composing each class prototype.
    #[serde(default = "default_blobs")]
    pub blobs_per_class: usize,
    /// Per-sample blob centre jitter, in pixels.
    #[serde(default = "default_jitter")]
    pub position_jitter: f64,
    /// Std-dev of i.i.d. pixel noise.
    #[serde(default = "default_noise")]
    pub pixel_noise: f64,
    pub seed: u64,
}

fn default_blobs() -> usize {
    2
}
fn default_jitter() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.5
}

struct Blob {
    y: f64,
    x: f64,
    sigma: f64,
    color: Vec<f64>,
}

impl BlobConfig {
    pub fn shape(&self) -> TensorShape {
        TensorShape::new(self.channels, self.height, self.width)
    }

    /// Each class owns a few coloured Gaussian blobs; a sample re-renders its
    /// class blobs with jittered centres and amplitudes, then adds pixel noise.
    pub fn generate(&self) -> Result<Dataset> {
        if self.classes == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig(
                "blob generator dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let prototypes: Vec<Vec<Blob>> = (0..self.classes)
            .map(|_| {
                (0..self.blobs_per_class.max(1))
                    .map(|_| Blob {
                        y: rng.random_range(0.0..self.height as f64),
                        x: rng.random_range(0.0..self.width as f64),
                        sigma: rng.random_range(1.0..2.0)
                            * (self.height.min(self.width) as f64 / 8.0).max(0.5),
                        color: (0..self.channels)
                            .map(|_| rng.random_range(-1.0..1.0))
                            .collect(),
                    })
                    .collect()
            })
            .collect();
        let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
            let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
            labels.shuffle(rng);
            labels
                .into_iter()
                .map(|label| Sample {
                    input: self.render(&prototypes[label], rng),
                    label,
                })
                .collect()
        };
        let train = draw(self.train, &mut rng);
        let eval = draw(self.eval, &mut rng);
        let test = draw(self.test, &mut rng);
        Dataset::new(self.shape(), self.classes, train, eval, test)
    }

    fn render(&self, blobs: &[Blob], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut img = vec![0.0; self.channels * h * w];
        for b in blobs {
            let cy = b.y + self.position_jitter * rng.sample::<f64, _>(StandardNormal);
            let cx = b.x + self.position_jitter * rng.sample::<f64, _>(StandardNormal);
            let amp = 1.0 + 0.25 * rng.sample::<f64, _>(StandardNormal);
            let inv = 1.0 / (2.0 * b.sigma * b.sigma);
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let g = amp * (-(dy * dy + dx * dx) * inv).exp();
                    for (c, col) in b.color.iter().enumerate() {
                        img[(c * h + y) * w + x] += col * g;
                    }
                }
            }
        }
        for v in &mut img {
            *v += self.pixel_noise * rng.sample::<f64, _>(StandardNormal);
        }
        img
    }
}

//! Labeled datasets: an exact little-endian binary container plus the
//! built-in synthetic tasks used for desk-scale experiments.
//!
//! File layout: magic `NRA1`, `u32` sample count, `u32` feature dim,
//! `u32` class count, then `f64` features row-major, then `u32` labels.
//! Everything little-endian; declared sizes must match the byte length
//! exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};
use crate::util::rng;

const MAGIC: &[u8; 4] = b"NRA1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (expected NRA1)")]
    BadMagic,
    #[error("file length {got} does not match declared sizes (expected {expected})")]
    Truncated { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes at row {row}")]
    LabelRange {
        row: usize,
        label: u32,
        classes: u32,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("non-finite feature value at row {row}")]
    NonFinite { row: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// In-memory labeled dataset: `[n, dim]` features, one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        if features.shape().len() != 2 || features.shape()[0] != labels.len() {
            return Err(DataError::Tensor(TensorError::ShapeMismatch {
                op: "dataset",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            }));
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(DataError::LabelRange {
                    row,
                    label: label as u32,
                    classes: classes as u32,
                });
            }
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Rows `indices` as a `[k, dim]` batch plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.features.data()[i * dim..(i + 1) * dim]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(vec![indices.len(), dim], data).expect("batch shape"),
            labels,
        )
    }

    pub fn write_file(&self, path: &Path) -> Result<(), DataError> {
        let mut bytes = Vec::with_capacity(16 + self.features.numel() * 8 + self.len() * 4);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(self.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.classes as u32).to_le_bytes());
        for &v in self.features.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &label in &self.labels {
            bytes.extend_from_slice(&(label as u32).to_le_bytes());
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, DataError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(DataError::BadMagic);
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let classes = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = 16 + count * dim * 8 + count * 4;
        if bytes.len() != expected {
            return Err(DataError::Truncated {
                expected,
                got: bytes.len(),
            });
        }
        let mut features = Vec::with_capacity(count * dim);
        let mut offset = 16;
        for i in 0..count * dim {
            let v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(DataError::NonFinite { row: i / dim });
            }
            features.push(v);
            offset += 8;
        }
        let mut labels = Vec::with_capacity(count);
        for row in 0..count {
            let label = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
            if label as usize >= classes {
                return Err(DataError::LabelRange {
                    row,
                    label,
                    classes: classes as u32,
                });
            }
            labels.push(label as usize);
            offset += 4;
        }
        Dataset::new(Tensor::new(vec![count, dim], features)?, labels, classes)
    }

    /// Stable identity hash over the serialized content.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(16 + self.features.numel() * 8);
        bytes.extend_from_slice(&(self.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.classes as u64).to_le_bytes());
        for &v in self.features.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            bytes.extend_from_slice(&(l as u32).to_le_bytes());
        }
        crate::util::fnv1a64(&bytes)
    }
}

/// Which half of a transfer pair to generate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskVariant {
    Source,
    /// Affine input shift: `x -> scale * x + offset`, labels unchanged.
    Target { scale: f64, offset: f64 },
}

/// Two-cluster XOR mixture: class 0 sits at (+a,+a)/(-a,-a) in the first two
/// coordinates, class 1 at (+a,-a)/(-a,+a); remaining coordinates are noise.
/// Not linearly separable, so frozen-feature quality matters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XorGaussiansSpec {
    pub samples: usize,
    pub dim: usize,
    pub cluster_scale: f64,
    pub noise_std: f64,
    pub variant: TaskVariant,
}

impl Default for XorGaussiansSpec {
    fn default() -> Self {
        XorGaussiansSpec {
            samples: 512,
            dim: 16,
            cluster_scale: 1.0,
            noise_std: 0.45,
            variant: TaskVariant::Source,
        }
    }
}

pub fn xor_gaussians(spec: &XorGaussiansSpec, seed: u64) -> Result<Dataset, DataError> {
    if spec.samples == 0 || spec.dim < 2 {
        return Err(DataError::Empty);
    }
    let mut rng = rng::substream(seed, "xor-gaussians", 0);
    let mut features = Vec::with_capacity(spec.samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    let a = spec.cluster_scale;
    for i in 0..spec.samples {
        let label = i % 2;
        let component = rng::uniform(&mut rng, 0.0, 1.0) < 0.5;
        let (cx, cy) = match (label, component) {
            (0, true) => (a, a),
            (0, false) => (-a, -a),
            (1, true) => (a, -a),
            _ => (-a, a),
        };
        let mut row = Vec::with_capacity(spec.dim);
        row.push(cx + rng::normal(&mut rng, 0.0, spec.noise_std));
        row.push(cy + rng::normal(&mut rng, 0.0, spec.noise_std));
        for _ in 2..spec.dim {
            row.push(rng::normal(&mut rng, 0.0, spec.noise_std));
        }
        if let TaskVariant::Target { scale, offset } = spec.variant {
            for v in &mut row {
                *v = scale * *v + offset;
            }
        }
        features.extend_from_slice(&row);
        labels.push(label);
    }
    Dataset::new(
        Tensor::new(vec![spec.samples, spec.dim], features)?,
        labels,
        2,
    )
}

/// Classification against a piecewise-nonlinear boundary:
/// label is 1 when `x_1 > |x_0| - 0.7 * x_0^2` (plus label noise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseSpec {
    pub samples: usize,
    pub dim: usize,
    pub label_noise: f64,
    pub variant: TaskVariant,
}

impl Default for PiecewiseSpec {
    fn default() -> Self {
        PiecewiseSpec {
            samples: 512,
            dim: 8,
            label_noise: 0.0,
            variant: TaskVariant::Source,
        }
    }
}

pub fn piecewise(spec: &PiecewiseSpec, seed: u64) -> Result<Dataset, DataError> {
    if spec.samples == 0 || spec.dim < 2 {
        return Err(DataError::Empty);
    }
    let mut rng = rng::substream(seed, "piecewise", 0);
    let mut features = Vec::with_capacity(spec.samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let mut row = Vec::with_capacity(spec.dim);
        for _ in 0..spec.dim {
            row.push(rng::uniform(&mut rng, -2.0, 2.0));
        }
        let boundary = row[0].abs() - 0.7 * row[0] * row[0];
        let mut label = usize::from(row[1] > boundary);
        if spec.label_noise > 0.0 && rng::uniform(&mut rng, 0.0, 1.0) < spec.label_noise {
            label = 1 - label;
        }
        if let TaskVariant::Target { scale, offset } = spec.variant {
            for v in &mut row {
                *v = scale * *v + offset;
            }
        }
        features.extend_from_slice(&row);
        labels.push(label);
    }
    Dataset::new(
        Tensor::new(vec![spec.samples, spec.dim], features)?,
        labels,
        2,
    )
}

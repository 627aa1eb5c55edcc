//! Seeded synthetic identity datasets and their CSV-like file format.
//!
//! File layout:
//!
//! ```text
//! dim,n_samples,n_classes,n_cameras
//! sample_id,class_id,camera_id,x_1,...,x_dim
//! ```

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};

/// Maps domain A onto a second domain: `x -> R x + offset`, with `R` a
/// seeded random orthogonal matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub offset: Vec<f64>,
    pub rotation_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub n_cameras: usize,
    pub seed: u64,
    pub domain_shift: Option<DomainShift>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            per_class: 50,
            dim: 16,
            noise_sigma: 0.3,
            n_cameras: 4,
            seed: 0,
            domain_shift: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "must be >= 2"));
        }
        if self.per_class < 2 {
            return Err(Error::config("per_class", "must be >= 2"));
        }
        if self.dim < 2 {
            return Err(Error::config("dim", "must be >= 2"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be a finite non-negative number"));
        }
        if self.n_cameras < 1 {
            return Err(Error::config("n_cameras", "must be >= 1"));
        }
        if let Some(shift) = &self.domain_shift {
            if shift.offset.len() != self.dim {
                return Err(Error::config(
                    "shift_offset",
                    format!("has {} entries, dim is {}", shift.offset.len(), self.dim),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub sample_ids: Vec<u64>,
    pub class_ids: Vec<usize>,
    pub camera_ids: Vec<i64>,
    pub features: Array2<f64>,
    pub n_classes: usize,
    pub n_cameras: usize,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Class prototypes: Gaussian draws scaled onto the unit hypersphere, one row per class.
pub fn prototypes(spec: &SynthSpec) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    prototypes_from(&mut rng, spec)
}

fn prototypes_from(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Array2<f64> {
    let mut protos = Array2::zeros((spec.n_classes, spec.dim));
    for mut row in protos.axis_iter_mut(Axis(0)) {
        let v = loop {
            let v = Array1::from(gaussian_vec(rng, spec.dim));
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                break v / norm;
            }
        };
        row.assign(&v);
    }
    protos
}

/// Seeded random orthogonal matrix (QR of a Gaussian matrix with the sign of
/// `R`'s diagonal folded into `Q`).
pub fn random_orthogonal(dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_row_slice(dim, dim, &gaussian_vec(&mut rng, dim * dim));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Array2::from_shape_fn((dim, dim), |(i, j)| q[(i, j)])
}

/// Prototype plus isotropic Gaussian noise for every sample; samples are
/// stored class by class and cameras are assigned round-robin within a class.
pub fn generate(spec: &SynthSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut protos = prototypes_from(&mut rng, spec);
    if let Some(shift) = &spec.domain_shift {
        let rot = random_orthogonal(spec.dim, shift.rotation_seed);
        protos = protos.dot(&rot.t()) + &Array1::from(shift.offset.clone());
    }
    let n = spec.n_classes * spec.per_class;
    let mut features = Array2::zeros((n, spec.dim));
    let mut class_ids = Vec::with_capacity(n);
    let mut camera_ids = Vec::with_capacity(n);
    for c in 0..spec.n_classes {
        for s in 0..spec.per_class {
            let row = c * spec.per_class + s;
            let noise = gaussian_vec(&mut rng, spec.dim);
            for (k, e) in noise.into_iter().enumerate() {
                features[[row, k]] = protos[[c, k]] + spec.noise_sigma * e;
            }
            class_ids.push(c);
            camera_ids.push((s % spec.n_cameras) as i64);
        }
    }
    Ok(SyntheticDataset {
        sample_ids: (0..n as u64).collect(),
        class_ids,
        camera_ids,
        features,
        n_classes: spec.n_classes,
        n_cameras: spec.n_cameras,
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn to_batch(&self) -> Result<EmbeddingBatch> {
        EmbeddingBatch::new(self.features.clone(), self.class_ids.clone(), self.camera_ids.clone())
    }

    /// Rows in the given order; header counts are kept.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            sample_ids: rows.iter().map(|&r| self.sample_ids[r]).collect(),
            class_ids: rows.iter().map(|&r| self.class_ids[r]).collect(),
            camera_ids: rows.iter().map(|&r| self.camera_ids[r]).collect(),
            features: self.features.select(Axis(0), rows),
            n_classes: self.n_classes,
            n_cameras: self.n_cameras,
        }
    }

    /// Splits every class: its last `ceil(fraction * n_c)` samples (at least
    /// one, and at least one left behind) go to the held-out part.
    pub fn split_holdout(&self, fraction: f64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::config("holdout_fraction", "must lie in (0, 1)"));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.n_classes.max(1)];
        for (row, &c) in self.class_ids.iter().enumerate() {
            if c >= by_class.len() {
                by_class.resize(c + 1, Vec::new());
            }
            by_class[c].push(row);
        }
        let mut train = Vec::new();
        let mut held = Vec::new();
        for rows in by_class.iter().filter(|r| !r.is_empty()) {
            let n_held = ((rows.len() as f64 * fraction).ceil() as usize).clamp(1, rows.len().saturating_sub(1).max(1));
            let cut = rows.len() - n_held;
            train.extend_from_slice(&rows[..cut]);
            held.extend_from_slice(&rows[cut..]);
        }
        Ok((self.subset(&train), self.subset(&held)))
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{},{},{},{}", self.dim(), self.len(), self.n_classes, self.n_cameras).unwrap();
        for (i, row) in self.features.axis_iter(Axis(0)).enumerate() {
            write!(s, "{},{},{}", self.sample_ids[i], self.class_ids[i], self.camera_ids[i]).unwrap();
            for v in row {
                write!(s, ",{v:.16e}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        let (ln, header) = lines.next().ok_or_else(|| Error::parse(1, "missing header"))?;
        let head: Vec<&str> = header.split(',').collect();
        if head.len() != 4 {
            return Err(Error::parse(ln, "header must be `dim,n_samples,n_classes,n_cameras`"));
        }
        let field = |ln: usize, s: &str, what: &str| -> Result<usize> {
            s.trim().parse::<usize>().map_err(|_| Error::parse(ln, format!("bad {what} `{s}`")))
        };
        let dim = field(ln, head[0], "dim")?;
        let n = field(ln, head[1], "n_samples")?;
        let n_classes = field(ln, head[2], "n_classes")?;
        let n_cameras = field(ln, head[3], "n_cameras")?;
        if dim == 0 {
            return Err(Error::parse(ln, "dim must be >= 1"));
        }

        let mut sample_ids = Vec::with_capacity(n);
        let mut class_ids = Vec::with_capacity(n);
        let mut camera_ids = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * dim);
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != dim + 3 {
                return Err(Error::parse(ln, format!("expected {} fields, found {}", dim + 3, cells.len())));
            }
            sample_ids.push(cells[0].trim().parse::<u64>().map_err(|_| Error::parse(ln, format!("bad sample_id `{}`", cells[0])))?);
            class_ids.push(field(ln, cells[1], "class_id")?);
            camera_ids.push(cells[2].trim().parse::<i64>().map_err(|_| Error::parse(ln, format!("bad camera_id `{}`", cells[2])))?);
            for cell in &cells[3..] {
                let v = cell
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(ln, format!("bad feature value `{cell}`")))?;
                values.push(v);
            }
        }
        if sample_ids.len() != n {
            return Err(Error::parse(1, format!("header declares {n} samples, found {}", sample_ids.len())));
        }
        let features = Array2::from_shape_vec((n, dim), values).expect("row lengths checked");
        Ok(Self {
            sample_ids,
            class_ids,
            camera_ids,
            features,
            n_classes,
            n_cameras,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file_str(&std::fs::read_to_string(path)?)
    }
}

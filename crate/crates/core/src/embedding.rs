//! Vector geometry shared by the losses and the evaluation code.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Rows with a norm at or below this are treated as degenerate.
pub const MIN_NORM: f64 = 1e-12;

/// Camera id used when a sample carries no camera information.
pub const NO_CAMERA: i64 = -1;

/// A batch of embedding rows with their identity and camera labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    features: Array2<f64>,
    class_ids: Vec<usize>,
    camera_ids: Vec<i64>,
}

impl EmbeddingBatch {
    pub fn new(features: Array2<f64>, class_ids: Vec<usize>, camera_ids: Vec<i64>) -> Result<Self> {
        let (rows, cols) = features.dim();
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidBatch(format!("empty feature matrix {rows}x{cols}")));
        }
        if class_ids.len() != rows || camera_ids.len() != rows {
            return Err(Error::InvalidBatch(format!(
                "{rows} rows but {} class ids and {} camera ids",
                class_ids.len(),
                camera_ids.len()
            )));
        }
        if let Some(((r, c), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidBatch(format!("non-finite feature at ({r}, {c})")));
        }
        Ok(Self {
            features,
            class_ids,
            camera_ids,
        })
    }

    /// Batch without camera information.
    pub fn without_cameras(features: Array2<f64>, class_ids: Vec<usize>) -> Result<Self> {
        let cams = vec![NO_CAMERA; class_ids.len()];
        Self::new(features, class_ids, cams)
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn camera_ids(&self) -> &[i64] {
        &self.camera_ids
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Same labels, new features. The feature row count must match.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        Self::new(features, self.class_ids.clone(), self.camera_ids.clone())
    }

    /// Rows gathered in the given order, labels included.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            self.features.select(Axis(0), rows),
            rows.iter().map(|&r| self.class_ids[r]).collect(),
            rows.iter().map(|&r| self.camera_ids[r]).collect(),
        )
    }

    pub fn into_features(self) -> Array2<f64> {
        self.features
    }
}

/// Symmetric matrix of Euclidean distances between the rows of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    values: Array2<f64>,
}

impl DistanceMatrix {
    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

pub fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Divides every row by its Euclidean norm and returns the norms.
pub fn normalize_rows(features: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = features.to_owned();
    let mut norms = Vec::with_capacity(out.nrows());
    for (row_idx, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN norms fail too
        if !(norm > MIN_NORM) {
            return Err(Error::NormalizeZeroVector { row: row_idx, norm });
        }
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Scales every row onto the unit hypersphere, keeping labels.
pub fn l2_normalize(batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    let (features, _) = normalize_rows(batch.features())?;
    Ok(EmbeddingBatch {
        features,
        class_ids: batch.class_ids.clone(),
        camera_ids: batch.camera_ids.clone(),
    })
}

/// Distances between every row of `a` and every row of `b`, by explicit
/// difference norm.
pub fn cross_distances(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| euclidean(a.row(i), b.row(j)))
}

pub fn pairwise_distances_of(features: ArrayView2<'_, f64>) -> DistanceMatrix {
    let n = features.nrows();
    let mut values = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(features.row(i), features.row(j));
            values[[i, j]] = d;
            values[[j, i]] = d;
        }
    }
    DistanceMatrix { values }
}

pub fn pairwise_distances(batch: &EmbeddingBatch) -> DistanceMatrix {
    pairwise_distances_of(batch.features())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn batch(features: Array2<f64>) -> EmbeddingBatch {
        let n = features.nrows();
        EmbeddingBatch::without_cameras(features, vec![0; n]).unwrap()
    }

    #[test]
    fn normalizes_three_four_five() {
        let out = l2_normalize(&batch(array![[3.0, 4.0], [1.0, 0.0]])).unwrap();
        assert_abs_diff_eq!(out.features()[[0, 0]], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(out.features()[[0, 1]], 0.8, epsilon = 1e-15);
        assert_eq!(out.features().row(1).to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn zero_row_is_rejected() {
        let err = l2_normalize(&batch(array![[1.0, 0.0], [0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::NormalizeZeroVector { row: 1, .. }));
    }

    #[test]
    fn distance_examples() {
        let d = pairwise_distances(&batch(array![[1.0, 0.0], [0.0, 1.0]]));
        assert_abs_diff_eq!(d.get(0, 1), std::f64::consts::SQRT_2, epsilon = 1e-12);
        let d = pairwise_distances(&batch(array![[1.0, 0.0], [-1.0, 0.0]]));
        assert_eq!(d.get(0, 1), 2.0);
        let d = pairwise_distances(&batch(array![[0.3, 0.7], [0.3, 0.7]]));
        assert_eq!(d.get(1, 0), 0.0);
    }

    #[test]
    fn batch_validation() {
        assert!(EmbeddingBatch::without_cameras(Array2::zeros((0, 2)), vec![]).is_err());
        assert!(EmbeddingBatch::without_cameras(Array2::zeros((2, 2)), vec![0]).is_err());
        assert!(EmbeddingBatch::without_cameras(array![[f64::NAN]], vec![0]).is_err());
    }
}

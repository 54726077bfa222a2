use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::nn::Tensor;

/// Labelled images, `N × H × W × C`, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self, DataError> {
        if images.shape().len() != 4 {
            return Err(DataError::Invalid(format!(
                "images must be N x H x W x C, got shape {:?}",
                images.shape()
            )));
        }
        if images.rows() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DataError::Invalid(format!("label {bad} out of range for {n_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            n_classes,
        })
    }

    pub fn empty(image_shape: [usize; 3], n_classes: usize) -> Self {
        Self {
            images: Tensor::zeros(vec![0, image_shape[0], image_shape[1], image_shape[2]]),
            labels: Vec::new(),
            n_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// First `n` samples in stored order under a per-class quota of
    /// `n / n_classes`, the remainder going to the lowest classes.
    pub fn balanced_prefix(&self, n: usize) -> Result<Self, DataError> {
        let k = self.n_classes.max(1);
        let mut quota: Vec<usize> = (0..k).map(|c| n / k + usize::from(c < n % k)).collect();
        let mut idx = Vec::with_capacity(n);
        for (i, &l) in self.labels.iter().enumerate() {
            if quota[l] > 0 {
                quota[l] -= 1;
                idx.push(i);
            }
        }
        if idx.len() < n {
            return Err(DataError::Invalid(format!(
                "cannot draw a balanced subset of {n} from {} samples",
                self.len()
            )));
        }
        Ok(self.subset(&idx))
    }

    pub fn distinct_classes(&self) -> usize {
        self.class_counts().iter().filter(|&&c| c > 0).count()
    }

    /// Concatenates datasets with matching image shape and class count.
    pub fn concat(parts: &[&Dataset]) -> Result<Self, DataError> {
        let first = parts
            .first()
            .ok_or_else(|| DataError::Invalid("nothing to concatenate".into()))?;
        let shape = first.image_shape();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.image_shape() != shape || p.n_classes != first.n_classes {
                return Err(DataError::Invalid("cannot concatenate datasets of different shape".into()));
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        let images = Tensor::new(vec![labels.len(), shape[0], shape[1], shape[2]], data)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        Self::new(images, labels, first.n_classes)
    }
}

/// Indices into the source dataset behind each split of one client.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// One participant's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Source indices when the client was built by [`partition`](super::partition).
    pub source: Option<SplitIndices>,
}

impl ClientDataset {
    /// Training sample count, the aggregation weight numerator.
    pub fn n_k(&self) -> usize {
        self.train.len()
    }

    pub fn n_classes(&self) -> usize {
        self.train.n_classes
    }
}

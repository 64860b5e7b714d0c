use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled images stored as one flat `f32` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    /// Per-sample shape, `[C, H, W]`.
    pub sample_shape: Vec<usize>,
}

impl Split {
    pub fn new(images: Vec<f32>, labels: Vec<u8>, sample_shape: Vec<usize>) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Shape(format!(
                "{} pixels for {} samples of shape {sample_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        Ok(Split {
            images,
            labels,
            sample_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Gathers the given samples into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Shape(format!("sample {i} out of range")));
            }
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
            labels.push(self.labels[i] as usize);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// Contiguous samples `[start, end)`.
    pub fn range(&self, start: usize, end: usize) -> Result<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        self.gather(&idx)
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Split {
        let n = n.min(self.len());
        let per = self.sample_len();
        Split {
            images: self.images[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            sample_shape: self.sample_shape.clone(),
        }
    }

    /// Iterates over consecutive batches of at most `size` samples.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Result<(Tensor, Vec<usize>)>> + '_ {
        let size = size.max(1);
        (0..self.len())
            .step_by(size)
            .map(move |s| self.range(s, s + size))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    /// Held-out split used for validation and scoring.
    pub test: Split,
    pub num_classes: usize,
}

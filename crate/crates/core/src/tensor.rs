use crate::error::{Error, Result};

/// Dense row-major tensor of `f32`. Feature maps are `[N, C, H, W]`,
/// convolution kernels `[Out, In, K, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid extents {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "invalid extents {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [a, b] => Ok((a, b)),
            _ => Err(Error::Shape(format!("expected 2-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::Shape(format!("expected 4-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Batch size, the leading extent.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Copy of samples `[start, end)` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.shape[0] {
            return Err(Error::Shape(format!(
                "batch range {start}..{end} out of bounds for {:?}",
                self.shape
            )));
        }
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * per..end * per].to_vec(),
        })
    }

    /// Concatenates along the leading axis.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("no tensors to concatenate".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::Shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Largest element-wise absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }
}

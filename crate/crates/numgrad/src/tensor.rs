use crate::{Error, Result};

/// A dense row-major array of `f64` with an explicit shape.
///
/// Rank 0 (empty shape, one value) is a scalar. Extents must be positive:
/// zero-sized tensors are rejected rather than silently supported.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `product(shape)` matches the value count
    /// and that every extent is positive.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidTensor {
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::InvalidTensor {
                detail: format!(
                    "shape {shape:?} holds {numel} values, got {}",
                    values.len()
                ),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
        })
    }

    /// A tensor of zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, 0.0)
    }

    /// A tensor with every entry equal to `value`.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; numel],
        }
    }

    /// A rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// The single value of a one-element tensor.
    ///
    /// Panics if the tensor holds more than one value; callers use this only
    /// on loss/report scalars whose shape they control.
    pub fn item(&self) -> f64 {
        assert!(
            self.numel() == 1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.values[0]
    }

    /// True when every entry is finite (no NaN, no ±Inf).
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Entry accessor for rank-2 tensors, used by tests and report code.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        assert!(self.rank() == 2, "at2 on shape {:?}", self.shape);
        self.values[i * self.shape[1] + j]
    }

    /// Concatenates tensors along `axis`. All parts must share rank and every
    /// extent except the one being joined.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::InvalidTensor {
            detail: "concat of zero tensors".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidTensor {
                detail: format!("concat axis {axis} out of range for rank {rank}"),
            });
        }
        let mut joined = 0usize;
        for p in parts {
            if p.rank() != rank
                || p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::InvalidTensor {
                    detail: format!(
                        "concat shapes disagree off axis {axis}: {:?} vs {:?}",
                        first.shape, p.shape
                    ),
                });
            }
            joined += p.shape[axis];
        }
        let mut shape = first.shape.clone();
        shape[axis] = joined;

        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut values = Vec::with_capacity(shape.iter().product());
        for block in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                let start = block * chunk;
                values.extend_from_slice(&p.values[start..start + chunk]);
            }
        }
        Tensor::new(&shape, values)
    }

    /// Splits along `axis` into parts of the given extents; the exact inverse
    /// of [`Tensor::concat`].
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if axis >= self.rank() {
            return Err(Error::InvalidTensor {
                detail: format!("split axis {axis} out of range for rank {}", self.rank()),
            });
        }
        if sizes.iter().sum::<usize>() != self.shape[axis] {
            return Err(Error::InvalidTensor {
                detail: format!(
                    "split sizes {sizes:?} do not cover extent {}",
                    self.shape[axis]
                ),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let row = self.shape[axis] * inner;

        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0usize;
        for &size in sizes {
            let mut shape = self.shape.clone();
            shape[axis] = size;
            let mut values = Vec::with_capacity(outer * size * inner);
            for block in 0..outer {
                let start = block * row + offset * inner;
                values.extend_from_slice(&self.values[start..start + size * inner]);
            }
            out.push(Tensor::new(&shape, values)?);
            offset += size;
        }
        Ok(out)
    }
}

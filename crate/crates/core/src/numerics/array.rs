use super::{NumericsError, Real};

/// Contiguous row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<E = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Real> Array<E> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self, NumericsError> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self, NumericsError> {
        Self::from_vec(shape, data.iter().map(|&v| E::of(v)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    /// Rank-0 array holding one value.
    pub fn scalar(value: E) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> Option<E> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self, NumericsError> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NumericsError::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("cannot hold {} elements", self.data.len()),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self, NumericsError> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<F: Real>(&self) -> Array<F> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::of(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len().max(1) as f64
    }

    /// Smallest and largest value, ignoring nothing (NaN propagates).
    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.as_f64();
            (lo.min(v), hi.max(v))
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, NumericsError> {
        self.expect_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Sub-array along the leading axis, `[start, end)`.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self, NumericsError> {
        let outer = *self.shape.first().unwrap_or(&0);
        if start > end || end > outer {
            return Err(NumericsError::InvalidShape {
                op: "slice_outer",
                shape: self.shape.clone(),
                reason: format!("range {start}..{end} out of bounds"),
            });
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * stride..end * stride].to_vec(),
        })
    }

    /// Concatenates arrays along the leading axis.
    pub fn stack_outer(parts: &[Self]) -> Result<Self, NumericsError> {
        let first = parts.first().ok_or_else(|| NumericsError::InvalidShape {
            op: "stack_outer",
            shape: Vec::new(),
            reason: "no parts".into(),
        })?;
        let inner = &first.shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut outer = 0;
        for part in parts {
            if part.shape.len() != first.shape.len() || &part.shape[1..] != inner {
                return Err(NumericsError::ShapeMismatch {
                    op: "stack_outer",
                    lhs: first.shape.clone(),
                    rhs: part.shape.clone(),
                });
            }
            outer += part.shape[0];
            data.extend_from_slice(&part.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Ok(Self { shape, data })
    }

    pub(crate) fn expect_same_shape(
        &self,
        op: &'static str,
        other: &Self,
    ) -> Result<(), NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }
}

use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use super::track;
use crate::{Error, Result};

/// Handle of a value on a [`super::GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Dense row-major tensor of `f64` values.
///
/// The buffer is shared (`Arc`), so clones are cheap and tensors without a
/// tape node are immutable values safe to read from any thread. `node` is
/// set only while a tensor participates in a gradient tape.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) node: Option<NodeId>,
}

impl Tensor {
    /// 1-D tensor from raw values.
    pub fn vector(data: Vec<f64>) -> Self {
        track::record(data.len());
        Tensor {
            shape: vec![data.len()],
            data: Arc::new(data),
            node: None,
        }
    }

    /// 2-D tensor from row-major values; `data.len()` must equal
    /// `rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix",
                alloc::format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        track::record(data.len());
        Ok(Tensor {
            shape: vec![rows, cols],
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        track::record(numel);
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            node: None,
        }
    }

    /// Identity matrix, mostly for tests.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        track::record(data.len());
        Tensor {
            shape: vec![n, n],
            data: Arc::new(data),
            node: None,
        }
    }

    /// Tensor with entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..=bound)).collect();
        track::record(numel);
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        track::record(data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape("dims2", alloc::format!("expected 2-D, got {:?}", self.shape))),
        }
    }

    /// Length of a 1-D tensor.
    pub fn dim1(&self) -> Result<usize> {
        match self.shape[..] {
            [n] => Ok(n),
            _ => Err(Error::shape("dim1", alloc::format!("expected 1-D, got {:?}", self.shape))),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Mutable access to the underlying buffer (copy-on-write if shared).
    ///
    /// Only meaningful for tensors outside a tape; mutating a taped value
    /// would invalidate recorded closures.
    pub fn data_mut(&mut self) -> &mut [f64] {
        debug_assert!(self.node.is_none(), "mutating a tensor tracked on a tape");
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Value at `(row, col)` of a 2-D tensor.
    pub fn get2(&self, row: usize, col: usize) -> f64 {
        let cols = self.shape[1];
        self.data[row * cols + col]
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape("scalar", "tensor has more than one element".to_string()))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Copy of this tensor detached from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node)
            .field("data", &self.data)
            .finish()
    }
}

impl serde::Serialize for Tensor {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> core::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("Tensor", 2)?;
        s.serialize_field("shape", &self.shape)?;
        s.serialize_field("data", self.data.as_slice())?;
        s.end()
    }
}

impl<'de> serde::Deserialize<'de> for Tensor {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> core::result::Result<Self, D::Error> {
        #[derive(serde::Deserialize)]
        struct Raw {
            shape: Vec<usize>,
            data: Vec<f64>,
        }
        let raw = Raw::deserialize(deserializer)?;
        if raw.shape.iter().product::<usize>() != raw.data.len() {
            return Err(serde::de::Error::custom("tensor shape does not match data length"));
        }
        Ok(Tensor::from_parts(raw.shape, raw.data))
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_rejects_wrong_length() {
        assert!(Tensor::matrix(2, 3, vec![1.0; 5]).is_err());
        assert!(Tensor::matrix(2, 3, vec![1.0; 6]).is_ok());
    }

    #[test]
    fn shape_product_equals_len() {
        let t = Tensor::zeros(&[3, 4]);
        assert_eq!(t.shape().iter().product::<usize>(), t.numel());
    }

    #[test]
    fn data_mut_copies_when_shared() {
        let mut a = Tensor::vector(vec![1.0, 2.0]);
        let b = a.clone();
        a.data_mut()[0] = 9.0;
        assert_eq!(b.data(), &[1.0, 2.0]);
        assert_eq!(a.data(), &[9.0, 2.0]);
    }
}

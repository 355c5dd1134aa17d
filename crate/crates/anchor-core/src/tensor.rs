//! Dense tensors: the universal numeric carrier.
//!
//! Values are stored as `f64` regardless of precision mode. In [`Precision::F32`]
//! every op output (and every parameter update) is rounded onto the f32 grid, so
//! training numerics match single precision while verification suites can run the
//! same code in full double precision. The mode travels with the tape / run
//! configuration, never with individual tensors.

use crate::error::{AnchorError, Result};

/// Global numeric mode for a tape or a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    /// Training mode: op outputs are rounded to f32; kernels may compute in f32.
    #[serde(rename = "f32")]
    F32,
    /// Verification mode: full double precision end to end.
    #[serde(rename = "f64")]
    F64,
}

impl Precision {
    /// Round a value onto this precision's representable grid.
    #[inline]
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    /// Round a slice in place.
    pub fn quantize_slice(self, vs: &mut [f64]) {
        if self == Precision::F32 {
            for v in vs.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = AnchorError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(AnchorError::Config(format!(
                "precision must be f32 or f64, got {other:?}"
            ))),
        }
    }
}

/// Dense n-dimensional array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Populated by `Tape::backward` for tensors read back off a tape.
    pub grad: Option<Vec<f64>>,
    /// Leaves with this flag receive gradients during backward.
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(AnchorError::BadShape {
                op: "tensor",
                shape,
                reason: format!("shape product != value count {}", values.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(AnchorError::BadShape {
                op: "tensor",
                shape,
                reason: "zero-sized dimension".into(),
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// All values finite; the invariant every successful op must uphold.
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Round values onto the precision grid.
    pub fn quantize(&mut self, precision: Precision) {
        precision.quantize_slice(&mut self.values);
    }

    /// Reshape without touching data. Element count must match.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(AnchorError::BadShape {
                op: "reshape",
                shape,
                reason: format!("element count {} does not match", self.values.len()),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Max |a - b| over elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(AnchorError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn f32_quantization_is_idempotent() {
        let mut t = Tensor::new(vec![3], vec![0.1, 1.0 / 3.0, 2.5]).unwrap();
        t.quantize(Precision::F32);
        let once = t.values().to_vec();
        t.quantize(Precision::F32);
        assert_eq!(once, t.values());
    }

    #[test]
    fn f64_quantization_is_identity() {
        let vals = vec![0.1, 1.0 / 3.0, 2.5];
        let mut t = Tensor::new(vec![3], vals.clone()).unwrap();
        t.quantize(Precision::F64);
        assert_eq!(t.values(), &vals[..]);
    }
}

//! Dense row-major f64 tensors.
//!
//! Everything the models touch is small enough that 64-bit precision is
//! cheap, and it is what lets the gradient checks run at tight tolerances.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense tensor of 64-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor, validating shape/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        let t = Tensor { shape, data, requires_grad: false };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    /// 2-D constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dimension("from_rows: no rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("from_rows: ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![1.0; numel], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![v], requires_grad: false }
    }

    /// Identity matrix of order `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut SeededRng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..=bound)).collect();
        Tensor { shape, data, requires_grad: false }
    }

    /// Entries drawn from a zero-mean Gaussian with the given deviation.
    pub fn gaussian(shape: Vec<usize>, std_dev: f64, rng: &mut SeededRng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                z * std_dev
            })
            .collect();
        Tensor { shape, data, requires_grad: false }
    }

    /// Mark the tensor as a gradient target when placed on a graph.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count; tensors participating in matrix ops must be 2-D.
    pub fn rows(&self) -> Result<usize> {
        self.dims2().map(|(r, _)| r)
    }

    pub fn cols(&self) -> Result<usize> {
        self.dims2().map(|(_, c)| c)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension(format!("expected 2-D tensor, got {other:?}"))),
        }
    }

    /// Element access for 2-D tensors (unchecked beyond debug builds).
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!("expected scalar, got shape {:?}", self.shape)))
        }
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "max_abs_diff: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Xavier (Glorot) uniform initialization for a 2-D shape.
///
/// Entries are uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(shape: &[usize], rng: &mut SeededRng) -> Result<Tensor> {
    let [fan_in, fan_out] = match shape {
        [r, c] => [*r, *c],
        other => {
            return Err(Error::Contract(format!(
                "xavier_uniform needs a 2-D shape, got {other:?}"
            )))
        }
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Ok(Tensor::uniform(vec![fan_in, fan_out], bound, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Tensor::new(vec![1, 2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![1, 2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn xavier_same_seed_identical() {
        let a = xavier_uniform(&[7, 5], &mut rng::stream(3, "init")).unwrap();
        let b = xavier_uniform(&[7, 5], &mut rng::stream(3, "init")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn xavier_bound_holds() {
        let t = xavier_uniform(&[100, 100], &mut rng::stream(1, "init")).unwrap();
        let bound = (6.0 / 200.0f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn xavier_mean_near_zero() {
        // 10^4 entries; mean should sit within 3 standard errors of zero.
        let t = xavier_uniform(&[100, 100], &mut rng::stream(11, "init")).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let bound = (6.0 / 200.0f64).sqrt();
        let se = (bound * bound / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} exceeds 3 SE {se}");
    }

    #[test]
    fn xavier_rejects_non_2d() {
        assert!(xavier_uniform(&[4], &mut rng::root(0)).is_err());
        assert!(xavier_uniform(&[2, 2, 2], &mut rng::root(0)).is_err());
    }
}

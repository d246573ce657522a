//! Dense row-major `f64` tensors and the reverse-mode tape built on them.

mod container;
mod gradcheck;
mod kernels;
mod tape;

pub use container::{read_container, write_container, Container, CONTAINER_MAGIC};
pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport};
pub use tape::{Grads, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, PftError, Result};

/// Dense value array. `product(shape) == data.len()` always holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return shape_err("tensor", &shape, &[data.len()]);
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..numel(shape)).map(|_| normal.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let dist = Uniform::new(lo, hi).expect("uniform bounds");
        let data = (0..numel(shape)).map(|_| dist.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return shape_err("reshape", &self.shape, shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(PftError::NonFinite(what.to_string()))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mirror a `[C, H, W]` map along its last axis.
    pub fn flip_horizontal(&self) -> Result<Tensor> {
        let [c, h, w] = chw(&self.shape, "flip_horizontal")?;
        let mut out = vec![0.0; self.data.len()];
        for ci in 0..c {
            for y in 0..h {
                let row = (ci * h + y) * w;
                for x in 0..w {
                    out[row + x] = self.data[row + w - 1 - x];
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Bilinear resize of a `[C, H, W]` map (align-corners = false).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let [c, h, w] = chw(&self.shape, "resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(PftError::Config("resize target must be at least 1x1".into()));
        }
        let data = kernels::resize_forward(&self.data, c, h, w, out_h, out_w);
        Tensor::new(vec![c, out_h, out_w], data)
    }
}

pub(crate) fn chw(shape: &[usize], op: &'static str) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => shape_err(op, shape, &[0, 0, 0]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(PftError::Shape { .. })
        ));
    }

    #[test]
    fn flip_twice_is_identity() {
        let t = Tensor::new(vec![1, 2, 3], (0..6).map(f64::from).collect()).unwrap();
        let f = t.flip_horizontal().unwrap();
        assert_eq!(f.data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert_eq!(f.flip_horizontal().unwrap(), t);
    }
}

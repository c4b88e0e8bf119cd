use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named dense row-major array of doubles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut t = Self::zeros(name, shape);
        for x in t.data.iter_mut() {
            *x = rng.gen_range(-scale..=scale);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.name.clone(), &self.shape)
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// `out += self * x` for a 2-D tensor.
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        let cols = self.shape[1];
        debug_assert_eq!(x.len(), cols);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += self^T * y` for a 2-D tensor.
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        let cols = self.shape[1];
        for (&yr, row) in y.iter().zip(self.data.chunks_exact(cols)) {
            if yr != 0.0 {
                axpy(yr, row, out);
            }
        }
    }

    /// `self += y x^T` for a 2-D tensor.
    pub fn outer_acc(&mut self, y: &[f64], x: &[f64]) {
        let cols = self.shape[1];
        for (&yr, row) in y.iter().zip(self.data.chunks_exact_mut(cols)) {
            if yr != 0.0 {
                axpy(yr, x, row);
            }
        }
    }

    pub fn check_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape || self.data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "tensor {} has shape {:?}, expected {:?}",
                self.name, self.shape, shape
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// A collection of named tensors that can be flattened for optimizers,
/// finite differences and serialization.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    fn set_flat(&mut self, values: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        assert_eq!(off, values.len(), "flat vector length mismatch");
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// First tensor holding a non-finite value.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .iter()
            .find(|t| !t.all_finite())
            .map(|t| t.name.clone())
    }

    fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for x in t.data.iter_mut() {
                *x *= s;
            }
        }
    }

    /// `self += s * other`; both must share a layout.
    fn add_scaled(&mut self, s: f64, other: &Self) {
        for (t, o) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(s, &o.data, &mut t.data);
        }
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

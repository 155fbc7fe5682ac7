//! Named dense parameter tensors shared by the generator and the critic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

/// A row-major matrix (or vector when `cols == 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, rows: usize, cols: usize) -> Self {
        Self { name: name.to_string(), rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self · x`.
    pub fn matvec_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    /// `out += selfᵀ · y`.
    pub fn matvec_t_add(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), out);
            }
        }
    }

    /// `self += scale · y xᵀ`.
    pub fn outer_add(&mut self, scale: f64, y: &[f64], x: &[f64]) {
        for (r, &yr) in y.iter().enumerate() {
            let s = scale * yr;
            if s != 0.0 {
                axpy(s, x, self.row_mut(r));
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`.
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Log-sum-exp with the max shift.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// An ordered set of named tensors. Gradients and optimizer state use the
/// same layout as the parameters they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.name, t.rows, t.cols)).collect(),
        }
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fills every tensor whose name does not end in `bias` with uniform
    /// draws from `[-scale, scale]`; biases are zeroed.
    pub fn init_uniform(&mut self, scale: f64, rng: &mut impl Rng) {
        for t in &mut self.tensors {
            let is_bias = t.name.ends_with("bias");
            for v in &mut t.data {
                *v = if is_bias { 0.0 } else { rng.gen_range(-scale..=scale) };
            }
        }
    }

    /// Fan-in scaled init: lookup tables (`*embedding`) get `±0.5`, weight
    /// matrices `±1/√cols`, biases zero.
    pub fn init_fan_in(&mut self, rng: &mut impl Rng) {
        for t in &mut self.tensors {
            let scale = if t.name.ends_with("bias") {
                0.0
            } else if t.name.ends_with("embedding") {
                0.5
            } else {
                1.0 / (t.cols as f64).sqrt()
            };
            for v in &mut t.data {
                *v = if scale == 0.0 { 0.0 } else { rng.gen_range(-scale..=scale) };
            }
        }
    }

    pub fn fill(&mut self, value: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = value);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.len(), "flat parameter length mismatch");
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&values[off..off + n]);
            off += n;
        }
    }

    /// Value at flat index `i` and the tensor it belongs to.
    pub fn locate(&self, mut i: usize) -> (usize, usize) {
        for (ti, t) in self.tensors.iter().enumerate() {
            if i < t.data.len() {
                return (ti, i);
            }
            i -= t.data.len();
        }
        panic!("flat index out of range");
    }

    pub fn add_scaled(&mut self, scale: f64, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            axpy(scale, &b.data, &mut a.data);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flat_map(|t| &t.data).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Fails with the name of the first tensor holding a non-finite value.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.tensors.iter().find(|t| t.data.iter().any(|v| !v.is_finite())) {
            None => Ok(()),
            Some(t) => Err(PipelineError::NonFinite { context: context.to_string(), parameter: t.name.clone() }),
        }
    }

    /// Same names and shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.rows == b.rows && a.cols == b.cols)
    }
}

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::par::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn identity(dim: usize, eps: f32) -> Self {
        Self {
            weight: vec![1.0; dim],
            bias: vec![0.0; dim],
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + self.eps as f64).sqrt();
        x.iter()
            .zip(self.weight.iter().zip(&self.bias))
            .map(|(&v, (&g, &b))| ((v as f64 - mean) * inv) as f32 * g + b)
            .collect()
    }

    pub(crate) fn apply_rows(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut out = Array2::zeros(x.dim());
        for (src, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            let row = self.apply(src.as_slice().expect("row-major activations"));
            dst.assign(&Array1::from(row));
        }
        out
    }
}

/// GPT-2's tanh approximation of GELU.
pub(crate) fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const COL_CHUNK: usize = 256;

/// `a @ w + bias`, splitting the output columns across the pool.
pub(crate) fn affine(exec: Exec, a: ArrayView2<f32>, w: &Array2<f32>, bias: &[f32]) -> Array2<f32> {
    let (rows, cols) = (a.nrows(), w.ncols());
    let mut out = if exec == Exec::Sequential || cols <= COL_CHUNK {
        a.dot(w)
    } else {
        let starts: Vec<usize> = (0..cols).step_by(COL_CHUNK).collect();
        let parts = exec.map(&starts, |&c0| {
            let c1 = (c0 + COL_CHUNK).min(cols);
            a.dot(&w.slice(s![.., c0..c1]))
        });
        let mut out = Array2::zeros((rows, cols));
        for (&c0, part) in starts.iter().zip(parts) {
            let c1 = c0 + part.ncols();
            out.slice_mut(s![.., c0..c1]).assign(&part);
        }
        out
    };
    out += &ArrayView2::from_shape((1, cols), bias).expect("bias length matches columns");
    out
}

/// `matrix @ v` for a row-major `(n, d)` matrix, chunked over rows.
pub(crate) fn matvec(exec: Exec, matrix: &Array2<f32>, v: &[f32]) -> Vec<f32> {
    let n = matrix.nrows();
    let mut out = vec![0.0f32; n];
    exec.fill_chunks(&mut out, 2048, |start, chunk| {
        for (i, slot) in chunk.iter_mut().enumerate() {
            let row = matrix.row(start + i);
            *slot = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let ln = LayerNorm::identity(4, 1e-5);
        let y = ln.apply(&[1.0, 2.0, 3.0, 4.0]);
        let mean: f32 = y.iter().sum::<f32>() / 4.0;
        let var: f32 = y.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = vec![1.0, 2.0, 3.0, -1e9];
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(r[3], 0.0);
    }

    #[test]
    fn affine_policies_match() {
        let a = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f32 * 0.1);
        let w = Array2::from_shape_fn((5, 600), |(i, j)| ((i + 2 * j) % 7) as f32 - 3.0);
        let bias = vec![0.5; 600];
        let seq = affine(Exec::Sequential, a.view(), &w, &bias);
        let par = affine(Exec::Parallel, a.view(), &w, &bias);
        assert_eq!(seq, par);
        let small = affine(Exec::Sequential, array![[1.0f32, 2.0]].view(), &array![[1.0f32], [1.0]], &[1.0]);
        assert_eq!(small[[0, 0]], 4.0);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
    }
}

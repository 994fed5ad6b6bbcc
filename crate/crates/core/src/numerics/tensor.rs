use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
///
/// Only rank 1 and rank 2 shapes are used by the model; higher ranks are
/// representable but no primitive consumes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// A single row, shape `[1, n]`.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "ragged rows: expected {cols} columns, got {}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
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

    /// Rows and columns, treating a rank-1 tensor as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (1, self.data.len()),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        let (_, c) = self.dims2();
        self.data[i * c + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if self.shape.len() != 2 || other.shape.len() != 2 || k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (l, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[l * n..(l + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-wise softmax on plain values, with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    let (r, c) = m.dims2();
    let mut out = m.data.clone();
    for i in 0..r {
        softmax_in_place(&mut out[i * c..(i + 1) * c]);
    }
    Tensor {
        shape: m.shape.clone(),
        data: out,
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Layer normalization of a single vector.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| g * (v - mean) * inv + b)
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Elementwise `tanh(vg·h) ⊙ sigmoid(ug·h)`.
pub fn gated_unit(h: &[f64], vg: &Tensor, ug: &Tensor) -> Result<Vec<f64>> {
    let (l, d) = vg.dims2();
    if ug.dims2() != (l, d) || h.len() != d {
        return Err(Error::Dimension(format!(
            "gated unit: h has {} entries, Vg {:?}, Ug {:?}",
            h.len(),
            vg.shape(),
            ug.shape()
        )));
    }
    Ok((0..l)
        .map(|i| {
            let a: f64 = vg.row_slice(i).iter().zip(h).map(|(w, x)| w * x).sum();
            let b: f64 = ug.row_slice(i).iter().zip(h).map(|(w, x)| w * x).sum();
            a.tanh() * sigmoid(b)
        })
        .collect())
}

pub fn frobenius_norm(m: &Tensor) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn outer(u: &[f64], v: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(u.len() * v.len());
    for a in u {
        data.extend(v.iter().map(|b| a * b));
    }
    Tensor {
        shape: vec![u.len(), v.len()],
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_projector() {
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&b).unwrap(), b);
        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let want = Tensor::from_rows(&[vec![5.0, 6.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(p.matmul(&b).unwrap(), want);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::row(vec![0.0, 0.0, 0.0]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Tensor::row(vec![0.0, 2f64.ln()]));
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let big = softmax_rows(&Tensor::row(vec![1000.0, 1000.5]));
        let small = softmax_rows(&Tensor::row(vec![0.0, 0.5]));
        assert!(big.is_finite());
        assert!(big.max_abs_diff(&small) < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let one = [1.0; 4];
        let zero = [0.0; 4];
        let out = layer_norm(&[3.0; 4], &one, &zero, 1e-5);
        assert!(out.iter().all(|v| *v == 0.0));
        let out = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 0.0);
        assert_eq!(out, vec![1.0, -1.0]);
    }

    #[test]
    fn gated_unit_zero_and_saturation() {
        let vg = Tensor::filled(&[3, 4], 0.7);
        let ug = Tensor::filled(&[3, 4], -0.2);
        assert!(gated_unit(&[0.0; 4], &vg, &ug)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
        let vg = Tensor::filled(&[3, 4], 1e3);
        let ug = Tensor::filled(&[3, 4], 1e3);
        let g = gated_unit(&[1.0; 4], &vg, &ug).unwrap();
        assert!(g.iter().all(|v| *v > 1.0 - 1e-12 && *v <= 1.0));
    }

    #[test]
    fn frobenius_examples() {
        assert!((frobenius_norm(&Tensor::identity(2)) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(frobenius_norm(&Tensor::zeros(&[3, 3])), 0.0);
        assert_eq!(frobenius_norm(&Tensor::row(vec![3.0, 4.0])), 5.0);
    }

    #[test]
    fn outer_examples() {
        let m = outer(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]);
        let nonzero: Vec<usize> = (0..9).filter(|&i| m.data()[i] != 0.0).collect();
        assert_eq!(nonzero, vec![1]);
        assert_eq!(
            outer(&[2.0, 3.0], &[1.0, 0.0]),
            Tensor::from_rows(&[vec![2.0, 0.0], vec![3.0, 0.0]]).unwrap()
        );
        let m = outer(&[0.3, -1.2, 2.5], &[1.1, 0.4, -0.7, 3.0]);
        for i in 0..2 {
            for j in 0..3 {
                let minor = m.at(i, j) * m.at(i + 1, j + 1) - m.at(i, j + 1) * m.at(i + 1, j);
                assert!(minor.abs() < 1e-12);
            }
        }
    }
}

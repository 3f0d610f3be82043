//! Dense row-major `f32` tensors and the handful of kernels the model needs.
//!
//! Every kernel accumulates in `f32` with a fixed per-element summation order
//! (ascending inner index), so the value of an output row never depends on how
//! many other rows are computed alongside it. The streaming runtime relies on
//! this to reproduce full-sequence results bit for bit.

use rayon::prelude::*;

use crate::error::{shape_err, Result};

pub const LAYER_NORM_EPS: f32 = 1e-5;

// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {expected} values, got {}",
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

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows.len() × width]` matrix. All rows must share a width.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * width);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != width {
                return Err(shape_err(format!(
                    "row {i} has width {}, expected {width}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), width],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            return self.shape.first().copied().unwrap_or(0);
        }
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    /// Rows `start..end` of a matrix as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Stacks matrices of equal width along the time axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let width = parts.first().map_or(0, Tensor::cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != width {
                return Err(shape_err(format!("cannot stack width {c} onto width {width}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, width],
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f32) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "residual add of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        if scale == 1.0 {
            for (a, b) in self.data.iter_mut().zip(&other.data) {
                *a += b;
            }
        } else {
            for (a, b) in self.data.iter_mut().zip(&other.data) {
                *a += scale * b;
            }
        }
        Ok(())
    }
}

fn matmul_rows(a: &[f32], b: &[f32], out: &mut [f32], k: usize, n: usize) {
    for (arow, crow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err(format!("matmul [{m}×{k}] × [{k2}×{n}]")));
    }
    let mut out = vec![0.0f32; m * n];
    if n == 0 || k == 0 {
        return Tensor::new(vec![m, n], out);
    }
    if m > 1 && m * k * n >= PAR_THRESHOLD {
        let rows_per_task = (PAR_THRESHOLD / (k * n)).max(1);
        out.par_chunks_mut(rows_per_task * n)
            .zip(a.data.par_chunks(rows_per_task * k))
            .for_each(|(c, arows)| matmul_rows(arows, &b.data, c, k, n));
    } else {
        matmul_rows(&a.data, &b.data, &mut out, k, n);
    }
    Tensor::new(vec![m, n], out)
}

/// `x · w + bias`, with `w` stored `[d_in × d_out]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, d_out) = w.dims2()?;
    if bias.len() != d_out {
        return Err(shape_err(format!(
            "bias of length {} for output width {d_out}",
            bias.len()
        )));
    }
    let mut y = matmul(x, w)?;
    if d_out > 0 {
        for row in y.data.chunks_exact_mut(d_out) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
    }
    Ok(y)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    if d == 0 || gamma.len() != d || beta.len() != d {
        return Err(shape_err(format!(
            "layer_norm width {d} with gamma {} / beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(d) {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn swish(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in &mut out.data {
        *v *= sigmoid(*v);
    }
    out
}

/// Gated linear unit over the last axis: `[T × 2d] → [T × d]`, `a ⊙ σ(b)`.
pub fn glu(x: &Tensor) -> Result<Tensor> {
    let (t, two_d) = x.dims2()?;
    if two_d % 2 != 0 {
        return Err(shape_err(format!("glu needs an even width, got {two_d}")));
    }
    let d = two_d / 2;
    let mut out = Vec::with_capacity(t * d);
    for row in x.data.chunks_exact(two_d.max(1)).take(t) {
        let (a, b) = row.split_at(d);
        out.extend(a.iter().zip(b).map(|(a, b)| a * sigmoid(*b)));
    }
    Tensor::new(vec![t, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor::new(vec![r, c], data).unwrap()
    }

    fn t2(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = t2(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let a = t2(&[&[1.0, 2.0]]);
        let c = t2(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 7, 5);
        let b = random(&mut rng, 5, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0f32;
                for p in 0..5 {
                    acc += a.get2(i, p) * b.get2(p, j);
                }
                assert_eq!(c.get2(i, j), acc);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            matmul(&a, &b),
            Err(crate::Error::InvalidShape(_))
        ));
    }

    #[test]
    fn parallel_matmul_rows_match_single_row_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 64, 256);
        let b = random(&mut rng, 256, 96);
        let full = matmul(&a, &b).unwrap();
        for i in [0, 17, 63] {
            let single = matmul(&a.slice_rows(i, i + 1), &b).unwrap();
            assert_eq!(single.data(), full.row(i));
        }
    }

    #[test]
    fn linear_cases() {
        let x = t2(&[&[1.0, 1.0]]);
        let w = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let y = linear(&x, &w, &Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0]);

        let z = t2(&[&[0.0, 0.0]]);
        let w = t2(&[&[2.0, -4.0], &[9.0, 1.5]]);
        let y = linear(&z, &w, &Tensor::from_vec(vec![3.0, -1.0])).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 4, 3);
        let w = random(&mut rng, 3, 2);
        let b = Tensor::from_vec(vec![0.25, -0.5]);
        let y = linear(&x, &w, &b).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut acc = 0.0f32;
                for p in 0..3 {
                    acc += x.get2(i, p) * w.get2(p, j);
                }
                assert!((y.get2(i, j) - (acc + b.data()[j])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::filled(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let y = layer_norm(&t2(&[&[1.0, 1.0, 1.0]]), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let g = Tensor::filled(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let y = layer_norm(&t2(&[&[-1.0, 1.0]]), &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6 && (y.data()[1] - 1.0).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 1, 32);
        let y = layer_norm(&x, &Tensor::filled(&[32], 1.0), &Tensor::zeros(&[32]), LAYER_NORM_EPS)
            .unwrap();
        let mean = y.data().iter().sum::<f32>() / 32.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 32.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn swish_values() {
        let y = swish(&Tensor::from_vec(vec![0.0, 10.0, 1.0]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-3);
        assert!((y.data()[2] - 0.731_058_6).abs() < 1e-6);
    }

    #[test]
    fn glu_halves_width() {
        let x = t2(&[&[2.0, 0.0]]);
        assert_eq!(glu(&x).unwrap().data(), &[1.0]);
        assert!(glu(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn zero_row_tensors_pass_through() {
        let x = Tensor::zeros(&[0, 4]);
        let w = Tensor::zeros(&[4, 2]);
        let y = linear(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.shape(), &[0, 2]);
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}

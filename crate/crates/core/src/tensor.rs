//! Dense row-major `f64` tensors and their forward kernels.
//!
//! The kernels here are plain functions over owned tensors. [`crate::tape::Tape`]
//! calls them while recording, and the backward rules live next to the tape.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return dim_err("tensor", &shape, &[data.len()]);
        }
        if shape.iter().product::<usize>() != data.len() {
            return dim_err("tensor", &shape, &[data.len()]);
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

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    /// A 1-D tensor. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::vector(vec![value])
    }

    /// A 2-D tensor from equal-length rows. Panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged matrix");
            data.extend_from_slice(r);
        }
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        if bound > 0.0 {
            for x in &mut t.data {
                *x = rng.random_range(-bound..=bound);
            }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a matrix, or 1 for a vector.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a matrix, or the length of a vector.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return dim_err(op, &self.shape, &[]);
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matmul")?;
    let (k2, n) = b.require_matrix("matmul")?;
    if k != k2 {
        return dim_err("matmul", a.shape(), b.shape());
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Matrix `[m×k]` times vector `[k]`.
pub fn matvec(a: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matvec")?;
    if x.rank() != 1 || x.len() != k {
        return dim_err("matvec", a.shape(), x.shape());
    }
    let out = (0..m).map(|i| dot(a.row(i), &x.data)).collect();
    Ok(Tensor::vector(out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return dim_err("add", a.shape(), b.shape());
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Same-padded 1-D convolution over a token sequence.
///
/// `embeds` is `[M×D]`, `filters` is `[N_f×(w·D)]` for an odd window `w`.
/// Row `i` of the output is `filters · concat(embeds[i-k..=i+k]) + bias` with
/// out-of-range positions contributing zeros, so the output has `M` rows.
pub fn conv1d_seq(embeds: &Tensor, filters: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (len, dim) = embeds.require_matrix("conv1d_seq")?;
    let (nf, width) = filters.require_matrix("conv1d_seq")?;
    if width % dim != 0 || (width / dim) % 2 == 0 {
        return dim_err("conv1d_seq", embeds.shape(), filters.shape());
    }
    if bias.rank() != 1 || bias.len() != nf {
        return dim_err("conv1d_seq", filters.shape(), bias.shape());
    }
    let half = (width / dim) / 2;
    let mut out = vec![0.0; len * nf];
    for i in 0..len {
        let orow = &mut out[i * nf..(i + 1) * nf];
        orow.copy_from_slice(&bias.data);
        for (tap, pos) in window(i, half, len) {
            let e = embeds.row(pos);
            for (f, o) in orow.iter_mut().enumerate() {
                let w = &filters.data[f * width + tap * dim..f * width + (tap + 1) * dim];
                *o += dot(w, e);
            }
        }
    }
    Tensor::new(vec![len, nf], out)
}

/// In-range `(tap, position)` pairs of the window centred at `i`.
pub(crate) fn window(i: usize, half: usize, len: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..2 * half + 1).filter_map(move |tap| {
        let pos = (i + tap).checked_sub(half)?;
        (pos < len).then_some((tap, pos))
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(libm::tanh)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

pub fn softmax(x: &Tensor) -> Tensor {
    masked_softmax(x, None)
}

/// Softmax over the unmasked entries; masked entries come out as exactly 0.
///
/// At least one entry must be unmasked.
pub fn masked_softmax(x: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let max = x
        .data
        .iter()
        .enumerate()
        .filter(|&(i, _)| keep(i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| if keep(i) { libm::exp(v - max) } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: returns the output and the per-element scale mask
/// (`0` or `1/(1-rate)`), which is also the backward multiplier.
pub fn dropout<R: Rng + ?Sized>(
    x: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(alloc::format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data,
        },
        Some(mask),
    ))
}

pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (rows, dim) = table.require_matrix("embedding_lookup")?;
    if ids.is_empty() {
        return dim_err("embedding_lookup", table.shape(), &[0]);
    }
    let mut data = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        if id >= rows {
            return Err(Error::Index {
                what: "embedding table",
                index: id,
                size: rows,
            });
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), dim], data)
}

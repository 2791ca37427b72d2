//! Tape of tensor operations with a reverse-mode pass.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order; [`Graph::backward`] walks it once in reverse.

use rand::Rng;

use super::tensor::{matmul, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics from a training-mode batch norm, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
    /// Number of values each statistic was computed over.
    pub count: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst { input: Var, factor: Vec<T> },
    Relu(Var),
    Conv1d { input: Var, kernel: Var, dilation: usize },
    MaxPool { input: Var, argmax: Vec<u32> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    MeanLength(Var),
    L2Normalize { input: Var, norms: Vec<T> },
    ConcatRows(Var, Var),
    MatMulT(Var, Var),
    DotRows(Var, Var),
    Dot(Var, Var),
    LogSumExpRows { input: Var, mask: Option<Vec<bool>> },
    WeightedSum { input: Var, coeffs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn dims3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::shape(format!("{what}: expected 3-d tensor, got {shape:?}"))),
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [a, b] => Ok((a, b)),
        _ => Err(Error::shape(format!("{what}: expected 2-d tensor, got {shape:?}"))),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Lays out the dilated receptive fields of `x` ([n, c_in, len]) as a
/// `[c_in*k, n*len]` matrix.
fn im2col<T: Real>(x: &[T], n: usize, c_in: usize, len: usize, k: usize, dilation: usize) -> Vec<T> {
    let pad = dilation * (k - 1) / 2;
    let cols = n * len;
    let mut col = vec![T::zero(); c_in * k * cols];
    for c in 0..c_in {
        for kk in 0..k {
            let row = &mut col[(c * k + kk) * cols..(c * k + kk + 1) * cols];
            let shift = (kk * dilation) as isize - pad as isize;
            let lo = (-shift).max(0) as usize;
            let hi = ((len as isize - shift).min(len as isize)).max(0) as usize;
            if lo >= hi {
                continue;
            }
            for s in 0..n {
                let src = &x[(s * c_in + c) * len..(s * c_in + c + 1) * len];
                let dst = &mut row[s * len..(s + 1) * len];
                let from = (lo as isize + shift) as usize;
                dst[lo..hi].copy_from_slice(&src[from..from + (hi - lo)]);
            }
        }
    }
    col
}

fn col2im<T: Real>(
    col: &[T],
    dx: &mut [T],
    n: usize,
    c_in: usize,
    len: usize,
    k: usize,
    dilation: usize,
) {
    let pad = dilation * (k - 1) / 2;
    let cols = n * len;
    for c in 0..c_in {
        for kk in 0..k {
            let row = &col[(c * k + kk) * cols..(c * k + kk + 1) * cols];
            let shift = (kk * dilation) as isize - pad as isize;
            let lo = (-shift).max(0) as usize;
            let hi = ((len as isize - shift).min(len as isize)).max(0) as usize;
            if lo >= hi {
                continue;
            }
            for s in 0..n {
                let src = &row[s * len..(s + 1) * len];
                let from = (lo as isize + shift) as usize;
                let dst = &mut dx[(s * c_in + c) * len + from..(s * c_in + c) * len + from + (hi - lo)];
                add_into(dst, &src[lo..hi]);
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let src = self.value(a);
        let v = Tensor::new(src.shape(), src.data().iter().map(|&x| x * factor).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, factor), rg)
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(&mut self, a: Var, factor: Vec<T>) -> Result<Var> {
        let src = self.value(a);
        if factor.len() != src.len() {
            return Err(Error::shape(format!(
                "mul_const: {} factors for {} values",
                factor.len(),
                src.len()
            )));
        }
        let v = Tensor::new(
            src.shape(),
            src.data().iter().zip(&factor).map(|(&x, &f)| x * f).collect(),
        )?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::MulConst { input: a, factor }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let v = Tensor::new(
            src.shape(),
            src.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        self.mul_const(a, mask)
    }

    /// Same-padded dilated 1-d convolution, no bias.
    ///
    /// `input` is `[n, c_in, len]`, `kernel` is `[c_out, c_in, k]` with odd `k`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (n, c_in, len) = dims3(self.shape(input), "conv1d input")?;
        let (c_out, kc_in, k) = dims3(self.shape(kernel), "conv1d kernel")?;
        if kc_in != c_in {
            return Err(Error::shape(format!(
                "conv1d: kernel expects {kc_in} input channels, input has {c_in}"
            )));
        }
        if k % 2 == 0 || dilation == 0 {
            return Err(Error::shape(format!(
                "conv1d: kernel size {k} must be odd and dilation {dilation} positive"
            )));
        }
        let col = im2col(self.value(input).data(), n, c_in, len, k, dilation);
        let cols = n * len;
        let mut tmp = vec![T::zero(); c_out * cols];
        matmul(self.value(kernel).data(), false, &col, false, c_out, c_in * k, cols, &mut tmp, T::zero());
        let mut out = vec![T::zero(); n * c_out * len];
        for o in 0..c_out {
            for s in 0..n {
                out[(s * c_out + o) * len..(s * c_out + o + 1) * len]
                    .copy_from_slice(&tmp[o * cols + s * len..o * cols + (s + 1) * len]);
            }
        }
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            Tensor::new(&[n, c_out, len], out)?,
            Op::Conv1d { input, kernel, dilation },
            rg,
        ))
    }

    /// Window-2, stride-2 max pooling over the last axis of `[n, c, len]`.
    /// Ties go to the first element of the window.
    pub fn maxpool1d(&mut self, input: Var) -> Result<Var> {
        let (n, c, len) = dims3(self.shape(input), "maxpool1d")?;
        if len < 2 {
            return Err(Error::shape(format!("maxpool1d: length {len} below window 2")));
        }
        let out_len = len / 2;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * out_len);
        let mut argmax = Vec::with_capacity(n * c * out_len);
        for row in 0..n * c {
            let base = row * len;
            for j in 0..out_len {
                let (a, b) = (x[base + 2 * j], x[base + 2 * j + 1]);
                if b > a {
                    out.push(b);
                    argmax.push((base + 2 * j + 1) as u32);
                } else {
                    out.push(a);
                    argmax.push((base + 2 * j) as u32);
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&[n, c, out_len], out)?, Op::MaxPool { input, argmax }, rg))
    }

    fn check_affine(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, len) = dims3(self.shape(input), "batchnorm input")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batchnorm: gamma {:?} / beta {:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((n, c, len))
    }

    fn bn_apply(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<T>,
        train: bool,
    ) -> Var {
        let shape = self.shape(input).to_vec();
        let (n, c, len) = (shape[0], shape[1], shape[2]);
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let m = T::from_f64(mean[ch]);
                let base = (s * c + ch) * len;
                for i in base..base + len {
                    let xh = (x[i] - m) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(&shape, out).expect("same shape"),
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train },
            rg,
        )
    }

    /// Batch norm over `[n, c, len]` using the batch's per-channel statistics.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BnStats)> {
        let (n, c, len) = self.check_affine(input, gamma, beta)?;
        let count = n * len;
        if count <= 1 {
            return Err(Error::Numeric(
                "batchnorm in training mode needs more than one value per channel".into(),
            ));
        }
        let x = self.value(input).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for s in 0..n {
                sum += x[(s * c + ch) * len..(s * c + ch + 1) * len]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
            let m = sum / count as f64;
            let mut sq = 0.0;
            for s in 0..n {
                sq += x[(s * c + ch) * len..(s * c + ch + 1) * len]
                    .iter()
                    .map(|v| (v.as_f64() - m).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = sq / count as f64;
        }
        let inv_std = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let out = self.bn_apply(input, gamma, beta, &mean, inv_std, true);
        Ok((out, BnStats { mean, var, count }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.check_affine(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batchnorm: running statistics size".to_string()));
        }
        let mean: Vec<f64> = running_mean.iter().map(|v| v.as_f64()).collect();
        let inv_std = running_var
            .iter()
            .map(|v| T::from_f64(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        Ok(self.bn_apply(input, gamma, beta, &mean, inv_std, false))
    }

    /// `input · weightᵀ + bias` for `input` `[n, in]`, `weight` `[out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, d_in) = dims2(self.shape(input), "linear input")?;
        let (d_out, w_in) = dims2(self.shape(weight), "linear weight")?;
        if w_in != d_in {
            return Err(Error::shape(format!("linear: weight expects {w_in} inputs, got {d_in}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d_out] {
                return Err(Error::shape(format!("linear: bias shape {:?}", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); n * d_out];
        matmul(self.value(input).data(), false, self.value(weight).data(), true, n, d_in, d_out, &mut out, T::zero());
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                add_into(row, bv);
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, d_out], out)?, Op::Linear { input, weight, bias }, rg))
    }

    /// Mean over the last axis: `[n, c, len]` -> `[n, c]`.
    pub fn mean_over_length(&mut self, input: Var) -> Result<Var> {
        let (n, c, len) = dims3(self.shape(input), "mean_over_length")?;
        if len == 0 {
            return Err(Error::shape("mean_over_length: empty length"));
        }
        let x = self.value(input).data();
        let out = x
            .chunks(len)
            .map(|row| T::from_f64(row.iter().map(|v| v.as_f64()).sum::<f64>() / len as f64))
            .collect();
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::MeanLength(input), rg))
    }

    /// Scales each row of `[n, d]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let (_, d) = dims2(self.shape(input), "l2_normalize")?;
        let x = self.value(input).data();
        let mut norms = Vec::with_capacity(x.len() / d.max(1));
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric(format!("l2_normalize: row norm {norm:e} below 1e-12")));
            }
            let nt = T::from_f64(norm);
            norms.push(nt);
            out.extend(row.iter().map(|&v| T::from_f64(v.as_f64() / norm)));
        }
        let rg = self.rg(input);
        let shape = self.shape(input).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::L2Normalize { input, norms }, rg))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, da) = dims2(self.shape(a), "concat_rows")?;
        let (rb, db) = dims2(self.shape(b), "concat_rows")?;
        if da != db {
            return Err(Error::shape(format!("concat_rows: widths {da} and {db}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[ra + rb, da], data)?, Op::ConcatRows(a, b), rg))
    }

    /// `a · bᵀ` for `a` `[m, k]`, `b` `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul_t")?;
        let (n, kb) = dims2(self.shape(b), "matmul_t")?;
        if k != kb {
            return Err(Error::shape(format!("matmul_t: inner sizes {k} and {kb}")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul(self.value(a).data(), false, self.value(b).data(), true, m, k, n, &mut out, T::zero());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulT(a, b), rg))
    }

    /// Row-wise inner products of two `[m, d]` tensors -> `[m]`.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot_rows")?;
        let (m, d) = dims2(self.shape(a), "dot_rows")?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let out = (0..m)
            .map(|i| {
                let s: f64 = va[i * d..(i + 1) * d]
                    .iter()
                    .zip(&vb[i * d..(i + 1) * d])
                    .map(|(x, y)| x.as_f64() * y.as_f64())
                    .sum();
                T::from_f64(s)
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m], out)?, Op::DotRows(a, b), rg))
    }

    /// Full inner product of two same-shaped tensors -> scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x.as_f64() * y.as_f64())
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::Dot(a, b), rg))
    }

    /// Per-row `log Σ exp` over the columns selected by `mask` (all columns
    /// when `None`). A 1-d input is treated as one row and yields a scalar.
    pub fn logsumexp_rows(&mut self, input: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (m, n, out_shape) = match *shape.as_slice() {
            [n] => (1, n, vec![]),
            [m, n] => (m, n, vec![m]),
            _ => return Err(Error::shape(format!("logsumexp: shape {shape:?}"))),
        };
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                return Err(Error::shape("logsumexp: mask size".to_string()));
            }
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let included = |j: usize| mask.as_ref().is_none_or(|mk| mk[i * n + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if included(j) {
                    max = max.max(v.as_f64());
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Numeric(format!("logsumexp: row {i} has no included entries")));
            }
            let s: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| included(j))
                .map(|(_, v)| (v.as_f64() - max).exp())
                .sum();
            out.push(T::from_f64(max + s.ln()));
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::LogSumExpRows { input, mask }, rg))
    }

    /// `Σ coeffs[i] · input[i]` -> scalar.
    pub fn weighted_sum(&mut self, input: Var, coeffs: Vec<T>) -> Result<Var> {
        if coeffs.len() != self.value(input).len() {
            return Err(Error::shape("weighted_sum: coefficient count".to_string()));
        }
        let s: f64 = self
            .value(input)
            .data()
            .iter()
            .zip(&coeffs)
            .map(|(x, c)| x.as_f64() * c.as_f64())
            .sum();
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::WeightedSum { input, coeffs }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let n = self.value(input).len();
        self.weighted_sum(input, vec![T::one(); n]).expect("sizes match")
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).len();
        self.weighted_sum(input, vec![T::from_f64(1.0 / n as f64); n])
            .expect("sizes match")
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.map(|data| Tensor::new(self.nodes[i].value.shape(), data).expect("grad shape"))
                })
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => add_into(existing, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.iter().map(|&v| v * *f).collect()),
            Op::MulConst { input, factor } => {
                self.accumulate(grads, *input, g.iter().zip(factor).map(|(&d, &f)| d * f).collect())
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                );
            }
            Op::Conv1d { input, kernel, dilation } => {
                let (n, c_in, len) = dims3(self.shape(*input), "conv1d")?;
                let (c_out, _, k) = dims3(self.shape(*kernel), "conv1d")?;
                let cols = n * len;
                // dy as [c_out, n*len]
                let mut dy = vec![T::zero(); c_out * cols];
                for o in 0..c_out {
                    for s in 0..n {
                        dy[o * cols + s * len..o * cols + (s + 1) * len]
                            .copy_from_slice(&g[(s * c_out + o) * len..(s * c_out + o + 1) * len]);
                    }
                }
                let col = im2col(self.value(*input).data(), n, c_in, len, k, *dilation);
                if self.rg(*kernel) {
                    let mut dw = vec![T::zero(); c_out * c_in * k];
                    matmul(&dy, false, &col, true, c_out, cols, c_in * k, &mut dw, T::zero());
                    self.accumulate(grads, *kernel, dw);
                }
                if self.rg(*input) {
                    let mut dcol = col;
                    matmul(self.value(*kernel).data(), true, &dy, false, c_in * k, c_out, cols, &mut dcol, T::zero());
                    let mut dx = vec![T::zero(); n * c_in * len];
                    col2im(&dcol, &mut dx, n, c_in, len, k, *dilation);
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (&d, &src) in g.iter().zip(argmax) {
                    dx[src as usize] = dx[src as usize] + d;
                }
                self.accumulate(grads, *input, dx);
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let (n, c, len) = dims3(self.shape(*input), "batchnorm")?;
                let gv = self.value(*gamma).data();
                let count = (n * len) as f64;
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * len;
                        for i in base..base + len {
                            sum_dy[ch] += g[i].as_f64();
                            sum_dy_xhat[ch] += g[i].as_f64() * xhat[i].as_f64();
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * len;
                            let scale = gv[ch].as_f64() * inv_std[ch].as_f64();
                            for i in base..base + len {
                                let v = if *train {
                                    scale
                                        * (g[i].as_f64()
                                            - sum_dy[ch] / count
                                            - xhat[i].as_f64() * sum_dy_xhat[ch] / count)
                                } else {
                                    scale * g[i].as_f64()
                                };
                                dx[i] = T::from_f64(v);
                            }
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *gamma, sum_dy_xhat.iter().map(|&v| T::from_f64(v)).collect());
                self.accumulate(grads, *beta, sum_dy.iter().map(|&v| T::from_f64(v)).collect());
            }
            Op::Linear { input, weight, bias } => {
                let (n, d_in) = dims2(self.shape(*input), "linear")?;
                let (d_out, _) = dims2(self.shape(*weight), "linear")?;
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); n * d_in];
                    matmul(g, false, self.value(*weight).data(), false, n, d_out, d_in, &mut dx, T::zero());
                    self.accumulate(grads, *input, dx);
                }
                if self.rg(*weight) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    matmul(g, true, self.value(*input).data(), false, d_out, n, d_in, &mut dw, T::zero());
                    self.accumulate(grads, *weight, dw);
                }
                if let Some(b) = bias {
                    let mut db = vec![0.0f64; d_out];
                    for row in g.chunks(d_out) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v.as_f64();
                        }
                    }
                    self.accumulate(grads, *b, db.into_iter().map(T::from_f64).collect());
                }
            }
            Op::MeanLength(input) => {
                let len = self.shape(*input)[2];
                let inv = T::from_f64(1.0 / len as f64);
                let mut dx = Vec::with_capacity(g.len() * len);
                for &d in g {
                    dx.extend(std::iter::repeat_n(d * inv, len));
                }
                self.accumulate(grads, *input, dx);
            }
            Op::L2Normalize { input, norms } => {
                let d = self.shape(*input)[1];
                let y = node.value.data();
                let mut dx = Vec::with_capacity(g.len());
                for (i, &norm) in norms.iter().enumerate() {
                    let gy = &g[i * d..(i + 1) * d];
                    let yy = &y[i * d..(i + 1) * d];
                    let proj: f64 = gy.iter().zip(yy).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    let inv = 1.0 / norm.as_f64();
                    dx.extend(
                        gy.iter()
                            .zip(yy)
                            .map(|(a, b)| T::from_f64((a.as_f64() - b.as_f64() * proj) * inv)),
                    );
                }
                self.accumulate(grads, *input, dx);
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                self.accumulate(grads, *a, g[..split].to_vec());
                self.accumulate(grads, *b, g[split..].to_vec());
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims2(self.shape(*a), "matmul_t")?;
                let (n, _) = dims2(self.shape(*b), "matmul_t")?;
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul(g, false, self.value(*b).data(), false, m, n, k, &mut da, T::zero());
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); n * k];
                    matmul(g, true, self.value(*a).data(), false, n, m, k, &mut db, T::zero());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::DotRows(a, b) => {
                let d = self.shape(*a)[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let da = vb.iter().enumerate().map(|(j, &y)| g[j / d] * y).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = va.iter().enumerate().map(|(j, &x)| g[j / d] * x).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Dot(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, vb.iter().map(|&y| g[0] * y).collect());
                self.accumulate(grads, *b, va.iter().map(|&x| g[0] * x).collect());
            }
            Op::LogSumExpRows { input, mask } => {
                let x = self.value(*input).data();
                let n = *self.shape(*input).last().expect("non-empty shape");
                let out = node.value.data();
                let dx = x
                    .iter()
                    .enumerate()
                    .map(|(idx, &v)| {
                        let i = idx / n;
                        if mask.as_ref().is_none_or(|mk| mk[idx]) {
                            T::from_f64(g[i].as_f64() * (v.as_f64() - out[i].as_f64()).exp())
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *input, dx);
            }
            Op::WeightedSum { input, coeffs } => {
                self.accumulate(grads, *input, coeffs.iter().map(|&c| c * g[0]).collect());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 1, 4], &[1.0, -2.0, 3.0, 0.5]));
        let k = g.param(t(&[1, 1, 1], &[1.0]));
        let y = g.conv1d(x, k, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn conv_hand_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 1, 4], &[1.0; 4]));
        let k = g.param(t(&[1, 1, 3], &[1.0; 3]));
        let y = g.conv1d(x, k, 1).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0, 3.0, 2.0]);

        let x = g.input(t(&[1, 1, 5], &[1.0, 0.0, 0.0, 0.0, 1.0]));
        let y = g.conv1d(x, k, 2).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 2, 4]));
        let k = g.param(Tensor::zeros(&[1, 3, 3]));
        assert!(g.conv1d(x, k, 1).is_err());
        let k2 = g.param(Tensor::zeros(&[1, 2, 2]));
        assert!(g.conv1d(x, k2, 1).is_err());
    }

    #[test]
    fn maxpool_values_and_ties() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 1, 4], &[1.0, 3.0, 2.0, 5.0]));
        let y = g.maxpool1d(x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);

        let c = g.param(t(&[1, 1, 4], &[7.0; 4]));
        let y = g.maxpool1d(c).unwrap();
        assert_eq!(g.value(y).data(), &[7.0, 7.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(c).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);

        let short = g.input(t(&[1, 1, 1], &[1.0]));
        assert!(g.maxpool1d(short).is_err());
    }

    #[test]
    fn batchnorm_eval_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 1, 3], &[1.0, -2.0, 0.5, 4.0, 0.0, -1.0]));
        let gamma = g.param(t(&[1], &[1.0]));
        let beta = g.param(t(&[1], &[0.0]));
        let y = g.batchnorm_eval(x, gamma, beta, &[0.0], &[1.0], 1e-12).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_train_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..2 * 3 * 7).map(|_| rng.gen::<f64>() * 4.0 - 1.0).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 3, 7], &data));
        let gamma = g.param(t(&[3], &[1.0; 3]));
        let beta = g.param(t(&[3], &[0.0; 3]));
        let (y, stats) = g.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(stats.count, 14);
        let y = g.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|s| y[(s * 3 + ch) * 7..(s * 3 + ch + 1) * 7].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 14.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 14.0;
            assert!(mean.abs() < 1e-5);
            // eps shrinks the variance slightly below one
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn batchnorm_single_value_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 1, 1], &[1.0]));
        let gamma = g.param(t(&[1], &[1.0]));
        let beta = g.param(t(&[1], &[0.0]));
        assert!(g.batchnorm_train(x, gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[100_000], 1.0));
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.7, false, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        let survivors = g.value(y).data().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / 100_000.0;
        assert!((0.49..=0.51).contains(&frac), "{frac}");
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn normalize_and_logsumexp() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 2], &[3.0, 4.0]));
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);

        let z = g.input(t(&[1, 2], &[0.0, 1e-13]));
        assert!(g.l2_normalize(z).is_err());

        let v = g.input(t(&[2], &[0.0, 0.0]));
        let l = g.logsumexp_rows(v, None).unwrap();
        assert!((g.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(g.shape(l).is_empty());

        let big = g.input(t(&[2], &[1000.0, 1000.0]));
        let l = g.logsumexp_rows(big, None).unwrap();
        assert!((g.value(l).item().unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);

        let masked = g.input(t(&[1, 3], &[5.0, 0.0, 0.0]));
        let l = g.logsumexp_rows(masked, Some(vec![false, true, true])).unwrap();
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
        assert!(g.logsumexp_rows(masked, Some(vec![false; 3])).is_err());
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 3], &[1.0, -1.0, 2.0, 0.0, 5.0, 3.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn dead_relu_has_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[0.5, 1.0, 2.0]));
        let nx = g.scale(x, -1.0);
        let r = g.relu(nx);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = sum(x * x) + sum(x) -> 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let a = g.sum(sq);
        let b = g.sum(x);
        let f = g.add(a, b).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let w = g.param(t(&[2], &[3.0, 4.0]));
        let d = g.dot(x, w).unwrap();
        let grads = g.backward(d).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }
}

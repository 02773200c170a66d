//! Dense numeric kernels: row-major matrices, linear and batch-norm layers,
//! ReLU/sigmoid activations and the binary cross-entropy loss, each with a
//! hand-derived backward pass.
//!
//! Everything is generic over the float type through [`Real`] so the same
//! code runs in `f32` for training/inference and in `f64` for finite
//! difference gradient checks. Layers cache what their backward pass needs
//! during a training-mode forward; calling `backward` without such a cache
//! is a state error. Backward passes *accumulate* into parameter gradients,
//! so callers zero gradients between optimisation steps.

use crate::error::{Result, SpellError};
use num_traits::Float;
use rand::Rng;

/// Float scalar the pipeline is generic over. Implemented for `f32` and
/// `f64`; conversions go through `f64` which is exact for every value we
/// construct from literals and RNG draws.
pub trait Real:
    Float + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Builds a matrix from `rows * cols` values in row-major order.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    /// Convenience constructor for tests and examples.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Matrix<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(SpellError::shapes("add_assign", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x = *x * s);
    }

    /// Maximum absolute element-wise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |m, d| if d > m { d } else { m })
    }

    /// Cast element-wise through `f64`; used to move weights between the
    /// `f32` production path and `f64` gradient checks.
    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// Copy of rows `r0..r1`.
    pub fn rows_range(&self, r0: usize, r1: usize) -> Matrix<T> {
        assert!(r0 <= r1 && r1 <= self.rows);
        Matrix {
            rows: r1 - r0,
            cols: self.cols,
            data: self.data[r0 * self.cols..r1 * self.cols].to_vec(),
        }
    }

    /// `self.rows_range(r0, r0 + other.rows) += other`; used to accumulate
    /// a gradient block into a row slice of a larger parameter.
    pub fn add_into_rows(&mut self, r0: usize, other: &Matrix<T>) {
        assert!(other.cols == self.cols && r0 + other.rows <= self.rows);
        let base = r0 * self.cols;
        for (dst, &src) in self.data[base..base + other.data.len()]
            .iter_mut()
            .zip(&other.data)
        {
            *dst = *dst + src;
        }
    }

    /// Copy of columns `c0..c1`.
    pub fn cols_range(&self, c0: usize, c1: usize) -> Matrix<T> {
        assert!(c0 <= c1 && c1 <= self.cols);
        let mut out = Matrix::zeros(self.rows, c1 - c0);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[c0..c1]);
        }
        out
    }

    /// Row-wise concatenation: all inputs share a row count, outputs have
    /// the summed column count.
    pub fn concat_cols(parts: &[&Matrix<T>]) -> Matrix<T> {
        assert!(!parts.is_empty());
        let rows = parts[0].rows;
        assert!(parts.iter().all(|p| p.rows == rows), "row count mismatch in concat");
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut at = 0;
            for p in parts {
                dst[at..at + p.cols].copy_from_slice(p.row(r));
                at += p.cols;
            }
        }
        out
    }

    /// Column-wise concatenation: all inputs share a column count, outputs
    /// have the summed row count (rows of each part in order).
    pub fn concat_rows(parts: &[&Matrix<T>]) -> Matrix<T> {
        assert!(!parts.is_empty());
        let cols = parts[0].cols;
        assert!(parts.iter().all(|p| p.cols == cols), "column count mismatch in concat");
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            out.data_mut()[at..at + p.data().len()].copy_from_slice(p.data());
            at += p.data().len();
        }
        out
    }

    /// Element-wise sum of two equally-shaped matrices.
    pub fn add(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
        if a.shape() != b.shape() {
            return Err(SpellError::shapes("add", a.shape(), b.shape()));
        }
        let mut out = a.clone();
        out.add_assign(b)?;
        Ok(out)
    }
}

impl<T: Real> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T: Real> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// `a @ b` for `a: n x k`, `b: k x m`. Accumulates along `k` in ascending
/// order (i-k-j loop) so the inner loop runs over contiguous rows.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(SpellError::shapes("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let b_row = b.row(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a^T @ b` for `a: n x k`, `b: n x m`, yielding `k x m`. Used for weight
/// gradients (`dW = x^T @ grad`) without materialising a transpose.
pub fn matmul_at_b<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(SpellError::shapes("matmul_at_b", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let out_row = out.row_mut(k);
            for (o, &bij) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bij;
            }
        }
    }
    Ok(out)
}

/// `a @ b^T` for `a: n x m`, `b: k x m`, yielding `n x k`. Used for input
/// gradients (`dx = grad @ W^T`); the inner product runs over two
/// contiguous rows.
pub fn matmul_a_bt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(SpellError::shapes("matmul_a_bt", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            *o = acc;
        }
    }
    Ok(out)
}

/// Trainable tensor: value plus an accumulated gradient of the same shape.
#[derive(Clone, Debug)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
}

impl<T: Real> ParamTensor<T> {
    pub fn new(name: impl Into<String>, value: Matrix<T>) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        ParamTensor {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Whether a forward pass should cache intermediates and update batch-norm
/// running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation, drawn in `f64`
/// so an `f32` and an `f64` layer built from the same seed agree.
pub fn init_uniform<T: Real>(
    name: &str,
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut impl Rng,
) -> ParamTensor<T> {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<T> = (0..rows * cols)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    ParamTensor::new(name, Matrix::from_vec(rows, cols, data))
}

/// `y = x @ W + b` for `x: n x d_in`, `w: d_in x d_out`, `b: 1 x d_out`.
pub fn linear_forward<T: Real>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    b: &Matrix<T>,
) -> Result<Matrix<T>> {
    if x.cols() != w.rows() {
        return Err(SpellError::shapes("linear_forward", x.shape(), w.shape()));
    }
    let mut out = matmul(x, w)?;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for (o, &bj) in row.iter_mut().zip(b.row(0)) {
            *o = *o + bj;
        }
    }
    Ok(out)
}

/// Gradients of a linear layer given the upstream gradient and the cached
/// input: returns `(dx, dw, db)` where `dx = g @ W^T`, `dw = x^T @ g`,
/// `db = column sums of g`.
pub fn linear_grads<T: Real>(
    grad_out: &Matrix<T>,
    x: &Matrix<T>,
    w: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let dx = matmul_a_bt(grad_out, w)?;
    let dw = matmul_at_b(x, grad_out)?;
    let mut db = Matrix::zeros(1, grad_out.cols());
    for r in 0..grad_out.rows() {
        let g_row = grad_out.row(r);
        for (acc, &g) in db.row_mut(0).iter_mut().zip(g_row) {
            *acc = *acc + g;
        }
    }
    Ok((dx, dw, db))
}

/// Fully connected layer with cached-input backward.
#[derive(Clone, Debug)]
pub struct LinearLayer<T> {
    pub w: ParamTensor<T>,
    pub b: ParamTensor<T>,
    cache: Option<Matrix<T>>,
}

impl<T: Real> LinearLayer<T> {
    /// `name` prefixes the weight/bias tensor names (`{name}.weight`,
    /// `{name}.bias`).
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let w = init_uniform(&format!("{name}.weight"), d_in, d_out, d_in, rng);
        let b = ParamTensor::new(format!("{name}.bias"), Matrix::zeros(1, d_out));
        LinearLayer { w, b, cache: None }
    }

    /// Zero-valued layer with explicit tensor names; a casting/loading
    /// target whose values are overwritten by the caller.
    pub fn new_zeroed(d_in: usize, d_out: usize, w_name: &str, b_name: &str) -> Self {
        LinearLayer {
            w: ParamTensor::new(w_name, Matrix::zeros(d_in, d_out)),
            b: ParamTensor::new(b_name, Matrix::zeros(1, d_out)),
            cache: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.value.cols()
    }

    /// Inference forward; caches nothing.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        linear_forward(x, &self.w.value, &self.b.value)
    }

    /// Training forward; takes the input by value and keeps it for
    /// `backward`. A second training forward replaces the cache.
    pub fn forward_train(&mut self, x: Matrix<T>) -> Result<Matrix<T>> {
        let out = linear_forward(&x, &self.w.value, &self.b.value)?;
        self.cache = Some(x);
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    /// The cache is retained, so repeated calls with the same upstream
    /// gradient double the accumulated parameter gradients.
    pub fn backward(&mut self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        let x = self.cache.as_ref().ok_or_else(|| SpellError::NoCachedForward {
            layer: self.w.name.clone(),
        })?;
        let (dx, dw, db) = linear_grads(grad_out, x, &self.w.value)?;
        self.w.grad.add_assign(&dw)?;
        self.b.grad.add_assign(&db)?;
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Element-wise `max(0, x)`.
pub fn relu<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// ReLU backward against the cached *input*: passes the gradient where
/// `x > 0`, zero elsewhere (including exactly at 0).
pub fn relu_backward<T: Real>(grad_out: &Matrix<T>, x: &Matrix<T>) -> Matrix<T> {
    assert_eq!(grad_out.shape(), x.shape());
    let mut out = grad_out.clone();
    for (g, &xi) in out.data_mut().iter_mut().zip(x.data()) {
        if xi <= T::zero() {
            *g = T::zero();
        }
    }
    out
}

/// Numerically stable logistic function: the exponential argument is never
/// positive, so large `|x|` saturates to 0/1 instead of overflowing.
#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        let e = (-x).exp();
        T::one() / (T::one() + e)
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_slice<T: Real>(xs: &[T]) -> Vec<T> {
    xs.iter().map(|&x| sigmoid_scalar(x)).collect()
}

/// Cache for the batch-norm backward pass. Owned by the caller when a
/// single [`BatchNorm`] is applied to several inputs per step (the
/// weight-shared layer runs once per stream, so each stream keeps its own
/// cache).
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    /// Normalised input, `(x - mean) / sqrt(var + eps)`.
    x_hat: Matrix<T>,
    /// Per-feature `1 / sqrt(var + eps)`.
    inv_std: Vec<T>,
}

/// Batch normalisation over rows with learnable per-feature scale/shift.
///
/// Train mode normalises by biased batch statistics, caches what the
/// backward pass needs and folds the batch statistics into running
/// estimates (`running = (1 - momentum) * running + momentum * batch`).
/// Eval mode normalises by the running estimates and is a pure function of
/// its input, so inference does not depend on how nodes are grouped into
/// batches.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: ParamTensor<T>,
    pub beta: ParamTensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    cache: Option<BnCache<T>>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Real> BatchNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        let mut gamma = Matrix::zeros(1, dim);
        gamma.fill(T::one());
        BatchNorm {
            gamma: ParamTensor::new(format!("{name}.gamma"), gamma),
            beta: ParamTensor::new(format!("{name}.beta"), Matrix::zeros(1, dim)),
            running_mean: vec![T::zero(); dim],
            running_var: vec![T::one(); dim],
            momentum: T::from_f64(BN_MOMENTUM),
            eps: T::from_f64(BN_EPS),
            cache: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.value.cols()
    }

    pub fn forward(&mut self, x: &Matrix<T>, mode: Mode) -> Result<Matrix<T>> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => {
                let (out, cache) = self.forward_train_ext(x)?;
                self.cache = Some(cache);
                Ok(out)
            }
        }
    }

    /// Train-mode forward that hands the backward cache to the caller
    /// instead of storing it, so one layer can serve several passes per
    /// step. Running statistics are still updated.
    pub fn forward_train_ext(&mut self, x: &Matrix<T>) -> Result<(Matrix<T>, BnCache<T>)> {
        if x.cols() != self.dim() {
            return Err(SpellError::shapes("batch_norm", x.shape(), (1, self.dim())));
        }
        let n = x.rows();
        if n < 2 {
            return Err(SpellError::DegenerateBatch { rows: n });
        }
        let d = self.dim();
        let n_t = T::from_f64(n as f64);

        let mut mean = vec![T::zero(); d];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n_t);

        // Biased variance (divide by N), matching what inference running
        // statistics estimate.
        let mut var = vec![T::zero(); d];
        for r in 0..n {
            for ((v, &xi), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                let c = xi - m;
                *v = *v + c * c;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / n_t);

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();

        let mut x_hat = Matrix::zeros(n, d);
        for r in 0..n {
            let xr = x.row(r);
            let hr = x_hat.row_mut(r);
            for j in 0..d {
                hr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
        }

        let mut out = Matrix::zeros(n, d);
        let g = self.gamma.value.row(0);
        let b = self.beta.value.row(0);
        for r in 0..n {
            let hr = x_hat.row(r);
            let or = out.row_mut(r);
            for j in 0..d {
                or[j] = g[j] * hr[j] + b[j];
            }
        }

        let m = self.momentum;
        let one_m = T::one() - m;
        for j in 0..d {
            self.running_mean[j] = one_m * self.running_mean[j] + m * mean[j];
            self.running_var[j] = one_m * self.running_var[j] + m * var[j];
        }

        Ok((out, BnCache { x_hat, inv_std }))
    }

    /// Eval-mode forward through `&self`; usable concurrently.
    pub fn forward_eval(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.dim() {
            return Err(SpellError::shapes("batch_norm", x.shape(), (1, self.dim())));
        }
        let d = self.dim();
        let inv_std: Vec<T> = self
            .running_var
            .iter()
            .map(|&v| T::one() / (v + self.eps).sqrt())
            .collect();
        let g = self.gamma.value.row(0);
        let b = self.beta.value.row(0);
        let mut out = Matrix::zeros(x.rows(), d);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let or = out.row_mut(r);
            for j in 0..d {
                or[j] = g[j] * (xr[j] - self.running_mean[j]) * inv_std[j] + b[j];
            }
        }
        Ok(out)
    }

    /// Full backward through the batch statistics:
    ///
    /// with `g = grad_out`, `dxh = g * gamma` and per-feature sums over the
    /// batch,
    ///
    /// `dx = inv_std / N * (N * dxh - sum(dxh) - x_hat * sum(dxh * x_hat))`
    ///
    /// which folds the mean- and variance-path terms into one expression.
    /// Accumulates `dgamma = sum(g * x_hat)` and `dbeta = sum(g)`.
    pub fn backward(&mut self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        let cache = self.cache.take().ok_or_else(|| SpellError::NoCachedForward {
            layer: self.gamma.name.clone(),
        })?;
        let dx = self.backward_ext(grad_out, &cache);
        self.cache = Some(cache);
        dx
    }

    /// Backward against a caller-held cache from [`forward_train_ext`].
    ///
    /// [`forward_train_ext`]: BatchNorm::forward_train_ext
    pub fn backward_ext(&mut self, grad_out: &Matrix<T>, cache: &BnCache<T>) -> Result<Matrix<T>> {
        let (n, d) = cache.x_hat.shape();
        if grad_out.shape() != (n, d) {
            return Err(SpellError::shapes("batch_norm backward", grad_out.shape(), (n, d)));
        }
        let n_t = T::from_f64(n as f64);
        let gamma = self.gamma.value.row(0).to_vec();

        let mut sum_dxh = vec![T::zero(); d];
        let mut sum_dxh_xh = vec![T::zero(); d];
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        for r in 0..n {
            let gr = grad_out.row(r);
            let hr = cache.x_hat.row(r);
            for j in 0..d {
                let dxh = gr[j] * gamma[j];
                sum_dxh[j] = sum_dxh[j] + dxh;
                sum_dxh_xh[j] = sum_dxh_xh[j] + dxh * hr[j];
                dgamma[j] = dgamma[j] + gr[j] * hr[j];
                dbeta[j] = dbeta[j] + gr[j];
            }
        }

        let mut dx = Matrix::zeros(n, d);
        for r in 0..n {
            let gr = grad_out.row(r);
            let hr = cache.x_hat.row(r);
            let dr = dx.row_mut(r);
            for j in 0..d {
                let dxh = gr[j] * gamma[j];
                dr[j] = cache.inv_std[j] / n_t
                    * (n_t * dxh - sum_dxh[j] - hr[j] * sum_dxh_xh[j]);
            }
        }

        for j in 0..d {
            self.gamma.grad.row_mut(0)[j] = self.gamma.grad.row(0)[j] + dgamma[j];
            self.beta.grad.row_mut(0)[j] = self.beta.grad.row(0)[j] + dbeta[j];
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the
/// logs so the loss stays finite at saturation.
pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy over a batch of probabilities.
///
/// Returns `(loss, grad_p)` where `grad_p[i] = d loss / d p[i]`. Inside
/// the clamp range the gradient is `(p - y) / (p (1 - p) N)`; where the
/// clamp is active the loss is locally constant in `p`, so the gradient is
/// zero. Labels outside `{0, 1}` are rejected.
pub fn bce_loss<T: Real>(p: &[T], labels: &[u8]) -> Result<(T, Vec<T>)> {
    if p.len() != labels.len() {
        return Err(SpellError::validation(format!(
            "bce_loss: {} probabilities vs {} labels",
            p.len(),
            labels.len()
        )));
    }
    if p.is_empty() {
        return Err(SpellError::validation("bce_loss: empty batch".to_string()));
    }
    for (i, &y) in labels.iter().enumerate() {
        if y > 1 {
            return Err(SpellError::InvalidLabel { index: i, value: y });
        }
    }
    let lo = T::from_f64(BCE_CLAMP);
    let hi = T::one() - lo;
    let n = T::from_f64(p.len() as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); p.len()];
    for i in 0..p.len() {
        let pc = p[i].max(lo).min(hi);
        let y = T::from_f64(labels[i] as f64);
        total = total - (y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
        if p[i] > lo && p[i] < hi {
            grad[i] = (pc - y) / (pc * (T::one() - pc) * n);
        }
    }
    Ok((total / n, grad))
}

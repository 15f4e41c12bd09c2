//! Frequency-domain graph convolution.
//!
//! Node features are transformed along the node axis with an unnormalized
//! forward DFT (the inverse carries the `1/n`). A Fourier graph operator holds
//! one complex `d x d` matrix per frequency; applying it is a per-frequency
//! vector-matrix product, which is the frequency-domain image of `L X W` when
//! `L` is circulant.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use num_complex::Complex64;
use rand::Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residue above which the strict inverse refuses to drop the imaginary part.
pub const IMAG_RESIDUE_LIMIT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FgoMode {
    /// `S[f] = lambda(f) W` from the circulant projection of the filter.
    Circulant,
    /// Circulant term plus a learned per-frequency correction.
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }

    /// Applied to real and imaginary parts independently.
    pub fn apply_complex(self, z: Complex64) -> Complex64 {
        Complex64::new(self.apply(z.re), self.apply(z.im))
    }

    /// Backward of [`Activation::apply_complex`] for an upstream gradient `g`.
    pub fn backward_complex(self, z: Complex64, g: Complex64) -> Complex64 {
        Complex64::new(self.derivative(z.re) * g.re, self.derivative(z.im) * g.im)
    }
}

// ---------------------------------------------------------------------------
// Node-axis DFT

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// In-place unnormalized transform of every column.
fn transform_columns(data: &mut Array2<Complex64>, inverse: bool) {
    let n = data.nrows();
    if n == 0 {
        return;
    }
    let fft = plan(n, inverse);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for mut col in data.columns_mut() {
        for (b, v) in buf.iter_mut().zip(col.iter()) {
            *b = *v;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (v, b) in col.iter_mut().zip(&buf) {
            *v = *b;
        }
    }
}

/// Complex node spectrum `[n_nodes x d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyFeatures {
    pub data: Array2<Complex64>,
}

impl FrequencyFeatures {
    pub fn n_nodes(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Largest `|Y[f] - conj(Y[(n - f) mod n])|`.
    pub fn conjugate_asymmetry(&self) -> f64 {
        let n = self.n_nodes();
        let mut worst: f64 = 0.0;
        for f in 0..n {
            let g = (n - f) % n;
            for j in 0..self.dim() {
                worst = worst.max((self.data[[f, j]] - self.data[[g, j]].conj()).norm());
            }
        }
        worst
    }
}

/// `Y[f, j] = sum_s X[s, j] exp(-2 pi i f s / n)`.
pub fn dft_nodes(x: ArrayView2<f64>) -> FrequencyFeatures {
    let mut data = x.mapv(|v| Complex64::new(v, 0.0));
    transform_columns(&mut data, false);
    FrequencyFeatures { data }
}

/// Unnormalized forward DFT of complex columns.
pub fn dft_nodes_complex(x: ArrayView2<Complex64>) -> Array2<Complex64> {
    let mut data = x.to_owned();
    transform_columns(&mut data, false);
    data
}

/// `1/n`-scaled inverse DFT of complex columns.
pub fn idft_nodes_complex(y: ArrayView2<Complex64>) -> Array2<Complex64> {
    let mut data = y.to_owned();
    transform_columns(&mut data, true);
    let scale = 1.0 / data.nrows().max(1) as f64;
    data.mapv_inplace(|z| z * scale);
    data
}

/// Inverse transform projected onto the reals, with the largest discarded
/// imaginary magnitude.
pub fn idft_real_part(y: &FrequencyFeatures) -> (Array2<f64>, f64) {
    let z = idft_nodes_complex(y.data.view());
    let residue = z.iter().fold(0.0f64, |m, v| m.max(v.im.abs()));
    (z.mapv(|v| v.re), residue)
}

/// Strict inverse: fails if the input was not conjugate-symmetric enough to
/// produce a real signal.
pub fn idft_nodes(y: &FrequencyFeatures) -> Result<Array2<f64>> {
    let (x, residue) = idft_real_part(y);
    if residue > IMAG_RESIDUE_LIMIT {
        return Err(Error::Numerical(format!(
            "inverse DFT has imaginary residue {residue:.3e}; input spectrum is not conjugate-symmetric"
        )));
    }
    if residue > 1e-9 {
        log::debug!("discarding imaginary residue {residue:.3e}");
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Circulant projection and kernel spectrum

/// Average of each wrapped diagonal: `c[s] = (1/n) sum_i L[(i + s) mod n, i]`.
/// This is the first column when `L` is circulant, and equals the row-wise
/// average for symmetric `L`.
pub fn circulant_projection(l: ArrayView2<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut c = Array1::zeros(n);
    for i in 0..n {
        for (j, v) in l.row(i).iter().enumerate() {
            c[(i + n - j) % n] += v;
        }
    }
    c / n as f64
}

/// Adjoint of [`circulant_projection`].
pub fn circulant_projection_grad(grad_kernel: ArrayView1<f64>) -> Array2<f64> {
    let n = grad_kernel.len();
    Array2::from_shape_fn((n, n), |(i, j)| grad_kernel[(i + n - j) % n] / n as f64)
}

/// Circulant matrix generated by kernel `c`: `L[i, j] = c[(i - j) mod n]`,
/// so that `L x` is the cyclic convolution `c * x`.
pub fn circulant_from_kernel(c: ArrayView1<f64>) -> Array2<f64> {
    let n = c.len();
    Array2::from_shape_fn((n, n), |(i, j)| c[(i + n - j) % n])
}

/// Per-frequency eigenvalue `lambda(f) = sum_s c[s] exp(-2 pi i f s / n)`.
pub fn kernel_spectrum(c: ArrayView1<f64>) -> Array1<Complex64> {
    let col = c.insert_axis(Axis(1));
    dft_nodes(col).data.column(0).to_owned()
}

/// Gradient on the real kernel row given the gradient on its spectrum.
pub fn kernel_spectrum_grad(grad_lambda: ArrayView1<Complex64>) -> Array1<f64> {
    let n = grad_lambda.len();
    let col = grad_lambda.insert_axis(Axis(1));
    // Re(sum_f exp(+2 pi i f s / n) g[f]) = Re(n * IDFT(g))
    idft_nodes_complex(col)
        .column(0)
        .mapv(|z| z.re * n as f64)
}

// ---------------------------------------------------------------------------
// Fourier graph operators

#[derive(Debug, Clone, PartialEq)]
pub struct FourierGraphOperator {
    pub band: Band,
    pub mode: FgoMode,
    /// `[n_freq x d x d]`
    pub ops: Array3<Complex64>,
    /// `[d]`, added at every frequency after the product.
    pub bias: Array1<Complex64>,
}

impl FourierGraphOperator {
    pub fn n_freq(&self) -> usize {
        self.ops.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.ops.shape()[1]
    }

    pub fn identity(n_freq: usize, d: usize, band: Band) -> Self {
        let mut ops = Array3::zeros((n_freq, d, d));
        for f in 0..n_freq {
            for k in 0..d {
                ops[[f, k, k]] = Complex64::new(1.0, 0.0);
            }
        }
        FourierGraphOperator {
            band,
            mode: FgoMode::Circulant,
            ops,
            bias: Array1::zeros(d),
        }
    }

    /// Circulant term plus `scale`-sized random complex perturbations.
    pub fn free_spectral<R: Rng + ?Sized>(
        l: ArrayView2<f64>,
        w: ArrayView2<f64>,
        band: Band,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut op = build_fgo(l, w, band)?;
        op.mode = FgoMode::Free;
        for v in op.ops.iter_mut() {
            *v += Complex64::new(rng.random_range(-scale..=scale), rng.random_range(-scale..=scale));
        }
        Ok(op)
    }

    pub fn is_finite(&self) -> bool {
        self.ops.iter().chain(self.bias.iter()).all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Circulant-exact operator: `S[f] = lambda(f) W` with `lambda` the spectrum
/// of the circulant projection of `l`.
pub fn build_fgo(l: ArrayView2<f64>, w: ArrayView2<f64>, band: Band) -> Result<FourierGraphOperator> {
    let n = l.nrows();
    if n == 0 || l.ncols() != n {
        return Err(Error::invalid_input("filter matrix must be square and non-empty"));
    }
    let d = w.nrows();
    if w.ncols() != d {
        return Err(Error::invalid_input("weight matrix must be square"));
    }
    let lambda = kernel_spectrum(circulant_projection(l).view());
    Ok(operator_from_spectrum(lambda.view(), w, band))
}

pub fn operator_from_spectrum(lambda: ArrayView1<Complex64>, w: ArrayView2<f64>, band: Band) -> FourierGraphOperator {
    let n = lambda.len();
    let d = w.nrows();
    let ops = Array3::from_shape_fn((n, d, d), |(f, j, k)| lambda[f] * w[[j, k]]);
    FourierGraphOperator {
        band,
        mode: FgoMode::Circulant,
        ops,
        bias: Array1::zeros(d),
    }
}

/// Row-vector times matrix at every frequency: `Z[f, :] = Y[f, :] S[f]`.
fn apply_ops(y: ArrayView2<Complex64>, ops: &Array3<Complex64>) -> Array2<Complex64> {
    let (n, d) = y.dim();
    let d_out = ops.shape()[2];
    let mut z = Array2::zeros((n, d_out));
    for f in 0..n {
        let row = y.row(f);
        let op = ops.index_axis(Axis(0), f);
        z.row_mut(f).assign(&row.dot(&op));
    }
    debug_assert_eq!(d, ops.shape()[1]);
    z
}

/// Multiplies each frequency row by its operator. The bias is not applied.
pub fn fgo_apply(y: &FrequencyFeatures, op: &FourierGraphOperator) -> Result<FrequencyFeatures> {
    if y.n_nodes() != op.n_freq() || y.dim() != op.dim() {
        return Err(Error::invalid_input(format!(
            "spectrum is {}x{}, operator expects {}x{}",
            y.n_nodes(),
            y.dim(),
            op.n_freq(),
            op.dim()
        )));
    }
    Ok(FrequencyFeatures {
        data: apply_ops(y.data.view(), &op.ops),
    })
}

// ---------------------------------------------------------------------------
// Multi-layer stack

/// `M + 1` operators for one band.
#[derive(Debug, Clone, PartialEq)]
pub struct FgnStack {
    pub layers: Vec<FourierGraphOperator>,
    pub activation: Activation,
}

/// Intermediates of [`FgnStack::forward_spectrum`].
#[derive(Debug, Clone)]
pub struct StackCache {
    /// `products[0]` is the input spectrum, `products[m + 1]` is the running
    /// product after layer `m`.
    products: Vec<Array2<Complex64>>,
    /// Pre-activation of every summand.
    pre: Vec<Array2<Complex64>>,
}

#[derive(Debug, Clone)]
pub struct StackGrad {
    pub input: Array2<Complex64>,
    pub ops: Vec<Array3<Complex64>>,
    pub bias: Vec<Array1<Complex64>>,
}

impl FgnStack {
    pub fn depth(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    fn check(&self, y: ArrayView2<Complex64>) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid_input("stack has no layers"));
        }
        for layer in &self.layers {
            if layer.n_freq() != y.nrows() || layer.dim() != y.ncols() {
                return Err(Error::invalid_input(format!(
                    "layer shape {}x{} does not match spectrum {}x{}",
                    layer.n_freq(),
                    layer.dim(),
                    y.nrows(),
                    y.ncols()
                )));
            }
        }
        Ok(())
    }

    /// `sum_m sigma(Y prod_{i<=m} S_i + b_m)`, keeping the running product.
    pub fn forward_spectrum(&self, y: ArrayView2<Complex64>) -> Result<(Array2<Complex64>, StackCache)> {
        self.check(y)?;
        let mut products = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        products.push(y.to_owned());
        let mut out = Array2::<Complex64>::zeros(y.raw_dim());
        for layer in &self.layers {
            let p = apply_ops(products.last().unwrap().view(), &layer.ops);
            let z = &p + &layer.bias;
            if z.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
                return Err(Error::Numerical("non-finite value inside the Fourier stack".into()));
            }
            out.zip_mut_with(&z, |o, &v| *o += self.activation.apply_complex(v));
            products.push(p);
            pre.push(z);
        }
        Ok((out, StackCache { products, pre }))
    }

    pub fn backward(&self, cache: &StackCache, grad_out: ArrayView2<Complex64>) -> StackGrad {
        let n_layers = self.layers.len();
        let mut ops = vec![Array3::zeros((0, 0, 0)); n_layers];
        let mut bias = vec![Array1::zeros(0); n_layers];
        // Gradient flowing into the running product from deeper layers.
        let mut carry: Option<Array2<Complex64>> = None;
        for m in (0..n_layers).rev() {
            let pre = &cache.pre[m];
            let mut g = Array2::from_shape_fn(pre.raw_dim(), |idx| {
                self.activation.backward_complex(pre[idx], grad_out[idx])
            });
            bias[m] = g.sum_axis(Axis(0));
            if let Some(c) = carry.take() {
                g += &c;
            }
            let input = &cache.products[m];
            let op = &self.layers[m].ops;
            let (n, d) = input.dim();
            let d_out = op.shape()[2];
            let mut g_op = Array3::zeros((n, d, d_out));
            let mut g_in = Array2::zeros((n, d));
            for f in 0..n {
                let p = input.row(f);
                let gz = g.row(f);
                let s_f = op.index_axis(Axis(0), f);
                let mut g_s = g_op.index_axis_mut(Axis(0), f);
                for j in 0..d {
                    let pc = p[j].conj();
                    let mut acc = Complex64::new(0.0, 0.0);
                    for k in 0..d_out {
                        g_s[[j, k]] = pc * gz[k];
                        acc += gz[k] * s_f[[j, k]].conj();
                    }
                    g_in[[f, j]] = acc;
                }
            }
            ops[m] = g_op;
            carry = Some(g_in);
        }
        StackGrad {
            input: carry.unwrap_or_else(|| Array2::zeros(grad_out.raw_dim())),
            ops,
            bias,
        }
    }
}

/// Runs both band stacks over the spectrum of `x`.
pub fn fgn_forward(
    x: ArrayView2<f64>,
    low: &FgnStack,
    high: &FgnStack,
) -> Result<(FrequencyFeatures, FrequencyFeatures)> {
    let y = dft_nodes(x);
    let (yl, _) = low.forward_spectrum(y.data.view())?;
    let (yh, _) = high.forward_spectrum(y.data.view())?;
    Ok((FrequencyFeatures { data: yl }, FrequencyFeatures { data: yh }))
}

// ---------------------------------------------------------------------------
// Trainable per-layer parameters

/// Frequency bank resolution: `MODAL_PHASES` phases times `bins` points on the
/// normalized frequency circle.
///
/// With the modality-major node layout of a `3N`-node graph, the DFT index
/// `f` factors into a cross-modal phase `f mod 3` and a within-modality
/// frequency `f / n`. The bank is indexed by both so that one parameter set
/// serves conversations of every length.
pub const MODAL_PHASES: usize = 3;

/// Trainable parameters of one Fourier layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FgoLayerParams {
    /// `[d x d]` real weight multiplying the filter spectrum.
    pub weight: Array2<f64>,
    /// `[MODAL_PHASES * bins x d x d]`, real and imaginary parts.
    pub bank_re: Array3<f64>,
    pub bank_im: Array3<f64>,
    pub bias_re: Array1<f64>,
    pub bias_im: Array1<f64>,
}

crate::params::param_set!(FgoLayerParams {
    arrays: [weight, bank_re, bank_im, bias_re, bias_im]
});

/// Linear interpolation coordinates of frequency `f` out of `n` in the bank.
fn bank_coords(f: usize, n: usize, bins: usize) -> (usize, usize, f64) {
    let phase = f % MODAL_PHASES;
    let pos = f as f64 / n as f64 * bins as f64;
    let lo = pos.floor();
    let frac = pos - lo;
    let i0 = lo as usize % bins;
    let i1 = (i0 + 1) % bins;
    (phase * bins + i0, phase * bins + i1, frac)
}

impl FgoLayerParams {
    pub fn zeros(d: usize, bins: usize) -> Self {
        FgoLayerParams {
            weight: Array2::zeros((d, d)),
            bank_re: Array3::zeros((MODAL_PHASES * bins, d, d)),
            bank_im: Array3::zeros((MODAL_PHASES * bins, d, d)),
            bias_re: Array1::zeros(d),
            bias_im: Array1::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn bins(&self) -> usize {
        self.bank_re.shape()[0] / MODAL_PHASES
    }

    /// Operator for a graph whose filter spectrum is `lambda`.
    pub fn materialize(&self, lambda: ArrayView1<Complex64>, band: Band, mode: FgoMode) -> FourierGraphOperator {
        let mut op = operator_from_spectrum(lambda, self.weight.view(), band);
        op.mode = mode;
        if mode == FgoMode::Free {
            let n = lambda.len();
            let bins = self.bins();
            for f in 0..n {
                let (i0, i1, t) = bank_coords(f, n, bins);
                let mut s = op.ops.index_axis_mut(Axis(0), f);
                let re = &self.bank_re.index_axis(Axis(0), i0) * (1.0 - t) + &self.bank_re.index_axis(Axis(0), i1) * t;
                let im = &self.bank_im.index_axis(Axis(0), i0) * (1.0 - t) + &self.bank_im.index_axis(Axis(0), i1) * t;
                s.zip_mut_with(&re, |z, &r| z.re += r);
                s.zip_mut_with(&im, |z, &i| z.im += i);
            }
        }
        op.bias = Array1::from_shape_fn(self.dim(), |k| Complex64::new(self.bias_re[k], self.bias_im[k]));
        op
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient on
    /// the filter spectrum.
    pub fn backward(
        &self,
        lambda: ArrayView1<Complex64>,
        mode: FgoMode,
        g_ops: &Array3<Complex64>,
        g_bias: ArrayView1<Complex64>,
        grad: &mut FgoLayerParams,
    ) -> Array1<Complex64> {
        let n = lambda.len();
        let bins = self.bins();
        let mut g_lambda = Array1::zeros(n);
        for f in 0..n {
            let g_s = g_ops.index_axis(Axis(0), f);
            let lam = lambda[f];
            let mut acc = Complex64::new(0.0, 0.0);
            for ((j, k), g) in g_s.indexed_iter() {
                // S = lambda W with W real
                grad.weight[[j, k]] += (lam.conj() * g).re;
                acc += g * self.weight[[j, k]];
            }
            g_lambda[f] = acc;
            if mode == FgoMode::Free {
                let (i0, i1, t) = bank_coords(f, n, bins);
                let re = g_s.mapv(|z| z.re);
                let im = g_s.mapv(|z| z.im);
                grad.bank_re.index_axis_mut(Axis(0), i0).scaled_add(1.0 - t, &re);
                grad.bank_re.index_axis_mut(Axis(0), i1).scaled_add(t, &re);
                grad.bank_im.index_axis_mut(Axis(0), i0).scaled_add(1.0 - t, &im);
                grad.bank_im.index_axis_mut(Axis(0), i1).scaled_add(t, &im);
            }
        }
        for k in 0..self.dim() {
            grad.bias_re[k] += g_bias[k].re;
            grad.bias_im[k] += g_bias[k].im;
        }
        g_lambda
    }
}

/// Dense spatial reference `L X W`.
pub fn spatial_convolution(l: ArrayView2<f64>, x: ArrayView2<f64>, w: ArrayView2<f64>) -> Array2<f64> {
    l.dot(&x).dot(&w)
}

/// Frequency path `IDFT(DFT(X) S)` for an already-built operator, real part.
pub fn spectral_convolution(x: ArrayView2<f64>, op: &FourierGraphOperator) -> Result<Array2<f64>> {
    let y = dft_nodes(x);
    let z = fgo_apply(&y, op)?;
    Ok(idft_real_part(&z).0)
}

/// Naive `O(n^2)` DFT, used as a reference for the fast path.
pub fn naive_dft(x: ArrayView2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let (n, d) = x.dim();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = Array2::zeros((n, d));
    for f in 0..n {
        for s_ in 0..n {
            let angle = sign * 2.0 * PI * ((f * s_) % n) as f64 / n as f64;
            let tw = Complex64::new(angle.cos(), angle.sin());
            let row = x.slice(s![s_, ..]);
            for j in 0..d {
                out[[f, j]] += row[j] * tw;
            }
        }
    }
    if inverse {
        out.mapv_inplace(|z| z / n as f64);
    }
    out
}

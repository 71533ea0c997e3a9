//! Dense multilayer perceptron with explicit forward cache and manual backprop.
//!
//! All parameters of a network live in one flat `Vec<f64>`. Layer `l` stores
//! its weight matrix first, input-major with shape `(fan_in, fan_out)`, then its
//! bias vector. Batches are row-major matrices with one sample per row, so a
//! layer is `Z = X W + b` followed by the activation.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Row-major dense matrix, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix",
                format!("{rows}x{cols} = {}", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("matrix rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenActivation {
    Relu,
    Elu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

impl fmt::Display for HiddenActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HiddenActivation::Relu => "relu",
            HiddenActivation::Elu => "elu",
        })
    }
}

impl fmt::Display for OutputActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputActivation::Identity => "identity",
            OutputActivation::Tanh => "tanh",
        })
    }
}

impl std::str::FromStr for HiddenActivation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relu" => Ok(HiddenActivation::Relu),
            "elu" => Ok(HiddenActivation::Elu),
            other => Err(format!("unknown hidden activation `{other}` (relu|elu)")),
        }
    }
}

impl std::str::FromStr for OutputActivation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identity" => Ok(OutputActivation::Identity),
            "tanh" => Ok(OutputActivation::Tanh),
            other => Err(format!("unknown output activation `{other}` (identity|tanh)")),
        }
    }
}

/// Architecture of an MLP: widths from input to output, plus activations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub layer_widths: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl NetSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        let spec = NetSpec {
            layer_widths,
            hidden_activation,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Input width, hidden widths, output width.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(widths, hidden_activation, output_activation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// (weight offset, bias offset, fan_in, fan_out) per layer.
    fn layout(&self) -> Vec<LayerSlot> {
        let mut off = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    w_off: off,
                    b_off: off + w[0] * w[1],
                    fan_in: w[0],
                    fan_out: w[1],
                };
                off += w[0] * w[1] + w[1];
                slot
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    w_off: usize,
    b_off: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Flat parameter store for one MLP.
///
/// Every mutation through [`NetParams::as_mut_slice`] refreshes an internal
/// stamp, so a [`ForwardCache`] taken before the mutation is rejected by
/// [`NetParams::backward`].
pub struct NetParams {
    spec: NetSpec,
    data: Vec<f64>,
    stamp: u64,
}

impl Clone for NetParams {
    fn clone(&self) -> Self {
        NetParams {
            spec: self.spec.clone(),
            data: self.data.clone(),
            stamp: fresh_stamp(),
        }
    }
}

impl fmt::Debug for NetParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NetParams")
            .field("spec", &self.spec)
            .field("num_params", &self.data.len())
            .finish()
    }
}

impl PartialEq for NetParams {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.data == other.data
    }
}

impl NetParams {
    pub fn zeros(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.param_count();
        Ok(NetParams {
            spec,
            data: vec![0.0; n],
            stamp: fresh_stamp(),
        })
    }

    pub fn from_vec(spec: NetSpec, data: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if data.len() != spec.param_count() {
            return Err(Error::shape("parameter vector", spec.param_count(), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(NetParams {
            spec,
            data,
            stamp: fresh_stamp(),
        })
    }

    /// Uniform fan-in initialization, `U(-b, b)` with `b = gain * sqrt(3 / fan_in)`.
    /// Hidden layers use gain `sqrt(2)`; the output layer uses `output_scale`.
    pub fn init<R: Rng + ?Sized>(spec: NetSpec, output_scale: f64, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        let layout = params.spec.layout();
        let last = layout.len() - 1;
        for (l, slot) in layout.iter().enumerate() {
            let gain = if l == last {
                output_scale
            } else {
                std::f64::consts::SQRT_2
            };
            let bound = gain * (3.0 / slot.fan_in as f64).sqrt();
            for w in &mut params.data[slot.w_off..slot.b_off] {
                *w = if bound > 0.0 {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                };
            }
        }
        Ok(params)
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.stamp = fresh_stamp();
        &mut self.data
    }

    /// Same spec, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        NetParams {
            spec: self.spec.clone(),
            data: vec![0.0; self.data.len()],
            stamp: fresh_stamp(),
        }
    }

    /// Weights of layer `l` as an input-major `(fan_in, fan_out)` slice.
    pub fn layer_weights(&self, l: usize) -> &[f64] {
        let s = self.spec.layout()[l];
        &self.data[s.w_off..s.b_off]
    }

    pub fn layer_bias(&self, l: usize) -> &[f64] {
        let s = self.spec.layout()[l];
        &self.data[s.b_off..s.b_off + s.fan_out]
    }

    pub fn layer_weights_mut(&mut self, l: usize) -> &mut [f64] {
        let s = self.spec.layout()[l];
        self.stamp = fresh_stamp();
        &mut self.data[s.w_off..s.b_off]
    }

    pub fn layer_bias_mut(&mut self, l: usize) -> &mut [f64] {
        let s = self.spec.layout()[l];
        self.stamp = fresh_stamp();
        &mut self.data[s.b_off..s.b_off + s.fan_out]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.spec.input_width() {
            return Err(Error::shape(
                "network input width",
                self.spec.input_width(),
                input.cols(),
            ));
        }
        if input.rows() == 0 {
            return Err(Error::shape("network input batch", "at least one row", 0));
        }
        if input.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        Ok(())
    }

    /// Runs the batch through the network and keeps everything needed for
    /// an exact backward pass.
    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(input)?;
        let batch = input.rows();
        let layout = self.spec.layout();
        let last = layout.len() - 1;
        let mut pre = Vec::with_capacity(layout.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(layout.len());
        for (l, slot) in layout.iter().enumerate() {
            let x = if l == 0 { input.as_slice() } else { &post[l - 1] };
            let z = self.affine(slot, x, batch);
            let a = if l == last {
                apply_output(self.spec.output_activation, &z)
            } else {
                apply_hidden(self.spec.hidden_activation, &z)
            };
            pre.push(z);
            post.push(a);
        }
        let out = Matrix {
            rows: batch,
            cols: self.spec.output_width(),
            data: post.last().unwrap().clone(),
        };
        let cache = ForwardCache {
            stamp: self.stamp,
            widths: self.spec.layer_widths.clone(),
            batch,
            input: input.as_slice().to_vec(),
            pre,
            post,
        };
        Ok((out, cache))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let batch = input.rows();
        let layout = self.spec.layout();
        let last = layout.len() - 1;
        let mut x = input.as_slice().to_vec();
        for (l, slot) in layout.iter().enumerate() {
            let mut z = self.affine(slot, &x, batch);
            if l == last {
                apply_output_in_place(self.spec.output_activation, &mut z);
            } else {
                apply_hidden_in_place(self.spec.hidden_activation, &mut z);
            }
            x = z;
        }
        Ok(Matrix {
            rows: batch,
            cols: self.spec.output_width(),
            data: x,
        })
    }

    /// Single-sample convenience wrapper around [`NetParams::predict`].
    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::new(1, input.len(), input.to_vec())?;
        Ok(self.predict(&m)?.into_vec())
    }

    fn affine(&self, slot: &LayerSlot, x: &[f64], batch: usize) -> Vec<f64> {
        let w = &self.data[slot.w_off..slot.b_off];
        let b = &self.data[slot.b_off..slot.b_off + slot.fan_out];
        let mut z = Vec::with_capacity(batch * slot.fan_out);
        for _ in 0..batch {
            z.extend_from_slice(b);
        }
        gemm(
            batch,
            slot.fan_in,
            slot.fan_out,
            x,
            (slot.fan_in, 1),
            w,
            (slot.fan_out, 1),
            &mut z,
            1.0,
        );
        z
    }

    /// Backpropagates `output_grad` (d loss / d output, same shape as the
    /// forward output) through the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<Gradients> {
        if cache.stamp != self.stamp || cache.widths != self.spec.layer_widths {
            return Err(Error::StaleCache);
        }
        if output_grad.rows() != cache.batch || output_grad.cols() != self.spec.output_width() {
            return Err(Error::shape(
                "output gradient",
                format!("{}x{}", cache.batch, self.spec.output_width()),
                format!("{}x{}", output_grad.rows(), output_grad.cols()),
            ));
        }
        let batch = cache.batch;
        let layout = self.spec.layout();
        let last = layout.len() - 1;
        let mut grads = self.zeros_like();
        let mut delta = output_grad.as_slice().to_vec();
        for l in (0..layout.len()).rev() {
            let slot = layout[l];
            // d loss / d pre-activation
            if l == last {
                output_derivative(self.spec.output_activation, &cache.post[l], &mut delta);
            } else {
                hidden_derivative(
                    self.spec.hidden_activation,
                    &cache.pre[l],
                    &cache.post[l],
                    &mut delta,
                );
            }
            let x: &[f64] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            {
                let (gw, gb) = grads.data[slot.w_off..slot.b_off + slot.fan_out]
                    .split_at_mut(slot.b_off - slot.w_off);
                // dW = X^T delta
                gemm(
                    slot.fan_in,
                    batch,
                    slot.fan_out,
                    x,
                    (1, slot.fan_in),
                    &delta,
                    (slot.fan_out, 1),
                    gw,
                    0.0,
                );
                for row in delta.chunks_exact(slot.fan_out) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            // dX = delta W^T
            let w = &self.data[slot.w_off..slot.b_off];
            let mut dx = vec![0.0; batch * slot.fan_in];
            gemm(
                batch,
                slot.fan_out,
                slot.fan_in,
                &delta,
                (slot.fan_out, 1),
                w,
                (1, slot.fan_out),
                &mut dx,
                0.0,
            );
            delta = dx;
        }
        Ok(Gradients {
            params: grads,
            input: Matrix {
                rows: batch,
                cols: self.spec.input_width(),
                data: delta,
            },
        })
    }
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    widths: Vec<usize>,
    batch: usize,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Parameter gradients (same layout as the network) and input gradients.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: NetParams,
    pub input: Matrix,
}

/// `c = a * b + beta * c` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn apply_hidden(act: HiddenActivation, z: &[f64]) -> Vec<f64> {
    let mut a = z.to_vec();
    apply_hidden_in_place(act, &mut a);
    a
}

fn apply_hidden_in_place(act: HiddenActivation, z: &mut [f64]) {
    match act {
        HiddenActivation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
        HiddenActivation::Elu => z.iter_mut().for_each(|v| {
            if *v <= 0.0 {
                *v = v.exp_m1();
            }
        }),
    }
}

fn apply_output(act: OutputActivation, z: &[f64]) -> Vec<f64> {
    let mut a = z.to_vec();
    apply_output_in_place(act, &mut a);
    a
}

fn apply_output_in_place(act: OutputActivation, z: &mut [f64]) {
    if act == OutputActivation::Tanh {
        z.iter_mut().for_each(|v| *v = v.tanh());
    }
}

fn hidden_derivative(act: HiddenActivation, pre: &[f64], post: &[f64], delta: &mut [f64]) {
    match act {
        HiddenActivation::Relu => {
            for (d, &z) in delta.iter_mut().zip(pre) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        HiddenActivation::Elu => {
            for ((d, &z), &a) in delta.iter_mut().zip(pre).zip(post) {
                if z <= 0.0 {
                    *d *= a + 1.0;
                }
            }
        }
    }
}

fn output_derivative(act: OutputActivation, post: &[f64], delta: &mut [f64]) {
    if act == OutputActivation::Tanh {
        for (d, &a) in delta.iter_mut().zip(post) {
            *d *= 1.0 - a * a;
        }
    }
}

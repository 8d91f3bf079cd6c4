//! Minimal differentiable-function toolkit.
//!
//! Networks are a short stack of conv1d (over the user axis) and dense
//! layers feeding named linear heads. Forward passes cache post-activations;
//! `backward` takes per-head output gradients and accumulates parameter
//! gradients in reverse. That is all the agents need: every loss gradient is
//! derived analytically at the head outputs and pushed through here, and the
//! whole path is checked against central finite differences in the tests.
//!
//! Everything is f64 and batch-major; the inner loops are contiguous
//! dot/axpy kernels, which is where training spends its time.

use rand::Rng;
use thiserror::Error;

use crate::stream_rng;

pub mod checkpoint;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {ctx}: expected {expected}, got {got}")]
    ShapeMismatch {
        ctx: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in parameter `{0}`")]
    NonFinite(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: &mut [f64]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                for v in x {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for v in x {
                    *v = v.tanh();
                }
            }
        }
    }

    /// Derivative expressed through the post-activation value.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone)]
pub enum LayerSpec {
    /// Position-wise mixing across the user axis: `[P, c_in] -> [P, c_out]`.
    /// Odd kernels use zero same-padding so the position count is preserved.
    Conv1d {
        channels_out: usize,
        kernel: usize,
        activation: Activation,
    },
    Dense {
        output: usize,
        activation: Activation,
    },
}

#[derive(Debug, Clone)]
pub struct HeadSpec {
    pub name: String,
    pub width: usize,
}

/// Layer stack plus named output heads. Conv layers must precede dense
/// layers; the first dense flattens `[P, C]` into `P * C`.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    positions: usize,
    channels: usize,
    layers: Vec<LayerSpec>,
    heads: Vec<HeadSpec>,
}

impl NetworkSpec {
    pub fn new(positions: usize, channels: usize) -> Self {
        Self {
            positions,
            channels,
            layers: Vec::new(),
            heads: Vec::new(),
        }
    }

    pub fn conv1d(mut self, channels_out: usize, kernel: usize, activation: Activation) -> Self {
        self.layers.push(LayerSpec::Conv1d {
            channels_out,
            kernel,
            activation,
        });
        self
    }

    pub fn dense(mut self, output: usize, activation: Activation) -> Self {
        self.layers.push(LayerSpec::Dense { output, activation });
        self
    }

    pub fn head(mut self, name: &str, width: usize) -> Self {
        self.heads.push(HeadSpec {
            name: name.to_string(),
            width,
        });
        self
    }

    pub fn input_len(&self) -> usize {
        self.positions * self.channels
    }
}

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    fn new(name: String, shape: Vec<usize>, values: Vec<f64>) -> Self {
        let n = values.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Self {
            name,
            shape,
            values,
            grad: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum LayerKind {
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        activation: Activation,
    },
    Dense {
        input: usize,
        output: usize,
        activation: Activation,
    },
}

/// A built network: resolved shapes, parameters, and the forward/backward
/// kernels. One `ParamTensor` pair (weight, bias) per layer and per head.
pub struct Network {
    spec: NetworkSpec,
    kinds: Vec<LayerKind>,
    /// Widths of the cached activations; `widths[0]` is the input length.
    widths: Vec<usize>,
    trunk_out: usize,
    pub params: Vec<ParamTensor>,
    /// Parameter indices of each layer's (weight, bias).
    layer_params: Vec<(usize, usize)>,
    head_params: Vec<(usize, usize)>,
}

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self, NnError> {
        let mut rng = stream_rng(seed, 0x11e7);
        let mut kinds = Vec::new();
        let mut widths = vec![spec.input_len()];
        let mut params: Vec<ParamTensor> = Vec::new();
        let mut layer_params = Vec::new();
        let cur_positions = spec.positions;
        let mut cur_channels = spec.channels;
        let mut flattened = false;

        let init = |rng: &mut rand_chacha::ChaCha12Rng,
                        name: String,
                        shape: Vec<usize>,
                        fan_in: usize|
         -> ParamTensor {
            let n: usize = shape.iter().product();
            let limit = (6.0 / fan_in as f64).sqrt();
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
            ParamTensor::new(name, shape, values)
        };

        for (li, layer) in spec.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv1d {
                    channels_out,
                    kernel,
                    activation,
                } => {
                    if flattened {
                        return Err(NnError::InvalidSpec(
                            "conv1d after dense is not supported".into(),
                        ));
                    }
                    if kernel % 2 == 0 {
                        return Err(NnError::InvalidSpec("conv kernel must be odd".into()));
                    }
                    let w = init(
                        &mut rng,
                        format!("layer{li}.conv.weight"),
                        vec![channels_out, cur_channels, kernel],
                        cur_channels * kernel,
                    );
                    let b = ParamTensor::new(
                        format!("layer{li}.conv.bias"),
                        vec![channels_out],
                        vec![0.0; channels_out],
                    );
                    layer_params.push((params.len(), params.len() + 1));
                    params.push(w);
                    params.push(b);
                    kinds.push(LayerKind::Conv {
                        c_in: cur_channels,
                        c_out: channels_out,
                        kernel,
                        activation,
                    });
                    cur_channels = channels_out;
                    widths.push(cur_positions * cur_channels);
                }
                LayerSpec::Dense { output, activation } => {
                    let input = *widths.last().unwrap();
                    flattened = true;
                    let w = init(
                        &mut rng,
                        format!("layer{li}.dense.weight"),
                        vec![output, input],
                        input,
                    );
                    let b = ParamTensor::new(
                        format!("layer{li}.dense.bias"),
                        vec![output],
                        vec![0.0; output],
                    );
                    layer_params.push((params.len(), params.len() + 1));
                    params.push(w);
                    params.push(b);
                    kinds.push(LayerKind::Dense {
                        input,
                        output,
                        activation,
                    });
                    widths.push(output);
                }
            }
        }
        let trunk_out = *widths.last().unwrap();
        let mut head_params = Vec::new();
        for head in &spec.heads {
            let w = init(
                &mut rng,
                format!("head.{}.weight", head.name),
                vec![head.width, trunk_out],
                trunk_out,
            );
            let b = ParamTensor::new(
                format!("head.{}.bias", head.name),
                vec![head.width],
                vec![0.0; head.width],
            );
            head_params.push((params.len(), params.len() + 1));
            params.push(w);
            params.push(b);
        }
        Ok(Self {
            spec,
            kinds,
            widths,
            trunk_out,
            params,
            layer_params,
            head_params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_len()
    }

    pub fn num_heads(&self) -> usize {
        self.spec.heads.len()
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.spec.heads.iter().position(|h| h.name == name)
    }

    pub fn head_width(&self, idx: usize) -> usize {
        self.spec.heads[idx].width
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Batched forward. `input` is `[batch, input_len]` row-major.
    pub fn forward(&self, input: &[f64], batch: usize) -> Result<ForwardPass, NnError> {
        if input.len() != batch * self.input_len() {
            return Err(NnError::ShapeMismatch {
                ctx: "forward input",
                expected: batch * self.input_len(),
                got: input.len(),
            });
        }
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.kinds.len() + 1);
        acts.push(input.to_vec());
        for (li, kind) in self.kinds.iter().enumerate() {
            let x = acts.last().unwrap();
            let (wi, bi) = self.layer_params[li];
            let mut y = match *kind {
                LayerKind::Dense { input, output, .. } => {
                    let mut y = vec![0.0; batch * output];
                    dense_forward(
                        x,
                        &self.params[wi].values,
                        &self.params[bi].values,
                        &mut y,
                        batch,
                        input,
                        output,
                    );
                    y
                }
                LayerKind::Conv {
                    c_in,
                    c_out,
                    kernel,
                    ..
                } => {
                    let mut y = vec![0.0; batch * self.spec.positions * c_out];
                    if kernel == 1 {
                        // Kernel-1 conv over positions is a position-wise
                        // dense layer; use the fast path.
                        dense_forward(
                            x,
                            &self.params[wi].values,
                            &self.params[bi].values,
                            &mut y,
                            batch * self.spec.positions,
                            c_in,
                            c_out,
                        );
                    } else {
                        conv_forward(
                            x,
                            &self.params[wi].values,
                            &self.params[bi].values,
                            &mut y,
                            batch,
                            self.spec.positions,
                            c_in,
                            c_out,
                            kernel,
                        );
                    }
                    y
                }
            };
            kind_activation(kind).apply(&mut y);
            acts.push(y);
        }
        let trunk = acts.last().unwrap();
        let mut heads = Vec::with_capacity(self.head_params.len());
        for (hi, &(wi, bi)) in self.head_params.iter().enumerate() {
            let width = self.spec.heads[hi].width;
            let mut y = vec![0.0; batch * width];
            dense_forward(
                trunk,
                &self.params[wi].values,
                &self.params[bi].values,
                &mut y,
                batch,
                self.trunk_out,
                width,
            );
            heads.push(y);
        }
        Ok(ForwardPass { batch, acts, heads })
    }

    /// Trunk features (post final layer) for a forward pass; the bandits use
    /// these as the last-layer feature map for their confidence geometry.
    pub fn trunk_features<'a>(&self, pass: &'a ForwardPass) -> &'a [f64] {
        pass.acts.last().unwrap()
    }

    /// Accumulates parameter gradients given `d(loss)/d(head outputs)`.
    ///
    /// `head_grads[h]` must be `[batch, head_width]`, or empty to skip that
    /// head. Gradients add onto whatever `.grad` already holds.
    pub fn backward(&mut self, pass: &ForwardPass, head_grads: &[&[f64]]) -> Result<(), NnError> {
        let batch = pass.batch;
        if head_grads.len() != self.head_params.len() {
            return Err(NnError::ShapeMismatch {
                ctx: "head grads",
                expected: self.head_params.len(),
                got: head_grads.len(),
            });
        }
        let trunk_len = batch * self.trunk_out;
        let trunk = pass.acts.last().unwrap();
        let mut d_trunk = vec![0.0; trunk_len];
        for (hi, &(wi, bi)) in self.head_params.iter().enumerate() {
            let dy = head_grads[hi];
            if dy.is_empty() {
                continue;
            }
            let width = self.spec.heads[hi].width;
            if dy.len() != batch * width {
                return Err(NnError::ShapeMismatch {
                    ctx: "head grad width",
                    expected: batch * width,
                    got: dy.len(),
                });
            }
            let (w_slot, b_slot) = split_two(&mut self.params, wi, bi);
            dense_backward(
                trunk,
                &w_slot.values,
                dy,
                &mut w_slot.grad,
                &mut b_slot.grad,
                Some(&mut d_trunk),
                batch,
                self.trunk_out,
                width,
            );
        }
        // Trunk layers in reverse.
        let mut dy = d_trunk;
        for li in (0..self.kinds.len()).rev() {
            let kind = self.kinds[li];
            let x = &pass.acts[li];
            let y = &pass.acts[li + 1];
            // Fold the activation derivative into dy.
            let act = kind_activation(&kind);
            for (g, &out) in dy.iter_mut().zip(y.iter()) {
                *g *= act.grad_from_output(out);
            }
            let (wi, bi) = self.layer_params[li];
            let mut dx = if li > 0 {
                Some(vec![0.0; batch * self.widths[li]])
            } else {
                None
            };
            match kind {
                LayerKind::Dense { input, output, .. } => {
                    let (w_slot, b_slot) = split_two(&mut self.params, wi, bi);
                    dense_backward(
                        x,
                        &w_slot.values,
                        &dy,
                        &mut w_slot.grad,
                        &mut b_slot.grad,
                        dx.as_deref_mut(),
                        batch,
                        input,
                        output,
                    );
                }
                LayerKind::Conv {
                    c_in,
                    c_out,
                    kernel,
                    ..
                } => {
                    let (w_slot, b_slot) = split_two(&mut self.params, wi, bi);
                    if kernel == 1 {
                        dense_backward(
                            x,
                            &w_slot.values,
                            &dy,
                            &mut w_slot.grad,
                            &mut b_slot.grad,
                            dx.as_deref_mut(),
                            batch * self.spec.positions,
                            c_in,
                            c_out,
                        );
                    } else {
                        conv_backward(
                            x,
                            &w_slot.values,
                            &dy,
                            &mut w_slot.grad,
                            &mut b_slot.grad,
                            dx.as_deref_mut(),
                            batch,
                            self.spec.positions,
                            c_in,
                            c_out,
                            kernel,
                        );
                    }
                }
            }
            match dx {
                Some(d) => dy = d,
                None => break,
            }
        }
        Ok(())
    }
}

fn kind_activation(kind: &LayerKind) -> Activation {
    match *kind {
        LayerKind::Conv { activation, .. } => activation,
        LayerKind::Dense { activation, .. } => activation,
    }
}

/// Mutable access to two distinct parameter tensors (weight before bias).
fn split_two(
    params: &mut [ParamTensor],
    a: usize,
    b: usize,
) -> (&mut ParamTensor, &mut ParamTensor) {
    assert!(a < b);
    let (lo, hi) = params.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// Dot product over sixteen independent accumulator lanes so the reduction
/// both vectorizes and hides FMA latency; the summation order is fixed, so
/// results stay bit-reproducible run to run.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 16];
    let chunks = a.len() / 16;
    for c in 0..chunks {
        let i = c * 16;
        let (av, bv) = (&a[i..i + 16], &b[i..i + 16]);
        for l in 0..16 {
            acc[l] += av[l] * bv[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 16..a.len() {
        tail += a[i] * b[i];
    }
    let mut quad = [0.0f64; 4];
    for l in 0..16 {
        quad[l % 4] += acc[l];
    }
    (quad[0] + quad[1]) + (quad[2] + quad[3]) + tail
}

/// Narrow layers (the per-user conv) go through transposed weights so the
/// inner loops run along the wide output axis instead of 15-wide dots.
const NARROW_INPUT: usize = 32;

fn transpose(w: &[f64], output: usize, input: usize) -> Vec<f64> {
    let mut wt = vec![0.0; w.len()];
    for o in 0..output {
        for i in 0..input {
            wt[i * output + o] = w[o * input + i];
        }
    }
    wt
}

/// `y[B,out] = x[B,in] * W[out,in]^T + b`.
///
/// Wide inputs use blocked dot products; narrow inputs accumulate each
/// output row with axpys over the transposed weights.
fn dense_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    y: &mut [f64],
    batch: usize,
    input: usize,
    output: usize,
) {
    if input <= NARROW_INPUT && output >= 16 {
        let wt = transpose(w, output, input);
        for s in 0..batch {
            let xr = &x[s * input..(s + 1) * input];
            let yr = &mut y[s * output..(s + 1) * output];
            yr.copy_from_slice(b);
            for (i, &xi) in xr.iter().enumerate() {
                if xi != 0.0 {
                    axpy(yr, xi, &wt[i * output..(i + 1) * output]);
                }
            }
        }
        return;
    }
    const OB: usize = 8;
    let mut ob = 0;
    while ob < output {
        let oe = (ob + OB).min(output);
        for s in 0..batch {
            let xr = &x[s * input..(s + 1) * input];
            let yr = &mut y[s * output..(s + 1) * output];
            for o in ob..oe {
                let wr = &w[o * input..(o + 1) * input];
                yr[o] = dot(xr, wr) + b[o];
            }
        }
        ob = oe;
    }
}

/// Accumulates `dW += dy^T x`, `db += sum dy`, and optionally `dx = dy W`.
///
/// Loops are output-major: each weight-gradient row (and each weight row on
/// the dx path) stays hot while the batch streams past it.
#[allow(clippy::too_many_arguments)]
fn dense_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
    batch: usize,
    input: usize,
    output: usize,
) {
    if input <= NARROW_INPUT && output >= 16 {
        // Narrow input: the transposed weight-gradient block fits in L1, so
        // one pass over the batch serves dW, db, and dx together.
        let wt = transpose(w, output, input);
        let mut dwt = vec![0.0; input * output];
        for s in 0..batch {
            let xr = &x[s * input..(s + 1) * input];
            let dyr = &dy[s * output..(s + 1) * output];
            for (i, &xi) in xr.iter().enumerate() {
                if xi != 0.0 {
                    axpy(&mut dwt[i * output..(i + 1) * output], xi, dyr);
                }
            }
            axpy(db, 1.0, dyr);
            if let Some(dx) = dx.as_deref_mut() {
                let dxr = &mut dx[s * input..(s + 1) * input];
                for i in 0..input {
                    dxr[i] += dot(dyr, &wt[i * output..(i + 1) * output]);
                }
            }
        }
        for o in 0..output {
            for i in 0..input {
                dw[o * input + i] += dwt[i * output + o];
            }
        }
        return;
    }
    // Four rows fold into every accumulator sweep, amortizing the
    // read-modify-write on the gradient rows; sample blocks keep the
    // activation block cached across the output sweep.
    const SB: usize = 16;
    let mut sb = 0;
    while sb < batch {
        let se = (sb + SB).min(batch);
        for o in 0..output {
            let dwr = &mut dw[o * input..(o + 1) * input];
            let mut bias_acc = 0.0;
            let mut s = sb;
            while s + 4 <= se {
                let g = [
                    dy[s * output + o],
                    dy[(s + 1) * output + o],
                    dy[(s + 2) * output + o],
                    dy[(s + 3) * output + o],
                ];
                bias_acc += (g[0] + g[1]) + (g[2] + g[3]);
                axpy_rows4(dwr, &g, &x[s * input..], input);
                s += 4;
            }
            while s < se {
                let g = dy[s * output + o];
                if g != 0.0 {
                    bias_acc += g;
                    axpy(dwr, g, &x[s * input..(s + 1) * input]);
                }
                s += 1;
            }
            db[o] += bias_acc;
        }
        if let Some(dx) = dx.as_deref_mut() {
            for s in sb..se {
                let dxr = &mut dx[s * input..(s + 1) * input];
                let dyr = &dy[s * output..(s + 1) * output];
                let mut o = 0;
                while o + 4 <= output {
                    let g = [dyr[o], dyr[o + 1], dyr[o + 2], dyr[o + 3]];
                    axpy_rows4(dxr, &g, &w[o * input..], input);
                    o += 4;
                }
                while o < output {
                    let g = dyr[o];
                    if g != 0.0 {
                        axpy(dxr, g, &w[o * input..(o + 1) * input]);
                    }
                    o += 1;
                }
            }
        }
        sb = se;
    }
}

/// `acc[i] += sum_k g[k] * rows[k * stride + i]` over four rows, pre-sliced
/// so the lanes stay bounds-check-free and vectorizable.
#[inline]
fn axpy_rows4(acc: &mut [f64], g: &[f64; 4], rows: &[f64], stride: usize) {
    if *g == [0.0; 4] {
        return;
    }
    let n = acc.len();
    let r0 = &rows[..n];
    let r1 = &rows[stride..stride + n];
    let r2 = &rows[2 * stride..2 * stride + n];
    let r3 = &rows[3 * stride..3 * stride + n];
    for i in 0..n {
        acc[i] += (g[0] * r0[i] + g[1] * r1[i]) + (g[2] * r2[i] + g[3] * r3[i]);
    }
}

/// `acc += scale * v`, element-wise.
#[inline]
fn axpy(acc: &mut [f64], scale: f64, v: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += scale * b;
    }
}

/// Same-padded conv over positions: `y[s,p,o] = b[o] + sum_{i,t} w[o,i,t] *
/// x[s, p+t-pad, i]`. Input/output are `[B, P, C]` row-major.
#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    y: &mut [f64],
    batch: usize,
    positions: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
) {
    let pad = kernel / 2;
    for s in 0..batch {
        let xs = &x[s * positions * c_in..(s + 1) * positions * c_in];
        let ys = &mut y[s * positions * c_out..(s + 1) * positions * c_out];
        for p in 0..positions {
            for o in 0..c_out {
                let mut acc = b[o];
                for t in 0..kernel {
                    let q = p as isize + t as isize - pad as isize;
                    if q < 0 || q >= positions as isize {
                        continue;
                    }
                    let xq = &xs[q as usize * c_in..(q as usize + 1) * c_in];
                    // w[o, i, t]: stride `kernel` over i.
                    let wr = &w[o * c_in * kernel + t..];
                    let mut a = 0.0;
                    for i in 0..c_in {
                        a += xq[i] * wr[i * kernel];
                    }
                    acc += a;
                }
                ys[p * c_out + o] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
    batch: usize,
    positions: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
) {
    let pad = kernel / 2;
    for s in 0..batch {
        let xs = &x[s * positions * c_in..(s + 1) * positions * c_in];
        let dys = &dy[s * positions * c_out..(s + 1) * positions * c_out];
        for p in 0..positions {
            for o in 0..c_out {
                let g = dys[p * c_out + o];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                for t in 0..kernel {
                    let q = p as isize + t as isize - pad as isize;
                    if q < 0 || q >= positions as isize {
                        continue;
                    }
                    let q = q as usize;
                    let xq = &xs[q * c_in..(q + 1) * c_in];
                    for i in 0..c_in {
                        dw[(o * c_in + i) * kernel + t] += g * xq[i];
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let dxq = &mut dx[s * positions * c_in + q * c_in..][..c_in];
                        for i in 0..c_in {
                            dxq[i] += g * w[(o * c_in + i) * kernel + t];
                        }
                    }
                }
            }
        }
    }
}

pub struct ForwardPass {
    batch: usize,
    acts: Vec<Vec<f64>>,
    /// Per head: `[batch, head_width]`.
    pub heads: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn head(&self, idx: usize) -> &[f64] {
        &self.heads[idx]
    }
}

/// Numerically stabilized softmax with entropy; probabilities sum to one.
pub fn softmax_entropy(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    let mut entropy = 0.0;
    for p in probs.iter_mut() {
        *p /= sum;
        if *p > 0.0 {
            entropy -= *p * p.ln();
        }
    }
    (probs, entropy)
}

/// Bias-corrected first-order adaptive optimizer over a network's parameters.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &Network, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: net.params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            v: net.params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
        }
    }

    /// One update from the gradients currently held in the network.
    /// Rejects non-finite gradients and results, naming the parameter.
    pub fn step(&mut self, net: &mut Network) -> Result<(), NnError> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, p) in net.params.iter_mut().enumerate() {
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for i in 0..p.values.len() {
                let g = p.grad[i];
                if !g.is_finite() {
                    return Err(NnError::NonFinite(p.name.clone()));
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                if !p.values[i].is_finite() {
                    return Err(NnError::NonFinite(p.name.clone()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ippg_like_spec() -> NetworkSpec {
        NetworkSpec::new(1, 15)
            .dense(8, Activation::Relu)
            .dense(8, Activation::Tanh)
            .head("policy", 4)
            .head("value", 1)
    }

    #[test]
    fn zero_weights_give_uniform_policy() {
        let mut net = Network::new(ippg_like_spec(), 1).unwrap();
        for p in &mut net.params {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let input = vec![0.3; 15];
        let pass = net.forward(&input, 1).unwrap();
        assert!(pass.head(0).iter().all(|&l| l == 0.0));
        let (probs, h) = softmax_entropy(pass.head(0));
        assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-12));
        assert!((h - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_dense_layer_passes_input_through() {
        let spec = NetworkSpec::new(1, 3)
            .dense(3, Activation::Identity)
            .head("out", 3);
        let mut net = Network::new(spec, 1).unwrap();
        // Both the trunk dense and the head become identity matrices.
        for p in &mut net.params {
            let n = p.values.len();
            for (i, v) in p.values.iter_mut().enumerate() {
                *v = if n == 9 && i % 4 == 0 { 1.0 } else { 0.0 };
            }
        }
        let input = vec![1.5, -2.0, 0.25];
        let pass = net.forward(&input, 1).unwrap();
        assert_eq!(pass.head(0), &input[..]);
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let a = Network::new(ippg_like_spec(), 42).unwrap();
        let b = Network::new(ippg_like_spec(), 42).unwrap();
        let input: Vec<f64> = (0..15).map(|i| i as f64 * 0.1).collect();
        assert_eq!(
            a.forward(&input, 1).unwrap().head(0),
            b.forward(&input, 1).unwrap().head(0)
        );
        let c = Network::new(ippg_like_spec(), 43).unwrap();
        assert_ne!(
            a.forward(&input, 1).unwrap().head(0),
            c.forward(&input, 1).unwrap().head(0)
        );
    }

    #[test]
    fn quadratic_loss_gradient_matches_closed_form() {
        // Single linear head: loss = |Wx - y|^2, dW = 2(Wx - y) x^T.
        let spec = NetworkSpec::new(1, 3).head("out", 2);
        let mut net = Network::new(spec, 5).unwrap();
        net.params[1].values.iter_mut().for_each(|v| *v = 0.0);
        let x = [0.5, -1.0, 2.0];
        let target = [1.0, -0.5];
        let pass = net.forward(&x, 1).unwrap();
        let out = pass.head(0).to_vec();
        let dy: Vec<f64> = out.iter().zip(&target).map(|(o, t)| 2.0 * (o - t)).collect();
        net.zero_grad();
        net.backward(&pass, &[&dy]).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let want = 2.0 * (out[o] - target[o]) * x[i];
                let got = net.params[0].grad[o * 3 + i];
                assert!((got - want).abs() < 1e-12);
            }
            assert!((net.params[1].grad[o] - dy[o]).abs() < 1e-12);
        }
    }

    /// Scalar probe loss over all heads: coef-weighted half-squares.
    fn probe_loss(net: &Network, input: &[f64], batch: usize) -> f64 {
        let pass = net.forward(input, batch).unwrap();
        let mut loss = 0.0;
        for h in 0..pass.heads.len() {
            for (i, &v) in pass.head(h).iter().enumerate() {
                loss += 0.5 * (h as f64 + 1.0) * v * v * (1.0 + 0.1 * (i % 3) as f64);
            }
        }
        loss
    }

    fn probe_head_grads(pass: &ForwardPass) -> Vec<Vec<f64>> {
        (0..pass.heads.len())
            .map(|h| {
                pass.head(h)
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (h as f64 + 1.0) * v * (1.0 + 0.1 * (i % 3) as f64))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        // Covers both layer types, both saturating and piecewise activations,
        // and a batch > 1.
        let spec = NetworkSpec::new(4, 5)
            .conv1d(6, 1, Activation::Relu)
            .conv1d(4, 3, Activation::Tanh)
            .dense(7, Activation::Relu)
            .head("a", 3)
            .head("b", 2);
        let mut net = Network::new(spec, 9).unwrap();
        let batch = 3;
        let mut rng = crate::stream_rng(17, 0);
        let input: Vec<f64> = (0..batch * 20).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let pass = net.forward(&input, batch).unwrap();
        let grads = probe_head_grads(&pass);
        net.zero_grad();
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        net.backward(&pass, &refs).unwrap();
        let analytic: Vec<Vec<f64>> = net.params.iter().map(|p| p.grad.clone()).collect();

        let eps = 1e-5;
        for pi in 0..net.params.len() {
            for i in 0..net.params[pi].values.len() {
                let orig = net.params[pi].values[i];
                net.params[pi].values[i] = orig + eps;
                let up = probe_loss(&net, &input, batch);
                net.params[pi].values[i] = orig - eps;
                let down = probe_loss(&net, &input, batch);
                net.params[pi].values[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let got = analytic[pi][i];
                let rel = (got - fd).abs() / (fd.abs() + 1e-6);
                assert!(
                    rel < 1e-4,
                    "param {} [{i}]: analytic {got} vs fd {fd}",
                    net.params[pi].name
                );
            }
        }
    }

    #[test]
    fn constant_loss_means_zero_gradients() {
        let mut net = Network::new(ippg_like_spec(), 3).unwrap();
        let input = vec![0.1; 15];
        let pass = net.forward(&input, 1).unwrap();
        net.zero_grad();
        let zero_policy = vec![0.0; 4];
        let zero_value = vec![0.0; 1];
        net.backward(&pass, &[&zero_policy, &zero_value]).unwrap();
        for p in &net.params {
            assert!(p.grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut net = Network::new(ippg_like_spec(), 3).unwrap();
        let before: Vec<Vec<f64>> = net.params.iter().map(|p| p.values.clone()).collect();
        let mut opt = Adam::new(&net, 1e-3);
        net.zero_grad();
        opt.step(&mut net).unwrap();
        for (p, b) in net.params.iter().zip(&before) {
            assert_eq!(&p.values, b);
        }
    }

    #[test]
    fn adam_constant_gradient_step_approaches_lr() {
        let spec = NetworkSpec::new(1, 1).head("out", 1);
        let mut net = Network::new(spec, 1).unwrap();
        let mut opt = Adam::new(&net, 1e-2);
        let mut prev = net.params[0].values[0];
        let mut last_delta = 0.0;
        for _ in 0..5000 {
            net.params[0].grad[0] = 1.0;
            net.params[1].grad[0] = 1.0;
            opt.step(&mut net).unwrap();
            last_delta = prev - net.params[0].values[0];
            prev = net.params[0].values[0];
        }
        assert!((last_delta - 1e-2).abs() < 1e-4, "step {last_delta}");
    }

    #[test]
    fn adam_zero_lr_is_identity_and_nan_grad_names_param() {
        let mut net = Network::new(ippg_like_spec(), 3).unwrap();
        let before: Vec<f64> = net.params[0].values.clone();
        let mut opt = Adam::new(&net, 0.0);
        net.params[0].grad[2] = 0.7;
        opt.step(&mut net).unwrap();
        assert_eq!(net.params[0].values, before);

        net.params[2].grad[0] = f64::NAN;
        let err = opt.step(&mut net).unwrap_err();
        match err {
            NnError::NonFinite(name) => assert_eq!(name, "layer1.dense.weight"),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn softmax_handles_extreme_logits() {
        let (probs, h) = softmax_entropy(&[1e3, 0.0, 0.0, 0.0]);
        assert!(probs.iter().all(|p| p.is_finite()));
        assert!((probs[0] - 1.0).abs() < 1e-12);
        assert!(h.abs() < 1e-9);
    }

    #[test]
    fn softmax_entropy_matches_direct_recomputation() {
        let mut rng = crate::stream_rng(23, 1);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let (probs, h) = softmax_entropy(&logits);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let brute: f64 = -probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>();
            assert!((h - brute).abs() < 1e-12);
            assert!(h >= 0.0 && h <= 6.0_f64.ln() + 1e-12);
        }
    }
}

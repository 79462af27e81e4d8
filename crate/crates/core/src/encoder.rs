//! Stacked GRU encoder shared by the anchor, positive and negative branches.
//!
//! Cell equations (per layer, per step):
//!
//! ```text
//! z  = sigmoid(W_z x + U_z h_prev + b_z)
//! r  = sigmoid(W_r x + U_r h_prev + b_r)
//! c  = tanh(W_h x + U_h (r * h_prev) + b_h)
//! h  = (1 - z) * h_prev + z * c
//! ```
//!
//! Each layer starts from `h = 0` and runs over the `valid_len` rows of the
//! encoding. Padding rows are never fed. The embedding is the final hidden
//! state of the last layer. All arithmetic is `f64`.

use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoding::NameEncoding;
use crate::error::{Error, Result};

/// Desk-scale default stack.
pub const DEFAULT_LAYERS: [usize; 2] = [32, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector(values)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

impl Deref for EmbeddingVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(v: Vec<f64>) -> Self {
        EmbeddingVector(v)
    }
}

/// Scales `v` to unit Euclidean length.
pub fn normalize(v: &[f64]) -> Result<EmbeddingVector> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(EmbeddingVector(v.iter().map(|x| x / n).collect()))
}

/// Weights of one gate: `w` is `hidden x input`, `u` is `hidden x hidden`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub b: Vec<f64>,
}

impl GateParams {
    fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        GateParams {
            w: vec![0.0; hidden_dim * input_dim],
            u: vec![0.0; hidden_dim * hidden_dim],
            b: vec![0.0; hidden_dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruLayerParams {
    input_dim: usize,
    hidden_dim: usize,
    pub update: GateParams,
    pub reset: GateParams,
    pub candidate: GateParams,
}

impl GruLayerParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        GruLayerParams {
            input_dim,
            hidden_dim,
            update: GateParams::zeros(input_dim, hidden_dim),
            reset: GateParams::zeros(input_dim, hidden_dim),
            candidate: GateParams::zeros(input_dim, hidden_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Parameter arrays in persisted order: W_z, U_z, b_z, W_r, U_r, b_r, W_h, U_h, b_h.
    pub fn slices(&self) -> [&[f64]; 9] {
        let (z, r, h) = (&self.update, &self.reset, &self.candidate);
        [&z.w, &z.u, &z.b, &r.w, &r.u, &r.b, &h.w, &h.u, &h.b]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 9] {
        let (z, r, h) = (&mut self.update, &mut self.reset, &mut self.candidate);
        [
            &mut z.w, &mut z.u, &mut z.b, &mut r.w, &mut r.u, &mut r.b, &mut h.w, &mut h.u,
            &mut h.b,
        ]
    }

    fn check_shapes(&self) -> Result<()> {
        let (i, h) = (self.input_dim, self.hidden_dim);
        for gate in [&self.update, &self.reset, &self.candidate] {
            for (len, want) in [(gate.w.len(), h * i), (gate.u.len(), h * h), (gate.b.len(), h)] {
                if len != want {
                    return Err(Error::ShapeMismatch {
                        expected: want,
                        got: len,
                    });
                }
            }
        }
        Ok(())
    }
}

/// All encoder weights. Also used as the container for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    layers: Vec<GruLayerParams>,
}

impl EncoderParams {
    pub fn new(layers: Vec<GruLayerParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("encoder needs at least one layer".into()));
        }
        for layer in &layers {
            layer.check_shapes()?;
        }
        for pair in layers.windows(2) {
            if pair[1].input_dim != pair[0].hidden_dim {
                return Err(Error::ShapeMismatch {
                    expected: pair[0].hidden_dim,
                    got: pair[1].input_dim,
                });
            }
        }
        Ok(EncoderParams { layers })
    }

    pub fn zeros(layer_dims: &[usize], input_dim: usize) -> Result<Self> {
        let mut prev = input_dim;
        let layers = layer_dims
            .iter()
            .map(|&h| {
                let l = GruLayerParams::zeros(prev, h);
                prev = h;
                l
            })
            .collect();
        EncoderParams::new(layers)
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| GruLayerParams::zeros(l.input_dim, l.hidden_dim))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[GruLayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GruLayerParams] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].hidden_dim
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.hidden_dim).collect()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.slices()).collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.slices_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.slices().into_iter().flatten())
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(&mut f);
        }
    }

    /// `self += other`. Shapes must agree.
    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(|x| *x *= factor);
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

/// Glorot-uniform weights (`s = sqrt(6 / (fan_in + fan_out))`), zero biases.
pub fn init_params(layer_dims: &[usize], input_dim: usize, seed: u64) -> Result<EncoderParams> {
    if input_dim == 0 || layer_dims.contains(&0) {
        return Err(Error::InvalidConfig("layer dims must be at least 1".into()));
    }
    let mut params = EncoderParams::zeros(layer_dims, input_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in params.layers_mut() {
        let (i, h) = (layer.input_dim as f64, layer.hidden_dim as f64);
        let sw = (6.0 / (i + h)).sqrt();
        let su = (6.0 / (h + h)).sqrt();
        for gate in [&mut layer.update, &mut layer.reset, &mut layer.candidate] {
            gate.w.iter_mut().for_each(|x| *x = rng.gen_range(-sw..=sw));
            gate.u.iter_mut().for_each(|x| *x = rng.gen_range(-su..=su));
        }
    }
    Ok(params)
}

// four independent partial sums so the loop is not one serial add chain
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in a4.zip(b4) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

// out += M v, M is rows x cols row-major
fn matvec_add(out: &mut [f64], m: &[f64], v: &[f64]) {
    let cols = v.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += dot(row, v);
    }
}

// out += M^T v
fn matvec_t_add(out: &mut [f64], m: &[f64], v: &[f64]) {
    let cols = out.len();
    for (vi, row) in v.iter().zip(m.chunks_exact(cols)) {
        if *vi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += vi * a;
        }
    }
}

// M += a b^T
fn outer_add(m: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (ai, row) in a.iter().zip(m.chunks_exact_mut(cols)) {
        if *ai == 0.0 {
            continue;
        }
        for (x, bj) in row.iter_mut().zip(b) {
            *x += ai * bj;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations of one cell step, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

pub fn gru_cell_forward(x: &[f64], h_prev: &[f64], p: &GruLayerParams) -> Result<(Vec<f64>, StepRecord)> {
    if x.len() != p.input_dim {
        return Err(Error::ShapeMismatch {
            expected: p.input_dim,
            got: x.len(),
        });
    }
    if h_prev.len() != p.hidden_dim {
        return Err(Error::ShapeMismatch {
            expected: p.hidden_dim,
            got: h_prev.len(),
        });
    }
    let step = cell_step(x, h_prev, p);
    Ok((step.h.clone(), step))
}

fn cell_step(x: &[f64], h_prev: &[f64], p: &GruLayerParams) -> StepRecord {
    let (z_gate, r_gate, c_gate) = (&p.update, &p.reset, &p.candidate);

    let mut z = z_gate.b.clone();
    matvec_add(&mut z, &z_gate.w, x);
    matvec_add(&mut z, &z_gate.u, h_prev);
    z.iter_mut().for_each(|v| *v = sigmoid(*v));

    let mut r = r_gate.b.clone();
    matvec_add(&mut r, &r_gate.w, x);
    matvec_add(&mut r, &r_gate.u, h_prev);
    r.iter_mut().for_each(|v| *v = sigmoid(*v));

    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let mut c = c_gate.b.clone();
    matvec_add(&mut c, &c_gate.w, x);
    matvec_add(&mut c, &c_gate.u, &rh);
    c.iter_mut().for_each(|v| *v = v.tanh());

    let h = z
        .iter()
        .zip(h_prev)
        .zip(&c)
        .map(|((zi, hp), ci)| (1.0 - zi) * hp + zi * ci)
        .collect();

    StepRecord {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        z,
        r,
        c,
        h,
    }
}

/// Backpropagates `dh` through one step.
///
/// Parameter gradients are accumulated into `grads`; `dx` and `dh_prev` are
/// accumulated (not overwritten). `dx` may be empty to skip the input gradient.
pub fn gru_cell_backward(
    step: &StepRecord,
    dh: &[f64],
    p: &GruLayerParams,
    grads: &mut GruLayerParams,
    dx: &mut [f64],
    dh_prev: &mut [f64],
) {
    let n = p.hidden_dim;
    let mut da_z = vec![0.0; n];
    let mut da_c = vec![0.0; n];
    for i in 0..n {
        let (z, c, hp) = (step.z[i], step.c[i], step.h_prev[i]);
        da_z[i] = dh[i] * (c - hp) * z * (1.0 - z);
        da_c[i] = dh[i] * z * (1.0 - c * c);
        dh_prev[i] += dh[i] * (1.0 - z);
    }

    // candidate gate
    let rh: Vec<f64> = step.r.iter().zip(&step.h_prev).map(|(a, b)| a * b).collect();
    outer_add(&mut grads.candidate.w, &da_c, &step.x);
    outer_add(&mut grads.candidate.u, &da_c, &rh);
    grads.candidate.b.iter_mut().zip(&da_c).for_each(|(g, d)| *g += d);
    let mut d_rh = vec![0.0; n];
    matvec_t_add(&mut d_rh, &p.candidate.u, &da_c);

    let mut da_r = vec![0.0; n];
    for i in 0..n {
        let r = step.r[i];
        da_r[i] = d_rh[i] * step.h_prev[i] * r * (1.0 - r);
        dh_prev[i] += d_rh[i] * r;
    }

    outer_add(&mut grads.update.w, &da_z, &step.x);
    outer_add(&mut grads.update.u, &da_z, &step.h_prev);
    grads.update.b.iter_mut().zip(&da_z).for_each(|(g, d)| *g += d);
    outer_add(&mut grads.reset.w, &da_r, &step.x);
    outer_add(&mut grads.reset.u, &da_r, &step.h_prev);
    grads.reset.b.iter_mut().zip(&da_r).for_each(|(g, d)| *g += d);

    matvec_t_add(dh_prev, &p.update.u, &da_z);
    matvec_t_add(dh_prev, &p.reset.u, &da_r);

    if !dx.is_empty() {
        matvec_t_add(dx, &p.candidate.w, &da_c);
        matvec_t_add(dx, &p.update.w, &da_z);
        matvec_t_add(dx, &p.reset.w, &da_r);
    }
}

/// Per-layer step records of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    layers: Vec<Vec<StepRecord>>,
}

impl ForwardTape {
    pub fn steps(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn layer(&self, i: usize) -> &[StepRecord] {
        &self.layers[i]
    }
}

fn check_input(enc: &NameEncoding, params: &EncoderParams) -> Result<()> {
    if enc.dim() != params.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: params.input_dim(),
            got: enc.dim(),
        });
    }
    if enc.valid_len() == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(())
}

pub fn encoder_forward(enc: &NameEncoding, params: &EncoderParams) -> Result<(EmbeddingVector, ForwardTape)> {
    check_input(enc, params)?;
    let mut tape = Vec::with_capacity(params.layers.len());
    for (li, layer) in params.layers.iter().enumerate() {
        let mut h = vec![0.0; layer.hidden_dim];
        let mut steps = Vec::with_capacity(enc.valid_len());
        for t in 0..enc.valid_len() {
            let x = if li == 0 {
                enc.row(t)
            } else {
                tape_output(&tape, li - 1, t)
            };
            let step = cell_step(x, &h, layer);
            h.clone_from(&step.h);
            steps.push(step);
        }
        tape.push(steps);
    }
    let last = &tape[tape.len() - 1];
    let out = last[last.len() - 1].h.clone();
    Ok((EmbeddingVector(out), ForwardTape { layers: tape }))
}

fn tape_output(tape: &[Vec<StepRecord>], layer: usize, t: usize) -> &[f64] {
    &tape[layer][t].h
}

/// Forward pass without keeping activations.
pub fn embed(enc: &NameEncoding, params: &EncoderParams) -> Result<EmbeddingVector> {
    check_input(enc, params)?;
    let mut seq: Vec<Vec<f64>> = (0..enc.valid_len()).map(|t| enc.row(t).to_vec()).collect();
    for layer in &params.layers {
        let mut h = vec![0.0; layer.hidden_dim];
        for x in seq.iter_mut() {
            h = cell_step(x, &h, layer).h;
            x.clone_from(&h);
        }
    }
    Ok(EmbeddingVector(seq.pop().expect("valid_len >= 1")))
}

/// Gradients of `grad_embedding . embedding` with respect to every parameter.
pub fn encoder_backward(tape: &ForwardTape, grad_embedding: &[f64], params: &EncoderParams) -> Result<EncoderParams> {
    let mut grads = params.zeros_like();
    encoder_backward_into(tape, grad_embedding, params, &mut grads)?;
    Ok(grads)
}

/// Like [`encoder_backward`] but accumulates into `grads`.
pub fn encoder_backward_into(
    tape: &ForwardTape,
    grad_embedding: &[f64],
    params: &EncoderParams,
    grads: &mut EncoderParams,
) -> Result<()> {
    if grad_embedding.len() != params.output_dim() {
        return Err(Error::ShapeMismatch {
            expected: params.output_dim(),
            got: grad_embedding.len(),
        });
    }
    if tape.layers.len() != params.layers.len() {
        return Err(Error::ShapeMismatch {
            expected: params.layers.len(),
            got: tape.layers.len(),
        });
    }
    let steps = tape.steps();
    let top = params.output_dim();
    // gradient arriving at each step's output of the current layer
    let mut d_out = vec![vec![0.0; top]; steps];
    d_out[steps - 1].copy_from_slice(grad_embedding);

    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let mut d_in = if li > 0 {
            vec![vec![0.0; layer.input_dim]; steps]
        } else {
            vec![Vec::new(); steps]
        };
        let mut carry = vec![0.0; layer.hidden_dim];
        for t in (0..steps).rev() {
            let dh: Vec<f64> = d_out[t].iter().zip(&carry).map(|(a, b)| a + b).collect();
            let mut dh_prev = vec![0.0; layer.hidden_dim];
            gru_cell_backward(&tape.layers[li][t], &dh, layer, &mut grads.layers[li], &mut d_in[t], &mut dh_prev);
            carry = dh_prev;
        }
        d_out = d_in;
    }
    Ok(())
}

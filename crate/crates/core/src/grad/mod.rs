//! Reverse-mode gradients of the column pipeline, a central-difference
//! oracle, and Adam.
//!
//! A column's backward pass produces a [`ColumnGrad`]: per-layer output
//! deltas plus the layer inputs from its trace. Committing one adds the outer
//! products into a shared [`Gradients`]; commits happen in raster order so the
//! accumulated result does not depend on how columns were scheduled. The
//! query gradient's trigger prefix is summed over all columns and pushed
//! through the convolution once per pass.

pub mod check;

use std::ops::{Deref, DerefMut};

use crate::encoder::{conv_backward, EncoderConfig};
use crate::error::{Error, Result};
use crate::net::{linear_flops, ApmParams, ForwardTrace, Linear, RgbTrace};
use crate::profiler::counter;
use crate::tensor::{matvec_transposed, outer_accumulate, Tensor};

/// One tensor per parameter tensor, same shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub ApmParams);

impl Gradients {
    pub fn zeros_like(params: &ApmParams) -> Self {
        Gradients(params.zeros_like())
    }

    pub fn into_inner(self) -> ApmParams {
        self.0
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .tensors()
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Deref for Gradients {
    type Target = ApmParams;
    fn deref(&self) -> &ApmParams {
        &self.0
    }
}

impl DerefMut for Gradients {
    fn deref_mut(&mut self) -> &mut ApmParams {
        &mut self.0
    }
}

/// `total += delta`, tensor by tensor.
pub fn accumulate(total: &mut Gradients, delta: &Gradients) -> Result<()> {
    if !total.congruent(delta) {
        return Err(Error::Config(
            "gradient sets have different layouts".into(),
        ));
    }
    for (t, d) in total.0.tensors_mut().into_iter().zip(delta.0.tensors()) {
        t.add_assign(d)?;
    }
    Ok(())
}

/// Backward result of one fired column, not yet added to a gradient set.
#[derive(Debug)]
pub struct ColumnGrad {
    trace: ForwardTrace,
    rgb_trace: Option<RgbTrace>,
    head_delta: Option<Vec<f64>>,
    decoder_deltas: Vec<Vec<f64>>,
    rgb_deltas: Vec<Vec<f64>>,
    d_query: Vec<f64>,
}

impl ColumnGrad {
    /// Gradient with respect to the whole query `(T | p_ij [| patch])`.
    pub fn d_query(&self) -> &[f64] {
        &self.d_query
    }

    pub fn trace(&self) -> &ForwardTrace {
        &self.trace
    }

    /// Adds this column's weight and bias gradients into `total` (the
    /// convolution kernel is handled separately through the trigger prefix).
    pub fn commit(&self, total: &mut Gradients) {
        for (l, delta) in self.decoder_deltas.iter().enumerate() {
            add_layer(&mut total.0.decoder[l], delta, &self.trace.inputs[l]);
        }
        if let Some(delta) = &self.head_delta {
            let trunk = self.trace.inputs.last().expect("trace");
            add_layer(&mut total.0.feature_head, delta, trunk);
        }
        if let Some(rt) = &self.rgb_trace {
            for (l, delta) in self.rgb_deltas.iter().enumerate() {
                add_layer(&mut total.0.rgb_head[l], delta, &rt.inputs[l]);
            }
        }
    }
}

fn add_layer(layer: &mut Linear, delta: &[f64], input: &[f64]) {
    outer_accumulate(layer.weight.data_mut(), delta, input);
    for (b, d) in layer.bias.data_mut().iter_mut().zip(delta) {
        *b += d;
    }
}

fn linear_backward(layer: &Linear, delta: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; layer.in_dim()];
    matvec_transposed(
        layer.weight.data(),
        layer.out_dim(),
        layer.in_dim(),
        delta,
        &mut dx,
    );
    counter::charge(2 * linear_flops(layer.in_dim(), layer.out_dim()));
    dx
}

fn relu_backward(dh: &[f64], pre: &[f64]) -> Vec<f64> {
    counter::charge(2 * pre.len() as u64);
    dh.iter()
        .zip(pre)
        .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
        .collect()
}

/// Backpropagates `feature_upstream = ∂L/∂f_ij` and, optionally,
/// `∂L/∂rgb_ij` through one column.
pub fn backprop_column(
    params: &ApmParams,
    trace: ForwardTrace,
    feature_upstream: Option<&[f64]>,
    rgb: Option<(RgbTrace, &[f64])>,
) -> Result<ColumnGrad> {
    if trace.depth() != params.decoder.len() + 1 {
        return Err(Error::Config(format!(
            "trace depth {} does not match {} layers",
            trace.depth(),
            params.decoder.len() + 1
        )));
    }
    let trunk_width = params.feature_head.in_dim();
    let query_len = trace.query().len();
    let mut d_trunk = vec![0.0; trunk_width];

    let head_delta = match feature_upstream {
        Some(up) => {
            if up.len() != params.feature_head.out_dim() {
                return Err(Error::dim(
                    "backward_column",
                    &[up.len()],
                    &[params.feature_head.out_dim()],
                ));
            }
            d_trunk = linear_backward(&params.feature_head, up);
            Some(up.to_vec())
        }
        None => None,
    };

    let mut rgb_deltas = Vec::new();
    let mut d_query_rgb = None;
    let rgb_trace = match rgb {
        Some((rt, up)) => {
            if up.len() != rt.output.len() {
                return Err(Error::dim("backward_rgb", &[up.len()], &[rt.output.len()]));
            }
            counter::charge(2 * up.len() as u64);
            let mut delta: Vec<f64> = up
                .iter()
                .zip(&rt.output)
                .map(|(u, s)| u * s * (1.0 - s))
                .collect();
            let n = params.rgb_head.len();
            let mut deltas = vec![Vec::new(); n];
            for l in (0..n).rev() {
                let dx = linear_backward(&params.rgb_head[l], &delta);
                deltas[l] = std::mem::take(&mut delta);
                if l > 0 {
                    delta = relu_backward(&dx, &rt.pre[l - 1]);
                } else {
                    let (dq, dt) = dx.split_at(query_len);
                    for (a, b) in d_trunk.iter_mut().zip(dt) {
                        *a += b;
                    }
                    d_query_rgb = Some(dq.to_vec());
                }
            }
            rgb_deltas = deltas;
            Some(rt)
        }
        None => None,
    };

    let n = params.decoder.len();
    let mut decoder_deltas = vec![Vec::new(); n];
    let mut dh = d_trunk;
    for l in (0..n).rev() {
        let delta = relu_backward(&dh, &trace.pre[l]);
        dh = linear_backward(&params.decoder[l], &delta);
        decoder_deltas[l] = delta;
    }
    if let Some(extra) = d_query_rgb {
        for (a, b) in dh.iter_mut().zip(extra) {
            *a += b;
        }
    }

    Ok(ColumnGrad {
        trace,
        rgb_trace,
        head_delta,
        decoder_deltas,
        rgb_deltas,
        d_query: dh,
    })
}

/// Full gradient of `⟨upstream, f_ij⟩` for one column, convolution kernel
/// included (through the trigger prefix of the query).
///
/// `image` is the (normalised) image the trigger column was encoded from.
pub fn backward_column(
    params: &ApmParams,
    trace: ForwardTrace,
    upstream: &Tensor,
    image: &Tensor,
    cfg: &EncoderConfig,
) -> Result<Gradients> {
    let col = backprop_column(params, trace, Some(upstream.data()), None)?;
    let mut total = Gradients::zeros_like(params);
    col.commit(&mut total);
    total.conv_kernel = conv_backward(image, &col.d_query()[..cfg.trigger_dim()], cfg)?;
    Ok(total)
}

/// Central differences `(L(θ + εe) − L(θ − εe)) / 2ε`, one scalar at a time.
pub fn finite_difference(
    mut loss: impl FnMut(&ApmParams) -> f64,
    params: &ApmParams,
    eps: f64,
) -> Gradients {
    assert!(eps > 0.0, "finite_difference: eps must be positive");
    let mut probe = params.clone();
    let mut grads = Gradients::zeros_like(params);
    let count = params.num_tensors();
    for t in 0..count {
        let len = params.tensors()[t].len();
        for idx in 0..len {
            let original = probe.tensors()[t].data()[idx];
            probe.tensors_mut()[t].data_mut()[idx] = original + eps;
            let plus = loss(&probe);
            probe.tensors_mut()[t].data_mut()[idx] = original - eps;
            let minus = loss(&probe);
            probe.tensors_mut()[t].data_mut()[idx] = original;
            grads.0.tensors_mut()[t].data_mut()[idx] = (plus - minus) / (2.0 * eps);
        }
    }
    grads
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ApmParams,
    pub v: ApmParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ApmParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }

    pub fn round_to_f32(&mut self) {
        self.m.round_to_f32();
        self.v.round_to_f32();
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort the step
/// before anything is modified.
pub fn adam_step(
    params: &mut ApmParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    if !params.congruent(grads) || !params.congruent(&state.m) {
        return Err(Error::Config("optimizer state does not match parameters".into()));
    }
    for (name, g) in grads.names().into_iter().zip(grads.tensors()) {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { tensor: name });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - libm::pow(b1, t);
    let c2 = 1.0 - libm::pow(b2, t);
    let params_t = params.tensors_mut();
    let m_t = state.m.tensors_mut();
    let v_t = state.v.tensors_mut();
    for (((p, g), m), v) in params_t.into_iter().zip(grads.tensors()).zip(m_t).zip(v_t) {
        for (((pv, gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

//! The shared column decoder: an MLP trunk, a linear feature-projection head
//! and an optional RGB head fed by `(T_ij | trunk output)`.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, LocationQuery, PositionalField, QuerySource, TriggerColumn};
use crate::error::{Error, Result};
use crate::profiler::counter;
use crate::tensor::{gaussian, matvec, sigmoid, SeededRng, Tensor};

pub const INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub decoder_widths: Vec<usize>,
    pub feature_dim: usize,
    /// Hidden widths of the RGB head; `None` builds no RGB head.
    #[serde(default)]
    pub rgb_hidden_widths: Option<Vec<usize>>,
}

pub const RGB_OUTPUT: usize = 3;

impl ArchSpec {
    pub fn trunk_width(&self) -> usize {
        *self.decoder_widths.last().unwrap_or(&self.input_dim)
    }

    pub fn rgb_input_dim(&self) -> usize {
        self.input_dim + self.trunk_width()
    }

    /// `(in, out)` of every decoder layer followed by the feature head.
    pub fn feature_layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.decoder_widths.len() + 1);
        let mut prev = self.input_dim;
        for &w in &self.decoder_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.feature_dim));
        dims
    }

    pub fn rgb_layers(&self) -> Vec<(usize, usize)> {
        let Some(hidden) = &self.rgb_hidden_widths else {
            return Vec::new();
        };
        let mut dims = Vec::with_capacity(hidden.len() + 1);
        let mut prev = self.rgb_input_dim();
        for &w in hidden {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, RGB_OUTPUT));
        dims
    }

    pub fn has_rgb_head(&self) -> bool {
        self.rgb_hidden_widths.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_widths.is_empty() {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.input_dim == 0 || self.feature_dim == 0 || self.decoder_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if let Some(h) = &self.rgb_hidden_widths {
            if h.contains(&0) {
                return Err(Error::Config("RGB head widths must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Encoder plus decoder: everything needed to build an [`ApmParams`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub arch: ArchSpec,
}

impl ModelSpec {
    /// Desk-scale feature model: 3×32×32 input, one 4×4 kernel, `d = 64`,
    /// `d_p = 32`, trunk `[128, 128, 128, 64, 32]`, `d_c = 16`.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                height: 32,
                width: 32,
                channels: 3,
                kernel_size: 4,
                stride: 4,
                num_kernels: 1,
                positional_dim: 32,
                patch_injection: false,
                grid: None,
            },
            arch: ArchSpec {
                input_dim: 96,
                decoder_widths: vec![128, 128, 128, 64, 32],
                feature_dim: 16,
                rgb_hidden_widths: None,
            },
        }
    }

    /// Desk-scale reconstruction model: three 8×8 kernels (one per colour
    /// channel at least), queries fired at full pixel resolution, and an RGB
    /// head `[64, 64]`.
    pub fn desk_rgb() -> Self {
        let encoder = EncoderConfig {
            height: 32,
            width: 32,
            channels: 3,
            kernel_size: 8,
            stride: 8,
            num_kernels: 3,
            positional_dim: 32,
            patch_injection: false,
            grid: Some((32, 32)),
        };
        Self {
            arch: ArchSpec {
                input_dim: encoder.query_dim(),
                decoder_widths: vec![128, 128, 128, 64, 32],
                feature_dim: 16,
                rgb_hidden_widths: Some(vec![64, 64]),
            },
            encoder,
        }
    }

    /// Full-size layout: 448×448 crops, stride 16, trunk
    /// `[4096, 4096, 4096, 2048, 1024]`, `d_c = d_p = 768`.
    pub fn full_scale() -> Self {
        let encoder = EncoderConfig {
            height: 448,
            width: 448,
            channels: 3,
            kernel_size: 16,
            stride: 16,
            num_kernels: 1,
            positional_dim: 768,
            patch_injection: false,
            grid: None,
        };
        Self {
            arch: ArchSpec {
                input_dim: encoder.query_dim(),
                decoder_widths: vec![4096, 4096, 4096, 2048, 1024],
                feature_dim: 768,
                rgb_hidden_widths: Some(vec![256, 256]),
            },
            encoder,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "desk-rgb" => Some(Self::desk_rgb()),
            "full" => Some(Self::full_scale()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.arch.validate()?;
        if self.arch.input_dim != self.encoder.query_dim() {
            return Err(Error::Config(format!(
                "decoder input {} does not match query dimension {}",
                self.arch.input_dim,
                self.encoder.query_dim()
            )));
        }
        Ok(())
    }

    /// Parameter count including the convolution kernel.
    pub fn count_params(&self) -> usize {
        self.encoder.kernel_shape().iter().product::<usize>() + count_params(&self.arch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out × in`, row-major.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `W x + b`, bias added after the ascending-order dot product.
    pub(crate) fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (o, i) = (self.out_dim(), self.in_dim());
        let mut z = vec![0.0; o];
        matvec(self.weight.data(), o, i, x, &mut z);
        for (zv, b) in z.iter_mut().zip(self.bias.data()) {
            *zv += b;
        }
        counter::charge(linear_flops(i, o));
        z
    }
}

pub(crate) fn linear_flops(input: usize, output: usize) -> u64 {
    (2 * input * output + output) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApmParams {
    pub conv_kernel: Tensor,
    pub decoder: Vec<Linear>,
    pub feature_head: Linear,
    pub rgb_head: Vec<Linear>,
}

impl ApmParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let mk = |dims: Vec<(usize, usize)>| -> Vec<Linear> {
            dims.into_iter().map(|(i, o)| Linear::zeros(i, o)).collect()
        };
        let mut layers = mk(spec.arch.feature_layers());
        let feature_head = layers.pop().expect("feature head");
        Self {
            conv_kernel: Tensor::zeros(&spec.encoder.kernel_shape()),
            decoder: layers,
            feature_head,
            rgb_head: mk(spec.arch.rgb_layers()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|t| t.fill(0.0));
        z
    }

    /// Stable tensor names, in the order used everywhere (init, checkpoints,
    /// optimizer state).
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["conv.kernel".to_string()];
        for i in 0..self.decoder.len() {
            names.push(format!("decoder.{i}.weight"));
            names.push(format!("decoder.{i}.bias"));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        for i in 0..self.rgb_head.len() {
            names.push(format!("rgb.{i}.weight"));
            names.push(format!("rgb.{i}.bias"));
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.conv_kernel];
        for l in &self.decoder {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.feature_head.weight);
        out.push(&self.feature_head.bias);
        for l in &self.rgb_head {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.conv_kernel];
        for l in &mut self.decoder {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.feature_head.weight);
        out.push(&mut self.feature_head.bias);
        for l in &mut self.rgb_head {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        for t in self.tensors_mut() {
            f(t);
        }
    }

    pub fn num_tensors(&self) -> usize {
        2 + 2 * (self.decoder.len() + 1 + self.rgb_head.len()) - 1
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Do this parameter set's shapes agree with `other`'s?
    pub fn congruent(&self, other: &ApmParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    /// Whether the layer shapes agree with `spec`.
    pub fn matches(&self, spec: &ModelSpec) -> bool {
        self.congruent(&ApmParams::zeros(spec))
    }

    pub fn round_to_f32(&mut self) {
        self.for_each_mut(Tensor::round_to_f32);
    }
}

/// Every weight and bias drawn i.i.d. from `N(0, 0.01²)`, tensor by tensor in
/// [`ApmParams::names`] order from one stream seeded with `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ApmParams {
    let mut params = ApmParams::zeros(spec);
    let mut rng = SeededRng::new(seed);
    params.for_each_mut(|t| {
        let draw = gaussian(&mut rng, t.len(), 0.0, INIT_STD);
        t.data_mut().copy_from_slice(draw.data());
    });
    params
}

/// Exact number of weight and bias scalars in the decoder and heads.
pub fn count_params(arch: &ArchSpec) -> usize {
    arch.feature_layers()
        .into_iter()
        .chain(arch.rgb_layers())
        .map(|(i, o)| i * o + o)
        .sum()
}

/// Cached activations of one column's pass through the trunk and feature head.
#[derive(Debug)]
pub struct ForwardTrace {
    /// Inputs of every layer: the query, then each hidden activation; the last
    /// entry is the trunk output fed to both heads.
    pub(crate) inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pub(crate) pre: Vec<Vec<f64>>,
    pub(crate) feature: Vec<f64>,
    floats: usize,
}

impl ForwardTrace {
    fn new(inputs: Vec<Vec<f64>>, pre: Vec<Vec<f64>>, feature: Vec<f64>) -> Self {
        let floats = inputs.iter().chain(&pre).map(Vec::len).sum::<usize>() + feature.len();
        counter::trace_alloc(floats);
        Self {
            inputs,
            pre,
            feature,
            floats,
        }
    }

    /// Number of layers traced (decoder layers plus the feature head).
    pub fn depth(&self) -> usize {
        self.pre.len() + 1
    }

    pub fn query(&self) -> &[f64] {
        &self.inputs[0]
    }

    pub fn trunk_output(&self) -> Tensor {
        Tensor::vector(self.inputs.last().expect("trace").clone())
    }

    pub fn feature(&self) -> Tensor {
        Tensor::vector(self.feature.clone())
    }

    /// Recomputes the feature from the cached activations.
    pub fn replay(&self, params: &ApmParams) -> Tensor {
        Tensor::vector(params.feature_head.forward(self.inputs.last().expect("trace")))
    }

    /// Smallest `|z|` over the hidden pre-activations.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.pre
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    pub fn floats(&self) -> usize {
        self.floats
    }
}

impl Drop for ForwardTrace {
    fn drop(&mut self) {
        counter::trace_free(self.floats);
    }
}

/// Cached activations of the RGB head for one column.
#[derive(Debug)]
pub struct RgbTrace {
    pub(crate) inputs: Vec<Vec<f64>>,
    pub(crate) pre: Vec<Vec<f64>>,
    pub(crate) output: Vec<f64>,
    floats: usize,
}

impl RgbTrace {
    pub fn output(&self) -> Tensor {
        Tensor::vector(self.output.clone())
    }

    pub fn min_abs_preactivation(&self) -> f64 {
        self.pre
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

impl Drop for RgbTrace {
    fn drop(&mut self) {
        counter::trace_free(self.floats);
    }
}

pub(crate) fn relu_in_place(z: &[f64]) -> Vec<f64> {
    counter::charge(z.len() as u64);
    z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Runs the hidden stack of `layers` (ReLU after each) and the final linear
/// layer (no activation), recording a trace.
fn run_stack(layers: &[&Linear], x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let (last, hidden) = layers.split_last().expect("at least one layer");
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(hidden.len());
    let mut cur = x.to_vec();
    for layer in hidden {
        let z = layer.forward(&cur);
        let h = relu_in_place(&z);
        inputs.push(cur);
        pre.push(z);
        cur = h;
    }
    let out = last.forward(&cur);
    inputs.push(cur);
    (inputs, pre, out)
}

pub(crate) fn forward_values(params: &ApmParams, q: &[f64]) -> Result<(Tensor, ForwardTrace)> {
    let expected = params.decoder.first().map_or(0, Linear::in_dim);
    if q.len() != expected {
        return Err(Error::dim("forward_column", &[q.len()], &[expected]));
    }
    let mut layers: Vec<&Linear> = params.decoder.iter().collect();
    layers.push(&params.feature_head);
    let (inputs, pre, feature) = run_stack(&layers, q);
    let trace = ForwardTrace::new(inputs, pre, feature);
    Ok((trace.feature(), trace))
}

/// Fires one location query: `f_ij = head(MLP(q))`.
pub fn forward_column(params: &ApmParams, q: &LocationQuery) -> Result<(Tensor, ForwardTrace)> {
    forward_values(params, q.values().data())
}

pub(crate) fn rgb_values(params: &ApmParams, q: &[f64], trunk: &[f64]) -> Result<(Tensor, RgbTrace)> {
    let first = params
        .rgb_head
        .first()
        .ok_or_else(|| Error::Config("model has no RGB head".into()))?;
    if q.len() + trunk.len() != first.in_dim() {
        return Err(Error::dim(
            "rgb_column",
            &[q.len() + trunk.len()],
            &[first.in_dim()],
        ));
    }
    let mut x = Vec::with_capacity(first.in_dim());
    x.extend_from_slice(q);
    x.extend_from_slice(trunk);
    let layers: Vec<&Linear> = params.rgb_head.iter().collect();
    let (inputs, pre, logits) = run_stack(&layers, &x);
    counter::charge(logits.len() as u64);
    let output: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();
    let floats = inputs.iter().chain(&pre).map(Vec::len).sum::<usize>() + output.len();
    counter::trace_alloc(floats);
    let trace = RgbTrace {
        inputs,
        pre,
        output,
        floats,
    };
    Ok((trace.output(), trace))
}

/// RGB head on the skip-connected input `(q | trunk)`, squashed to `(0, 1)`.
///
/// `trunk` is the decoder output the feature head reads from
/// ([`ForwardTrace::trunk_output`]).
pub fn rgb_column(params: &ApmParams, q: &LocationQuery, trunk: &Tensor) -> Result<Tensor> {
    rgb_values(params, q.values().data(), trunk.data()).map(|(rgb, _)| rgb)
}

/// Fires every cell of `field` in raster order and gathers an `H×W×d_c` grid.
pub fn forward_grid(params: &ApmParams, trigger: &TriggerColumn, field: &PositionalField) -> Result<Tensor> {
    let order: Vec<usize> = (0..field.height() * field.width()).collect();
    forward_grid_in_order(params, trigger, field, &order)
}

/// Gather-grid with an explicit firing order (a permutation, or any subset,
/// of raster indices). Cells that are not fired stay zero.
pub fn forward_grid_in_order(
    params: &ApmParams,
    trigger: &TriggerColumn,
    field: &PositionalField,
    order: &[usize],
) -> Result<Tensor> {
    let (h, w) = (field.height(), field.width());
    let dc = params.feature_head.out_dim();
    let mut grid = Tensor::zeros(&[h, w, dc]);
    for &idx in order {
        if idx >= h * w {
            return Err(Error::dim("forward_grid", &[idx], &[h * w]));
        }
        let (i, j) = (idx / w, idx % w);
        let p = Tensor::vector(field.row(i, j).to_vec());
        let q = LocationQuery::new(trigger, &p, (i, j), None);
        let (f, _) = forward_column(params, &q)?;
        grid.data_mut()[idx * dc..(idx + 1) * dc].copy_from_slice(f.data());
    }
    Ok(grid)
}

/// Feature grid over the configured query grid of `source`.
pub fn forward_source_grid(params: &ApmParams, source: &QuerySource<'_>) -> Result<Tensor> {
    let (h, w) = source.grid();
    let dc = params.feature_head.out_dim();
    let mut grid = Tensor::zeros(&[h, w, dc]);
    for (idx, q) in source.iter().enumerate() {
        let (f, _) = forward_column(params, &q)?;
        grid.data_mut()[idx * dc..(idx + 1) * dc].copy_from_slice(f.data());
    }
    Ok(grid)
}

//! Gradient check of one fired column against central differences.
//!
//! The loss is `⟨u, f_ij⟩` for a random upstream `u`, image and cell. The
//! check runs at He-scaled parameters (weights `N(0, 2/fan_in)`), where every
//! tensor's gradient is of order one; at the `N(0, 0.01²)` initialisation the
//! early-layer gradients sit below the roundoff floor of a central
//! difference. Points whose pre-activations come within `10·eps` of a ReLU
//! kink are rejected and redrawn.
//!
//! With the activation pattern fixed the loss is affine in any single
//! parameter, so central differences carry no truncation error and only
//! roundoff separates them from the analytic gradient.

use serde::Serialize;

use super::{backward_column, Gradients};
use crate::encoder::{encode_trigger, QuerySource};
use crate::error::{Error, Result};
use crate::net::{forward_values, relu_in_place, ApmParams, ModelSpec};
use crate::tensor::{dot, gaussian, SeededRng, Tensor};

pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_EPS: f64 = 1e-5;
const MAX_DRAWS: usize = 1000;

/// Everything that defines one column loss.
#[derive(Clone, Debug)]
pub struct CheckPoint {
    pub spec: ModelSpec,
    pub params: ApmParams,
    /// Network-space (already normalised) image.
    pub image: Tensor,
    pub cell: (usize, usize),
    pub upstream: Tensor,
}

fn he_scaled(spec: &ModelSpec, rng: &mut SeededRng) -> ApmParams {
    let mut p = ApmParams::zeros(spec);
    let enc = &spec.encoder;
    let conv_fan_in = enc.channels * enc.kernel_size * enc.kernel_size;
    let n = p.conv_kernel.len();
    p.conv_kernel
        .data_mut()
        .copy_from_slice(gaussian(rng, n, 0.0, (2.0 / conv_fan_in as f64).sqrt()).data());
    let layers = p
        .decoder
        .iter_mut()
        .chain(std::iter::once(&mut p.feature_head))
        .chain(p.rgb_head.iter_mut());
    for layer in layers {
        let std = (2.0 / layer.in_dim() as f64).sqrt();
        let n = layer.weight.len();
        layer.weight.data_mut().copy_from_slice(gaussian(rng, n, 0.0, std).data());
        let n = layer.bias.len();
        layer.bias.data_mut().copy_from_slice(gaussian(rng, n, 0.0, 0.1).data());
    }
    p
}

impl CheckPoint {
    /// Draws a kink-free check point for `seed`.
    pub fn draw(spec: &ModelSpec, seed: u64, eps: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::new(seed);
        let (gh, gw) = spec.encoder.grid();
        let image_shape = spec.encoder.image_shape();
        for _ in 0..MAX_DRAWS {
            let params = he_scaled(spec, &mut rng);
            let image = gaussian(&mut rng, image_shape.iter().product(), 0.0, 1.0).reshape(&image_shape)?;
            let cell = (rng.below(gh), rng.below(gw));
            let upstream = gaussian(&mut rng, spec.arch.feature_dim, 0.0, 1.0);
            let point = Self {
                spec: spec.clone(),
                params,
                image,
                cell,
                upstream,
            };
            let (_, trace) = forward_values(&point.params, &point.query(&point.params)?)?;
            if trace.min_abs_preactivation() >= 10.0 * eps {
                return Ok(point);
            }
        }
        Err(Error::Config(format!("no kink-free check point found for seed {seed}")))
    }

    fn query(&self, params: &ApmParams) -> Result<Vec<f64>> {
        let cfg = &self.spec.encoder;
        let trigger = encode_trigger(&self.image, &params.conv_kernel, cfg)?;
        let source = QuerySource::new(&trigger, cfg, &self.image);
        Ok(source.query(self.cell.0, self.cell.1).values().data().to_vec())
    }

    /// `⟨u, f_ij⟩` recomputed from scratch.
    pub fn loss(&self, params: &ApmParams) -> Result<f64> {
        let (f, _) = forward_values(params, &self.query(params)?)?;
        Ok(dot(self.upstream.data(), f.data()))
    }

    /// Reverse-mode gradient of the loss at `self.params`.
    pub fn analytic(&self) -> Result<Gradients> {
        let (_, trace) = forward_values(&self.params, &self.query(&self.params)?)?;
        backward_column(&self.params, trace, &self.upstream, &self.image, &self.spec.encoder)
    }

    /// Loss from layer `from` on, given that layer's (unperturbed) input.
    fn suffix_loss(&self, params: &ApmParams, from: usize, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        for layer in &params.decoder[from..] {
            cur = relu_in_place(&layer.forward(&cur));
        }
        dot(self.upstream.data(), &params.feature_head.forward(&cur))
    }

    /// Central differences over every parameter. Layers upstream of the
    /// perturbed one are reused from the unperturbed pass, which gives the
    /// same bits as recomputing them.
    pub fn numeric(&self, eps: f64) -> Result<Gradients> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {eps}")));
        }
        let (_, trace) = forward_values(&self.params, &self.query(&self.params)?)?;
        let inputs = trace.inputs.clone();
        drop(trace);
        let mut probe = self.params.clone();
        let mut out = Gradients::zeros_like(&self.params);
        let depth = self.params.decoder.len();
        // tensor order: conv, (weight, bias) per decoder layer, head, rgb
        for t in 0..self.params.num_tensors() {
            let layer = if t == 0 { None } else { Some((t - 1) / 2) };
            if matches!(layer, Some(l) if l > depth) {
                continue; // RGB head: not part of this loss
            }
            let len = self.params.tensors()[t].len();
            for idx in 0..len {
                let original = probe.tensors()[t].data()[idx];
                let mut eval = |v: f64| -> Result<f64> {
                    probe.tensors_mut()[t].data_mut()[idx] = v;
                    match layer {
                        None => self.loss(&probe),
                        Some(l) => Ok(self.suffix_loss(&probe, l, &inputs[l])),
                    }
                };
                let plus = eval(original + eps)?;
                let minus = eval(original - eps)?;
                probe.tensors_mut()[t].data_mut()[idx] = original;
                out.0.tensors_mut()[t].data_mut()[idx] = (plus - minus) / (2.0 * eps);
            }
        }
        Ok(out)
    }
}

/// Largest per-tensor error `max|a − n| / max(max|a|, max|n|)` and the
/// tensor it occurs in. Tensors whose gradients are identically zero on
/// both sides contribute zero.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for ((name, a), n) in analytic.names().into_iter().zip(analytic.tensors()).zip(numeric.tensors()) {
        let scale = a
            .data()
            .iter()
            .chain(n.data())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = a
            .data()
            .iter()
            .zip(n.data())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let rel = if diff == 0.0 { 0.0 } else { diff / scale };
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, name);
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub eps: f64,
    pub cell: (usize, usize),
    pub scalars: usize,
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

/// Runs the check for one seed; `tamper` may alter the analytic gradient
/// before comparison (used to confirm the detector fires).
pub fn gradient_check_with(
    spec: &ModelSpec,
    seed: u64,
    eps: f64,
    tamper: impl FnOnce(&mut Gradients),
) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let point = CheckPoint::draw(spec, seed, eps)?;
    let mut analytic = point.analytic()?;
    tamper(&mut analytic);
    let numeric = point.numeric(eps)?;
    let (max_relative_error, worst_tensor) = max_relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        seed,
        eps,
        cell: point.cell,
        scalars: spec.count_params() - rgb_scalars(&point.params),
        max_relative_error,
        worst_tensor,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

fn rgb_scalars(p: &ApmParams) -> usize {
    p.rgb_head.iter().map(|l| l.weight.len() + l.bias.len()).sum()
}

pub fn gradient_check(spec: &ModelSpec, seed: u64, eps: f64) -> Result<GradCheckReport> {
    gradient_check_with(spec, seed, eps, |_| {})
}

/// Perturbs one entry of the first decoder weight, for detector tests.
pub fn corrupt_gradient(g: &mut Gradients) {
    let w = g.0.decoder[0].weight.data_mut();
    let scale = w.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    w[0] += 1e-3 * scale;
}

//! Self-supervised distillation: regress every column onto a teacher's
//! feature grid and/or CLS token, and reconstruct RGB through the skip head.

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_trigger, interpolate_latents, EncoderConfig, QuerySource, TriggerColumn};
use crate::engine::{backward_pass, forward_pass, Fired, PassGradients, Upstream, Workers};
use crate::error::{Error, Result};
use crate::grad::{adam_step, backprop_column, AdamState, Gradients};
use crate::net::{forward_values, init_params, rgb_values, ApmParams, ModelSpec, RGB_OUTPUT};
use crate::teacher_io::normalize_image;
use crate::tensor::Tensor;

fn cellwise_mse(op: &'static str, pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.shape().len() != 3 {
        return Err(Error::dim(op, pred.shape(), target.shape()));
    }
    let d = pred.shape()[2];
    if d == 0 {
        return Ok(0.0);
    }
    let cells = pred.data().chunks_exact(d).zip(target.data().chunks_exact(d));
    Ok(cells
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / d as f64)
        .sum())
}

/// `Σ_ij MSE(pred_ij, target_ij)` over an `H×W×d_c` grid.
pub fn grid_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    cellwise_mse("grid_loss", pred, target)
}

/// `Σ_ij MSE(pred_ij, target_ij)` over `H×W×3` pixels in `[0, 1]`.
pub fn rgb_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape().last() != Some(&RGB_OUTPUT) {
        return Err(Error::dim("rgb_loss", pred.shape(), &[0, 0, RGB_OUTPUT]));
    }
    cellwise_mse("rgb_loss", pred, target)
}

/// Planar `c×h×w` to interleaved `h×w×c`.
pub fn planar_to_cells(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        other => return Err(Error::dim("planar_to_cells", other, &[0, 0, 0])),
    };
    let d = t.data();
    let mut out = Vec::with_capacity(d.len());
    for p in 0..h * w {
        for ch in 0..c {
            out.push(d[ch * h * w + p]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Interleaved `h×w×c` to planar `c×h×w`.
pub fn cells_to_planar(t: &Tensor) -> Result<Tensor> {
    let (h, w, c) = match t.shape() {
        [h, w, c] => (*h, *w, *c),
        other => return Err(Error::dim("cells_to_planar", other, &[0, 0, 0])),
    };
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for p in 0..h * w {
        for ch in 0..c {
            out[ch * h * w + p] = d[p * c + ch];
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// RGB target of every query cell: the pixel at the cell centre, `gh×gw×3`.
pub fn pixel_targets(pixels: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    if pixels.shape() != cfg.image_shape() || cfg.channels != RGB_OUTPUT {
        return Err(Error::dim("pixel_targets", pixels.shape(), &[RGB_OUTPUT, cfg.height, cfg.width]));
    }
    let (gh, gw) = cfg.grid();
    let (h, w) = (cfg.height, cfg.width);
    let d = pixels.data();
    let mut out = Vec::with_capacity(gh * gw * 3);
    for i in 0..gh {
        let y = (2 * i + 1) * h / (2 * gh);
        for j in 0..gw {
            let x = (2 * j + 1) * w / (2 * gw);
            for c in 0..3 {
                out.push(d[(c * h + y) * w + x]);
            }
        }
    }
    Tensor::new(vec![gh, gw, 3], out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One Adam step per image on the raster-ordered sum over columns.
    #[default]
    PerImage,
    /// One Adam step after every column.
    PerColumn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub w_grid: f64,
    pub w_rgb: f64,
    pub w_cls: f64,
    pub granularity: Granularity,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 1e-4,
            seed: 42,
            w_grid: 1.0,
            w_rgb: 1.0,
            w_cls: 1.0,
            granularity: Granularity::PerImage,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_grid, self.w_rgb, self.w_cls];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("loss weights must be non-negative with at least one positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// `[0, 1]` pixels, `c×h×w`.
    pub image: Tensor,
    /// Teacher feature grid, `gh×gw×d_c`.
    pub grid: Option<Tensor>,
    /// Teacher CLS token, `d_c` values.
    pub cls: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ApmParams,
    pub adam: AdamState,
    /// Adam steps taken.
    pub step: u64,
}

impl TrainState {
    pub fn fresh(spec: &ModelSpec, seed: u64) -> Self {
        let params = init_params(spec, seed);
        let adam = AdamState::new(&params);
        Self { params, adam, step: 0 }
    }

    /// Rounds everything to the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        self.params.round_to_f32();
        self.adam.round_to_f32();
    }
}

/// Unweighted component losses of one sample and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SampleLoss {
    pub step: u64,
    pub grid: f64,
    pub rgb: f64,
    pub cls: f64,
    pub total: f64,
}

/// Per-column loss terms, before weighting.
#[derive(Clone, Copy, Default)]
struct Terms {
    grid: f64,
    rgb: f64,
}

pub struct Trainer<'a> {
    spec: ModelSpec,
    cfg: TrainConfig,
    data: &'a [TrainSample],
    pixel_targets: Vec<Option<Tensor>>,
    state: TrainState,
    workers: Workers,
}

impl<'a> Trainer<'a> {
    pub fn new(spec: &ModelSpec, cfg: &TrainConfig, data: &'a [TrainSample]) -> Result<Self> {
        Self::resume(spec, cfg, data, TrainState::fresh(spec, cfg.seed))
    }

    pub fn resume(spec: &ModelSpec, cfg: &TrainConfig, data: &'a [TrainSample], state: TrainState) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if !state.params.matches(spec) {
            return Err(Error::IncompatibleCheckpoint("parameters do not match the architecture".into()));
        }
        let enc = &spec.encoder;
        let (gh, gw) = enc.grid();
        let dc = spec.arch.feature_dim;
        let use_rgb = cfg.w_rgb > 0.0 && spec.arch.has_rgb_head();
        let mut targets = Vec::with_capacity(data.len());
        for (k, s) in data.iter().enumerate() {
            if s.image.shape() != enc.image_shape() {
                return Err(Error::Config(format!(
                    "sample {k}: image shape {:?}, expected {:?}",
                    s.image.shape(),
                    enc.image_shape()
                )));
            }
            if let Some(g) = &s.grid {
                if g.shape() != [gh, gw, dc] {
                    return Err(Error::Config(format!(
                        "sample {k}: grid shape {:?}, expected {:?}",
                        g.shape(),
                        [gh, gw, dc]
                    )));
                }
            }
            if let Some(c) = &s.cls {
                if c.len() != dc {
                    return Err(Error::Config(format!("sample {k}: cls has {} values, expected {dc}", c.len())));
                }
            }
            let has_signal = (s.grid.is_some() && cfg.w_grid > 0.0)
                || (s.cls.is_some() && cfg.w_cls > 0.0)
                || use_rgb;
            if !has_signal {
                return Err(Error::Config(format!("sample {k} provides no training signal")));
            }
            targets.push(if use_rgb { Some(pixel_targets(&s.image, enc)?) } else { None });
        }
        Ok(Self {
            spec: spec.clone(),
            cfg: cfg.clone(),
            data,
            pixel_targets: targets,
            workers: Workers::new(cfg.workers)?,
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TrainState {
        &mut self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    fn steps_per_sample(&self) -> u64 {
        match self.cfg.granularity {
            Granularity::PerImage => 1,
            Granularity::PerColumn => {
                let (gh, gw) = self.spec.encoder.grid();
                (gh * gw) as u64
            }
        }
    }

    /// Samples processed so far (the position in `epochs × data`).
    pub fn samples_done(&self) -> u64 {
        self.state.step / self.steps_per_sample()
    }

    pub fn total_samples(&self) -> u64 {
        (self.cfg.epochs * self.data.len()) as u64
    }

    pub fn finished(&self) -> bool {
        self.samples_done() >= self.total_samples()
    }

    /// Trains on the next sample in dataset order.
    pub fn step_sample(&mut self) -> Result<SampleLoss> {
        if self.finished() {
            return Err(Error::Config("training already finished".into()));
        }
        let k = (self.samples_done() % self.data.len() as u64) as usize;
        match self.cfg.granularity {
            Granularity::PerImage => self.per_image(k),
            Granularity::PerColumn => self.per_column(k),
        }
    }

    fn diverged(&self) -> Error {
        Error::TrainDiverged {
            step: self.state.step,
            last_good: Box::new(self.state.clone()),
        }
    }

    fn per_image(&mut self, k: usize) -> Result<SampleLoss> {
        let sample = &self.data[k];
        let enc = &self.spec.encoder;
        let dc = self.spec.arch.feature_dim;
        let (gh, gw) = enc.grid();
        let n = (gh * gw) as f64;
        let (wg, wr, wc) = (self.cfg.w_grid, self.cfg.w_rgb, self.cfg.w_cls);
        let grid = sample.grid.as_ref().filter(|_| wg > 0.0).map(Tensor::data);
        let cls = sample.cls.as_ref().filter(|_| wc > 0.0).map(Tensor::data);
        let pix = self.pixel_targets[k].as_ref().map(Tensor::data);

        let x = normalize_image(&sample.image)?;
        let params = &self.state.params;
        let trigger = encode_trigger(&x, &params.conv_kernel, enc)?;
        let source = QuerySource::new(&trigger, enc, &x);

        // the CLS term is on the mean feature, which needs its own pass
        let (cls_loss, cls_up) = match cls {
            Some(c) => {
                let mut avg = crate::ttt::RunningAverage::new(dc);
                forward_pass(params, &source, false, &self.workers, |_, f| avg.update(&f.feature))?;
                let mean = avg.value()?;
                let up: Vec<f64> = mean
                    .data()
                    .iter()
                    .zip(c)
                    .map(|(m, t)| wc * 2.0 * (m - t) / (dc as f64 * n))
                    .collect();
                (crate::ttt::ttt_loss(&mean, &Tensor::vector(c.to_vec()))?, Some(up))
            }
            None => (0.0, None),
        };

        let mut pass = PassGradients::new(params, enc);
        let mut sums = Terms::default();
        backward_pass(
            params,
            &source,
            pix.is_some(),
            &self.workers,
            |idx, fired: &Fired| column_upstream(idx, fired, dc, (wg, wr), grid, pix, cls_up.as_deref()),
            |_, _, terms: Terms, col| {
                sums.grid += terms.grid;
                sums.rgb += terms.rgb;
                pass.add(&col);
                Ok(())
            },
        )?;
        let loss = SampleLoss {
            step: self.state.step,
            grid: sums.grid,
            rgb: sums.rgb,
            cls: cls_loss,
            total: wg * sums.grid + wr * sums.rgb + wc * cls_loss,
        };
        if !loss.total.is_finite() {
            return Err(self.diverged());
        }
        let grads = pass.finish(&x, enc)?;
        let st = &mut self.state;
        adam_step(&mut st.params, &grads, &mut st.adam, self.cfg.lr)?;
        st.step += 1;
        Ok(loss)
    }

    /// Literal per-location updates: the trigger column is encoded once per
    /// image, then each column is fired, differentiated (its own share of the
    /// kernel gradient included) and applied before the next one. A CLS
    /// token, when present, is each column's target.
    fn per_column(&mut self, k: usize) -> Result<SampleLoss> {
        let sample = &self.data[k];
        let enc = self.spec.encoder.clone();
        let dc = self.spec.arch.feature_dim;
        let (wg, wr, wc) = (self.cfg.w_grid, self.cfg.w_rgb, self.cfg.w_cls);
        let grid = sample.grid.as_ref().filter(|_| wg > 0.0).map(Tensor::data);
        let cls = sample.cls.as_ref().filter(|_| wc > 0.0).map(Tensor::data);
        let pix = self.pixel_targets[k].as_ref().map(Tensor::data);
        let x = normalize_image(&sample.image)?;
        let trigger = encode_trigger(&x, &self.state.params.conv_kernel, &enc)?;
        let source = QuerySource::new(&trigger, &enc, &x);
        let (_, gw) = enc.grid();
        let mut total = SampleLoss {
            step: self.state.step,
            ..Default::default()
        };
        let cells = self.steps_per_sample() as usize;
        for idx in 0..cells {
            let params = &self.state.params;
            let q = source.query(idx / gw, idx % gw);
            let (f, trace) = forward_values(params, q.values().data())?;
            let rgb = match pix {
                Some(_) => Some(rgb_values(params, q.values().data(), trace.inputs.last().expect("trace"))?),
                None => None,
            };
            let fired = Fired {
                feature: f.into_data(),
                rgb: rgb.as_ref().map(|(t, _)| t.data().to_vec()),
            };
            let (mut up, terms) = column_upstream(idx, &fired, dc, (wg, wr), grid, pix, None)?;
            let mut cls_term = 0.0;
            if let Some(c) = cls {
                cls_term = fired.feature.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / dc as f64;
                let g = up.feature.get_or_insert_with(|| vec![0.0; dc]);
                for ((gv, fv), cv) in g.iter_mut().zip(&fired.feature).zip(c) {
                    *gv += wc * 2.0 * (fv - cv) / dc as f64;
                }
            }
            let column_total = wg * terms.grid + wr * terms.rgb + wc * cls_term;
            if !column_total.is_finite() {
                return Err(self.diverged());
            }
            total.grid += terms.grid;
            total.rgb += terms.rgb;
            total.cls += cls_term;
            total.total += column_total;

            let rgb_arg = match (rgb, up.rgb.as_deref()) {
                (Some((_, rt)), Some(g)) => Some((rt, g)),
                _ => None,
            };
            let col = backprop_column(params, trace, up.feature.as_deref(), rgb_arg)?;
            let mut grads = Gradients::zeros_like(params);
            col.commit(&mut grads);
            grads.conv_kernel =
                crate::encoder::conv_backward(&x, &col.d_query()[..enc.trigger_dim()], &enc)?;
            drop(col);
            let st = &mut self.state;
            adam_step(&mut st.params, &grads, &mut st.adam, self.cfg.lr)?;
            st.step += 1;
        }
        Ok(total)
    }

    /// Runs to the end, calling `on_sample` after every sample.
    pub fn run(&mut self, mut on_sample: impl FnMut(&Self, &SampleLoss) -> Result<()>) -> Result<Vec<SampleLoss>> {
        let mut history = Vec::new();
        while !self.finished() {
            let loss = self.step_sample()?;
            on_sample(self, &loss)?;
            history.push(loss);
        }
        Ok(history)
    }
}

fn column_upstream(
    idx: usize,
    fired: &Fired,
    dc: usize,
    (wg, wr): (f64, f64),
    grid: Option<&[f64]>,
    pix: Option<&[f64]>,
    cls_up: Option<&[f64]>,
) -> Result<(Upstream, Terms)> {
    let mut terms = Terms::default();
    let mut feature: Option<Vec<f64>> = cls_up.map(<[f64]>::to_vec);
    if let Some(g) = grid {
        let goal = &g[idx * dc..(idx + 1) * dc];
        terms.grid = fired.feature.iter().zip(goal).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / dc as f64;
        let up = feature.get_or_insert_with(|| vec![0.0; dc]);
        for ((u, f), t) in up.iter_mut().zip(&fired.feature).zip(goal) {
            *u += wg * 2.0 * (f - t) / dc as f64;
        }
    }
    let rgb = match (pix, &fired.rgb) {
        (Some(p), Some(out)) => {
            let goal = &p[idx * RGB_OUTPUT..(idx + 1) * RGB_OUTPUT];
            terms.rgb = out.iter().zip(goal).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / RGB_OUTPUT as f64;
            Some(
                out.iter()
                    .zip(goal)
                    .map(|(o, t)| wr * 2.0 * (o - t) / RGB_OUTPUT as f64)
                    .collect(),
            )
        }
        _ => None,
    };
    Ok((Upstream { feature, rgb }, terms))
}

/// Trains from freshly initialised weights; returns the final state and the
/// per-sample loss history.
pub fn train(spec: &ModelSpec, data: &[TrainSample], cfg: &TrainConfig) -> Result<(TrainState, Vec<SampleLoss>)> {
    let mut trainer = Trainer::new(spec, cfg, data)?;
    let history = trainer.run(|_, _| Ok(()))?;
    Ok((trainer.into_state(), history))
}

/// Fires every column of a trigger column through the RGB head: `3×gh×gw`.
pub fn decode_trigger(params: &ApmParams, spec: &ModelSpec, trigger: &TriggerColumn) -> Result<Tensor> {
    if spec.encoder.patch_injection {
        return Err(Error::Config("decoding a bare trigger column needs a model without patch injection".into()));
    }
    if trigger.len() != spec.encoder.trigger_dim() {
        return Err(Error::dim("decode_trigger", &[trigger.len()], &[spec.encoder.trigger_dim()]));
    }
    let (gh, gw) = spec.encoder.grid();
    let source = QuerySource::without_patches(trigger, &spec.encoder);
    let mut cells = Vec::with_capacity(gh * gw * RGB_OUTPUT);
    let workers = Workers::new(1)?;
    forward_pass(params, &source, true, &workers, |_, fired| {
        cells.extend(fired.rgb.expect("rgb requested"));
        Ok(())
    })?;
    cells_to_planar(&Tensor::new(vec![gh, gw, RGB_OUTPUT], cells)?)
}

/// Trigger column of `[0, 1]` pixels under the current kernel.
pub fn trigger_of(params: &ApmParams, spec: &ModelSpec, pixels: &Tensor) -> Result<TriggerColumn> {
    encode_trigger(&normalize_image(pixels)?, &params.conv_kernel, &spec.encoder)
}

/// Reconstructed `3×gh×gw` image in `(0, 1)`.
pub fn reconstruct(params: &ApmParams, spec: &ModelSpec, pixels: &Tensor) -> Result<Tensor> {
    if !spec.arch.has_rgb_head() {
        return Err(Error::Config("model has no RGB head".into()));
    }
    let x = normalize_image(pixels)?;
    let trigger = encode_trigger(&x, &params.conv_kernel, &spec.encoder)?;
    let (gh, gw) = spec.encoder.grid();
    let source = QuerySource::new(&trigger, &spec.encoder, &x);
    let mut cells = Vec::with_capacity(gh * gw * RGB_OUTPUT);
    let workers = Workers::new(1)?;
    forward_pass(params, &source, true, &workers, |_, fired| {
        cells.extend(fired.rgb.expect("rgb requested"));
        Ok(())
    })?;
    cells_to_planar(&Tensor::new(vec![gh, gw, RGB_OUTPUT], cells)?)
}

/// `steps + 1` decoded frames between the trigger columns of two images.
pub fn interpolate_images(
    params: &ApmParams,
    spec: &ModelSpec,
    a: &Tensor,
    b: &Tensor,
    steps: usize,
) -> Result<Vec<Tensor>> {
    let ta = trigger_of(params, spec, a)?;
    let tb = trigger_of(params, spec, b)?;
    interpolate_latents(&ta, &tb, steps)?
        .iter()
        .map(|t| decode_trigger(params, spec, t))
        .collect()
}

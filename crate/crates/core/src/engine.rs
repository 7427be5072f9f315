//! Fires every column of a query grid, optionally backpropagating each one,
//! and hands results back strictly in raster order.
//!
//! Columns are computed in waves of `workers` consecutive raster indices, so
//! at most `workers` column traces exist at once. Whatever order the workers
//! finish in, commits happen in raster order, which keeps every accumulated
//! quantity bitwise independent of the worker count.

use rayon::prelude::*;

use crate::encoder::{conv_backward, EncoderConfig, QuerySource};
use crate::error::{Error, Result};
use crate::grad::{backprop_column, ColumnGrad, Gradients};
use crate::net::{forward_values, rgb_values, ApmParams};

pub(crate) struct Workers {
    count: usize,
    pool: Option<rayon::ThreadPool>,
}

impl Workers {
    pub(crate) fn new(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        let pool = if count > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(count)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self { count, pool })
    }

    fn wave<T: Send>(&self, indices: &[usize], f: impl Fn(usize) -> T + Sync) -> Vec<T> {
        match &self.pool {
            None => indices.iter().map(|&i| f(i)).collect(),
            Some(pool) => pool.install(|| indices.par_iter().map(|&i| f(i)).collect()),
        }
    }
}

/// Outputs of one fired column.
pub(crate) struct Fired {
    pub feature: Vec<f64>,
    pub rgb: Option<Vec<f64>>,
}

/// Loss gradients with respect to one column's outputs.
pub(crate) struct Upstream {
    pub feature: Option<Vec<f64>>,
    pub rgb: Option<Vec<f64>>,
}

fn indexed_waves(n: usize, workers: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(workers).map(move |s| (s..(s + workers).min(n)).collect())
}

/// Forward-only pass; `commit(idx, fired)` is called in raster order.
pub(crate) fn forward_pass(
    params: &ApmParams,
    source: &QuerySource<'_>,
    want_rgb: bool,
    workers: &Workers,
    mut commit: impl FnMut(usize, Fired) -> Result<()>,
) -> Result<()> {
    let (h, w) = source.grid();
    for wave in indexed_waves(h * w, workers.count) {
        let out = workers.wave(&wave, |idx| -> Result<Fired> {
            let q = source.query(idx / w, idx % w);
            let (f, trace) = forward_values(params, q.values().data())?;
            let rgb = if want_rgb {
                let (rgb, _) = rgb_values(params, q.values().data(), trace.inputs.last().expect("trace"))?;
                Some(rgb.into_data())
            } else {
                None
            };
            Ok(Fired {
                feature: f.into_data(),
                rgb,
            })
        });
        for (idx, fired) in wave.into_iter().zip(out) {
            commit(idx, fired?)?;
        }
    }
    Ok(())
}

/// Gradient sink for a full pass: per-layer gradients plus the summed
/// trigger-prefix gradient, which goes through the convolution at the end.
pub(crate) struct PassGradients {
    pub grads: Gradients,
    d_trigger: Vec<f64>,
}

impl PassGradients {
    pub(crate) fn new(params: &ApmParams, cfg: &EncoderConfig) -> Self {
        Self {
            grads: Gradients::zeros_like(params),
            d_trigger: vec![0.0; cfg.trigger_dim()],
        }
    }

    pub(crate) fn add(&mut self, col: &ColumnGrad) {
        col.commit(&mut self.grads);
        for (a, b) in self.d_trigger.iter_mut().zip(col.d_query()) {
            *a += b;
        }
    }

    /// `image` is the normalised image the trigger was encoded from.
    pub(crate) fn finish(mut self, image: &crate::tensor::Tensor, cfg: &EncoderConfig) -> Result<Gradients> {
        self.grads.conv_kernel = conv_backward(image, &self.d_trigger, cfg)?;
        Ok(self.grads)
    }
}

/// Forward plus backward over every column. `upstream(idx, &fired)` turns a
/// column's outputs into loss gradients and a per-column payload (typically
/// its loss terms); `commit` receives them in raster order.
pub(crate) fn backward_pass<T: Send>(
    params: &ApmParams,
    source: &QuerySource<'_>,
    want_rgb: bool,
    workers: &Workers,
    upstream: impl Fn(usize, &Fired) -> Result<(Upstream, T)> + Sync,
    mut commit: impl FnMut(usize, Fired, T, ColumnGrad) -> Result<()>,
) -> Result<()> {
    let (h, w) = source.grid();
    for wave in indexed_waves(h * w, workers.count) {
        let out = workers.wave(&wave, |idx| -> Result<(Fired, T, ColumnGrad)> {
            let q = source.query(idx / w, idx % w);
            let (f, trace) = forward_values(params, q.values().data())?;
            let rgb = if want_rgb {
                Some(rgb_values(params, q.values().data(), trace.inputs.last().expect("trace"))?)
            } else {
                None
            };
            let fired = Fired {
                feature: f.into_data(),
                rgb: rgb.as_ref().map(|(t, _)| t.data().to_vec()),
            };
            let (up, payload) = upstream(idx, &fired)?;
            let rgb_arg = match (rgb, up.rgb.as_deref()) {
                (Some((_, rt)), Some(g)) => Some((rt, g)),
                _ => None,
            };
            let col = backprop_column(params, trace, up.feature.as_deref(), rgb_arg)?;
            Ok((fired, payload, col))
        });
        for (idx, item) in wave.into_iter().zip(out) {
            let (fired, payload, col) = item?;
            commit(idx, fired, payload, col)?;
        }
    }
    Ok(())
}

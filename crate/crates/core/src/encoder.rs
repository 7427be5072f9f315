//! Trigger-column construction and the unfold/fold oscillation.
//!
//! An image is summarised by a single strided convolution whose output is
//! flattened into one vector, the trigger column `T`. Unfolding stacks `T`
//! with a deterministic 2-D sinusoidal encoding `p_ij` for every grid cell,
//! producing mutually independent location queries `(T | p_ij)`. Folding drops
//! the positional suffixes again and recovers `T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiler::counter;
use crate::tensor::{concat, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub num_kernels: usize,
    pub positional_dim: usize,
    /// Append the raw `k×k×c` image patch under each cell to its query.
    #[serde(default)]
    pub patch_injection: bool,
    /// Query grid override `(H, W)`; defaults to the patch grid.
    #[serde(default)]
    pub grid: Option<(usize, usize)>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad(format!(
                "image dimensions must be positive, got {}x{}x{}",
                self.channels, self.height, self.width
            ));
        }
        if self.stride == 0 || self.kernel_size != self.stride {
            return bad(format!(
                "kernel size ({}) must equal stride ({}) and be positive",
                self.kernel_size, self.stride
            ));
        }
        if !self.height.is_multiple_of(self.stride) || !self.width.is_multiple_of(self.stride) {
            return bad(format!(
                "image {}x{} is not divisible by stride {}",
                self.height, self.width, self.stride
            ));
        }
        if self.num_kernels == 0 {
            return bad("num_kernels must be at least 1".into());
        }
        if self.positional_dim < 4 || !self.positional_dim.is_multiple_of(4) {
            return bad(format!(
                "positional_dim must be a positive multiple of 4, got {}",
                self.positional_dim
            ));
        }
        if let Some((h, w)) = self.grid {
            if h == 0 || w == 0 {
                return bad("grid dimensions must be positive".into());
            }
        }
        Ok(())
    }

    /// `(h/s, w/s)`.
    pub fn patch_grid(&self) -> (usize, usize) {
        (self.height / self.stride, self.width / self.stride)
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid.unwrap_or_else(|| self.patch_grid())
    }

    pub fn trigger_dim(&self) -> usize {
        let (ph, pw) = self.patch_grid();
        self.num_kernels * ph * pw
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.kernel_size * self.kernel_size
    }

    pub fn query_dim(&self) -> usize {
        self.trigger_dim()
            + self.positional_dim
            + if self.patch_injection {
                self.patch_dim()
            } else {
                0
            }
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [
            self.num_kernels,
            self.channels,
            self.kernel_size,
            self.kernel_size,
        ]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriggerColumn(Tensor);

impl TriggerColumn {
    pub fn new(values: Tensor) -> Self {
        TriggerColumn(Tensor::vector(values.into_data()))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Materialised table of `p_ij` rows in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalField {
    height: usize,
    width: usize,
    dim: usize,
    encodings: Tensor,
}

impl PositionalField {
    pub fn new(height: usize, width: usize, dim: usize) -> Self {
        let mut data = Vec::with_capacity(height * width * dim);
        for i in 0..height {
            for j in 0..width {
                data.extend_from_slice(positional_encoding(i, j, dim).data());
            }
        }
        Self {
            height,
            width,
            dim,
            encodings: Tensor::new(vec![height * width, dim], data).expect("field shape"),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encodings(&self) -> &Tensor {
        &self.encodings
    }

    pub fn row(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.width + j) * self.dim;
        &self.encodings.data()[start..start + self.dim]
    }
}

/// Two-axis transformer sinusoid: the first half encodes the column `j`, the
/// second half the row `i`. Within each half entries alternate
/// `sin(x·ω_m), cos(x·ω_m)` with `ω_m = 10000^(-4m/d_p)`.
pub fn positional_encoding(i: usize, j: usize, dim: usize) -> Tensor {
    assert!(
        dim >= 4 && dim.is_multiple_of(4),
        "positional dim must be a multiple of 4"
    );
    let quarter = dim / 4;
    let mut out = vec![0.0; dim];
    for (half, coord) in [(0, j), (1, i)] {
        let base = half * dim / 2;
        for m in 0..quarter {
            let phase = coord as f64 / libm::pow(10000.0, (4 * m) as f64 / dim as f64);
            out[base + 2 * m] = libm::sin(phase);
            out[base + 2 * m + 1] = libm::cos(phase);
        }
    }
    Tensor::vector(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocationQuery {
    values: Tensor,
    position: (usize, usize),
    trigger_dim: usize,
    positional_dim: usize,
}

impl LocationQuery {
    pub fn new(
        trigger: &TriggerColumn,
        encoding: &Tensor,
        position: (usize, usize),
        patch: Option<&Tensor>,
    ) -> Self {
        let mut values = concat(trigger.values(), encoding);
        if let Some(p) = patch {
            values = concat(&values, p);
        }
        Self {
            values,
            position,
            trigger_dim: trigger.len(),
            positional_dim: encoding.len(),
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn position(&self) -> (usize, usize) {
        self.position
    }

    pub fn trigger_part(&self) -> &[f64] {
        &self.values.data()[..self.trigger_dim]
    }

    pub fn positional_part(&self) -> &[f64] {
        &self.values.data()[self.trigger_dim..self.trigger_dim + self.positional_dim]
    }

    pub fn patch_part(&self) -> Option<&[f64]> {
        let start = self.trigger_dim + self.positional_dim;
        (start < self.values.len()).then(|| &self.values.data()[start..])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Valid strided cross-correlation of `image` (`c×h×w`) with `kernel`
/// (`n_k×c×k×k`), no bias, flattened kernel-major then row-major.
pub fn encode_trigger(
    image: &Tensor,
    kernel: &Tensor,
    cfg: &EncoderConfig,
) -> Result<TriggerColumn> {
    check_image(image, cfg)?;
    if kernel.shape() != cfg.kernel_shape() {
        return Err(Error::dim("encode_trigger", kernel.shape(), &cfg.kernel_shape()));
    }
    let (ph, pw) = cfg.patch_grid();
    let (c, w, k, s) = (cfg.channels, cfg.width, cfg.kernel_size, cfg.stride);
    let img = image.data();
    let ker = kernel.data();
    counter::charge(crate::profiler::flops_conv(cfg));
    let mut out = Vec::with_capacity(cfg.trigger_dim());
    for n in 0..cfg.num_kernels {
        for oy in 0..ph {
            for ox in 0..pw {
                let mut acc = 0.0;
                for ch in 0..c {
                    for a in 0..k {
                        let irow = (ch * cfg.height + oy * s + a) * w + ox * s;
                        let krow = ((n * c + ch) * k + a) * k;
                        for b in 0..k {
                            acc += ker[krow + b] * img[irow + b];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Ok(TriggerColumn(Tensor::vector(out)))
}

/// Gradient of `⟨d_trigger, encode_trigger(image, K)⟩` with respect to `K`.
///
/// Every location's gradient reaching the shared `T` prefix lands here: this
/// is the fold as seen by the optimizer.
pub fn conv_backward(image: &Tensor, d_trigger: &[f64], cfg: &EncoderConfig) -> Result<Tensor> {
    check_image(image, cfg)?;
    if d_trigger.len() != cfg.trigger_dim() {
        return Err(Error::dim(
            "conv_backward",
            &[d_trigger.len()],
            &[cfg.trigger_dim()],
        ));
    }
    let (ph, pw) = cfg.patch_grid();
    let (c, w, k, s) = (cfg.channels, cfg.width, cfg.kernel_size, cfg.stride);
    let img = image.data();
    counter::charge(2 * crate::profiler::flops_conv(cfg));
    let mut grad = Tensor::zeros(&cfg.kernel_shape());
    let g = grad.data_mut();
    for n in 0..cfg.num_kernels {
        for oy in 0..ph {
            for ox in 0..pw {
                let dt = d_trigger[(n * ph + oy) * pw + ox];
                for ch in 0..c {
                    for a in 0..k {
                        let irow = (ch * cfg.height + oy * s + a) * w + ox * s;
                        let krow = ((n * c + ch) * k + a) * k;
                        for b in 0..k {
                            g[krow + b] += dt * img[irow + b];
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// The `k×k×c` patch under grid cell `(i, j)`; cells of a grid finer or
/// coarser than the patch grid map to the patch containing them.
pub fn local_patch(image: &Tensor, cfg: &EncoderConfig, i: usize, j: usize) -> Tensor {
    let (gh, gw) = cfg.grid();
    let (ph, pw) = cfg.patch_grid();
    let py = (i * ph / gh).min(ph - 1);
    let px = (j * pw / gw).min(pw - 1);
    let (k, s) = (cfg.kernel_size, cfg.stride);
    let img = image.data();
    let mut out = Vec::with_capacity(cfg.patch_dim());
    for ch in 0..cfg.channels {
        for a in 0..k {
            let row = (ch * cfg.height + py * s + a) * cfg.width + px * s;
            out.extend_from_slice(&img[row..row + k]);
        }
    }
    Tensor::vector(out)
}

fn check_image(image: &Tensor, cfg: &EncoderConfig) -> Result<()> {
    if image.shape() != cfg.image_shape() {
        return Err(Error::dim("image", image.shape(), &cfg.image_shape()));
    }
    Ok(())
}

/// Builds location queries on demand, so only the query being fired needs
/// to exist.
#[derive(Clone, Copy)]
pub struct QuerySource<'a> {
    trigger: &'a TriggerColumn,
    cfg: &'a EncoderConfig,
    image: Option<&'a Tensor>,
}

impl<'a> QuerySource<'a> {
    pub fn new(trigger: &'a TriggerColumn, cfg: &'a EncoderConfig, image: &'a Tensor) -> Self {
        Self {
            trigger,
            cfg,
            image: cfg.patch_injection.then_some(image),
        }
    }

    /// Query source without patch injection (does not need the image).
    pub fn without_patches(trigger: &'a TriggerColumn, cfg: &'a EncoderConfig) -> Self {
        Self {
            trigger,
            cfg,
            image: None,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.cfg.grid()
    }

    pub fn trigger(&self) -> &TriggerColumn {
        self.trigger
    }

    pub fn query(&self, i: usize, j: usize) -> LocationQuery {
        let p = positional_encoding(i, j, self.cfg.positional_dim);
        let patch = self.image.map(|img| local_patch(img, self.cfg, i, j));
        LocationQuery::new(self.trigger, &p, (i, j), patch.as_ref())
    }

    /// All queries in raster order, produced lazily.
    pub fn iter(&self) -> impl Iterator<Item = LocationQuery> + '_ {
        let (h, w) = self.grid();
        (0..h * w).map(move |idx| self.query(idx / w, idx % w))
    }
}

/// Raster-order queries `(T | p_ij)` over every row of `field`.
pub fn unfold<'a>(
    trigger: &'a TriggerColumn,
    field: &'a PositionalField,
) -> impl Iterator<Item = LocationQuery> + 'a {
    let w = field.width();
    (0..field.height() * w).map(move |idx| {
        let (i, j) = (idx / w, idx % w);
        let p = Tensor::vector(field.row(i, j).to_vec());
        LocationQuery::new(trigger, &p, (i, j), None)
    })
}

/// Collapses queries back onto their shared trigger column.
pub fn fold<'q>(queries: impl IntoIterator<Item = &'q LocationQuery>) -> Result<TriggerColumn> {
    let mut iter = queries.into_iter();
    let first = iter.next().ok_or(Error::EmptyFold)?;
    let prefix = first.trigger_part();
    for (idx, q) in iter.enumerate() {
        let same = q.trigger_part().len() == prefix.len()
            && q
                .trigger_part()
                .iter()
                .zip(prefix)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::InconsistentFold { index: idx + 1 });
        }
    }
    Ok(TriggerColumn(Tensor::vector(prefix.to_vec())))
}

/// `n + 1` evenly spaced trigger columns from `v1` to `v2`; the endpoints are
/// returned exactly.
pub fn interpolate_latents(
    v1: &TriggerColumn,
    v2: &TriggerColumn,
    n: usize,
) -> Result<Vec<TriggerColumn>> {
    if n == 0 {
        return Err(Error::Config("interpolation needs at least one step".into()));
    }
    if v1.len() != v2.len() {
        return Err(Error::dim(
            "interpolate_latents",
            v1.values().shape(),
            v2.values().shape(),
        ));
    }
    let a = v1.values().data();
    let b = v2.values().data();
    let mut frames = Vec::with_capacity(n + 1);
    frames.push(v1.clone());
    for k in 1..n {
        let data = a
            .iter()
            .zip(b)
            .map(|(x, y)| x + k as f64 * (y - x) / n as f64)
            .collect();
        frames.push(TriggerColumn(Tensor::vector(data)));
    }
    frames.push(v2.clone());
    Ok(frames)
}

//! Analytical cost model.
//!
//! Convention: a multiply-accumulate is 2 flops, a bias add or activation
//! (ReLU, sigmoid) is 1 flop per element, and every backward op costs twice
//! its forward op. Loss evaluation, running averages and optimizer updates
//! are not counted. The engine charges exactly these amounts to
//! [`counter`] as it runs, so analytical and instrumented counts agree.

pub mod counter;

use serde::Serialize;

use crate::encoder::EncoderConfig;
use crate::net::{ArchSpec, ModelSpec, RGB_OUTPUT};

/// `(in, out, activated)` for one dense layer.
pub type LayerShape = (usize, usize, bool);

/// Forward flops of a stack of dense layers.
pub fn flops_stack(layers: &[LayerShape]) -> u64 {
    layers
        .iter()
        .map(|&(i, o, act)| (2 * i * o + o + if act { o } else { 0 }) as u64)
        .sum()
}

fn activated(layers: Vec<(usize, usize)>) -> Vec<LayerShape> {
    let n = layers.len();
    layers
        .into_iter()
        .enumerate()
        .map(|(k, (i, o))| (i, o, k + 1 < n))
        .collect()
}

/// Strided convolution producing the trigger column.
pub fn flops_conv(cfg: &EncoderConfig) -> u64 {
    let macs = cfg.trigger_dim() * cfg.channels * cfg.kernel_size * cfg.kernel_size;
    2 * macs as u64
}

/// One column through the decoder and feature head.
pub fn flops_per_column(arch: &ArchSpec) -> u64 {
    flops_stack(&activated(arch.feature_layers()))
}

/// One column through the RGB head, sigmoid included; zero without a head.
pub fn flops_rgb_per_column(arch: &ArchSpec) -> u64 {
    if !arch.has_rgb_head() {
        return 0;
    }
    flops_stack(&activated(arch.rgb_layers())) + RGB_OUTPUT as u64
}

/// Floats held by one column's trace (layer inputs, pre-activations and
/// outputs), with or without the RGB head.
pub fn trace_floats(arch: &ArchSpec, with_rgb: bool) -> usize {
    let stack = |layers: &[(usize, usize)]| -> usize {
        let (last, hidden) = layers.split_last().expect("at least one layer");
        let inputs: usize = layers.iter().map(|&(i, _)| i).sum();
        let pre: usize = hidden.iter().map(|&(_, o)| o).sum();
        inputs + pre + last.1
    };
    let mut n = stack(&arch.feature_layers());
    if with_rgb && arch.has_rgb_head() {
        n += stack(&arch.rgb_layers());
    }
    n
}

/// Working set that does not scale with workers: the trigger column and its
/// gradient, the running average and the target token.
pub fn fixed_live_floats(spec: &ModelSpec) -> usize {
    2 * spec.encoder.trigger_dim() + 2 * spec.arch.feature_dim
}

/// Peak activation floats with `workers` columns in flight.
pub fn peak_live_floats(spec: &ModelSpec, workers: usize, with_rgb: bool) -> usize {
    workers * trace_floats(&spec.arch, with_rgb) + fixed_live_floats(spec)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub flops_conv: u64,
    pub flops_per_column: u64,
    pub params: usize,
    pub n_columns: usize,
    /// Forward flops of one full pass: `flops_total(n_columns)`.
    pub flops_forward: u64,
    /// Forward plus backward flops of one TTT iteration.
    pub flops_iteration: u64,
    pub t_max: usize,
    pub teacher_flops: u64,
    pub flops_ttt_run: u64,
    pub workers: usize,
    pub peak_live_floats: usize,
}

impl CostReport {
    pub fn flops_total(&self, n_columns: usize) -> u64 {
        self.flops_conv + n_columns as u64 * self.flops_per_column
    }
}

/// Cost of one TTT run over an `h×w` query grid: the teacher once, then
/// `t_max` iterations of forward and backward (backward = 2× forward).
pub fn ttt_run_cost(
    spec: &ModelSpec,
    h: usize,
    w: usize,
    t_max: usize,
    teacher_flops: u64,
    workers: usize,
) -> CostReport {
    let flops_conv = flops_conv(&spec.encoder);
    let flops_per_column = flops_per_column(&spec.arch);
    let n = h * w;
    let flops_forward = flops_conv + n as u64 * flops_per_column;
    let flops_iteration = 3 * flops_forward;
    CostReport {
        flops_conv,
        flops_per_column,
        params: spec.count_params(),
        n_columns: n,
        flops_forward,
        flops_iteration,
        t_max,
        teacher_flops,
        flops_ttt_run: teacher_flops + t_max as u64 * flops_iteration,
        workers,
        peak_live_floats: peak_live_floats(spec, workers, false),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SweepRow {
    pub n_patches: usize,
    pub flops: u64,
    pub peak_live_floats: usize,
}

/// Forward cost of processing `1..=max_patches` patches.
pub fn sweep_patches(spec: &ModelSpec, max_patches: usize, workers: usize) -> Vec<SweepRow> {
    let conv = flops_conv(&spec.encoder);
    let fpc = flops_per_column(&spec.arch);
    (1..=max_patches)
        .map(|n| SweepRow {
            n_patches: n,
            flops: conv + n as u64 * fpc,
            peak_live_floats: workers.min(n) * trace_floats(&spec.arch, false)
                + fixed_live_floats(spec),
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "n_patches,flops,peak_live_floats";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.n_patches, r.flops, r.peak_live_floats));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counts() {
        assert_eq!(flops_stack(&[(3, 2, false)]), 14);
        assert_eq!(flops_stack(&[]), 0);
        assert_eq!(flops_stack(&[(3, 2, true)]), 16);
        let one = ArchSpec {
            input_dim: 3,
            decoder_widths: vec![],
            feature_dim: 2,
            rgb_hidden_widths: None,
        };
        assert_eq!(flops_per_column(&one), 14);
        assert_eq!(flops_rgb_per_column(&one), 0);
    }

    #[test]
    fn doubling_a_width_doubles_its_term() {
        let a = flops_stack(&[(3, 4, true), (4, 2, false)]);
        let b = flops_stack(&[(3, 8, true), (4, 2, false)]);
        assert_eq!(b - flops_stack(&[(4, 2, false)]), 2 * (a - flops_stack(&[(4, 2, false)])));
    }

    #[test]
    fn desk_column_cost() {
        let arch = ModelSpec::desk().arch;
        let macs = 96 * 128 + 128 * 128 + 128 * 128 + 128 * 64 + 64 * 32 + 32 * 16;
        let bias = 128 + 128 + 128 + 64 + 32 + 16;
        let relu = 128 + 128 + 128 + 64 + 32;
        assert_eq!(flops_per_column(&arch), (2 * macs + bias + relu) as u64);
        assert_eq!(trace_floats(&arch, false), 96 + 2 * (128 * 3 + 64 + 32) + 16);
    }

    #[test]
    fn ttt_cost_structure() {
        let spec = ModelSpec::desk();
        let zero = ttt_run_cost(&spec, 8, 8, 0, 12345, 1);
        assert_eq!(zero.flops_ttt_run, 12345);
        let a = ttt_run_cost(&spec, 8, 8, 5, 0, 1).flops_ttt_run;
        let b = ttt_run_cost(&spec, 8, 8, 6, 0, 1).flops_ttt_run;
        let c = ttt_run_cost(&spec, 8, 8, 6, 999, 1).flops_ttt_run;
        assert_eq!(b - a, ttt_run_cost(&spec, 8, 8, 1, 0, 1).flops_iteration);
        assert_eq!(c - b, 999);
        let r = ttt_run_cost(&spec, 8, 8, 2, 0, 1);
        assert_eq!(r.flops_forward, r.flops_total(64));
    }

    #[test]
    fn sweep_shape() {
        let spec = ModelSpec::desk();
        let rows = sweep_patches(&spec, 1000, 1);
        assert_eq!(rows.len(), 1000);
        let fpc = flops_per_column(&spec.arch);
        assert_eq!(rows[0].flops, flops_conv(&spec.encoder) + fpc);
        for n in 1..=500 {
            assert_eq!(rows[2 * n - 1].flops - rows[n - 1].flops, n as u64 * fpc);
        }
        assert!(rows.windows(2).all(|w| w[1].flops > w[0].flops));
        assert_eq!(rows[0].peak_live_floats, rows[999].peak_live_floats);
        let csv = sweep_csv(&rows[..2]);
        assert_eq!(csv.lines().next(), Some(SWEEP_CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }
}

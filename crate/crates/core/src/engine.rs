//! Progressive CASE flipping: element-wise rounding, then kernel-wise and
//! output-channel-wise flips of rounded codes by exactly one grid step.
//!
//! Perturbations are kept in the scaled domain, `delta = code - w / s`. A flip
//! of an element with perturbation `p` moves its code by `-sign(p)`, which
//! moves the group sum one step toward zero.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::quant::{compute_scale, round_to_grid, Mode, QuantConfig, QuantGrid, WeightTensor};

/// Slack used when comparing sums against the relaxation radii.
pub const BOUND_TOL: f64 = 1e-9;

/// Nearest integer to `|e|`, ties toward zero.
pub fn flip_count(e: f64) -> usize {
    let a = e.abs();
    let floor = a.floor();
    if a - floor > 0.5 {
        floor as usize + 1
    } else {
        floor as usize
    }
}

/// `|sum|` of each consecutive group of `group_len` perturbations.
pub fn case_of(perturbations: &[f64], group_len: usize) -> Vec<f64> {
    assert!(group_len > 0, "group length must be positive");
    perturbations
        .chunks(group_len)
        .map(|g| g.iter().sum::<f64>().abs())
        .collect()
}

/// Per-channel perturbation state after rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationState {
    pub n: usize,
    pub k: usize,
    pub delta: Vec<f64>,
}

impl PerturbationState {
    pub fn kernel(&self, n: usize) -> &[f64] {
        &self.delta[n * self.k..(n + 1) * self.k]
    }

    pub fn kernel_sum(&self, n: usize) -> f64 {
        self.kernel(n).iter().sum()
    }

    pub fn kernel_sums(&self) -> Vec<f64> {
        (0..self.n).map(|n| self.kernel_sum(n)).collect()
    }

    pub fn channel_sum(&self) -> f64 {
        self.kernel_sums().iter().sum()
    }
}

/// Element-wise stage: scale, round, record perturbations.
pub fn squant_e(
    channel: &[f64],
    k: usize,
    scale: f64,
    grid: QuantGrid,
) -> (Vec<i32>, PerturbationState) {
    assert!(scale > 0.0, "scale must be positive");
    assert!(k > 0 && channel.len().is_multiple_of(k), "channel length not a multiple of k");
    let (codes, delta) = channel
        .iter()
        .map(|&w| {
            let scaled = w / scale;
            let code = round_to_grid(scaled, grid);
            (code, f64::from(code) - scaled)
        })
        .unzip();
    let state = PerturbationState {
        n: channel.len() / k,
        k,
        delta,
    };
    (codes, state)
}

/// Constraints every single flip must respect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipRules {
    pub grid: QuantGrid,
    pub r_e: f64,
}

impl FlipRules {
    pub fn new(grid: QuantGrid) -> Self {
        Self {
            grid,
            r_e: QuantConfig::DEFAULT_R_E,
        }
    }

    fn allows(&self, code: i32, delta: f64) -> bool {
        let step = step_for(delta);
        step != 0
            && self.grid.contains(code + step)
            && (delta + f64::from(step)).abs() <= self.r_e + BOUND_TOL
    }
}

/// Code change that moves `delta` one step toward the opposite sign.
fn step_for(delta: f64) -> i32 {
    if delta > 0.0 {
        -1
    } else if delta < 0.0 {
        1
    } else {
        0
    }
}

/// Indices of entries sharing the sign of `sum`, largest magnitude first,
/// lowest index on ties.
fn ranked_same_sign(sum: f64, values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len())
        .filter(|&i| values[i] * sum > 0.0)
        .collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(a.cmp(&b))
    });
    order
}

/// What one call of the flip routine did to a group.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipOutcome {
    /// Signed group sum before flipping.
    pub sum: f64,
    /// Flips the group needed.
    pub target: usize,
    /// Flipped positions, in selection order.
    pub flipped: Vec<usize>,
    /// Signed group sum after flipping.
    pub residual: f64,
    /// Fewer than `target` legal candidates were available.
    pub saturated: bool,
}

impl FlipOutcome {
    /// A group that was left as rounded.
    pub fn untouched(values: &[f64]) -> Self {
        let sum = values.iter().sum();
        Self {
            sum,
            target: 0,
            flipped: Vec::new(),
            residual: sum,
            saturated: false,
        }
    }
}

/// Flip routine over one group of elements: flip the `round(|e|)` largest
/// same-sign perturbations, skipping any the grid or `r_e` forbids.
pub fn squant_flip(codes: &mut [i32], delta: &mut [f64], rules: FlipRules) -> FlipOutcome {
    let sum: f64 = delta.iter().sum();
    squant_flip_n(codes, delta, rules, flip_count(sum))
}

/// [`squant_flip`] with the flip count forced to `count`.
pub fn squant_flip_n(
    codes: &mut [i32],
    delta: &mut [f64],
    rules: FlipRules,
    count: usize,
) -> FlipOutcome {
    assert_eq!(codes.len(), delta.len());
    let sum: f64 = delta.iter().sum();
    let flipped: Vec<usize> = if count == 0 {
        Vec::new()
    } else {
        ranked_same_sign(sum, delta)
            .into_iter()
            .filter(|&i| rules.allows(codes[i], delta[i]))
            .take(count)
            .collect()
    };
    for &i in &flipped {
        let step = step_for(delta[i]);
        codes[i] += step;
        delta[i] += f64::from(step);
    }
    FlipOutcome {
        sum,
        target: count,
        saturated: flipped.len() < count,
        residual: delta.iter().sum(),
        flipped,
    }
}

/// The single element of a kernel the channel stage may flip.
///
/// `value` is the element's current perturbation; flipping it moves the
/// kernel sum by `-sign(value)`. A zero value marks an inert kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipCandidate {
    pub index: usize,
    pub value: f64,
}

impl FlipCandidate {
    pub const INERT: FlipCandidate = FlipCandidate {
        index: 0,
        value: 0.0,
    };

    pub fn is_inert(&self) -> bool {
        self.value == 0.0
    }
}

/// Pick the channel-stage candidate of a kernel after its kernel stage.
///
/// `original` holds the rounding perturbations, `current` and `codes` the
/// state after `outcome` was applied.
///
/// * Over-flipped kernel (`k > |e|`): the last element flipped, whose flip
///   back costs the least. `0.5 <= |value| < 1`.
/// * Otherwise: the largest same-sign element not yet flipped.
///   `|value| <= 0.5`.
pub fn update_perturbation(
    original: &[f64],
    current: &[f64],
    codes: &[i32],
    outcome: &FlipOutcome,
    rules: FlipRules,
) -> FlipCandidate {
    let e: f64 = original.iter().sum();
    if let Some(&last) = outcome.flipped.last() {
        if outcome.flipped.len() as f64 > e.abs() {
            return FlipCandidate {
                index: last,
                value: current[last],
            };
        }
    }
    ranked_same_sign(e, original)
        .into_iter()
        .find(|&i| !outcome.flipped.contains(&i) && rules.allows(codes[i], current[i]))
        .map(|i| FlipCandidate {
            index: i,
            value: current[i],
        })
        .unwrap_or(FlipCandidate::INERT)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Kernel,
    Channel,
}

/// One code mutation, in application order within its channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipEvent {
    pub n: usize,
    pub i: usize,
    pub stage: Stage,
    pub step: i32,
}

/// Outcome of quantizing a single output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelResult {
    pub scale: f64,
    pub codes: Vec<i32>,
    /// Codes straight from rounding.
    pub rounded: Vec<i32>,
    pub state: PerturbationState,
    pub events: Vec<FlipEvent>,
    pub kernel_saturated: Vec<bool>,
    pub channel_saturated: bool,
    /// Kernel flips the kernel stage asked for, per kernel.
    pub kernel_targets: Vec<usize>,
}

impl ChannelResult {
    pub fn kernel_flips(&self) -> usize {
        self.events.iter().filter(|e| e.stage == Stage::Kernel).count()
    }

    pub fn channel_flips(&self) -> usize {
        self.events.iter().filter(|e| e.stage == Stage::Channel).count()
    }
}

/// Run the configured stages on one output channel of `n * k` weights.
pub fn squant_channel(channel: &[f64], k: usize, config: &QuantConfig) -> Result<ChannelResult> {
    let scale = compute_scale(channel, config.grid)?;
    Ok(squant_channel_scaled(channel, k, scale, config))
}

pub fn squant_channel_scaled(
    channel: &[f64],
    k: usize,
    scale: f64,
    config: &QuantConfig,
) -> ChannelResult {
    let rules = FlipRules {
        grid: config.grid,
        r_e: config.r_e,
    };
    let (rounded, mut state) = squant_e(channel, k, scale, config.grid);
    let mut codes = rounded.clone();
    let n = state.n;
    let mut events = Vec::new();
    let mut kernel_saturated = vec![false; n];
    let mut kernel_targets = vec![0; n];
    let run_kernel = config.mode.kernel_stage() && k > 1;
    let mut candidates = Vec::with_capacity(if config.mode.channel_stage() { n } else { 0 });

    for kn in 0..n {
        let range = kn * k..(kn + 1) * k;
        let original: Vec<f64> = state.delta[range.clone()].to_vec();
        let outcome = if run_kernel {
            squant_flip(&mut codes[range.clone()], &mut state.delta[range.clone()], rules)
        } else {
            FlipOutcome::untouched(&original)
        };
        kernel_saturated[kn] = outcome.saturated;
        kernel_targets[kn] = outcome.target;
        for &i in &outcome.flipped {
            events.push(FlipEvent {
                n: kn,
                i,
                stage: Stage::Kernel,
                step: codes[kn * k + i] - rounded[kn * k + i],
            });
        }
        if config.mode.channel_stage() {
            candidates.push(update_perturbation(
                &original,
                &state.delta[range.clone()],
                &codes[range],
                &outcome,
                rules,
            ));
        }
    }

    let mut channel_saturated = false;
    if config.mode.channel_stage() {
        let values: Vec<f64> = candidates.iter().map(|c| c.value).collect();
        let sum = state.channel_sum();
        let wanted = flip_count(sum);
        let target = wanted.min(config.topk_cap_c);
        let kernel_sums = state.kernel_sums();
        let chosen: Vec<usize> = if target == 0 {
            Vec::new()
        } else {
            ranked_same_sign(sum, &values)
                .into_iter()
                .filter(|&kn| {
                    let c = candidates[kn];
                    let idx = kn * k + c.index;
                    let after = kernel_sums[kn] + f64::from(step_for(c.value));
                    rules.allows(codes[idx], state.delta[idx])
                        && (!run_kernel || after.abs() <= config.r_k + BOUND_TOL)
                })
                .take(target)
                .collect()
        };
        channel_saturated = chosen.len() < wanted;
        for kn in chosen {
            let c = candidates[kn];
            let idx = kn * k + c.index;
            let step = step_for(state.delta[idx]);
            codes[idx] += step;
            state.delta[idx] += f64::from(step);
            events.push(FlipEvent {
                n: kn,
                i: c.index,
                stage: Stage::Channel,
                step,
            });
        }
    }

    ChannelResult {
        scale,
        codes,
        rounded,
        state,
        events,
        kernel_saturated,
        channel_saturated,
        kernel_targets,
    }
}

/// A flipped element of the final result: its code differs from rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlippedElement {
    pub m: usize,
    pub n: usize,
    pub i: usize,
    pub direction: i32,
}

/// The flipped set of a tensor plus residual CASE per kernel and channel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlipRecord {
    pub flipped: Vec<FlippedElement>,
    pub kernel_case: Vec<f64>,
    pub channel_case: Vec<f64>,
}

/// Per-tensor summary written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub name: String,
    pub mode: Mode,
    pub bit_width: u32,
    pub r_e: f64,
    pub r_k: f64,
    pub r_c: f64,
    pub topk_cap_c: usize,
    pub kernel_flips: usize,
    pub channel_flips: usize,
    pub flipped_elements: usize,
    pub saturated_kernels: Vec<[usize; 2]>,
    pub saturated_channels: Vec<usize>,
    pub channel_case: Vec<f64>,
    pub max_kernel_case: f64,
    pub timing_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub source: WeightTensor,
    pub config: QuantConfig,
    pub codes: Vec<i32>,
    pub scales: Vec<f64>,
    pub channels: Vec<ChannelResult>,
    pub record: FlipRecord,
    pub report: QuantReport,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Vec<f64> {
        let len = self.source.channel_len();
        self.codes
            .chunks_exact(len)
            .zip(&self.scales)
            .flat_map(|(c, &s)| c.iter().map(move |&q| s * f64::from(q)))
            .collect()
    }

    /// Final perturbations in the scaled domain, flat `(m, n, i)` order.
    pub fn deltas(&self) -> Vec<f64> {
        self.channels
            .iter()
            .flat_map(|c| c.state.delta.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    /// Output channels processed on the rayon pool.
    Parallel,
}

pub fn squant_tensor(tensor: &WeightTensor, config: &QuantConfig) -> Result<QuantizedTensor> {
    squant_tensor_with(tensor, config, Execution::Sequential)
}

pub fn squant_tensor_with(
    tensor: &WeightTensor,
    config: &QuantConfig,
    execution: Execution,
) -> Result<QuantizedTensor> {
    config.validate()?;
    let started = Instant::now();
    let k = tensor.k();
    let channels: Vec<ChannelResult> = match execution {
        Execution::Sequential => tensor
            .channels()
            .map(|c| squant_channel(c, k, config))
            .collect::<Result<_>>()?,
        Execution::Parallel => tensor
            .data
            .par_chunks_exact(tensor.channel_len())
            .map(|c| squant_channel(c, k, config))
            .collect::<Result<_>>()?,
    };
    let timing_us = started.elapsed().as_micros() as u64;
    Ok(assemble(tensor, config, channels, timing_us))
}

fn assemble(
    tensor: &WeightTensor,
    config: &QuantConfig,
    channels: Vec<ChannelResult>,
    timing_us: u64,
) -> QuantizedTensor {
    let mut codes = Vec::with_capacity(tensor.data.len());
    let mut scales = Vec::with_capacity(tensor.m);
    let mut record = FlipRecord::default();
    let mut saturated_kernels = Vec::new();
    let mut saturated_channels = Vec::new();
    let (mut kernel_flips, mut channel_flips) = (0, 0);
    let k = tensor.k();

    for (m, ch) in channels.iter().enumerate() {
        codes.extend_from_slice(&ch.codes);
        scales.push(ch.scale);
        for (flat, (&c, &r)) in ch.codes.iter().zip(&ch.rounded).enumerate() {
            if c != r {
                record.flipped.push(FlippedElement {
                    m,
                    n: flat / k,
                    i: flat % k,
                    direction: c - r,
                });
            }
        }
        let sums = ch.state.kernel_sums();
        record.kernel_case.extend(sums.iter().map(|s| s.abs()));
        record.channel_case.push(sums.iter().sum::<f64>().abs());
        saturated_kernels.extend(
            ch.kernel_saturated
                .iter()
                .enumerate()
                .filter(|(_, &s)| s)
                .map(|(n, _)| [m, n]),
        );
        if ch.channel_saturated {
            saturated_channels.push(m);
        }
        kernel_flips += ch.kernel_flips();
        channel_flips += ch.channel_flips();
    }

    let report = QuantReport {
        name: tensor.name.clone(),
        mode: config.mode,
        bit_width: config.grid.bits(),
        r_e: config.r_e,
        r_k: config.r_k,
        r_c: config.r_c,
        topk_cap_c: config.topk_cap_c,
        kernel_flips,
        channel_flips,
        flipped_elements: record.flipped.len(),
        saturated_kernels,
        saturated_channels,
        channel_case: record.channel_case.clone(),
        max_kernel_case: record.kernel_case.iter().copied().fold(0.0, f64::max),
        timing_us,
    };

    QuantizedTensor {
        source: tensor.clone(),
        config: *config,
        codes,
        scales,
        channels,
        record,
        report,
    }
}

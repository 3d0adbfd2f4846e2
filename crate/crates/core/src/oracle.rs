//! Independent checks for the flip engine.
//!
//! Nothing here calls into the engine's selection logic except
//! [`approximation_precision`], which replays the engine's flips against a
//! coefficient-weighted objective.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{squant_tensor, Stage};
use crate::error::{Error, Result};
use crate::quant::{round_to_grid, Mode, QuantConfig, QuantGrid, WeightTensor};

/// Largest element count the ±1 neighbourhood search accepts.
pub const BRUTE_FORCE_LIMIT: usize = 20;
/// Largest kernel the full-grid search accepts.
pub const FULL_GRID_LIMIT: usize = 6;

const FEASIBILITY_TOL: f64 = 1e-12;

/// Uniform-coefficient data-free objective over one output channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `sum(d^2) + sum_n (sum_i d)^2`
    ElementKernel,
    /// `sum(d^2) + sum_n (sum_i d)^2 + (sum d)^2`
    Full,
}

/// Evaluate `objective` on a channel's perturbations, `k` per kernel.
pub fn data_free_objective(delta: &[f64], k: usize, objective: Objective) -> f64 {
    let element: f64 = delta.iter().map(|d| d * d).sum();
    let mut kernel = 0.0;
    let mut channel = 0.0;
    for g in delta.chunks(k) {
        let s: f64 = g.iter().sum();
        kernel += s * s;
        channel += s;
    }
    match objective {
        Objective::ElementKernel => element + kernel,
        Objective::Full => element + kernel + channel * channel,
    }
}

/// Optional CASE constraints on the searched assignments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseBounds {
    pub kernel: Option<f64>,
    pub channel: Option<f64>,
}

impl CaseBounds {
    pub const NONE: CaseBounds = CaseBounds {
        kernel: None,
        channel: None,
    };

    /// Kernel CASE at most one half, as the kernel stage guarantees.
    pub const KERNEL: CaseBounds = CaseBounds {
        kernel: Some(0.5),
        channel: None,
    };

    /// Relaxed kernel bound plus the channel bound of the full progression.
    pub const PROGRESSIVE: CaseBounds = CaseBounds {
        kernel: Some(1.0),
        channel: Some(0.5),
    };

    fn admits(&self, delta: &[f64], k: usize) -> bool {
        let mut total = 0.0;
        for g in delta.chunks(k) {
            let s: f64 = g.iter().sum();
            if let Some(b) = self.kernel {
                if s.abs() > b + FEASIBILITY_TOL {
                    return false;
                }
            }
            total += s;
        }
        match self.channel {
            Some(b) => total.abs() <= b + FEASIBILITY_TOL,
            None => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub codes: Vec<i32>,
    pub value: f64,
}

/// Exhaustive minimum of `objective` over codes within one step of rounding.
///
/// `scaled` holds one channel of weights already divided by its scale, `k`
/// per kernel. Ties resolve to the lexicographically smallest code vector.
pub fn brute_force_min(
    scaled: &[f64],
    k: usize,
    grid: QuantGrid,
    objective: Objective,
    bounds: CaseBounds,
) -> Result<Option<SearchResult>> {
    if scaled.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::SearchTooLarge {
            size: scaled.len(),
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if k == 0 || scaled.is_empty() || !scaled.len().is_multiple_of(k) {
        return Err(Error::Validation(format!(
            "channel of {} elements does not split into kernels of {k}",
            scaled.len()
        )));
    }
    let choices: Vec<Vec<i32>> = scaled
        .iter()
        .map(|&x| {
            let r = round_to_grid(x, grid);
            [r - 1, r, r + 1]
                .into_iter()
                .filter(|&c| grid.contains(c))
                .collect()
        })
        .collect();
    Ok(exhaust(scaled, k, &choices, objective, bounds))
}

/// Exhaustive minimum over every grid code for a single kernel.
pub fn brute_force_full_grid(
    scaled: &[f64],
    grid: QuantGrid,
    objective: Objective,
    bounds: CaseBounds,
) -> Result<Option<SearchResult>> {
    if scaled.is_empty() || scaled.len() > FULL_GRID_LIMIT {
        return Err(Error::SearchTooLarge {
            size: scaled.len(),
            limit: FULL_GRID_LIMIT,
        });
    }
    let all: Vec<i32> = (grid.min()..=grid.max()).collect();
    let choices = vec![all; scaled.len()];
    Ok(exhaust(scaled, scaled.len(), &choices, objective, bounds))
}

fn better(a: &SearchResult, b: &SearchResult) -> bool {
    a.value < b.value || (a.value == b.value && a.codes < b.codes)
}

fn exhaust(
    scaled: &[f64],
    k: usize,
    choices: &[Vec<i32>],
    objective: Objective,
    bounds: CaseBounds,
) -> Option<SearchResult> {
    // Split on the first element's options and search the rest serially.
    choices[0]
        .par_iter()
        .filter_map(|&first| {
            let mut pos = vec![0usize; choices.len()];
            let mut codes: Vec<i32> = choices.iter().map(|c| c[0]).collect();
            codes[0] = first;
            let mut delta: Vec<f64> = codes
                .iter()
                .zip(scaled)
                .map(|(&c, &x)| f64::from(c) - x)
                .collect();
            let mut best: Option<SearchResult> = None;
            loop {
                if bounds.admits(&delta, k) {
                    let cand = SearchResult {
                        codes: codes.clone(),
                        value: data_free_objective(&delta, k, objective),
                    };
                    if best.as_ref().is_none_or(|b| better(&cand, b)) {
                        best = Some(cand);
                    }
                }
                // odometer over positions 1..
                let mut j = choices.len() - 1;
                loop {
                    if j == 0 {
                        return best;
                    }
                    pos[j] += 1;
                    if pos[j] < choices[j].len() {
                        break;
                    }
                    pos[j] = 0;
                    codes[j] = choices[j][0];
                    delta[j] = f64::from(codes[j]) - scaled[j];
                    j -= 1;
                }
                codes[j] = choices[j][pos[j]];
                delta[j] = f64::from(codes[j]) - scaled[j];
            }
        })
        .reduce_with(|a, b| if better(&b, &a) { b } else { a })
}

/// Positive coefficients splitting a channel Gram matrix into a diagonal
/// part, one constant block per kernel, and one constant for the channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramDecomposition {
    pub n: usize,
    pub k: usize,
    /// Per element, `n * k` values.
    pub e_coeffs: Vec<f64>,
    /// Per kernel.
    pub k_coeffs: Vec<f64>,
    pub c_coeff: f64,
    pub epsilon: f64,
    pub epsilon_prime: f64,
}

impl GramDecomposition {
    /// All coefficients one: the precise objective reduces to
    /// [`Objective::Full`].
    pub fn uniform(n: usize, k: usize) -> Self {
        Self {
            n,
            k,
            e_coeffs: vec![1.0; n * k],
            k_coeffs: vec![1.0; n],
            c_coeff: 1.0,
            epsilon: 0.0,
            epsilon_prime: 0.0,
        }
    }

    /// Dense `E + K + C`, row-major `nk x nk`.
    pub fn reconstruct(&self) -> Vec<f64> {
        let nk = self.n * self.k;
        let mut out = vec![self.c_coeff; nk * nk];
        for row in 0..nk {
            for col in 0..nk {
                if row / self.k == col / self.k {
                    out[row * nk + col] += self.k_coeffs[row / self.k];
                }
            }
            out[row * nk + row] += self.e_coeffs[row];
        }
        out
    }
}

/// Split `|gram|` into element, kernel and channel coefficients.
///
/// The channel constant is `(1 - epsilon)` times the smallest magnitude
/// entry; each kernel constant is `(1 - epsilon_prime)` times the smallest
/// entry of its diagonal block after removing the channel constant; the
/// element coefficient takes what is left of each diagonal entry.
pub fn decompose_gram(
    gram: &[f64],
    n: usize,
    k: usize,
    epsilon: f64,
    epsilon_prime: f64,
) -> Result<GramDecomposition> {
    let nk = n * k;
    if nk == 0 || gram.len() != nk * nk {
        return Err(Error::Validation(format!(
            "gram has {} entries, expected {nk}x{nk}",
            gram.len()
        )));
    }
    for (name, v) in [("epsilon", epsilon), ("epsilon_prime", epsilon_prime)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Validation(format!("{name} = {v} outside (0, 1)")));
        }
    }
    if let Some(bad) = gram.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite gram entry at {bad}")));
    }
    for r in 0..nk {
        for c in r + 1..nk {
            let (a, b) = (gram[r * nk + c], gram[c * nk + r]);
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::Validation(format!(
                    "gram not symmetric at ({r}, {c}): {a} vs {b}"
                )));
            }
        }
    }

    let abs: Vec<f64> = gram.iter().map(|v| v.abs()).collect();
    let (argmin, min) = abs
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    if min == 0.0 {
        return Err(Error::DegenerateGram {
            row: argmin / nk,
            col: argmin % nk,
            value: gram[argmin],
        });
    }
    let c = (1.0 - epsilon) * min;

    let mut k_coeffs = Vec::with_capacity(n);
    let mut e_coeffs = Vec::with_capacity(nk);
    for kn in 0..n {
        let block = kn * k..(kn + 1) * k;
        let block_min = block
            .clone()
            .flat_map(|r| block.clone().map(move |col| (r, col)))
            .map(|(r, col)| abs[r * nk + col] - c)
            .fold(f64::INFINITY, f64::min);
        let kc = (1.0 - epsilon_prime) * block_min;
        k_coeffs.push(kc);
        for r in block {
            e_coeffs.push(abs[r * nk + r] - c - kc);
        }
    }

    Ok(GramDecomposition {
        n,
        k,
        e_coeffs,
        k_coeffs,
        c_coeff: c,
        epsilon,
        epsilon_prime,
    })
}

/// Average of `draws` outer products of random vectors with positive mean.
pub fn synthetic_gram<R: Rng + ?Sized>(
    dim: usize,
    draws: usize,
    mean: f64,
    std_dev: f64,
    rng: &mut R,
) -> Vec<f64> {
    let normal = Normal::new(mean, std_dev).expect("valid normal parameters");
    let mut gram = vec![0.0; dim * dim];
    let mut x = vec![0.0; dim];
    for _ in 0..draws {
        for v in x.iter_mut() {
            *v = normal.sample(rng);
        }
        for r in 0..dim {
            for c in 0..dim {
                gram[r * dim + c] += x[r] * x[c];
            }
        }
    }
    let inv = 1.0 / draws as f64;
    gram.iter_mut().for_each(|v| *v *= inv);
    gram
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub element_term: f64,
    pub kernel_term: f64,
    pub channel_term: f64,
    pub total: f64,
}

/// Coefficient-weighted objective of one channel's perturbations.
pub fn eval_precise_objective(delta: &[f64], d: &GramDecomposition) -> ObjectiveBreakdown {
    assert_eq!(delta.len(), d.n * d.k, "perturbation length does not match decomposition");
    let element_term: f64 = delta.iter().zip(&d.e_coeffs).map(|(x, e)| e * x * x).sum();
    let mut kernel_term = 0.0;
    let mut total_sum = 0.0;
    for (g, kc) in delta.chunks(d.k).zip(&d.k_coeffs) {
        let s: f64 = g.iter().sum();
        kernel_term += kc * s * s;
        total_sum += s;
    }
    let channel_term = d.c_coeff * total_sum * total_sum;
    ObjectiveBreakdown {
        element_term,
        kernel_term,
        channel_term,
        total: element_term + kernel_term + channel_term,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrecisionCount {
    pub flipped: usize,
    pub correct: usize,
}

impl std::ops::Add for PrecisionCount {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            flipped: self.flipped + o.flipped,
            correct: self.correct + o.correct,
        }
    }
}

/// Approximation precision split by the stage that applied each flip.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub kernel: PrecisionCount,
    pub channel: PrecisionCount,
}

impl PrecisionReport {
    pub fn total(&self) -> PrecisionCount {
        self.kernel + self.channel
    }

    /// Precision of the last stage the mode runs, the figure quoted for a
    /// mode: channel-stage flips for `ec`/`ekc`, kernel-stage flips for `ek`.
    pub fn final_stage(&self, mode: Mode) -> PrecisionCount {
        if mode.channel_stage() {
            self.channel
        } else {
            self.kernel
        }
    }
}

impl PrecisionCount {
    /// Correct over flipped; vacuously one with no flips.
    pub fn ratio(&self) -> f64 {
        if self.flipped == 0 {
            1.0
        } else {
            self.correct as f64 / self.flipped as f64
        }
    }
}

/// Quantize `tensor` and replay each channel's flips in application order,
/// counting those that lower the precise objective at the moment they are
/// applied.
///
/// `decompositions` holds one entry per output channel, or a single entry
/// shared by all channels.
pub fn approximation_precision(
    tensor: &WeightTensor,
    config: &QuantConfig,
    decompositions: &[GramDecomposition],
) -> Result<PrecisionReport> {
    if decompositions.len() != 1 && decompositions.len() != tensor.m {
        return Err(Error::Validation(format!(
            "{} decompositions for {} channels",
            decompositions.len(),
            tensor.m
        )));
    }
    for d in decompositions {
        if d.n != tensor.n || d.k != tensor.k() {
            return Err(Error::Validation(format!(
                "decomposition is {}x{}, tensor channels are {}x{}",
                d.n,
                d.k,
                tensor.n,
                tensor.k()
            )));
        }
    }
    let q = squant_tensor(tensor, config)?;
    let k = tensor.k();
    let mut report = PrecisionReport::default();
    for (m, ch) in q.channels.iter().enumerate() {
        let dec = &decompositions[if decompositions.len() == 1 { 0 } else { m }];
        let weights = tensor.channel(m);
        let mut delta: Vec<f64> = ch
            .rounded
            .iter()
            .zip(weights)
            .map(|(&c, &w)| f64::from(c) - w / ch.scale)
            .collect();
        let mut current = eval_precise_objective(&delta, dec).total;
        for ev in &ch.events {
            delta[ev.n * k + ev.i] += f64::from(ev.step);
            let next = eval_precise_objective(&delta, dec).total;
            let count = match ev.stage {
                Stage::Kernel => &mut report.kernel,
                Stage::Channel => &mut report.channel,
            };
            count.flipped += 1;
            if next < current {
                count.correct += 1;
            }
            current = next;
        }
    }
    Ok(report)
}

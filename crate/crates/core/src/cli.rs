//! Implementations of the `squant` subcommands.
//!
//! Each command writes human-readable progress to the supplied writer and
//! returns a [`CmdError`] carrying the process exit code on failure.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::engine::{squant_channel, squant_tensor_with, Execution, BOUND_TOL};
use crate::error::Error;
use crate::eval::{evaluate, EvalResult, SyntheticModelSpec};
use crate::model_io::{load_artifact, load_model, store_artifact, QuantizedArtifact};
use crate::oracle::{brute_force_min, data_free_objective, CaseBounds, Objective, BRUTE_FORCE_LIMIT};
use crate::quant::{compute_scale, round_to_grid, Mode, QuantConfig, QuantGrid, WeightTensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SCHEMA: i32 = 1;
pub const EXIT_INVARIANT: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;
pub const EXIT_ORACLE: i32 = 4;

#[derive(Debug)]
pub struct CmdError {
    pub code: i32,
    pub message: String,
}

impl CmdError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CmdError {}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Invariant { .. } => EXIT_INVARIANT,
            _ => EXIT_SCHEMA,
        };
        CmdError::new(code, e.to_string())
    }
}

fn out_err(e: std::io::Error) -> CmdError {
    CmdError::new(EXIT_SCHEMA, format!("cannot write output: {e}"))
}

#[derive(Debug, Clone)]
pub struct QuantizeArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    pub config: QuantConfig,
    pub execution: Execution,
}

pub fn cmd_quantize(args: &QuantizeArgs, out: &mut dyn Write) -> Result<Vec<QuantizedArtifact>, CmdError> {
    args.config.validate()?;
    let tensors = load_model(&args.input)?;
    let mut artifacts = Vec::with_capacity(tensors.len());
    for t in &tensors {
        let q = squant_tensor_with(t, &args.config, args.execution)?;
        let r = &q.report;
        writeln!(
            out,
            "{:<28} {:>9} weights  {:>8} us  kernel flips {:>7}  channel flips {:>6}  saturated k/c {}/{}",
            r.name,
            t.data.len(),
            r.timing_us,
            r.kernel_flips,
            r.channel_flips,
            r.saturated_kernels.len(),
            r.saturated_channels.len()
        )
        .map_err(out_err)?;
        artifacts.push(QuantizedArtifact::from_quantized(&q));
    }
    store_artifact(&args.output, &artifacts)?;
    let total_us: u64 = artifacts.iter().map(|a| a.report.timing_us).sum();
    writeln!(
        out,
        "quantized {} tensors ({} bit, mode {}) in {} us -> {}",
        artifacts.len(),
        args.config.grid.bits(),
        args.config.mode,
        total_us,
        args.output.display()
    )
    .map_err(out_err)?;
    Ok(artifacts)
}

/// First element or group that breaks a recorded bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub tensor: String,
    pub m: usize,
    pub n: Option<usize>,
    pub i: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<usize>| v.map_or_else(|| "*".to_string(), |x| x.to_string());
        write!(
            f,
            "({}, m={}, n={}, i={}): {}",
            self.tensor,
            self.m,
            opt(self.n),
            opt(self.i),
            self.message
        )
    }
}

/// Recompute perturbations of one stored tensor against its source and check
/// the bounds its mode promises.
pub fn verify_tensor(art: &QuantizedArtifact, src: &WeightTensor) -> Result<(), Violation> {
    let grid = QuantGrid::new(art.bit_width).map_err(|e| Violation {
        tensor: art.name.clone(),
        m: 0,
        n: None,
        i: None,
        message: e.to_string(),
    })?;
    let report = &art.report;
    let k = src.k();
    let mode = art.mode;
    for m in 0..src.m {
        let fail = |n: Option<usize>, i: Option<usize>, message: String| Violation {
            tensor: art.name.clone(),
            m,
            n,
            i,
            message,
        };
        let scale = f64::from(art.scales[m]);
        let weights = src.channel(m);
        let codes = &art.codes[m * src.channel_len()..(m + 1) * src.channel_len()];
        let mut channel_sum = 0.0;
        for n in 0..src.n {
            let mut kernel_sum = 0.0;
            for i in 0..k {
                let idx = n * k + i;
                let scaled = weights[idx] / scale;
                let code = codes[idx];
                let rounded = round_to_grid(scaled, grid);
                let delta = f64::from(code) - scaled;
                kernel_sum += delta;
                if !grid.contains(code) {
                    return Err(fail(Some(n), Some(i), format!("code {code} outside [{}, {}]", grid.min(), grid.max())));
                }
                let step = code - rounded;
                if step.abs() > 1 {
                    return Err(fail(Some(n), Some(i), format!("code {code} is {step} steps from rounding ({rounded})")));
                }
                let clipped = (f64::from(rounded) - scaled).abs() > 0.5;
                if step == 0 {
                    if !clipped && delta.abs() > 0.5 + BOUND_TOL {
                        return Err(fail(Some(n), Some(i), format!("unflipped |delta| = {} > 0.5", delta.abs())));
                    }
                } else {
                    if mode == Mode::E {
                        return Err(fail(Some(n), Some(i), "mode e must not flip".into()));
                    }
                    let a = delta.abs();
                    if !(0.5 - BOUND_TOL..1.0).contains(&a) || a > report.r_e + BOUND_TOL {
                        return Err(fail(Some(n), Some(i), format!("flipped |delta| = {a} outside [0.5, 1.0)")));
                    }
                }
            }
            channel_sum += kernel_sum;
            let flagged = report.saturated_kernels.contains(&[m, n]);
            let bound = match mode {
                Mode::Ek => Some(0.5),
                Mode::Ekc => Some(report.r_k),
                _ => None,
            };
            if let Some(b) = bound {
                if !flagged && kernel_sum.abs() > b + BOUND_TOL {
                    return Err(fail(Some(n), None, format!("kernel CASE {} > {b}", kernel_sum.abs())));
                }
            }
        }
        if mode.channel_stage()
            && !report.saturated_channels.contains(&m)
            && channel_sum.abs() > report.r_c + BOUND_TOL
        {
            return Err(fail(None, None, format!("channel CASE {} > {}", channel_sum.abs(), report.r_c)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySummary {
    pub tensors: usize,
    pub flagged_kernels: usize,
    pub flagged_channels: usize,
}

pub fn cmd_verify(artifact_dir: &Path, source_dir: &Path, out: &mut dyn Write) -> Result<VerifySummary, CmdError> {
    let artifacts = load_artifact(artifact_dir)?;
    let sources = load_model(source_dir)?;
    let mut summary = VerifySummary {
        tensors: 0,
        flagged_kernels: 0,
        flagged_channels: 0,
    };
    for art in &artifacts {
        let src = sources
            .iter()
            .find(|s| s.name == art.name)
            .ok_or_else(|| CmdError::new(EXIT_SCHEMA, format!("source has no tensor `{}`", art.name)))?;
        if src.shape() != art.shape || src.kind != art.layer_kind {
            return Err(CmdError::new(
                EXIT_SCHEMA,
                format!("tensor `{}`: artifact shape {:?} vs source {:?}", art.name, art.shape, src.shape()),
            ));
        }
        verify_tensor(art, src).map_err(|v| CmdError::new(EXIT_VERIFY, format!("verification failed at {v}")))?;
        summary.tensors += 1;
        summary.flagged_kernels += art.report.saturated_kernels.len();
        summary.flagged_channels += art.report.saturated_channels.len();
        writeln!(out, "{:<28} ok (mode {})", art.name, art.mode).map_err(out_err)?;
    }
    writeln!(
        out,
        "verified {} tensors; saturation-flagged kernels {}, channels {}",
        summary.tensors, summary.flagged_kernels, summary.flagged_channels
    )
    .map_err(out_err)?;
    Ok(summary)
}

/// Outcome of comparing the engine to the exhaustive minimizer on one
/// random channel.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCase {
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub engine: f64,
    pub oracle: f64,
}

impl OracleCase {
    pub fn agrees(&self) -> bool {
        self.engine == self.oracle
            || (self.engine - self.oracle).abs() <= 1e-12 * self.engine.abs().max(self.oracle.abs())
    }
}

/// Random channel for oracle runs: `n` kernels of `k` standard normal
/// weights, sizes drawn uniformly up to the bounds.
pub fn oracle_channel(seed: u64, max_n: usize, max_k: usize) -> (usize, usize, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_n);
    let k = rng.random_range(1..=max_k);
    let w = (0..n * k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            f64::from(z as f32)
        })
        .collect();
    (n, k, w)
}

/// Engine kernel-stage objective against the exhaustive minimum over
/// assignments within one step of rounding whose kernel CASE is at most 0.5.
pub fn oracle_case(seed: u64, max_n: usize, max_k: usize, bits: u32) -> crate::error::Result<OracleCase> {
    let grid = QuantGrid::new(bits)?;
    let (n, k, w) = oracle_channel(seed, max_n, max_k);
    let config = QuantConfig::new(grid, Mode::Ek);
    let res = squant_channel(&w, k, &config)?;
    let engine = data_free_objective(&res.state.delta, k, Objective::ElementKernel);
    let scale = compute_scale(&w, grid)?;
    let scaled: Vec<f64> = w.iter().map(|&x| x / scale).collect();
    let best = brute_force_min(&scaled, k, grid, Objective::ElementKernel, CaseBounds::KERNEL)?
        .ok_or_else(|| Error::Validation(format!("seed {seed}: no assignment meets the kernel bound")))?;
    Ok(OracleCase {
        seed,
        n,
        k,
        engine,
        oracle: best.value,
    })
}

pub fn cmd_oracle(seeds: u64, max_n: usize, max_k: usize, out: &mut dyn Write) -> Result<u64, CmdError> {
    if max_n == 0 || max_k == 0 {
        return Err(CmdError::new(EXIT_SCHEMA, "--max-n and --max-k must be positive"));
    }
    if max_n * max_k > BRUTE_FORCE_LIMIT {
        return Err(CmdError::new(
            EXIT_SCHEMA,
            format!(
                "refusing --max-n {max_n} --max-k {max_k}: {} elements exceeds the brute-force limit of {BRUTE_FORCE_LIMIT} (3^{} assignments)",
                max_n * max_k,
                max_n * max_k
            ),
        ));
    }
    let mut equal = 0u64;
    for seed in 0..seeds {
        let case = oracle_case(seed, max_n, max_k, 4)?;
        if !case.agrees() {
            writeln!(out, "{equal}/{seeds} equal before mismatch").map_err(out_err)?;
            return Err(CmdError::new(
                EXIT_ORACLE,
                format!(
                    "mismatch at seed {seed} (n={}, k={}): engine {} vs oracle {}; reproduce with --seeds {}",
                    case.n,
                    case.k,
                    case.engine,
                    case.oracle,
                    seed + 1
                ),
            ));
        }
        equal += 1;
    }
    writeln!(out, "{equal}/{seeds} equal").map_err(out_err)?;
    Ok(equal)
}

pub fn read_model_spec(path: &Path) -> Result<SyntheticModelSpec, CmdError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CmdError::new(EXIT_SCHEMA, format!("cannot read {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    let spec: SyntheticModelSpec = serde_path_to_error::deserialize(de)
        .map_err(|e| CmdError::new(EXIT_SCHEMA, format!("schema error at `{}`: {}", e.path(), e.inner())))?;
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_eval(
    spec: &SyntheticModelSpec,
    bits: u32,
    inputs: usize,
    modes: &[Mode],
    json_out: Option<&Path>,
    out: &mut dyn Write,
) -> Result<EvalResult, CmdError> {
    let result = evaluate(spec, bits, inputs, modes)?;
    writeln!(out, "{:<6} {:>14}  per-layer MSE", "mode", "output MSE").map_err(out_err)?;
    for r in &result.modes {
        let layers: Vec<String> = r.layer_mse.iter().map(|v| format!("{v:.6e}")).collect();
        writeln!(out, "{:<6} {:>14.6e}  [{}]", r.mode, r.output_mse, layers.join(", ")).map_err(out_err)?;
    }
    let json = serde_json::to_string_pretty(&result)
        .map_err(|e| CmdError::new(EXIT_SCHEMA, e.to_string()))?;
    match json_out {
        Some(p) => std::fs::write(p, json + "\n")
            .map_err(|e| CmdError::new(EXIT_SCHEMA, format!("cannot write {}: {e}", p.display())))?,
        None => writeln!(out, "{json}").map_err(out_err)?,
    }
    Ok(result)
}

use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use squant::cli::{self, CmdError, QuantizeArgs, EXIT_SCHEMA};
use squant::eval::resnet18_like;
use squant::model_io::save_model;
use squant::{Execution, Mode, QuantConfig, QuantGrid};

#[derive(Parser)]
#[command(name = "squant", version, about = "Data-free weight quantization by CASE flipping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize every tensor of a model directory.
    Quantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long, default_value_t = 4)]
        wbit: u32,
        #[arg(long, default_value = "ekc")]
        mode: Mode,
        #[arg(long, default_value_t = QuantConfig::DEFAULT_R_E)]
        re: f64,
        #[arg(long, default_value_t = QuantConfig::DEFAULT_R_K)]
        rk: f64,
        #[arg(long, default_value_t = QuantConfig::DEFAULT_R_C)]
        rc: f64,
        #[arg(long = "topk-cap", default_value_t = QuantConfig::DEFAULT_TOPK_CAP_C)]
        topk_cap: usize,
        /// Process output channels on all cores.
        #[arg(long)]
        parallel: bool,
    },
    /// Check a quantized artifact against its source model.
    Verify {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        source: PathBuf,
    },
    /// Compare the engine to exhaustive search on random channels.
    Oracle {
        #[arg(long, default_value_t = 1000)]
        seeds: u64,
        #[arg(long = "max-n", default_value_t = 3)]
        max_n: usize,
        #[arg(long = "max-k", default_value_t = 4)]
        max_k: usize,
    },
    /// Output MSE of a synthetic model under several modes.
    Eval {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 4)]
        wbit: u32,
        #[arg(long, default_value_t = 256)]
        inputs: usize,
        #[arg(long, value_delimiter = ',', default_value = "e,ek,ec,ekc")]
        modes: Vec<Mode>,
        /// Write the JSON result here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write a synthetic model directory.
    Synth {
        #[arg(long = "out")]
        output: PathBuf,
        /// Synthetic model spec (JSON); omit for ResNet18-shaped weights.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CmdError> {
    match cli.command {
        Command::Quantize {
            input,
            output,
            wbit,
            mode,
            re,
            rk,
            rc,
            topk_cap,
            parallel,
        } => {
            let grid = QuantGrid::new(wbit)?;
            let config = QuantConfig {
                r_e: re,
                r_k: rk,
                r_c: rc,
                topk_cap_c: topk_cap,
                ..QuantConfig::new(grid, mode)
            };
            let execution = if parallel {
                Execution::Parallel
            } else {
                Execution::Sequential
            };
            cli::cmd_quantize(
                &QuantizeArgs {
                    input,
                    output,
                    config,
                    execution,
                },
                out,
            )?;
        }
        Command::Verify { artifact, source } => {
            cli::cmd_verify(&artifact, &source, out)?;
        }
        Command::Oracle {
            seeds,
            max_n,
            max_k,
        } => {
            cli::cmd_oracle(seeds, max_n, max_k, out)?;
        }
        Command::Eval {
            spec,
            wbit,
            inputs,
            modes,
            json,
        } => {
            let spec = cli::read_model_spec(&spec)?;
            cli::cmd_eval(&spec, wbit, inputs, &modes, json.as_deref(), out)?;
        }
        Command::Synth { output, spec, seed } => {
            let tensors = match spec {
                Some(path) => squant::eval::build_model(&cli::read_model_spec(&path)?)?,
                None => resnet18_like(seed),
            };
            save_model(&output, &tensors)?;
            writeln!(out, "wrote {} tensors to {}", tensors.len(), output.display())
                .map_err(|e| CmdError { code: EXIT_SCHEMA, message: e.to_string() })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_SCHEMA as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use serde::Serialize;

use fssk::oracle::{run_suites, Kernels, SuiteResult};
use fssk::tensor::{conv1x1, masked_minmax_normalize, BinaryMask, Tensor};

use crate::common::{write_json, OracleFailure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Fault {
    /// Nudges one output of the 1x1 convolution.
    Conv,
    /// Shifts every normalised region value.
    Minmax,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the results as JSON.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Swap in a deliberately broken kernel (harness self-check).
    #[arg(long, hide = true)]
    pub inject_fault: Option<Fault>,
}

fn broken_conv(x: &Tensor, w: &Tensor, b: &[f32]) -> fssk::Result<Tensor> {
    let mut t = conv1x1(x, w, b)?;
    t.data_mut()[0] += 1e-3;
    Ok(t)
}

fn broken_minmax(v: &Tensor, m: &BinaryMask) -> fssk::Result<Tensor> {
    let mut t = masked_minmax_normalize(v, m)?;
    for x in t.data_mut() {
        *x *= 0.999;
    }
    Ok(t)
}

#[derive(Serialize)]
struct Report<'a> {
    command: &'static str,
    config: &'a OracleArgs,
    passed: bool,
    suites: &'a [SuiteResult],
}

pub fn execute(args: OracleArgs) -> Result<()> {
    let mut kernels = Kernels::default();
    match args.inject_fault {
        Some(Fault::Conv) => kernels.conv1x1 = broken_conv,
        Some(Fault::Minmax) => kernels.masked_minmax_normalize = broken_minmax,
        None => {}
    }
    let results = run_suites(&kernels, args.seed);

    println!(
        "{:<26} {:>6} {:>12} {:>10} {:>8}  result",
        "suite", "cases", "max |diff|", "tolerance", "ms"
    );
    for r in &results {
        println!(
            "{:<26} {:>6} {:>12.3e} {:>10.0e} {:>8}  {}",
            r.name,
            r.cases,
            r.max_abs_diff,
            r.tolerance,
            r.elapsed_ms,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&SuiteResult> = results.iter().filter(|r| !r.passed).collect();
    for r in &failed {
        println!("failing case in {}: {}", r.name, r.failure.as_deref().unwrap_or("{}"));
    }
    if let Some(path) = &args.out {
        write_json(
            path,
            &Report {
                command: "oracle",
                config: &args,
                passed: failed.is_empty(),
                suites: &results,
            },
        )?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(OracleFailure(failed.len()).into())
    }
}

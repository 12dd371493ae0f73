use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use fssk::attention::{seeded_blocks, MaskStrategy, MaskingReport};
use fssk::episode::{generate_synthetic_episode, run_pipeline, PipelineConfig, SyntheticConfig};
use fssk::pmgm::{FusionWeights, DEFAULT_DELTA};
use fssk::rng::derive_seed;

use crate::common::{check_unit_interval, thread_pool, write_json, Size};

#[derive(Debug, Clone, Args, Serialize)]
pub struct MaskStatsArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value = "64x30x30")]
    pub size: Size,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    pub delta: f32,
    #[arg(long, default_value_t = 4)]
    pub cab: usize,
    #[arg(long)]
    pub distractor: bool,
    #[arg(long, default_value_t = 0.9)]
    pub cam_fidelity: f64,
    /// Output directory for mask_stats.csv and mask_stats.json.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

pub const CSV_HEADER: &str =
    "strategy,block,episodes,mean_ratio,min_ratio,max_ratio,mean_masked_cells,mean_masked_columns,fallbacks";

/// Per-block statistics for one strategy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockStats {
    pub strategy: MaskStrategy,
    pub block: usize,
    pub episodes: usize,
    pub mean_ratio: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub mean_masked_cells: f64,
    pub mean_masked_columns: f64,
    pub fallbacks: usize,
}

impl BlockStats {
    fn from_reports(strategy: MaskStrategy, block: usize, reports: &[&MaskingReport]) -> Self {
        let n = reports.len() as f64;
        let ratios = reports.iter().map(|r| r.ratio);
        Self {
            strategy,
            block,
            episodes: reports.len(),
            mean_ratio: ratios.clone().sum::<f64>() / n,
            min_ratio: ratios.clone().fold(f64::INFINITY, f64::min),
            max_ratio: ratios.fold(0.0, f64::max),
            mean_masked_cells: reports.iter().map(|r| r.masked_cells as f64).sum::<f64>() / n,
            mean_masked_columns: reports.iter().map(|r| r.masked_columns as f64).sum::<f64>() / n,
            fallbacks: reports.iter().filter(|r| r.fallback).count(),
        }
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.9},{:.9},{:.9},{:.3},{:.3},{}",
            self.strategy,
            self.block,
            self.episodes,
            self.mean_ratio,
            self.min_ratio,
            self.max_ratio,
            self.mean_masked_cells,
            self.mean_masked_columns,
            self.fallbacks
        )
    }
}

pub const STRATEGIES: [MaskStrategy; 2] = [MaskStrategy::Dicm, MaskStrategy::Cyctr];

/// Per-episode masking reports for both strategies on the same episodes and
/// weights: `result[episode][strategy][block]`.
pub fn collect_reports(args: &MaskStatsArgs) -> Result<Vec<[Vec<MaskingReport>; 2]>> {
    let c = args.size.channels;
    let fusion = FusionWeights::seeded(derive_seed(args.seed, 0), c)?;
    let blocks = seeded_blocks(derive_seed(args.seed, 1), args.cab, c)?;
    thread_pool()?.install(|| {
        (0..args.n)
            .into_par_iter()
            .map(|i| {
                let episode = generate_synthetic_episode(&SyntheticConfig {
                    seed: derive_seed(derive_seed(args.seed, 2), i as u64),
                    channels: c,
                    height: args.size.height,
                    width: args.size.width,
                    distractor: args.distractor,
                    cam_fidelity: args.cam_fidelity,
                    ..SyntheticConfig::default()
                })?;
                let run = |strategy| -> Result<Vec<MaskingReport>> {
                    let cfg = PipelineConfig {
                        delta: args.delta,
                        strategy,
                    };
                    let out = run_pipeline(std::slice::from_ref(&episode), &cfg, &fusion, &blocks)
                        .with_context(|| format!("episode {i}, strategy {strategy}"))?;
                    Ok(out.reports)
                };
                Ok([run(STRATEGIES[0])?, run(STRATEGIES[1])?])
            })
            .collect()
    })
}

pub fn summarise(args: &MaskStatsArgs, per_episode: &[[Vec<MaskingReport>; 2]]) -> Vec<BlockStats> {
    let mut rows = Vec::new();
    for (s, &strategy) in STRATEGIES.iter().enumerate() {
        for block in 0..args.cab {
            let reports: Vec<&MaskingReport> = per_episode.iter().map(|e| &e[s][block]).collect();
            rows.push(BlockStats::from_reports(strategy, block, &reports));
        }
    }
    rows
}

#[derive(Serialize)]
struct Report<'a> {
    command: &'static str,
    config: &'a MaskStatsArgs,
    rows: &'a [BlockStats],
}

pub fn execute(args: MaskStatsArgs) -> Result<()> {
    if args.n == 0 {
        bail!(fssk::Error::Config("--n must be at least 1".into()));
    }
    if args.cab == 0 {
        bail!(fssk::Error::Config("--cab must be at least 1".into()));
    }
    check_unit_interval("--delta", args.delta as f64, true)?;
    check_unit_interval("--cam-fidelity", args.cam_fidelity, false)?;

    let per_episode = collect_reports(&args)?;
    let rows = summarise(&args, &per_episode);

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut csv = format!("{CSV_HEADER}\n");
    for row in &rows {
        writeln!(csv, "{}", row.csv_row())?;
    }
    fs::write(args.out.join("mask_stats.csv"), &csv)?;
    write_json(
        &args.out.join("mask_stats.json"),
        &Report {
            command: "mask-stats",
            config: &args,
            rows: &rows,
        },
    )?;
    for row in &rows {
        eprintln!(
            "{:>5} block {}: mean ratio {:.6}%",
            row.strategy.to_string(),
            row.block,
            row.mean_ratio * 100.0
        );
    }
    Ok(())
}

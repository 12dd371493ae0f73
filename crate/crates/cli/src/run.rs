use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use fssk::attention::{seeded_blocks, MaskStrategy, MaskingReport, ProjectionWeights};
use fssk::episode::{
    baseline_prior, read_episode_dir, MANIFEST, run_pipeline, Episode, EpisodeManifest, PipelineConfig,
    PipelineOutput,
};
use fssk::fst;
use fssk::metrics::{aggregate, iou, EpisodeRecord, MetricSummary, DEFAULT_EPSILON};
use fssk::pmgm::{FusionWeights, DEFAULT_DELTA};
use fssk::rng::derive_seed;

use crate::common::{check_unit_interval, thread_pool, write_json};

/// Probability threshold that turns a prior into a predicted mask.
pub const PREDICTION_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Args, Serialize)]
pub struct RunArgs {
    /// Episode directories, or directories containing them.
    #[arg(required = true)]
    #[serde(skip)]
    pub episodes: Vec<PathBuf>,
    /// Seed for the fusion and attention weights.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CAM threshold.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    pub delta: f32,
    /// Attention masking: none, dicm or cyctr.
    #[arg(long, default_value = "none")]
    pub strategy: MaskStrategy,
    /// Decoder count.
    #[arg(long, default_value_t = 5)]
    pub blocks: usize,
    /// Cross-attention blocks in the decoder chain.
    #[arg(long, default_value_t = 4)]
    pub cab: usize,
    /// Clamp for the prior cross-entropy.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Fold label written to the metrics CSV.
    #[arg(long, default_value_t = 0)]
    pub fold: u32,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

impl RunArgs {
    fn validate(&self) -> Result<()> {
        check_unit_interval("--delta", self.delta as f64, true)?;
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            bail!(fssk::Error::Config(format!(
                "--epsilon {} must lie in (0, 0.5)",
                self.epsilon
            )));
        }
        if self.cab == 0 || self.cab > self.blocks {
            bail!(fssk::Error::Config(format!(
                "--cab {} must lie in 1..={} (--blocks)",
                self.cab, self.blocks
            )));
        }
        Ok(())
    }
}

/// Expands the positional arguments into episode directories. A directory
/// with a manifest is an episode; any other directory contributes its
/// episode subdirectories in name order.
pub fn resolve_episodes(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for path in paths {
        if path.join(MANIFEST).is_file() {
            found.push(path.clone());
            continue;
        }
        let entries = fs::read_dir(path).with_context(|| format!("reading {}", path.display()))?;
        let mut children: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(MANIFEST).is_file())
            .collect();
        if children.is_empty() {
            bail!(fssk::Error::Config(format!(
                "{} holds no episode directories",
                path.display()
            )));
        }
        children.sort();
        found.extend(children);
    }
    Ok(found)
}

#[derive(Debug, Clone, Serialize)]
struct Outputs {
    prior: String,
    baseline_prior: String,
    prediction: String,
    query_fused: String,
    support_fused: String,
    decoder_output: String,
}

#[derive(Debug, Clone, Serialize)]
struct EpisodeMetrics {
    iou: f64,
    prior_ce: f64,
    baseline_prior_ce: f64,
}

#[derive(Debug, Clone, Serialize)]
struct EpisodeReport {
    name: String,
    source: String,
    class_id: u32,
    k: usize,
    has_query_mask: bool,
    outputs: Outputs,
    metrics: Option<EpisodeMetrics>,
    masking: Vec<MaskingReport>,
}

#[derive(Debug, Serialize)]
struct Summary {
    pmgm: MetricSummary,
    baseline: MetricSummary,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    command: &'static str,
    config: &'a RunArgs,
    episodes: Vec<EpisodeReport>,
    /// Present when at least one episode has a query mask.
    summary: Option<Summary>,
}

struct Weights {
    fusion: FusionWeights,
    blocks: Vec<ProjectionWeights>,
}

fn weights_for(seed: u64, cab: usize, channels: usize) -> fssk::Result<Weights> {
    Ok(Weights {
        fusion: FusionWeights::seeded(derive_seed(seed, 0), channels)?,
        blocks: seeded_blocks(derive_seed(seed, 1), cab, channels)?,
    })
}

struct Evaluated {
    report: EpisodeReport,
    records: Option<(EpisodeRecord, EpisodeRecord)>,
}

fn write_outputs(dir: &Path, rel: &str, out: &PipelineOutput, baseline: &fssk::pmgm::PriorMap) -> Result<Outputs> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let file = |name: &str| format!("{rel}/{name}");
    fst::save_tensor(dir.join("prior.fst"), out.prior.grid())?;
    fst::save_tensor(dir.join("baseline_prior.fst"), baseline.grid())?;
    fst::save_mask(dir.join("prediction.fst"), &out.prior.to_mask(PREDICTION_THRESHOLD))?;
    fst::save_tensor(dir.join("query_fused.fst"), &out.query_fused)?;
    fst::save_tensor(dir.join("support_fused.fst"), &out.support_fused)?;
    fst::save_tensor(dir.join("decoder_output.fst"), &out.decoder_output)?;
    Ok(Outputs {
        prior: file("prior.fst"),
        baseline_prior: file("baseline_prior.fst"),
        prediction: file("prediction.fst"),
        query_fused: file("query_fused.fst"),
        support_fused: file("support_fused.fst"),
        decoder_output: file("decoder_output.fst"),
    })
}

struct Loaded {
    path: PathBuf,
    name: String,
    manifest: EpisodeManifest,
    shots: Vec<Episode>,
}

fn evaluate(args: &RunArgs, ep: &Loaded, weights: &Weights) -> Result<Evaluated> {
    let (manifest, shots, name) = (&ep.manifest, &ep.shots, &ep.name);
    let config = PipelineConfig {
        delta: args.delta,
        strategy: args.strategy,
    };
    let out = run_pipeline(shots, &config, &weights.fusion, &weights.blocks)?;
    let baseline = baseline_prior(&shots[0].query_features, &out.prototypes.p)?;

    let rel = format!("episodes/{name}");
    let outputs = write_outputs(&args.out.join(&rel), &rel, &out, &baseline)?;

    let query_mask = shots[0].query_mask.as_ref();
    let records = query_mask
        .map(|target| -> fssk::Result<_> {
            let pred = out.prior.to_mask(PREDICTION_THRESHOLD);
            let base_pred = baseline.to_mask(PREDICTION_THRESHOLD);
            Ok((
                EpisodeRecord::new(manifest.class_id, &pred, target, &out.prior, args.epsilon)?,
                EpisodeRecord::new(manifest.class_id, &base_pred, target, &baseline, args.epsilon)?,
            ))
        })
        .transpose()?;
    let metrics = match (query_mask, &records) {
        (Some(target), Some((pmgm, base))) => Some(EpisodeMetrics {
            iou: iou(&out.prior.to_mask(PREDICTION_THRESHOLD), target)?,
            prior_ce: pmgm.prior_ce,
            baseline_prior_ce: base.prior_ce,
        }),
        _ => None,
    };
    Ok(Evaluated {
        report: EpisodeReport {
            name: name.to_string(),
            source: ep.path.display().to_string(),
            class_id: manifest.class_id,
            k: manifest.k,
            has_query_mask: query_mask.is_some(),
            outputs,
            metrics,
            masking: out.reports,
        },
        records,
    })
}

fn episode_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "episode".into())
}

pub fn execute(args: RunArgs) -> Result<()> {
    args.validate()?;
    let paths = resolve_episodes(&args.episodes)?;
    let names: Vec<String> = paths.iter().map(|p| episode_name(p)).collect();
    let mut seen = BTreeSet::new();
    for (name, path) in names.iter().zip(&paths) {
        if !seen.insert(name) {
            bail!(fssk::Error::Config(format!(
                "two inputs share the episode name '{name}' (second: {})",
                path.display()
            )));
        }
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let pool = thread_pool()?;
    let loaded: Vec<Loaded> = pool.install(|| {
        paths
            .par_iter()
            .zip(names)
            .map(|(path, name)| {
                let (manifest, shots) = read_episode_dir(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                Ok(Loaded {
                    path: path.clone(),
                    name,
                    manifest,
                    shots,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    // One weight set per channel count, shared by every episode of that width.
    let mut weights = BTreeMap::new();
    for ep in &loaded {
        let (c, _, _) = ep.shots[0].grid()?;
        if let std::collections::btree_map::Entry::Vacant(slot) = weights.entry(c) {
            slot.insert(weights_for(args.seed, args.cab, c)?);
        }
    }

    let results: Vec<Result<Evaluated>> = pool.install(|| {
        loaded
            .par_iter()
            .map(|ep| {
                let c = ep.shots[0].grid()?.0;
                evaluate(&args, ep, &weights[&c])
                    .with_context(|| format!("episode {}", ep.path.display()))
            })
            .collect()
    });
    let evaluated = results.into_iter().collect::<Result<Vec<_>>>()?;

    let (pmgm, base): (Vec<_>, Vec<_>) = evaluated
        .iter()
        .filter_map(|e| e.records.clone())
        .unzip();
    let summary = if pmgm.is_empty() {
        None
    } else {
        Some(Summary {
            pmgm: aggregate(&pmgm)?,
            baseline: aggregate(&base)?,
        })
    };

    let mut csv = format!("{}\n", MetricSummary::CSV_HEADER);
    if let Some(s) = &summary {
        csv.push_str(&s.pmgm.csv_row(args.fold));
        csv.push('\n');
    }
    fs::write(args.out.join("metrics.csv"), csv)?;

    let report = Report {
        command: "run",
        config: &args,
        episodes: evaluated.into_iter().map(|e| e.report).collect(),
        summary,
    };
    write_json(&args.out.join("report.json"), &report)?;
    match &report.summary {
        Some(s) => eprintln!(
            "{} episode(s): mIoU {:.4}, FB-IoU {:.4}, prior CE {:.4} (baseline {:.4})",
            report.episodes.len(),
            s.pmgm.miou,
            s.pmgm.fb_iou,
            s.pmgm.prior_ce_mean,
            s.baseline.prior_ce_mean
        ),
        None => eprintln!(
            "{} episode(s) without query masks; no metrics",
            report.episodes.len()
        ),
    }
    Ok(())
}

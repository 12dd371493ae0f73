use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use fssk::episode::{generate_synthetic_shots, write_episode_dir, Episode, SyntheticConfig};
use fssk::rng::derive_seed;

use crate::common::{check_unit_interval, thread_pool, write_json, Size};

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenArgs {
    /// Master seed; episode `i` uses a seed derived from it and `i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of episodes.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Feature grid as CxHxW.
    #[arg(long, default_value = "16x8x8")]
    pub size: Size,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Plant a background patch that shares the salient class signature.
    #[arg(long)]
    pub distractor: bool,
    /// Share of CAM+ pixels that lie on the object.
    #[arg(long, default_value_t = 0.9)]
    pub cam_fidelity: f64,
    #[arg(long, default_value_t = 0.25)]
    pub noise: f32,
    #[arg(long, default_value_t = 1.0)]
    pub signal: f32,
    /// Support shots per episode.
    #[arg(long, default_value_t = 1)]
    pub shots: usize,
    /// Leave out the query mask, as at inference time.
    #[arg(long)]
    pub inference: bool,
}

impl GenArgs {
    pub fn synthetic_config(&self, index: u64) -> SyntheticConfig {
        SyntheticConfig {
            seed: derive_seed(self.seed, index),
            channels: self.size.channels,
            height: self.size.height,
            width: self.size.width,
            signal: self.signal,
            noise: self.noise,
            cam_fidelity: self.cam_fidelity,
            distractor: self.distractor,
        }
    }
}

#[derive(Serialize)]
struct Index<'a> {
    command: &'static str,
    config: &'a GenArgs,
    episodes: Vec<String>,
}

pub fn episode_name(i: usize) -> String {
    format!("episode_{i:04}")
}

pub fn execute(args: GenArgs) -> Result<()> {
    if args.n == 0 {
        bail!(fssk::Error::Config("--n must be at least 1".into()));
    }
    if args.shots == 0 {
        bail!(fssk::Error::Config("--shots must be at least 1".into()));
    }
    check_unit_interval("--cam-fidelity", args.cam_fidelity, false)?;
    args.synthetic_config(0).validate()?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let names: Vec<String> = (0..args.n).map(episode_name).collect();
    thread_pool()?.install(|| {
        names.par_iter().enumerate().try_for_each(|(i, name)| {
            let cfg = args.synthetic_config(i as u64);
            let mut shots = generate_synthetic_shots(&cfg, args.shots)?;
            if args.inference {
                shots = shots.into_iter().map(Episode::without_query_mask).collect();
            }
            let meta = serde_json::json!({
                "generator": "synthetic",
                "index": i,
                "seed": cfg.seed,
                "master_seed": args.seed,
                "size": args.size.to_string(),
                "distractor": args.distractor,
                "cam_fidelity": args.cam_fidelity,
                "noise": args.noise,
                "signal": args.signal,
                "inference": args.inference,
            });
            write_episode_dir(args.out.join(name), &shots, meta)
                .with_context(|| format!("writing {name}"))?;
            Ok::<_, anyhow::Error>(())
        })
    })?;

    write_json(
        &args.out.join("index.json"),
        &Index {
            command: "gen",
            config: &args,
            episodes: names,
        },
    )?;
    eprintln!("wrote {} episode(s) to {}", args.n, args.out.display());
    Ok(())
}

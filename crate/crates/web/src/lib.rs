//! Browser bindings. Each operation takes a JSON request and returns a JSON
//! response so the page needs no generated glue beyond strings. The plain
//! Rust functions are what the tests exercise; the `#[wasm_bindgen]` shims
//! only translate errors.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use fssk::attention::{cross_attention_scores, cyctr_mask, dicm_mask, ProjectionWeights};
use fssk::episode::{baseline_prior, generate_synthetic_episode, Episode, SyntheticConfig};
use fssk::metrics::iou;
use fssk::pmgm::{generate_prior, DEFAULT_DELTA};
use fssk::tensor::BinaryMask;

const MAX_SIDE: usize = 48;
const MAX_CHANNELS: usize = 64;

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct EpisodeRequest {
    pub seed: u64,
    pub channels: usize,
    /// Grid side; each operation has its own default.
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub distractor: bool,
    pub cam_fidelity: f64,
    pub noise: f32,
    pub delta: f32,
}

impl Default for EpisodeRequest {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: 16,
            height: None,
            width: None,
            distractor: true,
            cam_fidelity: 0.9,
            noise: 0.25,
            delta: DEFAULT_DELTA,
        }
    }
}

impl EpisodeRequest {
    fn episode(&self, side: usize) -> Result<Episode, String> {
        let height = self.height.unwrap_or(side);
        let width = self.width.unwrap_or(side);
        if height > MAX_SIDE || width > MAX_SIDE || self.channels > MAX_CHANNELS {
            return Err(format!(
                "demo grids are capped at {MAX_SIDE}x{MAX_SIDE} with {MAX_CHANNELS} channels"
            ));
        }
        generate_synthetic_episode(&SyntheticConfig {
            seed: self.seed,
            channels: self.channels,
            height,
            width,
            distractor: self.distractor,
            cam_fidelity: self.cam_fidelity,
            noise: self.noise,
            ..SyntheticConfig::default()
        })
        .map_err(|e| e.to_string())
    }
}

fn parse<T: for<'de> Deserialize<'de>>(request: &str) -> Result<T, String> {
    if request.trim().is_empty() {
        return serde_json::from_str("{}").map_err(|e| e.to_string());
    }
    serde_json::from_str(request).map_err(|e| format!("bad request: {e}"))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct PriorView {
    pub height: usize,
    pub width: usize,
    pub support_mask: Vec<u8>,
    pub support_cam: Vec<f32>,
    pub query_mask: Vec<u8>,
    pub query_cam: Vec<f32>,
    /// Foreground inside CAM+.
    pub a1: Vec<u8>,
    /// Foreground outside CAM+.
    pub a2: Vec<u8>,
    pub query_cam_pos: Vec<u8>,
    pub prior: Vec<f32>,
    pub baseline: Vec<f32>,
    pub prior_iou: f64,
    pub baseline_iou: f64,
}

/// Synthetic episode plus the region-aware prior and the single-prototype
/// baseline, both thresholded at 0.5 for the IoU figures.
pub fn prior_maps(request: &str) -> Result<String, String> {
    let req: EpisodeRequest = parse(request)?;
    let ep = req.episode(24)?;
    let out = generate_prior(
        &ep.support_features,
        &ep.support_mask,
        &ep.support_cam,
        &ep.query_features,
        &ep.query_cam,
        req.delta,
    )
    .map_err(|e| e.to_string())?;
    let base = baseline_prior(&ep.query_features, &out.prototypes.p).map_err(|e| e.to_string())?;
    let query_mask = ep.query_mask.as_ref().ok_or("episode has no query mask")?;
    let score = |m: &BinaryMask| iou(m, query_mask).map_err(|e| e.to_string());
    let (h, w) = ep.support_mask.dims();
    to_json(&PriorView {
        height: h,
        width: w,
        support_mask: ep.support_mask.bits().to_vec(),
        support_cam: ep.support_cam.grid().data().to_vec(),
        query_mask: query_mask.bits().to_vec(),
        query_cam: ep.query_cam.grid().data().to_vec(),
        a1: out.support.a1.bits().to_vec(),
        a2: out.support.a2.bits().to_vec(),
        query_cam_pos: out.query.pos.bits().to_vec(),
        prior_iou: score(&out.prior.to_mask(0.5))?,
        baseline_iou: score(&base.to_mask(0.5))?,
        prior: out.prior.values().to_vec(),
        baseline: base.values().to_vec(),
    })
}

#[derive(Debug, Clone, Deserialize)]
pub struct AttentionRequest {
    #[serde(flatten)]
    pub episode: EpisodeRequest,
    #[serde(default = "one")]
    pub weight_seed: u64,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Serialize)]
pub struct MaskView {
    pub masked: Vec<u8>,
    pub masked_cells: u64,
    pub masked_columns: u64,
    pub ratio: f64,
    pub fallback: bool,
}

#[derive(Debug, Serialize)]
pub struct AttentionView {
    /// Query pixels.
    pub rows: usize,
    /// Support pixels.
    pub cols: usize,
    pub height: usize,
    pub width: usize,
    pub support_mask: Vec<u8>,
    pub query_mask: Vec<u8>,
    /// Raw scaled scores, row-major.
    pub scores: Vec<f32>,
    pub dicm: MaskView,
    pub cyctr: MaskView,
}

/// Scores one cross-attention block and masks it both ways. `masked` holds
/// one byte per score cell.
pub fn attention_masks(request: &str) -> Result<String, String> {
    let req: AttentionRequest = parse(request)?;
    let ep = req.episode.episode(12)?;
    let c = req.episode.channels;
    let weights = ProjectionWeights::seeded(req.weight_seed, 0, c, c, c).map_err(|e| e.to_string())?;
    let attn = cross_attention_scores(&ep.query_features, &ep.support_features, &weights)
        .map_err(|e| e.to_string())?;
    let query_mask = ep.query_mask.as_ref().ok_or("episode has no query mask")?;
    let sm = ep.support_mask.bits();
    let (dicm, dr) = dicm_mask(&attn, sm, query_mask.bits()).map_err(|e| e.to_string())?;
    let (cyc, cr) = cyctr_mask(&attn, sm).map_err(|e| e.to_string())?;
    let view = |m: &fssk::attention::AttentionMap, r: fssk::attention::MaskingReport| MaskView {
        masked: m.scores().data().iter().map(|&v| (v == f32::NEG_INFINITY) as u8).collect(),
        masked_cells: r.masked_cells,
        masked_columns: r.masked_columns,
        ratio: r.ratio,
        fallback: r.fallback,
    };
    let (h, w) = ep.support_mask.dims();
    to_json(&AttentionView {
        rows: attn.rows(),
        cols: attn.cols(),
        height: h,
        width: w,
        support_mask: sm.to_vec(),
        query_mask: query_mask.bits().to_vec(),
        scores: attn.scores().data().to_vec(),
        dicm: view(&dicm, dr),
        cyctr: view(&cyc, cr),
    })
}

#[derive(Debug, Clone, Deserialize)]
pub struct SweepRequest {
    #[serde(flatten)]
    pub episode: EpisodeRequest,
    #[serde(default = "sweep_episodes")]
    pub episodes: usize,
    #[serde(default = "sweep_steps")]
    pub steps: usize,
}

fn sweep_episodes() -> usize {
    20
}

fn sweep_steps() -> usize {
    11
}

#[derive(Debug, Serialize)]
pub struct SweepPoint {
    pub cam_fidelity: f64,
    pub prior_iou: f64,
    pub baseline_iou: f64,
}

/// Mean IoU of the prior and the baseline as CAM fidelity runs from 0 to 1
/// in `steps` even steps, over `episodes` consecutive seeds. The request's
/// own `cam_fidelity` is ignored.
pub fn fidelity_sweep(request: &str) -> Result<String, String> {
    let req: SweepRequest = parse(request)?;
    if !(1..=200).contains(&req.episodes) || !(2..=51).contains(&req.steps) {
        return Err("episodes must be in 1..=200 and steps in 2..=51".into());
    }
    let mut points = Vec::with_capacity(req.steps);
    for s in 0..req.steps {
        let cam_fidelity = s as f64 / (req.steps - 1) as f64;
        let (mut prior_sum, mut base_sum) = (0.0, 0.0);
        for i in 0..req.episodes as u64 {
            let ep = EpisodeRequest {
                seed: req.episode.seed.wrapping_add(i),
                cam_fidelity,
                ..req.episode.clone()
            }
            .episode(16)?;
            let target = ep.query_mask.as_ref().ok_or("episode has no query mask")?;
            let out = generate_prior(
                &ep.support_features,
                &ep.support_mask,
                &ep.support_cam,
                &ep.query_features,
                &ep.query_cam,
                req.episode.delta,
            )
            .map_err(|e| e.to_string())?;
            let base =
                baseline_prior(&ep.query_features, &out.prototypes.p).map_err(|e| e.to_string())?;
            prior_sum += iou(&out.prior.to_mask(0.5), target).map_err(|e| e.to_string())?;
            base_sum += iou(&base.to_mask(0.5), target).map_err(|e| e.to_string())?;
        }
        let n = req.episodes as f64;
        points.push(SweepPoint {
            cam_fidelity,
            prior_iou: prior_sum / n,
            baseline_iou: base_sum / n,
        });
    }
    to_json(&points)
}

#[wasm_bindgen(js_name = priorMaps)]
pub fn prior_maps_js(request: &str) -> Result<String, JsValue> {
    prior_maps(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = attentionMasks)]
pub fn attention_masks_js(request: &str) -> Result<String, JsValue> {
    attention_masks(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = fidelitySweep)]
pub fn fidelity_sweep_js(request: &str) -> Result<String, JsValue> {
    fidelity_sweep(request).map_err(|e| JsValue::from_str(&e))
}

//! Brute-force reference implementations and the equivalence suites that
//! compare them against the production kernels.
//!
//! Nothing in here calls the kernels it checks. Loops are written the long
//! way and accumulate in `f64` wherever rounding would otherwise hide a bug.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::attention::{
    cross_attention_scores, cyctr_mask, dicm_mask, AttentionMap, MaskingReport, ProjectionWeights,
};
use crate::episode::{baseline_prior, generate_synthetic_episode, SyntheticConfig};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, fb_iou, EpisodeRecord, MetricSummary};
use crate::pmgm::{
    fuse_features, generate_prior, masked_average_pool, CamHeatmap, FusionWeights, PmgmOutput,
    PriorMap, DEFAULT_DELTA,
};
use crate::rng::{derive_seed, seeded, Stream};
use crate::tensor::{
    conv1x1, elementwise_mul, masked_minmax_normalize, resize_bilinear, BinaryMask, Tensor,
    DEGENERATE_REGION_VALUE,
};

fn shape_err(what: &str) -> Error {
    Error::Shape(format!("oracle: {what}"))
}

fn at(t: &Tensor, c: usize, y: usize, x: usize) -> f64 {
    let d = t.dims();
    t.data()[(c * d[1] + y) * d[2] + x] as f64
}

/// `a * b` with `b` either the same shape or a single plane.
pub fn naive_elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    if (hb, wb) != (h, w) || (cb != c && cb != 1) {
        return Err(shape_err("elementwise_mul extents"));
    }
    let mut out = Vec::new();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let bc = if cb == 1 { 0 } else { ch };
                out.push(at(a, ch, y, x) * at(b, bc, y, x));
            }
        }
    }
    Ok(out)
}

pub fn naive_conv1x1(x: &Tensor, weights: &Tensor, bias: &[f32]) -> Result<Vec<f64>> {
    let (c_in, h, w) = x.chw()?;
    let (c_out, k) = weights.matrix_dims()?;
    if k != c_in || bias.len() != c_out {
        return Err(shape_err("conv1x1 extents"));
    }
    let mut out = Vec::new();
    for o in 0..c_out {
        for y in 0..h {
            for xx in 0..w {
                let mut s = bias[o] as f64;
                for i in 0..c_in {
                    s += weights.data()[o * c_in + i] as f64 * at(x, i, y, xx);
                }
                out.push(s);
            }
        }
    }
    Ok(out)
}

/// Half-pixel-centre bilinear sampling of every output pixel.
pub fn naive_resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Vec<f64>> {
    let (c, in_h, in_w) = match x.dims() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        _ => return Err(shape_err("resize input rank")),
    };
    let sample = |ch: usize, y: usize, xx: usize| x.data()[(ch * in_h + y) * in_w + xx] as f64;
    let locate = |dst: usize, n_in: usize, n_out: usize| {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(n_in - 1);
        let hi = if lo + 1 < n_in { lo + 1 } else { lo };
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::new();
    for ch in 0..c {
        for y in 0..height {
            let (y0, y1, fy) = locate(y, in_h, height);
            for xx in 0..width {
                let (x0, x1, fx) = locate(xx, in_w, width);
                let v = sample(ch, y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + sample(ch, y0, x1) * (1.0 - fy) * fx
                    + sample(ch, y1, x0) * fy * (1.0 - fx)
                    + sample(ch, y1, x1) * fy * fx;
                out.push(v);
            }
        }
    }
    Ok(out)
}

/// Scan for min and max over the region, then rescale. Same `f32`
/// arithmetic as the kernel so results can be compared exactly.
pub fn naive_minmax(values: &Tensor, region: &BinaryMask) -> Vec<f32> {
    let v = values.data();
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for i in 0..v.len() {
        if region.bits()[i] == 1 {
            if v[i] < lo {
                lo = v[i];
            }
            if v[i] > hi {
                hi = v[i];
            }
        }
    }
    let mut out = vec![0.0f32; v.len()];
    for i in 0..v.len() {
        if region.bits()[i] == 1 {
            out[i] = if hi > lo {
                (v[i] - lo) / (hi - lo)
            } else {
                DEGENERATE_REGION_VALUE
            };
        }
    }
    out
}

pub fn naive_masked_average(features: &Tensor, region: &BinaryMask) -> Option<Vec<f64>> {
    let (c, h, w) = features.chw().ok()?;
    let mut sums = vec![0.0f64; c];
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if region.get(y, x) {
                n += 1;
                for (ch, s) in sums.iter_mut().enumerate() {
                    *s += at(features, ch, y, x);
                }
            }
        }
    }
    if n == 0 {
        return None;
    }
    Some(sums.into_iter().map(|s| s / n as f64).collect())
}

fn cosine64(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        ab / (na * nb)
    }
}

fn pixel64(t: &Tensor, y: usize, x: usize) -> Vec<f64> {
    (0..t.dims()[0]).map(|c| at(t, c, y, x)).collect()
}

fn minmax64(values: &[f64], region: &[bool]) -> Vec<f64> {
    let active: Vec<f64> = values
        .iter()
        .zip(region)
        .filter(|(_, &r)| r)
        .map(|(&v, _)| v)
        .collect();
    let lo = active.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = active.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .zip(region)
        .map(|(&v, &r)| match (r, hi > lo) {
            (false, _) => 0.0,
            (true, true) => (v - lo) / (hi - lo),
            (true, false) => DEGENERATE_REGION_VALUE as f64,
        })
        .collect()
}

/// The whole prior computation for one support/query pair, pixel by pixel.
pub fn naive_pmgm_prior(
    support_features: &Tensor,
    support_mask: &BinaryMask,
    support_cam: &CamHeatmap,
    query_features: &Tensor,
    query_cam: &CamHeatmap,
    delta: f32,
) -> Result<Vec<f64>> {
    let (c, h, w) = query_features.chw()?;
    if support_features.chw()? != (c, h, w)
        || support_mask.dims() != (h, w)
        || support_cam.dims() != (h, w)
        || query_cam.dims() != (h, w)
    {
        return Err(shape_err("prior extents"));
    }
    let hot = |cam: &CamHeatmap, y: usize, x: usize| cam.grid().data()[y * w + x] >= delta;

    let mut fg = vec![0.0f64; c];
    let mut hot_fg = vec![0.0f64; c];
    let mut cold_fg = vec![0.0f64; c];
    let (mut n, mut n_hot, mut n_cold) = (0usize, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !support_mask.get(y, x) {
                continue;
            }
            let px = pixel64(support_features, y, x);
            let bucket = if hot(support_cam, y, x) {
                n_hot += 1;
                &mut hot_fg
            } else {
                n_cold += 1;
                &mut cold_fg
            };
            for ch in 0..c {
                fg[ch] += px[ch];
                bucket[ch] += px[ch];
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidEpisode("oracle: empty support mask".into()));
    }
    let mean = |v: Vec<f64>, k: usize| v.into_iter().map(|s| s / k as f64).collect::<Vec<_>>();
    let p = mean(fg, n);
    let p1 = if n_hot > 0 { mean(hot_fg, n_hot) } else { p.clone() };
    let p2 = if n_cold > 0 { mean(cold_fg, n_cold) } else { p.clone() };

    let mut raw = Vec::with_capacity(h * w);
    let mut pos = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let is_hot = hot(query_cam, y, x);
            let proto = if is_hot { &p1 } else { &p2 };
            raw.push(cosine64(&pixel64(query_features, y, x), proto));
            pos.push(is_hot);
        }
    }
    let neg: Vec<bool> = pos.iter().map(|b| !b).collect();
    let a = minmax64(&raw, &pos);
    let b = minmax64(&raw, &neg);
    Ok(a.iter().zip(&b).map(|(x, y)| x + y).collect())
}

/// Concatenation followed by a 1x1 convolution, both done by hand.
pub fn naive_fusion(
    branch: &Tensor,
    x_p: &Tensor,
    x_c: &Tensor,
    prior: &Tensor,
    weights: &Tensor,
    bias: &[f32],
) -> Result<Vec<f64>> {
    let (c, h, w) = branch.chw()?;
    let parts = [branch, x_p, x_c, prior];
    let mut stacked = Vec::new();
    for part in parts {
        let (pc, ph, pw) = part.chw()?;
        if (ph, pw) != (h, w) {
            return Err(shape_err("fusion extents"));
        }
        for ch in 0..pc {
            for y in 0..h {
                for x in 0..w {
                    stacked.push(at(part, ch, y, x));
                }
            }
        }
    }
    let total = stacked.len() / (h * w);
    let (c_out, k) = weights.matrix_dims()?;
    if k != total || c_out != c || bias.len() != c_out {
        return Err(shape_err("fusion weights"));
    }
    let mut out = Vec::with_capacity(c_out * h * w);
    for o in 0..c_out {
        for i in 0..h * w {
            let mut s = bias[o] as f64;
            for ch in 0..total {
                s += weights.data()[o * total + ch] as f64 * stacked[ch * h * w + i];
            }
            out.push(s);
        }
    }
    Ok(out)
}

fn project64(features: &Tensor, w: &Tensor, b: &[f32], y: usize, x: usize) -> Vec<f64> {
    let (d, c) = (w.dims()[0], w.dims()[1]);
    (0..d)
        .map(|o| {
            b[o] as f64
                + (0..c)
                    .map(|i| w.data()[o * c + i] as f64 * at(features, i, y, x))
                    .sum::<f64>()
        })
        .collect()
}

pub fn naive_attention_scores(
    query: &Tensor,
    support: &Tensor,
    weights: &ProjectionWeights,
) -> Result<Vec<f64>> {
    let (cq, hq, wq) = query.chw()?;
    let (cs, hs, ws) = support.chw()?;
    if cq != weights.wq.dims()[1] || cs != weights.wk.dims()[1] {
        return Err(shape_err("projection channels"));
    }
    let d = weights.wq.dims()[0] as f64;
    let mut out = Vec::with_capacity(hq * wq * hs * ws);
    for qy in 0..hq {
        for qx in 0..wq {
            let q = project64(query, &weights.wq, &weights.bq, qy, qx);
            for sy in 0..hs {
                for sx in 0..ws {
                    let k = project64(support, &weights.wk, &weights.bk, sy, sx);
                    let dotp: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                    out.push(dotp / d.sqrt());
                }
            }
        }
    }
    Ok(out)
}

fn argmax_column(a: &AttentionMap, col: usize) -> usize {
    let mut best = 0;
    for r in 1..a.rows() {
        if a.get(r, col) > a.get(best, col) {
            best = r;
        }
    }
    best
}

fn argmax_row(a: &AttentionMap, row: usize) -> usize {
    let mut best = 0;
    for c in 1..a.cols() {
        if a.get(row, c) > a.get(row, best) {
            best = c;
        }
    }
    best
}

/// Cells the directional rule should mask, row-major.
pub fn naive_dicm_cells(a: &AttentionMap, support: &[u8], query: &[u8]) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for i in 0..a.cols() {
        let j = argmax_column(a, i);
        if support[i] != query[j] {
            cells.push((j, i));
        }
    }
    cells.sort();
    cells
}

/// Columns the cycle rule should mask, ascending.
pub fn naive_cyctr_columns(a: &AttentionMap, support: &[u8]) -> Vec<usize> {
    (0..a.cols())
        .filter(|&j| support[j] != support[argmax_row(a, argmax_column(a, j))])
        .collect()
}

fn violation(msg: String) -> Result<()> {
    Err(Error::Invariant(msg))
}

/// Post-hoc check of a directionally masked map against its source: at
/// most one masked cell per column, each one a label-conflicting column
/// argmax, and every other cell untouched.
pub fn check_dicm_structure(
    original: &AttentionMap,
    masked: &AttentionMap,
    support: &[u8],
    query: &[u8],
) -> Result<()> {
    if (original.rows(), original.cols()) != (masked.rows(), masked.cols()) {
        return violation("masked map changed extents".into());
    }
    for i in 0..original.cols() {
        let hits: Vec<usize> = (0..original.rows())
            .filter(|&j| masked.get(j, i) == f32::NEG_INFINITY)
            .collect();
        if hits.len() > 1 {
            return violation(format!("column {i} has {} masked cells", hits.len()));
        }
        if let Some(&j) = hits.first() {
            if argmax_column(original, i) != j {
                return violation(format!("cell ({j}, {i}) is not the column argmax"));
            }
            if support[i] == query[j] {
                return violation(format!("cell ({j}, {i}) has agreeing labels"));
            }
        }
        for j in 0..original.rows() {
            if !hits.contains(&j) && masked.get(j, i).to_bits() != original.get(j, i).to_bits() {
                return violation(format!("unmasked cell ({j}, {i}) changed"));
            }
        }
    }
    Ok(())
}

/// Every column must be either fully finite or fully masked.
pub fn check_cyctr_columns(masked: &AttentionMap) -> Result<()> {
    for c in 0..masked.cols() {
        let n = (0..masked.rows())
            .filter(|&r| masked.get(r, c) == f32::NEG_INFINITY)
            .count();
        if n != 0 && n != masked.rows() {
            return violation(format!("column {c} is partially masked ({n} of {})", masked.rows()));
        }
    }
    Ok(())
}

pub fn naive_baseline_prior(query: &Tensor, prototype: &[f32]) -> Vec<f64> {
    let (_, h, w) = query.chw().expect("query features");
    let p: Vec<f64> = prototype.iter().map(|&v| v as f64).collect();
    let mut raw = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            raw.push(cosine64(&pixel64(query, y, x), &p));
        }
    }
    minmax64(&raw, &vec![true; h * w])
}

/// Recounts foreground and background overlaps pixel by pixel.
pub fn naive_fb_iou(pairs: &[(&BinaryMask, &BinaryMask)]) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (pred, target) in pairs {
        for i in 0..pred.len() {
            let (p, t) = (pred.bits()[i], target.bits()[i]);
            for class in [0u8, 1u8] {
                let (a, b) = (p == class, t == class);
                inter += (a && b) as u64;
                union += (a || b) as u64;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

type PriorFn = fn(&Tensor, &BinaryMask, &CamHeatmap, &Tensor, &CamHeatmap, f32) -> Result<PmgmOutput>;
type MaskFn = fn(&AttentionMap, &[u8], &[u8]) -> Result<(AttentionMap, MaskingReport)>;
type ColumnMaskFn = fn(&AttentionMap, &[u8]) -> Result<(AttentionMap, MaskingReport)>;

/// The production kernels under test. Swapping one out lets the harness
/// prove that it actually notices a broken implementation.
#[derive(Clone, Copy)]
pub struct Kernels {
    pub elementwise_mul: fn(&Tensor, &Tensor) -> Result<Tensor>,
    pub conv1x1: fn(&Tensor, &Tensor, &[f32]) -> Result<Tensor>,
    pub resize_bilinear: fn(&Tensor, usize, usize) -> Result<Tensor>,
    pub masked_minmax_normalize: fn(&Tensor, &BinaryMask) -> Result<Tensor>,
    pub masked_average_pool: fn(&Tensor, &BinaryMask) -> Result<Option<Vec<f32>>>,
    pub generate_prior: PriorFn,
    pub fuse_features: fn(&Tensor, &Tensor, &Tensor, &PriorMap, &FusionWeights) -> Result<Tensor>,
    pub attention_scores: fn(&Tensor, &Tensor, &ProjectionWeights) -> Result<AttentionMap>,
    pub dicm_mask: MaskFn,
    pub cyctr_mask: ColumnMaskFn,
    pub baseline_prior: fn(&Tensor, &[f32]) -> Result<PriorMap>,
    pub fb_iou: fn(&[(&BinaryMask, &BinaryMask)]) -> Result<f64>,
    pub aggregate: fn(&[EpisodeRecord]) -> Result<MetricSummary>,
}

impl Default for Kernels {
    fn default() -> Self {
        Self {
            elementwise_mul,
            conv1x1,
            resize_bilinear,
            masked_minmax_normalize,
            masked_average_pool,
            generate_prior,
            fuse_features,
            attention_scores: cross_attention_scores,
            dicm_mask,
            cyctr_mask,
            baseline_prior,
            fb_iou,
            aggregate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub elapsed_ms: u128,
    /// The first case that went over tolerance, serialised as JSON.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

struct Suite {
    name: &'static str,
    tolerance: f64,
    cases: usize,
    worst: f64,
    failure: Option<String>,
    started: Instant,
}

impl Suite {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            cases: 0,
            worst: 0.0,
            failure: None,
            started: Instant::now(),
        }
    }

    fn record(&mut self, diff: f64, case: impl FnOnce() -> serde_json::Value) {
        self.cases += 1;
        let diff = if diff.is_nan() { f64::INFINITY } else { diff };
        self.worst = self.worst.max(diff);
        if diff > self.tolerance && self.failure.is_none() {
            let mut v = case();
            v["max_abs_diff"] = serde_json::json!(diff);
            self.failure = Some(v.to_string());
        }
    }

    fn error(&mut self, err: Error, case: impl FnOnce() -> serde_json::Value) {
        self.cases += 1;
        self.worst = f64::INFINITY;
        if self.failure.is_none() {
            let mut v = case();
            v["error"] = serde_json::json!(err.to_string());
            self.failure = Some(v.to_string());
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            cases: self.cases,
            max_abs_diff: self.worst,
            tolerance: self.tolerance,
            passed: self.failure.is_none(),
            elapsed_ms: self.started.elapsed().as_millis(),
            failure: self.failure,
        }
    }
}

fn max_diff32(got: &[f32], want: &[f64]) -> f64 {
    if got.len() != want.len() {
        return f64::INFINITY;
    }
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs())
        .fold(0.0, f64::max)
}

fn random_tensor(r: &mut Stream, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn random_mask(r: &mut Stream, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| r.random_bool(p) as u8).collect()).unwrap()
}

fn random_bits(r: &mut Stream, n: usize) -> Vec<u8> {
    (0..n).map(|_| r.random_bool(0.5) as u8).collect()
}

fn suite_elementwise(k: &Kernels, seed: u64) -> SuiteResult {
    let mut s = Suite::new("elementwise_mul", 0.0);
    for i in 0..100u64 {
        let case_seed = derive_seed(seed, i);
        let mut r = seeded(case_seed);
        let a = random_tensor(&mut r, &[3, 4, 4]);
        let b = if i % 2 == 0 {
            random_mask(&mut r, 4, 4, 0.5).to_tensor()
        } else {
            random_tensor(&mut r, &[3, 4, 4])
        };
        let case = || serde_json::json!({"suite": "elementwise_mul", "seed": case_seed});
        let want = naive_elementwise_mul(&a, &b).unwrap();
        // The reference is an exact product in f64; round it the way f32 would.
        let want: Vec<f64> = want.iter().map(|&v| v as f32 as f64).collect();
        match (k.elementwise_mul)(&a, &b) {
            Ok(got) => s.record(max_diff32(got.data(), &want), case),
            Err(e) => s.error(e, case),
        }
    }
    s.finish()
}

fn suite_conv(k: &Kernels, seed: u64) -> SuiteResult {
    let mut s = Suite::new("conv1x1", 1e-6);
    for i in 0..100u64 {
        let case_seed = derive_seed(seed, i);
        let mut r = seeded(case_seed);
        let x = random_tensor(&mut r, &[4, 3, 3]);
        let w = random_tensor(&mut r, &[2, 4]);
        let b: Vec<f32> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
        let case = || serde_json::json!({"suite": "conv1x1", "seed": case_seed});
        let want = naive_conv1x1(&x, &w, &b).unwrap();
        match (k.conv1x1)(&x, &w, &b) {
            Ok(got) => s.record(max_diff32(got.data(), &want), case),
            Err(e) => s.error(e, case),
        }
    }
    s.finish()
}

fn suite_resize(k: &Kernels, seed: u64) -> SuiteResult {
    let mut s = Suite::new("resize_bilinear", 1e-6);
    for i in 0..50u64 {
        let case_seed = derive_seed(seed, i);
        let mut r = seeded(case_seed);
        let (ih, iw, oh, ow) = if i == 0 {
            (2, 2, 4, 4)
        } else {
            (
                r.random_range(1..7),
                r.random_range(1..7),
                r.random_range(1..9),
                r.random_range(1..9),
            )
        };
        let x = random_tensor(&mut r, &[ih, iw]);
        let case = || {
            serde_json::json!({"suite": "resize_bilinear", "seed": case_seed,
                               "from": [ih, iw], "to": [oh, ow]})
        };
        let want = naive_resize_bilinear(&x, oh, ow).unwrap();
        match (k.resize_bilinear)(&x, oh, ow) {
            Ok(got) => s.record(max_diff32(got.data(), &want), case),
            Err(e) => s.error(e, case),
        }
    }
    s.finish()
}

fn suite_minmax(k: &Kernels, seed: u64) -> SuiteResult {
    let mut s = Suite::new("masked_minmax_normalize", 0.0);
    for i in 0..50u64 {
        let case_seed = derive_seed(seed, i);
        let mut r = seeded(case_seed);
        let v = random_tensor(&mut r, &[1, 8, 8]);
        let m = random_mask(&mut r, 8, 8, [0.0, 0.02, 0.5, 1.0][i as usize % 4]);
        let case = || serde_json::json!({"suite": "masked_minmax_normalize", "seed": case_seed});
        let want: Vec<f64> = naive_minmax(&v, &m).into_iter().map(f64::from).collect();
        match (k.masked_minmax_normalize)(&v, &m) {
            Ok(got) => s.record(max_diff32(got.data(), &want), case),
            Err(e) => s.error(e, case),
        }
    }
    s.finish()
}

fn suite_masked_average(k: &Kernels, seed: u64) -> SuiteResult {
    let mut s = Suite::new("masked_average_pool", 1e-5);
    for i in 0..50u64 {
        let case_seed = derive_seed(seed, i);
        let mut r = seeded(case_seed);
        let f = random_tensor(&mut r, &[16, 8, 8]);
        let m = random_mask(&mut r, 8, 8, 0.3);
        let case = || serde_json::json!({"suite": "masked_average_pool", "seed": case_seed});
        let want = naive_masked_average(&f, &m);
        match ((k.masked_average_pool)(&f, &m), want) {
            (Ok(Some(got)), Some(want)) => s.record(max_diff32(&got, &want), case),
            (Ok(None), None) => s.record(0.0, case),
            (Ok(_), _) => s.record(f64::INFINITY, case),
            (Err(e), _) => s.error(e, case),
        }
    }
    s.finish()
}

/// Synthetic episode used by the prior suites: the usual generator with
/// distractors on every other case.
fn suite_episode(seed: u64, i: u64) -> crate::episode::Episode {
    generate_synthetic_episode(&SyntheticConfig {
        seed: derive_seed(seed, i),
        distractor: i % 2 == 1,
        ..SyntheticConfig::default()
    })
    .expect("default synthetic config is valid")
}

fn suite_prior(k: &Kernels, seed: u64) -> SuiteResult {
    let mut s = Suite::new("pmgm_prior", 1e-5);
    for i in 0..50u64 {
        let e = suite_episode(seed, i);
        let case = || serde_json::json!({"suite": "pmgm_prior", "episode_seed": derive_seed(seed, i)});
        let want = naive_pmgm_prior(
            &e.support_features,
            &e.support_mask,
            &e.support_cam,
            &e.query_features,
            &e.query_cam,
            DEFAULT_DELTA,
        )
        .unwrap();
        match (k.generate_prior)(
            &e.support_features,
            &e.support_mask,
            &e.support_cam,
            &e.query_features,
            &e.query_cam,
            DEFAULT_DELTA,
        ) {
            Ok(out) => s.record(max_diff32(out.prior.values(), &want), case),
            Err(e) => s.error(e, case),
        }
    }
    s.finish()
}

fn suite_fusion(k: &Kernels, seed: u64) -> SuiteResult {
    let mut s = Suite::new("fuse_features", 1e-5);
    for i in 0..20u64 {
        let case_seed = derive_seed(seed, i);
        let mut r = seeded(case_seed);
        let c = 8;
        let x = random_tensor(&mut r, &[c, 6, 6]);
        let xp = random_tensor(&mut r, &[c, 6, 6]);
        let xc = random_tensor(&mut r, &[c, 6, 6]);
        let p: Vec<f32> = (0..36).map(|_| r.random_range(0.0..1.0)).collect();
        let prior = PriorMap::new(Tensor::new(&[1, 6, 6], p).unwrap()).unwrap();
        let fw = FusionWeights::seeded(case_seed, c).unwrap();
        let case = || serde_json::json!({"suite": "fuse_features", "seed": case_seed});
        let want = naive_fusion(&x, &xp, &xc, prior.grid(), &fw.weights, &fw.bias).unwrap();
        match (k.fuse_features)(&x, &xp, &xc, &prior, &fw) {
            Ok(got) => s.record(max_diff32(got.data(), &want), case),
            Err(e) => s.error(e, case),
        }
    }
    s.finish()
}

fn suite_scores(k: &Kernels, seed: u64) -> SuiteResult {
    let mut s = Suite::new("attention_scores", 1e-5);
    for i in 0..30u64 {
        let case_seed = derive_seed(seed, i);
        let mut r = seeded(case_seed);
        let q = random_tensor(&mut r, &[6, 2, 2]);
        let sp = random_tensor(&mut r, &[6, 3, 2]);
        let w = ProjectionWeights::seeded(case_seed, 0, 6, 6, 4).unwrap();
        let case = || serde_json::json!({"suite": "attention_scores", "seed": case_seed});
        let want = naive_attention_scores(&q, &sp, &w).unwrap();
        match (k.attention_scores)(&q, &sp, &w) {
            Ok(got) => s.record(max_diff32(got.scores().data(), &want), case),
            Err(e) => s.error(e, case),
        }
    }
    s.finish()
}

fn random_attention(r: &mut Stream, rows: usize, cols: usize) -> AttentionMap {
    // Coarse values so ties, and therefore the tie-break rule, get exercised.
    let v = (0..rows * cols)
        .map(|_| r.random_range(-4i32..=4) as f32 * 0.5)
        .collect();
    AttentionMap::new(Tensor::new(&[rows, cols], v).unwrap(), true).unwrap()
}

fn masked_cells(a: &AttentionMap) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            if a.get(r, c) == f32::NEG_INFINITY {
                v.push((r, c));
            }
        }
    }
    v
}

fn suite_dicm(k: &Kernels, seed: u64) -> SuiteResult {
    let mut s = Suite::new("dicm_mask", 0.0);
    for i in 0..100u64 {
        let case_seed = derive_seed(seed, i);
        let mut r = seeded(case_seed);
        let (rows, cols) = (r.random_range(1..10), r.random_range(1..10));
        let a = random_attention(&mut r, rows, cols);
        let sm = random_bits(&mut r, cols);
        let qm = random_bits(&mut r, rows);
        let case = || serde_json::json!({"suite": "dicm_mask", "seed": case_seed,
                                         "rows": rows, "cols": cols});
        match (k.dicm_mask)(&a, &sm, &qm) {
            Ok((out, report)) => {
                let mut diff = 0.0;
                if check_dicm_structure(&a, &out, &sm, &qm).is_err() {
                    diff = f64::INFINITY;
                }
                if !report.fallback && masked_cells(&out) != naive_dicm_cells(&a, &sm, &qm) {
                    diff = f64::INFINITY;
                }
                if report.masked_cells as usize != masked_cells(&out).len() {
                    diff = f64::INFINITY;
                }
                s.record(diff, case)
            }
            Err(e) => s.error(e, case),
        }
    }
    s.finish()
}

fn suite_cyctr(k: &Kernels, seed: u64) -> SuiteResult {
    let mut s = Suite::new("cyctr_mask", 0.0);
    for i in 0..100u64 {
        let case_seed = derive_seed(seed, i);
        let mut r = seeded(case_seed);
        let (rows, cols) = (r.random_range(1..10), r.random_range(1..10));
        let a = random_attention(&mut r, rows, cols);
        let sm = random_bits(&mut r, cols);
        let case = || serde_json::json!({"suite": "cyctr_mask", "seed": case_seed,
                                         "rows": rows, "cols": cols});
        match (k.cyctr_mask)(&a, &sm) {
            Ok((out, report)) => {
                let mut diff = 0.0;
                if check_cyctr_columns(&out).is_err() {
                    diff = f64::INFINITY;
                }
                let got: Vec<usize> = (0..cols)
                    .filter(|&c| out.get(0, c) == f32::NEG_INFINITY)
                    .collect();
                if !report.fallback && got != naive_cyctr_columns(&a, &sm) {
                    diff = f64::INFINITY;
                }
                if report.masked_columns as usize != got.len() {
                    diff = f64::INFINITY;
                }
                s.record(diff, case)
            }
            Err(e) => s.error(e, case),
        }
    }
    s.finish()
}

fn suite_baseline(k: &Kernels, seed: u64) -> SuiteResult {
    let mut s = Suite::new("baseline_prior", 1e-5);
    for i in 0..30u64 {
        let case_seed = derive_seed(seed, i);
        let mut r = seeded(case_seed);
        let q = random_tensor(&mut r, &[8, 5, 5]);
        let p: Vec<f32> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let case = || serde_json::json!({"suite": "baseline_prior", "seed": case_seed});
        let want = naive_baseline_prior(&q, &p);
        match (k.baseline_prior)(&q, &p) {
            Ok(got) => s.record(max_diff32(got.values(), &want), case),
            Err(e) => s.error(e, case),
        }
    }
    s.finish()
}

fn suite_fb_iou(k: &Kernels, seed: u64) -> SuiteResult {
    let mut s = Suite::new("fb_iou", 0.0);
    for i in 0..30u64 {
        let case_seed = derive_seed(seed, i);
        let mut r = seeded(case_seed);
        let n = r.random_range(1..6);
        let masks: Vec<(BinaryMask, BinaryMask)> = (0..n)
            .map(|_| (random_mask(&mut r, 5, 6, 0.4), random_mask(&mut r, 5, 6, 0.4)))
            .collect();
        let pairs: Vec<(&BinaryMask, &BinaryMask)> = masks.iter().map(|(a, b)| (a, b)).collect();
        let case = || serde_json::json!({"suite": "fb_iou", "seed": case_seed});
        let want = naive_fb_iou(&pairs);
        match (k.fb_iou)(&pairs) {
            Ok(got) => s.record((got - want).abs(), case),
            Err(e) => s.error(e, case),
        }
    }
    s.finish()
}

fn suite_aggregate(k: &Kernels, seed: u64) -> SuiteResult {
    let mut s = Suite::new("aggregate", 1e-9);
    for i in 0..20u64 {
        let case_seed = derive_seed(seed, i);
        let mut r = seeded(case_seed);
        let n = r.random_range(1..8);
        let mut records = Vec::new();
        let mut by_class: std::collections::BTreeMap<u32, (u64, u64)> = Default::default();
        let (mut fb_i, mut fb_u, mut ce) = (0u64, 0u64, Vec::new());
        for _ in 0..n {
            let class = r.random_range(1..4u32);
            let pred = random_mask(&mut r, 4, 4, 0.5);
            let target = random_mask(&mut r, 4, 4, 0.5);
            let p: Vec<f32> = (0..16).map(|_| r.random_range(0.0..1.0)).collect();
            let prior = PriorMap::new(Tensor::new(&[1, 4, 4], p.clone()).unwrap()).unwrap();
            records.push(EpisodeRecord::new(class, &pred, &target, &prior, 1e-6).unwrap());
            let (mut fi, mut fu) = (0u64, 0u64);
            let mut x = 0.0f64;
            for px in 0..16 {
                let (a, b) = (pred.bits()[px] == 1, target.bits()[px] == 1);
                fi += (a && b) as u64;
                fu += (a || b) as u64;
                fb_i += (a && b) as u64 + (!a && !b) as u64;
                fb_u += (a || b) as u64 + (!a || !b) as u64;
                let q = (p[px] as f64).clamp(1e-6, 1.0 - 1e-6);
                x -= if b { q.ln() } else { (1.0 - q).ln() };
            }
            ce.push(x / 16.0);
            let e = by_class.entry(class).or_default();
            e.0 += fi;
            e.1 += fu;
        }
        let iou = |i: u64, u: u64| if u == 0 { 1.0 } else { i as f64 / u as f64 };
        let miou = by_class.values().map(|&(i, u)| iou(i, u)).sum::<f64>() / by_class.len() as f64;
        let mean = ce.iter().sum::<f64>() / n as f64;
        let std = (ce.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let case = || serde_json::json!({"suite": "aggregate", "seed": case_seed});
        match (k.aggregate)(&records) {
            Ok(m) => {
                let diff = [
                    m.miou - miou,
                    m.fb_iou - iou(fb_i, fb_u),
                    m.prior_ce_mean - mean,
                    m.prior_ce_std - std,
                    m.episode_count as f64 - n as f64,
                ]
                .iter()
                .fold(0.0f64, |a, d| a.max(d.abs()));
                s.record(diff, case)
            }
            Err(e) => s.error(e, case),
        }
    }
    s.finish()
}

/// Runs every equivalence suite against `kernels`.
pub fn run_suites(kernels: &Kernels, seed: u64) -> Vec<SuiteResult> {
    let suites: [fn(&Kernels, u64) -> SuiteResult; 14] = [
        suite_elementwise,
        suite_conv,
        suite_resize,
        suite_minmax,
        suite_masked_average,
        suite_prior,
        suite_fusion,
        suite_scores,
        suite_dicm,
        suite_cyctr,
        suite_baseline,
        suite_fb_iou,
        suite_aggregate,
        suite_decompose,
    ];
    suites
        .iter()
        .enumerate()
        .map(|(i, f)| f(kernels, derive_seed(seed, i as u64)))
        .collect()
}

fn suite_decompose(_: &Kernels, seed: u64) -> SuiteResult {
    let mut s = Suite::new("decompose_regions", 0.0);
    for i in 0..30u64 {
        let case_seed = derive_seed(seed, i);
        let mut r = seeded(case_seed);
        let ms = random_mask(&mut r, 6, 7, 0.5);
        let pos = random_mask(&mut r, 6, 7, 0.4);
        let case = || serde_json::json!({"suite": "decompose_regions", "seed": case_seed});
        match crate::pmgm::decompose_regions(&ms, &pos, &pos.complement()) {
            Ok(regions) => {
                let mut bad = 0usize;
                for px in 0..ms.len() {
                    let (m, c) = (ms.bits()[px] == 1, pos.bits()[px] == 1);
                    bad += (regions.a1.bits()[px] == 1) as usize ^ (m && c) as usize;
                    bad += (regions.a2.bits()[px] == 1) as usize ^ (m && !c) as usize;
                }
                s.record(bad as f64, case)
            }
            Err(e) => s.error(e, case),
        }
    }
    s.finish()
}

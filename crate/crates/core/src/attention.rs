//! Query-over-support cross-attention and attention-map masking.
//!
//! Attention maps have one row per query pixel and one column per support
//! pixel. Masked cells hold exactly negative infinity and are added before
//! the softmax, so they receive zero weight.
//!
//! Two masking strategies are provided:
//!
//! - [`dicm_mask`]: for each support column, the query row it attends to most
//!   is found; if the two pixels disagree on foreground/background, that one
//!   cell is masked.
//! - [`cyctr_mask`]: for each support column, the cycle support -> best query
//!   row -> best support column is followed; if the cycle ends on a pixel with
//!   a different label, the whole column is masked.
//!
//! Argmax ties resolve to the lowest index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::tensor::{conv1x1, dot, row_softmax, BinaryMask, Tensor};

/// Q/K/V projections of one cross-attention block. Each matrix maps its input
/// channels to the shared head dimension `d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bq: Vec<f32>,
    pub bk: Vec<f32>,
    pub bv: Vec<f32>,
    pub block_index: usize,
}

impl ProjectionWeights {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor, block_index: usize) -> Result<Self> {
        let (dq, _) = wq.matrix_dims()?;
        let (dk, ck) = wk.matrix_dims()?;
        let (dv, cv) = wv.matrix_dims()?;
        if dq != dk || dk != dv {
            return Err(Error::dim("projection output dims", (dq, dk), dv));
        }
        if ck != cv {
            return Err(Error::dim("key/value input channels", ck, cv));
        }
        Ok(Self {
            wq,
            wk,
            wv,
            bq: vec![0.0; dk],
            bk: vec![0.0; dk],
            bv: vec![0.0; dk],
            block_index,
        })
    }

    pub fn with_biases(mut self, bq: Vec<f32>, bk: Vec<f32>, bv: Vec<f32>) -> Result<Self> {
        let d = self.head_dim();
        for b in [&bq, &bk, &bv] {
            if b.len() != d {
                return Err(Error::dim("projection bias", b.len(), d));
            }
        }
        (self.bq, self.bk, self.bv) = (bq, bk, bv);
        Ok(self)
    }

    /// Seeded `uniform(-1/sqrt(c), 1/sqrt(c))` projections with zero bias.
    pub fn seeded(
        seed: u64,
        block_index: usize,
        query_channels: usize,
        support_channels: usize,
        head_dim: usize,
    ) -> Result<Self> {
        use crate::rng::{derive_seed, uniform_matrix};
        let bq = 1.0 / (query_channels as f32).sqrt();
        let bs = 1.0 / (support_channels as f32).sqrt();
        Self::new(
            uniform_matrix(derive_seed(seed, 0), head_dim, query_channels, bq)?,
            uniform_matrix(derive_seed(seed, 1), head_dim, support_channels, bs)?,
            uniform_matrix(derive_seed(seed, 2), head_dim, support_channels, bs)?,
            block_index,
        )
    }

    /// Identity projections (`d_k = c`), handy for hand-checked fixtures.
    pub fn identity(channels: usize, block_index: usize) -> Result<Self> {
        let mut eye = vec![0.0; channels * channels];
        for i in 0..channels {
            eye[i * channels + i] = 1.0;
        }
        let eye = Tensor::new(&[channels, channels], eye)?;
        Self::new(eye.clone(), eye.clone(), eye, block_index)
    }

    pub fn head_dim(&self) -> usize {
        self.wq.dims()[0]
    }

    pub fn query_channels(&self) -> usize {
        self.wq.dims()[1]
    }

    pub fn support_channels(&self) -> usize {
        self.wk.dims()[1]
    }
}

/// Scaled attention scores, `(h_q*w_q) x (h_s*w_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    scores: Tensor,
    scaled: bool,
}

impl AttentionMap {
    /// Wraps raw scores. Entries must be finite or negative infinity.
    pub fn new(scores: Tensor, scaled: bool) -> Result<Self> {
        scores.matrix_dims()?;
        if let Some(v) = scores
            .data()
            .iter()
            .find(|v| !(v.is_finite() || **v == f32::NEG_INFINITY))
        {
            return Err(Error::Invariant(format!("attention entry {v} is not finite")));
        }
        Ok(Self { scores, scaled })
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    pub fn rows(&self) -> usize {
        self.scores.dims()[0]
    }

    pub fn cols(&self) -> usize {
        self.scores.dims()[1]
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.scores.data()[row * self.cols() + col]
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.get(row, col) == f32::NEG_INFINITY
    }

    pub fn masked_count(&self) -> usize {
        self.scores
            .data()
            .iter()
            .filter(|&&v| v == f32::NEG_INFINITY)
            .count()
    }

    /// Row index of the largest entry in every column.
    pub fn column_argmax(&self) -> Vec<usize> {
        let cols = self.cols();
        let mut best = self.scores.row(0).to_vec();
        let mut arg = vec![0usize; cols];
        for r in 1..self.rows() {
            for (c, &v) in self.scores.row(r).iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    arg[c] = r;
                }
            }
        }
        arg
    }

    /// Column index of the largest entry in every row.
    pub fn row_argmax(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| {
                let row = self.scores.row(r);
                let mut arg = 0;
                for (c, &v) in row.iter().enumerate().skip(1) {
                    if v > row[arg] {
                        arg = c;
                    }
                }
                arg
            })
            .collect()
    }

    fn with_masked_cells(&self, cells: impl IntoIterator<Item = (usize, usize)>) -> AttentionMap {
        let cols = self.cols();
        let mut data = self.scores.data().to_vec();
        for (r, c) in cells {
            data[r * cols + c] = f32::NEG_INFINITY;
        }
        AttentionMap {
            scores: Tensor::new(self.scores.dims(), data).expect("same extents"),
            scaled: self.scaled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    #[default]
    None,
    Dicm,
    Cyctr,
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskStrategy::None => "none",
            MaskStrategy::Dicm => "dicm",
            MaskStrategy::Cyctr => "cyctr",
        })
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(MaskStrategy::None),
            "dicm" => Ok(MaskStrategy::Dicm),
            "cyctr" => Ok(MaskStrategy::Cyctr),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?}, expected none, dicm or cyctr"
            ))),
        }
    }
}

/// Mask accounting for one attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingReport {
    pub block: usize,
    pub strategy: MaskStrategy,
    pub total_cells: u64,
    pub masked_cells: u64,
    pub masked_columns: u64,
    pub ratio: f64,
    /// Set when masking was skipped because it would have left a row with no
    /// finite entry.
    pub fallback: bool,
}

impl MaskingReport {
    fn new(
        block: usize,
        strategy: MaskStrategy,
        attn: &AttentionMap,
        masked_cells: usize,
        masked_columns: usize,
        fallback: bool,
    ) -> Self {
        let total = (attn.rows() * attn.cols()) as u64;
        Self {
            block,
            strategy,
            total_cells: total,
            masked_cells: masked_cells as u64,
            masked_columns: masked_columns as u64,
            ratio: masked_cells as f64 / total as f64,
            fallback,
        }
    }

    pub fn unmasked(block: usize, attn: &AttentionMap) -> Self {
        Self::new(block, MaskStrategy::None, attn, 0, 0, false)
    }
}

/// Projects a `c x h x w` map to `(h*w) x d` row-major.
fn project(features: &Tensor, w: &Tensor, b: &[f32]) -> Result<Vec<f32>> {
    let (_, h, wd) = features.chw()?;
    let proj = conv1x1(features, w, b)?;
    let d = w.dims()[0];
    let n = h * wd;
    let mut out = vec![0.0f32; n * d];
    for o in 0..d {
        for (i, &v) in proj.data()[o * n..(o + 1) * n].iter().enumerate() {
            out[i * d + o] = v;
        }
    }
    Ok(out)
}

fn check_channels(query: &Tensor, support: &Tensor, w: &ProjectionWeights) -> Result<()> {
    let (cq, _, _) = query.chw()?;
    let (cs, _, _) = support.chw()?;
    if cq != w.query_channels() {
        return Err(Error::dim("query projection", query.shape(), w.wq.shape()));
    }
    if cs != w.support_channels() {
        return Err(Error::dim("key/value projection", support.shape(), w.wk.shape()));
    }
    Ok(())
}

/// `A[r, s] = (Q_r . K_s) / sqrt(d_k)` over flattened query and support grids.
pub fn cross_attention_scores(
    query_feat: &Tensor,
    support_feat: &Tensor,
    weights: &ProjectionWeights,
) -> Result<AttentionMap> {
    check_channels(query_feat, support_feat, weights)?;
    let d = weights.head_dim();
    let q = project(query_feat, &weights.wq, &weights.bq)?;
    let k = project(support_feat, &weights.wk, &weights.bk)?;
    let (nq, ns) = (q.len() / d, k.len() / d);
    let scale = (d as f32).sqrt();
    let mut scores = Vec::with_capacity(nq * ns);
    for qr in q.chunks_exact(d) {
        scores.extend(k.chunks_exact(d).map(|ks| dot(qr, ks) / scale));
    }
    AttentionMap::new(Tensor::new(&[nq, ns], scores)?, true)
}

fn check_mask_len(what: &'static str, mask: &[u8], expected: usize) -> Result<()> {
    if mask.len() != expected {
        return Err(Error::dim(what, mask.len(), expected));
    }
    Ok(())
}

/// Pixel-wise directional masking. For every support column `i`, the row
/// `j` with the highest score is found; if the support and query labels
/// disagree, the single cell `(j, i)` is masked.
///
/// If masking would leave some query row without a finite entry, that row's
/// cells are left unmasked and the report's `fallback` flag is set.
pub fn dicm_mask(
    attn: &AttentionMap,
    support_mask: &[u8],
    query_mask: &[u8],
) -> Result<(AttentionMap, MaskingReport)> {
    dicm_mask_block(attn, support_mask, query_mask, 0)
}

fn dicm_mask_block(
    attn: &AttentionMap,
    support_mask: &[u8],
    query_mask: &[u8],
    block: usize,
) -> Result<(AttentionMap, MaskingReport)> {
    check_mask_len("dicm support mask", support_mask, attn.cols())?;
    check_mask_len("dicm query mask", query_mask, attn.rows())?;
    let mut cells: Vec<(usize, usize)> = attn
        .column_argmax()
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| support_mask[i] != query_mask[j])
        .map(|(i, j)| (j, i))
        .collect();

    let mut per_row = vec![0usize; attn.rows()];
    for &(j, _) in &cells {
        per_row[j] += 1;
    }
    let fallback = per_row.iter().any(|&n| n == attn.cols());
    if fallback {
        cells.retain(|&(j, _)| per_row[j] < attn.cols());
    }

    let n = cells.len();
    let report = MaskingReport::new(block, MaskStrategy::Dicm, attn, n, n, fallback);
    Ok((attn.with_masked_cells(cells), report))
}

/// Cycle-consistency column masking. Column `j` is masked in full when the
/// cycle `j -> argmax_row -> argmax_col` lands on a support pixel with a
/// different label. If every column would be masked, nothing is masked and
/// the report's `fallback` flag is set.
pub fn cyctr_mask(
    attn: &AttentionMap,
    support_mask: &[u8],
) -> Result<(AttentionMap, MaskingReport)> {
    cyctr_mask_block(attn, support_mask, 0)
}

fn cyctr_mask_block(
    attn: &AttentionMap,
    support_mask: &[u8],
    block: usize,
) -> Result<(AttentionMap, MaskingReport)> {
    check_mask_len("cyctr support mask", support_mask, attn.cols())?;
    let best_row = attn.column_argmax();
    let best_col = attn.row_argmax();
    let columns: Vec<usize> = (0..attn.cols())
        .filter(|&j| support_mask[j] != support_mask[best_col[best_row[j]]])
        .collect();

    if columns.len() == attn.cols() {
        let report = MaskingReport::new(block, MaskStrategy::Cyctr, attn, 0, 0, true);
        return Ok((attn.clone(), report));
    }
    let rows = attn.rows();
    let report = MaskingReport::new(
        block,
        MaskStrategy::Cyctr,
        attn,
        columns.len() * rows,
        columns.len(),
        false,
    );
    let cells = columns.iter().flat_map(|&c| (0..rows).map(move |r| (r, c)));
    Ok((attn.with_masked_cells(cells), report))
}

/// Ground-truth masks handed to the masking strategies.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionMasks<'a> {
    pub support: Option<&'a BinaryMask>,
    pub query: Option<&'a BinaryMask>,
}

fn grid_mask<'a>(
    what: &'static str,
    mask: Option<&'a BinaryMask>,
    grid: (usize, usize),
) -> Result<Option<&'a [u8]>> {
    match mask {
        Some(m) if m.dims() != grid => Err(Error::dim(what, m.dims(), grid)),
        Some(m) => Ok(Some(m.bits())),
        None => Ok(None),
    }
}

/// Applies the chosen strategy to a score map.
pub fn apply_strategy(
    attn: &AttentionMap,
    strategy: MaskStrategy,
    support_mask: Option<&[u8]>,
    query_mask: Option<&[u8]>,
    block: usize,
) -> Result<(AttentionMap, MaskingReport)> {
    match strategy {
        MaskStrategy::None => Ok((attn.clone(), MaskingReport::unmasked(block, attn))),
        MaskStrategy::Dicm => {
            let query = query_mask.ok_or_else(|| {
                Error::Mode(
                    "directional masking needs the query mask, which only exists in \
                     training mode; use strategy none at inference"
                        .into(),
                )
            })?;
            let support = support_mask
                .ok_or_else(|| Error::Mode("directional masking needs the support mask".into()))?;
            dicm_mask_block(attn, support, query, block)
        }
        MaskStrategy::Cyctr => {
            let support = support_mask
                .ok_or_else(|| Error::Mode("cycle masking needs the support mask".into()))?;
            cyctr_mask_block(attn, support, block)
        }
    }
}

/// Softmax-weighted sum of value rows: `(rows x cols) . (cols x d) -> rows x d`.
fn weighted_values(probs: &Tensor, values: &[f32], d: usize) -> Vec<f32> {
    let (rows, _) = probs.matrix_dims().expect("probability matrix");
    let mut out = vec![0.0f32; rows * d];
    for r in 0..rows {
        let dst = &mut out[r * d..(r + 1) * d];
        for (&p, v) in probs.row(r).iter().zip(values.chunks_exact(d)) {
            if p == 0.0 {
                continue;
            }
            for (o, &x) in dst.iter_mut().zip(v) {
                *o += p * x;
            }
        }
    }
    out
}

/// One cross-attention block: scores, masking, softmax, value aggregation.
/// The output is `d_k x h_q x w_q`.
pub fn attention_forward(
    query_feat: &Tensor,
    support_feat: &Tensor,
    weights: &ProjectionWeights,
    strategy: MaskStrategy,
    masks: AttentionMasks<'_>,
) -> Result<(Tensor, MaskingReport)> {
    let (_, hq, wq) = query_feat.chw()?;
    let (_, hs, ws) = support_feat.chw()?;
    let support = grid_mask("support mask", masks.support, (hs, ws))?;
    let query = grid_mask("query mask", masks.query, (hq, wq))?;

    let scores = cross_attention_scores(query_feat, support_feat, weights)?;
    let (masked, report) = apply_strategy(&scores, strategy, support, query, weights.block_index)?;
    let probs = row_softmax(masked.scores())?;

    let d = weights.head_dim();
    let v = project(support_feat, &weights.wv, &weights.bv)?;
    let rows = weighted_values(&probs, &v, d);
    let n = hq * wq;
    let mut out = vec![0.0f32; d * n];
    for (i, row) in rows.chunks_exact(d).enumerate() {
        for (o, &x) in row.iter().enumerate() {
            out[o * n + i] = x;
        }
    }
    Ok((Tensor::new(&[d, hq, wq], out)?, report))
}

/// Applies the blocks in order, feeding each output back in as the next
/// block's query features. Support features and masks stay fixed.
pub fn decoder_chain(
    query_feat: &Tensor,
    support_feat: &Tensor,
    blocks: &[ProjectionWeights],
    strategy: MaskStrategy,
    masks: AttentionMasks<'_>,
) -> Result<(Tensor, Vec<MaskingReport>)> {
    if blocks.is_empty() {
        return Err(Error::Config("decoder chain needs at least one block".into()));
    }
    let mut current = query_feat.clone();
    let mut reports = Vec::with_capacity(blocks.len());
    for (i, block) in blocks.iter().enumerate() {
        let (next, report) = attention_forward(&current, support_feat, block, strategy, masks)
            .stage(format!("cross-attention block {i}"))?;
        current = next;
        reports.push(report);
    }
    Ok((current, reports))
}

/// Seeded chain of `count` blocks with head dimension equal to the channel
/// count, so every block maps `c` query channels to `c` outputs.
pub fn seeded_blocks(seed: u64, count: usize, channels: usize) -> Result<Vec<ProjectionWeights>> {
    (0..count)
        .map(|i| {
            ProjectionWeights::seeded(
                crate::rng::derive_seed(seed, i as u64),
                i,
                channels,
                channels,
                channels,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn map(rows: usize, cols: usize, v: Vec<f32>) -> AttentionMap {
        AttentionMap::new(Tensor::new(&[rows, cols], v).unwrap(), true).unwrap()
    }

    fn random_map(seed: u64, rows: usize, cols: usize) -> AttentionMap {
        let mut r = rng::seeded(seed);
        map(rows, cols, (0..rows * cols).map(|_| r.random_range(-3.0..3.0)).collect())
    }

    fn random_bits(seed: u64, n: usize, p: f64) -> Vec<u8> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| r.random_bool(p) as u8).collect()
    }

    fn random_features(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::new(&[c, h, w], (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    const NEG: f32 = f32::NEG_INFINITY;

    #[test]
    fn dicm_hand_traced_fixture() {
        let a = map(2, 2, vec![0.1, 0.9, 0.8, 0.2]);
        let (out, report) = dicm_mask(&a, &[0, 1], &[0, 1]).unwrap();
        assert_eq!(out.scores().data(), &[0.1, NEG, NEG, 0.2]);
        assert_eq!(report.masked_cells, 2);
        assert_eq!(report.masked_columns, 2);
        assert_eq!(report.total_cells, 4);
        assert_eq!(report.ratio, 0.5);
    }

    #[test]
    fn dicm_consistent_masks_mask_nothing() {
        let a = random_map(1, 6, 5);
        let (out, report) = dicm_mask(&a, &[1; 5], &[1; 6]).unwrap();
        assert_eq!(out, a);
        assert_eq!(report.masked_cells, 0);
    }

    #[test]
    fn dicm_ties_pick_lowest_row() {
        let a = map(3, 2, vec![0.5, 0.9, 0.5, 0.1, 0.1, 0.2]);
        let (out, report) = dicm_mask(&a, &[1, 0], &[0, 1, 0]).unwrap();
        assert!(out.is_masked(0, 0));
        assert!(!out.is_masked(1, 0));
        assert_eq!(report.masked_cells, 1);
    }

    #[test]
    fn dicm_never_masks_a_whole_row() {
        // One support pixel, argmax row disagrees: masking it would empty row 1.
        let a = map(2, 1, vec![0.1, 0.9]);
        let (out, report) = dicm_mask(&a, &[1], &[1, 0]).unwrap();
        assert_eq!(out, a);
        assert!(report.fallback);
        assert_eq!(report.masked_cells, 0);
    }

    #[test]
    fn dicm_rejects_wrong_mask_length() {
        let a = random_map(2, 3, 3);
        assert!(dicm_mask(&a, &[0, 1], &[0, 1, 1]).is_err());
    }

    #[test]
    fn cyctr_hand_traced_fixture() {
        let a = map(2, 2, vec![0.9, 0.8, 0.1, 0.2]);
        let (out, report) = cyctr_mask(&a, &[0, 1]).unwrap();
        assert_eq!(out.scores().data(), &[0.9, NEG, 0.1, NEG]);
        assert_eq!(report.masked_columns, 1);
        assert_eq!(report.masked_cells, 2);
    }

    #[test]
    fn cyctr_constant_mask_masks_nothing() {
        let a = random_map(3, 7, 4);
        let (out, report) = cyctr_mask(&a, &[0; 4]).unwrap();
        assert_eq!(out, a);
        assert_eq!(report.masked_cells, 0);
    }

    #[test]
    fn cyctr_self_cycle_column_survives() {
        let a = map(1, 2, vec![0.5, 0.5]);
        let (out, report) = cyctr_mask(&a, &[0, 1]).unwrap();
        // Column 0 cycles back to itself; column 1 lands on column 0.
        assert_eq!(report.masked_columns, 1);
        assert!(!out.is_masked(0, 0) && out.is_masked(0, 1));
        assert!(!report.fallback);
    }

    #[test]
    fn scores_single_dot_product() {
        let q = Tensor::new(&[3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let s = Tensor::new(&[3, 1, 1], vec![0.5, -1.0, 2.0]).unwrap();
        let a = cross_attention_scores(&q, &s, &ProjectionWeights::identity(3, 0).unwrap())
            .unwrap();
        let want = (0.5 - 2.0 + 6.0) / 3f32.sqrt();
        assert!((a.get(0, 0) - want).abs() < 1e-6);
        assert!(a.is_scaled());
    }

    #[test]
    fn scores_orthogonal_rows_are_zero() {
        let q = Tensor::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
        let s = Tensor::new(&[2, 1, 2], vec![0.0, 0.0, 1.0, 5.0]).unwrap();
        let a = cross_attention_scores(&q, &s, &ProjectionWeights::identity(2, 0).unwrap())
            .unwrap();
        assert_eq!(a.scores().data(), &[0.0, 0.0]);
    }

    #[test]
    fn scores_match_double_loop_oracle() {
        let q = random_features(5, 6, 2, 2);
        let s = random_features(6, 6, 2, 2);
        let w = ProjectionWeights::seeded(7, 0, 6, 6, 4).unwrap();
        let a = cross_attention_scores(&q, &s, &w).unwrap();
        let want = oracle::naive_attention_scores(&q, &s, &w).unwrap();
        for (g, e) in a.scores().data().iter().zip(&want) {
            assert!((*g as f64 - e).abs() <= 1e-5);
        }
    }

    #[test]
    fn scores_reject_channel_mismatch() {
        let q = random_features(5, 4, 2, 2);
        let s = random_features(6, 6, 2, 2);
        let w = ProjectionWeights::seeded(7, 0, 6, 6, 4).unwrap();
        assert!(matches!(
            cross_attention_scores(&q, &s, &w),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn forward_single_pixel_returns_value() {
        let q = Tensor::new(&[2, 1, 1], vec![0.3, -0.7]).unwrap();
        let s = Tensor::new(&[2, 1, 1], vec![1.5, 2.5]).unwrap();
        let w = ProjectionWeights::identity(2, 0).unwrap();
        let (out, report) =
            attention_forward(&q, &s, &w, MaskStrategy::None, AttentionMasks::default()).unwrap();
        assert_eq!(out.data(), &[1.5, 2.5]);
        assert_eq!(report.masked_cells, 0);
    }

    #[test]
    fn forward_dicm_without_query_mask_is_mode_error() {
        let q = random_features(1, 4, 3, 3);
        let s = random_features(2, 4, 3, 3);
        let sm = BinaryMask::ones(3, 3).unwrap();
        let w = ProjectionWeights::seeded(3, 0, 4, 4, 4).unwrap();
        let masks = AttentionMasks {
            support: Some(&sm),
            query: None,
        };
        assert!(matches!(
            attention_forward(&q, &s, &w, MaskStrategy::Dicm, masks),
            Err(Error::Mode(_))
        ));
        assert!(attention_forward(&q, &s, &w, MaskStrategy::None, masks).is_ok());
    }

    #[test]
    fn forward_consistent_dicm_equals_unmasked() {
        let q = random_features(1, 4, 3, 3);
        let s = random_features(2, 4, 3, 3);
        let ones = BinaryMask::ones(3, 3).unwrap();
        let w = ProjectionWeights::seeded(3, 0, 4, 4, 4).unwrap();
        let masks = AttentionMasks {
            support: Some(&ones),
            query: Some(&ones),
        };
        let (a, _) = attention_forward(&q, &s, &w, MaskStrategy::None, masks).unwrap();
        let (b, _) = attention_forward(&q, &s, &w, MaskStrategy::Dicm, masks).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chain_reports_one_entry_per_block() {
        let q = random_features(1, 4, 3, 3);
        let s = random_features(2, 4, 3, 3);
        let sm = BinaryMask::from_fn(3, 3, |y, _| y > 0).unwrap();
        let qm = BinaryMask::from_fn(3, 3, |_, x| x > 0).unwrap();
        let masks = AttentionMasks {
            support: Some(&sm),
            query: Some(&qm),
        };
        let blocks = seeded_blocks(9, 4, 4).unwrap();
        let (out, reports) = decoder_chain(&q, &s, &blocks, MaskStrategy::Dicm, masks).unwrap();
        assert_eq!(out.dims(), &[4, 3, 3]);
        assert_eq!(reports.len(), 4);
        assert_eq!(
            reports.iter().map(|r| r.block).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );

        let (single, r1) =
            decoder_chain(&q, &s, &blocks[..1], MaskStrategy::Dicm, masks).unwrap();
        let (direct, r2) =
            attention_forward(&q, &s, &blocks[0], MaskStrategy::Dicm, masks).unwrap();
        assert_eq!(single, direct);
        assert_eq!(r1[0], r2);

        assert!(decoder_chain(&q, &s, &[], MaskStrategy::None, masks).is_err());
    }

    #[test]
    fn chain_errors_carry_block_index() {
        let q = random_features(1, 4, 2, 2);
        let s = random_features(2, 4, 2, 2);
        let mut blocks = seeded_blocks(9, 2, 4).unwrap();
        blocks[1] = ProjectionWeights::seeded(1, 1, 3, 4, 4).unwrap();
        let err = decoder_chain(&q, &s, &blocks, MaskStrategy::None, AttentionMasks::default())
            .unwrap_err();
        assert!(err.to_string().contains("block 1"), "{err}");
    }

    #[test]
    fn strategy_parses_case_insensitively() {
        assert_eq!("DICM".parse::<MaskStrategy>().unwrap(), MaskStrategy::Dicm);
        assert_eq!("cyctr".parse::<MaskStrategy>().unwrap(), MaskStrategy::Cyctr);
        assert!("both".parse::<MaskStrategy>().is_err());
    }

    #[test]
    fn report_json_keys() {
        let a = map(2, 2, vec![0.1, 0.9, 0.8, 0.2]);
        let (_, report) = dicm_mask(&a, &[0, 1], &[0, 1]).unwrap();
        let v = serde_json::to_value(&report).unwrap();
        for key in ["block", "strategy", "total_cells", "masked_cells", "masked_columns", "ratio"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["strategy"], "dicm");
    }

    proptest! {
        #[test]
        fn dicm_structure(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..12) {
            let a = random_map(seed, rows, cols);
            let sm = random_bits(seed ^ 1, cols, 0.5);
            let qm = random_bits(seed ^ 2, rows, 0.5);
            let (out, report) = dicm_mask(&a, &sm, &qm).unwrap();
            prop_assert!(oracle::check_dicm_structure(&a, &out, &sm, &qm).is_ok());
            prop_assert!(report.masked_cells as usize <= cols);
            prop_assert!(report.ratio <= 1.0 / rows as f64 + 1e-12);
            let expect = oracle::naive_dicm_cells(&a, &sm, &qm);
            if !report.fallback {
                let got: Vec<(usize, usize)> = (0..rows)
                    .flat_map(|r| (0..cols).map(move |c| (r, c)))
                    .filter(|&(r, c)| out.is_masked(r, c))
                    .collect();
                prop_assert_eq!(got, expect);
            }
        }

        #[test]
        fn cyctr_structure(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..12) {
            let a = random_map(seed, rows, cols);
            let sm = random_bits(seed ^ 3, cols, 0.5);
            let (out, report) = cyctr_mask(&a, &sm).unwrap();
            prop_assert!(oracle::check_cyctr_columns(&out).is_ok());
            // The column holding the global maximum always cycles to itself.
            prop_assert!(!report.fallback);
            prop_assert_eq!(report.masked_cells, report.masked_columns * rows as u64);
            let k = report.ratio * cols as f64;
            prop_assert!((k - k.round()).abs() < 1e-9);
            if !report.fallback {
                prop_assert_eq!(oracle::naive_cyctr_columns(&a, &sm), (0..cols)
                    .filter(|&c| out.is_masked(0, c))
                    .collect::<Vec<_>>());
            }
        }

        #[test]
        fn masked_softmax_rows_are_stochastic(seed in any::<u64>(), rows in 1usize..10, cols in 2usize..10) {
            let a = random_map(seed, rows, cols);
            let sm = random_bits(seed ^ 4, cols, 0.5);
            let qm = random_bits(seed ^ 5, rows, 0.5);
            let (out, _) = dicm_mask(&a, &sm, &qm).unwrap();
            let p = row_softmax(out.scores()).unwrap();
            for r in 0..rows {
                let sum: f64 = p.row(r).iter().map(|&v| v as f64).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                for c in 0..cols {
                    if out.is_masked(r, c) {
                        prop_assert_eq!(p.row(r)[c], 0.0);
                    }
                }
            }
        }
    }
}

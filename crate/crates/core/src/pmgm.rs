//! Prior-map generation.
//!
//! CAM heatmaps split each image into CAM+ (activation at or above the
//! threshold) and CAM- pixels. Intersecting the support ground truth with that
//! split yields two foreground sub-regions whose pooled features form the
//! dual prototypes. Query pixels are then scored against the prototype of
//! their own CAM region and each region is min-max normalised on its own.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    channel_concat, check_grid, conv1x1, masked_minmax_normalize, resize_bilinear, BinaryMask,
    Tensor,
};

/// Threshold used when none is configured.
pub const DEFAULT_DELTA: f32 = 0.7;

/// Class activation heatmap, `1 x h x w`, values clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CamHeatmap {
    grid: Tensor,
    class_id: u32,
}

impl CamHeatmap {
    /// Accepts `h x w` or `1 x h x w`; values are clamped into `[0, 1]`.
    pub fn new(grid: Tensor, class_id: u32) -> Result<Self> {
        let (h, w) = grid.spatial()?;
        if grid.shape().rank() == 3 && grid.dims()[0] != 1 {
            return Err(Error::Shape(format!(
                "heatmap must have one channel, got {:?}",
                grid.shape()
            )));
        }
        if let Some(i) = grid.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("heatmap element {i} is not finite")));
        }
        let data = grid.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            grid: Tensor::new(&[1, h, w], data)?,
            class_id,
        })
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.spatial().expect("heatmap is 1 x h x w")
    }

    /// Bilinearly resamples to a feature grid, then re-clamps.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        if self.dims() == (height, width) {
            return Ok(self.clone());
        }
        Self::new(resize_bilinear(&self.grid, height, width)?, self.class_id)
    }
}

/// CAM+ / CAM- split of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CamSplit {
    pub pos: BinaryMask,
    pub neg: BinaryMask,
}

/// Support region decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub cam_pos: BinaryMask,
    pub cam_neg: BinaryMask,
    /// Foreground inside CAM+.
    pub a1: BinaryMask,
    /// Foreground inside CAM-.
    pub a2: BinaryMask,
}

/// The dual prototypes and the plain foreground prototype. `None` marks a
/// prototype whose pooling region was empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub p1: Option<Vec<f32>>,
    pub p2: Option<Vec<f32>>,
    pub p: Vec<f32>,
}

impl PrototypeSet {
    pub fn channels(&self) -> usize {
        self.p.len()
    }

    /// CAM+ prototype, falling back to the foreground prototype when undefined.
    pub fn pos_or_fallback(&self) -> &[f32] {
        self.p1.as_deref().unwrap_or(&self.p)
    }

    /// CAM- prototype, falling back to the foreground prototype when undefined.
    pub fn neg_or_fallback(&self) -> &[f32] {
        self.p2.as_deref().unwrap_or(&self.p)
    }
}

/// Foreground prior, `1 x h x w`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMap {
    grid: Tensor,
}

impl PriorMap {
    pub fn new(grid: Tensor) -> Result<Self> {
        let (h, w) = grid.spatial()?;
        if grid.shape().rank() == 3 && grid.dims()[0] != 1 {
            return Err(Error::Shape(format!(
                "prior must have one channel, got {:?}",
                grid.shape()
            )));
        }
        if let Some(v) = grid
            .data()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Invariant(format!("prior value {v} outside [0, 1]")));
        }
        Ok(Self {
            grid: grid.reshape(&[1, h, w])?,
        })
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn values(&self) -> &[f32] {
        self.grid.data()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.spatial().expect("prior is 1 x h x w")
    }

    /// Pixels with prior at least `threshold`.
    pub fn to_mask(&self, threshold: f32) -> BinaryMask {
        let (h, w) = self.dims();
        let bits = self.values().iter().map(|&v| (v >= threshold) as u8).collect();
        BinaryMask::new(h, w, bits).expect("prior extents are valid")
    }
}

fn check_delta(delta: f32) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("threshold {delta} must lie in (0, 1)")));
    }
    Ok(())
}

/// Step threshold: CAM+ where the heatmap is at least `delta`.
pub fn threshold_cam(heatmap: &CamHeatmap, delta: f32) -> Result<CamSplit> {
    check_delta(delta)?;
    let (h, w) = heatmap.dims();
    let bits: Vec<u8> = heatmap
        .grid()
        .data()
        .iter()
        .map(|&v| (v >= delta) as u8)
        .collect();
    let pos = BinaryMask::new(h, w, bits)?;
    let neg = pos.complement();
    Ok(CamSplit { pos, neg })
}

pub fn decompose_regions(
    support_mask: &BinaryMask,
    cam_pos: &BinaryMask,
    cam_neg: &BinaryMask,
) -> Result<RegionMasks> {
    let a1 = support_mask.and(cam_pos)?;
    let a2 = support_mask.and(cam_neg)?;
    Ok(RegionMasks {
        cam_pos: cam_pos.clone(),
        cam_neg: cam_neg.clone(),
        a1,
        a2,
    })
}

/// Per-channel mean over the active pixels of `region`; `None` when the
/// region is empty.
pub fn masked_average_pool(features: &Tensor, region: &BinaryMask) -> Result<Option<Vec<f32>>> {
    let (c, h, w) = features.chw()?;
    check_grid("masked_average_pool", features, region)?;
    let count = region.count();
    if count == 0 {
        return Ok(None);
    }
    let plane = h * w;
    let pooled = (0..c)
        .map(|ch| {
            let sum: f64 = features.data()[ch * plane..(ch + 1) * plane]
                .iter()
                .zip(region.bits())
                .filter(|(_, &m)| m == 1)
                .map(|(&v, _)| v as f64)
                .sum();
            (sum / count as f64) as f32
        })
        .collect();
    Ok(Some(pooled))
}

pub fn build_prototypes(
    support_features: &Tensor,
    regions: &RegionMasks,
    support_mask: &BinaryMask,
) -> Result<PrototypeSet> {
    let p = masked_average_pool(support_features, support_mask)?.ok_or_else(|| {
        Error::InvalidEpisode("support mask has no foreground pixels".into())
    })?;
    let p1 = masked_average_pool(support_features, &regions.a1)?;
    let p2 = masked_average_pool(support_features, &regions.a2)?;
    Ok(PrototypeSet { p1, p2, p })
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0) as f32
}

/// Per-pixel cosine against `pos_proto` on `cam_pos` and `neg_proto`
/// elsewhere, before normalisation.
pub fn raw_cosine_map(
    features: &Tensor,
    pos_proto: &[f32],
    neg_proto: &[f32],
    cam_pos: &BinaryMask,
) -> Result<Tensor> {
    let (c, h, w) = features.chw()?;
    check_grid("raw_cosine_map", features, cam_pos)?;
    if pos_proto.len() != c || neg_proto.len() != c {
        return Err(Error::dim("raw_cosine_map", (pos_proto.len(), neg_proto.len()), c));
    }
    let plane = h * w;
    let mut pixel = vec![0.0f32; c];
    let mut out = Vec::with_capacity(plane);
    for i in 0..plane {
        for (ch, v) in pixel.iter_mut().enumerate() {
            *v = features.data()[ch * plane + i];
        }
        let proto = if cam_pos.bits()[i] == 1 {
            pos_proto
        } else {
            neg_proto
        };
        out.push(cosine(&pixel, proto));
    }
    Tensor::new(&[1, h, w], out)
}

/// Region-wise cosine prior. Each CAM region is normalised independently and
/// the two disjoint results are summed.
pub fn region_cosine_prior(
    query_features: &Tensor,
    prototypes: &PrototypeSet,
    cam_pos: &BinaryMask,
    cam_neg: &BinaryMask,
) -> Result<PriorMap> {
    if cam_pos.intersects(cam_neg)? {
        return Err(Error::Invariant("CAM+ and CAM- regions overlap".into()));
    }
    let raw = raw_cosine_map(
        query_features,
        prototypes.pos_or_fallback(),
        prototypes.neg_or_fallback(),
        cam_pos,
    )?;
    let pos = masked_minmax_normalize(&raw, cam_pos)?;
    let neg = masked_minmax_normalize(&raw, cam_neg)?;
    let (h, w) = cam_pos.dims();
    let merged = pos.data().iter().zip(neg.data()).map(|(a, b)| a + b).collect();
    PriorMap::new(Tensor::new(&[1, h, w], merged)?)
}

/// Broadcast feature maps for fusion: `x_p` carries the foreground prototype
/// everywhere, `x_c` carries the CAM+ prototype on `region_pos` and the CAM-
/// prototype on `region_neg`. Undefined prototypes contribute zeros.
pub fn expand_prototypes(
    prototypes: &PrototypeSet,
    region_pos: &BinaryMask,
    region_neg: &BinaryMask,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<(Tensor, Tensor)> {
    if prototypes.channels() != channels {
        return Err(Error::dim("expand_prototypes", prototypes.channels(), channels));
    }
    for region in [region_pos, region_neg] {
        if region.dims() != (height, width) {
            return Err(Error::dim("expand_prototypes", region.dims(), (height, width)));
        }
    }
    if region_pos.intersects(region_neg)? {
        return Err(Error::Invariant(
            "prototype fill regions overlap".into(),
        ));
    }
    let plane = height * width;
    let mut x_p = Vec::with_capacity(channels * plane);
    let mut x_c = vec![0.0f32; channels * plane];
    for ch in 0..channels {
        x_p.extend(std::iter::repeat_n(prototypes.p[ch], plane));
        let dst = &mut x_c[ch * plane..(ch + 1) * plane];
        for (proto, region) in [(&prototypes.p1, region_pos), (&prototypes.p2, region_neg)] {
            if let Some(proto) = proto {
                for (d, &m) in dst.iter_mut().zip(region.bits()) {
                    if m == 1 {
                        *d = proto[ch];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(&[channels, height, width], x_p)?,
        Tensor::new(&[channels, height, width], x_c)?,
    ))
}

/// 1x1 convolution weights mapping `3c + 1` fused channels back to `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub weights: Tensor,
    pub bias: Vec<f32>,
}

impl FusionWeights {
    pub fn new(weights: Tensor, bias: Vec<f32>) -> Result<Self> {
        let (out, inp) = weights.matrix_dims()?;
        if bias.len() != out {
            return Err(Error::dim("fusion bias", bias.len(), out));
        }
        if inp != 3 * out + 1 {
            return Err(Error::dim("fusion weights (expected c x 3c+1)", (out, inp), out));
        }
        Ok(Self { weights, bias })
    }

    /// Seeded `uniform(-1/sqrt(3c+1), 1/sqrt(3c+1))` initialisation, zero bias.
    pub fn seeded(seed: u64, channels: usize) -> Result<Self> {
        let fan_in = 3 * channels + 1;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let weights = crate::rng::uniform_matrix(seed, channels, fan_in, bound)?;
        Self::new(weights, vec![0.0; channels])
    }

    /// Weights that copy the branch features through unchanged.
    pub fn passthrough(channels: usize) -> Result<Self> {
        let fan_in = 3 * channels + 1;
        let mut w = vec![0.0; channels * fan_in];
        for ch in 0..channels {
            w[ch * fan_in + ch] = 1.0;
        }
        Self::new(Tensor::new(&[channels, fan_in], w)?, vec![0.0; channels])
    }
}

/// Concatenates `[branch, x_p, x_c, prior]` and applies the 1x1 convolution.
pub fn fuse_features(
    branch_features: &Tensor,
    x_p: &Tensor,
    x_c: &Tensor,
    prior: &PriorMap,
    fusion: &FusionWeights,
) -> Result<Tensor> {
    let stacked = channel_concat(&[branch_features, x_p, x_c, prior.grid()])?;
    conv1x1(&stacked, &fusion.weights, &fusion.bias)
}

fn mean_f64(values: impl Iterator<Item = f32>) -> Option<f32> {
    let (sum, n) = values.fold((0.0f64, 0usize), |(s, n), v| (s + v as f64, n + 1));
    (n > 0).then(|| (sum / n as f64) as f32)
}

/// Averages priors and prototypes over K shots. A prototype missing in some
/// shots is averaged over the shots that define it.
pub fn kshot_average(
    priors: &[PriorMap],
    prototypes: &[PrototypeSet],
) -> Result<(PriorMap, PrototypeSet)> {
    if priors.is_empty() || prototypes.is_empty() {
        return Err(Error::Config("k-shot averaging needs at least one shot".into()));
    }
    if priors.len() != prototypes.len() {
        return Err(Error::dim("kshot_average", priors.len(), prototypes.len()));
    }
    let dims = priors[0].dims();
    let channels = prototypes[0].channels();
    if let Some(p) = priors.iter().find(|p| p.dims() != dims) {
        return Err(Error::dim("kshot_average prior", p.dims(), dims));
    }
    if let Some(p) = prototypes.iter().find(|p| p.channels() != channels) {
        return Err(Error::dim("kshot_average prototype", p.channels(), channels));
    }

    let n = dims.0 * dims.1;
    let prior: Vec<f32> = (0..n)
        .map(|i| mean_f64(priors.iter().map(|p| p.values()[i])).unwrap())
        .collect();
    let average = |pick: &dyn Fn(&PrototypeSet) -> Option<&[f32]>| -> Option<Vec<f32>> {
        let defined: Vec<&[f32]> = prototypes.iter().filter_map(pick).collect();
        if defined.is_empty() {
            return None;
        }
        Some(
            (0..channels)
                .map(|ch| mean_f64(defined.iter().map(|v| v[ch])).unwrap())
                .collect(),
        )
    };
    let set = PrototypeSet {
        p1: average(&|s| s.p1.as_deref()),
        p2: average(&|s| s.p2.as_deref()),
        p: average(&|s| Some(&s.p)).unwrap(),
    };
    Ok((PriorMap::new(Tensor::new(&[1, dims.0, dims.1], prior)?)?, set))
}

/// Everything the prior stage produces for one support/query pair.
#[derive(Debug, Clone)]
pub struct PmgmOutput {
    pub support: RegionMasks,
    pub query: CamSplit,
    pub prototypes: PrototypeSet,
    pub prior: PriorMap,
}

/// Threshold, decompose, pool and score in one pass. Heatmaps must already
/// be on the feature grid.
pub fn generate_prior(
    support_features: &Tensor,
    support_mask: &BinaryMask,
    support_cam: &CamHeatmap,
    query_features: &Tensor,
    query_cam: &CamHeatmap,
    delta: f32,
) -> Result<PmgmOutput> {
    let s = threshold_cam(support_cam, delta)?;
    let q = threshold_cam(query_cam, delta)?;
    let support = decompose_regions(support_mask, &s.pos, &s.neg)?;
    let prototypes = build_prototypes(support_features, &support, support_mask)?;
    let prior = region_cosine_prior(query_features, &prototypes, &q.pos, &q.neg)?;
    Ok(PmgmOutput {
        support,
        query: q,
        prototypes,
        prior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn heat(h: usize, w: usize, v: Vec<f32>) -> CamHeatmap {
        CamHeatmap::new(Tensor::new(&[h, w], v).unwrap(), 3).unwrap()
    }

    fn random_features(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::new(&[c, h, w], (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn random_mask(seed: u64, h: usize, w: usize, p: f64) -> BinaryMask {
        let mut r = rng::seeded(seed);
        BinaryMask::new(h, w, (0..h * w).map(|_| r.random_bool(p) as u8).collect()).unwrap()
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let s = threshold_cam(&heat(1, 3, vec![0.69, 0.71, 0.7]), 0.7).unwrap();
        assert_eq!(s.pos.bits(), &[0, 1, 1]);
        assert_eq!(s.neg.bits(), &[1, 0, 0]);

        let s = threshold_cam(&heat(2, 2, vec![0.0; 4]), 0.7).unwrap();
        assert!(s.pos.is_empty());
        assert_eq!(s.neg.count(), 4);
    }

    #[test]
    fn threshold_rejects_out_of_range_delta() {
        let h = heat(1, 1, vec![0.5]);
        for d in [0.0, 1.0, -0.1, f32::NAN] {
            assert!(matches!(threshold_cam(&h, d), Err(Error::Config(_))));
        }
    }

    #[test]
    fn heatmap_is_clamped_on_load() {
        let h = heat(1, 2, vec![-0.5, 1.5]);
        assert_eq!(h.grid().data(), &[0.0, 1.0]);
    }

    #[test]
    fn decompose_with_full_mask() {
        let ms = BinaryMask::ones(2, 4).unwrap();
        let left = BinaryMask::from_fn(2, 4, |_, x| x < 2).unwrap();
        let r = decompose_regions(&ms, &left, &left.complement()).unwrap();
        assert_eq!(r.a1, left);
        assert_eq!(r.a2, left.complement());

        let empty = BinaryMask::zeros(2, 4).unwrap();
        let r = decompose_regions(&empty, &left, &left.complement()).unwrap();
        assert!(r.a1.is_empty() && r.a2.is_empty());

        let wrong = BinaryMask::zeros(3, 4).unwrap();
        assert!(decompose_regions(&wrong, &left, &left.complement()).is_err());
    }

    #[test]
    fn decompose_matches_bitwise_oracle() {
        for seed in 0..20 {
            let ms = random_mask(seed, 6, 7, 0.5);
            let pos = random_mask(seed + 100, 6, 7, 0.4);
            let r = decompose_regions(&ms, &pos, &pos.complement()).unwrap();
            for i in 0..ms.len() {
                let (m, c) = (ms.bits()[i], pos.bits()[i]);
                assert_eq!(r.a1.bits()[i], m & c);
                assert_eq!(r.a2.bits()[i], m & (1 - c));
            }
        }
    }

    #[test]
    fn map_examples() {
        let f = Tensor::filled(&[3, 2, 2], 4.0).unwrap();
        let m = BinaryMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(masked_average_pool(&f, &m).unwrap(), Some(vec![4.0; 3]));

        let f = Tensor::new(&[1, 1, 3], vec![1.0, 3.0, 100.0]).unwrap();
        let m = BinaryMask::new(1, 3, vec![1, 1, 0]).unwrap();
        assert_eq!(masked_average_pool(&f, &m).unwrap(), Some(vec![2.0]));

        assert_eq!(
            masked_average_pool(&f, &BinaryMask::zeros(1, 3).unwrap()).unwrap(),
            None
        );
    }

    #[test]
    fn map_matches_accumulation_oracle() {
        let f = random_features(11, 16, 8, 8);
        let m = random_mask(12, 8, 8, 0.3);
        let got = masked_average_pool(&f, &m).unwrap().unwrap();
        let want = oracle::naive_masked_average(&f, &m).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((*g as f64 - w).abs() <= 1e-5);
        }
    }

    #[test]
    fn prototypes_with_empty_cam_neg_region() {
        let f = random_features(1, 4, 3, 3);
        let ms = BinaryMask::from_fn(3, 3, |y, _| y == 1).unwrap();
        let pos = BinaryMask::ones(3, 3).unwrap();
        let regions = decompose_regions(&ms, &pos, &pos.complement()).unwrap();
        let set = build_prototypes(&f, &regions, &ms).unwrap();
        assert!(set.p2.is_none());
        assert_eq!(set.p1.as_ref().unwrap(), &set.p);
    }

    #[test]
    fn prototypes_equal_for_constant_features() {
        let f = Tensor::filled(&[4, 3, 3], -0.25).unwrap();
        let ms = BinaryMask::ones(3, 3).unwrap();
        let pos = BinaryMask::from_fn(3, 3, |y, x| y == x).unwrap();
        let regions = decompose_regions(&ms, &pos, &pos.complement()).unwrap();
        let set = build_prototypes(&f, &regions, &ms).unwrap();
        assert_eq!(set.p1.as_ref().unwrap(), &set.p);
        assert_eq!(set.p2.as_ref().unwrap(), &set.p);
    }

    #[test]
    fn prototypes_reject_empty_support() {
        let f = Tensor::filled(&[2, 2, 2], 1.0).unwrap();
        let empty = BinaryMask::zeros(2, 2).unwrap();
        let regions = decompose_regions(&empty, &empty, &empty.complement()).unwrap();
        assert!(matches!(
            build_prototypes(&f, &regions, &empty),
            Err(Error::InvalidEpisode(_))
        ));
    }

    #[test]
    fn single_pixel_region_gets_degenerate_value() {
        let q = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 2.0, 1.0]).unwrap();
        let protos = PrototypeSet {
            p1: Some(vec![1.0, 2.0]),
            p2: Some(vec![1.0, 0.0]),
            p: vec![1.0, 1.0],
        };
        let pos = BinaryMask::new(1, 2, vec![1, 0]).unwrap();
        let prior = region_cosine_prior(&q, &protos, &pos, &pos.complement()).unwrap();
        assert_eq!(prior.values(), &[0.5, 0.5]);
    }

    #[test]
    fn orthogonal_pixel_has_zero_raw_cosine() {
        let q = Tensor::new(&[2, 1, 1], vec![0.0, 3.0]).unwrap();
        let pos = BinaryMask::ones(1, 1).unwrap();
        let raw = raw_cosine_map(&q, &[2.0, 0.0], &[1.0, 1.0], &pos).unwrap();
        assert_eq!(raw.data(), &[0.0]);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn undefined_prototype_falls_back_to_foreground() {
        let q = random_features(5, 4, 3, 3);
        let p = vec![0.3, -0.2, 0.9, 0.1];
        let with_fallback = PrototypeSet {
            p1: None,
            p2: None,
            p: p.clone(),
        };
        let explicit = PrototypeSet {
            p1: Some(p.clone()),
            p2: Some(p.clone()),
            p,
        };
        let pos = random_mask(6, 3, 3, 0.5);
        let a = region_cosine_prior(&q, &with_fallback, &pos, &pos.complement()).unwrap();
        let b = region_cosine_prior(&q, &explicit, &pos, &pos.complement()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prior_matches_brute_force_oracle() {
        let sf = random_features(21, 16, 8, 8);
        let qf = random_features(22, 16, 8, 8);
        let ms = random_mask(23, 8, 8, 0.4);
        let sc = CamHeatmap::new(random_features(24, 1, 8, 8), 1).unwrap();
        let qc = CamHeatmap::new(random_features(25, 1, 8, 8), 1).unwrap();
        let out = generate_prior(&sf, &ms, &sc, &qf, &qc, 0.3).unwrap();
        let want = oracle::naive_pmgm_prior(&sf, &ms, &sc, &qf, &qc, 0.3).unwrap();
        let diff = out
            .prior
            .values()
            .iter()
            .zip(&want)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-5, "max diff {diff}");
    }

    #[test]
    fn expand_fills_regions() {
        let protos = PrototypeSet {
            p1: Some(vec![1.0, 2.0]),
            p2: Some(vec![-1.0, -2.0]),
            p: vec![0.5, 0.25],
        };
        let pos = BinaryMask::new(1, 3, vec![1, 0, 0]).unwrap();
        let neg = BinaryMask::new(1, 3, vec![0, 1, 0]).unwrap();
        let (xp, xc) = expand_prototypes(&protos, &pos, &neg, 2, 1, 3).unwrap();
        assert_eq!(xp.data(), &[0.5, 0.5, 0.5, 0.25, 0.25, 0.25]);
        assert_eq!(xc.data(), &[1.0, -1.0, 0.0, 2.0, -2.0, 0.0]);

        let empty = BinaryMask::zeros(1, 3).unwrap();
        let (_, xc) = expand_prototypes(&protos, &empty, &empty, 2, 1, 3).unwrap();
        assert!(xc.data().iter().all(|&v| v == 0.0));

        assert!(matches!(
            expand_prototypes(&protos, &pos, &pos, 2, 1, 3),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn expand_zeroes_undefined_prototype_region() {
        let protos = PrototypeSet {
            p1: None,
            p2: Some(vec![3.0]),
            p: vec![1.0],
        };
        let pos = BinaryMask::new(1, 2, vec![1, 0]).unwrap();
        let (_, xc) = expand_prototypes(&protos, &pos, &pos.complement(), 1, 1, 2).unwrap();
        assert_eq!(xc.data(), &[0.0, 3.0]);
    }

    #[test]
    fn fusion_passthrough_and_shapes() {
        let c = 3;
        let x = random_features(31, c, 4, 4);
        let xp = random_features(32, c, 4, 4);
        let xc = random_features(33, c, 4, 4);
        let prior = PriorMap::new(Tensor::filled(&[1, 4, 4], 0.5).unwrap()).unwrap();
        let out = fuse_features(&x, &xp, &xc, &prior, &FusionWeights::passthrough(c).unwrap())
            .unwrap();
        assert_eq!(out, x);

        let seeded = FusionWeights::seeded(3, c).unwrap();
        let out = fuse_features(&x, &xp, &xc, &prior, &seeded).unwrap();
        assert_eq!(out.dims(), &[c, 4, 4]);

        let want = oracle::naive_fusion(&x, &xp, &xc, prior.grid(), &seeded.weights, &seeded.bias)
            .unwrap();
        let diff = out
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-5);

        assert!(FusionWeights::new(Tensor::zeros(&[3, 9]).unwrap(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn kshot_examples() {
        let a = PriorMap::new(Tensor::filled(&[1, 2, 2], 0.2).unwrap()).unwrap();
        let b = PriorMap::new(Tensor::filled(&[1, 2, 2], 0.6).unwrap()).unwrap();
        let pa = PrototypeSet {
            p1: Some(vec![1.0]),
            p2: None,
            p: vec![2.0],
        };
        let pb = PrototypeSet {
            p1: Some(vec![3.0]),
            p2: None,
            p: vec![4.0],
        };
        let (prior, set) = kshot_average(&[a.clone(), b], &[pa.clone(), pb]).unwrap();
        assert!(prior.values().iter().all(|&v| (v - 0.4).abs() < 1e-7));
        assert_eq!(set.p1, Some(vec![2.0]));
        assert_eq!(set.p2, None);
        assert_eq!(set.p, vec![3.0]);

        let (prior, set) = kshot_average(std::slice::from_ref(&a), std::slice::from_ref(&pa)).unwrap();
        assert_eq!((prior, set), (a.clone(), pa.clone()));

        assert!(matches!(kshot_average(&[], &[]), Err(Error::Config(_))));
    }

    #[test]
    fn kshot_partial_definition_averages_defined_shots() {
        let prior = PriorMap::new(Tensor::filled(&[1, 1, 1], 0.5).unwrap()).unwrap();
        let defined = PrototypeSet {
            p1: Some(vec![6.0]),
            p2: None,
            p: vec![1.0],
        };
        let missing = PrototypeSet {
            p1: None,
            p2: None,
            p: vec![1.0],
        };
        let (_, set) =
            kshot_average(&[prior.clone(), prior], &[defined, missing]).unwrap();
        assert_eq!(set.p1, Some(vec![6.0]));
    }

    proptest! {
        #[test]
        fn partition_and_containment(seed in any::<u64>(), delta in 0.05f32..0.95) {
            let ms = random_mask(seed, 5, 6, 0.5);
            let cam = CamHeatmap::new(random_features(seed ^ 1, 1, 5, 6), 0).unwrap();
            let s = threshold_cam(&cam, delta).unwrap();
            prop_assert!(!s.pos.intersects(&s.neg).unwrap());
            prop_assert_eq!(s.pos.or(&s.neg).unwrap(), BinaryMask::ones(5, 6).unwrap());
            let r = decompose_regions(&ms, &s.pos, &s.neg).unwrap();
            prop_assert!(!r.a1.intersects(&r.a2).unwrap());
            prop_assert_eq!(r.a1.or(&r.a2).unwrap(), ms);
        }

        #[test]
        fn prior_stays_in_unit_interval(seed in any::<u64>(), delta in 0.05f32..0.95) {
            let mut ms = random_mask(seed, 6, 6, 0.5);
            if ms.is_empty() { ms = BinaryMask::ones(6, 6).unwrap(); }
            let sf = random_features(seed ^ 2, 5, 6, 6);
            let qf = random_features(seed ^ 3, 5, 6, 6);
            let sc = CamHeatmap::new(random_features(seed ^ 4, 1, 6, 6), 0).unwrap();
            let qc = CamHeatmap::new(random_features(seed ^ 5, 1, 6, 6), 0).unwrap();
            let out = generate_prior(&sf, &ms, &sc, &qf, &qc, delta).unwrap();
            prop_assert!(out.prior.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn prototype_consistency(seed in any::<u64>()) {
            let sf = random_features(seed, 4, 5, 5);
            let mut ms = random_mask(seed ^ 7, 5, 5, 0.5);
            if ms.is_empty() { ms = BinaryMask::ones(5, 5).unwrap(); }
            // CAM+ covering the whole foreground forces p1 = p.
            let pos = ms.or(&random_mask(seed ^ 8, 5, 5, 0.3)).unwrap();
            let r = decompose_regions(&ms, &pos, &pos.complement()).unwrap();
            let set = build_prototypes(&sf, &r, &ms).unwrap();
            prop_assert_eq!(set.p1.as_ref().unwrap(), &set.p);
            // CAM+ disjoint from the foreground forces p2 = p.
            let pos = ms.complement();
            let r = decompose_regions(&ms, &pos, &pos.complement()).unwrap();
            let set = build_prototypes(&sf, &r, &ms).unwrap();
            prop_assert_eq!(set.p2.as_ref().unwrap(), &set.p);
        }

        #[test]
        fn cosine_is_scale_invariant(seed in any::<u64>(), scale in 0.01f32..100.0) {
            let qf = random_features(seed, 6, 4, 4);
            let scaled = Tensor::new(qf.dims(), qf.data().iter().map(|v| v * scale).collect()).unwrap();
            let pos = random_mask(seed ^ 9, 4, 4, 0.5);
            let p1 = random_features(seed ^ 10, 6, 1, 1).into_data();
            let p2 = random_features(seed ^ 11, 6, 1, 1).into_data();
            let a = raw_cosine_map(&qf, &p1, &p2, &pos).unwrap();
            let b = raw_cosine_map(&scaled, &p1, &p2, &pos).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
        }
    }
}

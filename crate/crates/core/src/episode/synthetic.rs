//! Deterministic synthetic episodes.
//!
//! Each episode draws two orthogonal unit directions for its class: a
//! "salient" direction carried by the object part a CAM would fire on, and a
//! "body" direction carried by the rest of the object. Background pixels are
//! pure noise. With the distractor enabled, a background patch carries the
//! salient direction too, so a single whole-object prototype cannot tell it
//! apart from the real object.
//!
//! Heatmaps are derived from the salient part. Below full fidelity, enough
//! background pixels are switched on (neighbours of the salient part first)
//! that roughly a `cam_fidelity` share of the CAM+ pixels lie on the object.
//! At fidelity 0 the activation sits entirely off the object.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Episode;
use crate::error::{Error, Result};
use crate::pmgm::CamHeatmap;
use crate::rng::{derive_seed, seeded, Stream};
use crate::tensor::{BinaryMask, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Length of the class directions added to object pixels.
    pub signal: f32,
    /// Standard deviation of the per-channel Gaussian noise.
    pub noise: f32,
    pub cam_fidelity: f64,
    pub distractor: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: 16,
            height: 8,
            width: 8,
            signal: 1.0,
            noise: 0.25,
            cam_fidelity: 0.9,
            distractor: false,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(Error::Config("synthetic episodes need at least 2 channels".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!(
                "synthetic grid {}x{} is too small; need at least 4x4",
                self.height, self.width
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise scale {} must be >= 0", self.noise)));
        }
        if !self.signal.is_finite() {
            return Err(Error::Config("signal strength must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.cam_fidelity) {
            return Err(Error::Config(format!(
                "cam fidelity {} must lie in [0, 1]",
                self.cam_fidelity
            )));
        }
        Ok(())
    }

    /// Class label derived from the seed, in `1..=20`.
    pub fn class_id(&self) -> u32 {
        (derive_seed(self.seed, u64::MAX) % 20) as u32 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    /// True if the rectangles overlap after growing `self` by `gap` pixels.
    fn near(&self, o: &Rect, gap: usize) -> bool {
        let (y0, x0) = (self.y.saturating_sub(gap), self.x.saturating_sub(gap));
        let (y1, x1) = (self.y + self.h + gap, self.x + self.w + gap);
        y0 < o.y + o.h && o.y < y1 && x0 < o.x + o.w && o.x < x1
    }
}

struct Layout {
    object: BinaryMask,
    salient: BinaryMask,
    distractor: BinaryMask,
}

fn extent_range(n: usize) -> (usize, usize) {
    let lo = (n / 3).max(3).min(n - 1);
    let hi = (n / 2 + 1).max(lo).min(n - 1);
    (lo, hi)
}

fn sample_layout(r: &mut Stream, h: usize, w: usize, distractor: bool) -> Result<Layout> {
    let (lh, hh) = extent_range(h);
    let (lw, hw) = extent_range(w);
    let oh = r.random_range(lh..=hh);
    let ow = r.random_range(lw..=hw);
    let object = Rect {
        y: r.random_range(0..=h - oh),
        x: r.random_range(0..=w - ow),
        h: oh,
        w: ow,
    };
    // Salient half: top, bottom, left or right, rounded up (at least 2 wide).
    let salient = match r.random_range(0..4) {
        0 => Rect { h: oh.div_ceil(2), ..object },
        1 => Rect {
            y: object.y + oh / 2,
            h: oh.div_ceil(2),
            ..object
        },
        2 => Rect { w: ow.div_ceil(2), ..object },
        _ => Rect {
            x: object.x + ow / 2,
            w: ow.div_ceil(2),
            ..object
        },
    };

    let mut patch = None;
    if distractor {
        let dh = r.random_range(2..=(h / 4).max(2));
        let dw = r.random_range(2..=(w / 4).max(2));
        'search: for gap in [1, 0] {
            for _ in 0..64 {
                let cand = Rect {
                    y: r.random_range(0..=h - dh),
                    x: r.random_range(0..=w - dw),
                    h: dh,
                    w: dw,
                };
                if !cand.near(&object, gap) {
                    patch = Some(cand);
                    break 'search;
                }
            }
        }
    }

    Ok(Layout {
        object: BinaryMask::from_fn(h, w, |y, x| object.contains(y, x))?,
        salient: BinaryMask::from_fn(h, w, |y, x| salient.contains(y, x))?,
        distractor: BinaryMask::from_fn(h, w, |y, x| patch.is_some_and(|p| p.contains(y, x)))?,
    })
}

fn unit_vector(r: &mut Stream, c: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

/// Two orthonormal directions.
fn class_directions(r: &mut Stream, c: usize) -> (Vec<f32>, Vec<f32>) {
    let u = unit_vector(r, c);
    loop {
        let v = unit_vector(r, c);
        let proj: f64 = u.iter().zip(&v).map(|(a, b)| *a as f64 * *b as f64).sum();
        let w: Vec<f64> = v
            .iter()
            .zip(&u)
            .map(|(b, a)| *b as f64 - proj * *a as f64)
            .collect();
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return (u, w.iter().map(|x| (x / n) as f32).collect());
        }
    }
}

fn render_features(
    r: &mut Stream,
    cfg: &SyntheticConfig,
    layout: &Layout,
    salient_dir: &[f32],
    body_dir: &[f32],
) -> Result<Tensor> {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let plane = h * w;
    let mut data = vec![0.0f32; c * plane];
    for i in 0..plane {
        let dir = if layout.salient.bits()[i] == 1 || layout.distractor.bits()[i] == 1 {
            Some(salient_dir)
        } else if layout.object.bits()[i] == 1 {
            Some(body_dir)
        } else {
            None
        };
        for ch in 0..c {
            let base = dir.map_or(0.0, |d| cfg.signal * d[ch]);
            let n: f32 = StandardNormal.sample(r);
            data[ch * plane + i] = base + cfg.noise * n;
        }
    }
    Tensor::new(&[c, h, w], data)
}

fn render_cam(r: &mut Stream, cfg: &SyntheticConfig, layout: &Layout, class_id: u32) -> Result<CamHeatmap> {
    let (h, w) = (cfg.height, cfg.width);
    let salient = layout.salient.count();
    let mut active = layout.salient.bits().to_vec();
    // Background pixels next to the salient part bleed first, like a real
    // CAM spilling over the object boundary; the rest follow at random.
    let near = |i: usize| {
        let (y, x) = (i / w, i % w);
        (y.saturating_sub(1)..(y + 2).min(h))
            .any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| active[yy * w + xx] == 1))
    };
    let outside = |i: &usize| layout.object.bits()[*i] == 0;
    let mut bleed: Vec<usize> = (0..h * w).filter(outside).filter(|&i| near(i)).collect();
    let mut rest: Vec<usize> = (0..h * w).filter(outside).filter(|&i| !near(i)).collect();
    bleed.shuffle(r);
    rest.shuffle(r);
    let spill = if cfg.cam_fidelity <= 0.0 {
        for (a, &m) in active.iter_mut().zip(layout.salient.bits()) {
            *a &= !m;
        }
        salient
    } else {
        (salient as f64 * (1.0 - cfg.cam_fidelity) / cfg.cam_fidelity).ceil() as usize
    };
    for &i in bleed.iter().chain(&rest).take(spill) {
        active[i] = 1;
    }
    // Activation 0.75 on CAM+ pixels plus a quarter of the 3x3 neighbourhood
    // mean: CAM+ pixels stay above 0.75, the rest below 0.25.
    let mut heat = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut sum, mut n) = (0.0f32, 0.0f32);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    sum += active[yy * w + xx] as f32;
                    n += 1.0;
                }
            }
            heat[y * w + x] = 0.75 * active[y * w + x] as f32 + 0.25 * sum / n;
        }
    }
    CamHeatmap::new(Tensor::new(&[h, w], heat)?, class_id)
}

struct Image {
    features: Tensor,
    mask: BinaryMask,
    cam: CamHeatmap,
}

fn render_image(
    seed: u64,
    cfg: &SyntheticConfig,
    dirs: &(Vec<f32>, Vec<f32>),
    class_id: u32,
) -> Result<Image> {
    let mut r = seeded(seed);
    let layout = sample_layout(&mut r, cfg.height, cfg.width, cfg.distractor)?;
    let features = render_features(&mut r, cfg, &layout, &dirs.0, &dirs.1)?;
    let cam = render_cam(&mut r, cfg, &layout, class_id)?;
    Ok(Image {
        features,
        mask: layout.object,
        cam,
    })
}

/// `k` support shots sharing one query. Shot `i` of a `k`-shot task is the
/// same regardless of `k`.
pub fn generate_synthetic_shots(cfg: &SyntheticConfig, k: usize) -> Result<Vec<Episode>> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::Config("need at least one shot".into()));
    }
    let class_id = cfg.class_id();
    let dirs = class_directions(&mut seeded(derive_seed(cfg.seed, 0)), cfg.channels);
    let query = render_image(derive_seed(cfg.seed, 1), cfg, &dirs, class_id)?;
    (0..k)
        .map(|i| {
            let support = render_image(derive_seed(cfg.seed, 2 + i as u64), cfg, &dirs, class_id)?;
            Ok(Episode {
                support_features: support.features,
                query_features: query.features.clone(),
                support_mask: support.mask,
                query_mask: Some(query.mask.clone()),
                support_cam: support.cam,
                query_cam: query.cam.clone(),
                class_id,
                shot_index: i,
                k,
            })
        })
        .collect()
}

pub fn generate_synthetic_episode(cfg: &SyntheticConfig) -> Result<Episode> {
    Ok(generate_synthetic_shots(cfg, 1)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::baseline_prior;
    use crate::pmgm::{cosine, generate_prior, masked_average_pool, threshold_cam, DEFAULT_DELTA};

    fn cfg(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic_episode(&cfg(7)).unwrap();
        let b = generate_synthetic_episode(&cfg(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_episode(&cfg(8)).unwrap());
    }

    #[test]
    fn rejects_degenerate_configs() {
        for bad in [
            SyntheticConfig { height: 3, ..cfg(0) },
            SyntheticConfig { channels: 1, ..cfg(0) },
            SyntheticConfig { noise: -1.0, ..cfg(0) },
            SyntheticConfig { cam_fidelity: 1.5, ..cfg(0) },
        ] {
            assert!(matches!(generate_synthetic_episode(&bad), Err(Error::Config(_))));
        }
        assert!(generate_synthetic_shots(&cfg(0), 0).is_err());
    }

    #[test]
    fn episodes_are_valid_across_seeds_and_sizes() {
        for seed in 0..40 {
            for (h, w) in [(4, 4), (8, 8), (5, 11), (30, 30)] {
                let c = SyntheticConfig {
                    height: h,
                    width: w,
                    distractor: seed % 2 == 0,
                    ..cfg(seed)
                };
                let e = generate_synthetic_episode(&c).unwrap();
                e.validate().unwrap();
                assert!(e.query_mask.as_ref().unwrap().count() > 0);
            }
        }
    }

    #[test]
    fn perfect_cam_marks_exactly_the_salient_part() {
        let c = SyntheticConfig {
            noise: 0.0,
            cam_fidelity: 1.0,
            ..cfg(3)
        };
        let e = generate_synthetic_episode(&c).unwrap();
        let split = threshold_cam(&e.query_cam, DEFAULT_DELTA).unwrap();
        let qm = e.query_mask.unwrap();
        assert!(split.pos.count() >= 4);
        assert!(!split.pos.intersects(&qm.complement()).unwrap());
    }

    #[test]
    fn fidelity_moves_activation_off_the_object() {
        let c = SyntheticConfig {
            cam_fidelity: 0.0,
            ..cfg(4)
        };
        let e = generate_synthetic_episode(&c).unwrap();
        let split = threshold_cam(&e.query_cam, DEFAULT_DELTA).unwrap();
        let qm = e.query_mask.unwrap();
        assert!(split.pos.count() > 0);
        assert!(!split.pos.intersects(&qm).unwrap());
    }

    #[test]
    fn imperfect_cam_spills_onto_background() {
        for seed in 0..20 {
            let e = generate_synthetic_episode(&cfg(seed)).unwrap();
            let split = threshold_cam(&e.query_cam, DEFAULT_DELTA).unwrap();
            let qm = e.query_mask.unwrap();
            let on = split.pos.and(&qm).unwrap().count();
            let off = split.pos.count() - on;
            assert!(on > 0 && off > 0);
            assert!(on as f64 / split.pos.count() as f64 >= 0.5);
        }
    }

    #[test]
    fn noise_free_prior_is_one_on_body_and_half_on_salient() {
        let c = SyntheticConfig {
            noise: 0.0,
            cam_fidelity: 1.0,
            ..cfg(5)
        };
        let e = generate_synthetic_episode(&c).unwrap();
        let out = generate_prior(
            &e.support_features,
            &e.support_mask,
            &e.support_cam,
            &e.query_features,
            &e.query_cam,
            DEFAULT_DELTA,
        )
        .unwrap();
        let qm = e.query_mask.unwrap();
        for i in 0..qm.len() {
            let v = out.prior.values()[i];
            match (qm.bits()[i], out.query.pos.bits()[i]) {
                // Constant cosine on CAM+ hits the degenerate rule.
                (1, 1) => assert_eq!(v, 0.5),
                // CAM- holds body pixels (cosine 1) and zero vectors (cosine 0).
                (1, 0) => assert_eq!(v, 1.0),
                _ => assert_eq!(v, 0.0),
            }
        }
    }

    #[test]
    fn distractor_fools_the_single_prototype() {
        let c = SyntheticConfig {
            noise: 0.0,
            cam_fidelity: 1.0,
            distractor: true,
            ..cfg(6)
        };
        let e = generate_synthetic_episode(&c).unwrap();
        let p = masked_average_pool(&e.support_features, &e.support_mask)
            .unwrap()
            .unwrap();
        let split = threshold_cam(&e.query_cam, DEFAULT_DELTA).unwrap();
        let qm = e.query_mask.as_ref().unwrap();
        let (_, h, w) = e.grid().unwrap();
        let salient = (0..h * w).find(|&i| split.pos.bits()[i] == 1).unwrap();
        let patch = (0..h * w)
            .find(|&i| qm.bits()[i] == 0 && e.query_features.data()[i] != 0.0)
            .expect("distractor patch present");
        let pix = |i: usize| e.query_features.pixel(i / w, i % w);
        let (a, b) = (cosine(&pix(salient), &p), cosine(&pix(patch), &p));
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        assert!(a > 0.3);
        let prior = baseline_prior(&e.query_features, &p).unwrap();
        assert_eq!(prior.values()[salient], prior.values()[patch]);
    }

    #[test]
    fn shots_share_query_and_prefix() {
        let three = generate_synthetic_shots(&cfg(9), 3).unwrap();
        let one = generate_synthetic_shots(&cfg(9), 1).unwrap();
        assert_eq!(three.len(), 3);
        assert_eq!(three[0].support_features, one[0].support_features);
        assert_eq!(three[2].query_features, one[0].query_features);
        assert_eq!(three[1].k, 3);
        assert_ne!(three[0].support_features, three[1].support_features);
    }
}

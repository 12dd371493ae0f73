//! Episodes: one support/query task, how to synthesise them, how they sit on
//! disk, and the end-to-end pipeline that consumes them.

mod io;
mod pipeline;
mod synthetic;

pub use io::{read_episode_dir, write_episode_dir, EpisodeManifest, ManifestFiles, ShotFiles, MANIFEST};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineOutput};
pub use synthetic::{generate_synthetic_episode, generate_synthetic_shots, SyntheticConfig};

use crate::error::{Error, Result};
use crate::pmgm::{raw_cosine_map, CamHeatmap, PriorMap};
use crate::tensor::{masked_minmax_normalize, BinaryMask, Tensor};

/// One support shot paired with the query it guides.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support_features: Tensor,
    pub query_features: Tensor,
    pub support_mask: BinaryMask,
    /// Present in training-style episodes only.
    pub query_mask: Option<BinaryMask>,
    pub support_cam: CamHeatmap,
    pub query_cam: CamHeatmap,
    pub class_id: u32,
    pub shot_index: usize,
    pub k: usize,
}

impl Episode {
    pub fn grid(&self) -> Result<(usize, usize, usize)> {
        self.query_features.chw()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.query_features.chw()?;
        if self.support_features.chw()? != (c, h, w) {
            return Err(Error::InvalidEpisode(format!(
                "support features {:?} and query features {:?} differ",
                self.support_features.shape(),
                self.query_features.shape()
            )));
        }
        if self.support_mask.dims() != (h, w) {
            return Err(Error::InvalidEpisode(format!(
                "support mask is {:?}, feature grid is {h}x{w}",
                self.support_mask.dims()
            )));
        }
        if let Some(q) = &self.query_mask {
            if q.dims() != (h, w) {
                return Err(Error::InvalidEpisode(format!(
                    "query mask is {:?}, feature grid is {h}x{w}",
                    q.dims()
                )));
            }
        }
        if self.support_mask.is_empty() {
            return Err(Error::InvalidEpisode("support mask has no foreground".into()));
        }
        if self.k == 0 || self.shot_index >= self.k {
            return Err(Error::InvalidEpisode(format!(
                "shot {} of {} is out of range",
                self.shot_index, self.k
            )));
        }
        Ok(())
    }

    pub fn without_query_mask(mut self) -> Self {
        self.query_mask = None;
        self
    }
}

/// Single-prototype prior: cosine of every query pixel against the
/// foreground prototype, min-max normalised over the whole image.
pub fn baseline_prior(query_features: &Tensor, prototype: &[f32]) -> Result<PriorMap> {
    if prototype.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidEpisode("baseline prototype is the zero vector".into()));
    }
    let (_, h, w) = query_features.chw()?;
    let everywhere = BinaryMask::ones(h, w)?;
    let raw = raw_cosine_map(query_features, prototype, prototype, &everywhere)?;
    PriorMap::new(masked_minmax_normalize(&raw, &everywhere)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn baseline_constant_query_is_half() {
        let q = Tensor::new(&[2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        let prior = baseline_prior(&q, &[1.0, 2.0]).unwrap();
        assert!(prior.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn baseline_two_value_field() {
        let q = Tensor::new(&[2, 1, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let prior = baseline_prior(&q, &[1.0, 0.0]).unwrap();
        assert_eq!(prior.values(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn baseline_rejects_zero_prototype() {
        let q = Tensor::filled(&[2, 2, 2], 1.0).unwrap();
        assert!(baseline_prior(&q, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn baseline_matches_oracle() {
        let mut r = rng::seeded(5);
        let q = Tensor::new(&[8, 5, 5], (0..200).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap();
        let p: Vec<f32> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = baseline_prior(&q, &p).unwrap();
        let want = oracle::naive_baseline_prior(&q, &p);
        for (g, w) in got.values().iter().zip(&want) {
            assert!((*g as f64 - w).abs() <= 1e-5);
        }
    }

    #[test]
    fn validate_catches_bad_extents() {
        let mut e = generate_synthetic_episode(&SyntheticConfig::default()).unwrap();
        e.validate().unwrap();
        e.support_mask = BinaryMask::ones(3, 3).unwrap();
        assert!(matches!(e.validate(), Err(Error::InvalidEpisode(_))));
    }
}

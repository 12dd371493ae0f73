use super::Episode;
use crate::attention::{decoder_chain, AttentionMasks, MaskStrategy, MaskingReport, ProjectionWeights};
use crate::error::{Error, Result, StageExt};
use crate::pmgm::{
    build_prototypes, decompose_regions, expand_prototypes, fuse_features, kshot_average,
    region_cosine_prior, threshold_cam, FusionWeights, PriorMap, PrototypeSet, DEFAULT_DELTA,
};
use crate::tensor::{BinaryMask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub delta: f32,
    pub strategy: MaskStrategy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            strategy: MaskStrategy::None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Query prior, averaged over shots.
    pub prior: PriorMap,
    /// Prototypes, averaged over shots.
    pub prototypes: PrototypeSet,
    pub query_fused: Tensor,
    pub support_fused: Tensor,
    pub decoder_output: Tensor,
    pub reports: Vec<MaskingReport>,
}

struct ShotState {
    query_prior: PriorMap,
    prototypes: PrototypeSet,
    support_fused: Tensor,
}

fn mean_tensors(parts: &[Tensor]) -> Result<Tensor> {
    let first = &parts[0];
    let n = parts.len() as f64;
    let data = (0..first.data().len())
        .map(|i| (parts.iter().map(|t| t.data()[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    Tensor::new(first.dims(), data)
}

/// Per-pixel majority of the support masks (ties count as foreground).
fn majority_mask(masks: &[&BinaryMask]) -> Result<BinaryMask> {
    let (h, w) = masks[0].dims();
    let bits = (0..h * w)
        .map(|i| {
            let on = masks.iter().filter(|m| m.bits()[i] == 1).count();
            (2 * on >= masks.len()) as u8
        })
        .collect();
    BinaryMask::new(h, w, bits)
}

/// Runs the whole forward pass for one task. `shots` holds every support
/// shot; all of them must carry the same query.
///
/// Priors and prototypes are averaged over shots before query fusion. The
/// decoder's key/value features are the shot-mean of the fused support
/// features, masked by the per-pixel majority of the support masks.
pub fn run_pipeline(
    shots: &[Episode],
    config: &PipelineConfig,
    fusion: &FusionWeights,
    blocks: &[ProjectionWeights],
) -> Result<PipelineOutput> {
    let first = shots
        .first()
        .ok_or_else(|| Error::Config("pipeline needs at least one shot".into()))?;
    for shot in shots {
        shot.validate().stage(format!("shot {}", shot.shot_index))?;
        if shot.query_features != first.query_features || shot.query_mask != first.query_mask {
            return Err(Error::InvalidEpisode(format!(
                "shot {} does not share the query of shot 0",
                shot.shot_index
            )));
        }
    }
    if config.strategy == MaskStrategy::Dicm && first.query_mask.is_none() {
        return Err(Error::Mode(
            "strategy dicm needs a query mask (training mode); use none at inference".into(),
        ));
    }
    let (c, h, w) = first.grid()?;

    let query_cam = first.query_cam.resized(h, w).stage("query heatmap")?;
    let query_split = threshold_cam(&query_cam, config.delta).stage("query threshold")?;

    let states = shots
        .iter()
        .map(|shot| {
            let label = format!("prior generation (shot {})", shot.shot_index);
            let cam = shot.support_cam.resized(h, w).stage(&label)?;
            let split = threshold_cam(&cam, config.delta).stage(&label)?;
            let regions =
                decompose_regions(&shot.support_mask, &split.pos, &split.neg).stage(&label)?;
            let prototypes =
                build_prototypes(&shot.support_features, &regions, &shot.support_mask)
                    .stage(&label)?;
            let query_prior = region_cosine_prior(
                &first.query_features,
                &prototypes,
                &query_split.pos,
                &query_split.neg,
            )
            .stage(&label)?;

            let label = format!("support fusion (shot {})", shot.shot_index);
            let support_prior =
                region_cosine_prior(&shot.support_features, &prototypes, &split.pos, &split.neg)
                    .stage(&label)?;
            let (x_p, x_c) = expand_prototypes(&prototypes, &regions.a1, &regions.a2, c, h, w)
                .stage(&label)?;
            let support_fused =
                fuse_features(&shot.support_features, &x_p, &x_c, &support_prior, fusion)
                    .stage(&label)?;
            Ok(ShotState {
                query_prior,
                prototypes,
                support_fused,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let priors: Vec<PriorMap> = states.iter().map(|s| s.query_prior.clone()).collect();
    let protos: Vec<PrototypeSet> = states.iter().map(|s| s.prototypes.clone()).collect();
    let (prior, prototypes) = kshot_average(&priors, &protos).stage("k-shot averaging")?;

    let (x_p, x_c) = expand_prototypes(&prototypes, &query_split.pos, &query_split.neg, c, h, w)
        .stage("query fusion")?;
    let query_fused =
        fuse_features(&first.query_features, &x_p, &x_c, &prior, fusion).stage("query fusion")?;

    let fused: Vec<Tensor> = states.into_iter().map(|s| s.support_fused).collect();
    let support_fused = mean_tensors(&fused)?;
    let support_mask = majority_mask(&shots.iter().map(|s| &s.support_mask).collect::<Vec<_>>())?;

    let masks = AttentionMasks {
        support: Some(&support_mask),
        query: first.query_mask.as_ref(),
    };
    let (decoder_output, reports) =
        decoder_chain(&query_fused, &support_fused, blocks, config.strategy, masks)
            .stage("decoder")?;

    Ok(PipelineOutput {
        prior,
        prototypes,
        query_fused,
        support_fused,
        decoder_output,
        reports,
    })
}

//! Episode directories: FST payloads plus a `manifest.json`.
//!
//! ```text
//! episode_0000/
//!   manifest.json
//!   query_features.fst   query_cam.fst   query_mask.fst (optional)
//!   support_0_features.fst   support_0_mask.fst   support_0_cam.fst
//!   ...
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Episode;
use crate::error::{Error, Result};
use crate::fst;
use crate::pmgm::CamHeatmap;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotFiles {
    pub support_features: String,
    pub support_mask: String,
    pub support_cam: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub query_features: String,
    pub query_cam: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_mask: Option<String>,
    pub shots: Vec<ShotFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub class_id: u32,
    pub k: usize,
    /// Free-form provenance (generator config and the like).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
    pub files: ManifestFiles,
}

/// Writes `shots` (all sharing one query) into `dir`, creating it if needed.
pub fn write_episode_dir(
    dir: impl AsRef<Path>,
    shots: &[Episode],
    meta: serde_json::Value,
) -> Result<EpisodeManifest> {
    let dir = dir.as_ref();
    let first = shots
        .first()
        .ok_or_else(|| Error::Config("cannot write an episode with no shots".into()))?;
    fs::create_dir_all(dir)?;

    fst::save_tensor(dir.join("query_features.fst"), &first.query_features)?;
    fst::save_tensor(dir.join("query_cam.fst"), first.query_cam.grid())?;
    let query_mask = match &first.query_mask {
        Some(m) => {
            fst::save_mask(dir.join("query_mask.fst"), m)?;
            Some("query_mask.fst".to_string())
        }
        None => None,
    };
    let mut files = Vec::with_capacity(shots.len());
    for (i, shot) in shots.iter().enumerate() {
        let f = ShotFiles {
            support_features: format!("support_{i}_features.fst"),
            support_mask: format!("support_{i}_mask.fst"),
            support_cam: format!("support_{i}_cam.fst"),
        };
        fst::save_tensor(dir.join(&f.support_features), &shot.support_features)?;
        fst::save_mask(dir.join(&f.support_mask), &shot.support_mask)?;
        fst::save_tensor(dir.join(&f.support_cam), shot.support_cam.grid())?;
        files.push(f);
    }
    let manifest = EpisodeManifest {
        class_id: first.class_id,
        k: shots.len(),
        meta,
        files: ManifestFiles {
            query_features: "query_features.fst".into(),
            query_cam: "query_cam.fst".into(),
            query_mask,
            shots: files,
        },
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST), json)?;
    Ok(manifest)
}

/// Reads every shot of an episode directory.
pub fn read_episode_dir(dir: impl AsRef<Path>) -> Result<(EpisodeManifest, Vec<Episode>)> {
    let dir = dir.as_ref();
    let manifest: EpisodeManifest =
        serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.files.shots.len() != manifest.k || manifest.k == 0 {
        return Err(Error::InvalidEpisode(format!(
            "manifest declares k = {} but lists {} shots",
            manifest.k,
            manifest.files.shots.len()
        )));
    }
    let f = &manifest.files;
    let query_features = fst::load_tensor(dir.join(&f.query_features))?;
    let query_cam = CamHeatmap::new(fst::load_tensor(dir.join(&f.query_cam))?, manifest.class_id)?;
    let query_mask = f
        .query_mask
        .as_ref()
        .map(|p| fst::load_mask(dir.join(p)))
        .transpose()?;
    let mut shots = Vec::with_capacity(manifest.k);
    for (i, s) in f.shots.iter().enumerate() {
        let episode = Episode {
            support_features: fst::load_tensor(dir.join(&s.support_features))?,
            query_features: query_features.clone(),
            support_mask: fst::load_mask(dir.join(&s.support_mask))?,
            query_mask: query_mask.clone(),
            support_cam: CamHeatmap::new(
                fst::load_tensor(dir.join(&s.support_cam))?,
                manifest.class_id,
            )?,
            query_cam: query_cam.clone(),
            class_id: manifest.class_id,
            shot_index: i,
            k: manifest.k,
        };
        episode.validate()?;
        shots.push(episode);
    }
    Ok((manifest, shots))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{generate_synthetic_shots, SyntheticConfig};

    #[test]
    fn roundtrip_preserves_every_shot() {
        let dir = tempfile::tempdir().unwrap();
        let shots = generate_synthetic_shots(&SyntheticConfig::default(), 2).unwrap();
        let written = write_episode_dir(dir.path(), &shots, serde_json::json!({"seed": 0})).unwrap();
        let (manifest, back) = read_episode_dir(dir.path()).unwrap();
        assert_eq!(manifest, written);
        assert_eq!(back, shots);
    }

    #[test]
    fn query_mask_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let shots = vec![generate_synthetic_shots(&SyntheticConfig::default(), 1)
            .unwrap()
            .remove(0)
            .without_query_mask()];
        let m = write_episode_dir(dir.path(), &shots, serde_json::Value::Null).unwrap();
        assert!(m.files.query_mask.is_none());
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(!text.contains("query_mask") && !text.contains("meta"));
        let (_, back) = read_episode_dir(dir.path()).unwrap();
        assert!(back[0].query_mask.is_none());
    }

    #[test]
    fn corrupted_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let shots = generate_synthetic_shots(&SyntheticConfig::default(), 1).unwrap();
        write_episode_dir(dir.path(), &shots, serde_json::Value::Null).unwrap();
        let p = dir.path().join("query_features.fst");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        let err = read_episode_dir(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.is_io());
    }
}

use std::path::{Path, PathBuf};

use crate::datalab::{
    parse_taxonomy, parse_track_metadata, resolve_labels, DatasetSplit, GenreTaxonomy,
    LabeledTrack, MultiRootPolicy, Segment,
};
use crate::dsp::read_mel_cache;
use crate::error::{Error, Result};
use crate::evalkit::fingerprint;
use crate::models::{normalize_db, Sample};
use crate::numerics::Tensor;
use crate::training::Example;
use crate::vqcodec::{read_codebook, read_token_cache, CodebookSequence};

use super::config::VariantKind;

/// Labelled tracks and their split, as produced by the data stage.
#[derive(Debug, Clone)]
pub struct DataContext {
    pub dir: PathBuf,
    pub taxonomy: GenreTaxonomy,
    pub tracks: Vec<LabeledTrack>,
    pub split: DatasetSplit,
}

impl DataContext {
    pub fn load(dir: &Path, policy: MultiRootPolicy) -> Result<Self> {
        let taxonomy = parse_taxonomy(&dir.join("taxonomy.csv"))?;
        let metadata = parse_track_metadata(&dir.join("metadata.csv"), &taxonomy)?;
        let (tracks, _) = resolve_labels(&metadata, &taxonomy, policy)?;
        let split_path = dir.join("split.json");
        let bytes = crate::io_util::read_bytes(&split_path)?;
        let split = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(&split_path, e.to_string()))?;
        Ok(DataContext {
            dir: dir.to_path_buf(),
            taxonomy,
            tracks,
            split,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.taxonomy.roots().len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.taxonomy
            .roots()
            .iter()
            .map(|r| self.taxonomy.name(*r).unwrap_or("?").to_string())
            .collect()
    }

    pub fn audio_path(&self, track: &LabeledTrack) -> PathBuf {
        self.dir.join(&track.meta.path)
    }

    pub fn segment(&self, seg: Segment) -> Vec<&LabeledTrack> {
        self.split.tracks_in(&self.tracks, seg).collect()
    }

    pub fn split_fingerprint(&self) -> Result<String> {
        fingerprint(&(&self.split.assignment, self.split.ratios, self.split.seed))
    }
}

/// File stem used for a track's cached features.
pub(crate) fn cache_stem(track_id: &str) -> Result<&str> {
    if track_id.is_empty() || track_id.contains(['/', '\\']) || track_id.starts_with('.') {
        return Err(Error::InvalidArgument(format!(
            "track id {track_id:?} cannot name a cache file"
        )));
    }
    Ok(track_id)
}

pub(crate) fn mel_path(dir: &Path, track_id: &str) -> Result<PathBuf> {
    Ok(dir
        .join("mel")
        .join(format!("{}.mel", cache_stem(track_id)?)))
}

pub(crate) fn token_path(dir: &Path, track_id: &str) -> Result<PathBuf> {
    Ok(dir
        .join("tokens")
        .join(format!("{}.tok", cache_stem(track_id)?)))
}

fn require(path: &Path, track_id: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!(
            "feature cache for track {track_id} ({})",
            path.display()
        )))
    }
}

/// Builds model inputs from cached features. `features_dir` is the
/// preprocess stage directory for the Spectro variant and the codec stage
/// directory otherwise. A missing cache is an error naming the track.
pub fn load_examples(
    variant: VariantKind,
    features_dir: &Path,
    db_floor: f64,
    tracks: &[&LabeledTrack],
) -> Result<Vec<Example>> {
    let codebook: Option<Tensor> = match variant {
        VariantKind::Codebook => Some(read_codebook(&features_dir.join("codebook.bin"))?),
        _ => None,
    };
    tracks
        .iter()
        .map(|t| {
            let id = &t.meta.track_id;
            let sample = match variant {
                VariantKind::Spectro => {
                    let p = mel_path(features_dir, id)?;
                    require(&p, id)?;
                    Sample::Spectro(normalize_db(&read_mel_cache(&p)?, db_floor))
                }
                VariantKind::Token | VariantKind::Codebook => {
                    let p = token_path(features_dir, id)?;
                    require(&p, id)?;
                    let (seq, _) = read_token_cache(&p)?;
                    let ids: Vec<usize> = seq.ids().collect();
                    match &codebook {
                        None => Sample::Token(ids),
                        Some(cb) => Sample::Codebook {
                            vectors: CodebookSequence::gather(cb, &seq)?.vectors,
                            tokens: ids,
                        },
                    }
                }
            };
            Ok(Example {
                id: id.clone(),
                sample,
                label: t.label,
            })
        })
        .collect()
}

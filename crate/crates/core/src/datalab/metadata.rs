//! Metadata layout (UTF-8 CSV, header required):
//! `track_id,artist_id,genre_ids,path[,duration_s]` with `genre_ids` separated
//! by `;`. Taxonomy layout: `genre_id,name,parent_id` with an empty parent for
//! roots.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METADATA_HEADER: [&str; 5] = ["track_id", "artist_id", "genre_ids", "path", "duration_s"];
pub const TAXONOMY_HEADER: [&str; 3] = ["genre_id", "name", "parent_id"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackMetadata {
    pub track_id: String,
    pub artist_id: String,
    pub genre_ids: Vec<u32>,
    pub path: PathBuf,
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenreNode {
    pub name: String,
    pub parent: Option<u32>,
}

/// Genre id → (name, parent). Parent chains are acyclic and end at a root.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GenreTaxonomy {
    pub genres: BTreeMap<u32, GenreNode>,
}

impl GenreTaxonomy {
    /// Builds and validates a taxonomy (dangling parents and cycles are errors).
    pub fn new(genres: BTreeMap<u32, GenreNode>) -> Result<Self> {
        let t = GenreTaxonomy { genres };
        for &id in t.genres.keys() {
            t.root_of(id)?;
        }
        Ok(t)
    }

    pub fn contains(&self, id: u32) -> bool {
        self.genres.contains_key(&id)
    }

    /// Root genre ids in ascending order; a root's label is its index here.
    pub fn roots(&self) -> Vec<u32> {
        self.genres
            .iter()
            .filter(|(_, g)| g.parent.is_none())
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn root_of(&self, id: u32) -> Result<u32> {
        let mut cur = id;
        for _ in 0..=self.genres.len() {
            let node = self.genres.get(&cur).ok_or_else(|| {
                Error::Taxonomy(format!("genre {cur} (reached from {id}) is not defined"))
            })?;
            match node.parent {
                None => return Ok(cur),
                Some(p) => cur = p,
            }
        }
        Err(Error::Taxonomy(format!(
            "parent chain of genre {id} contains a cycle"
        )))
    }

    pub fn label_of_root(&self, root: u32) -> Option<usize> {
        self.roots().iter().position(|&r| r == root)
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.genres.get(&id).map(|g| g.name.as_str())
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

pub fn parse_taxonomy(path: &Path) -> Result<GenreTaxonomy> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != TAXONOMY_HEADER {
        return Err(Error::format(
            path,
            format!("expected header {}", TAXONOMY_HEADER.join(",")),
        ));
    }
    let mut genres = BTreeMap::new();
    let mut errors = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                errors.push(format!("{}:{line}: {e}", path.display()));
                continue;
            }
        };
        if rec.len() != 3 {
            errors.push(format!(
                "{}:{line}: expected 3 columns, found {}",
                path.display(),
                rec.len()
            ));
            continue;
        }
        let id = rec[0].parse::<u32>();
        let parent = if rec[2].is_empty() {
            Ok(None)
        } else {
            rec[2].parse::<u32>().map(Some)
        };
        match (id, parent) {
            (Ok(id), Ok(parent)) => {
                let node = GenreNode {
                    name: rec[1].to_string(),
                    parent,
                };
                if genres.insert(id, node).is_some() {
                    errors.push(format!(
                        "{}:{line}: duplicate genre id {id}",
                        path.display()
                    ));
                }
            }
            _ => errors.push(format!("{}:{line}: malformed genre row", path.display())),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Metadata(errors));
    }
    GenreTaxonomy::new(genres)
}

pub fn write_taxonomy(path: &Path, taxonomy: &GenreTaxonomy) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| csv_err(path, e);
    w.write_record(TAXONOMY_HEADER).map_err(io)?;
    for (id, g) in &taxonomy.genres {
        let parent = g.parent.map(|p| p.to_string()).unwrap_or_default();
        w.write_record([id.to_string().as_str(), &g.name, &parent])
            .map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(path, e.to_string()))?;
    crate::io_util::write_atomic(path, &bytes)
}

/// Parses the metadata file; every problem is reported with its line number.
///
/// Relative audio paths are kept as written (resolve them against the file's
/// directory when loading audio).
pub fn parse_track_metadata(path: &Path, taxonomy: &GenreTaxonomy) -> Result<Vec<TrackMetadata>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols != METADATA_HEADER[..4] && cols != METADATA_HEADER {
        return Err(Error::format(
            path,
            format!(
                "expected header {} (duration_s optional)",
                METADATA_HEADER.join(",")
            ),
        ));
    }
    let mut tracks = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut errors = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let at = |msg: String| format!("{}:{line}: {msg}", path.display());
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                errors.push(at(e.to_string()));
                continue;
            }
        };
        if rec.len() != cols.len() {
            errors.push(at(format!(
                "expected {} columns, found {}",
                cols.len(),
                rec.len()
            )));
            continue;
        }
        let (track_id, artist_id) = (rec[0].to_string(), rec[1].to_string());
        if track_id.is_empty() || artist_id.is_empty() || rec[3].is_empty() {
            errors.push(at("track_id, artist_id and path are required".into()));
            continue;
        }
        let mut genre_ids = Vec::new();
        let mut bad = false;
        for g in rec[2].split(';').map(str::trim).filter(|g| !g.is_empty()) {
            match g.parse::<u32>() {
                Ok(id) if taxonomy.contains(id) => genre_ids.push(id),
                Ok(id) => {
                    errors.push(at(format!("unknown genre id {id}")));
                    bad = true;
                }
                Err(_) => {
                    errors.push(at(format!("malformed genre id {g:?}")));
                    bad = true;
                }
            }
        }
        if genre_ids.is_empty() && !bad {
            errors.push(at("track has no genre ids".into()));
            bad = true;
        }
        let duration_s = match rec.get(4).filter(|d| !d.is_empty()) {
            None => None,
            Some(d) => match d.parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => Some(v),
                _ => {
                    errors.push(at(format!("malformed duration {d:?}")));
                    bad = true;
                    None
                }
            },
        };
        if let Some(first) = seen.get(&track_id) {
            errors.push(at(format!(
                "duplicate track id {track_id} (first defined on line {first})"
            )));
            continue;
        }
        seen.insert(track_id.clone(), line);
        if !bad {
            tracks.push(TrackMetadata {
                track_id,
                artist_id,
                genre_ids,
                path: PathBuf::from(&rec[3]),
                duration_s,
            });
        }
    }
    if !errors.is_empty() {
        return Err(Error::Metadata(errors));
    }
    Ok(tracks)
}

pub fn write_track_metadata(path: &Path, tracks: &[TrackMetadata]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| csv_err(path, e);
    w.write_record(METADATA_HEADER).map_err(io)?;
    for t in tracks {
        let genres = t
            .genre_ids
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(";");
        let duration = t.duration_s.map(|d| format!("{d:?}")).unwrap_or_default();
        let path_str = t.path.to_string_lossy();
        w.write_record([
            t.track_id.as_str(),
            &t.artist_id,
            &genres,
            &path_str,
            &duration,
        ])
        .map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(path, e.to_string()))?;
    crate::io_util::write_atomic(path, &bytes)
}

/// What to do with a track whose genres descend from different roots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiRootPolicy {
    #[default]
    Reject,
    /// Use the root of the first listed genre.
    FirstListed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Root(u32),
    Rejected { roots: Vec<u32> },
}

pub fn resolve_top_level_genre(
    track: &TrackMetadata,
    taxonomy: &GenreTaxonomy,
    policy: MultiRootPolicy,
) -> Result<Resolution> {
    if track.genre_ids.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "track {} has no genres",
            track.track_id
        )));
    }
    let mut roots = Vec::new();
    for &g in &track.genre_ids {
        let r = taxonomy.root_of(g)?;
        if !roots.contains(&r) {
            roots.push(r);
        }
    }
    Ok(match (roots.len(), policy) {
        (1, _) | (_, MultiRootPolicy::FirstListed) => Resolution::Root(roots[0]),
        _ => Resolution::Rejected { roots },
    })
}

/// A track with its class index (position of its root in [`GenreTaxonomy::roots`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrack {
    pub meta: TrackMetadata,
    pub root_genre: u32,
    pub label: usize,
}

/// Resolves every track; rejected tracks are returned with a reason and logged.
pub fn resolve_labels(
    tracks: &[TrackMetadata],
    taxonomy: &GenreTaxonomy,
    policy: MultiRootPolicy,
) -> Result<(Vec<LabeledTrack>, Vec<(String, String)>)> {
    let mut out = Vec::with_capacity(tracks.len());
    let mut rejected = Vec::new();
    let ids: HashSet<&str> = tracks.iter().map(|t| t.track_id.as_str()).collect();
    if ids.len() != tracks.len() {
        return Err(Error::InvalidArgument("duplicate track ids".into()));
    }
    for t in tracks {
        match resolve_top_level_genre(t, taxonomy, policy)? {
            Resolution::Root(root) => out.push(LabeledTrack {
                meta: t.clone(),
                root_genre: root,
                label: taxonomy.label_of_root(root).expect("root listed"),
            }),
            Resolution::Rejected { roots } => {
                let reason = format!("genres span roots {roots:?}");
                log::warn!("rejecting track {}: {reason}", t.track_id);
                rejected.push((t.track_id.clone(), reason));
            }
        }
    }
    Ok((out, rejected))
}

//! Adapter from FMA's `tracks.csv` / `genres.csv` to the metadata layout used
//! here. Audio is expected as WAV under `{audio_root}/{id[..3]}/{id}.wav`
//! with the zero-padded six-digit track id (mp3 decoding is out of scope).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::metadata::{
    write_taxonomy, write_track_metadata, GenreNode, GenreTaxonomy, TrackMetadata,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FmaImport {
    pub metadata_path: PathBuf,
    pub taxonomy_path: PathBuf,
    pub n_tracks: usize,
    /// Track id and reason for every row left out.
    pub skipped: Vec<(String, String)>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

fn parse_genres(path: &Path) -> Result<GenreTaxonomy> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(path, format!("missing column {name}")))
    };
    let (id_col, parent_col, title_col) = (col("genre_id")?, col("parent")?, col("title")?);
    let mut genres = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |c: usize| {
            rec.get(c).unwrap_or("").trim().parse::<u32>().map_err(|_| {
                Error::format(path, format!("line {}: bad integer in column {c}", i + 2))
            })
        };
        let id = num(id_col)?;
        let parent = num(parent_col)?;
        genres.insert(
            id,
            GenreNode {
                name: rec.get(title_col).unwrap_or("").to_string(),
                parent: (parent != 0).then_some(parent),
            },
        );
    }
    GenreTaxonomy::new(genres)
}

fn parse_id_list(s: &str) -> Option<Vec<u32>> {
    let inner = s.trim().strip_prefix('[')?.strip_suffix(']')?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().ok())
        .collect()
}

/// Converts FMA metadata into `metadata.csv` and `taxonomy.csv` under
/// `out_dir`. `subset` filters on `set.subset` (e.g. "medium"); FMA subsets
/// are nested, so "medium" also keeps "small" rows.
pub fn import_fma(
    tracks_csv: &Path,
    genres_csv: &Path,
    audio_root: &Path,
    subset: Option<&str>,
    out_dir: &Path,
) -> Result<FmaImport> {
    let taxonomy = parse_genres(genres_csv)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(tracks_csv)
        .map_err(|e| csv_err(tracks_csv, e))?;
    let mut rows = rdr.records();
    let mut header_rows = Vec::new();
    for _ in 0..3 {
        let rec = rows
            .next()
            .ok_or_else(|| Error::format(tracks_csv, "expected a three-row header"))?
            .map_err(|e| csv_err(tracks_csv, e))?;
        header_rows.push(rec);
    }
    let names: Vec<String> = (0..header_rows[1].len())
        .map(|c| {
            let top = header_rows[0].get(c).unwrap_or("");
            let sub = header_rows[1].get(c).unwrap_or("");
            if top.is_empty() {
                header_rows[2].get(c).unwrap_or("").to_string()
            } else {
                format!("{top}.{sub}")
            }
        })
        .collect();
    let col = |name: &str| {
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::format(tracks_csv, format!("missing column {name}")))
    };
    let id_col = col("track_id")?;
    let artist_col = col("artist.id")?;
    let genres_col = col("track.genres")?;
    let all_col = col("track.genres_all")?;
    let subset_col = subset.map(|_| col("set.subset")).transpose()?;
    let duration_col = col("track.duration").ok();
    const SUBSETS: [&str; 3] = ["small", "medium", "large"];
    let max_rank = match subset {
        Some(s) => Some(
            SUBSETS
                .iter()
                .position(|x| *x == s)
                .ok_or_else(|| Error::Config(format!("unknown FMA subset {s:?}")))?,
        ),
        None => None,
    };

    let mut tracks = Vec::new();
    let mut skipped = Vec::new();
    for (i, rec) in rows.enumerate() {
        let line = i + 4;
        let rec = rec.map_err(|e| csv_err(tracks_csv, e))?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let raw_id = field(id_col);
        let Ok(tid) = raw_id.parse::<u32>() else {
            return Err(Error::format(
                tracks_csv,
                format!("line {line}: bad track id {raw_id:?}"),
            ));
        };
        let track_id = format!("{tid:06}");
        if let (Some(c), Some(max)) = (subset_col, max_rank) {
            match SUBSETS.iter().position(|x| *x == field(c)) {
                Some(rank) if rank <= max => {}
                _ => continue,
            }
        }
        let genres = parse_id_list(field(genres_col))
            .filter(|g| !g.is_empty())
            .or_else(|| parse_id_list(field(all_col)).filter(|g| !g.is_empty()));
        let Some(genre_ids) = genres else {
            skipped.push((track_id, "no genres".into()));
            continue;
        };
        if let Some(g) = genre_ids.iter().find(|g| !taxonomy.contains(**g)) {
            skipped.push((track_id, format!("unknown genre id {g}")));
            continue;
        }
        let artist = field(artist_col);
        if artist.is_empty() {
            skipped.push((track_id, "no artist".into()));
            continue;
        }
        let path = audio_root
            .join(&track_id[..3])
            .join(format!("{track_id}.wav"));
        tracks.push(TrackMetadata {
            duration_s: duration_col.and_then(|c| field(c).parse().ok()),
            track_id,
            artist_id: artist.to_string(),
            genre_ids,
            path,
        });
    }
    let metadata_path = out_dir.join("metadata.csv");
    let taxonomy_path = out_dir.join("taxonomy.csv");
    write_taxonomy(&taxonomy_path, &taxonomy)?;
    write_track_metadata(&metadata_path, &tracks)?;
    log::info!(
        "imported {} FMA tracks, skipped {}",
        tracks.len(),
        skipped.len()
    );
    Ok(FmaImport {
        metadata_path,
        taxonomy_path,
        n_tracks: tracks.len(),
        skipped,
    })
}

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledTrack;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Train,
    Validation,
    Test,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Train, Segment::Validation, Segment::Test];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Segment::Train => "train",
            Segment::Validation => "validation",
            Segment::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub assignment: BTreeMap<String, Segment>,
    pub ratios: [f64; 3],
    pub seed: u64,
    /// Stratification problems noticed while packing.
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl DatasetSplit {
    pub fn segment_of(&self, track_id: &str) -> Option<Segment> {
        self.assignment.get(track_id).copied()
    }

    pub fn tracks_in<'a>(
        &'a self,
        tracks: &'a [LabeledTrack],
        seg: Segment,
    ) -> impl Iterator<Item = &'a LabeledTrack> {
        tracks
            .iter()
            .filter(move |t| self.segment_of(&t.meta.track_id) == Some(seg))
    }
}

struct Artist {
    id: String,
    /// Track count per class.
    counts: Vec<f64>,
    size: usize,
}

/// Squared deviation from per-segment, per-class targets.
fn cost_delta(current: &[f64], target: &[f64], artist: &[f64], sign: f64) -> f64 {
    artist
        .iter()
        .zip(current.iter().zip(target))
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, (c, t))| {
            let before = c - t;
            let after = before + sign * a;
            after * after - before * before
        })
        .sum()
}

/// Assigns whole artists to train/validation/test.
///
/// Artists are packed largest first (seeded shuffle breaks size ties) into the
/// segment where they most reduce the squared gap between per-class counts and
/// their targets `ratio * class_count`. A deterministic local search then moves
/// or swaps artists while that gap shrinks.
pub fn make_split(tracks: &[LabeledTrack], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be >= 0 and sum to 1"
        )));
    }
    let k = tracks.iter().map(|t| t.label + 1).max().unwrap_or(0);
    let mut by_artist: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for t in tracks {
        by_artist
            .entry(&t.meta.artist_id)
            .or_default()
            .push(t.label);
    }
    let mut artists: Vec<Artist> = by_artist
        .into_iter()
        .map(|(id, labels)| {
            let mut counts = vec![0.0; k];
            labels.iter().for_each(|&l| counts[l] += 1.0);
            Artist {
                id: id.to_string(),
                counts,
                size: labels.len(),
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    artists.shuffle(&mut rng);
    artists.sort_by(|a, b| b.size.cmp(&a.size));

    let mut class_total = vec![0.0; k];
    tracks.iter().for_each(|t| class_total[t.label] += 1.0);
    let target: Vec<Vec<f64>> = ratios
        .iter()
        .map(|r| class_total.iter().map(|c| r * c).collect())
        .collect();

    let mut current = vec![vec![0.0; k]; 3];
    let mut place = vec![0usize; artists.len()];
    for (ai, a) in artists.iter().enumerate() {
        let best = (0..3)
            .filter(|&s| ratios[s] > 0.0)
            .min_by(|&x, &y| {
                let cx = cost_delta(&current[x], &target[x], &a.counts, 1.0);
                let cy = cost_delta(&current[y], &target[y], &a.counts, 1.0);
                cx.total_cmp(&cy)
            })
            .unwrap_or(0);
        place[ai] = best;
        for (c, v) in current[best].iter_mut().zip(&a.counts) {
            *c += v;
        }
    }

    let apply = |current: &mut Vec<Vec<f64>>, a: &Artist, from: usize, to: usize| {
        for j in 0..k {
            current[from][j] -= a.counts[j];
            current[to][j] += a.counts[j];
        }
    };
    const EPS: f64 = 1e-9;
    for _round in 0..100 {
        let mut improved = false;
        for ai in 0..artists.len() {
            let from = place[ai];
            for to in (0..3).filter(|&s| s != from && ratios[s] > 0.0) {
                let a = &artists[ai].counts;
                let delta = cost_delta(&current[from], &target[from], a, -1.0)
                    + cost_delta(&current[to], &target[to], a, 1.0);
                if delta < -EPS {
                    apply(&mut current, &artists[ai], from, to);
                    place[ai] = to;
                    improved = true;
                    break;
                }
            }
        }
        for ai in 0..artists.len() {
            for bi in ai + 1..artists.len() {
                let (sa, sb) = (place[ai], place[bi]);
                if sa == sb {
                    continue;
                }
                let diff: Vec<f64> = artists[ai]
                    .counts
                    .iter()
                    .zip(&artists[bi].counts)
                    .map(|(x, y)| x - y)
                    .collect();
                let delta = cost_delta(&current[sa], &target[sa], &diff, -1.0)
                    + cost_delta(&current[sb], &target[sb], &diff, 1.0);
                if delta < -EPS && diff.iter().any(|d| *d != 0.0) {
                    apply(&mut current, &artists[ai], sa, sb);
                    apply(&mut current, &artists[bi], sb, sa);
                    place.swap(ai, bi);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }

    let mut warnings = Vec::new();
    for class in 0..k {
        let owners: BTreeSet<&str> = tracks
            .iter()
            .filter(|t| t.label == class)
            .map(|t| t.meta.artist_id.as_str())
            .collect();
        if owners.len() == 1 {
            warnings.push(format!(
                "class {class}: every track belongs to artist {}; it cannot be stratified",
                owners.iter().next().expect("one owner")
            ));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let segment_of: BTreeMap<&str, Segment> = artists
        .iter()
        .zip(&place)
        .map(|(a, &s)| (a.id.as_str(), Segment::ALL[s]))
        .collect();
    let assignment = tracks
        .iter()
        .map(|t| {
            (
                t.meta.track_id.clone(),
                segment_of[t.meta.artist_id.as_str()],
            )
        })
        .collect();
    Ok(DatasetSplit {
        assignment,
        ratios,
        seed,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCheck {
    pub name: String,
    /// Hard checks are correctness constraints; soft ones are tolerances.
    pub hard: bool,
    pub passed: bool,
    pub details: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub checks: Vec<SplitCheck>,
    /// `[segment][class]` track counts.
    pub counts: Vec<Vec<usize>>,
}

impl SplitReport {
    pub fn hard_pass(&self) -> bool {
        self.checks.iter().filter(|c| c.hard).all(|c| c.passed)
    }

    pub fn soft_pass(&self) -> bool {
        self.checks.iter().filter(|c| !c.hard).all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&SplitCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for SplitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<16} {:<4} {}",
                c.name,
                if c.hard { "hard" } else { "soft" },
                if c.passed { "PASS" } else { "FAIL" }
            )?;
            for d in &c.details {
                writeln!(f, "    {d}")?;
            }
        }
        Ok(())
    }
}

/// Stratification tolerance, in percentage points of class share.
pub const STRATIFY_TOL_PTS: f64 = 3.0;
/// Segment-size tolerance, in percentage points of the whole dataset.
pub const RATIO_TOL_PTS: f64 = 2.0;

/// Checks coverage and artist-disjointness (hard), stratification and
/// segment ratios (soft).
pub fn verify_split(split: &DatasetSplit, tracks: &[LabeledTrack]) -> SplitReport {
    let k = tracks.iter().map(|t| t.label + 1).max().unwrap_or(0);
    let mut coverage = Vec::new();
    let ids: BTreeSet<&str> = tracks.iter().map(|t| t.meta.track_id.as_str()).collect();
    for t in tracks {
        if split.segment_of(&t.meta.track_id).is_none() {
            coverage.push(format!("track {} is not assigned", t.meta.track_id));
        }
    }
    for id in split.assignment.keys() {
        if !ids.contains(id.as_str()) {
            coverage.push(format!("assigned track {id} is not in the dataset"));
        }
    }

    let mut artist_segments: BTreeMap<&str, BTreeSet<Segment>> = BTreeMap::new();
    let mut counts = vec![vec![0usize; k]; 3];
    for t in tracks {
        if let Some(s) = split.segment_of(&t.meta.track_id) {
            artist_segments
                .entry(&t.meta.artist_id)
                .or_default()
                .insert(s);
            counts[s.index()][t.label] += 1;
        }
    }
    let leaks: Vec<String> = artist_segments
        .iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(a, s)| {
            let names: Vec<String> = s.iter().map(Segment::to_string).collect();
            format!("artist {a} appears in {}", names.join(", "))
        })
        .collect();

    let n = tracks.len().max(1) as f64;
    let global: Vec<f64> = (0..k)
        .map(|c| counts.iter().map(|s| s[c]).sum::<usize>() as f64 / n)
        .collect();
    let mut strat = Vec::new();
    let mut ratio = Vec::new();
    for seg in Segment::ALL {
        let row = &counts[seg.index()];
        let size: usize = row.iter().sum();
        let share = size as f64 / n;
        let want = split.ratios[seg.index()];
        if (share - want).abs() * 100.0 > RATIO_TOL_PTS {
            ratio.push(format!(
                "{seg}: {:.1}% of tracks, target {:.1}%",
                share * 100.0,
                want * 100.0
            ));
        }
        if size == 0 {
            if want > 0.0 {
                strat.push(format!("{seg} is empty"));
            }
            continue;
        }
        for c in 0..k {
            let p = row[c] as f64 / size as f64;
            if (p - global[c]).abs() * 100.0 > STRATIFY_TOL_PTS {
                strat.push(format!(
                    "{seg}: class {c} is {:.1}% vs {:.1}% overall",
                    p * 100.0,
                    global[c] * 100.0
                ));
            }
        }
    }
    let check = |name: &str, hard: bool, details: Vec<String>| SplitCheck {
        name: name.into(),
        hard,
        passed: details.is_empty(),
        details,
    };
    SplitReport {
        checks: vec![
            check("coverage", true, coverage),
            check("artist_disjoint", true, leaks),
            check("stratification", false, strat),
            check("ratios", false, ratio),
        ],
        counts,
    }
}

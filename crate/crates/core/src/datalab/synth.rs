use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::metadata::{
    write_taxonomy, write_track_metadata, GenreNode, GenreTaxonomy, TrackMetadata,
};
use crate::dsp::{write_wav, AudioClip};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseColor {
    White,
    Pink,
    Brown,
}

/// Per-genre synthesis recipe: a harmonic tone with colored noise and an
/// optional amplitude modulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenreRecipe {
    pub name: String,
    /// Fundamental range in Hz; each track draws log-uniformly from it.
    pub f0_range: (f64, f64),
    /// Relative amplitude of harmonics 1, 2, 3, ...
    pub harmonics: Vec<f64>,
    pub noise_color: NoiseColor,
    /// Noise RMS relative to a unit-amplitude fundamental.
    pub noise_level: f64,
    /// Amplitude-modulation rate in Hz; 0 disables it.
    pub am_rate: f64,
}

impl GenreRecipe {
    /// The four built-in recipes: bass, bright mid, noisy percussive, high.
    pub fn builtin() -> Vec<GenreRecipe> {
        let r = |name: &str, f0_range, harmonics: &[f64], noise_color, noise_level, am_rate| {
            GenreRecipe {
                name: name.into(),
                f0_range,
                harmonics: harmonics.to_vec(),
                noise_color,
                noise_level,
                am_rate,
            }
        };
        vec![
            r(
                "bass",
                (55.0, 110.0),
                &[1.0, 0.5, 0.25],
                NoiseColor::Brown,
                0.05,
                2.0,
            ),
            r(
                "bright",
                (220.0, 440.0),
                &[1.0, 0.8, 0.6, 0.4, 0.3],
                NoiseColor::White,
                0.02,
                0.0,
            ),
            r("noisy", (110.0, 220.0), &[0.3], NoiseColor::White, 0.3, 8.0),
            r(
                "high",
                (880.0, 1760.0),
                &[1.0, 0.2],
                NoiseColor::Pink,
                0.05,
                4.0,
            ),
        ]
    }

    /// Recipe for genre index `g` beyond the built-ins, drawn from `rng`.
    fn procedural(g: usize, rng: &mut ChaCha8Rng) -> GenreRecipe {
        let lo = 60.0 * 2f64.powf(rng.gen_range(0.0..5.0));
        let n_harm = rng.gen_range(1..=6);
        let decay = rng.gen_range(0.2..0.9);
        let colors = [NoiseColor::White, NoiseColor::Pink, NoiseColor::Brown];
        GenreRecipe {
            name: format!("genre{g}"),
            f0_range: (lo, lo * 2.0),
            harmonics: (0..n_harm).map(|h| f64::powi(decay, h)).collect(),
            noise_color: colors[rng.gen_range(0..3)],
            noise_level: rng.gen_range(0.01..0.3),
            am_rate: [0.0, 1.0, 3.0, 6.0, 10.0][rng.gen_range(0..5)],
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.f0_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!(
                "recipe {}: bad f0 range {:?}",
                self.name, self.f0_range
            )));
        }
        if self.harmonics.is_empty() || self.harmonics.iter().any(|h| !h.is_finite() || *h < 0.0) {
            return Err(Error::Config(format!(
                "recipe {}: harmonics must be non-negative",
                self.name
            )));
        }
        if !(self.noise_level >= 0.0 && self.am_rate >= 0.0) {
            return Err(Error::Config(format!(
                "recipe {}: negative noise level or AM rate",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthCorpusSpec {
    pub n_genres: usize,
    pub tracks_per_genre: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Explicit recipes; missing ones are filled from the built-ins, then
    /// generated from the seed.
    pub recipes: Vec<GenreRecipe>,
}

impl Default for SynthCorpusSpec {
    fn default() -> Self {
        SynthCorpusSpec {
            n_genres: 4,
            tracks_per_genre: 16,
            clip_seconds: 2.0,
            sample_rate: 22_050,
            seed: 0,
            recipes: Vec::new(),
        }
    }
}

impl SynthCorpusSpec {
    pub fn resolved_recipes(&self) -> Result<Vec<GenreRecipe>> {
        if self.n_genres < 2 {
            return Err(Error::Config(format!(
                "n_genres must be >= 2, got {}",
                self.n_genres
            )));
        }
        if self.tracks_per_genre == 0 {
            return Err(Error::Config("tracks_per_genre must be positive".into()));
        }
        if !(self.clip_seconds > 0.0 && self.clip_seconds.is_finite()) || self.sample_rate == 0 {
            return Err(Error::Config(
                "clip_seconds and sample_rate must be positive".into(),
            ));
        }
        let mut recipes: Vec<GenreRecipe> =
            self.recipes.iter().take(self.n_genres).cloned().collect();
        let builtin = GenreRecipe::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_7ec1_9e5u64);
        while recipes.len() < self.n_genres {
            let g = recipes.len();
            recipes.push(match builtin.get(g) {
                Some(r) => r.clone(),
                None => GenreRecipe::procedural(g, &mut rng),
            });
        }
        for (i, r) in recipes.iter().enumerate() {
            r.validate()?;
            if let Some(j) = recipes[..i].iter().position(|o| same_sound(o, r)) {
                return Err(Error::Config(format!("recipes {j} and {i} are identical")));
            }
        }
        Ok(recipes)
    }
}

fn same_sound(a: &GenreRecipe, b: &GenreRecipe) -> bool {
    a.f0_range == b.f0_range
        && a.harmonics == b.harmonics
        && a.noise_color == b.noise_color
        && a.noise_level == b.noise_level
        && a.am_rate == b.am_rate
}

fn noise(color: NoiseColor, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal));
    let mut out: Vec<f64> = match color {
        NoiseColor::White => white.collect(),
        NoiseColor::Brown => {
            let mut acc = 0.0;
            white
                .map(|w| {
                    acc = 0.995 * acc + w;
                    acc
                })
                .collect()
        }
        NoiseColor::Pink => {
            // Kellet's economy pink filter.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white
                .map(|w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
    };
    let mean = out.iter().sum::<f64>() / n.max(1) as f64;
    let rms = (out.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|x| *x = (*x - mean) / rms);
    }
    out
}

/// Renders one track from `recipe`. Per-track jitter: fundamental, harmonic
/// gains (±20%), AM phase and the noise realisation. Peak is scaled to 0.5.
pub fn synthesize_track(
    recipe: &GenreRecipe,
    seconds: f64,
    sample_rate: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let n = (seconds * sample_rate as f64).round() as usize;
    let (lo, hi) = recipe.f0_range;
    let f0 = if hi > lo {
        (rng.gen_range(lo.ln()..hi.ln())).exp()
    } else {
        lo
    };
    let nyquist = sample_rate as f64 / 2.0;
    let partials: Vec<(f64, f64, f64)> = recipe
        .harmonics
        .iter()
        .enumerate()
        .map(|(h, &a)| {
            (
                f0 * (h + 1) as f64,
                a * rng.gen_range(0.8..1.2),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .filter(|(f, _, _)| *f < nyquist)
        .collect();
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let noise = noise(recipe.noise_color, n, rng);
    let sr = sample_rate as f64;
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = partials
                .iter()
                .map(|(f, a, ph)| a * (2.0 * PI * f * t + ph).sin())
                .sum();
            let env = if recipe.am_rate > 0.0 {
                0.5 * (1.0 + (2.0 * PI * recipe.am_rate * t + am_phase).sin())
            } else {
                1.0
            };
            env * tone + recipe.noise_level * noise[i]
        })
        .collect();
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|x| *x *= 0.5 / peak);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub metadata_path: PathBuf,
    pub taxonomy_path: PathBuf,
    pub tracks: Vec<TrackMetadata>,
    pub taxonomy: GenreTaxonomy,
    pub recipes: Vec<GenreRecipe>,
}

/// Writes `audio/*.wav`, `metadata.csv` and `taxonomy.csv` under `out_dir`.
///
/// Genre `g` has root id `g + 1` and one subgenre `100 + g`; odd tracks are
/// tagged with the subgenre. Each artist owns two consecutive tracks.
pub fn generate_synthetic_corpus(spec: &SynthCorpusSpec, out_dir: &Path) -> Result<SynthCorpus> {
    let recipes = spec.resolved_recipes()?;
    let mut genres = BTreeMap::new();
    for (g, r) in recipes.iter().enumerate() {
        let root = g as u32 + 1;
        genres.insert(
            root,
            GenreNode {
                name: r.name.clone(),
                parent: None,
            },
        );
        genres.insert(
            100 + g as u32,
            GenreNode {
                name: format!("{}-sub", r.name),
                parent: Some(root),
            },
        );
    }
    let taxonomy = GenreTaxonomy::new(genres)?;
    let mut tracks = Vec::new();
    for (g, recipe) in recipes.iter().enumerate() {
        for i in 0..spec.tracks_per_genre {
            let track_id = format!("g{g:02}t{i:03}");
            let stream = ((g as u64) << 32) | i as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(stream);
            let samples = synthesize_track(recipe, spec.clip_seconds, spec.sample_rate, &mut rng);
            let rel = PathBuf::from("audio").join(format!("{track_id}.wav"));
            let clip = AudioClip::new(track_id.clone(), samples, spec.sample_rate)?;
            write_wav(&out_dir.join(&rel), &clip)?;
            let genre = if i % 2 == 1 {
                100 + g as u32
            } else {
                g as u32 + 1
            };
            tracks.push(TrackMetadata {
                track_id,
                artist_id: format!("a{g}_{}", i / 2),
                genre_ids: vec![genre],
                path: rel,
                duration_s: Some(clip.duration_secs()),
            });
        }
    }
    let metadata_path = out_dir.join("metadata.csv");
    let taxonomy_path = out_dir.join("taxonomy.csv");
    write_taxonomy(&taxonomy_path, &taxonomy)?;
    write_track_metadata(&metadata_path, &tracks)?;
    Ok(SynthCorpus {
        metadata_path,
        taxonomy_path,
        tracks,
        taxonomy,
        recipes,
    })
}

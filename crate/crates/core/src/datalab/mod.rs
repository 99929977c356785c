//! Dataset layer: track metadata and genre taxonomy files, top-level genre
//! resolution, artist-disjoint stratified splits, a synthetic genre corpus and
//! an importer for FMA-style metadata.

mod fma;
mod metadata;
mod split;
mod synth;

pub use fma::{import_fma, FmaImport};
pub use metadata::{
    parse_taxonomy, parse_track_metadata, resolve_labels, resolve_top_level_genre, write_taxonomy,
    write_track_metadata, GenreTaxonomy, LabeledTrack, MultiRootPolicy, Resolution, TrackMetadata,
    METADATA_HEADER, TAXONOMY_HEADER,
};
pub use split::{
    make_split, verify_split, DatasetSplit, Segment, SplitCheck, SplitReport, RATIO_TOL_PTS,
    STRATIFY_TOL_PTS,
};
pub use synth::{
    generate_synthetic_corpus, synthesize_track, GenreRecipe, NoiseColor, SynthCorpus,
    SynthCorpusSpec,
};

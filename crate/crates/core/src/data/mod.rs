//! Embedding sequences on disk, dataset manifests, windowing, balanced
//! pairing, series-aware splitting and synthetic data.

mod manifest;
mod sequence;
mod split;
mod synth;
mod window;

pub use manifest::{Manifest, ManifestEntry, MANIFEST_HEADER};
pub use sequence::{encoded_len, read_sequence, write_sequence, EmbeddingSequence, SEQUENCE_MAGIC, SEQUENCE_VERSION};
pub use split::split_by_series;
pub use synth::{angle_between, synth_generate, synth_generate_with_centroids, write_dataset, SeriesCentroids, SynthConfig};
pub use window::{
    balance_pairs, make_windows, runs_of, window_offsets, SegmentPair, Span, Window, DEFAULT_STRIDE,
    DEFAULT_WINDOW_LEN,
};

//! Dataset records, on-disk formats, vocabulary and the synthetic generator.

mod manifest;
mod record;
pub mod synth;
pub mod vocab;

pub use manifest::{
    f32_blob_bytes, load_manifest, manifest_for, read_f32_blob, save_manifest, write_f32_blob,
    FeatureManifest, SnippetEntry, VideoEntry, MANIFEST_FILE, VOCAB_FILE,
};
pub use record::{
    DatasetSplit, LabelSpace, Limits, SnippetAnnotation, VideoRecord, DEFAULT_MAX_FRAMES,
    DEFAULT_MAX_SNIPPETS, KNOWLEDGE_DIM,
};
pub use synth::{synth_generate, Grammar, SynthConfig};
pub use vocab::{normalize, normalize_tokens, Vocabulary, BOS, EOS, PAD, UNK};

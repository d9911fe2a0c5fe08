//! On-disk dataset layout.
//!
//! A split lives in one directory:
//!
//! ```text
//! manifest.json            dataset/split metadata, label names, per-video entries
//! vocab.txt                one token per line (line n ↦ id n - 1 + 4)
//! features/<id>.f32        raw little-endian f32, row-major [T × feature_dim], no header
//! knowledge/<id>.<k>.{explicit,implicit}.f32   384 little-endian f32 per snippet (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::record::{DatasetSplit, LabelSpace, Limits, SnippetAnnotation, VideoRecord, KNOWLEDGE_DIM};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureManifest {
    pub dataset: String,
    pub split: String,
    pub feature_dim: usize,
    /// Vocabulary path relative to the manifest.
    pub vocabulary: String,
    pub labels: LabelSpace,
    pub videos: Vec<VideoEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    pub num_frames: usize,
    /// Feature blob path relative to the manifest.
    pub features: String,
    pub snippets: Vec<SnippetEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnippetEntry {
    pub start_frame: usize,
    pub end_frame: usize,
    pub caption: String,
    pub action_labels: Vec<u8>,
    pub object_labels: Vec<u8>,
    pub pseudo_labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit_knowledge: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implicit_knowledge: Option<String>,
}

pub fn read_f32_blob(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, format!("{} bytes is not a whole number of f32 values", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn f32_blob_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_f32_blob(path: &Path, values: &[f32]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, f32_blob_bytes(values)).map_err(|e| Error::io(path, e))
}

fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn read_sized_blob(dir: &Path, rel: &str, expected: usize, video: &str, what: &str) -> Result<Vec<f32>> {
    let path = dir.join(rel);
    let len = fs::metadata(&path)
        .map_err(|e| Error::video(video, format!("{what} blob {}: {e}", path.display())))?
        .len() as usize;
    if len != expected * 4 {
        return Err(Error::video(
            video,
            format!("{what} blob {} has {len} bytes, expected {}", path.display(), expected * 4),
        ));
    }
    read_f32_blob(&path)
}

/// Reads and validates a split. `path` is the manifest file or its directory.
pub fn load_manifest(path: &Path, limits: &Limits) -> Result<DatasetSplit> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: FeatureManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e))?;
    if manifest.feature_dim == 0 {
        return Err(Error::format(&manifest_path, "feature_dim must be positive"));
    }
    let vocab = Vocabulary::load(&dir.join(&manifest.vocabulary))?;

    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let features = read_sized_blob(
            &dir,
            &entry.features,
            entry.num_frames * manifest.feature_dim,
            &entry.id,
            "feature",
        )?;
        let mut snippets = Vec::with_capacity(entry.snippets.len());
        for s in &entry.snippets {
            let knowledge = |rel: &Option<String>, what| -> Result<Option<Vec<f32>>> {
                rel.as_ref()
                    .map(|r| read_sized_blob(&dir, r, KNOWLEDGE_DIM, &entry.id, what))
                    .transpose()
            };
            snippets.push(SnippetAnnotation {
                start_frame: s.start_frame,
                end_frame: s.end_frame,
                caption: s.caption.clone(),
                action_labels: s.action_labels.clone(),
                object_labels: s.object_labels.clone(),
                pseudo_labels: s.pseudo_labels.clone(),
                explicit_knowledge: knowledge(&s.explicit_knowledge, "explicit knowledge")?,
                implicit_knowledge: knowledge(&s.implicit_knowledge, "implicit knowledge")?,
            });
        }
        let record = VideoRecord {
            id: entry.id.clone(),
            num_frames: entry.num_frames,
            feature_dim: manifest.feature_dim,
            features,
            snippets,
        };
        record.validate(&manifest.labels, limits)?;
        videos.push(record);
    }
    let split = DatasetSplit {
        dataset: manifest.dataset,
        split: manifest.split,
        feature_dim: manifest.feature_dim,
        labels: manifest.labels,
        vocab,
        videos,
    };
    split.validate(limits)?;
    Ok(split)
}

/// Manifest describing `split` with the blob layout used by [`save_manifest`].
pub fn manifest_for(split: &DatasetSplit) -> FeatureManifest {
    let videos = split
        .videos
        .iter()
        .map(|v| {
            let stem = file_stem_for(&v.id);
            VideoEntry {
                id: v.id.clone(),
                num_frames: v.num_frames,
                features: format!("features/{stem}.f32"),
                snippets: v
                    .snippets
                    .iter()
                    .enumerate()
                    .map(|(k, s)| SnippetEntry {
                        start_frame: s.start_frame,
                        end_frame: s.end_frame,
                        caption: s.caption.clone(),
                        action_labels: s.action_labels.clone(),
                        object_labels: s.object_labels.clone(),
                        pseudo_labels: s.pseudo_labels.clone(),
                        explicit_knowledge: s
                            .explicit_knowledge
                            .as_ref()
                            .map(|_| format!("knowledge/{stem}.{k}.explicit.f32")),
                        implicit_knowledge: s
                            .implicit_knowledge
                            .as_ref()
                            .map(|_| format!("knowledge/{stem}.{k}.implicit.f32")),
                    })
                    .collect(),
            }
        })
        .collect();
    FeatureManifest {
        dataset: split.dataset.clone(),
        split: split.split.clone(),
        feature_dim: split.feature_dim,
        vocabulary: VOCAB_FILE.to_string(),
        labels: split.labels.clone(),
        videos,
    }
}

/// Writes `split` under `dir` and returns the manifest path.
pub fn save_manifest(split: &DatasetSplit, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = manifest_for(split);
    for (video, entry) in split.videos.iter().zip(&manifest.videos) {
        write_f32_blob(&dir.join(&entry.features), &video.features)?;
        for (s, se) in video.snippets.iter().zip(&entry.snippets) {
            if let (Some(v), Some(rel)) = (&s.explicit_knowledge, &se.explicit_knowledge) {
                write_f32_blob(&dir.join(rel), v)?;
            }
            if let (Some(v), Some(rel)) = (&s.implicit_knowledge, &se.implicit_knowledge) {
                write_f32_blob(&dir.join(rel), v)?;
            }
        }
    }
    split.vocab.save(&dir.join(VOCAB_FILE))?;
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

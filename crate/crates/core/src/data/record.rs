use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_FRAMES: usize = 150;
pub const DEFAULT_MAX_SNIPPETS: usize = 20;
pub const KNOWLEDGE_DIM: usize = 384;

/// Names of the action, object and pseudo-label classes; their concatenation
/// is the action-object target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    pub pseudo_labels: Vec<String>,
}

impl LabelSpace {
    /// `A + O + P`.
    pub fn width(&self) -> usize {
        self.actions.len() + self.objects.len() + self.pseudo_labels.len()
    }

    /// Class name at a position of the concatenated target.
    pub fn name(&self, index: usize) -> Option<&str> {
        let (a, o) = (self.actions.len(), self.objects.len());
        if index < a {
            Some(&self.actions[index])
        } else if index < a + o {
            Some(&self.objects[index - a])
        } else {
            self.pseudo_labels.get(index - a - o).map(String::as_str)
        }
    }
}

/// One captioned segment `[start_frame, end_frame)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SnippetAnnotation {
    pub start_frame: usize,
    pub end_frame: usize,
    pub caption: String,
    pub action_labels: Vec<u8>,
    pub object_labels: Vec<u8>,
    pub pseudo_labels: Vec<u8>,
    /// Precomputed explicit-knowledge vector used when captioning this snippet.
    pub explicit_knowledge: Option<Vec<f32>>,
    /// Precomputed implicit-knowledge vector used when captioning this snippet.
    pub implicit_knowledge: Option<Vec<f32>>,
}

impl SnippetAnnotation {
    /// Concatenated `[actions | objects | pseudo-labels]` target.
    pub fn actobj_target(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(
            self.action_labels.len() + self.object_labels.len() + self.pseudo_labels.len(),
        );
        v.extend_from_slice(&self.action_labels);
        v.extend_from_slice(&self.object_labels);
        v.extend_from_slice(&self.pseudo_labels);
        v
    }

    /// Per-frame 0/1 membership over a video of `num_frames`.
    pub fn frame_mask(&self, num_frames: usize) -> Vec<u8> {
        (0..num_frames)
            .map(|t| u8::from(t >= self.start_frame && t < self.end_frame))
            .collect()
    }
}

/// One video: `T × D` frame features plus its snippet annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub num_frames: usize,
    pub feature_dim: usize,
    /// Row-major `[num_frames, feature_dim]`.
    pub features: Vec<f32>,
    pub snippets: Vec<SnippetAnnotation>,
}

impl VideoRecord {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.features[t * self.feature_dim..(t + 1) * self.feature_dim]
    }

    pub fn validate(&self, labels: &LabelSpace, limits: &Limits) -> Result<()> {
        let bad = |reason: String| Err(Error::video(&self.id, reason));
        if self.num_frames == 0 {
            return bad("video has no frames".into());
        }
        if self.num_frames > limits.max_frames {
            return bad(format!("{} frames exceeds the cap of {}", self.num_frames, limits.max_frames));
        }
        if self.snippets.len() > limits.max_snippets {
            return bad(format!(
                "{} snippets exceeds the cap of {}",
                self.snippets.len(),
                limits.max_snippets
            ));
        }
        if self.features.len() != self.num_frames * self.feature_dim {
            return bad(format!(
                "feature matrix has {} values, expected {}×{}",
                self.features.len(),
                self.num_frames,
                self.feature_dim
            ));
        }
        if !self.features.iter().all(|v| v.is_finite()) {
            return bad("non-finite feature value".into());
        }
        for (k, s) in self.snippets.iter().enumerate() {
            if s.start_frame >= s.end_frame || s.end_frame > self.num_frames {
                return bad(format!(
                    "snippet {k} range [{}, {}) is not inside [0, {})",
                    s.start_frame, s.end_frame, self.num_frames
                ));
            }
            let widths = [
                ("action_labels", s.action_labels.len(), labels.actions.len()),
                ("object_labels", s.object_labels.len(), labels.objects.len()),
                ("pseudo_labels", s.pseudo_labels.len(), labels.pseudo_labels.len()),
            ];
            for (field, got, want) in widths {
                if got != want {
                    return bad(format!("snippet {k} {field} has width {got}, expected {want}"));
                }
            }
            if s.actobj_target().iter().any(|&b| b > 1) {
                return bad(format!("snippet {k} label vector is not binary"));
            }
            for (field, vec) in [("explicit", &s.explicit_knowledge), ("implicit", &s.implicit_knowledge)] {
                if let Some(v) = vec {
                    if v.len() != KNOWLEDGE_DIM || !v.iter().all(|x| x.is_finite()) {
                        return bad(format!("snippet {k} {field} knowledge vector is malformed"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub max_frames: usize,
    pub max_snippets: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_frames: DEFAULT_MAX_FRAMES,
            max_snippets: DEFAULT_MAX_SNIPPETS,
        }
    }
}

/// A loaded dataset split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub dataset: String,
    pub split: String,
    pub feature_dim: usize,
    pub labels: LabelSpace,
    pub vocab: Vocabulary,
    pub videos: Vec<VideoRecord>,
}

impl DatasetSplit {
    pub fn validate(&self, limits: &Limits) -> Result<()> {
        for v in &self.videos {
            if v.feature_dim != self.feature_dim {
                return Err(Error::video(
                    &v.id,
                    format!("feature_dim {} differs from split's {}", v.feature_dim, self.feature_dim),
                ));
            }
            v.validate(&self.labels, limits)?;
        }
        let mut ids: Vec<&str> = self.videos.iter().map(|v| v.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::video(w[0], "duplicate video id"));
        }
        Ok(())
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn num_snippets(&self) -> usize {
        self.videos.iter().map(|v| v.snippets.len()).sum()
    }
}

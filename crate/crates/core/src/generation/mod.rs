//! Greedy paragraph generation and the per-video output documents.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{LabelSpace, VideoRecord, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeContext, Providers, StoredVectors};
use crate::model::{Model, SnippetInputs};
use crate::numerics::{Graph, Real, Tensor, Var};

#[cfg(test)]
mod tests;

/// How snippets are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// The selector proposes every snippet; generation stops on a weak proposal.
    Free,
    /// Ground-truth segments are captioned in order.
    GtProposals,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Free => "free",
            Mode::GtProposals => "gt_proposals",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free" => Ok(Mode::Free),
            "gt_proposals" => Ok(Mode::GtProposals),
            other => Err(Error::invalid(format!("unknown generation mode {other:?} (free | gt_proposals)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationOptions {
    /// Free mode stops once no frame reaches this selector probability.
    pub stop_threshold: f64,
    /// Action-object names listed per snippet in documents.
    pub top_k: usize,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions { stop_threshold: 0.5, top_k: 3 }
    }
}

/// Result of captioning one video.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationOutput {
    /// Word ids of each sentence, without `BOS`/`EOS`.
    pub sentences: Vec<Vec<usize>>,
    /// Selector probabilities per sentence.
    pub masks: Vec<Vec<f32>>,
    pub actobj: Vec<Vec<f32>>,
    /// Context each sentence was conditioned on.
    pub contexts: Vec<KnowledgeContext>,
}

impl GenerationOutput {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn decode_greedy<F: Real>(model: &Model<F>, g: &mut Graph<'_, F>, encoded: Var) -> Result<Vec<usize>> {
    let max_len = model.config().max_sentence_len;
    let mut prefix = vec![BOS];
    let mut memory = encoded;
    loop {
        let (logits, state) = model.decoder_step(g, &prefix, memory)?;
        let next = argmax(g.value(logits));
        if next == EOS {
            break;
        }
        prefix.push(next);
        if prefix.len() > max_len {
            break;
        }
        memory = model.memory_update_var(g, memory, state)?;
    }
    prefix.remove(0);
    Ok(prefix)
}

/// Greedy decoding from encoded tokens `[L, d]`: argmax at every step (ties
/// to the lowest id) until `EOS` or `max_sentence_len` words.
pub fn generate_sentence<F: Real>(model: &Model<F>, encoded: &Tensor<F>) -> Result<Vec<usize>> {
    let mut g = Graph::new(&model.params);
    let e = g.constant(encoded)?;
    decode_greedy(model, &mut g, e)
}

/// Captions `video` snippet by snippet, feeding each generated sentence to the
/// providers to build the next context.
///
/// Precomputed knowledge vectors are read from the video's annotation with the
/// same index as the step, when present.
pub fn generate_paragraph<F: Real>(
    model: &Model<F>,
    video: &VideoRecord,
    vocab: &Vocabulary,
    providers: &Providers,
    mode: Mode,
    options: &GenerationOptions,
) -> Result<GenerationOutput> {
    let cfg = model.config();
    if video.num_frames > cfg.max_frames {
        return Err(Error::video(
            &video.id,
            format!("{} frames exceeds max_frames {}", video.num_frames, cfg.max_frames),
        ));
    }
    let steps = match mode {
        Mode::Free => cfg.max_snippets,
        Mode::GtProposals => video.snippets.len(),
    };
    let mut out = GenerationOutput { sentences: vec![], masks: vec![], actobj: vec![], contexts: vec![] };
    let mut prev: Option<String> = None;
    for i in 0..steps {
        let annotation = video.snippets.get(i);
        let stored = StoredVectors {
            explicit: annotation.and_then(|s| s.explicit_knowledge.as_deref()),
            implicit: annotation.and_then(|s| s.implicit_knowledge.as_deref()),
        };
        let context = providers
            .context_for_step(prev.as_deref(), stored)
            .map_err(|e| Error::video(&video.id, format!("knowledge provider failed at step {i}: {e}")))?;
        let gt_mask: Option<Vec<f32>> = match mode {
            Mode::GtProposals => annotation.map(|s| s.frame_mask(video.num_frames).iter().map(|&b| f32::from(b)).collect()),
            Mode::Free => None,
        };
        let mut g = Graph::new(&model.params);
        let inputs = SnippetInputs {
            features: &video.features,
            num_frames: video.num_frames,
            context: &context,
            mask_override: gt_mask.as_deref(),
        };
        let sg = model.encode_snippet(&mut g, &inputs, false)?;
        let selection: Vec<f32> = g.value(sg.selection).iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        if mode == Mode::Free {
            let peak = selection.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            if f64::from(peak) < options.stop_threshold {
                break;
            }
        }
        let actobj = g.value(sg.actobj).iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        let words = decode_greedy(model, &mut g, sg.encoded)?;
        prev = Some(vocab.decode(&words));
        out.sentences.push(words);
        out.masks.push(selection);
        out.actobj.push(actobj);
        out.contexts.push(context);
    }
    Ok(out)
}

/// `1` where `p ≥ 0.5`.
pub fn threshold(probs: &[f32]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= 0.5)).collect()
}

/// One captioned snippet as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnippetDoc {
    pub index: usize,
    /// First and one-past-last selected frame, `None` when no frame is selected.
    pub frame_range: Option<[usize; 2]>,
    pub caption: String,
    /// Thresholded selector output.
    pub mask: Vec<u8>,
    /// Thresholded action-object prediction.
    pub actobj: Vec<u8>,
    pub top_actobj: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoDoc {
    pub id: String,
    pub snippets: Vec<SnippetDoc>,
}

impl VideoDoc {
    pub fn from_output(
        id: &str,
        output: &GenerationOutput,
        vocab: &Vocabulary,
        labels: &LabelSpace,
        options: &GenerationOptions,
    ) -> Self {
        let snippets = (0..output.len())
            .map(|i| {
                let mask = threshold(&output.masks[i]);
                let first = mask.iter().position(|&b| b == 1);
                let last = mask.iter().rposition(|&b| b == 1);
                let mut order: Vec<usize> = (0..output.actobj[i].len()).collect();
                order.sort_by(|&a, &b| output.actobj[i][b].total_cmp(&output.actobj[i][a]).then(a.cmp(&b)));
                SnippetDoc {
                    index: i,
                    frame_range: first.zip(last).map(|(a, b)| [a, b + 1]),
                    caption: vocab.decode(&output.sentences[i]),
                    mask,
                    actobj: threshold(&output.actobj[i]),
                    top_actobj: order
                        .into_iter()
                        .take(options.top_k)
                        .filter_map(|k| labels.name(k).map(str::to_string))
                        .collect(),
                }
            })
            .collect();
        VideoDoc { id: id.to_string(), snippets }
    }

    /// Captions joined into one paragraph.
    pub fn paragraph(&self) -> String {
        self.snippets
            .iter()
            .map(|s| s.caption.as_str())
            .filter(|c| !c.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Generated captions for a set of videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationDocs {
    pub mode: Mode,
    pub videos: Vec<VideoDoc>,
}

impl GenerationDocs {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Limits, SynthConfig};
use crate::error::{Error, Result};
use crate::generation::{GenerationOptions, Mode};
use crate::knowledge::{
    CompletionTable, ExplicitProvider, HiddenProvider, ImplicitProvider, InferenceTable, Providers, SentenceEmbedder,
    ToyKb,
};
use crate::model::ModelConfig;
use crate::objective::TrainConfig;

/// Everything a run needs, loaded from TOML and then overridden by flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory that receives every output of the command.
    pub out_dir: Option<PathBuf>,
    pub data: DataSection,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub knowledge: KnowledgeSection,
    pub generation: GenerationSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training split directory (or manifest file).
    pub train: Option<PathBuf>,
    /// Held-out split used for periodic evaluation and by default for generation.
    pub eval: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub num_videos: usize,
    pub frames_per_snippet: usize,
    pub snippets_per_video: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub script_prob: f64,
    pub split: String,
    pub max_frames: usize,
    pub max_snippets: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            seed: d.seed,
            num_videos: d.num_videos,
            frames_per_snippet: d.frames_per_snippet,
            snippets_per_video: d.snippets_per_video,
            feature_dim: d.feature_dim,
            noise_sigma: d.noise_sigma,
            script_prob: d.script_prob,
            split: d.split,
            max_frames: d.limits.max_frames,
            max_snippets: d.limits.max_snippets,
        }
    }
}

impl SynthSection {
    pub fn to_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            num_videos: self.num_videos,
            frames_per_snippet: self.frames_per_snippet,
            snippets_per_video: self.snippets_per_video,
            feature_dim: self.feature_dim,
            noise_sigma: self.noise_sigma,
            script_prob: self.script_prob,
            split: self.split.clone(),
            limits: Limits { max_frames: self.max_frames, max_snippets: self.max_snippets },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-size architecture.
    Full,
    /// Small architecture for the synthetic experiments.
    #[default]
    Desk,
    /// Gradient-check architecture.
    Tiny,
}

/// Architecture choice. Unset dimensions come from the preset, and the
/// dataset-dependent ones (`feature_dim`, `vocab_size`, `actobj_dim`) from the
/// training split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    /// Seed of the parameter initialization; defaults to `train.seed`.
    pub init_seed: Option<u64>,
    pub feature_dim: Option<usize>,
    pub vocab_size: Option<usize>,
    pub actobj_dim: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub max_frames: Option<usize>,
    pub max_snippets: Option<usize>,
    pub max_sentence_len: Option<usize>,
    pub token_stride: Option<usize>,
    pub dropout: Option<f64>,
}

impl ModelSection {
    pub fn resolve(&self, split: &DatasetSplit) -> Result<ModelConfig> {
        let (feature_dim, vocab, width) = (split.feature_dim, split.vocab.len(), split.labels.width());
        let mut c = match self.preset {
            Preset::Full => ModelConfig { feature_dim, vocab_size: vocab, actobj_dim: width, ..ModelConfig::default() },
            Preset::Desk => ModelConfig::desk(feature_dim, vocab, width),
            Preset::Tiny => ModelConfig { feature_dim, vocab_size: vocab, actobj_dim: width, ..ModelConfig::tiny() },
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(feature_dim, vocab_size, actobj_dim, d_model, heads, enc_layers, dec_layers, ffn_dim);
        set!(max_frames, max_snippets, max_sentence_len, token_stride, dropout);
        c.validate()?;
        crate::objective::check_compatible(split, &c)?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Null,
    Toy,
    File,
    /// Vectors stored with each snippet in the dataset.
    Precomputed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenKind {
    Embed,
    Null,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeSection {
    pub explicit: SourceKind,
    /// JSON object: sentence → {relation → inference}.
    pub explicit_file: Option<PathBuf>,
    /// Knowledge base for the `toy` source; the built-in one when unset.
    pub toy_kb_file: Option<PathBuf>,
    pub implicit: SourceKind,
    /// JSON object: sentence → completion.
    pub implicit_file: Option<PathBuf>,
    pub hidden: HiddenKind,
    pub relations: Option<Vec<String>>,
    pub embedder_seed: Option<u64>,
}

impl Default for KnowledgeSection {
    fn default() -> Self {
        KnowledgeSection {
            explicit: SourceKind::Precomputed,
            explicit_file: None,
            toy_kb_file: None,
            implicit: SourceKind::Precomputed,
            implicit_file: None,
            hidden: HiddenKind::Embed,
            relations: None,
            embedder_seed: None,
        }
    }
}

fn required<'a>(path: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::config(field, "required when the matching source is `file`"))
}

impl KnowledgeSection {
    pub fn providers(&self) -> Result<Providers> {
        let mut p = Providers::null();
        if let Some(r) = &self.relations {
            if r.is_empty() {
                return Err(Error::config("knowledge.relations", "must name at least one relation"));
            }
            p.relations = r.clone();
        }
        if let Some(seed) = self.embedder_seed {
            p.embedder = SentenceEmbedder::new(seed);
        }
        p.explicit = match self.explicit {
            SourceKind::Null => ExplicitProvider::Null,
            SourceKind::Toy => ExplicitProvider::ToyKb(match &self.toy_kb_file {
                Some(path) => ToyKb::load(path)?,
                None => ToyKb::synthetic(),
            }),
            SourceKind::File => {
                ExplicitProvider::File(InferenceTable::load(required(&self.explicit_file, "knowledge.explicit_file")?)?)
            }
            SourceKind::Precomputed => ExplicitProvider::Precomputed,
        };
        p.implicit = match self.implicit {
            SourceKind::Null => ImplicitProvider::Null,
            SourceKind::Toy => ImplicitProvider::Toy,
            SourceKind::File => {
                ImplicitProvider::File(CompletionTable::load(required(&self.implicit_file, "knowledge.implicit_file")?)?)
            }
            SourceKind::Precomputed => ImplicitProvider::Precomputed,
        };
        p.hidden = match self.hidden {
            HiddenKind::Embed => HiddenProvider::Embed,
            HiddenKind::Null => HiddenProvider::Null,
        };
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub mode: Mode,
    pub stop_threshold: f64,
    pub top_k: usize,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let d = GenerationOptions::default();
        GenerationSection { mode: Mode::GtProposals, stop_threshold: d.stop_threshold, top_k: d.top_k }
    }
}

impl GenerationSection {
    pub fn options(&self) -> GenerationOptions {
        GenerationOptions { stop_threshold: self.stop_threshold, top_k: self.top_k }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.message()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.to_config().validate()?;
        if !(0.0..=1.0).contains(&self.generation.stop_threshold) {
            return Err(Error::config("generation.stop_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Writes the effective configuration next to a command's outputs.
    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

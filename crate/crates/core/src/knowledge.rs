//! Commonsense conditioning vectors.
//!
//! For each step the model receives three 384-wide vectors derived from the
//! previous sentence: explicit relation inferences (`m`), an implicit
//! sentence completion (`g`) and the sentence itself (`h`). Text comes from
//! pluggable providers and is embedded by [`SentenceEmbedder`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::synth::Grammar;
use crate::data::vocab::{normalize, normalize_tokens};
use crate::data::KNOWLEDGE_DIM;
use crate::error::{Error, Result};

pub const DEFAULT_RELATIONS: [&str; 12] = [
    "AtLocation",
    "ObjectUse",
    "xNeed",
    "xEffect",
    "xWant",
    "xIntent",
    "isAfter",
    "isBefore",
    "HasSubEvent",
    "Causes",
    "oEffect",
    "oWant",
];

pub const RELATION_SEPARATOR: &str = "<PAD>";

/// Natural-language spelling of a relation name, e.g. `AtLocation` → `At Location`.
pub fn relation_display(name: &str) -> String {
    match name {
        "xNeed" => "Need".into(),
        "xEffect" => "Effect".into(),
        "xWant" => "Want".into(),
        "xIntent" => "Intent".into(),
        "xReact" => "React".into(),
        "xAttr" => "Attribute".into(),
        "oEffect" => "Others Effect".into(),
        "oWant" => "Others Want".into(),
        "oReact" => "Others React".into(),
        _ => {
            let mut out = String::with_capacity(name.len() + 4);
            for (i, ch) in name.chars().enumerate() {
                if i == 0 {
                    out.extend(ch.to_uppercase());
                } else {
                    if ch.is_uppercase() {
                        out.push(' ');
                    }
                    out.push(ch);
                }
            }
            out
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationInference {
    pub relation: String,
    pub text: String,
}

/// `"<Relation> <text> <PAD> <Relation> <text> ..."` in `order`; inferences
/// whose relation is not in `order` are dropped.
pub fn render_inference_string(inferences: &[RelationInference], order: &[String]) -> String {
    order
        .iter()
        .filter_map(|rel| inferences.iter().find(|inf| &inf.relation == rel))
        .map(|inf| {
            let name = relation_display(&inf.relation);
            if inf.text.is_empty() {
                name
            } else {
                format!("{name} {}", inf.text)
            }
        })
        .collect::<Vec<_>>()
        .join(&format!(" {RELATION_SEPARATOR} "))
}

// ---------------------------------------------------------------------------
// Embedder

/// Hashed bag-of-words followed by a fixed seeded Gaussian projection to 384
/// dims and L2 normalization. Empty text embeds to the zero vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceEmbedder {
    seed: u64,
    buckets: u64,
}

impl Default for SentenceEmbedder {
    fn default() -> Self {
        SentenceEmbedder::new(0x5eed_0384)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl SentenceEmbedder {
    pub fn new(seed: u64) -> Self {
        SentenceEmbedder { seed, buckets: 1 << 20 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn projection_row(&self, bucket: u64) -> impl Iterator<Item = f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ bucket.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        (0..KNOWLEDGE_DIM).map(move |_| StandardNormal.sample(&mut rng))
    }

    pub fn embed(&self, text: &str) -> Vec<f32> {
        let mut counts: BTreeMap<u64, f64> = BTreeMap::new();
        for token in normalize_tokens(text) {
            *counts.entry(fnv1a(token.as_bytes()) % self.buckets).or_default() += 1.0;
        }
        let mut acc = vec![0f64; KNOWLEDGE_DIM];
        for (bucket, count) in counts {
            for (a, r) in acc.iter_mut().zip(self.projection_row(bucket)) {
                *a += count * r;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return vec![0.0; KNOWLEDGE_DIM];
        }
        acc.iter().map(|v| (v / norm) as f32).collect()
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

// ---------------------------------------------------------------------------
// Providers

type RelationTexts = BTreeMap<String, String>;

/// Template knowledge base keyed on the synthetic grammar's verb and object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyKb {
    /// verb phrase → relation → text
    pub verbs: BTreeMap<String, BTreeMap<String, String>>,
    /// object name → relation → text
    pub objects: BTreeMap<String, BTreeMap<String, String>>,
}

impl ToyKb {
    pub fn synthetic() -> Self {
        let g = Grammar::standard();
        let table = |rels: &[(&str, &str)]| {
            rels.iter().map(|(r, t)| (r.to_string(), t.to_string())).collect()
        };
        ToyKb {
            verbs: g.verbs.iter().map(|v| (v.phrase.to_string(), table(v.relations))).collect(),
            objects: g.objects.iter().map(|o| (o.name.to_string(), table(o.relations))).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    /// Longest verb key the sentence starts with, and longest object key in the remainder.
    fn lookup(&self, sentence: &str) -> (Option<&RelationTexts>, Option<&RelationTexts>) {
        let text = normalize(sentence);
        let verb = self
            .verbs
            .iter()
            .filter(|(k, _)| text == **k || text.starts_with(&format!("{k} ")))
            .max_by_key(|(k, _)| k.len());
        let rest = verb.map_or(text.as_str(), |(k, _)| &text[k.len()..]);
        let object = self
            .objects
            .iter()
            .filter(|(k, _)| {
                rest.split_whitespace().collect::<Vec<_>>().windows(k.split_whitespace().count())
                    .any(|w| w.join(" ") == **k)
            })
            .max_by_key(|(k, _)| k.len());
        (verb.map(|(_, v)| v), object.map(|(_, v)| v))
    }

    fn infer(&self, sentence: &str, relations: &[String]) -> Vec<RelationInference> {
        let (verb, object) = self.lookup(sentence);
        relations
            .iter()
            .map(|rel| RelationInference {
                relation: rel.clone(),
                text: object
                    .and_then(|o| o.get(rel))
                    .or_else(|| verb.and_then(|v| v.get(rel)))
                    .cloned()
                    .unwrap_or_default(),
            })
            .collect()
    }
}

/// Precomputed text keyed by normalized sentence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TextTable<V> {
    entries: HashMap<String, V>,
}

impl<V: Clone + for<'de> Deserialize<'de>> TextTable<V> {
    pub fn from_pairs<I: IntoIterator<Item = (String, V)>>(pairs: I) -> Self {
        TextTable {
            entries: pairs.into_iter().map(|(k, v)| (normalize(&k), v)).collect(),
        }
    }

    /// JSON object mapping sentence → value.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<String, V> = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        Ok(Self::from_pairs(raw))
    }

    pub fn get(&self, sentence: &str) -> Result<&V> {
        self.entries
            .get(&normalize(sentence))
            .ok_or_else(|| Error::MissingKnowledge(sentence.to_string()))
    }
}

/// Per-relation inference texts, as emitted by an external relation model.
pub type InferenceTable = TextTable<BTreeMap<String, String>>;
/// Sentence completions, as emitted by an external language model.
pub type CompletionTable = TextTable<String>;

#[derive(Clone, Debug)]
pub enum ExplicitProvider {
    Null,
    ToyKb(ToyKb),
    File(InferenceTable),
    /// Vectors stored with each snippet in the dataset.
    Precomputed,
}

#[derive(Clone, Debug)]
pub enum ImplicitProvider {
    Null,
    /// Scripted successor from the synthetic grammar.
    Toy,
    File(CompletionTable),
    Precomputed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HiddenProvider {
    Embed,
    Null,
}

/// The conditioning triple for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeContext {
    pub m: Vec<f32>,
    pub g: Vec<f32>,
    pub h: Vec<f32>,
}

impl KnowledgeContext {
    pub fn zeros() -> Self {
        KnowledgeContext {
            m: vec![0.0; KNOWLEDGE_DIM],
            g: vec![0.0; KNOWLEDGE_DIM],
            h: vec![0.0; KNOWLEDGE_DIM],
        }
    }

    /// `[m | g | h]`.
    pub fn concat(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(3 * KNOWLEDGE_DIM);
        v.extend_from_slice(&self.m);
        v.extend_from_slice(&self.g);
        v.extend_from_slice(&self.h);
        v
    }
}

/// Vectors attached to the snippet being captioned, for `Precomputed` providers.
#[derive(Clone, Copy, Debug, Default)]
pub struct StoredVectors<'a> {
    pub explicit: Option<&'a [f32]>,
    pub implicit: Option<&'a [f32]>,
}

#[derive(Clone, Debug)]
pub struct Providers {
    pub relations: Vec<String>,
    pub explicit: ExplicitProvider,
    pub implicit: ImplicitProvider,
    pub hidden: HiddenProvider,
    pub embedder: SentenceEmbedder,
}

impl Providers {
    pub fn null() -> Self {
        Providers {
            relations: DEFAULT_RELATIONS.iter().map(|s| s.to_string()).collect(),
            explicit: ExplicitProvider::Null,
            implicit: ImplicitProvider::Null,
            hidden: HiddenProvider::Embed,
            embedder: SentenceEmbedder::default(),
        }
    }

    pub fn toy() -> Self {
        Providers {
            explicit: ExplicitProvider::ToyKb(ToyKb::synthetic()),
            implicit: ImplicitProvider::Toy,
            ..Self::null()
        }
    }

    pub fn precomputed() -> Self {
        Providers {
            explicit: ExplicitProvider::Precomputed,
            implicit: ImplicitProvider::Precomputed,
            ..Self::null()
        }
    }

    /// One top-1 inference per configured relation.
    pub fn explicit_inferences(&self, sentence: &str) -> Result<Vec<RelationInference>> {
        if sentence.trim().is_empty() {
            return Err(Error::invalid("explicit inference needs a non-empty sentence"));
        }
        let empty = |rel: &String| RelationInference { relation: rel.clone(), text: String::new() };
        match &self.explicit {
            ExplicitProvider::Null | ExplicitProvider::Precomputed => {
                Ok(self.relations.iter().map(empty).collect())
            }
            ExplicitProvider::ToyKb(kb) => Ok(kb.infer(sentence, &self.relations)),
            ExplicitProvider::File(table) => {
                let row = table.get(sentence)?;
                Ok(self
                    .relations
                    .iter()
                    .map(|rel| RelationInference {
                        relation: rel.clone(),
                        text: row.get(rel).cloned().unwrap_or_default(),
                    })
                    .collect())
            }
        }
    }

    pub fn implicit_completion(&self, sentence: &str) -> Result<String> {
        if sentence.trim().is_empty() {
            return Err(Error::invalid("implicit completion needs a non-empty sentence"));
        }
        match &self.implicit {
            ImplicitProvider::Null | ImplicitProvider::Precomputed => Ok(String::new()),
            ImplicitProvider::Toy => Ok(Grammar::standard().scripted_next(sentence).unwrap_or_default()),
            ImplicitProvider::File(table) => table.get(sentence).cloned(),
        }
    }

    /// Context for the next step. `prev` is `None` at the first snippet, which
    /// yields three zero vectors. An empty previous sentence is treated like a
    /// sentence with no words.
    pub fn context_for_step(&self, prev: Option<&str>, stored: StoredVectors<'_>) -> Result<KnowledgeContext> {
        let Some(prev) = prev else {
            return Ok(KnowledgeContext::zeros());
        };
        let zero = || vec![0.0; KNOWLEDGE_DIM];
        let m = match &self.explicit {
            ExplicitProvider::Precomputed => stored.explicit.map_or_else(zero, <[f32]>::to_vec),
            _ if prev.trim().is_empty() => {
                let names: Vec<_> = self
                    .relations
                    .iter()
                    .map(|r| RelationInference { relation: r.clone(), text: String::new() })
                    .collect();
                self.embedder.embed(&render_inference_string(&names, &self.relations))
            }
            _ => self
                .embedder
                .embed(&render_inference_string(&self.explicit_inferences(prev)?, &self.relations)),
        };
        let g = match &self.implicit {
            ImplicitProvider::Precomputed => stored.implicit.map_or_else(zero, <[f32]>::to_vec),
            _ if prev.trim().is_empty() => zero(),
            _ => self.embedder.embed(&self.implicit_completion(prev)?),
        };
        let h = match self.hidden {
            HiddenProvider::Embed => self.embedder.embed(prev),
            HiddenProvider::Null => zero(),
        };
        Ok(KnowledgeContext { m, g, h })
    }
}

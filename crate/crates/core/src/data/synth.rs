//! Seeded synthetic instruction videos.
//!
//! Each snippet instantiates `<verb phrase> the <object>`. Frame features are
//! noisy one-hot blocks:
//!
//! | block            | width | content                                             |
//! |------------------|-------|-----------------------------------------------------|
//! | visual action    | 4     | action *class*; verbs come in visually identical pairs |
//! | object           | 10    | object being handled                                |
//! | scene state      | 4 + 1 | previous snippet's action class, or a start flag   |
//! | scene state      | 10    | previous snippet's object                           |
//! | padding          | rest  | noise only                                          |
//!
//! Because paired verbs ("pick up" / "put down") look the same, the frames
//! alone leave the verb ambiguous; the next verb follows a fixed script with
//! probability `script_prob` and is uniform otherwise. The stored oracle
//! knowledge vectors are embeddings of the snippet's own verb skeleton
//! ("wash the"), i.e. what an ideal commonsense prior prompted by the
//! previous sentence would say comes next.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::record::{DatasetSplit, LabelSpace, Limits, SnippetAnnotation, VideoRecord};
use super::vocab::{normalize, Vocabulary};
use crate::error::{Error, Result};
use crate::knowledge::SentenceEmbedder;

pub struct VerbSpec {
    pub phrase: &'static str,
    pub visual_class: usize,
    /// Scripted successor (index into the verb table).
    pub next: usize,
    pub relations: &'static [(&'static str, &'static str)],
}

pub struct ObjectSpec {
    pub name: &'static str,
    /// Index into [`Grammar::LOCATIONS`], used as the pseudo-label.
    pub location: usize,
    pub relations: &'static [(&'static str, &'static str)],
}

/// Template grammar shared by the generator and the toy knowledge providers.
pub struct Grammar {
    pub verbs: &'static [VerbSpec],
    pub objects: &'static [ObjectSpec],
}

const VERBS: &[VerbSpec] = &[
    VerbSpec { phrase: "pick up", visual_class: 0, next: 4, relations: &[("xNeed", "reach out"), ("xEffect", "holds it"), ("isBefore", "carry it")] },
    VerbSpec { phrase: "put down", visual_class: 0, next: 2, relations: &[("xNeed", "hold it"), ("xEffect", "frees hands"), ("isAfter", "carry it")] },
    VerbSpec { phrase: "walk to", visual_class: 1, next: 3, relations: &[("xNeed", "stand up"), ("xEffect", "gets coffee"), ("isAfter", "walk to kitchen")] },
    VerbSpec { phrase: "look at", visual_class: 1, next: 0, relations: &[("xIntent", "to inspect"), ("xEffect", "sees it")] },
    VerbSpec { phrase: "wash", visual_class: 2, next: 5, relations: &[("xNeed", "turn on water"), ("xEffect", "gets wet"), ("xWant", "dry it")] },
    VerbSpec { phrase: "dry", visual_class: 2, next: 1, relations: &[("xNeed", "a towel"), ("xEffect", "it is dry")] },
    VerbSpec { phrase: "heat", visual_class: 3, next: 7, relations: &[("xNeed", "a microwave"), ("xEffect", "it is warm"), ("Causes", "steam")] },
    VerbSpec { phrase: "cool", visual_class: 3, next: 1, relations: &[("xNeed", "a fridge"), ("xEffect", "it is cold")] },
];

const OBJECTS: &[ObjectSpec] = &[
    ObjectSpec { name: "mug", location: 0, relations: &[("AtLocation", "cabinet"), ("ObjectUse", "drink coffee")] },
    ObjectSpec { name: "apple", location: 0, relations: &[("AtLocation", "fruit bowl"), ("ObjectUse", "eat")] },
    ObjectSpec { name: "bread", location: 0, relations: &[("AtLocation", "counter"), ("ObjectUse", "make toast")] },
    ObjectSpec { name: "knife", location: 1, relations: &[("AtLocation", "drawer"), ("ObjectUse", "cut food")] },
    ObjectSpec { name: "bowl", location: 1, relations: &[("AtLocation", "cupboard"), ("ObjectUse", "hold soup")] },
    ObjectSpec { name: "potato", location: 2, relations: &[("AtLocation", "pantry"), ("ObjectUse", "cook")] },
    ObjectSpec { name: "egg", location: 2, relations: &[("AtLocation", "fridge"), ("ObjectUse", "bake")] },
    ObjectSpec { name: "cloth", location: 3, relations: &[("AtLocation", "sink"), ("ObjectUse", "wipe")] },
    ObjectSpec { name: "plate", location: 3, relations: &[("AtLocation", "shelf"), ("ObjectUse", "serve food")] },
    ObjectSpec { name: "coffee maker", location: 0, relations: &[("AtLocation", "kitchen"), ("ObjectUse", "brew coffee")] },
];

pub const VISUAL_CLASSES: usize = 4;

impl Grammar {
    pub const LOCATIONS: [&'static str; 4] = ["counter", "cabinet", "stove", "sink"];

    pub fn standard() -> Self {
        Grammar { verbs: VERBS, objects: OBJECTS }
    }

    pub fn sentence(&self, verb: usize, object: usize) -> String {
        format!("{} the {}", self.verbs[verb].phrase, self.objects[object].name)
    }

    /// Verb template with the object slot left open, e.g. `"wash the"`.
    pub fn skeleton(&self, verb: usize) -> String {
        format!("{} the", self.verbs[verb].phrase)
    }

    /// Sentence the script predicts after `sentence`, keeping its object.
    pub fn scripted_next(&self, sentence: &str) -> Option<String> {
        let (verb, object) = self.parse(sentence)?;
        Some(self.sentence(self.verbs[verb].next, object))
    }

    /// `(verb, object)` indices of a template sentence. The verb is the longest
    /// matching leading phrase; the object the longest known name after it.
    pub fn parse(&self, sentence: &str) -> Option<(usize, usize)> {
        let text = normalize(sentence);
        let verb = self
            .verbs
            .iter()
            .enumerate()
            .filter(|(_, v)| text == v.phrase || text.starts_with(&format!("{} ", v.phrase)))
            .max_by_key(|(_, v)| v.phrase.len())?
            .0;
        let rest = text[self.verbs[verb].phrase.len()..].trim_start();
        let rest = rest.strip_prefix("the ").unwrap_or(rest);
        let object = self
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| rest == o.name || rest.starts_with(&format!("{} ", o.name)))
            .max_by_key(|(_, o)| o.name.len())?
            .0;
        Some((verb, object))
    }

    pub fn all_sentences(&self) -> Vec<String> {
        (0..self.verbs.len())
            .flat_map(|v| (0..self.objects.len()).map(move |o| (v, o)))
            .map(|(v, o)| self.sentence(v, o))
            .collect()
    }

    pub fn terminals(&self) -> BTreeSet<String> {
        self.all_sentences()
            .iter()
            .flat_map(|s| s.split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .collect()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build(&self.all_sentences(), 1).expect("grammar corpus is non-empty")
    }

    pub fn labels(&self) -> LabelSpace {
        LabelSpace {
            actions: self.verbs.iter().map(|v| v.phrase.to_string()).collect(),
            objects: self.objects.iter().map(|o| o.name.to_string()).collect(),
            pseudo_labels: Self::LOCATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Offsets of the feature blocks.
pub mod layout {
    use super::{OBJECTS, VISUAL_CLASSES};

    pub const VISUAL: usize = 0;
    pub const OBJECT: usize = VISUAL + VISUAL_CLASSES;
    pub const PREV_VISUAL: usize = OBJECT + OBJECTS.len();
    pub const START_FLAG: usize = PREV_VISUAL + VISUAL_CLASSES;
    pub const PREV_OBJECT: usize = START_FLAG + 1;
    pub const MIN_FEATURE_DIM: usize = PREV_OBJECT + OBJECTS.len();
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_videos: usize,
    pub frames_per_snippet: usize,
    pub snippets_per_video: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Probability that the next verb follows the script.
    pub script_prob: f64,
    pub split: String,
    pub limits: Limits,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            num_videos: 8,
            frames_per_snippet: 4,
            snippets_per_video: 3,
            feature_dim: 32,
            noise_sigma: 0.1,
            script_prob: 0.5,
            split: "train".into(),
            limits: Limits::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_videos", self.num_videos),
            ("frames_per_snippet", self.frames_per_snippet),
            ("snippets_per_video", self.snippets_per_video),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        let frames = self.frames_per_snippet * self.snippets_per_video;
        if frames > self.limits.max_frames {
            return Err(Error::config(
                "frames_per_snippet",
                format!("{frames} frames per video exceeds max_frames {}", self.limits.max_frames),
            ));
        }
        if self.snippets_per_video > self.limits.max_snippets {
            return Err(Error::config(
                "snippets_per_video",
                format!("exceeds max_snippets {}", self.limits.max_snippets),
            ));
        }
        if self.snippets_per_video > VISUAL_CLASSES * OBJECTS.len() {
            return Err(Error::config("snippets_per_video", "more snippets than distinct scenes"));
        }
        if self.feature_dim < layout::MIN_FEATURE_DIM {
            return Err(Error::config(
                "feature_dim",
                format!("must be at least {}", layout::MIN_FEATURE_DIM),
            ));
        }
        if !(0.0..=1.0).contains(&self.script_prob) {
            return Err(Error::config("script_prob", "must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and non-negative"));
        }
        Ok(())
    }
}

fn one_hot(n: usize, k: usize) -> Vec<u8> {
    (0..n).map(|i| u8::from(i == k)).collect()
}

/// Generates a split; oracle knowledge vectors are attached to every snippet
/// after the first.
pub fn synth_generate(config: &SynthConfig, embedder: &SentenceEmbedder) -> Result<DatasetSplit> {
    config.validate()?;
    let grammar = Grammar::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let (n_verbs, n_objects) = (grammar.verbs.len(), grammar.objects.len());
    let frames = config.frames_per_snippet * config.snippets_per_video;
    let dim = config.feature_dim;

    let mut videos = Vec::with_capacity(config.num_videos);
    for v in 0..config.num_videos {
        let mut plan: Vec<(usize, usize)> = Vec::with_capacity(config.snippets_per_video);
        for k in 0..config.snippets_per_video {
            let mut attempt = 0;
            let choice = loop {
                let (verb, object) = match plan.last() {
                    Some(&(pv, po)) if attempt < 50 => {
                        let verb = if rng.random_bool(config.script_prob) {
                            grammar.verbs[pv].next
                        } else {
                            rng.random_range(0..n_verbs)
                        };
                        let object = if rng.random_bool(0.5) { po } else { rng.random_range(0..n_objects) };
                        (verb, object)
                    }
                    _ => (rng.random_range(0..n_verbs), rng.random_range(0..n_objects)),
                };
                let scene = (grammar.verbs[verb].visual_class, object);
                if !plan.iter().any(|&(pv, po)| (grammar.verbs[pv].visual_class, po) == scene) {
                    break (verb, object);
                }
                attempt += 1;
            };
            debug_assert!(k == plan.len());
            plan.push(choice);
        }

        let mut features = vec![0f32; frames * dim];
        let mut snippets = Vec::with_capacity(plan.len());
        for (k, &(verb, object)) in plan.iter().enumerate() {
            let start = k * config.frames_per_snippet;
            let end = start + config.frames_per_snippet;
            for t in start..end {
                let row = &mut features[t * dim..(t + 1) * dim];
                row[layout::VISUAL + grammar.verbs[verb].visual_class] = 1.0;
                row[layout::OBJECT + object] = 1.0;
                match k.checked_sub(1).map(|p| plan[p]) {
                    None => row[layout::START_FLAG] = 1.0,
                    Some((pv, po)) => {
                        row[layout::PREV_VISUAL + grammar.verbs[pv].visual_class] = 1.0;
                        row[layout::PREV_OBJECT + po] = 1.0;
                    }
                }
                for x in row.iter_mut() {
                    *x += noise.sample(&mut rng) as f32;
                }
            }
            let oracle = (k > 0).then(|| embedder.embed(&grammar.skeleton(verb)));
            snippets.push(SnippetAnnotation {
                start_frame: start,
                end_frame: end,
                caption: grammar.sentence(verb, object),
                action_labels: one_hot(n_verbs, verb),
                object_labels: one_hot(n_objects, object),
                pseudo_labels: one_hot(Grammar::LOCATIONS.len(), grammar.objects[object].location),
                explicit_knowledge: oracle.clone(),
                implicit_knowledge: oracle,
            });
        }
        videos.push(VideoRecord {
            id: format!("{}-{v:04}", config.split),
            num_frames: frames,
            feature_dim: dim,
            features,
            snippets,
        });
    }

    let split = DatasetSplit {
        dataset: "synthetic".into(),
        split: config.split.clone(),
        feature_dim: dim,
        labels: grammar.labels(),
        vocab: grammar.vocabulary(),
        videos,
    };
    split.validate(&config.limits)?;
    Ok(split)
}

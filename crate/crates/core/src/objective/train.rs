use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{candidate_sets, loss_total, lr_schedule, Checkpoint, LossBreakdown, TrainConfig};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeContext, Providers, StoredVectors};
use crate::model::{Model, ModelConfig, SnippetInputs};
use crate::numerics::{adam_step, AdamState, Gradients, Graph, ParamStore, Real};

/// Teacher-forced training targets for one snippet.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSnippet {
    /// Context computed from the ground-truth previous caption.
    pub context: KnowledgeContext,
    /// Ground-truth frame mask as 0.0/1.0.
    pub mask: Vec<f32>,
    pub actobj: Vec<f32>,
    /// `[BOS, ..., EOS]`.
    pub tokens: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedVideo {
    pub id: String,
    pub features: Vec<f32>,
    pub num_frames: usize,
    pub snippets: Vec<PreparedSnippet>,
}

/// A split with every knowledge context precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub videos: Vec<PreparedVideo>,
}

/// Checks that a split fits a model configuration.
pub fn check_compatible(split: &DatasetSplit, config: &ModelConfig) -> Result<()> {
    if split.feature_dim != config.feature_dim {
        return Err(Error::config(
            "feature_dim",
            format!("dataset has {}, model expects {}", split.feature_dim, config.feature_dim),
        ));
    }
    if split.labels.width() != config.actobj_dim {
        return Err(Error::config(
            "actobj_dim",
            format!(
                "model expects {}, dataset label space has {} + {} + {}",
                config.actobj_dim,
                split.labels.actions.len(),
                split.labels.objects.len(),
                split.labels.pseudo_labels.len()
            ),
        ));
    }
    if split.vocab.len() > config.vocab_size {
        return Err(Error::config(
            "vocab_size",
            format!("dataset vocabulary has {} entries, model has {}", split.vocab.len(), config.vocab_size),
        ));
    }
    if let Some(v) = split.videos.iter().find(|v| v.num_frames > config.max_frames) {
        return Err(Error::video(&v.id, format!("{} frames exceeds max_frames {}", v.num_frames, config.max_frames)));
    }
    if let Some(v) = split.videos.iter().find(|v| v.snippets.len() > config.max_snippets) {
        return Err(Error::video(&v.id, format!("more than max_snippets {} snippets", config.max_snippets)));
    }
    Ok(())
}

impl TrainingSet {
    pub fn prepare(split: &DatasetSplit, providers: &Providers, config: &ModelConfig) -> Result<Self> {
        check_compatible(split, config)?;
        let mut videos = Vec::with_capacity(split.videos.len());
        for v in &split.videos {
            let mut snippets = Vec::with_capacity(v.snippets.len());
            for (k, s) in v.snippets.iter().enumerate() {
                let prev = k.checked_sub(1).map(|p| v.snippets[p].caption.as_str());
                let stored = StoredVectors {
                    explicit: s.explicit_knowledge.as_deref(),
                    implicit: s.implicit_knowledge.as_deref(),
                };
                let context = providers
                    .context_for_step(prev, stored)
                    .map_err(|e| Error::video(&v.id, format!("snippet {k}: {e}")))?;
                let mut tokens = split.vocab.encode(&s.caption);
                tokens.truncate(config.max_sentence_len + 1);
                if tokens.last() != Some(&crate::data::EOS) {
                    tokens.push(crate::data::EOS);
                }
                let candidates = candidate_sets(&tokens[1..]);
                snippets.push(PreparedSnippet {
                    context,
                    mask: s.frame_mask(v.num_frames).iter().map(|&b| f32::from(b)).collect(),
                    actobj: s.actobj_target().iter().map(|&b| f32::from(b)).collect(),
                    tokens,
                    candidates,
                });
            }
            videos.push(PreparedVideo {
                id: v.id.clone(),
                features: v.features.clone(),
                num_frames: v.num_frames,
                snippets,
            });
        }
        if videos.is_empty() {
            return Err(Error::invalid("training split has no videos"));
        }
        Ok(TrainingSet { videos })
    }

    pub fn num_snippets(&self) -> usize {
        self.videos.iter().map(|v| v.snippets.len()).sum()
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b)
}

/// Loss of a batch and, on request, its gradients.
#[derive(Clone, Debug)]
pub struct BatchLoss<F> {
    pub breakdown: LossBreakdown,
    pub grads: Option<Gradients<F>>,
    /// Unlikelihood candidate probabilities that hit the clamp.
    pub clamped: usize,
}

/// Mean over the batch's snippets of the weighted objective, evaluated
/// against `params` (which must share `model`'s layout). With
/// `dropout_seed`, dropout is active and each snippet draws its masks from a
/// seed derived from it.
pub fn batch_loss<F: Real>(
    model: &Model<F>,
    params: &ParamStore<F>,
    videos: &[&PreparedVideo],
    config: &TrainConfig,
    dropout_seed: Option<u64>,
    want_grad: bool,
) -> Result<BatchLoss<F>> {
    let n: usize = videos.iter().map(|v| v.snippets.len()).sum();
    if n == 0 {
        return Err(Error::invalid("batch has no snippets"));
    }
    let lambdas = config.lambdas();
    let weight = |l: f64| F::from_f64_lossy(l / n as f64);
    let mut parts = [0f64; 3];
    let mut grads: Option<Gradients<F>> = None;
    let mut clamped = 0;
    let mut ordinal = 0u64;
    for video in videos {
        for s in &video.snippets {
            let mut g = match dropout_seed {
                Some(seed) => Graph::training(params, model.config().dropout, derive_seed(seed, ordinal, 0)),
                None => Graph::new(params),
            };
            ordinal += 1;
            let inputs = SnippetInputs {
                features: &video.features,
                num_frames: video.num_frames,
                context: &s.context,
                mask_override: None,
            };
            let sg = model.encode_snippet(&mut g, &inputs, config.detach_actobj_input)?;
            let mask: Vec<F> = s.mask.iter().map(|&v| F::from_f32(v).unwrap()).collect();
            let target: Vec<F> = s.actobj.iter().map(|&v| F::from_f32(v).unwrap()).collect();
            let sel = g.bce_with_logits(sg.selector_logits, &mask)?;
            let act = g.bce_with_logits(sg.actobj_logits, &target)?;
            let logits = model.teacher_forced_logits(&mut g, &s.tokens, sg.encoded)?;
            let sen = g.sentence_loss(
                logits,
                &s.tokens[1..],
                &s.candidates,
                F::from_f64_lossy(config.label_smoothing),
            )?;
            clamped += g.clamped_count();
            for (acc, v) in parts.iter_mut().zip([sel, act, sen]) {
                *acc += g.scalar(v).to_f64_lossy();
            }
            if want_grad {
                let a = g.scale(sel, weight(lambdas[0]))?;
                let b = g.scale(act, weight(lambdas[1]))?;
                let c = g.scale(sen, weight(lambdas[2]))?;
                let ab = g.add(a, b)?;
                let total = g.add(ab, c)?;
                let snippet_grads = g.backward(total)?;
                match grads.as_mut() {
                    Some(acc) => acc.add_assign(&snippet_grads),
                    None => grads = Some(snippet_grads),
                }
            }
        }
    }
    let parts = parts.map(|p| p / n as f64);
    Ok(BatchLoss {
        breakdown: loss_total(parts, lambdas),
        grads,
        clamped,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Owns the parameters and optimizer state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&model.params);
        Ok(Trainer { model, adam, config, step: 0 })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train_config.validate()?;
        let model = Model::from_params(ckpt.model_config, ckpt.params)?;
        if ckpt.adam.first_moment.len() != model.params.len() {
            return Err(Error::invalid("optimizer state does not match the parameters"));
        }
        Ok(Trainer {
            model,
            adam: ckpt.adam,
            config: ckpt.train_config,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            step: self.step,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Optimizer steps completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Video indices of the batch for (1-based) `step`: videos are reshuffled
    /// every epoch from a generator seeded by the run seed and epoch.
    pub fn batch_indices(&self, step: u64, num_videos: usize) -> Vec<usize> {
        let b = self.config.batch_size.min(num_videos).max(1);
        let per_epoch = num_videos.div_ceil(b) as u64;
        let epoch = (step - 1) / per_epoch;
        let pos = ((step - 1) % per_epoch) as usize;
        let mut order: Vec<usize> = (0..num_videos).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, epoch, 1)));
        order[pos * b..((pos + 1) * b).min(num_videos)].to_vec()
    }

    /// One optimizer step on the next batch. A non-finite loss or gradient
    /// aborts the step with the parameters untouched.
    pub fn train_step(&mut self, data: &TrainingSet) -> Result<StepRecord> {
        let step = self.step + 1;
        let batch: Vec<&PreparedVideo> = self
            .batch_indices(step, data.videos.len())
            .into_iter()
            .map(|i| &data.videos[i])
            .collect();
        self.step_on(step, &batch)
    }

    fn step_on(&mut self, step: u64, batch: &[&PreparedVideo]) -> Result<StepRecord> {
        let lr = lr_schedule(step, self.config.warmup_steps, self.model.config().d_model, self.config.lr_scale)?;
        let dropout_seed = derive_seed(self.config.seed, step, 2);
        let out = batch_loss(&self.model, &self.model.params, batch, &self.config, Some(dropout_seed), true)
            .inspect_err(|e| log::warn!("step {step} aborted: {e}"))?;
        let mut grads = out.grads.expect("gradients requested");
        if !out.breakdown.is_finite() || !grads.all_finite() {
            log::warn!("step {step} aborted: non-finite loss {:?}", out.breakdown);
            return Err(Error::NonFinite("training loss"));
        }
        if out.clamped > 0 {
            log::debug!("step {step}: {} unlikelihood probabilities clamped", out.clamped);
        }
        let norm = f64::from(grads.global_norm());
        if norm > self.config.grad_clip {
            grads.scale((self.config.grad_clip / norm) as f32);
        }
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr)?;
        self.step = step;
        Ok(StepRecord {
            step,
            lr,
            loss: out.breakdown,
            grad_norm: norm,
        })
    }

    /// Runs until `max_steps`, calling `on_step` after every step.
    pub fn run(
        &mut self,
        data: &TrainingSet,
        mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while self.step < self.config.max_steps {
            let rec = self.train_step(data)?;
            on_step(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}

impl TrainingSet {
    /// Random batch shaped for `config`: contiguous ground-truth segments,
    /// sparse action-object targets, random sentences and, after the first
    /// snippet, random contexts. Used for gradient checks.
    pub fn random(config: &ModelConfig, videos: usize, frames: usize, snippets: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per = (frames / snippets.max(1)).max(1);
        let videos = (0..videos)
            .map(|v| {
                let features = (0..frames * config.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let snippets = (0..snippets)
                    .map(|k| {
                        let mut context = KnowledgeContext::zeros();
                        if k > 0 {
                            for x in context.m.iter_mut().chain(&mut context.g).chain(&mut context.h) {
                                *x = rng.random_range(-0.1..0.1);
                            }
                        }
                        let len = rng.random_range(2..5);
                        let mut tokens = vec![crate::data::BOS];
                        tokens.extend((0..len).map(|_| rng.random_range(crate::data::PAD + 1..config.vocab_size)));
                        tokens.push(crate::data::EOS);
                        let candidates = candidate_sets(&tokens[1..]);
                        PreparedSnippet {
                            context,
                            mask: (0..frames).map(|t| f32::from(u8::from(t / per == k))).collect(),
                            actobj: (0..config.actobj_dim).map(|_| f32::from(u8::from(rng.random_bool(0.3)))).collect(),
                            tokens,
                            candidates,
                        }
                    })
                    .collect();
                PreparedVideo { id: format!("random-{v}"), features, num_frames: frames, snippets }
            })
            .collect();
        TrainingSet { videos }
    }
}

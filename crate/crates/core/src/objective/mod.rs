//! Training objectives, learning-rate schedule, training loop and checkpoints.

mod checkpoint;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sentence_terms, SentenceTerms};

pub use checkpoint::{Checkpoint, CHECKPOINT_FILE};
pub use train::{batch_loss, check_compatible, BatchLoss, PreparedSnippet, PreparedVideo, StepRecord, Trainer, TrainingSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_snippet: f64,
    pub lambda_actobj: f64,
    pub lambda_sentence: f64,
    pub warmup_steps: u64,
    /// Multiplier on the inverse-square-root schedule.
    pub lr_scale: f64,
    /// Videos per optimizer step.
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Feed `a_i` to the encoder without a gradient path.
    pub detach_actobj_input: bool,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Steps between held-out evaluations; 0 disables them.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_snippet: 10.0,
            lambda_actobj: 10.0,
            lambda_sentence: 1.0,
            warmup_steps: 2000,
            lr_scale: 1.0,
            batch_size: 4,
            label_smoothing: 0.1,
            max_steps: 2000,
            seed: 0,
            grad_clip: 1.0,
            detach_actobj_input: false,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lambda_snippet", self.lambda_snippet),
            ("lambda_actobj", self.lambda_actobj),
            ("lambda_sentence", self.lambda_sentence),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup_steps", "must be at least 1"));
        }
        if !(self.lr_scale >= 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::config("lr_scale", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", "must lie in [0, 1)"));
        }
        if !(self.grad_clip > 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::config("grad_clip", "must be finite and positive"));
        }
        Ok(())
    }

    pub fn lambdas(&self) -> [f64; 3] {
        [self.lambda_snippet, self.lambda_actobj, self.lambda_sentence]
    }
}

/// The three loss parts and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub snippet: f64,
    pub actobj: f64,
    pub sentence: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.snippet, self.actobj, self.sentence, self.total].iter().all(|v| v.is_finite())
    }
}

/// `λ_c·snippet + λ_a·actobj + λ_s·sentence`.
pub fn loss_total(parts: [f64; 3], lambdas: [f64; 3]) -> LossBreakdown {
    let [snippet, actobj, sentence] = parts;
    LossBreakdown {
        snippet,
        actobj,
        sentence,
        total: lambdas[0] * snippet + lambdas[1] * actobj + lambdas[2] * sentence,
    }
}

fn require_binary(target: &[u8]) -> Result<()> {
    if target.iter().any(|&b| b > 1) {
        return Err(Error::invalid("ground-truth labels must be 0 or 1"));
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities against 0/1 labels.
fn mean_bce(pred: &[f64], target: &[u8]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "binary cross-entropy",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    require_binary(target)?;
    if pred.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::invalid("predicted probabilities must lie in (0, 1)"));
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Frame-averaged cross-entropy between selector probabilities and the ground-truth mask.
pub fn loss_snippet(selection: &[f64], gt_mask: &[u8]) -> Result<f64> {
    mean_bce(selection, gt_mask)
}

/// Class-averaged cross-entropy between action-object probabilities and the target.
pub fn loss_actobj(actobj: &[f64], target: &[u8]) -> Result<f64> {
    mean_bce(actobj, target)
}

/// Unlikelihood candidates per position: distinct earlier targets of the
/// sentence, minus the current gold token.
pub fn candidate_sets(targets: &[usize]) -> Vec<Vec<usize>> {
    (0..targets.len())
        .map(|j| {
            let mut c: Vec<usize> = targets[..j].iter().copied().filter(|&t| t != targets[j]).collect();
            c.sort_unstable();
            c.dedup();
            c
        })
        .collect()
}

/// Sentence objective from per-position probability distributions: the
/// label-smoothed negative log-likelihood averaged over positions plus the
/// unlikelihood penalty over [`candidate_sets`].
pub fn loss_sentence(distributions: &[Vec<f64>], targets: &[usize], smoothing: f64) -> Result<SentenceTerms> {
    if distributions.len() != targets.len() || targets.is_empty() {
        return Err(Error::Shape {
            op: "loss_sentence",
            lhs: vec![distributions.len()],
            rhs: vec![targets.len()],
        });
    }
    let vocab = distributions[0].len();
    if distributions.iter().any(|d| d.len() != vocab) || targets.iter().any(|&t| t >= vocab) {
        return Err(Error::invalid("distributions and targets disagree on the vocabulary"));
    }
    let log_probs: Vec<f64> = distributions.iter().flatten().map(|p| p.ln()).collect();
    Ok(sentence_terms(&log_probs, vocab, targets, &candidate_sets(targets), smoothing))
}

/// `scale · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_schedule(step: u64, warmup: u64, d_model: usize, scale: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::invalid("learning-rate schedule starts at step 1"));
    }
    if warmup == 0 {
        return Err(Error::invalid("warmup must be at least 1 step"));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[cfg(test)]
mod tests;

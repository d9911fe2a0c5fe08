//! Caption metrics (corpus BLEU, CIDEr, METEOR-lite) and head accuracies.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{normalize_tokens, DatasetSplit};
use crate::error::{Error, Result};
use crate::generation::GenerationDocs;

#[cfg(test)]
mod tests;

pub const METEOR_NOTE: &str =
    "meteor_lite uses exact unigram matches only and is not comparable to published METEOR scores";

type Ngrams<'a> = HashMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Ngrams<'_> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_corpus(candidates: usize, references: &[Vec<Vec<String>>]) -> Result<()> {
    if candidates == 0 {
        return Err(Error::invalid("empty candidate corpus"));
    }
    if candidates != references.len() {
        return Err(Error::invalid(format!(
            "{candidates} candidates but {} reference sets",
            references.len()
        )));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::invalid("every candidate needs at least one reference"));
    }
    Ok(())
}

/// Corpus BLEU with orders `1..=n`: clipped n-gram precisions pooled over the
/// corpus, geometric mean, brevity penalty against the closest reference
/// length (shorter on ties). Unsmoothed, so any zero precision gives 0.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    Ok(bleu_orders(candidates, references, n)?[n - 1])
}

/// BLEU@1 through BLEU@n in one pass.
pub fn bleu_orders(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n: usize) -> Result<Vec<f64>> {
    if !(1..=4).contains(&n) {
        return Err(Error::invalid(format!("BLEU order {n} outside 1..=4")));
    }
    check_corpus(candidates.len(), references)?;
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c += cand.len();
        r += refs
            .iter()
            .map(|x| x.len())
            .min_by_key(|&len| (len.abs_diff(cand.len()), len))
            .unwrap_or(0);
        for k in 1..=n {
            let counts = ngrams(cand, k);
            let ref_counts: Vec<Ngrams<'_>> = refs.iter().map(|x| ngrams(x, k)).collect();
            for (g, &count) in &counts {
                let max_ref = ref_counts.iter().map(|m| m.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                matched[k - 1] += count.min(max_ref);
            }
            total[k - 1] += cand.len().saturating_sub(k - 1);
        }
    }
    let bp = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for k in 0..n {
        if matched[k] == 0 {
            zero = true;
        } else {
            log_sum += (matched[k] as f64 / total[k] as f64).ln();
        }
        out.push(if zero { 0.0 } else { bp * (log_sum / (k + 1) as f64).exp() });
    }
    Ok(out)
}

fn tfidf<'a>(counts: &Ngrams<'a>, df: &HashMap<&'a [String], usize>, log_n: f64) -> HashMap<&'a [String], f64> {
    counts
        .iter()
        .map(|(g, &c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (*g, c as f64 * (log_n - d.ln()))
        })
        .collect()
}

fn cosine(a: &HashMap<&[String], f64>, b: &HashMap<&[String], f64>) -> f64 {
    let dot: f64 = a.iter().map(|(g, x)| x * b.get(g).copied().unwrap_or(0.0)).sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr: per order `1..=4`, TF-IDF vectors with `idf = ln(N / df)` where
/// `df` counts items whose references contain the n-gram (floored at 1),
/// cosine against each reference averaged over references; mean over orders
/// and items, times 10.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    check_corpus(candidates.len(), references)?;
    if candidates.len() < 2 {
        return Err(Error::invalid(
            "CIDEr needs at least two items: document frequencies are undefined for one",
        ));
    }
    let log_n = (candidates.len() as f64).ln();
    let mut score = 0.0;
    for n in 1..=4 {
        let ref_counts: Vec<Vec<Ngrams<'_>>> =
            references.iter().map(|refs| refs.iter().map(|r| ngrams(r, n)).collect()).collect();
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for item in &ref_counts {
            let mut seen: Vec<&[String]> = item.iter().flat_map(|m| m.keys().copied()).collect();
            seen.sort_unstable();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (cand, refs) in candidates.iter().zip(&ref_counts) {
            let cv = tfidf(&ngrams(cand, n), &df, log_n);
            let sum: f64 = refs.iter().map(|r| cosine(&cv, &tfidf(r, &df, log_n))).sum();
            score += sum / refs.len() as f64;
        }
    }
    Ok(10.0 * score / (4.0 * candidates.len() as f64))
}

/// Exact-match METEOR variant. Candidate tokens are aligned left to right to
/// the first unused identical reference token; `chunks` counts maximal runs
/// that are adjacent in both sentences.
pub fn meteor_lite(candidate: &[String], reference: &[String]) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut aligned: Vec<usize> = Vec::new();
    let mut prev: Option<(usize, usize)> = None;
    let mut chunks = 0usize;
    for (i, tok) in candidate.iter().enumerate() {
        let Some(j) = (0..reference.len()).find(|&j| !used[j] && &reference[j] == tok) else {
            continue;
        };
        used[j] = true;
        if prev != Some((i.wrapping_sub(1), j.wrapping_sub(1))) {
            chunks += 1;
        }
        prev = Some((i, j));
        aligned.push(j);
    }
    let m = aligned.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let f = p * r / (0.9 * p + 0.1 * r);
    f * (1.0 - 0.5 * (chunks as f64 / m).powi(3))
}

/// Mean over items of the best METEOR-lite score against any reference.
pub fn meteor_lite_corpus(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    check_corpus(candidates.len(), references)?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| refs.iter().map(|r| meteor_lite(c, r)).fold(0.0, f64::max))
        .sum();
    Ok(sum / candidates.len() as f64)
}

fn binary_accuracy(pred: &[Vec<u8>], gt: &[Vec<u8>], what: &str) -> Result<f64> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::invalid(format!("{what}: predictions and ground truth differ in shape")));
    }
    let total: usize = gt.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::invalid(format!("{what}: nothing to score")));
    }
    let agree: usize = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| p.iter().zip(g).filter(|(a, b)| a == b).count())
        .sum();
    Ok(agree as f64 / total as f64)
}

/// Fraction of frames whose thresholded prediction equals the ground truth.
pub fn snippet_accuracy(pred: &[Vec<u8>], gt: &[Vec<u8>]) -> Result<f64> {
    binary_accuracy(pred, gt, "snippet accuracy")
}

/// Element-wise accuracy over the action-object grid.
pub fn actobj_accuracy(pred: &[Vec<u8>], gt: &[Vec<u8>]) -> Result<f64> {
    binary_accuracy(pred, gt, "action-object accuracy")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor_lite: f64,
    pub cider: f64,
    pub snippet_acc: f64,
    pub actobj_acc: f64,
    pub videos: usize,
    pub snippets: usize,
    pub note: String,
}

/// Scores generated documents against a split. Captions are compared per
/// video as paragraphs. For the accuracies, ground-truth snippet `k` is paired
/// with generated snippet `k`; a missing prediction scores as all zeros.
pub fn evaluate(docs: &GenerationDocs, split: &DatasetSplit) -> Result<EvalReport> {
    if docs.videos.is_empty() {
        return Err(Error::invalid("no generated videos to evaluate"));
    }
    let mut candidates = Vec::with_capacity(docs.videos.len());
    let mut references = Vec::with_capacity(docs.videos.len());
    let (mut pm, mut gm, mut pa, mut ga) = (vec![], vec![], vec![], vec![]);
    for doc in &docs.videos {
        let video = split
            .video(&doc.id)
            .ok_or_else(|| Error::invalid(format!("generated video {:?} is not in the dataset", doc.id)))?;
        candidates.push(normalize_tokens(&doc.paragraph()));
        let gt_paragraph: Vec<&str> = video.snippets.iter().map(|s| s.caption.as_str()).collect();
        references.push(vec![normalize_tokens(&gt_paragraph.join(" "))]);
        for (k, s) in video.snippets.iter().enumerate() {
            let gt_mask = s.frame_mask(video.num_frames);
            let gt_act = s.actobj_target();
            let pred = doc.snippets.get(k);
            pm.push(pred.map_or_else(|| vec![0; gt_mask.len()], |p| p.mask.clone()));
            pa.push(pred.map_or_else(|| vec![0; gt_act.len()], |p| p.actobj.clone()));
            gm.push(gt_mask);
            ga.push(gt_act);
        }
    }
    let b = bleu_orders(&candidates, &references, 4)?;
    let cider = if candidates.len() >= 2 {
        cider(&candidates, &references)?
    } else {
        log::warn!("CIDEr reported as 0: a single video has no document frequencies");
        0.0
    };
    Ok(EvalReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        meteor_lite: meteor_lite_corpus(&candidates, &references)?,
        cider,
        snippet_acc: snippet_accuracy(&pm, &gm)?,
        actobj_acc: actobj_accuracy(&pa, &ga)?,
        videos: docs.videos.len(),
        snippets: gm.len(),
        note: METEOR_NOTE.into(),
    })
}

/// Ablation table: one row per setting with BLEU@4 and METEOR-lite scaled by
/// 100 and CIDEr by 10, so a perfect score reads 100 in every column.
pub fn ablation_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(7).max(7);
    let mut out = format!("| {:<width$} |    B@4 |      M |      C |\n", "Setting");
    out.push_str(&format!("|{}|--------|--------|--------|\n", "-".repeat(width + 2)));
    for (name, r) in rows {
        out.push_str(&format!(
            "| {:<width$} | {:>6.2} | {:>6.2} | {:>6.2} |\n",
            name,
            100.0 * r.bleu4,
            100.0 * r.meteor_lite,
            10.0 * r.cider
        ));
    }
    out
}

//! Command-line entry point: `synth | train | generate | eval | gradcheck`.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure, 3 a check that ran but did not pass.

mod config;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{
    DataSection, GenerationSection, HiddenKind, KnowledgeSection, ModelSection, Preset, RunConfig, SourceKind,
    SynthSection, EFFECTIVE_CONFIG,
};

use crate::data::{load_manifest, save_manifest, synth_generate, DatasetSplit, Limits, Vocabulary, MANIFEST_FILE, VOCAB_FILE};
use crate::error::{Error, Result};
use crate::generation::{generate_paragraph, GenerationDocs, Mode, VideoDoc};
use crate::metrics::{ablation_table, evaluate, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::numerics::{grad_check, set_backward_fault, GradCheckOptions, ParamStore};
use crate::objective::{batch_loss, Checkpoint, Trainer, TrainingSet};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EVAL_LOG: &str = "eval_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint";
pub const GENERATIONS_FILE: &str = "generations.json";
pub const EVAL_REPORT: &str = "eval_report.json";

#[derive(Debug, Parser)]
#[command(name = "instructcap", version, about = "Commonsense-conditioned multi-sentence video captioning")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace the outputs of a previous run in the output directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset split.
    Synth(SynthArgs),
    /// Train a model and write checkpoints and logs.
    Train(TrainArgs),
    /// Caption videos with a trained checkpoint.
    Generate(GenerateArgs),
    /// Score generated captions against a dataset.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub snippets: Option<usize>,
    #[arg(long)]
    pub frames_per_snippet: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum KnowledgeChoice {
    Null,
    Toy,
    Precomputed,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training split directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out split for periodic evaluation.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub lr_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_snippet: Option<f64>,
    #[arg(long)]
    pub lambda_actobj: Option<f64>,
    #[arg(long)]
    pub lambda_sentence: Option<f64>,
    /// Source of both explicit and implicit knowledge.
    #[arg(long, value_enum)]
    pub knowledge: Option<KnowledgeChoice>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetChoice>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Feed action-object predictions to the encoder without a gradient path.
    #[arg(long)]
    pub detach_actobj: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PresetChoice {
    Full,
    Desk,
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeChoice {
    Free,
    GtProposals,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Checkpoint directory; defaults to `<out>/checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Split to caption; defaults to `data.eval`, then `data.train`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Restrict to these video ids (repeatable).
    #[arg(long = "video")]
    pub videos: Vec<String>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeChoice>,
    #[arg(long, value_enum)]
    pub knowledge: Option<KnowledgeChoice>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Reference split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generation documents; several produce an ablation table.
    #[arg(long = "docs", required = true)]
    pub docs: Vec<PathBuf>,
    /// Row names for the ablation table, one per `--docs`.
    #[arg(long = "name")]
    pub names: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates probed per parameter block; 0 probes all of them.
    #[arg(long, default_value_t = 64)]
    pub max_entries: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Dropout rate of the checked model; any positive rate is rejected.
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Corrupt one backward rule (negative control).
    #[arg(long, hide = true)]
    pub fault: bool,
}

/// Result of a command that completed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::CheckFailed => 3,
        }
    }
}

pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(o) => o.exit_code(),
        Err(e) if e.is_validation() => 1,
        Err(_) => 2,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = Some(out.clone());
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(cfg, &a, cli.force),
        Command::Train(a) => cmd_train(cfg, &a, cli.force),
        Command::Generate(a) => cmd_generate(cfg, &a),
        Command::Eval(a) => cmd_eval(cfg, &a),
        Command::Gradcheck(a) => cmd_gradcheck(cfg, &a),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.out_dir.clone().ok_or_else(|| Error::config("out_dir", "no output directory (use --out)"))
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Makes `dir` ready for fresh outputs. With `force`, a directory holding a
/// previous run (recognized by `marker`) is cleared; anything else is refused.
fn prepare_out_dir(dir: &Path, force: bool, marker: &str) -> Result<()> {
    if is_nonempty_dir(dir) {
        if !force {
            return Err(Error::invalid(format!(
                "output directory {} is not empty (use --force to replace a previous run)",
                dir.display()
            )));
        }
        if !dir.join(marker).exists() && !dir.join(EFFECTIVE_CONFIG).exists() {
            return Err(Error::invalid(format!(
                "refusing to clear {}: it does not look like an instructcap output directory",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn load_split(path: &Path, model: Option<&ModelConfig>) -> Result<DatasetSplit> {
    let limits = model.map_or_else(Limits::default, |m| Limits { max_frames: m.max_frames, max_snippets: m.max_snippets });
    load_manifest(path, &limits)
}

// ---- synth ------------------------------------------------------------------

fn cmd_synth(mut cfg: RunConfig, a: &SynthArgs, force: bool) -> Result<Outcome> {
    let s = &mut cfg.synth;
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.videos {
        s.num_videos = v;
    }
    if let Some(v) = a.snippets {
        s.snippets_per_video = v;
    }
    if let Some(v) = a.frames_per_snippet {
        s.frames_per_snippet = v;
    }
    if let Some(v) = a.feature_dim {
        s.feature_dim = v;
    }
    if let Some(v) = &a.split {
        s.split = v.clone();
    }
    cfg.validate()?;
    let dir = out_dir(&cfg)?;
    let providers = cfg.knowledge.providers()?;
    let split = synth_generate(&cfg.synth.to_config(), &providers.embedder)?;
    prepare_out_dir(&dir, force, MANIFEST_FILE)?;
    save_manifest(&split, &dir)?;
    cfg.write_effective(&dir)?;
    println!(
        "synth: {} videos, {} snippets, vocabulary {}, label width {}, feature_dim {} -> {}",
        split.videos.len(),
        split.num_snippets(),
        split.vocab.len(),
        split.labels.width(),
        split.feature_dim,
        dir.display()
    );
    Ok(Outcome::Success)
}

// ---- train --------------------------------------------------------------------

fn apply_knowledge(k: &mut KnowledgeSection, choice: Option<KnowledgeChoice>) {
    if let Some(c) = choice {
        let kind = match c {
            KnowledgeChoice::Null => SourceKind::Null,
            KnowledgeChoice::Toy => SourceKind::Toy,
            KnowledgeChoice::Precomputed => SourceKind::Precomputed,
        };
        k.explicit = kind;
        k.implicit = kind;
    }
}

fn append_json_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let line = serde_json::to_string(value).map_err(|e| Error::format(path, e))?;
    writeln!(f, "{line}").map_err(io_err(path))
}

fn save_checkpoint(trainer: &Trainer, vocab: &Vocabulary, dir: &Path) -> Result<()> {
    trainer.checkpoint().save(dir)?;
    vocab.save(&dir.join(VOCAB_FILE))
}

/// Captions every video of `split` and scores the result.
pub fn generate_and_evaluate(
    model: &Model<f32>,
    split: &DatasetSplit,
    vocab: &Vocabulary,
    providers: &crate::knowledge::Providers,
    generation: &GenerationSection,
) -> Result<(GenerationDocs, EvalReport)> {
    let options = generation.options();
    let mut videos = Vec::with_capacity(split.videos.len());
    for v in &split.videos {
        let out = generate_paragraph(model, v, vocab, providers, generation.mode, &options)?;
        videos.push(VideoDoc::from_output(&v.id, &out, vocab, &split.labels, &options));
    }
    let docs = GenerationDocs { mode: generation.mode, videos };
    let report = evaluate(&docs, split)?;
    Ok((docs, report))
}

#[derive(Serialize)]
struct EvalLine<'a> {
    step: u64,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn cmd_train(mut cfg: RunConfig, a: &TrainArgs, force: bool) -> Result<Outcome> {
    let t = &mut cfg.train;
    macro_rules! over {
        ($($flag:ident => $field:ident),*) => { $( if let Some(v) = a.$flag { t.$field = v; } )* };
    }
    over!(steps => max_steps, batch_size => batch_size, warmup => warmup_steps, lr_scale => lr_scale, seed => seed);
    over!(lambda_snippet => lambda_snippet, lambda_actobj => lambda_actobj, lambda_sentence => lambda_sentence);
    if a.detach_actobj {
        t.detach_actobj_input = true;
    }
    if let Some(d) = &a.data {
        cfg.data.train = Some(d.clone());
    }
    if let Some(d) = &a.eval_data {
        cfg.data.eval = Some(d.clone());
    }
    if let Some(p) = a.preset {
        cfg.model.preset = match p {
            PresetChoice::Full => Preset::Full,
            PresetChoice::Desk => Preset::Desk,
            PresetChoice::Tiny => Preset::Tiny,
        };
    }
    apply_knowledge(&mut cfg.knowledge, a.knowledge);
    cfg.validate()?;
    let dir = out_dir(&cfg)?;
    let train_path = cfg.data.train.clone().ok_or_else(|| Error::config("data.train", "no training split (use --data)"))?;
    let providers = cfg.knowledge.providers()?;

    let (mut trainer, split) = match &a.resume {
        Some(ckpt_dir) => {
            let ckpt = Checkpoint::load(ckpt_dir)?;
            let split = load_split(&train_path, Some(&ckpt.model_config))?;
            crate::objective::check_compatible(&split, &ckpt.model_config)?;
            let mut trainer = Trainer::from_checkpoint(ckpt)?;
            trainer.config.max_steps = cfg.train.max_steps;
            cfg.train = trainer.config.clone();
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            (trainer, split)
        }
        None => {
            let split = load_split(&train_path, None)?;
            let model_cfg = cfg.model.resolve(&split)?;
            prepare_out_dir(&dir, force, TRAIN_LOG)?;
            let seed = cfg.model.init_seed.unwrap_or(cfg.train.seed);
            (Trainer::new(Model::new(model_cfg, seed)?, cfg.train.clone())?, split)
        }
    };
    let eval_split = match &cfg.data.eval {
        Some(p) if cfg.train.eval_every > 0 => Some(load_split(p, Some(trainer.model.config()))?),
        _ => None,
    };
    cfg.write_effective(&dir)?;
    let data = TrainingSet::prepare(&split, &providers, trainer.model.config())?;
    let log_path = dir.join(TRAIN_LOG);
    let eval_path = dir.join(EVAL_LOG);
    let start = Instant::now();
    let checkpoint_every = cfg.train.checkpoint_every;
    let eval_every = cfg.train.eval_every;
    let (mut first, mut last) = (None, None);
    trainer.run(&data, |tr, rec| {
        append_json_line(&log_path, rec)?;
        first.get_or_insert(rec.loss.total);
        last = Some(rec.loss.total);
        if rec.step % 100 == 0 {
            log::info!(
                "step {} lr {:.3e} loss {:.4} ({:.1}s)",
                rec.step,
                rec.lr,
                rec.loss.total,
                start.elapsed().as_secs_f64()
            );
        }
        if checkpoint_every > 0 && rec.step % checkpoint_every == 0 {
            save_checkpoint(tr, &split.vocab, &dir.join("checkpoints").join(format!("step-{:06}", rec.step)))?;
        }
        if let Some(es) = &eval_split {
            if rec.step % eval_every == 0 {
                let (_, report) = generate_and_evaluate(&tr.model, es, &split.vocab, &providers, &cfg.generation)?;
                append_json_line(&eval_path, &EvalLine { step: rec.step, report: &report })?;
            }
        }
        Ok(())
    })?;
    save_checkpoint(&trainer, &split.vocab, &dir.join(FINAL_CHECKPOINT))?;
    let refs: Vec<_> = data.videos.iter().collect();
    let eval = batch_loss(&trainer.model, &trainer.model.params, &refs, &trainer.config, None, false)?;
    println!(
        "train: {} steps, first-step loss {}, last-step loss {}, full-set loss {:.6} ({:.1}s) -> {}",
        trainer.step(),
        first.map_or("-".into(), |v| format!("{v:.6}")),
        last.map_or("-".into(), |v| format!("{v:.6}")),
        eval.breakdown.total,
        start.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(Outcome::Success)
}

// ---- generate -------------------------------------------------------------------

fn cmd_generate(mut cfg: RunConfig, a: &GenerateArgs) -> Result<Outcome> {
    if let Some(m) = a.mode {
        cfg.generation.mode = match m {
            ModeChoice::Free => Mode::Free,
            ModeChoice::GtProposals => Mode::GtProposals,
        };
    }
    apply_knowledge(&mut cfg.knowledge, a.knowledge);
    cfg.validate()?;
    let dir = out_dir(&cfg)?;
    let ckpt_dir = a.checkpoint.clone().unwrap_or_else(|| dir.join(FINAL_CHECKPOINT));
    let data_path = a
        .data
        .clone()
        .or_else(|| cfg.data.eval.clone())
        .or_else(|| cfg.data.train.clone())
        .ok_or_else(|| Error::config("data.eval", "no split to caption (use --data)"))?;
    let ckpt = Checkpoint::load(&ckpt_dir)?;
    let model = Model::from_params(ckpt.model_config, ckpt.params)?;
    let mut split = load_split(&data_path, Some(model.config()))?;
    let vocab_path = ckpt_dir.join(VOCAB_FILE);
    let vocab = if vocab_path.exists() { Vocabulary::load(&vocab_path)? } else { split.vocab.clone() };
    if split.feature_dim != model.config().feature_dim || split.labels.width() != model.config().actobj_dim {
        return Err(Error::invalid("dataset does not match the checkpoint's feature or label dimensions"));
    }
    if !a.videos.is_empty() {
        if let Some(missing) = a.videos.iter().find(|id| split.video(id).is_none()) {
            return Err(Error::invalid(format!("unknown video id {missing:?}")));
        }
        split.videos.retain(|v| a.videos.contains(&v.id));
    }
    let providers = cfg.knowledge.providers()?;
    let options = cfg.generation.options();
    let mut videos = Vec::with_capacity(split.videos.len());
    for v in &split.videos {
        let out = generate_paragraph(&model, v, &vocab, &providers, cfg.generation.mode, &options)?;
        videos.push(VideoDoc::from_output(&v.id, &out, &vocab, &split.labels, &options));
    }
    let docs = GenerationDocs { mode: cfg.generation.mode, videos };
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join(GENERATIONS_FILE);
    docs.save(&path)?;
    cfg.write_effective(&dir)?;
    let sentences: usize = docs.videos.iter().map(|v| v.snippets.len()).sum();
    println!(
        "generate: {} videos, {} sentences ({} mode) -> {}",
        docs.videos.len(),
        sentences,
        docs.mode,
        path.display()
    );
    Ok(Outcome::Success)
}

// ---- eval -----------------------------------------------------------------------

#[derive(Serialize)]
struct NamedReport<'a> {
    name: &'a str,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn cmd_eval(mut cfg: RunConfig, a: &EvalArgs) -> Result<Outcome> {
    if let Some(d) = &a.data {
        cfg.data.eval = Some(d.clone());
    }
    cfg.validate()?;
    let dir = out_dir(&cfg)?;
    let data_path = cfg
        .data
        .eval
        .clone()
        .ok_or_else(|| Error::config("data.eval", "no reference split (use --data)"))?;
    if !a.names.is_empty() && a.names.len() != a.docs.len() {
        return Err(Error::invalid("give one --name per --docs"));
    }
    let split = load_split(&data_path, None)?;
    let mut rows = Vec::with_capacity(a.docs.len());
    for (i, path) in a.docs.iter().enumerate() {
        let docs = GenerationDocs::load(path)?;
        let report = evaluate(&docs, &split)?;
        let name = a.names.get(i).cloned().unwrap_or_else(|| path.display().to_string());
        rows.push((name, report));
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join(EVAL_REPORT);
    let text = if rows.len() == 1 {
        serde_json::to_string_pretty(&rows[0].1)
    } else {
        let named: Vec<_> = rows.iter().map(|(n, r)| NamedReport { name: n, report: r }).collect();
        serde_json::to_string_pretty(&named)
    }
    .map_err(|e| Error::format(&path, e))?;
    fs::write(&path, format!("{text}\n")).map_err(io_err(&path))?;
    cfg.write_effective(&dir)?;
    println!("{text}");
    if rows.len() > 1 {
        let table = ablation_table(&rows);
        let table_path = dir.join("ablation.md");
        fs::write(&table_path, &table).map_err(io_err(&table_path))?;
        println!("{table}");
    }
    Ok(Outcome::Success)
}

// ---- gradcheck --------------------------------------------------------------------

fn cmd_gradcheck(cfg: RunConfig, a: &GradcheckArgs) -> Result<Outcome> {
    cfg.validate()?;
    if a.frames == 0 {
        return Err(Error::config("frames", "must be positive"));
    }
    let model_cfg = ModelConfig { dropout: a.dropout, ..ModelConfig::tiny() };
    let model: Model<f64> = Model::new(model_cfg.clone(), a.seed)?;
    let data = TrainingSet::random(&model_cfg, 2, a.frames, 2, a.seed);
    let videos: Vec<_> = data.videos.iter().collect();
    let options = GradCheckOptions {
        rel_tol: a.tolerance,
        max_entries_per_block: (a.max_entries > 0).then_some(a.max_entries),
        seed: a.seed,
        ..GradCheckOptions::default()
    };
    let train = cfg.train.clone();
    let mut evaluation = 0u64;
    set_backward_fault(a.fault);
    let result = grad_check(&model.params, &options, |p: &ParamStore<f64>, want| {
        evaluation += 1;
        let dropout_seed = (model_cfg.dropout > 0.0).then_some(evaluation);
        let out = batch_loss(&model, p, &videos, &train, dropout_seed, want)?;
        Ok((out.breakdown.total, out.grads))
    });
    set_backward_fault(false);
    let report = result?;
    for b in &report.blocks {
        println!("{:<32} {:>6} entries  max rel err {:.3e}", b.name, b.entries_checked, b.max_rel_err);
    }
    let worst = report.worst_block().map_or("-", |b| b.name.as_str());
    println!(
        "gradcheck: {} blocks, max rel err {:.3e} (tolerance {:.0e}, worst {worst}): {}",
        report.blocks.len(),
        report.max_rel_err,
        report.rel_tol,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("gradcheck.json");
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::format(&path, e))?;
        fs::write(&path, format!("{text}\n")).map_err(io_err(&path))?;
    }
    Ok(if report.passed { Outcome::Success } else { Outcome::CheckFailed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthConfig;
    use crate::knowledge::SentenceEmbedder;

    #[test]
    fn effective_config_round_trips_through_toml() {
        let mut cfg = RunConfig { out_dir: Some("runs/a".into()), ..RunConfig::default() };
        cfg.train.max_steps = 17;
        cfg.model.d_model = Some(48);
        cfg.knowledge.explicit = SourceKind::Toy;
        cfg.generation.mode = Mode::Free;
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn model_section_fills_dataset_dimensions_and_applies_overrides() {
        let split = synth_generate(&SynthConfig::default(), &SentenceEmbedder::default()).unwrap();
        let section = ModelSection { d_model: Some(24), heads: Some(3), ..ModelSection::default() };
        let c = section.resolve(&split).unwrap();
        assert_eq!((c.feature_dim, c.vocab_size, c.actobj_dim), (32, split.vocab.len(), split.labels.width()));
        assert_eq!((c.d_model, c.heads), (24, 3));
        let bad = ModelSection { heads: Some(5), ..section };
        assert!(bad.resolve(&split).unwrap_err().is_validation());
    }

    #[test]
    fn file_sources_require_a_path() {
        let k = KnowledgeSection { implicit: SourceKind::File, ..KnowledgeSection::default() };
        let err = k.providers().unwrap_err();
        assert!(err.to_string().contains("knowledge.implicit_file"));
    }

    #[test]
    fn exit_codes_follow_the_error_class() {
        assert_eq!(exit_code(&Ok(Outcome::Success)), 0);
        assert_eq!(exit_code(&Ok(Outcome::CheckFailed)), 3);
        assert_eq!(exit_code(&Err(Error::config("x", "bad"))), 1);
        assert_eq!(exit_code(&Err(Error::NonFinite("adam"))), 2);
    }
}

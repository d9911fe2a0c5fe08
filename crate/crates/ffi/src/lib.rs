//! C ABI over the captioning pipeline.
//!
//! Every function returns an [`IcStatus`]. On failure the message is kept per
//! thread and read with [`ic_last_error_message`]. Handles are opaque and
//! released with their `_free` function. Strings returned to the caller are
//! released with [`ic_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use instructcap::data::{load_manifest, normalize_tokens, Limits, Vocabulary, VOCAB_FILE};
use instructcap::generation::{generate_paragraph, GenerationOptions, Mode, VideoDoc};
use instructcap::knowledge::{Providers, SentenceEmbedder};
use instructcap::metrics::bleu;
use instructcap::model::Model;
use instructcap::objective::Checkpoint;
use instructcap::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Runtime = 5,
    Panic = 6,
}

/// Sentence embedder producing unit-norm 384-dimensional vectors.
pub struct IcEmbedder {
    inner: SentenceEmbedder,
}

/// A trained model with its vocabulary and knowledge providers.
pub struct IcCaptioner {
    model: Model<f32>,
    vocab: Vocabulary,
    providers: Providers,
}

/// Length of the vectors written by [`ic_embedder_embed`].
pub const IC_EMBEDDING_DIM: usize = 384;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> IcStatus {
    match err {
        Error::Io { .. } => IcStatus::Io,
        Error::Format { .. } => IcStatus::Format,
        e if e.is_validation() => IcStatus::InvalidArgument,
        _ => IcStatus::Runtime,
    }
}

struct Failure(IcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            IcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            IcStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(IcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(IcStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

fn json_arg<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| Failure(IcStatus::InvalidArgument, format!("{what}: {e}")))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(IcStatus::Runtime, "output contains a NUL byte".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ic_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated) and returns the full message length in bytes, or
/// 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ic_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ic_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates an embedder; equal seeds give equal embeddings.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ic_embedder_new(seed: u64, out: *mut *mut IcEmbedder) -> IcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(IcEmbedder { inner: SentenceEmbedder::new(seed) }));
        Ok(())
    })
}

/// Embeds `text` into `out[0..IC_EMBEDDING_DIM]`; `out_len` must equal
/// `IC_EMBEDDING_DIM`.
///
/// # Safety
/// `handle` must come from [`ic_embedder_new`]; `text` must be a
/// NUL-terminated string; `out` must point to `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn ic_embedder_embed(
    handle: *const IcEmbedder,
    text: *const c_char,
    out: *mut f32,
    out_len: usize,
) -> IcStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let text = str_arg(text, "text")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != IC_EMBEDDING_DIM {
            return Err(Failure(
                IcStatus::InvalidArgument,
                format!("out_len is {out_len}, expected {IC_EMBEDDING_DIM}"),
            ));
        }
        let v = h.inner.embed(text);
        ptr::copy_nonoverlapping(v.as_ptr(), out, IC_EMBEDDING_DIM);
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from [`ic_embedder_new`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ic_embedder_free(handle: *mut IcEmbedder) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Loads a checkpoint directory written by `instructcap train`. Knowledge
/// comes from the vectors stored in the dataset.
///
/// # Safety
/// `checkpoint_dir` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ic_captioner_open(checkpoint_dir: *const c_char, out: *mut *mut IcCaptioner) -> IcStatus {
    guard(|| {
        let dir = Path::new(str_arg(checkpoint_dir, "checkpoint_dir")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(dir)?;
        let model = Model::from_params(ckpt.model_config, ckpt.params)?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        if vocab.len() != model.config().vocab_size {
            return Err(Failure(
                IcStatus::Format,
                format!("vocabulary has {} words, model expects {}", vocab.len(), model.config().vocab_size),
            ));
        }
        *out = Box::into_raw(Box::new(IcCaptioner { model, vocab, providers: Providers::precomputed() }));
        Ok(())
    })
}

/// Captions one video of a dataset split and returns its document as JSON
/// in `*out_json`. `mode` is `"free"` or `"gt_proposals"`.
///
/// # Safety
/// `handle` must come from [`ic_captioner_open`]; string arguments must be
/// NUL-terminated; `out_json` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ic_captioner_generate(
    handle: *const IcCaptioner,
    data_path: *const c_char,
    video_id: *const c_char,
    mode: *const c_char,
    out_json: *mut *mut c_char,
) -> IcStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let data_path = str_arg(data_path, "data_path")?;
        let video_id = str_arg(video_id, "video_id")?;
        let mode: Mode = str_arg(mode, "mode")?.parse()?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let cfg = h.model.config();
        let limits = Limits { max_frames: cfg.max_frames, max_snippets: cfg.max_snippets };
        let split = load_manifest(Path::new(data_path), &limits)?;
        let video = split
            .video(video_id)
            .ok_or_else(|| Failure(IcStatus::InvalidArgument, format!("unknown video id {video_id:?}")))?;
        let options = GenerationOptions::default();
        let output = generate_paragraph(&h.model, video, &h.vocab, &h.providers, mode, &options)?;
        let doc = VideoDoc::from_output(&video.id, &output, &h.vocab, &split.labels, &options);
        let text = serde_json::to_string(&doc).map_err(|e| Failure(IcStatus::Runtime, e.to_string()))?;
        *out_json = into_c_string(text)?;
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from [`ic_captioner_open`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ic_captioner_free(handle: *mut IcCaptioner) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Corpus BLEU of order `order` (1 to 4). `candidates_json` is a JSON array
/// of sentences, `references_json` a JSON array holding one array of
/// reference sentences per candidate. Sentences are lower-cased and
/// tokenized like the evaluator does.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ic_bleu(
    candidates_json: *const c_char,
    references_json: *const c_char,
    order: u32,
    out: *mut f64,
) -> IcStatus {
    guard(|| {
        let cands: Vec<String> = json_arg(str_arg(candidates_json, "candidates_json")?, "candidates_json")?;
        let refs: Vec<Vec<String>> = json_arg(str_arg(references_json, "references_json")?, "references_json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cands: Vec<_> = cands.iter().map(|s| normalize_tokens(s)).collect();
        let refs: Vec<Vec<_>> = refs.iter().map(|r| r.iter().map(|s| normalize_tokens(s)).collect()).collect();
        *out = bleu(&cands, &refs, order as usize)?;
        Ok(())
    })
}

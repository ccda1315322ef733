//! C ABI over the scoring and filtering core.
//!
//! Every fallible call returns an [`RfStatus`]; on failure the message is
//! available from [`rf_last_error`] on the same thread. Handles are opaque and
//! must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use resofilter::dataio::{self, TemplateStyle, Vocab};
use resofilter::diffscore::{self, ProbeConfig, ScoreEntry, Stat};
use resofilter::filterpipe::{self, FilterSpec};
use resofilter::model::{Checkpoint, Module};
use resofilter::numcore;
use resofilter::objective::{self, ObjectiveParams};
use resofilter::train::OptimizerConfig;
use resofilter::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Domain = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfModule {
    WQ = 0,
    WK = 1,
    WV = 2,
    WUp = 3,
    WDown = 4,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfStat {
    MeanAbs = 0,
    MeanSigned = 1,
    Std = 2,
    P90 = 3,
    P95 = 4,
    P99 = 5,
    Cosine = 6,
    Pearson = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfOptimizer {
    Adamw = 0,
    Sgd = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RfScoreOptions {
    pub module: RfModule,
    pub stat: RfStat,
    /// Number of final decoder blocks averaged over.
    pub last_layers: u32,
    pub probe_optimizer: RfOptimizer,
    pub probe_lr: f64,
    pub probe_steps: u32,
    /// Worker threads; 0 means one.
    pub workers: u32,
}

/// Loaded checkpoint plus its vocabulary.
pub struct RfModel {
    checkpoint: Checkpoint,
    vocab: Vocab,
}

/// Ordered list of per-sample scores.
pub struct RfScores {
    entries: Vec<ScoreEntry>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> RfStatus {
    match e {
        Error::Config(_) => RfStatus::InvalidArgument,
        Error::Io { .. } => RfStatus::Io,
        Error::Malformed { .. } | Error::Schema { .. } | Error::Json(_) | Error::Data(_) => RfStatus::Parse,
        Error::Domain(_) | Error::Shape(_) => RfStatus::Domain,
        Error::Sample { source, .. } => status_of(source),
        _ => RfStatus::Internal,
    }
}

fn fail(status: RfStatus, msg: impl Into<String>) -> RfStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), RfStatus>) -> RfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RfStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(RfStatus::Internal, "panic inside resofilter"),
    }
}

fn lift<T>(r: resofilter::Result<T>) -> Result<T, RfStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, RfStatus> {
    if p.is_null() {
        return Err(fail(RfStatus::NullPointer, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RfStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), RfStatus> {
    if p.is_null() {
        Err(fail(RfStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// The library defaults: w_up, mean_abs, last 3 layers, one AdamW step at
/// lr 1e-5, one worker.
#[no_mangle]
pub extern "C" fn rf_score_options_default() -> RfScoreOptions {
    RfScoreOptions {
        module: RfModule::WUp,
        stat: RfStat::MeanAbs,
        last_layers: 3,
        probe_optimizer: RfOptimizer::Adamw,
        probe_lr: 1e-5,
        probe_steps: 1,
        workers: 1,
    }
}

/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_model_load(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut RfModel,
) -> RfStatus {
    guard(|| {
        non_null(out, "out")?;
        let ckpt = path_arg(checkpoint_path, "checkpoint_path")?;
        let vocab = path_arg(vocab_path, "vocab_path")?;
        let checkpoint = lift(Checkpoint::load(&ckpt))?;
        let vocab = lift(Vocab::load(&vocab))?;
        if vocab.len() != checkpoint.config.vocab_size {
            return Err(fail(
                RfStatus::Parse,
                format!(
                    "vocabulary has {} tokens, checkpoint expects {}",
                    vocab.len(),
                    checkpoint.config.vocab_size
                ),
            ));
        }
        *out = Box::into_raw(Box::new(RfModel { checkpoint, vocab }));
        Ok(())
    })
}

/// Decoder blocks in the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle from [`rf_model_load`].
#[no_mangle]
pub unsafe extern "C" fn rf_model_num_layers(model: *const RfModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.config.n_layers)
}

/// # Safety
/// `model` must be null or a handle from [`rf_model_load`] not freed before.
#[no_mangle]
pub unsafe extern "C" fn rf_model_free(model: *mut RfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn to_spec(o: &RfScoreOptions) -> (FilterSpec, ProbeConfig, usize) {
    let module = match o.module {
        RfModule::WQ => Module::Wq,
        RfModule::WK => Module::Wk,
        RfModule::WV => Module::Wv,
        RfModule::WUp => Module::Wup,
        RfModule::WDown => Module::Wdown,
    };
    let stat = match o.stat {
        RfStat::MeanAbs => Stat::MeanAbs,
        RfStat::MeanSigned => Stat::MeanSigned,
        RfStat::Std => Stat::Std,
        RfStat::P90 => Stat::P90,
        RfStat::P95 => Stat::P95,
        RfStat::P99 => Stat::P99,
        RfStat::Cosine => Stat::Cosine,
        RfStat::Pearson => Stat::Pearson,
    };
    let optimizer = match o.probe_optimizer {
        RfOptimizer::Adamw => OptimizerConfig::adamw(o.probe_lr),
        RfOptimizer::Sgd => OptimizerConfig::sgd(o.probe_lr),
    };
    let spec = FilterSpec {
        module,
        stat,
        layer_window: o.last_layers as usize,
        ..FilterSpec::default()
    };
    let probe = ProbeConfig {
        optimizer,
        steps: o.probe_steps as usize,
    };
    (spec, probe, (o.workers as usize).max(1))
}

/// Scores every sample of a JSONL dataset, rendered with the turn-marker
/// template.
///
/// # Safety
/// `model` must be a live handle, `data_path` a NUL-terminated string,
/// `options` readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_score_dataset(
    model: *const RfModel,
    data_path: *const c_char,
    options: *const RfScoreOptions,
    out: *mut *mut RfScores,
) -> RfStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(options, "options")?;
        non_null(out, "out")?;
        let m = &*model;
        let path = path_arg(data_path, "data_path")?;
        let (spec, probe, workers) = to_spec(&*options);
        let cfg = &m.checkpoint.config;
        let samples = lift(dataio::load_jsonl(&path))?;
        let data = lift(dataio::encode_all(&samples, &m.vocab, TemplateStyle::TurnMarkers, cfg.max_seq_len))?;
        let entries = lift(diffscore::score_dataset(cfg, &m.checkpoint.params, &data, &spec, &probe, workers))?;
        *out = Box::into_raw(Box::new(RfScores { entries }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_scores_load(path: *const c_char, out: *mut *mut RfScores) -> RfStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = path_arg(path, "path")?;
        let entries = lift(diffscore::load_scores(&p))?;
        *out = Box::into_raw(Box::new(RfScores { entries }));
        Ok(())
    })
}

/// Wraps raw values as scores with indices `0..n`.
///
/// # Safety
/// `values` must point to `n` doubles (or be null with `n == 0`); `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_scores_from_values(values: *const f64, n: usize, out: *mut *mut RfScores) -> RfStatus {
    guard(|| {
        non_null(out, "out")?;
        let vals: &[f64] = if n == 0 {
            &[]
        } else {
            non_null(values, "values")?;
            std::slice::from_raw_parts(values, n)
        };
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(fail(RfStatus::Domain, "scores must be finite"));
        }
        let entries = vals.iter().enumerate().map(|(i, &v)| ScoreEntry::bare(i, v)).collect();
        *out = Box::into_raw(Box::new(RfScores { entries }));
        Ok(())
    })
}

/// # Safety
/// `scores` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rf_scores_save(scores: *const RfScores, path: *const c_char) -> RfStatus {
    guard(|| {
        non_null(scores, "scores")?;
        let p = path_arg(path, "path")?;
        lift(diffscore::save_scores(&(*scores).entries, &p))
    })
}

/// Number of entries, or 0 for a null handle.
///
/// # Safety
/// `scores` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rf_scores_len(scores: *const RfScores) -> usize {
    scores.as_ref().map_or(0, |s| s.entries.len())
}

/// Sample index and score of entry `i`.
///
/// # Safety
/// `scores` must be a live handle; `index` and `score` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_scores_get(
    scores: *const RfScores,
    i: usize,
    index: *mut usize,
    score: *mut f64,
) -> RfStatus {
    guard(|| {
        non_null(scores, "scores")?;
        non_null(index, "index")?;
        non_null(score, "score")?;
        let s = &*scores;
        let e = s
            .entries
            .get(i)
            .ok_or_else(|| fail(RfStatus::InvalidArgument, format!("entry {i} out of range")))?;
        *index = e.index;
        *score = e.score;
        Ok(())
    })
}

/// # Safety
/// `scores` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn rf_scores_free(scores: *mut RfScores) {
    if !scores.is_null() {
        drop(Box::from_raw(scores));
    }
}

/// Indices of the `⌊n·retain⌋` lowest scores in ascending order. `out_len`
/// always receives the required count; if `capacity` is smaller, nothing is
/// written to `out` and `BufferTooSmall` is returned.
///
/// # Safety
/// `scores` must be a live handle; `out` must hold `capacity` entries;
/// `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_select(
    scores: *const RfScores,
    retain: f64,
    out: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> RfStatus {
    guard(|| {
        non_null(scores, "scores")?;
        non_null(out_len, "out_len")?;
        let kept = lift(filterpipe::select(&(*scores).entries, retain))?;
        *out_len = kept.len();
        if kept.len() > capacity {
            return Err(fail(
                RfStatus::BufferTooSmall,
                format!("{} indices need room, capacity is {capacity}", kept.len()),
            ));
        }
        if !kept.is_empty() {
            non_null(out, "out")?;
            ptr::copy_nonoverlapping(kept.as_ptr(), out, kept.len());
        }
        Ok(())
    })
}

/// Linearly interpolated percentile, `q` in [0, 1].
///
/// # Safety
/// `values` must point to `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_percentile(values: *const f64, n: usize, q: f64, out: *mut f64) -> RfStatus {
    guard(|| {
        non_null(values, "values")?;
        non_null(out, "out")?;
        *out = lift(numcore::percentile(std::slice::from_raw_parts(values, n), q))?;
        Ok(())
    })
}

/// `1 − e^(−λ·size)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_richness(size: usize, lambda: f64, out: *mut f64) -> RfStatus {
    guard(|| {
        non_null(out, "out")?;
        let params = ObjectiveParams { beta: 0.0, lambda };
        lift(params.validate())?;
        *out = objective::richness(size, &params);
        Ok(())
    })
}

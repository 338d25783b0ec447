//! C ABI over `stance_inject`.
//!
//! Every fallible call returns an [`SiStatus`]; on failure the message is
//! kept per thread and read back with [`si_last_error`]. Objects are opaque
//! handles owned by the caller and released with their `_free` function.
//! No call unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use stance_inject::experiments::{bhapkar_test, f1_macro, ExperimentError};
use stance_inject::inject::{encode_instances, Instance, StanceModel};
use stance_inject::retrieval::{
    conceptgraph_retrieve, ConceptGraph, ContextCandidate, RetrievalError,
};
use stance_inject::text::{words, StopwordList, TextError, Vocabulary};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Model = 4,
    Retrieval = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A trained classifier with its vocabulary.
pub struct SiModel {
    model: StanceModel,
    vocab: Vocabulary,
}

pub struct SiConceptGraph {
    graph: ConceptGraph,
}

/// Ranked context candidates.
pub struct SiContextList {
    texts: Vec<CString>,
    scores: Vec<f64>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SiBhapkarResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub n: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(SiStatus, String);

impl Failure {
    fn arg(msg: impl Into<String>) -> Self {
        Self(SiStatus::InvalidArgument, msg.into())
    }
}

impl From<stance_inject::encoder::ModelError> for Failure {
    fn from(e: stance_inject::encoder::ModelError) -> Self {
        use stance_inject::encoder::ModelError;
        let status = match &e {
            ModelError::Io(_) => SiStatus::Io,
            _ => SiStatus::Model,
        };
        Self(status, e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Self(SiStatus::InvalidArgument, e.to_string())
    }
}

impl From<RetrievalError> for Failure {
    fn from(e: RetrievalError) -> Self {
        let status = match &e {
            RetrievalError::Io { .. } => SiStatus::Io,
            _ => SiStatus::Retrieval,
        };
        Self(status, e.to_string())
    }
}

impl From<TextError> for Failure {
    fn from(e: TextError) -> Self {
        Self(SiStatus::Io, e.to_string())
    }
}

/// Runs `f`, records any failure and converts panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SiStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SiStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(SiStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::arg(format!("{what} is not valid UTF-8")))
}

unsafe fn read_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(SiStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn check_out<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(SiStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn si_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn si_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint directory written by training.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn si_model_load(dir: *const c_char, out: *mut *mut SiModel) -> SiStatus {
    guard(|| {
        check_out(out, "out")?;
        let dir = read_str(dir, "dir")?;
        let (model, vocab) = StanceModel::load(Path::new(dir))?;
        *out = Box::into_raw(Box::new(SiModel { model, vocab }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`si_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn si_model_free(model: *mut SiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of labels the model predicts; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn si_model_num_labels(model: *const SiModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.model.config.inject.num_labels)
}

/// Classify one instance. `contexts` may be null when `n_contexts` is 0;
/// models that read contexts use at most their configured number.
/// `probs` receives one probability per label and must hold
/// [`si_model_num_labels`] values.
///
/// # Safety
/// All pointers must be valid for the stated lengths; strings must be
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn si_model_predict(
    model: *const SiModel,
    text: *const c_char,
    target: *const c_char,
    contexts: *const *const c_char,
    n_contexts: usize,
    label: *mut usize,
    probs: *mut f64,
    probs_len: usize,
) -> SiStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| Failure(SiStatus::NullPointer, "model is null".into()))?;
        check_out(label, "label")?;
        let k = m.model.config.inject.num_labels;
        if !probs.is_null() && probs_len < k {
            return Err(Failure(
                SiStatus::BufferTooSmall,
                format!("probs holds {probs_len}, need {k}"),
            ));
        }
        let text = read_str(text, "text")?;
        let target = read_str(target, "target")?;
        let ctx: Vec<String> = read_slice(contexts, n_contexts, "contexts")?
            .iter()
            .take(m.model.config.inject.m)
            .map(|&c| read_str(c, "context").map(str::to_string))
            .collect::<Result<_, _>>()?;
        let inst = Instance {
            text,
            target,
            contexts: &ctx,
        };
        let batch = encode_instances(m.model.kind(), &[inst], &m.vocab, &m.model.config.inject)?;
        let (pred, p) = m.model.predict(&batch)?.remove(0);
        *label = pred;
        if !probs.is_null() {
            std::slice::from_raw_parts_mut(probs, k).copy_from_slice(&p);
        }
        Ok(())
    })
}

/// Macro-averaged F1 over the classes present in gold or predictions.
///
/// # Safety
/// `pred` and `gold` must each point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn si_f1_macro(
    pred: *const usize,
    gold: *const usize,
    n: usize,
    num_classes: usize,
    out: *mut f64,
) -> SiStatus {
    guard(|| {
        check_out(out, "out")?;
        let pred = read_slice(pred, n, "pred")?;
        let gold = read_slice(gold, n, "gold")?;
        *out = f1_macro(pred, gold, num_classes)?.f1_macro;
        Ok(())
    })
}

/// Marginal-homogeneity test between two paired prediction vectors.
///
/// # Safety
/// `a` and `b` must each point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn si_bhapkar(
    a: *const usize,
    b: *const usize,
    n: usize,
    num_classes: usize,
    out: *mut SiBhapkarResult,
) -> SiStatus {
    guard(|| {
        check_out(out, "out")?;
        let r = bhapkar_test(read_slice(a, n, "a")?, read_slice(b, n, "b")?, num_classes)?;
        *out = SiBhapkarResult {
            statistic: r.statistic,
            df: r.df,
            p_value: r.p_value,
            n: r.n,
        };
        Ok(())
    })
}

/// Load a tab-separated edge file. `stopwords` may be null for the
/// built-in English list.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn si_concept_graph_load(
    path: *const c_char,
    stopwords: *const c_char,
    out: *mut *mut SiConceptGraph,
) -> SiStatus {
    guard(|| {
        check_out(out, "out")?;
        let path = read_str(path, "path")?;
        let stop = if stopwords.is_null() {
            StopwordList::english()
        } else {
            StopwordList::load(read_str(stopwords, "stopwords")?)?
        };
        let (graph, _) = ConceptGraph::load(path, &stop)?;
        *out = Box::into_raw(Box::new(SiConceptGraph { graph }));
        Ok(())
    })
}

/// # Safety
/// `graph` must come from [`si_concept_graph_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn si_concept_graph_free(graph: *mut SiConceptGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

fn to_list(candidates: Vec<ContextCandidate>) -> Result<SiContextList, Failure> {
    let mut texts = Vec::with_capacity(candidates.len());
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        texts.push(
            CString::new(c.text)
                .map_err(|_| Failure(SiStatus::Retrieval, "context contains NUL".into()))?,
        );
        scores.push(c.score);
    }
    Ok(SiContextList { texts, scores })
}

/// Best `k` edges touching a concept of the text or the target.
///
/// # Safety
/// `graph` must be live, strings NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn si_concept_graph_retrieve(
    graph: *const SiConceptGraph,
    text: *const c_char,
    target: *const c_char,
    k: usize,
    out: *mut *mut SiContextList,
) -> SiStatus {
    guard(|| {
        check_out(out, "out")?;
        let g = graph
            .as_ref()
            .ok_or_else(|| Failure(SiStatus::NullPointer, "graph is null".into()))?;
        let found = conceptgraph_retrieve(
            &words(read_str(text, "text")?),
            &words(read_str(target, "target")?),
            &g.graph,
            k,
        );
        *out = Box::into_raw(Box::new(to_list(found)?));
        Ok(())
    })
}

/// # Safety
/// `list` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn si_context_list_len(list: *const SiContextList) -> usize {
    list.as_ref().map_or(0, |l| l.texts.len())
}

/// Text of entry `i`, or null when out of range. Owned by the list.
///
/// # Safety
/// `list` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn si_context_list_text(
    list: *const SiContextList,
    i: usize,
) -> *const c_char {
    list.as_ref()
        .and_then(|l| l.texts.get(i))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Score of entry `i`, or NaN when out of range.
///
/// # Safety
/// `list` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn si_context_list_score(list: *const SiContextList, i: usize) -> f64 {
    list.as_ref()
        .and_then(|l| l.scores.get(i))
        .copied()
        .unwrap_or(f64::NAN)
}

/// # Safety
/// `list` must come from a retrieval call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn si_context_list_free(list: *mut SiContextList) {
    if !list.is_null() {
        drop(Box::from_raw(list));
    }
}

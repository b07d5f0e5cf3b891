//! C ABI over the summarizer, retrieval index and ROUGE scoring.
//!
//! Objects are opaque handles created by `*_load` / `*_build` and released
//! with the matching `*_free`. Every fallible call returns a [`QsumStatus`];
//! on failure `qsum_last_error()` describes what went wrong on this thread.
//! Strings handed out by the library must be released with `qsum_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use qsum::decoder::{summarize_text, DecodeOptions};
use qsum::error::Error;
use qsum::io::read_collection;
use qsum::metrics::corpus_rouge;
use qsum::model::ModelParams;
use qsum::retrieval::TfIdfIndex;
use qsum::tokenizer::Vocab;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QsumStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Data = 5,
    Io = 6,
    Panic = 7,
}

/// A trained checkpoint ready for decoding.
pub struct QsumModel {
    params: ModelParams,
    classifier: Option<ModelParams>,
    vocab: Vocab,
    max_q: usize,
}

/// A TF-IDF question index.
pub struct QsumIndex {
    inner: TfIdfIndex,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QsumRougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QsumRouge {
    pub rouge1: QsumRougeScore,
    pub rouge2: QsumRougeScore,
    pub rouge_l: QsumRougeScore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(QsumStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => QsumStatus::Config,
            Error::Data { .. } | Error::Json(_) => QsumStatus::Data,
            Error::Io { .. } => QsumStatus::Io,
            _ => QsumStatus::InvalidArgument,
        };
        Failure(code, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(QsumStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus the thread's error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> QsumStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            QsumStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            QsumStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(QsumStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn to_c_string(s: &str) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(QsumStatus::InvalidArgument, "string contains a NUL byte".into()))
}

/// Message for the most recent failed call on this thread; empty after a success.
/// The pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn qsum_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn qsum_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint directory written by `qsum train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qsum_model_load(dir: *const c_char, out: *mut *mut QsumModel) -> QsumStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let dir = str_arg(dir, "dir")?;
        let (params, classifier, vocab, max_q) = qsum::cli::load_model_dir(Path::new(dir))?;
        *out = Box::into_raw(Box::new(QsumModel {
            params,
            classifier,
            vocab,
            max_q,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `qsum_model_load` and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn qsum_model_free(model: *mut QsumModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Summarizes one question. `beam` or `max_len` of 0 selects the default.
/// On success `*summary` holds a string to release with `qsum_string_free`;
/// `score` may be null.
///
/// # Safety
/// `model` must be a live handle, `question` NUL-terminated, `summary` writable.
#[no_mangle]
pub unsafe extern "C" fn qsum_summarize(
    model: *const QsumModel,
    question: *const c_char,
    beam: usize,
    max_len: usize,
    summary: *mut *mut c_char,
    score: *mut f64,
) -> QsumStatus {
    guard(|| {
        let summary = out_arg(summary, "summary")?;
        *summary = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let question = str_arg(question, "question")?;
        let d = DecodeOptions::default();
        let opts = DecodeOptions {
            beam: if beam == 0 { d.beam } else { beam },
            max_len: if max_len == 0 { d.max_len } else { max_len },
            max_q: m.max_q,
        };
        let rec = summarize_text(&m.params, m.classifier.as_ref(), &m.vocab, question, &opts)?;
        *summary = to_c_string(&rec.summary)?;
        if let Some(s) = score.as_mut() {
            *s = rec.score;
        }
        Ok(())
    })
}

/// Builds an index from a JSON-lines file of `{"question", "answer"}` records.
///
/// # Safety
/// `collection` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qsum_index_build(
    collection: *const c_char,
    stopwords: bool,
    out: *mut *mut QsumIndex,
) -> QsumStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(collection, "collection")?;
        let coll = read_collection(Path::new(path))?;
        let inner = TfIdfIndex::build(&coll, stopwords)?;
        *out = Box::into_raw(Box::new(QsumIndex { inner }));
        Ok(())
    })
}

/// Loads an index written by `qsum index` or `qsum_index_save`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qsum_index_load(path: *const c_char, out: *mut *mut QsumIndex) -> QsumStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let inner = TfIdfIndex::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(QsumIndex { inner }));
        Ok(())
    })
}

/// # Safety
/// `index` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qsum_index_save(index: *const QsumIndex, path: *const c_char) -> QsumStatus {
    guard(|| {
        let idx = index.as_ref().ok_or_else(|| null("index"))?;
        let path = str_arg(path, "path")?;
        idx.inner.save(Path::new(path))?;
        Ok(())
    })
}

/// # Safety
/// `index` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn qsum_index_free(index: *mut QsumIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of records the index was built from; 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qsum_index_len(index: *const QsumIndex) -> usize {
    index.as_ref().map_or(0, |i| i.inner.num_docs)
}

/// Top-`k` records for `query`. `ids` and `scores` must each hold `k` slots;
/// `*count` receives how many were filled (0 when nothing overlaps).
///
/// # Safety
/// Pointers must be valid for the stated sizes; `scores` may be null.
#[no_mangle]
pub unsafe extern "C" fn qsum_retrieve(
    index: *const QsumIndex,
    query: *const c_char,
    k: usize,
    ids: *mut usize,
    scores: *mut f64,
    count: *mut usize,
) -> QsumStatus {
    guard(|| {
        let count = out_arg(count, "count")?;
        *count = 0;
        let idx = index.as_ref().ok_or_else(|| null("index"))?;
        let query = str_arg(query, "query")?;
        if ids.is_null() {
            return Err(null("ids"));
        }
        let hits = idx.inner.retrieve(query, k)?;
        for (i, h) in hits.iter().enumerate() {
            *ids.add(i) = h.id;
            if !scores.is_null() {
                *scores.add(i) = h.score;
            }
        }
        *count = hits.len();
        Ok(())
    })
}

/// Stored answer for record `id`, released with `qsum_string_free`.
///
/// # Safety
/// `index` must be a live handle and `answer` writable.
#[no_mangle]
pub unsafe extern "C" fn qsum_index_answer(
    index: *const QsumIndex,
    id: usize,
    answer: *mut *mut c_char,
) -> QsumStatus {
    guard(|| {
        let answer = out_arg(answer, "answer")?;
        *answer = ptr::null_mut();
        let idx = index.as_ref().ok_or_else(|| null("index"))?;
        let a = idx.inner.answers.get(id).ok_or_else(|| {
            Failure(
                QsumStatus::InvalidArgument,
                format!("record {id} out of range (index holds {})", idx.inner.answers.len()),
            )
        })?;
        *answer = to_c_string(a)?;
        Ok(())
    })
}

/// Macro-averaged ROUGE-1/2/L over `n` hypothesis/reference pairs.
///
/// # Safety
/// `hyps` and `refs` must each point to `n` NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qsum_rouge(
    hyps: *const *const c_char,
    refs: *const *const c_char,
    n: usize,
    out: *mut QsumRouge,
) -> QsumStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if hyps.is_null() || refs.is_null() {
            return Err(null("hyps/refs"));
        }
        let mut h = Vec::with_capacity(n);
        let mut r = Vec::with_capacity(n);
        for i in 0..n {
            h.push(str_arg(*hyps.add(i), "hypothesis")?);
            r.push(str_arg(*refs.add(i), "reference")?);
        }
        let t = corpus_rouge(&h, &r)?;
        let conv = |s: qsum::metrics::RougeScore| QsumRougeScore {
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        };
        *out = QsumRouge {
            rouge1: conv(t.rouge1),
            rouge2: conv(t.rouge2),
            rouge_l: conv(t.rouge_l),
        };
        Ok(())
    })
}

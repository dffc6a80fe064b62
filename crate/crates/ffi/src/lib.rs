//! C ABI over `tcrgen`.
//!
//! Every fallible call returns a [`TcrgenStatus`]; on failure the message is
//! available from [`tcrgen_last_error`] on the same thread. Objects are
//! opaque handles created by `*_load`/`*_new`/producer calls and released by
//! the matching `*_free`. Strings are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::collections::HashSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tcrgen::checkpoint;
use tcrgen::generate::{self, GenerateConfig, Pool, Selection};
use tcrgen::metrics::{self, SubstitutionMatrix};
use tcrgen::model::ModelParams;
use tcrgen::params::Parameters;
use tcrgen::physchem::DescriptorTable;
use tcrgen::vocab;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcrgenStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    UnknownResidue = 4,
    Io = 5,
    Checkpoint = 6,
    Empty = 7,
    OutOfRange = 8,
    Internal = 99,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &tcrgen::Error) -> TcrgenStatus {
    use tcrgen::Error as E;
    match e {
        E::UnknownResidue(_) => TcrgenStatus::UnknownResidue,
        E::Io { .. } => TcrgenStatus::Io,
        E::Checkpoint(_) | E::Json(_) | E::ShapeMismatch { .. } => TcrgenStatus::Checkpoint,
        E::EmptyBatch | E::EmptySplit | E::EmptySequence | E::EmptyInput | E::EmptyIndex => TcrgenStatus::Empty,
        _ => TcrgenStatus::InvalidArgument,
    }
}

struct Failure(TcrgenStatus, String);

impl From<tcrgen::Error> for Failure {
    fn from(e: tcrgen::Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TcrgenStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TcrgenStatus::Ok
        }
        Ok(Err(Failure(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            TcrgenStatus::Internal
        }
    }
}

/// # Safety
/// `p` is null or a NUL-terminated string valid for the duration of the call.
unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(TcrgenStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TcrgenStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: callers pass either null or a writable pointer.
    unsafe { p.as_mut() }.ok_or_else(|| Failure(TcrgenStatus::NullPointer, format!("{name} is null")))
}

fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: non-null handles come from this library and are live.
    unsafe { p.as_ref() }.ok_or_else(|| Failure(TcrgenStatus::NullPointer, format!("{name} is null")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn tcrgen_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn tcrgen_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// A loaded checkpoint.
pub struct TcrgenModel {
    params: ModelParams,
    table: DescriptorTable,
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tcrgen_model_load(path: *const c_char, out: *mut *mut TcrgenModel) -> TcrgenStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let ckpt = checkpoint::load(Path::new(path))?;
        let table = DescriptorTable::standard();
        if ckpt.params.config.phys_enabled && ckpt.header.descriptor_sha256 != table.checksum() {
            return Err(Failure(TcrgenStatus::Checkpoint, "descriptor table checksum differs".into()));
        }
        *out = Box::into_raw(Box::new(TcrgenModel { params: ckpt.params, table }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle from [`tcrgen_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tcrgen_model_free(model: *mut TcrgenModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of learnable scalars, or 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcrgen_model_num_params(model: *const TcrgenModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.num_params())
}

/// 1 if the physicochemical channel is present, 0 otherwise or for null.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcrgen_model_phys_enabled(model: *const TcrgenModel) -> i32 {
    model.as_ref().map_or(0, |m| i32::from(m.params.config.phys_enabled))
}

/// Generation settings. Obtain defaults from
/// [`tcrgen_generate_options_default`] and override fields.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TcrgenGenerateOptions {
    pub n_starts: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub beam_min: usize,
    pub beam_max: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub k: usize,
    /// 0 = unique-ranked, 1 = MMR.
    pub mmr: i32,
    pub mmr_lambda: f64,
    /// 0 = best hypothesis per start, 1 = whole final beam.
    pub wide_pool: i32,
    pub candidate_cap: usize,
    pub seed: u64,
}

impl From<&GenerateConfig> for TcrgenGenerateOptions {
    fn from(c: &GenerateConfig) -> Self {
        TcrgenGenerateOptions {
            n_starts: c.n_starts,
            t_min: c.t_min,
            t_max: c.t_max,
            beam_min: c.beam_min,
            beam_max: c.beam_max,
            len_min: c.len_min,
            len_max: c.len_max,
            k: c.k,
            mmr: i32::from(c.selection == Selection::Mmr),
            mmr_lambda: c.mmr_lambda,
            wide_pool: i32::from(c.pool == Pool::Wide),
            candidate_cap: c.candidate_cap,
            seed: c.seed,
        }
    }
}

impl From<&TcrgenGenerateOptions> for GenerateConfig {
    fn from(o: &TcrgenGenerateOptions) -> Self {
        GenerateConfig {
            n_starts: o.n_starts,
            t_min: o.t_min,
            t_max: o.t_max,
            beam_min: o.beam_min,
            beam_max: o.beam_max,
            len_min: o.len_min,
            len_max: o.len_max,
            k: o.k,
            selection: if o.mmr != 0 { Selection::Mmr } else { Selection::Unique },
            mmr_lambda: o.mmr_lambda,
            pool: if o.wide_pool != 0 { Pool::Wide } else { Pool::Map },
            candidate_cap: o.candidate_cap,
            seed: o.seed,
        }
    }
}

#[no_mangle]
pub extern "C" fn tcrgen_generate_options_default() -> TcrgenGenerateOptions {
    (&GenerateConfig::default()).into()
}

/// Selected candidates for one context, best first.
pub struct TcrgenCandidates {
    sequences: Vec<CString>,
    e_llh: Vec<f64>,
}

/// Runs the generation pipeline for one context. `exclude` lists
/// `n_exclude` training receptors that may not be returned; it may be null
/// when `n_exclude` is 0.
///
/// # Safety
/// String arguments are NUL-terminated; `exclude` points to `n_exclude`
/// such strings; `options` is null (defaults) or readable; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tcrgen_generate(
    model: *const TcrgenModel,
    mhc: *const c_char,
    peptide: *const c_char,
    options: *const TcrgenGenerateOptions,
    exclude: *const *const c_char,
    n_exclude: usize,
    out: *mut *mut TcrgenCandidates,
) -> TcrgenStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = handle(model, "model")?;
        let mhc = str_arg(mhc, "mhc")?;
        let peptide = str_arg(peptide, "peptide")?;
        let cfg = options.as_ref().map_or_else(GenerateConfig::default, GenerateConfig::from);
        let mut training = HashSet::new();
        if n_exclude > 0 {
            if exclude.is_null() {
                return Err(Failure(TcrgenStatus::NullPointer, "exclude is null".into()));
            }
            for i in 0..n_exclude {
                training.insert(str_arg(*exclude.add(i), "exclude entry")?.to_ascii_uppercase());
            }
        }
        let set = generate::generate(
            &model.params,
            &model.table,
            &mhc.to_ascii_uppercase(),
            &peptide.to_ascii_uppercase(),
            &cfg,
            &training,
            &SubstitutionMatrix::blosum62(),
        )?;
        let sequences = set.selected.iter().map(|c| CString::new(c.sequence.as_str()).expect("residues only")).collect();
        let e_llh = set.selected.iter().map(|c| c.e_llh).collect();
        *out = Box::into_raw(Box::new(TcrgenCandidates { sequences, e_llh }));
        Ok(())
    })
}

/// # Safety
/// `c` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcrgen_candidates_len(c: *const TcrgenCandidates) -> usize {
    c.as_ref().map_or(0, |c| c.sequences.len())
}

/// Sequence `i`, owned by the handle; null when out of range.
///
/// # Safety
/// `c` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcrgen_candidates_sequence(c: *const TcrgenCandidates, i: usize) -> *const c_char {
    c.as_ref().and_then(|c| c.sequences.get(i)).map_or(ptr::null(), |s| s.as_ptr())
}

/// Length-normalized negative log-likelihood of candidate `i`; NaN when out
/// of range.
///
/// # Safety
/// `c` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcrgen_candidates_e_llh(c: *const TcrgenCandidates, i: usize) -> f64 {
    c.as_ref().and_then(|c| c.e_llh.get(i).copied()).unwrap_or(f64::NAN)
}

/// # Safety
/// `c` is null or a handle from [`tcrgen_generate`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tcrgen_candidates_free(c: *mut TcrgenCandidates) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Teacher-forced `e_llh` of `tcr` in the given context.
///
/// # Safety
/// String arguments are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tcrgen_score(
    model: *const TcrgenModel,
    mhc: *const c_char,
    peptide: *const c_char,
    tcr: *const c_char,
    out: *mut f64,
) -> TcrgenStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = handle(model, "model")?;
        let v = vocab::build_vocab();
        let src = vocab::encode_source(&str_arg(mhc, "mhc")?.to_ascii_uppercase(), &str_arg(peptide, "peptide")?.to_ascii_uppercase(), &v)?;
        let tcr = str_arg(tcr, "tcr")?.to_ascii_uppercase();
        *out = generate::score_llh(&model.params, &model.table, &src.ids[..src.active_len()], &tcr)?;
        Ok(())
    })
}

/// Levenshtein distance.
///
/// # Safety
/// `a`, `b` are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tcrgen_levenshtein(a: *const c_char, b: *const c_char, out: *mut usize) -> TcrgenStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = metrics::levenshtein(str_arg(a, "a")?, str_arg(b, "b")?);
        Ok(())
    })
}

/// Longest common subsequence length.
///
/// # Safety
/// `a`, `b` are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tcrgen_lcs(a: *const c_char, b: *const c_char, out: *mut usize) -> TcrgenStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = metrics::lcs_len(str_arg(a, "a")?, str_arg(b, "b")?);
        Ok(())
    })
}

/// Normalized Smith-Waterman similarity under BLOSUM62 with the given affine
/// gap penalties (a gap of length k costs `gap_open + (k - 1) * gap_extend`).
///
/// # Safety
/// `a`, `b` are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tcrgen_similarity(
    a: *const c_char,
    b: *const c_char,
    gap_open: i32,
    gap_extend: i32,
    out: *mut f64,
) -> TcrgenStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if gap_open < 0 || gap_extend < 0 {
            return Err(Failure(TcrgenStatus::OutOfRange, "gap penalties must be non-negative".into()));
        }
        let m = SubstitutionMatrix::blosum62().with_gaps(gap_open, gap_extend);
        *out = metrics::similarity_sw(str_arg(a, "a")?, str_arg(b, "b")?, &m)?;
        Ok(())
    })
}

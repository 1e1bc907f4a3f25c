//! C ABI for the adaptation engine.
//!
//! Every function is panic-proof: unwinding is caught at the boundary and
//! surfaced as [`CafeStatus::Panic`]. Objects cross the boundary as opaque
//! pointers created by `cafe_*_load`/`cafe_*_new` calls and released by the
//! matching `cafe_*_free`; freeing a null pointer is a no-op, freeing the
//! same pointer twice is undefined behavior. On any non-`Ok` status the
//! calling thread can read a human-readable message via
//! [`cafe_last_error_message`]; the pointer stays valid until the next
//! failing call on that thread.
//!
//! The generated header lands in `include/cafe.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cafe_core::alignment::GroupedSourceStats;
use cafe_core::error::CafeError;
use cafe_core::model::{predict_labels, pretrain_source, ToyModel};
use cafe_core::tta::{adapt_offline, adapt_online, precompute_source_stats, Mode, TTAConfig, TTAReport};
use cafe_core::nalgebra::DMatrix;
use cafe_core::{io, Dataset};

/// Result code of every fallible call. `Ok` is zero; everything else maps
/// one-to-one onto the engine's error taxonomy plus the boundary-only codes
/// `NullPointer`, `InvalidUtf8`, and `Panic`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CafeStatus {
    Ok = 0,
    InvalidInput = 1,
    NumericalError = 2,
    DegenerateBatch = 3,
    FormatError = 4,
    VersionMismatch = 5,
    Truncated = 6,
    ChecksumFailure = 7,
    Io = 8,
    NullPointer = 9,
    InvalidUtf8 = 10,
    Panic = 11,
}

/// Adaptation settings. `k = 0` means "use the group count frozen in the
/// statistics object". Obtain defaults from [`cafe_tta_config_default`] and
/// override selectively.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CafeTtaConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub k: usize,
    pub epsilon: f64,
    pub use_align: bool,
    pub use_infomax: bool,
    pub online: bool,
    pub seed: u64,
    pub epochs: usize,
}

/// Opaque feature-extractor + classifier pair.
pub struct CafeModel(ToyModel);
/// Opaque labeled dataset.
pub struct CafeDataset(Dataset);
/// Opaque frozen source statistics.
pub struct CafeStats(GroupedSourceStats);
/// Opaque adaptation run report.
pub struct CafeReport(TTAReport);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', "\u{fffd}")).expect("nul stripped");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn fail(status: CafeStatus, msg: &str) -> CafeStatus {
    set_error(msg);
    status
}

fn fail_with(err: CafeError) -> CafeStatus {
    let status = match &err {
        CafeError::InvalidInput(_) => CafeStatus::InvalidInput,
        CafeError::NumericalError(_) => CafeStatus::NumericalError,
        CafeError::DegenerateBatch { .. } => CafeStatus::DegenerateBatch,
        CafeError::FormatError(_) => CafeStatus::FormatError,
        CafeError::VersionMismatch { .. } => CafeStatus::VersionMismatch,
        CafeError::Truncated(_) => CafeStatus::Truncated,
        CafeError::ChecksumFailure { .. } => CafeStatus::ChecksumFailure,
        CafeError::Io(_) => CafeStatus::Io,
    };
    fail(status, &err.to_string())
}

/// Runs a boundary body under `catch_unwind`, converting panics to a status.
fn guard(body: impl FnOnce() -> CafeStatus) -> CafeStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(CafeStatus::Panic, "internal panic reached the C boundary"),
    }
}

/// Same, for value-returning accessors: a panic yields `fallback`.
fn guard_value<T>(fallback: T, body: impl FnOnce() -> T) -> T {
    catch_unwind(AssertUnwindSafe(body)).unwrap_or(fallback)
}

/// Null-checked shared borrow of an opaque handle.
macro_rules! borrow {
    ($ptr:expr) => {
        match unsafe { $ptr.as_ref() } {
            Some(handle) => &handle.0,
            None => return fail(CafeStatus::NullPointer, "null handle argument"),
        }
    };
}

/// Null-checked exclusive borrow of an opaque handle.
macro_rules! borrow_mut {
    ($ptr:expr) => {
        match unsafe { $ptr.as_mut() } {
            Some(handle) => &mut handle.0,
            None => return fail(CafeStatus::NullPointer, "null handle argument"),
        }
    };
}

/// Decodes a `*const c_char` into a filesystem path (UTF-8 required).
macro_rules! path_arg {
    ($ptr:expr) => {{
        if $ptr.is_null() {
            return fail(CafeStatus::NullPointer, "null path argument");
        }
        match unsafe { CStr::from_ptr($ptr) }.to_str() {
            Ok(text) => Path::new(text),
            Err(_) => return fail(CafeStatus::InvalidUtf8, "path is not valid UTF-8"),
        }
    }};
}

/// Writes a freshly boxed handle through an out-pointer.
macro_rules! emit {
    ($out:expr, $wrapper:ident, $value:expr) => {{
        if $out.is_null() {
            return fail(CafeStatus::NullPointer, "null out-pointer");
        }
        unsafe { *$out = Box::into_raw(Box::new($wrapper($value))) };
        CafeStatus::Ok
    }};
}

fn free_boxed<T>(ptr: *mut T) {
    if !ptr.is_null() {
        drop(unsafe { Box::from_raw(ptr) });
    }
}

/// Library version as a static NUL-terminated string; never freed.
#[no_mangle]
pub extern "C" fn cafe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on the calling thread.
/// Valid until the next failing call on the same thread; never freed by the
/// caller.
#[no_mangle]
pub extern "C" fn cafe_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Frees a string returned by this library (currently only
/// [`cafe_report_to_json`]). Null is a no-op.
#[no_mangle]
pub extern "C" fn cafe_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(unsafe { CString::from_raw(text) });
    }
}

// ---- datasets --------------------------------------------------------------

/// Builds a dataset from caller-owned buffers: `features` is row-major
/// `n × dim`, `labels` has one entry per row in `[0, class_count)`. The
/// buffers are copied; the caller keeps ownership.
#[no_mangle]
pub extern "C" fn cafe_dataset_from_raw(
    features: *const f64,
    labels: *const u32,
    n: usize,
    dim: usize,
    class_count: usize,
    out: *mut *mut CafeDataset,
) -> CafeStatus {
    guard(|| {
        if features.is_null() || labels.is_null() {
            return fail(CafeStatus::NullPointer, "null buffer argument");
        }
        let Some(len) = n.checked_mul(dim) else {
            return fail(CafeStatus::InvalidInput, "n * dim overflows");
        };
        let features = unsafe { std::slice::from_raw_parts(features, len) };
        let labels = unsafe { std::slice::from_raw_parts(labels, n) };
        let inputs = DMatrix::from_row_slice(n, dim, features);
        match Dataset::new(inputs, labels.to_vec(), class_count) {
            Ok(data) => emit!(out, CafeDataset, data),
            Err(err) => fail_with(err),
        }
    })
}

#[no_mangle]
pub extern "C" fn cafe_dataset_load(path: *const c_char, out: *mut *mut CafeDataset) -> CafeStatus {
    guard(|| {
        let path = path_arg!(path);
        match io::load_dataset(path) {
            Ok(data) => emit!(out, CafeDataset, data),
            Err(err) => fail_with(err),
        }
    })
}

#[no_mangle]
pub extern "C" fn cafe_dataset_save(data: *const CafeDataset, path: *const c_char) -> CafeStatus {
    guard(|| {
        let data = borrow!(data);
        let path = path_arg!(path);
        match io::save_dataset(data, path) {
            Ok(()) => CafeStatus::Ok,
            Err(err) => fail_with(err),
        }
    })
}

/// Number of samples; 0 for a null handle.
#[no_mangle]
pub extern "C" fn cafe_dataset_len(data: *const CafeDataset) -> usize {
    guard_value(0, || unsafe { data.as_ref() }.map_or(0, |d| d.0.len()))
}

/// Input dimensionality; 0 for a null handle.
#[no_mangle]
pub extern "C" fn cafe_dataset_dim(data: *const CafeDataset) -> usize {
    guard_value(0, || unsafe { data.as_ref() }.map_or(0, |d| d.0.dim()))
}

#[no_mangle]
pub extern "C" fn cafe_dataset_free(data: *mut CafeDataset) {
    free_boxed(data);
}

// ---- models ----------------------------------------------------------------

/// Creates a freshly initialized (untrained) model.
#[no_mangle]
pub extern "C" fn cafe_model_new(
    in_dim: usize,
    hidden_dim: usize,
    feature_dim: usize,
    class_count: usize,
    seed: u64,
    out: *mut *mut CafeModel,
) -> CafeStatus {
    guard(|| {
        match ToyModel::seeded(in_dim, hidden_dim, feature_dim, class_count, seed) {
            Ok(model) => emit!(out, CafeModel, model),
            Err(err) => fail_with(err),
        }
    })
}

#[no_mangle]
pub extern "C" fn cafe_model_load(path: *const c_char, out: *mut *mut CafeModel) -> CafeStatus {
    guard(|| {
        let path = path_arg!(path);
        match io::load_model(path) {
            Ok(model) => emit!(out, CafeModel, model),
            Err(err) => fail_with(err),
        }
    })
}

#[no_mangle]
pub extern "C" fn cafe_model_save(model: *const CafeModel, path: *const c_char) -> CafeStatus {
    guard(|| {
        let model = borrow!(model);
        let path = path_arg!(path);
        match io::save_model(model, path) {
            Ok(()) => CafeStatus::Ok,
            Err(err) => fail_with(err),
        }
    })
}

/// Feature (penultimate-layer) dimensionality; 0 for a null handle.
#[no_mangle]
pub extern "C" fn cafe_model_feature_dim(model: *const CafeModel) -> usize {
    guard_value(0, || {
        unsafe { model.as_ref() }.map_or(0, |m| m.0.feature_dim())
    })
}

#[no_mangle]
pub extern "C" fn cafe_model_free(model: *mut CafeModel) {
    free_boxed(model);
}

/// Supervised source training, updating the model in place. Writes the final
/// training accuracy through `out_accuracy` when non-null.
#[no_mangle]
pub extern "C" fn cafe_pretrain(
    model: *mut CafeModel,
    data: *const CafeDataset,
    epochs: usize,
    lr: f64,
    momentum: f64,
    seed: u64,
    out_accuracy: *mut f64,
) -> CafeStatus {
    guard(|| {
        let model = borrow_mut!(model);
        let data = borrow!(data);
        match pretrain_source(model, data, epochs, lr, momentum, seed) {
            Ok((trained, accuracy)) => {
                *model = trained;
                if !out_accuracy.is_null() {
                    unsafe { *out_accuracy = accuracy };
                }
                CafeStatus::Ok
            }
            Err(err) => fail_with(err),
        }
    })
}

/// Predicts a label per sample into `out_labels`, which must hold
/// `cafe_dataset_len(data)` entries.
#[no_mangle]
pub extern "C" fn cafe_predict(
    model: *const CafeModel,
    data: *const CafeDataset,
    out_labels: *mut u32,
) -> CafeStatus {
    guard(|| {
        let model = borrow!(model);
        let data = borrow!(data);
        if out_labels.is_null() {
            return fail(CafeStatus::NullPointer, "null out-pointer");
        }
        match model.forward(&data.inputs) {
            Ok((_, logits)) => {
                let predicted = predict_labels(&logits);
                let out = unsafe { std::slice::from_raw_parts_mut(out_labels, predicted.len()) };
                out.copy_from_slice(&predicted);
                CafeStatus::Ok
            }
            Err(err) => fail_with(err),
        }
    })
}

// ---- frozen statistics -----------------------------------------------------

/// Freezes grouped source feature statistics from a trained model and source
/// data: feature mean/covariance, the spectral feature partition into `k`
/// groups, and the per-group eigendecompositions floored at `epsilon`.
#[no_mangle]
pub extern "C" fn cafe_stats_precompute(
    model: *const CafeModel,
    data: *const CafeDataset,
    k: usize,
    epsilon: f64,
    seed: u64,
    out: *mut *mut CafeStats,
) -> CafeStatus {
    guard(|| {
        let model = borrow!(model);
        let data = borrow!(data);
        match precompute_source_stats(model, &data.inputs, k, epsilon, seed) {
            Ok(stats) => emit!(out, CafeStats, stats),
            Err(err) => fail_with(err),
        }
    })
}

#[no_mangle]
pub extern "C" fn cafe_stats_load(path: *const c_char, out: *mut *mut CafeStats) -> CafeStatus {
    guard(|| {
        let path = path_arg!(path);
        match io::load_stats(path) {
            Ok(stats) => emit!(out, CafeStats, stats),
            Err(err) => fail_with(err),
        }
    })
}

#[no_mangle]
pub extern "C" fn cafe_stats_save(stats: *const CafeStats, path: *const c_char) -> CafeStatus {
    guard(|| {
        let stats = borrow!(stats);
        let path = path_arg!(path);
        match io::save_stats(stats, path) {
            Ok(()) => CafeStatus::Ok,
            Err(err) => fail_with(err),
        }
    })
}

/// Number of feature groups; 0 for a null handle.
#[no_mangle]
pub extern "C" fn cafe_stats_k(stats: *const CafeStats) -> usize {
    guard_value(0, || unsafe { stats.as_ref() }.map_or(0, |s| s.0.k()))
}

/// Feature dimensionality the statistics were computed over; 0 for null.
#[no_mangle]
pub extern "C" fn cafe_stats_dim(stats: *const CafeStats) -> usize {
    guard_value(0, || unsafe { stats.as_ref() }.map_or(0, |s| s.0.dim()))
}

#[no_mangle]
pub extern "C" fn cafe_stats_free(stats: *mut CafeStats) {
    free_boxed(stats);
}

// ---- adaptation ------------------------------------------------------------

/// Default adaptation settings: lr 1e-3, momentum 0.8, batch 256, frozen
/// group count (`k = 0`), eigenvalue floor 1e-5, both losses on, offline,
/// seed 0, one epoch.
#[no_mangle]
pub extern "C" fn cafe_tta_config_default() -> CafeTtaConfig {
    CafeTtaConfig {
        lr: 1e-3,
        momentum: 0.8,
        batch_size: 256,
        k: 0,
        epsilon: 1e-5,
        use_align: true,
        use_infomax: true,
        online: false,
        seed: 0,
        epochs: 1,
    }
}

/// Adapts `model` on unlabeled target `data` against frozen `stats`. On
/// success writes the adapted model through `out_model` and, when non-null,
/// the run report through `out_report`. The input model is untouched.
#[no_mangle]
pub extern "C" fn cafe_adapt(
    model: *const CafeModel,
    stats: *const CafeStats,
    data: *const CafeDataset,
    config: *const CafeTtaConfig,
    out_model: *mut *mut CafeModel,
    out_report: *mut *mut CafeReport,
) -> CafeStatus {
    guard(|| {
        let model = borrow!(model);
        let stats = borrow!(stats);
        let data = borrow!(data);
        let Some(config) = (unsafe { config.as_ref() }) else {
            return fail(CafeStatus::NullPointer, "null config argument");
        };
        let config = TTAConfig {
            lr: config.lr,
            momentum: config.momentum,
            batch_size: config.batch_size,
            k: if config.k == 0 { stats.k() } else { config.k },
            epsilon: config.epsilon,
            use_align: config.use_align,
            use_infomax: config.use_infomax,
            mode: if config.online { Mode::Online } else { Mode::Offline },
            seed: config.seed,
            epochs: config.epochs,
        };
        let outcome = if config.mode == Mode::Online {
            adapt_online(model, &data.inputs, Some(&data.labels), stats, &config)
        } else {
            adapt_offline(model, &data.inputs, Some(&data.labels), stats, &config)
        };
        match outcome {
            Ok((adapted, report)) => {
                let status = emit!(out_model, CafeModel, adapted);
                if status == CafeStatus::Ok && !out_report.is_null() {
                    unsafe { *out_report = Box::into_raw(Box::new(CafeReport(report))) };
                }
                status
            }
            Err(err) => fail_with(err),
        }
    })
}

// ---- reports ---------------------------------------------------------------

/// Serializes the full report (config echo, loss traces, per-group KL values,
/// accuracy, distribution-gap readings, degeneracy events) as JSON. Free the
/// returned string with [`cafe_string_free`]. Returns null on failure.
#[no_mangle]
pub extern "C" fn cafe_report_to_json(report: *const CafeReport) -> *mut c_char {
    guard_value(std::ptr::null_mut(), || {
        let Some(report) = (unsafe { report.as_ref() }) else {
            set_error("null handle argument");
            return std::ptr::null_mut();
        };
        let text = serde_json::to_string_pretty(&report.0).expect("report serializes");
        CString::new(text.replace('\0', "\u{fffd}"))
            .expect("nul stripped")
            .into_raw()
    })
}

/// Post-adaptation accuracy, or NaN when labels were unavailable or the
/// handle is null.
#[no_mangle]
pub extern "C" fn cafe_report_accuracy(report: *const CafeReport) -> f64 {
    guard_value(f64::NAN, || {
        unsafe { report.as_ref() }.map_or(f64::NAN, |r| r.0.accuracy.unwrap_or(f64::NAN))
    })
}

/// Number of optimization steps taken; 0 for a null handle.
#[no_mangle]
pub extern "C" fn cafe_report_batches_consumed(report: *const CafeReport) -> usize {
    guard_value(0, || {
        unsafe { report.as_ref() }.map_or(0, |r| r.0.batches_consumed)
    })
}

/// Total loss at the final step, or NaN when no step ran / null handle.
#[no_mangle]
pub extern "C" fn cafe_report_final_loss(report: *const CafeReport) -> f64 {
    guard_value(f64::NAN, || {
        unsafe { report.as_ref() }
            .and_then(|r| r.0.loss_total.last().copied())
            .unwrap_or(f64::NAN)
    })
}

/// Feature-distribution gap to the source statistics before adaptation, or
/// NaN when it was not computed / null handle.
#[no_mangle]
pub extern "C" fn cafe_report_frechet_before(report: *const CafeReport) -> f64 {
    guard_value(f64::NAN, || {
        unsafe { report.as_ref() }.map_or(f64::NAN, |r| r.0.frechet_before.unwrap_or(f64::NAN))
    })
}

/// Feature-distribution gap after adaptation, or NaN when it was not
/// computed / null handle.
#[no_mangle]
pub extern "C" fn cafe_report_frechet_after(report: *const CafeReport) -> f64 {
    guard_value(f64::NAN, || {
        unsafe { report.as_ref() }.map_or(f64::NAN, |r| r.0.frechet_after.unwrap_or(f64::NAN))
    })
}

#[no_mangle]
pub extern "C" fn cafe_report_free(report: *mut CafeReport) {
    free_boxed(report);
}

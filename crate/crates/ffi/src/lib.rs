//! C interface to `dynalign`.
//!
//! Models and datasets are opaque handles created by the `da_*` constructors
//! and released with the matching `*_free`. Every fallible call returns a
//! [`DaStatus`]; on failure a description is available from
//! [`da_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::ptr;

use dynalign::data::{self, Dataset, Split, SyntheticSpec};
use dynalign::train::{self, EpochMetrics, TrainConfig};
use dynalign::{Error, Model};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Io = 5,
    Format = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

impl From<&Error> for DaStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => DaStatus::Shape,
            Error::InvalidArgument(_) | Error::Json(_) => DaStatus::InvalidArgument,
            Error::NonFinite(_) | Error::Diverged { .. } | Error::Solver { .. } => DaStatus::NonFinite,
            Error::Io(_) => DaStatus::Io,
            Error::Format(_) => DaStatus::Format,
            Error::Tape(_) => DaStatus::Internal,
        }
    }
}

/// Opaque trained or loaded model.
pub struct DaModel(Model);

/// Opaque few-shot dataset.
pub struct DaDataset(Dataset);

/// Per-epoch training callback: `(epoch, mean loss, accuracy, lr, user)`.
pub type DaEpochCallback = Option<extern "C" fn(usize, f64, f64, f64, *mut c_void)>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: DaStatus, msg: impl Into<String>) -> DaStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting library errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), DaStatus>) -> DaStatus {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DaStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(DaStatus::Internal, format!("internal error: {msg}"))
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, DaStatus>;
}

impl<T> OrStatus<T> for dynalign::Result<T> {
    fn or_status(self) -> Result<T, DaStatus> {
        self.map_err(|e| fail(DaStatus::from(&e), e.to_string()))
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, DaStatus> {
    if p.is_null() {
        return Err(fail(DaStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DaStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, DaStatus> {
    p.as_ref().ok_or_else(|| fail(DaStatus::NullPointer, format!("{what} is null")))
}

fn out_arg<T>(p: *mut T, what: &str) -> Result<(), DaStatus> {
    if p.is_null() {
        Err(fail(DaStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn da_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn da_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Generates a synthetic dataset. `spec_json` may be null for the defaults;
/// missing fields take their default values.
///
/// # Safety
/// `spec_json` must be null or a NUL-terminated string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn da_dataset_generate(spec_json: *const c_char, out: *mut *mut DaDataset) -> DaStatus {
    guard(|| {
        out_arg(out, "out")?;
        let spec: SyntheticSpec = if spec_json.is_null() {
            SyntheticSpec::default()
        } else {
            serde_json::from_str(str_arg(spec_json, "spec_json")?).map_err(Error::from).or_status()?
        };
        let ds = data::generate_synthetic(&spec).or_status()?;
        *out = Box::into_raw(Box::new(DaDataset(ds)));
        Ok(())
    })
}

/// Loads a dataset directory written by [`da_dataset_save`] or `gen-data`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn da_dataset_load(dir: *const c_char, out: *mut *mut DaDataset) -> DaStatus {
    guard(|| {
        out_arg(out, "out")?;
        let ds = Dataset::load_dir(str_arg(dir, "dir")?).or_status()?;
        *out = Box::into_raw(Box::new(DaDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn da_dataset_save(dataset: *const DaDataset, dir: *const c_char) -> DaStatus {
    guard(|| {
        let ds = ref_arg(dataset, "dataset")?;
        ds.0.save_dir(str_arg(dir, "dir")?).or_status()
    })
}

/// # Safety
/// `dataset` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn da_dataset_free(dataset: *mut DaDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Trains a model from a JSON training config on the meta-train split.
/// `on_epoch` may be null.
///
/// # Safety
/// Pointers must be valid as described for the other calls; `user` is
/// passed through to `on_epoch` untouched.
#[no_mangle]
pub unsafe extern "C" fn da_train(
    config_json: *const c_char,
    dataset: *const DaDataset,
    on_epoch: DaEpochCallback,
    user: *mut c_void,
    out: *mut *mut DaModel,
) -> DaStatus {
    guard(|| {
        out_arg(out, "out")?;
        let config: TrainConfig = serde_json::from_str(str_arg(config_json, "config_json")?)
            .map_err(Error::from)
            .or_status()?;
        let ds = ref_arg(dataset, "dataset")?;
        let outcome = train::train(&config, &ds.0, |m: &EpochMetrics| {
            if let Some(cb) = on_epoch {
                cb(m.epoch, m.loss, m.acc, m.lr, user);
            }
        })
        .or_status()?;
        *out = Box::into_raw(Box::new(DaModel(outcome.model)));
        Ok(())
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn da_model_load(dir: *const c_char, out: *mut *mut DaModel) -> DaStatus {
    guard(|| {
        out_arg(out, "out")?;
        let model = Model::load(str_arg(dir, "dir")?).or_status()?;
        *out = Box::into_raw(Box::new(DaModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn da_model_save(model: *const DaModel, dir: *const c_char) -> DaStatus {
    guard(|| ref_arg(model, "model")?.0.save(str_arg(dir, "dir")?).or_status())
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn da_model_free(model: *mut DaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Mean accuracy and 95% half-width over `episodes` meta-test episodes.
///
/// # Safety
/// Handles must come from this library; `mean_acc` and `ci95` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn da_evaluate(
    model: *const DaModel,
    dataset: *const DaDataset,
    episodes: usize,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    seed: u64,
    mean_acc: *mut f64,
    ci95: *mut f64,
) -> DaStatus {
    guard(|| {
        out_arg(mean_acc, "mean_acc")?;
        out_arg(ci95, "ci95")?;
        let (m, ds) = (ref_arg(model, "model")?, ref_arg(dataset, "dataset")?);
        let report = train::evaluate(&m.0, &ds.0, Split::MetaTest, episodes, n_way, k_shot, n_query, seed).or_status()?;
        *mean_acc = report.summary.mean_acc;
        *ci95 = report.summary.ci95;
        Ok(())
    })
}

/// Initial sampling offsets of pair `pair` of the meta-test episode drawn
/// from `episode_seed` (one query per class, so `n_way * n_way` pairs; pair
/// `q * n_way + n` aligns query `q` with class `n`), as `18 * h * w` values (channel
/// `2p` is the row offset of grid point `p`, `2p + 1` the column offset).
///
/// The required length is always written to `len`; when `capacity` is too
/// small nothing else is written and `BufferTooSmall` is returned, so a
/// first call with a null buffer queries the size.
///
/// # Safety
/// Handles must come from this library; `out` must hold `capacity`
/// doubles (or be null when `capacity` is 0); `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn da_dump_offsets(
    model: *const DaModel,
    dataset: *const DaDataset,
    episode_seed: u64,
    n_way: usize,
    k_shot: usize,
    pair: usize,
    out: *mut f64,
    capacity: usize,
    len: *mut usize,
) -> DaStatus {
    guard(|| {
        out_arg(len, "len")?;
        let (m, ds) = (ref_arg(model, "model")?, ref_arg(dataset, "dataset")?);
        let offsets = train::episode_offsets(&m.0, &ds.0, episode_seed, n_way, k_shot).or_status()?;
        let shape = offsets.shape();
        if pair >= shape[0] {
            return Err(fail(
                DaStatus::InvalidArgument,
                format!("pair {pair} out of range for {} pairs", shape[0]),
            ));
        }
        let per = offsets.numel() / shape[0];
        *len = per;
        if capacity < per {
            return Err(fail(DaStatus::BufferTooSmall, format!("need {per} values, got {capacity}")));
        }
        out_arg(out, "out")?;
        ptr::copy_nonoverlapping(offsets.data()[pair * per..].as_ptr(), out, per);
        Ok(())
    })
}

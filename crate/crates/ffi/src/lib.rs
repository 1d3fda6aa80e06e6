//! C ABI over `bevpred`.
//!
//! Every function returns a [`BpStatus`]; on failure a message is kept per
//! thread and read with [`bp_last_error`]. Handles are opaque and must be
//! released with the matching `*_free` function. Panics never cross the
//! boundary; they surface as `BP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bevpred::config::RunConfig;
use bevpred::inference::decode_instances;
use bevpred::metrics::InstanceSegResult;
use bevpred::trainer::{evaluate_checkpoint, predict, Checkpoint};
use bevpred::world::Dataset;
use bevpred::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Shape = 5,
    Numeric = 6,
    OutOfRange = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BpSplit {
    Train = 0,
    Eval = 1,
}

/// Scores on the largest configured ROI.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BpMetrics {
    pub iou: f64,
    pub vpq: f64,
    pub id_consistency: f64,
}

pub struct BpDataset(Dataset);

pub struct BpCheckpoint(Checkpoint);

/// Decoded instance-ID maps `[frames, height, width]`; 0 is background.
pub struct BpInstanceMaps(InstanceSegResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s: String = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> BpStatus {
    match e {
        Error::Config(_) => BpStatus::Config,
        Error::Shape(_) => BpStatus::Shape,
        Error::Numeric(_) => BpStatus::Numeric,
        Error::OutOfRange { .. } => BpStatus::OutOfRange,
        _ => BpStatus::Data,
    }
}

struct Fail(BpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BpStatus::Ok,
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {m}"));
            BpStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(BpStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(BpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates one split of the dataset described by a run configuration in
/// TOML. A null or empty `config_toml` uses the defaults.
///
/// # Safety
/// `config_toml` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_dataset_generate(
    config_toml: *const c_char,
    split: BpSplit,
    out: *mut *mut BpDataset,
) -> BpStatus {
    guard(|| {
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml(str_arg(config_toml, "config_toml")?)?
        };
        let spec = match split {
            BpSplit::Train => cfg.data.train_split(),
            BpSplit::Eval => cfg.data.eval_split(),
        };
        put(out, BpDataset(Dataset::generate(&spec)?))
    })
}

/// Opens a split directory written by `bevpred gen-data`.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_dataset_open(dir: *const c_char, out: *mut *mut BpDataset) -> BpStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        put(out, BpDataset(Dataset::load(&dir)?))
    })
}

/// # Safety
/// `ds` must be a live dataset handle; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_dataset_len(ds: *const BpDataset, len: *mut usize) -> BpStatus {
    guard(|| {
        let ds = handle(ds, "ds")?;
        *len.as_mut().ok_or_else(|| null("len"))? = ds.0.len();
        Ok(())
    })
}

/// Copies the manifest hash (64 hex digits plus NUL) into `buf`.
///
/// # Safety
/// `ds` must be a live dataset handle; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn bp_dataset_hash(ds: *const BpDataset, buf: *mut c_char, cap: usize) -> BpStatus {
    guard(|| {
        let h = handle(ds, "ds")?.0.manifest.hash();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if cap < h.len() + 1 {
            return Err(Fail(BpStatus::BufferTooSmall, format!("need {} bytes", h.len() + 1)));
        }
        ptr::copy_nonoverlapping(h.as_ptr().cast(), buf, h.len());
        *buf.add(h.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bp_dataset_free(ds: *mut BpDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_checkpoint_open(path: *const c_char, out: *mut *mut BpCheckpoint) -> BpStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        put(out, BpCheckpoint(Checkpoint::load(&path)?))
    })
}

/// Optimiser steps the checkpoint has taken.
///
/// # Safety
/// `ck` must be a live checkpoint handle; `step` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_checkpoint_step(ck: *const BpCheckpoint, step: *mut u64) -> BpStatus {
    guard(|| {
        let ck = handle(ck, "ck")?;
        *step.as_mut().ok_or_else(|| null("step"))? = ck.0.state.step;
        Ok(())
    })
}

/// # Safety
/// `ck` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bp_checkpoint_free(ck: *mut BpCheckpoint) {
    if !ck.is_null() {
        drop(Box::from_raw(ck));
    }
}

/// Runs the model on sample `index` and decodes instance maps with the
/// checkpoint's inference settings.
///
/// # Safety
/// `ck` and `ds` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_predict(
    ck: *const BpCheckpoint,
    ds: *const BpDataset,
    index: usize,
    out: *mut *mut BpInstanceMaps,
) -> BpStatus {
    guard(|| {
        let ck = &handle(ck, "ck")?.0;
        let ds = &handle(ds, "ds")?.0;
        let s = ds.samples.get(index).ok_or(Error::OutOfRange { index, len: ds.len() })?;
        let p = predict(&ck.state.store, &ck.config, s)?;
        put(out, BpInstanceMaps(decode_instances(&p, &s.grid, &ck.config.inference)?))
    })
}

/// # Safety
/// `maps` must be a live handle; the three outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_maps_dims(
    maps: *const BpInstanceMaps,
    frames: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> BpStatus {
    guard(|| {
        let m = &handle(maps, "maps")?.0;
        *frames.as_mut().ok_or_else(|| null("frames"))? = m.frames.len();
        *height.as_mut().ok_or_else(|| null("height"))? = m.grid.height;
        *width.as_mut().ok_or_else(|| null("width"))? = m.grid.width;
        Ok(())
    })
}

/// Copies the maps, frame-major then row-major, into `buf` of `len` ids.
///
/// # Safety
/// `maps` must be a live handle; `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn bp_maps_copy(maps: *const BpInstanceMaps, buf: *mut u32, len: usize) -> BpStatus {
    guard(|| {
        let m = &handle(maps, "maps")?.0;
        let need: usize = m.frames.iter().map(Vec::len).sum();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < need {
            return Err(Fail(BpStatus::BufferTooSmall, format!("need {need} ids")));
        }
        let mut off = 0;
        for f in &m.frames {
            ptr::copy_nonoverlapping(f.as_ptr(), buf.add(off), f.len());
            off += f.len();
        }
        Ok(())
    })
}

/// # Safety
/// `maps` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bp_maps_free(maps: *mut BpInstanceMaps) {
    if !maps.is_null() {
        drop(Box::from_raw(maps));
    }
}

/// Evaluates a checkpoint on a dataset generated with the same world
/// configuration.
///
/// # Safety
/// `ck` and `ds` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_evaluate(ck: *const BpCheckpoint, ds: *const BpDataset, out: *mut BpMetrics) -> BpStatus {
    guard(|| {
        let ck = &handle(ck, "ck")?.0;
        let ds = &handle(ds, "ds")?.0;
        let r = evaluate_checkpoint(ck, ds, "ffi")?;
        let row = r.primary();
        *out.as_mut().ok_or_else(|| null("out"))? = BpMetrics {
            iou: row.iou,
            vpq: row.vpq,
            id_consistency: row.id_consistency,
        };
        Ok(())
    })
}

//! C ABI over the trajmark pipeline.
//!
//! Every fallible call returns a [`TmStatus`]. On failure the message is kept
//! per thread and can be read with [`tm_last_error`]. Handles are opaque and
//! must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use trajmark::io::config::RunConfig;
use trajmark::io::model_file::read_calibration;
use trajmark::keying::KeyStore;
use trajmark::pipeline::{Calibration, Pipeline};
use trajmark::tensor::LatentTensor;
use trajmark::verify::{Classification, VerdictReport};
use trajmark::Error;

/// Status codes. Values match the command-line exit codes where one exists.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmStatus {
    Ok = 0,
    Error = 1,
    Calibration = 3,
    Format = 4,
    Provenance = 5,
    NotFound = 6,
    InvalidArgument = 7,
    BufferSize = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmClassification {
    Benign = 0,
    RemovalAttackedOwned = 1,
    SpoofedRejected = 2,
    InvalidOrNonwatermarked = 3,
}

impl From<Classification> for TmClassification {
    fn from(c: Classification) -> Self {
        match c {
            Classification::Benign => Self::Benign,
            Classification::RemovalAttackedOwned => Self::RemovalAttackedOwned,
            Classification::SpoofedRejected => Self::SpoofedRejected,
            Classification::InvalidOrNonwatermarked => Self::InvalidOrNonwatermarked,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TmVerdict {
    pub vanilla_pass: bool,
    pub second_moment: f64,
    pub tau_vanilla: f64,
    pub d2_detect: f64,
    pub d2_own: f64,
    pub tau_detect: f64,
    pub tau_own: f64,
    pub classification: TmClassification,
    pub owned: bool,
}

impl From<&VerdictReport> for TmVerdict {
    fn from(v: &VerdictReport) -> Self {
        Self {
            vanilla_pass: v.vanilla_pass,
            second_moment: v.second_moment,
            tau_vanilla: v.tau_vanilla,
            d2_detect: v.d2_detect,
            d2_own: v.d2_own,
            tau_detect: v.tau_detect,
            tau_own: v.tau_own,
            classification: v.classification.into(),
            owned: v.owned,
        }
    }
}

pub struct TmPipeline(Pipeline);
pub struct TmKeyStore(KeyStore);
pub struct TmCalibration(Calibration);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Core(Error),
    Arg(String),
    Buffer(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn status_of(e: &Error) -> TmStatus {
    match e.exit_code() {
        3 => TmStatus::Calibration,
        4 => TmStatus::Format,
        5 => TmStatus::Provenance,
        6 => TmStatus::NotFound,
        _ => TmStatus::Error,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TmStatus::Ok
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Arg(m))) => {
            set_error(m);
            TmStatus::InvalidArgument
        }
        Ok(Err(Fail::Buffer(m))) => {
            set_error(m);
            TmStatus::BufferSize
        }
        Err(_) => {
            set_error("panic inside trajmark".into());
            TmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Arg(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{name} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail::Arg(format!("{name} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Arg("output pointer is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL.
/// The pointer stays valid until the next trajmark call on the same thread.
#[no_mangle]
pub extern "C" fn tm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Built-in 16×16 toy pipeline.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tm_pipeline_new_toy(out: *mut *mut TmPipeline) -> TmStatus {
    guard(|| put(out, TmPipeline(Pipeline::toy()?)))
}

/// Pipeline described by a TOML run configuration.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tm_pipeline_from_config(path: *const c_char, out: *mut *mut TmPipeline) -> TmStatus {
    guard(|| {
        let cfg = RunConfig::load(Path::new(str_arg(path, "path")?))?;
        put(out, TmPipeline(cfg.build_pipeline()?))
    })
}

/// Number of f64 elements in one latent image.
///
/// # Safety
/// `p` must be a live pipeline handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn tm_pipeline_latent_len(p: *const TmPipeline) -> usize {
    p.as_ref().map_or(0, |p| p.0.shape.iter().product())
}

/// # Safety
/// `p` must come from a `tm_pipeline_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tm_pipeline_free(p: *mut TmPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Open a key store file, or an in-memory store when `path` is NULL.
///
/// # Safety
/// `path` must be NULL or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tm_keystore_open(path: *const c_char, out: *mut *mut TmKeyStore) -> TmStatus {
    guard(|| {
        let store = if path.is_null() {
            KeyStore::in_memory()
        } else {
            KeyStore::open(str_arg(path, "path")?)?
        };
        put(out, TmKeyStore(store))
    })
}

/// Register a user with a key sized for `p`.
///
/// # Safety
/// Handles must be live and `user` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tm_keystore_register(
    store: *mut TmKeyStore,
    p: *const TmPipeline,
    user: *const c_char,
    seed: u64,
    created_at: u64,
) -> TmStatus {
    guard(|| {
        let store = store.as_mut().ok_or_else(|| Fail::Arg("store is null".into()))?;
        let p = handle(p, "pipeline")?;
        store.0.register_user(str_arg(user, "user")?, seed, p.0.shape, created_at)?;
        Ok(())
    })
}

/// # Safety
/// `s` must come from [`tm_keystore_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tm_keystore_free(s: *mut TmKeyStore) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn tm_calibration_load(path: *const c_char, out: *mut *mut TmCalibration) -> TmStatus {
    guard(|| put(out, TmCalibration(read_calibration(Path::new(str_arg(path, "path")?))?)))
}

/// # Safety
/// `c` must come from [`tm_calibration_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tm_calibration_free(c: *mut TmCalibration) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Generate a watermarked latent for `user` at `timestamp` into `out`,
/// which must hold exactly [`tm_pipeline_latent_len`] values.
///
/// # Safety
/// Handles must be live, `user` NUL-terminated, `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn tm_generate(
    p: *const TmPipeline,
    store: *const TmKeyStore,
    user: *const c_char,
    timestamp: u64,
    out: *mut f64,
    len: usize,
) -> TmStatus {
    guard(|| {
        let p = handle(p, "pipeline")?;
        let key = handle(store, "store")?.0.get(str_arg(user, "user")?)?;
        let need: usize = p.0.shape.iter().product();
        if out.is_null() || len != need {
            return Err(Fail::Buffer(format!("output buffer must hold {need} values")));
        }
        let img = p.0.generate(key, timestamp)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(img.as_slice());
        Ok(())
    })
}

/// Verify a latent against `user`'s key. A rejection is reported through
/// the verdict, not the status.
///
/// # Safety
/// Handles must be live, `user` NUL-terminated, `image` valid for `len`
/// reads and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn tm_verify(
    p: *const TmPipeline,
    cal: *const TmCalibration,
    store: *const TmKeyStore,
    user: *const c_char,
    timestamp: u64,
    image: *const f64,
    len: usize,
    out: *mut TmVerdict,
) -> TmStatus {
    guard(|| {
        let p = handle(p, "pipeline")?;
        let cal = handle(cal, "calibration")?;
        let key = handle(store, "store")?.0.get(str_arg(user, "user")?)?;
        let need: usize = p.0.shape.iter().product();
        if image.is_null() || len != need {
            return Err(Fail::Buffer(format!("image buffer must hold {need} values")));
        }
        if out.is_null() {
            return Err(Fail::Arg("verdict pointer is null".into()));
        }
        let img = LatentTensor::from_vec(p.0.shape, std::slice::from_raw_parts(image, len).to_vec())?;
        *out = TmVerdict::from(&cal.0.verify(&p.0, &img, key, timestamp)?);
        Ok(())
    })
}

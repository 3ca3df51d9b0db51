//! C ABI over the siamlab trainer.
//!
//! Every call returns a [`SiamlabStatus`]. On failure, [`siamlab_last_error`]
//! describes the most recent error on the calling thread. Runs are opaque
//! handles created by [`siamlab_run_create`] and released with
//! [`siamlab_run_free`]; strings returned by the library are released with
//! [`siamlab_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::OnceLock;

use siamlab::cli::presets::{names, Preset};
use siamlab::cli::runner::{evaluate, execute, prepare, Execution};
use siamlab::error::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiamlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    UnknownPreset = 3,
    InvalidOverride = 4,
    InvalidParameter = 5,
    NotExecuted = 6,
    OutOfRange = 7,
    Io = 8,
    Numerical = 9,
    Panic = 10,
}

/// A configured preset and, once executed, its results.
pub struct SiamlabRun {
    preset: Preset,
    exec: Option<Execution>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = CString::new(msg.into().replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(e: &Error) -> SiamlabStatus {
    match e {
        Error::UnknownPreset(_) => SiamlabStatus::UnknownPreset,
        Error::InvalidOverride(_) => SiamlabStatus::InvalidOverride,
        Error::InvalidParameter(_) | Error::MissingColumn(_) => SiamlabStatus::InvalidParameter,
        Error::Io(_) => SiamlabStatus::Io,
        _ => SiamlabStatus::Numerical,
    }
}

struct Fail(SiamlabStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SiamlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SiamlabStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SiamlabStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(SiamlabStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: caller passes a NUL-terminated string that outlives the call.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(SiamlabStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn run_ref<'a>(run: *const SiamlabRun) -> Result<&'a SiamlabRun, Fail> {
    // SAFETY: non-null handles come from siamlab_run_create and are not yet freed.
    unsafe { run.as_ref() }
        .ok_or_else(|| Fail(SiamlabStatus::NullPointer, "run handle is null".into()))
}

unsafe fn run_mut<'a>(run: *mut SiamlabRun) -> Result<&'a mut SiamlabRun, Fail> {
    // SAFETY: as in run_ref, and the caller does not share the handle across threads.
    unsafe { run.as_mut() }
        .ok_or_else(|| Fail(SiamlabStatus::NullPointer, "run handle is null".into()))
}

fn executed(run: &SiamlabRun) -> Result<&Execution, Fail> {
    run.exec.as_ref().ok_or_else(|| {
        Fail(
            SiamlabStatus::NotExecuted,
            "run has not been executed".into(),
        )
    })
}

fn write_out<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(
            SiamlabStatus::NullPointer,
            "output pointer is null".into(),
        ));
    }
    // SAFETY: checked non-null; the caller provides writable storage for T.
    unsafe { out.write(value) };
    Ok(())
}

/// Message for the last failed call on this thread. Empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn siamlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn siamlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn preset_names() -> &'static [CString] {
    static NAMES: OnceLock<Vec<CString>> = OnceLock::new();
    NAMES.get_or_init(|| {
        names()
            .into_iter()
            .map(|n| CString::new(n).expect("ASCII"))
            .collect()
    })
}

#[no_mangle]
pub extern "C" fn siamlab_preset_count() -> usize {
    preset_names().len()
}

/// Static name of preset `index`, or null when out of range.
#[no_mangle]
pub extern "C" fn siamlab_preset_name(index: usize) -> *const c_char {
    preset_names()
        .get(index)
        .map_or(ptr::null(), |n| n.as_ptr())
}

/// Creates a run of `preset` with every seed set to `seed`.
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn siamlab_run_create(
    preset: *const c_char,
    seed: u64,
    out: *mut *mut SiamlabRun,
) -> SiamlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail(
                SiamlabStatus::NullPointer,
                "output pointer is null".into(),
            ));
        }
        let name = unsafe { text(preset, "preset") }?;
        let preset = prepare(name, seed, &[])?;
        write_out(
            out,
            Box::into_raw(Box::new(SiamlabRun { preset, exec: None })),
        )
    })
}

/// Applies one `key = value` override, discarding earlier results. The
/// settings are checked after each call, so lower `warmup` before `steps`.
///
/// # Safety
/// `run` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn siamlab_run_set(
    run: *mut SiamlabRun,
    key: *const c_char,
    value: *const c_char,
) -> SiamlabStatus {
    guard(|| {
        let run = unsafe { run_mut(run) }?;
        let (key, value) = unsafe { (text(key, "key")?, text(value, "value")?) };
        let mut settings = run.preset.settings.clone();
        settings.apply_all(&[(key.to_string(), value.to_string())])?;
        run.preset.settings = settings;
        run.exec = None;
        Ok(())
    })
}

/// Trains and probes according to the preset's protocol.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn siamlab_run_execute(run: *mut SiamlabRun) -> SiamlabStatus {
    guard(|| {
        let run = unsafe { run_mut(run) }?;
        run.exec = Some(execute(&run.preset.settings, &run.preset.protocol)?);
        Ok(())
    })
}

/// # Safety
/// `run` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn siamlab_run_collapsed(
    run: *const SiamlabRun,
    out: *mut bool,
) -> SiamlabStatus {
    guard(|| {
        let exec = executed(unsafe { run_ref(run) }?)?;
        write_out(out, exec.record.collapsed)
    })
}

/// Whether every qualitative claim attached to the preset held.
///
/// # Safety
/// `run` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn siamlab_run_expectation_held(
    run: *const SiamlabRun,
    out: *mut bool,
) -> SiamlabStatus {
    guard(|| {
        let run = unsafe { run_ref(run) }?;
        let exec = executed(run)?;
        write_out(
            out,
            run.preset.claims.iter().all(|c| evaluate(c, exec).held),
        )
    })
}

/// Number of metric records in the trajectory.
///
/// # Safety
/// `run` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn siamlab_run_trajectory_len(
    run: *const SiamlabRun,
    out: *mut usize,
) -> SiamlabStatus {
    guard(|| {
        let exec = executed(unsafe { run_ref(run) }?)?;
        write_out(out, exec.record.trajectory.len())
    })
}

/// Metric `name` (`step`, `loss`, `std`, `m_o`, `m_r`, `covariance`,
/// `entropy_lambda`, `probe_acc`, `lr`) of record `index`. An absent
/// entropy reads as NaN.
///
/// # Safety
/// `run` must be a live handle; `name` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn siamlab_run_metric(
    run: *const SiamlabRun,
    index: usize,
    name: *const c_char,
    out: *mut f64,
) -> SiamlabStatus {
    guard(|| {
        let exec = executed(unsafe { run_ref(run) }?)?;
        let name = unsafe { text(name, "metric name") }?;
        let len = exec.record.trajectory.len();
        let r = exec.record.trajectory.get(index).ok_or_else(|| {
            Fail(
                SiamlabStatus::OutOfRange,
                format!("record {index} of {len}"),
            )
        })?;
        let value = match name {
            "step" => r.step as f64,
            "loss" => r.loss,
            "std" => r.std,
            "m_o" => r.m_o,
            "m_r" => r.m_r,
            "covariance" => r.covariance,
            "entropy_lambda" => r.entropy_lambda.unwrap_or(f64::NAN),
            "probe_acc" => r.probe_acc,
            "lr" => r.lr,
            _ => {
                return Err(Fail(
                    SiamlabStatus::InvalidParameter,
                    format!("unknown metric `{name}`"),
                ))
            }
        };
        write_out(out, value)
    })
}

/// A named probe reading produced by the preset's protocol.
///
/// # Safety
/// `run` must be a live handle; `name` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn siamlab_run_reading(
    run: *const SiamlabRun,
    name: *const c_char,
    out: *mut f64,
) -> SiamlabStatus {
    guard(|| {
        let exec = executed(unsafe { run_ref(run) }?)?;
        let name = unsafe { text(name, "reading name") }?;
        let value = exec.reading(name).ok_or_else(|| {
            Fail(
                SiamlabStatus::InvalidParameter,
                format!("no reading `{name}`"),
            )
        })?;
        write_out(out, value)
    })
}

/// Trajectory as CSV. Release the string with [`siamlab_string_free`].
///
/// # Safety
/// `run` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn siamlab_run_csv(
    run: *const SiamlabRun,
    out: *mut *mut c_char,
) -> SiamlabStatus {
    guard(|| {
        let exec = executed(unsafe { run_ref(run) }?)?;
        let csv = CString::new(exec.record.to_csv_string()).expect("CSV has no NUL");
        write_out(out, csv.into_raw())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn siamlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: produced by CString::into_raw in this library.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// # Safety
/// `run` must be null or a live handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn siamlab_run_free(run: *mut SiamlabRun) {
    if !run.is_null() {
        // SAFETY: produced by Box::into_raw in siamlab_run_create.
        drop(unsafe { Box::from_raw(run) });
    }
}

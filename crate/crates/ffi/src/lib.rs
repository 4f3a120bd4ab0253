//! C interface over loaded GATE checkpoints.
//!
//! Every function returns a [`GateStatus`]. On failure the message is kept
//! per thread and can be read with [`gate_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gate_core::autodiff::Tensor;
use gate_core::model::AnyModel;
use gate_core::{persist, GateError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Checkpoint = 3,
    UnknownTask = 4,
    Shape = 5,
    BufferTooSmall = 6,
    Panic = 7,
    Other = 8,
}

/// A model loaded from a checkpoint directory.
pub struct GateHandle {
    model: AnyModel,
    tasks: Vec<CString>,
    kind: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &GateError) -> GateStatus {
    match err {
        GateError::UnknownTask(..) | GateError::InvalidTaskId(..) => GateStatus::UnknownTask,
        GateError::ShapeMismatch { .. } | GateError::Empty(..) => GateStatus::Shape,
        GateError::Checkpoint(..)
        | GateError::Checksum(..)
        | GateError::KindMismatch { .. }
        | GateError::Io { .. }
        | GateError::Json(..) => GateStatus::Checkpoint,
        _ => GateStatus::Other,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (GateStatus, String)>) -> GateStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GateStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside gate");
            GateStatus::Panic
        }
    }
}

fn fail(e: GateError) -> (GateStatus, String) {
    (status_of(&e), e.to_string())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (GateStatus, String)> {
    if p.is_null() {
        return Err((GateStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (GateStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a>(h: *const GateHandle) -> Result<&'a GateHandle, (GateStatus, String)> {
    h.as_ref().ok_or((GateStatus::NullPointer, "handle is null".to_string()))
}

/// Loads the checkpoint directory at `path` into `*out`. Release it with
/// [`gate_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gate_model_load(path: *const c_char, out: *mut *mut GateHandle) -> GateStatus {
    guard(|| {
        if out.is_null() {
            return Err((GateStatus::NullPointer, "out is null".into()));
        }
        let path = c_str(path, "path")?;
        let model = persist::load(Path::new(path)).map_err(fail)?.model;
        let m = model.as_model();
        let tasks = m
            .tasks()
            .into_iter()
            .map(|t| CString::new(t).map_err(|e| (GateStatus::Other, e.to_string())))
            .collect::<Result<_, _>>()?;
        let kind = CString::new(m.kind().to_string()).unwrap_or_default();
        *out = Box::into_raw(Box::new(GateHandle { model, tasks, kind }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `h` must come from [`gate_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gate_model_free(h: *mut GateHandle) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// `"gate"`, `"mtl"` or `"single"`; null for a null handle. The string lives
/// as long as the handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gate_model_kind(h: *const GateHandle) -> *const c_char {
    match h.as_ref() {
        Some(h) => h.kind.as_ptr(),
        None => std::ptr::null(),
    }
}

/// # Safety
/// `h` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gate_model_input_dim(h: *const GateHandle, out: *mut usize) -> GateStatus {
    guard(|| {
        let h = handle(h)?;
        if out.is_null() {
            return Err((GateStatus::NullPointer, "out is null".into()));
        }
        *out = h.model.as_model().config().input_dim;
        Ok(())
    })
}

/// # Safety
/// `h` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gate_model_task_count(h: *const GateHandle, out: *mut usize) -> GateStatus {
    guard(|| {
        let h = handle(h)?;
        if out.is_null() {
            return Err((GateStatus::NullPointer, "out is null".into()));
        }
        *out = h.tasks.len();
        Ok(())
    })
}

/// Name of task `index`. The pointer lives as long as the handle.
///
/// # Safety
/// `h` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gate_model_task_name(
    h: *const GateHandle,
    index: usize,
    out: *mut *const c_char,
) -> GateStatus {
    guard(|| {
        let h = handle(h)?;
        if out.is_null() {
            return Err((GateStatus::NullPointer, "out is null".into()));
        }
        let name = h.tasks.get(index).ok_or_else(|| {
            (GateStatus::UnknownTask, format!("task index {index} out of range ({} tasks)", h.tasks.len()))
        })?;
        *out = name.as_ptr();
        Ok(())
    })
}

/// Predicts `task` for `rows` row-major feature rows of width `cols`,
/// writing one value per row into `out`.
///
/// # Safety
/// `features` must hold `rows * cols` values and `out` at least `out_len`.
#[no_mangle]
pub unsafe extern "C" fn gate_model_predict(
    h: *const GateHandle,
    task: *const c_char,
    features: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> GateStatus {
    guard(|| {
        let h = handle(h)?;
        let task = c_str(task, "task")?;
        if features.is_null() || out.is_null() {
            return Err((GateStatus::NullPointer, "features or out is null".into()));
        }
        if out_len < rows {
            return Err((GateStatus::BufferTooSmall, format!("out holds {out_len} values, need {rows}")));
        }
        let n = rows
            .checked_mul(cols)
            .ok_or((GateStatus::Shape, "rows * cols overflows".to_string()))?;
        let x = std::slice::from_raw_parts(features, n).to_vec();
        let x = Tensor::matrix(rows, cols, x).map_err(fail)?;
        let y = h.model.as_model().predict(task, &x).map_err(fail)?;
        std::slice::from_raw_parts_mut(out, rows).copy_from_slice(y.values());
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf`, truncated
/// and NUL-terminated, and returns the buffer size the full message needs.
///
/// # Safety
/// `buf` must be null or hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn gate_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn gate_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

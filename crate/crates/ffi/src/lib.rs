//! C ABI over `ssmcl`.
//!
//! Every function returns an [`SsmclStatus`]; on failure a description is
//! available from [`ssmcl_last_error`] on the same thread. Matrices are
//! row-major `double` buffers owned by the caller. Datasets and training
//! runs are opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ssmcl::benchgen::{generate, load_dataset, save_dataset, TaskSplit};
use ssmcl::checkpoint::{save_checkpoint, Checkpoint};
use ssmcl::config::RunConfig;
use ssmcl::linalg::sym_eigh;
use ssmcl::nullspace::{build_projector, select_null_rank};
use ssmcl::trainer::{final_metrics, run_task_sequence, AccuracyMatrix, RunOutput};
use ssmcl::{Error, Matrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsmclStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    Domain = 3,
    Config = 4,
    Format = 5,
    Numeric = 6,
    Convergence = 7,
    Io = 8,
    Panic = 9,
}

impl From<&Error> for SsmclStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => Self::Shape,
            Error::Domain(_) => Self::Domain,
            Error::Config(_) => Self::Config,
            Error::Format { .. } => Self::Format,
            Error::Numeric(_) => Self::Numeric,
            Error::Convergence { .. } => Self::Convergence,
            Error::Io(_) => Self::Io,
        }
    }
}

/// Generated or loaded task list.
pub struct SsmclDataset {
    tasks: Vec<TaskSplit>,
}

/// Result of a completed training run.
pub struct SsmclRun {
    output: RunOutput,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SsmclStatus, msg: impl Into<String>) -> SsmclStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (SsmclStatus, String)>) -> SsmclStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsmclStatus::Ok,
        Ok(Err((s, m))) => fail(s, m),
        Err(_) => fail(SsmclStatus::Panic, "internal panic"),
    }
}

fn lib(e: Error) -> (SsmclStatus, String) {
    ((&e).into(), e.to_string())
}

fn null(what: &str) -> (SsmclStatus, String) {
    (SsmclStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], (SsmclStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], (SsmclStatus, String)> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SsmclStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SsmclStatus::Config, format!("{what} is not valid UTF-8")))
}

unsafe fn config(p: *const c_char) -> Result<RunConfig, (SsmclStatus, String)> {
    if p.is_null() {
        return Ok(RunConfig::default());
    }
    RunConfig::from_toml_str(text(p, "config")?).map_err(lib)
}

/// Why the most recent call on this thread failed, or null if it
/// succeeded. Valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn ssmcl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Symmetric eigendecomposition of the `n×n` matrix `s`. Writes `n`
/// descending eigenvalues and the `n×n` eigenvector matrix (columns).
///
/// # Safety
/// `s` and `vectors_out` must hold `n*n` doubles, `values_out` `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ssmcl_sym_eigh(
    s: *const f64,
    n: usize,
    values_out: *mut f64,
    vectors_out: *mut f64,
) -> SsmclStatus {
    guard(|| {
        let m = Matrix::from_vec(n, n, slice(s, n * n, "s")?.to_vec()).map_err(lib)?;
        let eig = sym_eigh(&m).map_err(lib)?;
        slice_mut(values_out, n, "values_out")?.copy_from_slice(&eig.values);
        slice_mut(vectors_out, n * n, "vectors_out")?.copy_from_slice(eig.vectors.as_slice());
        Ok(())
    })
}

/// Null-space dimension chosen by the L-shape corner rule.
///
/// # Safety
/// `eigvals` must hold `len` doubles; `rank_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ssmcl_select_null_rank(eigvals: *const f64, len: usize, rank_out: *mut usize) -> SsmclStatus {
    guard(|| {
        let v = slice(eigvals, len, "eigvals")?;
        if rank_out.is_null() {
            return Err(null("rank_out"));
        }
        *rank_out = select_null_rank(v);
        Ok(())
    })
}

/// Relaxed projector `ηU₀U₀ᵀ + (1−η)I` of the `n×n` covariance `q`.
///
/// # Safety
/// `q` and `h_out` must hold `n*n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ssmcl_build_projector(q: *const f64, n: usize, eta: f64, h_out: *mut f64) -> SsmclStatus {
    guard(|| {
        let m = Matrix::from_vec(n, n, slice(q, n * n, "q")?.to_vec()).map_err(lib)?;
        let h = build_projector(&m, eta).map_err(lib)?;
        slice_mut(h_out, n * n, "h_out")?.copy_from_slice(h.as_slice());
        Ok(())
    })
}

fn write_metrics(
    acc: &AccuracyMatrix,
    avg_accuracy: *mut f64,
    avg_forgetting: *mut f64,
    has_forgetting: *mut c_int,
) -> Result<(), (SsmclStatus, String)> {
    if avg_accuracy.is_null() || avg_forgetting.is_null() || has_forgetting.is_null() {
        return Err(null("metric output"));
    }
    let m = final_metrics(acc).map_err(lib)?;
    unsafe {
        *avg_accuracy = m.avg_accuracy;
        *avg_forgetting = m.avg_forgetting.unwrap_or(0.0);
        *has_forgetting = c_int::from(m.avg_forgetting.is_some());
    }
    Ok(())
}

/// Final average accuracy and forgetting of a `t×t` row-major accuracy
/// matrix; entries above the diagonal are ignored. `has_forgetting` is 0
/// when `t == 1`.
///
/// # Safety
/// `acc` must hold `t*t` doubles; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ssmcl_final_metrics(
    acc: *const f64,
    t: usize,
    avg_accuracy: *mut f64,
    avg_forgetting: *mut f64,
    has_forgetting: *mut c_int,
) -> SsmclStatus {
    guard(|| {
        let a = slice(acc, t * t, "acc")?;
        let rows = (0..t).map(|j| a[j * t..j * t + j + 1].to_vec()).collect();
        let m = AccuracyMatrix::from_rows(rows).map_err(lib)?;
        write_metrics(&m, avg_accuracy, avg_forgetting, has_forgetting)
    })
}

/// Generates the benchmark described by the `[bench]` table of a TOML
/// config (null for defaults).
///
/// # Safety
/// `config_toml` must be null or a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ssmcl_dataset_generate(config_toml: *const c_char, out: *mut *mut SsmclDataset) -> SsmclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = config(config_toml)?;
        let tasks = generate(&cfg.bench).map_err(lib)?;
        *out = Box::into_raw(Box::new(SsmclDataset { tasks }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ssmcl_dataset_load(path: *const c_char, out: *mut *mut SsmclDataset) -> SsmclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let tasks = load_dataset(&PathBuf::from(text(path, "path")?)).map_err(lib)?;
        *out = Box::into_raw(Box::new(SsmclDataset { tasks }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ssmcl_dataset_save(ds: *const SsmclDataset, path: *const c_char) -> SsmclStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        save_dataset(&PathBuf::from(text(path, "path")?), &ds.tasks).map_err(lib)
    })
}

/// # Safety
/// `ds` must come from this library; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ssmcl_dataset_num_tasks(ds: *const SsmclDataset, out: *mut usize) -> SsmclStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ds.tasks.len();
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ssmcl_dataset_free(ds: *mut SsmclDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains on `ds` (or on the config's benchmark when `ds` is null) with the
/// settings of a TOML run config (null for defaults).
///
/// # Safety
/// Pointers must be null or valid as described; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ssmcl_run_train(
    config_toml: *const c_char,
    ds: *const SsmclDataset,
    out: *mut *mut SsmclRun,
) -> SsmclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = config(config_toml)?;
        let generated;
        let tasks = match ds.as_ref() {
            Some(d) => &d.tasks,
            None => {
                generated = cfg.tasks().map_err(lib)?;
                &generated
            }
        };
        let d_raw = tasks.first().map_or(0, |t| t.train.d_raw());
        let train = cfg.train_config(d_raw).map_err(lib)?;
        let output = run_task_sequence(&train, tasks).map_err(lib)?;
        *out = Box::into_raw(Box::new(SsmclRun { output }));
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ssmcl_run_num_tasks(run: *const SsmclRun, out: *mut usize) -> SsmclStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = run.output.acc.n_tasks();
        Ok(())
    })
}

/// Copies the accuracy matrix as `t×t` row-major doubles; entries above the
/// diagonal are written as NaN. `capacity` is the buffer length in doubles.
///
/// # Safety
/// `run` must come from this library; `acc_out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn ssmcl_run_accuracy(run: *const SsmclRun, acc_out: *mut f64, capacity: usize) -> SsmclStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let t = run.output.acc.n_tasks();
        if capacity < t * t {
            return Err((SsmclStatus::Shape, format!("need {} doubles, capacity is {capacity}", t * t)));
        }
        let buf = slice_mut(acc_out, t * t, "acc_out")?;
        for j in 0..t {
            for i in 0..t {
                buf[j * t + i] = run.output.acc.get(j, i).unwrap_or(f64::NAN);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ssmcl_run_metrics(
    run: *const SsmclRun,
    avg_accuracy: *mut f64,
    avg_forgetting: *mut f64,
    has_forgetting: *mut c_int,
) -> SsmclStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        write_metrics(&run.output.acc, avg_accuracy, avg_forgetting, has_forgetting)
    })
}

/// # Safety
/// `run` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ssmcl_run_save_checkpoint(run: *const SsmclRun, path: *const c_char) -> SsmclStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let ck = Checkpoint::from_state(&run.output.state);
        save_checkpoint(&PathBuf::from(text(path, "path")?), &ck).map_err(lib)
    })
}

/// # Safety
/// `run` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ssmcl_run_free(run: *mut SsmclRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

//! C interface to the conformer models: opaque dataset and model handles,
//! integer status codes, and a per-thread error message for the last failure.
//!
//! Every function is safe to call with null handles (it reports
//! `CONFLOW_STATUS_NULL_ARGUMENT` instead of crashing), and every buffer is
//! caller-owned. Handles must be released with the matching `_free` call.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use conflow::equinet::ModelParams;
use conflow::flowrt::{load_checkpoint, sample_conformers};
use conflow::geomops::{aligned_rmsd, PointCloud};
use conflow::moldata::{parse_dataset_file, DatasetIndex};
use conflow::Error;

/// Outcome of a call. Anything other than `Ok` leaves a message readable
/// through `conflow_last_error`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConflowStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// Arguments were present but unusable (bad index, wrong length, ...).
    InvalidArgument = 2,
    /// The file could not be read or written.
    Io = 3,
    /// The file was read but its contents did not parse or validate.
    BadData = 4,
    /// A numeric routine failed.
    Compute = 5,
    /// The output buffer is too small; nothing was written.
    BufferTooSmall = 6,
    /// A panic was caught at the boundary.
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = owned);
}

fn status_of(err: &Error) -> ConflowStatus {
    match err {
        Error::Io { .. } => ConflowStatus::Io,
        Error::Parse { .. }
        | Error::Validation { .. }
        | Error::Checkpoint(_)
        | Error::CheckpointVersion { .. } => ConflowStatus::BadData,
        Error::InvalidInput(_) => ConflowStatus::InvalidArgument,
        Error::Geometry(_) | Error::Irreps(_) | Error::Model(_) => ConflowStatus::Compute,
    }
}

fn fail(err: Error) -> ConflowStatus {
    set_error(&err.to_string());
    status_of(&err)
}

fn guarded(f: impl FnOnce() -> ConflowStatus) -> ConflowStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            ConflowStatus::Internal
        }
    }
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Option<&'a Path> {
    if ptr.is_null() {
        return None;
    }
    CStr::from_ptr(ptr).to_str().ok().map(Path::new)
}

/// Molecules with their conformers, loaded from a JSON-lines file.
pub struct ConflowDataset {
    index: DatasetIndex,
}

/// Trained vector-field weights loaded from a checkpoint.
pub struct ConflowModel {
    params: ModelParams,
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn conflow_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn conflow_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a dataset from a JSON-lines file. On success stores a new handle in
/// `out`; release it with `conflow_dataset_free`.
#[no_mangle]
pub unsafe extern "C" fn conflow_dataset_load(
    path: *const c_char,
    out: *mut *mut ConflowDataset,
) -> ConflowStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out pointer is null");
            return ConflowStatus::NullArgument;
        }
        let Some(path) = path_arg(path) else {
            set_error("path is null or not valid UTF-8");
            return ConflowStatus::NullArgument;
        };
        match parse_dataset_file(path) {
            Ok(index) => {
                *out = Box::into_raw(Box::new(ConflowDataset { index }));
                ConflowStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a dataset handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn conflow_dataset_free(dataset: *mut ConflowDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of molecules in the dataset.
#[no_mangle]
pub unsafe extern "C" fn conflow_dataset_len(
    dataset: *const ConflowDataset,
    out: *mut usize,
) -> ConflowStatus {
    guarded(|| {
        let (Some(ds), false) = (dataset.as_ref(), out.is_null()) else {
            set_error("dataset or out pointer is null");
            return ConflowStatus::NullArgument;
        };
        *out = ds.index.len();
        ConflowStatus::Ok
    })
}

/// Atom count of one molecule.
#[no_mangle]
pub unsafe extern "C" fn conflow_dataset_atom_count(
    dataset: *const ConflowDataset,
    molecule: usize,
    out: *mut usize,
) -> ConflowStatus {
    guarded(|| {
        let (Some(ds), false) = (dataset.as_ref(), out.is_null()) else {
            set_error("dataset or out pointer is null");
            return ConflowStatus::NullArgument;
        };
        let Some(mol) = ds.index.molecules.get(molecule) else {
            set_error("molecule index out of range");
            return ConflowStatus::InvalidArgument;
        };
        *out = mol.num_atoms();
        ConflowStatus::Ok
    })
}

/// Conformer count of one molecule.
#[no_mangle]
pub unsafe extern "C" fn conflow_dataset_conformer_count(
    dataset: *const ConflowDataset,
    molecule: usize,
    out: *mut usize,
) -> ConflowStatus {
    guarded(|| {
        let (Some(ds), false) = (dataset.as_ref(), out.is_null()) else {
            set_error("dataset or out pointer is null");
            return ConflowStatus::NullArgument;
        };
        let Some(mol) = ds.index.molecules.get(molecule) else {
            set_error("molecule index out of range");
            return ConflowStatus::InvalidArgument;
        };
        *out = mol.conformers.len();
        ConflowStatus::Ok
    })
}

/// Copy one molecule id into `buf` as a nul-terminated string. `cap` is the
/// buffer size in bytes including the terminator; on success `written` (when
/// non-null) receives the id length without the terminator.
#[no_mangle]
pub unsafe extern "C" fn conflow_dataset_molecule_id(
    dataset: *const ConflowDataset,
    molecule: usize,
    buf: *mut c_char,
    cap: usize,
    written: *mut usize,
) -> ConflowStatus {
    guarded(|| {
        let (Some(ds), false) = (dataset.as_ref(), buf.is_null()) else {
            set_error("dataset or buffer pointer is null");
            return ConflowStatus::NullArgument;
        };
        let Some(mol) = ds.index.molecules.get(molecule) else {
            set_error("molecule index out of range");
            return ConflowStatus::InvalidArgument;
        };
        let id = mol.id.as_bytes();
        if cap < id.len() + 1 {
            set_error("id buffer is too small");
            return ConflowStatus::BufferTooSmall;
        }
        ptr::copy_nonoverlapping(id.as_ptr(), buf as *mut u8, id.len());
        *buf.add(id.len()) = 0;
        if !written.is_null() {
            *written = id.len();
        }
        ConflowStatus::Ok
    })
}

/// Load model weights from a checkpoint file. On success stores a new handle
/// in `out`; release it with `conflow_model_free`.
#[no_mangle]
pub unsafe extern "C" fn conflow_model_load(
    path: *const c_char,
    out: *mut *mut ConflowModel,
) -> ConflowStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out pointer is null");
            return ConflowStatus::NullArgument;
        }
        let Some(path) = path_arg(path) else {
            set_error("path is null or not valid UTF-8");
            return ConflowStatus::NullArgument;
        };
        match load_checkpoint(path) {
            Ok(ckpt) => {
                *out = Box::into_raw(Box::new(ConflowModel { params: ckpt.params }));
                ConflowStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a model handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn conflow_model_free(model: *mut ConflowModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total number of trainable parameters in the model.
#[no_mangle]
pub unsafe extern "C" fn conflow_model_parameter_count(
    model: *const ConflowModel,
    out: *mut usize,
) -> ConflowStatus {
    guarded(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            set_error("model or out pointer is null");
            return ConflowStatus::NullArgument;
        };
        *out = m.params.param_count();
        ConflowStatus::Ok
    })
}

/// Sample conformers for one molecule of the dataset. Writes `count` clouds
/// of `atom_count * 3` doubles each (x, y, z per atom, clouds back to back)
/// into `coords`, whose capacity `cap` is in doubles. The draw is
/// deterministic in (model, molecule id, seed).
#[no_mangle]
pub unsafe extern "C" fn conflow_sample(
    model: *const ConflowModel,
    dataset: *const ConflowDataset,
    molecule: usize,
    count: usize,
    steps: usize,
    seed: u64,
    coords: *mut f64,
    cap: usize,
) -> ConflowStatus {
    guarded(|| {
        let (Some(m), Some(ds), false) = (model.as_ref(), dataset.as_ref(), coords.is_null())
        else {
            set_error("model, dataset or coords pointer is null");
            return ConflowStatus::NullArgument;
        };
        let Some(mol) = ds.index.molecules.get(molecule) else {
            set_error("molecule index out of range");
            return ConflowStatus::InvalidArgument;
        };
        let needed = count * mol.num_atoms() * 3;
        if cap < needed {
            set_error("coordinate buffer is too small");
            return ConflowStatus::BufferTooSmall;
        }
        match sample_conformers(&m.params, mol, count, steps, seed) {
            Ok(clouds) => {
                let out = std::slice::from_raw_parts_mut(coords, needed);
                let mut at = 0;
                for cloud in &clouds {
                    for p in cloud.points() {
                        out[at] = p[0];
                        out[at + 1] = p[1];
                        out[at + 2] = p[2];
                        at += 3;
                    }
                }
                ConflowStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Root-mean-square deviation between two clouds of `points` atoms after
/// centering and optimal rotation. Both arrays hold `points * 3` doubles.
#[no_mangle]
pub unsafe extern "C" fn conflow_aligned_rmsd(
    a: *const f64,
    b: *const f64,
    points: usize,
    out: *mut f64,
) -> ConflowStatus {
    guarded(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            set_error("input or out pointer is null");
            return ConflowStatus::NullArgument;
        }
        if points == 0 {
            set_error("point count must be nonzero");
            return ConflowStatus::InvalidArgument;
        }
        let read = |ptr: *const f64| -> conflow::Result<PointCloud> {
            let flat = std::slice::from_raw_parts(ptr, points * 3);
            PointCloud::new(
                flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            )
        };
        let (pa, pb) = match (read(a), read(b)) {
            (Ok(pa), Ok(pb)) => (pa, pb),
            (Err(e), _) | (_, Err(e)) => return fail(e),
        };
        match aligned_rmsd(&pa, &pb) {
            Ok(v) => {
                *out = v;
                ConflowStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

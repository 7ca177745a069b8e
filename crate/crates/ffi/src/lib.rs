//! C ABI over dp-core.
//!
//! Every fallible call returns a `DpStatus`; on failure the message is kept
//! per thread and can be read with `dp_last_error`. Models and
//! moving-average states are opaque handles owned by the caller and
//! released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dp_core::data::weight_bin;
use dp_core::eval::{decide, window_predict, MAState, WindowProbs};
use dp_core::model::{GarmentNet, ModelPreset, SHAPE_CLASSES, WEIGHT_CLASSES};
use dp_core::synth::{generate_dataset, DatasetSpec};
use dp_core::tensor::{LrSchedule, Tensor};
use dp_core::Error;

/// Result of every fallible call. The non-zero codes follow the `dp`
/// binary's exit codes where they overlap.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpStatus {
    Ok = 0,
    /// Bad arguments: wrong sizes, unknown names, preset mismatch.
    Usage = 1,
    /// Missing or malformed files.
    Data = 2,
    /// Non-finite values or a broken invariant.
    Invariant = 3,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 4,
    /// The library panicked; this is a bug.
    Panic = 5,
}

/// Trained or freshly initialised network.
pub struct DpModel {
    net: GarmentNet,
}

/// Running moving average of window probabilities for one sequence.
pub struct DpMaState {
    state: MAState,
}

/// Moving-average decision. Class indices follow the ordering used by
/// `dp_shape_class_name` and `dp_weight_class_name`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DpDecision {
    pub shape: u32,
    pub weight: u32,
    /// Another class shared the maximum; the lowest index was taken.
    pub shape_tie: bool,
    pub weight_tie: bool,
}

pub const DP_SHAPE_CLASSES: usize = 5;
pub const DP_WEIGHT_CLASSES: usize = 3;
const _: () = assert!(DP_SHAPE_CLASSES == SHAPE_CLASSES && DP_WEIGHT_CLASSES == WEIGHT_CLASSES);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls were replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DpStatus {
    match e.exit_code() {
        1 => DpStatus::Usage,
        2 => DpStatus::Data,
        _ => DpStatus::Invariant,
    }
}

enum Failure {
    Core(Error),
    Arg(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, records any failure and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DpStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            let status = status_of(&e);
            set_error(e.to_string());
            status
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            DpStatus::InvalidArgument
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::Arg(format!("{what} is null")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version, static string.
#[no_mangle]
pub extern "C" fn dp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Static name of shape class `index`, or null when out of range.
#[no_mangle]
pub extern "C" fn dp_shape_class_name(index: u32) -> *const c_char {
    const NAMES: [&CStr; SHAPE_CLASSES] = [c"pant", c"shirt", c"sweater", c"towel", c"tshirt"];
    NAMES.get(index as usize).map_or(std::ptr::null(), |c| c.as_ptr())
}

/// Static name of weight class `index`, or null when out of range.
#[no_mangle]
pub extern "C" fn dp_weight_class_name(index: u32) -> *const c_char {
    const NAMES: [&CStr; WEIGHT_CLASSES] = [c"light", c"medium", c"heavy"];
    NAMES.get(index as usize).map_or(std::ptr::null(), |c| c.as_ptr())
}

/// New randomly initialised model from a named preset (`toy`, `paper`,
/// optionally with `-rgb`).
///
/// # Safety
/// `preset` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dp_model_new(preset: *const c_char, seed: u64, out: *mut *mut DpModel) -> DpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let preset = ModelPreset::by_name(str_arg(preset, "preset")?)?;
        let net = GarmentNet::new(&preset, seed)?;
        *out = Box::into_raw(Box::new(DpModel { net }));
        Ok(())
    })
}

/// Model from a checkpoint written by `dp train`.
///
/// # Safety
/// `preset` and `checkpoint` must be nul-terminated strings and `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dp_model_load(
    preset: *const c_char,
    checkpoint: *const c_char,
    out: *mut *mut DpModel,
) -> DpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let preset = ModelPreset::by_name(str_arg(preset, "preset")?)?;
        let net = GarmentNet::load(&preset, Path::new(str_arg(checkpoint, "checkpoint")?))?;
        *out = Box::into_raw(Box::new(DpModel { net }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `dp_model_new`/`dp_model_load` and not be used
/// afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dp_model_free(model: *mut DpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Channels, height and width of one input frame.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dp_model_input_dims(
    model: *const DpModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> DpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| Failure::Arg("model is null".into()))?;
        let p = m.net.preset();
        *out_arg(channels, "channels")? = p.input_channels;
        *out_arg(height, "height")? = p.input_size.0;
        *out_arg(width, "width")? = p.input_size.1;
        Ok(())
    })
}

/// Class probabilities of one 3-frame window. `frames` holds three
/// consecutive frames back to back, each `channels * height * width`
/// values in row-major CHW order.
///
/// # Safety
/// `model` must be a live handle, `frames` must point to `len` values and
/// the outputs to `DP_SHAPE_CLASSES` and `DP_WEIGHT_CLASSES` values.
#[no_mangle]
pub unsafe extern "C" fn dp_predict_window(
    model: *const DpModel,
    frames: *const f64,
    len: usize,
    shape_probs: *mut f64,
    weight_probs: *mut f64,
) -> DpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| Failure::Arg("model is null".into()))?;
        let p = m.net.preset();
        let per_frame = p.input_channels * p.input_size.0 * p.input_size.1;
        if len != 3 * per_frame {
            return Err(Error::Usage(format!("window needs {} values, got {len}", 3 * per_frame)).into());
        }
        let data = slice_arg(frames, len, "frames")?;
        let shape = [1, p.input_channels, p.input_size.0, p.input_size.1];
        let ts = data
            .chunks(per_frame)
            .map(|c| Tensor::new(&shape, c.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let probs = window_predict(&m.net, [&ts[0], &ts[1], &ts[2]])?;
        if shape_probs.is_null() || weight_probs.is_null() {
            return Err(Failure::Arg("output buffer is null".into()));
        }
        std::slice::from_raw_parts_mut(shape_probs, SHAPE_CLASSES).copy_from_slice(&probs.shape);
        std::slice::from_raw_parts_mut(weight_probs, WEIGHT_CLASSES).copy_from_slice(&probs.weight);
        Ok(())
    })
}

/// Empty moving-average state. Never null.
#[no_mangle]
pub extern "C" fn dp_ma_new() -> *mut DpMaState {
    Box::into_raw(Box::new(DpMaState { state: MAState::new() }))
}

/// # Safety
/// `state` must come from `dp_ma_new` and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn dp_ma_free(state: *mut DpMaState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// Adds one window's probabilities.
///
/// # Safety
/// `state` must be a live handle; `shape_probs` and `weight_probs` must
/// point to `DP_SHAPE_CLASSES` and `DP_WEIGHT_CLASSES` values.
#[no_mangle]
pub unsafe extern "C" fn dp_ma_update(
    state: *mut DpMaState,
    shape_probs: *const f64,
    weight_probs: *const f64,
) -> DpStatus {
    guard(|| {
        let s = out_arg(state, "state")?;
        let shape = slice_arg(shape_probs, SHAPE_CLASSES, "shape_probs")?;
        let weight = slice_arg(weight_probs, WEIGHT_CLASSES, "weight_probs")?;
        if shape.iter().chain(weight).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("window probabilities".into()).into());
        }
        s.state.update(&WindowProbs {
            shape: shape.try_into().expect("length checked"),
            weight: weight.try_into().expect("length checked"),
        });
        Ok(())
    })
}

/// Windows aggregated so far; 0 for a null handle.
///
/// # Safety
/// `state` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dp_ma_count(state: *const DpMaState) -> usize {
    state.as_ref().map_or(0, |s| s.state.count())
}

/// Current moving average, written to the two output arrays.
///
/// # Safety
/// As for `dp_ma_update`, with writable outputs.
#[no_mangle]
pub unsafe extern "C" fn dp_ma_current(state: *const DpMaState, shape_out: *mut f64, weight_out: *mut f64) -> DpStatus {
    guard(|| {
        let s = state.as_ref().ok_or_else(|| Failure::Arg("state is null".into()))?;
        let ma = s
            .state
            .current()
            .ok_or_else(|| Error::Usage("no window has been aggregated yet".into()))?;
        if shape_out.is_null() || weight_out.is_null() {
            return Err(Failure::Arg("output buffer is null".into()));
        }
        std::slice::from_raw_parts_mut(shape_out, SHAPE_CLASSES).copy_from_slice(&ma.shape);
        std::slice::from_raw_parts_mut(weight_out, WEIGHT_CLASSES).copy_from_slice(&ma.weight);
        Ok(())
    })
}

/// Argmax of the current moving average. A usage error before the first
/// window.
///
/// # Safety
/// `state` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dp_ma_decide(state: *const DpMaState, out: *mut DpDecision) -> DpStatus {
    guard(|| {
        let s = state.as_ref().ok_or_else(|| Failure::Arg("state is null".into()))?;
        let out = out_arg(out, "out")?;
        let d = decide(&s.state)?;
        *out = DpDecision {
            shape: d.shape.index() as u32,
            weight: d.weight.index() as u32,
            shape_tie: d.shape_tie,
            weight_tie: d.weight_tie,
        };
        Ok(())
    })
}

/// Weight class index of a garment mass in grams.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dp_weight_bin(mass_grams: f64, out: *mut u32) -> DpStatus {
    guard(|| {
        *out_arg(out, "out")? = weight_bin(mass_grams)?.index() as u32;
        Ok(())
    })
}

/// Step-decay learning rate at `epoch`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dp_lr_at(base_lr: f64, step_size: usize, decay: f64, epoch: usize, out: *mut f64) -> DpStatus {
    guard(|| {
        *out_arg(out, "out")? = LrSchedule::new(base_lr, step_size, decay)?.lr_at(epoch);
        Ok(())
    })
}

/// Generates a built-in dataset spec (`toy` or `paper`) under `out_dir`.
///
/// # Safety
/// `spec` and `out_dir` must be nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn dp_generate(spec: *const c_char, out_dir: *const c_char, seed: u64) -> DpStatus {
    guard(|| {
        let spec = DatasetSpec::by_name(str_arg(spec, "spec")?)?;
        generate_dataset(&spec, Path::new(str_arg(out_dir, "out_dir")?), seed)?;
        Ok(())
    })
}

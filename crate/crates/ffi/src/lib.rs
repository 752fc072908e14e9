//! C ABI over the quantizer, checkpoint loading and generation.
//!
//! Objects are opaque handles created by `*_load`/`*_new` and released with
//! the matching `*_free`. Every fallible call returns a status code; on
//! failure `cd_last_error()` describes the most recent error on the calling
//! thread. Panics never cross the boundary and are reported as
//! `CD_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cubediff::checkpoint::load_checkpoint;
use cubediff::predictor::Predictor;
use cubediff::quantizer::{dequantize, quantize, CalibrationStats, QuantizerSpec};
use cubediff::sampler::{generate, SampleConfig};
use cubediff::verify::{run_suite, Suite, VerifyOptions};
use cubediff::{Error, FeatureTensor, Shape3, TokenTensor};

pub const CD_OK: i32 = 0;
pub const CD_ERR_NULL: i32 = 1;
pub const CD_ERR_INVALID: i32 = 2;
pub const CD_ERR_SHAPE: i32 = 3;
pub const CD_ERR_IO: i32 = 4;
pub const CD_ERR_INTEGRITY: i32 = 5;
pub const CD_ERR_CONFIG: i32 = 6;
pub const CD_ERR_VERIFY: i32 = 7;
pub const CD_ERR_PANIC: i32 = 8;

/// Quantizer specification handle.
pub struct CdQuantizer {
    spec: QuantizerSpec,
}

/// Trained predictor handle.
pub struct CdModel {
    model: Predictor,
}

/// Generation options; `class_id < 0` means unconditional.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CdSampleOptions {
    pub steps: u32,
    pub temperature: f64,
    pub guidance: f64,
    pub class_id: i64,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn code_of(e: &Error) -> i32 {
    match e {
        Error::ShapeMismatch(_) | Error::InvalidShape(_) | Error::OutOfBounds { .. } => CD_ERR_SHAPE,
        Error::Io { .. } => CD_ERR_IO,
        Error::Integrity { .. } | Error::Version { .. } | Error::Json(_) => CD_ERR_INTEGRITY,
        Error::Config(_) => CD_ERR_CONFIG,
        _ => CD_ERR_INVALID,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (i32, String)>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CD_OK,
        Ok(Err((code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            CD_ERR_PANIC
        }
    }
}

fn lib(e: Error) -> (i32, String) {
    (code_of(&e), e.to_string())
}

fn null(what: &str) -> (i32, String) {
    (CD_ERR_NULL, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, (i32, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| (CD_ERR_INVALID, "path is not valid UTF-8".into()))
}

fn shape_arg(h: usize, w: usize, d: usize) -> Result<Shape3, (i32, String)> {
    Shape3::new(h, w, d).map_err(lib)
}

/// Message for the last failed call on this thread; empty if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a JSON quantizer spec.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cd_quantizer_load(path: *const c_char, out: *mut *mut CdQuantizer) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = QuantizerSpec::load(path_arg(path)?).map_err(lib)?;
        *out = Box::into_raw(Box::new(CdQuantizer { spec }));
        Ok(())
    })
}

/// Quantizer with the same `[lo, hi]` range on every dimension.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cd_quantizer_new_uniform(
    levels: u32,
    dims: u32,
    lo: f64,
    hi: f64,
    out: *mut *mut CdQuantizer,
) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let stats = CalibrationStats::uniform(dims as usize, lo, hi).map_err(lib)?;
        let spec = QuantizerSpec::new(levels as usize, stats).map_err(lib)?;
        *out = Box::into_raw(Box::new(CdQuantizer { spec }));
        Ok(())
    })
}

/// # Safety
/// `q` must come from a `cd_quantizer_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cd_quantizer_free(q: *mut CdQuantizer) {
    if !q.is_null() {
        drop(Box::from_raw(q));
    }
}

/// Levels of `q`, or 0 if `q` is null.
///
/// # Safety
/// `q` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cd_quantizer_levels(q: *const CdQuantizer) -> u32 {
    q.as_ref().map_or(0, |q| q.spec.levels() as u32)
}

/// Quantizes `h*w*d` row-major values into `ids`.
///
/// # Safety
/// `values` and `ids` must point to `h*w*d` elements.
#[no_mangle]
pub unsafe extern "C" fn cd_quantize(
    q: *const CdQuantizer,
    values: *const f32,
    h: usize,
    w: usize,
    d: usize,
    ids: *mut u16,
) -> i32 {
    guard(|| {
        let q = q.as_ref().ok_or_else(|| null("quantizer"))?;
        if values.is_null() || ids.is_null() {
            return Err(null("buffer"));
        }
        let shape = shape_arg(h, w, d)?;
        let input = std::slice::from_raw_parts(values, shape.total()).to_vec();
        let z = FeatureTensor::new(shape, input).map_err(lib)?;
        let tokens = quantize(&z, &q.spec).map_err(lib)?;
        ptr::copy_nonoverlapping(tokens.ids().as_ptr(), ids, shape.total());
        Ok(())
    })
}

/// Writes bin centers for `h*w*d` ids into `values`.
///
/// # Safety
/// `ids` and `values` must point to `h*w*d` elements.
#[no_mangle]
pub unsafe extern "C" fn cd_dequantize(
    q: *const CdQuantizer,
    ids: *const u16,
    h: usize,
    w: usize,
    d: usize,
    values: *mut f32,
) -> i32 {
    guard(|| {
        let q = q.as_ref().ok_or_else(|| null("quantizer"))?;
        if values.is_null() || ids.is_null() {
            return Err(null("buffer"));
        }
        let shape = shape_arg(h, w, d)?;
        let input = std::slice::from_raw_parts(ids, shape.total()).to_vec();
        let tokens = TokenTensor::new(shape, q.spec.levels(), input).map_err(lib)?;
        let z = dequantize(&tokens, &q.spec).map_err(lib)?;
        ptr::copy_nonoverlapping(z.values().as_ptr(), values, shape.total());
        Ok(())
    })
}

/// Loads a checkpoint; `use_ema != 0` selects the averaged weights.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cd_model_load(path: *const c_char, use_ema: i32, out: *mut *mut CdModel) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = load_checkpoint(path_arg(path)?).map_err(lib)?;
        let params = if use_ema != 0 { ckpt.state.ema } else { ckpt.state.params };
        let model = Predictor::new(params, ckpt.spec).map_err(lib)?;
        *out = Box::into_raw(Box::new(CdModel { model }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from `cd_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cd_model_free(m: *mut CdModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Shape, levels and class count of the model's token tensors.
///
/// # Safety
/// All out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cd_model_info(
    m: *const CdModel,
    h: *mut usize,
    w: *mut usize,
    d: *mut usize,
    levels: *mut u32,
    classes: *mut u32,
) -> i32 {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        if h.is_null() || w.is_null() || d.is_null() || levels.is_null() || classes.is_null() {
            return Err(null("out"));
        }
        let cfg = m.model.params().config();
        *h = cfg.shape.h;
        *w = cfg.shape.w;
        *d = cfg.shape.d;
        *levels = cfg.levels as u32;
        *classes = cfg.classes as u32;
        Ok(())
    })
}

/// Runs one generation into `ids` (`len` must equal `h*w*d`).
/// `model_calls` may be null.
///
/// # Safety
/// `ids` must point to `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn cd_generate(
    m: *const CdModel,
    opts: *const CdSampleOptions,
    ids: *mut u16,
    len: usize,
    model_calls: *mut u32,
) -> i32 {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let opts = opts.as_ref().ok_or_else(|| null("options"))?;
        if ids.is_null() {
            return Err(null("ids"));
        }
        let total = m.model.params().config().shape.total();
        if len != total {
            return Err((CD_ERR_SHAPE, format!("buffer holds {len} ids, model produces {total}")));
        }
        let cfg = SampleConfig {
            steps: opts.steps as usize,
            temperature: opts.temperature,
            guidance: opts.guidance,
            class_id: usize::try_from(opts.class_id).ok(),
            seed: opts.seed,
            ..SampleConfig::default()
        };
        let (q, traj) = generate(&m.model, &cfg).map_err(lib)?;
        ptr::copy_nonoverlapping(q.ids().as_ptr(), ids, total);
        if !model_calls.is_null() {
            *model_calls = traj.model_calls as u32;
        }
        Ok(())
    })
}

/// Runs a self-check suite by name; `CD_ERR_VERIFY` if any check fails.
///
/// # Safety
/// `suite` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cd_verify(suite: *const c_char, seed: u64) -> i32 {
    guard(|| {
        if suite.is_null() {
            return Err(null("suite"));
        }
        let name = CStr::from_ptr(suite)
            .to_str()
            .map_err(|_| (CD_ERR_INVALID, "suite is not valid UTF-8".into()))?;
        let suite: Suite = name.parse().map_err(lib)?;
        let opts = VerifyOptions {
            seed,
            ..VerifyOptions::default()
        };
        let report = run_suite(suite, &opts).map_err(lib)?;
        if report.passed() {
            Ok(())
        } else {
            Err((CD_ERR_VERIFY, report.to_string()))
        }
    })
}

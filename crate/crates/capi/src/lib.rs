//! C ABI for the registration engine.
//!
//! Every function is exported with the `spreg_` prefix and operates on
//! opaque handles. Ownership rules:
//!
//! * `*_create`, `*_load`, `*_read`, and `spreg_register` return owned
//!   handles the caller must release with the matching `*_destroy`.
//!   They return null on failure.
//! * Accessors returning raw data pointers borrow from the handle; the
//!   pointer is valid until the handle is destroyed or mutated.
//! * Strings returned as `char*` are owned by the caller and released
//!   with [`spreg_string_destroy`]; `const char*` returns are borrowed.
//!
//! Fallible functions either return a [`SpregStatus`] or null; in both
//! cases [`spreg_last_error_message`] describes the most recent failure
//! on the calling thread. All entry points catch panics and convert
//! them to [`SpregStatus::Panic`] rather than unwinding across the FFI
//! boundary.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use smoothproper::cli::{config_from_json_str, set_config_key, RunConfig};
use smoothproper::grid::{
    load_image, read_flow, save_image, warp, write_flow, BitDepth, Image2D, VectorField2D,
};
use smoothproper::registrar::{register, summarize_jacobian, RegistrationResult};
use smoothproper::Error;

/// Result of a fallible API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpregStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Invalid input: bad dimensions, configuration, or encoding.
    InvalidInput = 2,
    /// Numeric failure: the optimization produced a non-finite value.
    NumericFailure = 3,
    /// A file could not be read, written, or decoded.
    IoFailure = 4,
    /// An internal invariant failed; the handle state is unspecified.
    Panic = 5,
}

/// A grayscale image with double-precision samples in [0, 1].
pub struct SpregImage {
    inner: Image2D,
}

/// A dense 2D displacement field (one dx/dy pair per pixel).
pub struct SpregFlow {
    inner: VectorField2D,
}

/// A full run configuration (pyramid, smoothing layer, loss, optimizer,
/// output, and benchmark sections).
pub struct SpregConfig {
    inner: RunConfig,
}

/// Everything a registration run produced.
pub struct SpregResult {
    inner: RegistrationResult,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> =
        RefCell::new(CString::new("").expect("empty C string"));
}

fn set_last_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("NUL-free error message");
    });
}

fn status_of(e: &Error) -> SpregStatus {
    match e.exit_code() {
        3 => SpregStatus::NumericFailure,
        4 => SpregStatus::IoFailure,
        _ => SpregStatus::InvalidInput,
    }
}

fn fail(e: &Error) -> SpregStatus {
    set_last_error(&e.to_string());
    status_of(e)
}

/// Runs `f` with panics converted to an error status.
fn guarded<T>(on_panic: T, f: impl FnOnce() -> T) -> T {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(_) => {
            set_last_error("internal panic");
            on_panic
        }
    }
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, SpregStatus> {
    if p.is_null() {
        set_last_error(&format!("{what} must not be null"));
        return Err(SpregStatus::NullArgument);
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(s),
        Err(_) => {
            set_last_error(&format!("{what} is not valid UTF-8"));
            Err(SpregStatus::InvalidInput)
        }
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, SpregStatus> {
    if p.is_null() {
        set_last_error(&format!("{what} must not be null"));
        return Err(SpregStatus::NullArgument);
    }
    Ok(&*p)
}

fn boxed<H>(handle: H) -> *mut H {
    Box::into_raw(Box::new(handle))
}

// ---------------------------------------------------------------------
// Library metadata and error reporting
// ---------------------------------------------------------------------

/// Returns the library version as a static string.
#[no_mangle]
pub extern "C" fn spreg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns a description of the calling thread's most recent failure
/// (empty if none). The pointer stays valid until the next failing call
/// on the same thread.
#[no_mangle]
pub extern "C" fn spreg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Releases a string returned by this library (null is a no-op).
///
/// # Safety
/// `s` must be null or an owned string obtained from this library.
#[no_mangle]
pub unsafe extern "C" fn spreg_string_destroy(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------

/// Creates an image by copying `width * height` row-major samples.
///
/// # Safety
/// `data` must be null or point to at least `width * height` doubles.
#[no_mangle]
pub unsafe extern "C" fn spreg_image_create(
    width: usize,
    height: usize,
    data: *const f64,
) -> *mut SpregImage {
    guarded(std::ptr::null_mut(), || {
        if data.is_null() {
            set_last_error("data must not be null");
            return std::ptr::null_mut();
        }
        let samples = std::slice::from_raw_parts(data, width.saturating_mul(height));
        match Image2D::new(width, height, samples.to_vec()) {
            Ok(img) => boxed(SpregImage { inner: img }),
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Loads a grayscale PNG or binary PGM image.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spreg_image_load(path: *const c_char) -> *mut SpregImage {
    guarded(std::ptr::null_mut(), || {
        let Ok(path) = str_arg(path, "path") else {
            return std::ptr::null_mut();
        };
        match load_image(Path::new(path)) {
            Ok(img) => boxed(SpregImage { inner: img }),
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Writes an image as a grayscale PNG (16-bit when `sixteen_bit`,
/// 8-bit otherwise).
///
/// # Safety
/// `image` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spreg_image_save(
    image: *const SpregImage,
    path: *const c_char,
    sixteen_bit: bool,
) -> SpregStatus {
    guarded(SpregStatus::Panic, || {
        let img = match ref_arg(image, "image") {
            Ok(i) => i,
            Err(s) => return s,
        };
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let depth = if sixteen_bit {
            BitDepth::Sixteen
        } else {
            BitDepth::Eight
        };
        match save_image(Path::new(path), &img.inner, depth) {
            Ok(()) => SpregStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Image width in pixels (0 for a null handle).
///
/// # Safety
/// `image` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spreg_image_width(image: *const SpregImage) -> usize {
    image.as_ref().map_or(0, |i| i.inner.width())
}

/// Image height in pixels (0 for a null handle).
///
/// # Safety
/// `image` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spreg_image_height(image: *const SpregImage) -> usize {
    image.as_ref().map_or(0, |i| i.inner.height())
}

/// Borrowed pointer to the row-major samples (`width * height`
/// doubles), or null for a null handle. Valid until the handle is
/// destroyed.
///
/// # Safety
/// `image` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spreg_image_data(image: *const SpregImage) -> *const f64 {
    image
        .as_ref()
        .map_or(std::ptr::null(), |i| i.inner.data().as_ptr())
}

/// Releases an image handle (null is a no-op).
///
/// # Safety
/// `image` must be null or an owned handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spreg_image_destroy(image: *mut SpregImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

// ---------------------------------------------------------------------
// Flow fields
// ---------------------------------------------------------------------

/// Creates a displacement field by copying `width * height` row-major
/// samples per component.
///
/// # Safety
/// `dx` and `dy` must be null or point to `width * height` doubles.
#[no_mangle]
pub unsafe extern "C" fn spreg_flow_create(
    width: usize,
    height: usize,
    dx: *const f64,
    dy: *const f64,
) -> *mut SpregFlow {
    guarded(std::ptr::null_mut(), || {
        if dx.is_null() || dy.is_null() {
            set_last_error("dx and dy must not be null");
            return std::ptr::null_mut();
        }
        let n = width.saturating_mul(height);
        let dx = std::slice::from_raw_parts(dx, n).to_vec();
        let dy = std::slice::from_raw_parts(dy, n).to_vec();
        match VectorField2D::new(width, height, dx, dy) {
            Ok(f) => boxed(SpregFlow { inner: f }),
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Reads a little-endian two-band float flow file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spreg_flow_read(path: *const c_char) -> *mut SpregFlow {
    guarded(std::ptr::null_mut(), || {
        let Ok(path) = str_arg(path, "path") else {
            return std::ptr::null_mut();
        };
        match read_flow(Path::new(path)) {
            Ok(f) => boxed(SpregFlow { inner: f }),
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Writes a flow field to a little-endian two-band float flow file.
///
/// # Safety
/// `flow` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spreg_flow_write(
    flow: *const SpregFlow,
    path: *const c_char,
) -> SpregStatus {
    guarded(SpregStatus::Panic, || {
        let f = match ref_arg(flow, "flow") {
            Ok(f) => f,
            Err(s) => return s,
        };
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match write_flow(Path::new(path), &f.inner) {
            Ok(()) => SpregStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Flow width in pixels (0 for a null handle).
///
/// # Safety
/// `flow` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spreg_flow_width(flow: *const SpregFlow) -> usize {
    flow.as_ref().map_or(0, |f| f.inner.width())
}

/// Flow height in pixels (0 for a null handle).
///
/// # Safety
/// `flow` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spreg_flow_height(flow: *const SpregFlow) -> usize {
    flow.as_ref().map_or(0, |f| f.inner.height())
}

/// Borrowed pointer to the row-major x-displacements, or null for a
/// null handle. Valid until the handle is destroyed.
///
/// # Safety
/// `flow` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spreg_flow_dx(flow: *const SpregFlow) -> *const f64 {
    flow.as_ref()
        .map_or(std::ptr::null(), |f| f.inner.dx().as_ptr())
}

/// Borrowed pointer to the row-major y-displacements, or null for a
/// null handle. Valid until the handle is destroyed.
///
/// # Safety
/// `flow` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spreg_flow_dy(flow: *const SpregFlow) -> *const f64 {
    flow.as_ref()
        .map_or(std::ptr::null(), |f| f.inner.dy().as_ptr())
}

/// Smallest interior Jacobian determinant of the map `x + flow(x)`
/// (negative values mean folding). Requires at least a 3x3 field.
///
/// # Safety
/// `flow` must be a live handle; `out_min_det` a writable double.
#[no_mangle]
pub unsafe extern "C" fn spreg_flow_min_jacobian_det(
    flow: *const SpregFlow,
    out_min_det: *mut f64,
) -> SpregStatus {
    guarded(SpregStatus::Panic, || {
        let f = match ref_arg(flow, "flow") {
            Ok(f) => f,
            Err(s) => return s,
        };
        if out_min_det.is_null() {
            set_last_error("out_min_det must not be null");
            return SpregStatus::NullArgument;
        }
        match summarize_jacobian(&f.inner) {
            Ok(summary) => {
                *out_min_det = summary.min_det;
                SpregStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Releases a flow handle (null is a no-op).
///
/// # Safety
/// `flow` must be null or an owned handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spreg_flow_destroy(flow: *mut SpregFlow) {
    if !flow.is_null() {
        drop(Box::from_raw(flow));
    }
}

// ---------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------

/// Creates a configuration with every key at its documented default.
#[no_mangle]
pub extern "C" fn spreg_config_create() -> *mut SpregConfig {
    guarded(std::ptr::null_mut(), || {
        boxed(SpregConfig {
            inner: RunConfig::default(),
        })
    })
}

/// Parses a JSON configuration document. Missing keys take defaults;
/// unknown keys are rejected.
///
/// # Safety
/// `json` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spreg_config_from_json(json: *const c_char) -> *mut SpregConfig {
    guarded(std::ptr::null_mut(), || {
        let Ok(text) = str_arg(json, "json") else {
            return std::ptr::null_mut();
        };
        match config_from_json_str(text) {
            Ok(cfg) => boxed(SpregConfig { inner: cfg }),
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Sets one dotted configuration key (e.g. `"optim.iterations"`,
/// `"sp.K"`). The value parses as JSON where possible, otherwise as a
/// string. The handle is revalidated after every set and left unchanged
/// on error, so coupled keys (such as `sp.m` and `sp.basis_scales`,
/// whose sizes must agree) cannot be changed one at a time: pass them
/// together, either by building the handle with
/// [`spreg_config_from_json`] or by assigning a whole section as a JSON
/// object value (e.g. key `"sp"`, value `"{\"m\": 9, \"basis_scales\":
/// [1.0]}"`; unnamed keys of the section then return to their
/// defaults).
///
/// # Safety
/// `config` must be a live handle; `key` and `value` valid
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn spreg_config_set(
    config: *mut SpregConfig,
    key: *const c_char,
    value: *const c_char,
) -> SpregStatus {
    guarded(SpregStatus::Panic, || {
        if config.is_null() {
            set_last_error("config must not be null");
            return SpregStatus::NullArgument;
        }
        let key = match str_arg(key, "key") {
            Ok(k) => k,
            Err(s) => return s,
        };
        let value = match str_arg(value, "value") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let cfg = &mut *config;
        match set_config_key(&cfg.inner, key, value) {
            Ok(next) => {
                cfg.inner = next;
                SpregStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Serializes the configuration as pretty-printed JSON. The caller
/// releases the string with [`spreg_string_destroy`].
///
/// # Safety
/// `config` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spreg_config_to_json(config: *const SpregConfig) -> *mut c_char {
    guarded(std::ptr::null_mut(), || {
        let cfg = match ref_arg(config, "config") {
            Ok(c) => c,
            Err(_) => return std::ptr::null_mut(),
        };
        let text = match serde_json::to_string_pretty(&cfg.inner) {
            Ok(t) => t,
            Err(e) => {
                set_last_error(&e.to_string());
                return std::ptr::null_mut();
            }
        };
        CString::new(text).map_or(std::ptr::null_mut(), CString::into_raw)
    })
}

/// Releases a configuration handle (null is a no-op).
///
/// # Safety
/// `config` must be null or an owned handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spreg_config_destroy(config: *mut SpregConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

// ---------------------------------------------------------------------
// Registration
// ---------------------------------------------------------------------

/// Registers `moving` onto `fixed` under the given configuration. Both
/// images must share dimensions. Returns an owned result handle, or
/// null on failure.
///
/// # Safety
/// All three arguments must be live handles.
#[no_mangle]
pub unsafe extern "C" fn spreg_register(
    fixed: *const SpregImage,
    moving: *const SpregImage,
    config: *const SpregConfig,
) -> *mut SpregResult {
    guarded(std::ptr::null_mut(), || {
        let (Ok(f), Ok(m), Ok(c)) = (
            ref_arg(fixed, "fixed"),
            ref_arg(moving, "moving"),
            ref_arg(config, "config"),
        ) else {
            return std::ptr::null_mut();
        };
        let run = register(
            &f.inner,
            &m.inner,
            &c.inner.pyramid,
            &c.inner.smoothproper,
            &c.inner.loss,
            &c.inner.optim,
        );
        match run {
            Ok(result) => boxed(SpregResult { inner: result }),
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Applies a displacement field to an image: output pixel `x` samples
/// the input at `x + flow(x)` bilinearly. Returns an owned image.
///
/// # Safety
/// `image` and `flow` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn spreg_warp_image(
    image: *const SpregImage,
    flow: *const SpregFlow,
) -> *mut SpregImage {
    guarded(std::ptr::null_mut(), || {
        let (Ok(i), Ok(f)) = (ref_arg(image, "image"), ref_arg(flow, "flow")) else {
            return std::ptr::null_mut();
        };
        match warp(&i.inner, &f.inner) {
            Ok(out) => boxed(SpregImage { inner: out }),
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Owned copy of the final full-resolution velocity field (the field
/// the smoothness penalty acted on).
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spreg_result_velocity(result: *const SpregResult) -> *mut SpregFlow {
    guarded(std::ptr::null_mut(), || {
        match ref_arg(result, "result") {
            Ok(r) => boxed(SpregFlow {
                inner: r.inner.u.clone(),
            }),
            Err(_) => std::ptr::null_mut(),
        }
    })
}

/// Owned copy of the accumulated displacement map; warping the moving
/// image by it aligns it to the fixed image.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spreg_result_displacement(
    result: *const SpregResult,
) -> *mut SpregFlow {
    guarded(std::ptr::null_mut(), || {
        match ref_arg(result, "result") {
            Ok(r) => boxed(SpregFlow {
                inner: r.inner.phi.clone(),
            }),
            Err(_) => std::ptr::null_mut(),
        }
    })
}

/// Final objective value (NaN for a null handle or an empty trace).
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spreg_result_final_loss(result: *const SpregResult) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| {
        r.inner.loss_trace.last().map_or(f64::NAN, |s| s.total)
    })
}

/// Smallest interior Jacobian determinant of the final map (NaN for a
/// null handle).
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spreg_result_min_jacobian_det(result: *const SpregResult) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.inner.jacobian.min_det)
}

/// Mean velocity magnitude in pixels (NaN for a null handle).
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spreg_result_mean_velocity(result: *const SpregResult) -> f64 {
    result
        .as_ref()
        .map_or(f64::NAN, |r| r.inner.u.mean_magnitude())
}

/// Number of recorded objective evaluations (0 for a null handle).
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spreg_result_trace_len(result: *const SpregResult) -> usize {
    result.as_ref().map_or(0, |r| r.inner.loss_trace.len())
}

/// Copies one objective-trace sample. Null output pointers are
/// skipped. Fails with an invalid-input status when `index` is out of
/// range.
///
/// # Safety
/// `result` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn spreg_result_trace_sample(
    result: *const SpregResult,
    index: usize,
    out_iteration: *mut usize,
    out_level: *mut usize,
    out_total: *mut f64,
    out_similarity: *mut f64,
    out_regularizer: *mut f64,
) -> SpregStatus {
    guarded(SpregStatus::Panic, || {
        let r = match ref_arg(result, "result") {
            Ok(r) => r,
            Err(s) => return s,
        };
        let Some(sample) = r.inner.loss_trace.get(index) else {
            set_last_error(&format!(
                "trace index {index} out of range ({} samples)",
                r.inner.loss_trace.len()
            ));
            return SpregStatus::InvalidInput;
        };
        if !out_iteration.is_null() {
            *out_iteration = sample.iteration;
        }
        if !out_level.is_null() {
            *out_level = sample.level;
        }
        if !out_total.is_null() {
            *out_total = sample.total;
        }
        if !out_similarity.is_null() {
            *out_similarity = sample.similarity;
        }
        if !out_regularizer.is_null() {
            *out_regularizer = sample.regularizer;
        }
        SpregStatus::Ok
    })
}

/// Releases a result handle (null is a no-op).
///
/// # Safety
/// `result` must be null or an owned handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spreg_result_destroy(result: *mut SpregResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

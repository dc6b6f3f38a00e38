//! C ABI for `lrdiff`.
//!
//! Every handle is opaque and owned by the caller once returned; release it
//! with the matching `*_free` function. Functions report an [`LrdiffStatus`];
//! on failure [`lrdiff_last_error`] describes the problem. Panics never cross
//! the boundary and surface as `LRDIFF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use lrdiff::editing::edit_scene;
use lrdiff::io::image::{read_image, write_image};
use lrdiff::io::scene::{parse_scene, SceneOverrides};
use lrdiff::layered::{render, SceneSpec};
use lrdiff::score::{load_checkpoint, OracleDomain, ScoreEstimator};
use lrdiff::{Error, Grid, Shape};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrdiffStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string was not UTF-8 or a numeric argument was out of range.
    InvalidArgument = 2,
    Config = 3,
    Dimension = 4,
    Schedule = 5,
    Condition = 6,
    Capability = 7,
    Guidance = 8,
    Layout = 9,
    Fusion = 10,
    Training = 11,
    Usage = 12,
    /// Malformed scene, image or checkpoint file.
    Parse = 13,
    Io = 14,
    Panic = 15,
}

/// Score estimator handle.
pub struct LrdiffEstimator {
    inner: Box<dyn ScoreEstimator>,
}

/// Parsed scene handle.
pub struct LrdiffScene {
    inner: SceneSpec,
}

/// Image or latent of shape `height × width × channels`, channel innermost.
pub struct LrdiffGrid {
    inner: Grid,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(LrdiffStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => LrdiffStatus::Config,
            Error::Dimension { .. } => LrdiffStatus::Dimension,
            Error::Schedule(_) => LrdiffStatus::Schedule,
            Error::Condition(_) => LrdiffStatus::Condition,
            Error::Capability(_) => LrdiffStatus::Capability,
            Error::Guidance(_) => LrdiffStatus::Guidance,
            Error::Layout(_) => LrdiffStatus::Layout,
            Error::Fusion(_) => LrdiffStatus::Fusion,
            Error::Training(_) => LrdiffStatus::Training,
            Error::Usage(_) => LrdiffStatus::Usage,
            Error::Field { .. } | Error::Format { .. } => LrdiffStatus::Parse,
            Error::Io(_) => LrdiffStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LrdiffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LrdiffStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let what = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {what}"));
            LrdiffStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(LrdiffStatus::NullArgument, format!("`{name}` is null"))
}

unsafe fn borrow<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn string(p: *const c_char, name: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure(LrdiffStatus::InvalidArgument, format!("`{name}` is not UTF-8")))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    let slot = borrow_mut(out, "out")?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lrdiff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn lrdiff_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Exact score estimator over the built-in 12×12 template domain.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_estimator_new_analytic(out: *mut *mut LrdiffEstimator) -> LrdiffStatus {
    guard(|| {
        let est = OracleDomain::default().estimator()?;
        emit(out, LrdiffEstimator { inner: Box::new(est) })
    })
}

/// Toy network estimator from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_estimator_load_toy(
    path: *const c_char,
    out: *mut *mut LrdiffEstimator,
) -> LrdiffStatus {
    guard(|| {
        let path = PathBuf::from(string(path, "path")?);
        let net = load_checkpoint(&path)?;
        emit(out, LrdiffEstimator { inner: Box::new(net) })
    })
}

/// # Safety
/// `est` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_estimator_free(est: *mut LrdiffEstimator) {
    release(est);
}

/// Parses and validates a scene file against the estimator's vocabulary.
///
/// # Safety
/// `path` must be a NUL-terminated string, `est` a live handle and `out`
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_scene_load(
    path: *const c_char,
    est: *const LrdiffEstimator,
    out: *mut *mut LrdiffScene,
) -> LrdiffStatus {
    guard(|| {
        let path = PathBuf::from(string(path, "path")?);
        let est = &borrow(est, "est")?.inner;
        let doc = parse_scene(&path, est.vocabulary(), est.shape(), &SceneOverrides::default())?;
        emit(out, LrdiffScene { inner: doc.scene })
    })
}

/// # Safety
/// `scene` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_scene_set_seed(scene: *mut LrdiffScene, seed: u64) -> LrdiffStatus {
    guard(|| {
        borrow_mut(scene, "scene")?.inner.seed = seed;
        Ok(())
    })
}

/// Sets the layered/general boundary; range-checked at render time.
///
/// # Safety
/// `scene` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_scene_set_t0(scene: *mut LrdiffScene, t0: usize) -> LrdiffStatus {
    guard(|| {
        borrow_mut(scene, "scene")?.inner.schedule.t0 = t0;
        Ok(())
    })
}

/// # Safety
/// `scene` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_scene_set_gamma(scene: *mut LrdiffScene, gamma: f64) -> LrdiffStatus {
    guard(|| {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Failure(LrdiffStatus::InvalidArgument, format!("gamma = {gamma} must be finite and >= 0")));
        }
        borrow_mut(scene, "scene")?.inner.gamma = gamma;
        Ok(())
    })
}

/// Number of layers including the background layer.
///
/// # Safety
/// `scene` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_scene_layer_count(scene: *const LrdiffScene, out: *mut usize) -> LrdiffStatus {
    guard(|| {
        *borrow_mut(out, "out")? = borrow(scene, "scene")?.inner.layers.len();
        Ok(())
    })
}

/// # Safety
/// `scene` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_scene_free(scene: *mut LrdiffScene) {
    release(scene);
}

/// Renders the scene from its seed.
///
/// # Safety
/// `scene` and `est` must be live handles and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_render(
    scene: *const LrdiffScene,
    est: *const LrdiffEstimator,
    out: *mut *mut LrdiffGrid,
) -> LrdiffStatus {
    guard(|| {
        let scene = &borrow(scene, "scene")?.inner;
        let est = &borrow(est, "est")?.inner;
        let image = render(scene, est.as_ref())?;
        emit(out, LrdiffGrid { inner: image })
    })
}

/// Inverts `source` under `source_caption` (words separated by commas or
/// spaces) and renders the scene from the inverted latent.
///
/// # Safety
/// Handles must be live, `source_caption` NUL-terminated and `out` valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_edit(
    scene: *const LrdiffScene,
    est: *const LrdiffEstimator,
    source: *const LrdiffGrid,
    source_caption: *const c_char,
    out: *mut *mut LrdiffGrid,
) -> LrdiffStatus {
    guard(|| {
        let scene = &borrow(scene, "scene")?.inner;
        let est = &borrow(est, "est")?.inner;
        let source = &borrow(source, "source")?.inner;
        let words: Vec<String> = string(source_caption, "source_caption")?
            .split([',', ' '])
            .filter(|w| !w.is_empty())
            .map(str::to_owned)
            .collect();
        let caption = est.vocabulary().encode(&words)?;
        let result = edit_scene(source, &caption, scene, est.as_ref())?;
        emit(out, LrdiffGrid { inner: result.output })
    })
}

/// Copies `height * width * channels` values from `data` into a new grid.
///
/// # Safety
/// `data` must point to that many readable doubles and `out` be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_grid_new(
    height: usize,
    width: usize,
    channels: usize,
    data: *const f64,
    out: *mut *mut LrdiffGrid,
) -> LrdiffStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let len = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure(LrdiffStatus::InvalidArgument, "grid dimensions must be positive".into()))?;
        let values = std::slice::from_raw_parts(data, len).to_vec();
        let grid = Grid::from_vec(Shape::new(height, width, channels), values)?;
        emit(out, LrdiffGrid { inner: grid })
    })
}

/// Reads a binary PPM (P6) or PGM (P5) image.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_grid_read(path: *const c_char, out: *mut *mut LrdiffGrid) -> LrdiffStatus {
    guard(|| {
        let path = PathBuf::from(string(path, "path")?);
        emit(out, LrdiffGrid { inner: read_image(&path)? })
    })
}

/// Writes the grid as an 8-bit PPM (3 channels) or PGM (1 channel), clamping
/// values to `[0, 1]`.
///
/// # Safety
/// `grid` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_grid_write(grid: *const LrdiffGrid, path: *const c_char) -> LrdiffStatus {
    guard(|| {
        let grid = &borrow(grid, "grid")?.inner;
        let path = PathBuf::from(string(path, "path")?);
        write_image(grid, &path)?;
        Ok(())
    })
}

/// # Safety
/// `grid` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_grid_shape(
    grid: *const LrdiffGrid,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> LrdiffStatus {
    guard(|| {
        let s = borrow(grid, "grid")?.inner.shape();
        for (p, v) in [(height, s.height), (width, s.width), (channels, s.channels)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Row-major values, channel innermost; valid while the grid lives.
/// Null for a null handle.
///
/// # Safety
/// `grid` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_grid_data(grid: *const LrdiffGrid) -> *const f64 {
    grid.as_ref().map_or(std::ptr::null(), |g| g.inner.data().as_ptr())
}

/// # Safety
/// `grid` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lrdiff_grid_free(grid: *mut LrdiffGrid) {
    release(grid);
}

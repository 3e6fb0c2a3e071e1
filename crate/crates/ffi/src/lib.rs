//! C ABI over `tgif-core`.
//!
//! Handles are opaque pointers created by `*_new`/`*_init`/`*_load` and
//! released with the matching `*_free`. Every fallible call returns a
//! [`TgifStatus`]; on failure `tgif_last_error` describes the cause for the
//! calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tgif_core::bench::{self, Benchmark, Category, Dataset};
use tgif_core::config::TrainConfig;
use tgif_core::numkit::DenseArray;
use tgif_core::router::{route_multimodal, route_text, RouterMode};
use tgif_core::trainer::{self, TrainOptions, TrainState};
use tgif_core::Error;

/// Status codes; 2–4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TgifStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    InvalidUtf8 = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Resolved training configuration.
pub struct TgifConfig {
    inner: TrainConfig,
}

/// Model parameters, optimizer state and the config they were built from.
pub struct TgifModel {
    cfg: TrainConfig,
    state: TrainState,
}

/// Headline metrics of one evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TgifEvalSummary {
    pub routing_accuracy: f64,
    pub task_accuracy: f64,
    pub mean_entropy: f64,
    pub routing_accuracy_existence: f64,
    pub routing_accuracy_detail: f64,
    pub task_accuracy_general: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Status(TgifStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn fail<T>(status: TgifStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Status(status, msg.into()))
}

fn status_of(e: &Error) -> TgifStatus {
    match e.exit_code() {
        2 => TgifStatus::Config,
        4 => TgifStatus::Numeric,
        _ => TgifStatus::Data,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TgifStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TgifStatus::Ok
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            TgifStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(TgifStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(TgifStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .map_or_else(|| fail(TgifStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .map_or_else(|| fail(TgifStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn out_ptr<'a, T>(p: *mut *mut T) -> Result<&'a mut *mut T, Failure> {
    if p.is_null() {
        return fail(TgifStatus::NullPointer, "output pointer is null");
    }
    *p = ptr::null_mut();
    Ok(&mut *p)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tgif_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null after a success.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn tgif_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Resolve a config from flat `key = value` text (null for the desk preset).
///
/// # Safety
/// `text` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tgif_config_new(text: *const c_char, out: *mut *mut TgifConfig) -> TgifStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let text = if text.is_null() { None } else { Some(str_arg(text, "text")?) };
        let inner = TrainConfig::resolve(text, &[])?;
        *out = Box::into_raw(Box::new(TgifConfig { inner }));
        Ok(())
    })
}

/// Set one key; the config is revalidated and left unchanged on failure.
///
/// # Safety
/// `cfg` comes from [`tgif_config_new`]; `key` and `value` are NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tgif_config_set(cfg: *mut TgifConfig, key: *const c_char, value: *const c_char) -> TgifStatus {
    guard(|| {
        let cfg = handle_mut(cfg, "config")?;
        let (key, value) = (str_arg(key, "key")?, str_arg(value, "value")?);
        let mut next = cfg.inner.clone();
        next.set(key, value)?;
        next.validate()?;
        cfg.inner = next;
        Ok(())
    })
}

/// Canonical text of the config into `buf` (NUL-terminated). `needed`, if
/// non-null, receives the required size including the NUL.
///
/// # Safety
/// `buf` has room for `len` bytes or is null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn tgif_config_text(cfg: *const TgifConfig, buf: *mut c_char, len: usize, needed: *mut usize) -> TgifStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        let text = cfg.inner.to_text();
        let n = text.len() + 1;
        if !needed.is_null() {
            *needed = n;
        }
        if buf.is_null() || len < n {
            return fail(TgifStatus::BufferTooSmall, format!("need {n} bytes, have {len}"));
        }
        ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `cfg` is null or from [`tgif_config_new`] and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tgif_config_free(cfg: *mut TgifConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Fresh model from a config; the router starts uniform.
///
/// # Safety
/// `cfg` is a live config handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tgif_model_init(cfg: *const TgifConfig, out: *mut *mut TgifModel) -> TgifStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let cfg = handle(cfg, "config")?.inner.clone();
        let state = TrainState::init(&cfg)?;
        *out = Box::into_raw(Box::new(TgifModel { cfg, state }));
        Ok(())
    })
}

/// # Safety
/// `path` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tgif_model_load(path: *const c_char, out: *mut *mut TgifModel) -> TgifStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let (cfg, state) = trainer::load_checkpoint(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(TgifModel { cfg, state }));
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle; `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tgif_model_save(model: *const TgifModel, path: *const c_char) -> TgifStatus {
    guard(|| {
        let m = handle(model, "model")?;
        m.state.to_checkpoint(&m.cfg).save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Train in place: `stage` 1, 2, or 0 for stage 1 followed by stage 2.
/// On failure the model keeps its previous state.
///
/// # Safety
/// `model` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn tgif_model_train(model: *mut TgifModel, stage: u32) -> TgifStatus {
    guard(|| {
        let m = handle_mut(model, "model")?;
        if stage > 2 {
            return fail(TgifStatus::Config, format!("stage {stage}: expected 0, 1 or 2"));
        }
        let bench = Benchmark::new(&m.cfg)?;
        let opts = TrainOptions::default();
        let mut state = m.state.clone();
        if stage != 2 && state.stage == tgif_core::objective::Stage::One {
            state = trainer::train_stage1(&m.cfg, &bench, state, &opts)?.0;
        }
        if stage != 1 {
            state = trainer::train_stage2(&m.cfg, &bench, state, &opts)?.0;
        }
        m.state = state;
        Ok(())
    })
}

/// Number of encoder layers `L` routed over.
///
/// # Safety
/// `model` is null or a live handle; null yields 0.
#[no_mangle]
pub unsafe extern "C" fn tgif_model_layers(model: *const TgifModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.model.layers())
}

/// Width `D_t` of query embeddings; 0 for null.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tgif_model_text_dim(model: *const TgifModel) -> usize {
    model.as_ref().map_or(0, |m| m.cfg.model.text_dim)
}

/// Width `D_v` of image features; 0 for null.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tgif_model_image_dim(model: *const TgifModel) -> usize {
    model.as_ref().map_or(0, |m| m.cfg.model.stack.width)
}

/// Layer weights for `rows` queries. `f_text` is row-major `rows × text_dim`;
/// `f_image` (`rows × image_dim`) is required by multimodal routers and
/// ignored otherwise. Writes `rows × L` weights to `out`.
///
/// # Safety
/// Buffers hold at least the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn tgif_model_route(
    model: *const TgifModel,
    f_text: *const f64,
    rows: usize,
    f_image: *const f64,
    out: *mut f64,
    out_len: usize,
) -> TgifStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if f_text.is_null() || out.is_null() {
            return fail(TgifStatus::NullPointer, "f_text or out is null");
        }
        if rows == 0 {
            return fail(TgifStatus::Data, "rows must be positive");
        }
        let l = m.state.model.layers();
        if out_len < rows * l {
            return fail(TgifStatus::BufferTooSmall, format!("need {} doubles, have {out_len}", rows * l));
        }
        let dt = m.cfg.model.text_dim;
        let dv = m.cfg.model.stack.width;
        let params = &m.state.model.router;
        if params.mode == RouterMode::Multimodal && f_image.is_null() {
            return fail(TgifStatus::NullPointer, "multimodal router needs f_image");
        }
        let texts = std::slice::from_raw_parts(f_text, rows * dt);
        let out = std::slice::from_raw_parts_mut(out, rows * l);
        for (r, dst) in out.chunks_exact_mut(l).enumerate() {
            let text = DenseArray::vector(texts[r * dt..(r + 1) * dt].to_vec())?;
            let routed = match params.mode {
                RouterMode::TextOnly => route_text(params, &text)?,
                RouterMode::Multimodal => {
                    let image = DenseArray::vector(std::slice::from_raw_parts(f_image.add(r * dv), dv).to_vec())?;
                    route_multimodal(params, &text, &image)?
                }
            };
            dst.copy_from_slice(routed.weights.data());
        }
        Ok(())
    })
}

/// Evaluate on a dataset directory written by `tgif gen-data`.
///
/// # Safety
/// `model` is a live handle; `data_dir` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tgif_model_eval(model: *const TgifModel, data_dir: *const c_char, out: *mut TgifEvalSummary) -> TgifStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let out = handle_mut(out, "out")?;
        let data = Dataset::read(&PathBuf::from(str_arg(data_dir, "data_dir")?))?;
        let r = bench::evaluate(&m.state.model, &data, &m.cfg.groups(), m.cfg.threshold)?;
        let cat = |c| r.category(c);
        *out = TgifEvalSummary {
            routing_accuracy: r.routing_accuracy,
            task_accuracy: r.task_accuracy,
            mean_entropy: r.mean_entropy,
            routing_accuracy_existence: cat(Category::Existence).map_or(0.0, |c| c.routing_accuracy),
            routing_accuracy_detail: cat(Category::Detail).map_or(0.0, |c| c.routing_accuracy),
            task_accuracy_general: cat(Category::General).map_or(0.0, |c| c.task_accuracy),
        };
        Ok(())
    })
}

/// # Safety
/// `model` is null or a live handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tgif_model_free(model: *mut TgifModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

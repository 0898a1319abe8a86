//! C ABI. Handles are opaque and owned by the caller once returned; free them
//! with the matching `*_free`. Every call returns a [`WmStatus`]; on failure
//! the message is available from [`wm_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use worldmodel::backbone::ModelConfig;
use worldmodel::checkpoint::{load_checkpoint, save_checkpoint};
use worldmodel::error::{Error, ErrorClass};
use worldmodel::model::WorldModel;
use worldmodel::params::Component;
use worldmodel::synthesis::rouge_l;
use worldmodel::synthworld::{gen_world, WorldConfig, WorldSpec};
use worldmodel::types::{ActionDesc, Embedding, Modality, WorldState};

pub const WM_MODALITY_IMAGE: u32 = 1;
pub const WM_MODALITY_VIDEO: u32 = 2;
pub const WM_MODALITY_AUDIO: u32 = 4;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WmStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Train = 4,
    Provider = 5,
    InvalidUtf8 = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Generated synthetic world.
pub struct WmWorld(WorldSpec);

/// World model with its parameters.
pub struct WmModel(WorldModel);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Fail {
    Null(&'static str),
    Utf8(&'static str),
    Buffer { need: usize, got: usize },
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> WmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            WmStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            WmStatus::NullPointer
        }
        Ok(Err(Fail::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            WmStatus::InvalidUtf8
        }
        Ok(Err(Fail::Buffer { need, got })) => {
            set_error(format!("buffer holds {got} elements, {need} needed"));
            WmStatus::BufferTooSmall
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            match e.class() {
                ErrorClass::Config => WmStatus::Config,
                ErrorClass::Data => WmStatus::Data,
                ErrorClass::Train => WmStatus::Train,
                ErrorClass::Provider => WmStatus::Provider,
            }
        }
        Err(_) => {
            set_error("internal panic".into());
            WmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

/// Copy `s` plus a NUL into `buf`.
unsafe fn write_c(s: &str, buf: *mut c_char, len: usize) -> Result<(), Fail> {
    if buf.is_null() {
        return Err(Fail::Null("buf"));
    }
    if len < s.len() + 1 {
        return Err(Fail::Buffer { need: s.len() + 1, got: len });
    }
    std::ptr::copy_nonoverlapping(s.as_ptr().cast::<c_char>(), buf, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

fn mask_modalities(mask: u32) -> Vec<Modality> {
    Modality::STATE.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, m)| *m).collect()
}

/// Bytes needed for the last error message, including the NUL.
#[no_mangle]
pub extern "C" fn wm_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len() + 1)
}

/// Copy the last error message of this thread into `buf`.
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn wm_last_error_message(buf: *mut c_char, len: usize) -> WmStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match write_c(&msg, buf, len) {
        Ok(()) => WmStatus::Ok,
        Err(Fail::Null(_)) => WmStatus::NullPointer,
        Err(_) => WmStatus::BufferTooSmall,
    }
}

/// Generate a world with default settings.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn wm_world_generate(seed: u64, out: *mut *mut WmWorld) -> WmStatus {
    guard(|| put(out, WmWorld(gen_world(seed, &WorldConfig::default())?)))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn wm_world_load(path: *const c_char, out: *mut *mut WmWorld) -> WmStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        put(out, WmWorld(WorldSpec::load(Path::new(p))?))
    })
}

/// # Safety
/// `world` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn wm_world_free(world: *mut WmWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Embedding width of the world's encoders; 0 for null.
///
/// # Safety
/// `world` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wm_world_d_enc(world: *const WmWorld) -> usize {
    world.as_ref().map_or(0, |w| w.0.d_enc)
}

/// Encode text with the world's text encoder into `out[0..len]`; `len` must be at least `d_enc`.
///
/// # Safety
/// `world` must be a live handle, `text` NUL-terminated, `out` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn wm_world_encode_text(world: *const WmWorld, text: *const c_char, out: *mut f64, len: usize) -> WmStatus {
    guard(|| {
        let w = ref_arg(world, "world")?;
        let t = str_arg(text, "text")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let e = w.0.text_encoder.encode(t);
        if len < e.dim() {
            return Err(Fail::Buffer { need: e.dim(), got: len });
        }
        std::ptr::copy_nonoverlapping(e.0.as_ptr(), out, e.dim());
        Ok(())
    })
}

/// Fresh untrained model.
///
/// # Safety
/// `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn wm_model_new(seed: u64, d_model: usize, d_enc: usize, out: *mut *mut WmModel) -> WmStatus {
    guard(|| put(out, WmModel(WorldModel::new(ModelConfig { seed, d_model, d_enc, ..ModelConfig::default() })?)))
}

/// Load a checkpoint, verifying component checksums.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn wm_model_load(path: *const c_char, out: *mut *mut WmModel) -> WmStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        put(out, WmModel(load_checkpoint(Path::new(p))?.0))
    })
}

/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn wm_model_save(model: *const WmModel, path: *const c_char) -> WmStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let p = str_arg(path, "path")?;
        save_checkpoint(&m.0, None, Path::new(p))?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn wm_model_free(model: *mut WmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width the model reads and writes; 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wm_model_d_enc(model: *const WmModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.d_enc)
}

/// Predict the next state in the unified space.
///
/// `state` holds three rows of `d_enc` doubles (image, video, audio); only rows
/// named in `present` are read. `action_embedding` has `d_enc` doubles. Rows of
/// `out` (same layout) named in `outputs` are written; the others are untouched.
///
/// # Safety
/// Pointers must be valid for the sizes above and `action_text` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn wm_model_predict(
    model: *const WmModel,
    state: *const f64,
    present: u32,
    action_text: *const c_char,
    action_embedding: *const f64,
    outputs: u32,
    out: *mut f64,
) -> WmStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        let text = str_arg(action_text, "action_text")?;
        if state.is_null() || action_embedding.is_null() || out.is_null() {
            return Err(Fail::Null("state, action_embedding or out"));
        }
        let d = m.config.d_enc;
        let rows = std::slice::from_raw_parts(state, 3 * d);
        let mut mods = BTreeMap::new();
        for (i, md) in Modality::STATE.iter().enumerate() {
            if present & (1 << i) != 0 {
                mods.insert(*md, Embedding(rows[i * d..(i + 1) * d].to_vec()));
            }
        }
        let st = WorldState::new(mods)?;
        let action = ActionDesc::new(text, Embedding(std::slice::from_raw_parts(action_embedding, d).to_vec()))?;
        let want: BTreeSet<Modality> = mask_modalities(outputs).into_iter().collect();
        let pred = m.predict(&st, &action, None, &want)?;
        let dst = std::slice::from_raw_parts_mut(out, 3 * d);
        for (i, md) in Modality::STATE.iter().enumerate() {
            if let Some(e) = pred.get(md) {
                dst[i * d..(i + 1) * d].copy_from_slice(&e.0);
            }
        }
        Ok(())
    })
}

/// SHA-256 hex of one component (`base`, `adapters`, `unified_heads`,
/// `render_heads`, `reflector`, `context_lift`); `len` must be at least 65.
///
/// # Safety
/// `model` must be a live handle, `component` NUL-terminated, `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn wm_model_checksum(model: *const WmModel, component: *const c_char, buf: *mut c_char, len: usize) -> WmStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let c: Component = str_arg(component, "component")?.parse()?;
        write_c(&m.0.store.checksum(c), buf, len)
    })
}

/// ROUGE-L F-score of two strings.
///
/// # Safety
/// Both strings must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn wm_rouge_l(candidate: *const c_char, reference: *const c_char, out: *mut f64) -> WmStatus {
    guard(|| {
        let c = str_arg(candidate, "candidate")?;
        let r = str_arg(reference, "reference")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = rouge_l(c, r);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_order_is_image_video_audio() {
        assert_eq!(mask_modalities(WM_MODALITY_IMAGE | WM_MODALITY_AUDIO), vec![Modality::Image, Modality::Audio]);
        assert!(mask_modalities(0).is_empty());
    }
}

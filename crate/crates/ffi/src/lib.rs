//! C interface: load a backbone with one concept checkpoint, answer
//! questions, sample latents and run replay.
//!
//! Every call returns a [`DuetStatus`]. On failure the message is kept per
//! thread and read with [`duet_last_error`]. Strings are written into caller
//! buffers as NUL-terminated UTF-8; when the buffer is too small the needed
//! length (without the NUL) is stored in `len` and nothing is written.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use duet::concepts::{load_concept, ConceptTokens};
use duet::model::engine::Engine;
use duet::model::sampler::SamplerConfig;
use duet::model::Backbone;
use duet::replay::{replay_generate, ReplayMode};
use duet::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DuetStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Numeric = 3,
    Io = 4,
    InvalidUtf8 = 5,
    BufferTooSmall = 6,
    Truncated = 7,
    Failed = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DuetReplayMode {
    Sequential = 0,
    Unified = 1,
    Off = 2,
}

impl From<DuetReplayMode> for ReplayMode {
    fn from(m: DuetReplayMode) -> Self {
        match m {
            DuetReplayMode::Sequential => ReplayMode::Sequential,
            DuetReplayMode::Unified => ReplayMode::Unified,
            DuetReplayMode::Off => ReplayMode::Off,
        }
    }
}

/// A backbone together with one concept's learned tokens.
pub struct DuetModel {
    backbone: Backbone,
    tokens: ConceptTokens,
    max_new_tokens: Option<usize>,
}

impl DuetModel {
    fn engine(&self) -> duet::Result<Engine<'_>> {
        let mut e = Engine::new(&self.backbone, &self.tokens)?;
        if let Some(n) = self.max_new_tokens {
            e.max_new_tokens = n;
        }
        Ok(e)
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DuetStatus {
    match e {
        Error::Config(_) => DuetStatus::Config,
        Error::Numeric(_) => DuetStatus::Numeric,
        Error::Io(_) => DuetStatus::Io,
        Error::Truncated(_) => DuetStatus::Truncated,
        Error::Stage { source, .. } => status_of(source),
        _ => DuetStatus::Failed,
    }
}

enum Fail {
    Status(DuetStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DuetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            DuetStatus::Ok
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            DuetStatus::Panic
        }
    }
}

fn null(name: &str) -> Fail {
    Fail::Status(DuetStatus::NullArgument, format!("{name} is null"))
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(DuetStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn model<'a>(m: *const DuetModel) -> Result<&'a DuetModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn floats<'a>(p: *const f64, len: usize, name: &str) -> Result<Option<&'a [f64]>, Fail> {
    if p.is_null() {
        return if len == 0 { Ok(None) } else { Err(null(name)) };
    }
    Ok(Some(std::slice::from_raw_parts(p, len)))
}

unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize, len: *mut usize) -> Result<(), Fail> {
    if len.is_null() {
        return Err(null("len"));
    }
    *len = s.len();
    if buf.is_null() || cap < s.len() + 1 {
        return Err(Fail::Status(
            DuetStatus::BufferTooSmall,
            format!("need {} bytes, buffer holds {cap}", s.len() + 1),
        ));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

unsafe fn write_floats(v: &[f64], out: *mut f64, out_len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    if out_len != v.len() {
        return Err(Fail::Status(
            DuetStatus::BufferTooSmall,
            format!("latent has {} values, output holds {out_len}", v.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(v.as_ptr(), out, v.len());
    Ok(())
}

fn sampler(steps: u32) -> SamplerConfig {
    let mut s = SamplerConfig::default();
    if steps > 0 {
        s.steps = steps as usize;
    }
    s
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn duet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a backbone and a concept checkpoint trained against it.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn duet_model_open(
    backbone_path: *const c_char,
    concept_path: *const c_char,
    out: *mut *mut DuetModel,
) -> DuetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let bp = text(backbone_path, "backbone_path")?;
        let cp = text(concept_path, "concept_path")?;
        let (backbone, _) = Backbone::load(Path::new(bp))?;
        let tokens = load_concept(Path::new(cp), backbone.config.d)?;
        Engine::new(&backbone, &tokens)?;
        *out = Box::into_raw(Box::new(DuetModel {
            backbone,
            tokens,
            max_new_tokens: None,
        }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from [`duet_model_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn duet_model_free(m: *mut DuetModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Length of a latent. Zero for a null model.
///
/// # Safety
/// `m` is null or a live model.
#[no_mangle]
pub unsafe extern "C" fn duet_model_latent_dim(m: *const DuetModel) -> usize {
    m.as_ref().map(|m| m.backbone.config.d_img).unwrap_or(0)
}

/// Cap on decoded tokens per text call; 0 restores the default.
///
/// # Safety
/// `m` must be a live model.
#[no_mangle]
pub unsafe extern "C" fn duet_model_set_max_new_tokens(m: *mut DuetModel, n: usize) -> DuetStatus {
    guard(|| {
        let m = m.as_mut().ok_or_else(|| null("model"))?;
        m.max_new_tokens = (n > 0).then_some(n);
        Ok(())
    })
}

/// Hex digest of the backbone weights.
///
/// # Safety
/// `buf` holds `cap` bytes; `len` is writable.
#[no_mangle]
pub unsafe extern "C" fn duet_model_fingerprint(m: *const DuetModel, buf: *mut c_char, cap: usize, len: *mut usize) -> DuetStatus {
    guard(|| write_str(&model(m)?.backbone.fingerprint(), buf, cap, len))
}

/// Greedy answer to `prompt`, optionally about an image latent
/// (`image` null and `image_len` 0 for none).
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn duet_generate_text(
    m: *const DuetModel,
    image: *const f64,
    image_len: usize,
    prompt: *const c_char,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> DuetStatus {
    guard(|| {
        let m = model(m)?;
        let img = floats(image, image_len, "image")?;
        let a = m.engine()?.generate_text(img, text(prompt, "prompt")?)?;
        write_str(&a, buf, cap, len)
    })
}

/// Sample one latent for `prompt`, editing `source` when given.
/// `steps` 0 uses the default sampler.
///
/// # Safety
/// `out` holds `out_len` doubles, which must equal the latent length.
#[no_mangle]
pub unsafe extern "C" fn duet_sample(
    m: *const DuetModel,
    prompt: *const c_char,
    source: *const f64,
    source_len: usize,
    seed: u64,
    steps: u32,
    out: *mut f64,
    out_len: usize,
) -> DuetStatus {
    guard(|| {
        let m = model(m)?;
        let src = floats(source, source_len, "source")?;
        let z = m.engine()?.sample(text(prompt, "prompt")?, src, seed, &sampler(steps))?;
        write_floats(&z, out, out_len)
    })
}

/// Replay a request and generate from the refined prompt, which is
/// written to `refined`.
///
/// # Safety
/// `out` holds `out_len` doubles; `refined` holds `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn duet_replay(
    m: *const DuetModel,
    request: *const c_char,
    mode: DuetReplayMode,
    exemplars: usize,
    seed: u64,
    steps: u32,
    out: *mut f64,
    out_len: usize,
    refined: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> DuetStatus {
    guard(|| {
        let m = model(m)?;
        let engine = m.engine()?;
        let (z, trace) = replay_generate(&engine, text(request, "request")?, mode.into(), exemplars, seed, &sampler(steps))?;
        trace.check_calls()?;
        write_str(&trace.refined, refined, cap, len)?;
        write_floats(&z, out, out_len)
    })
}

/// Sentence BLEU of whitespace-tokenized strings.
///
/// # Safety
/// Both strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn duet_bleu(candidate: *const c_char, reference: *const c_char, out: *mut f64) -> DuetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = duet::metrics::bleu_text(text(candidate, "candidate")?, text(reference, "reference")?)?;
        Ok(())
    })
}

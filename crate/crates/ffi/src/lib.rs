//! C interface to the autoencoder and the text-to-audio generator.
//!
//! Models are opaque handles created by `*_new_tiny` or `*_load` and released
//! with `*_free`. Every fallible call returns a [`MudiffStatus`]; the message
//! of the most recent failure on the calling thread is available from
//! [`mudiff_last_error`]. Output buffers are caller-owned: a call with a too
//! small buffer returns `MUDIFF_STATUS_BUFFER_TOO_SMALL` and still reports the
//! required element count.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mudiff::diffusion::gaussian;
use mudiff::dmae::{DmaeConfig, DmaeModel};
use mudiff::nn::Tensor;
use mudiff::signal::Waveform;
use mudiff::tcld::{generate, generation_noise, TcldConfig, TcldModel, TextEmbedder};
use mudiff::train::{load_model, Checkpoint, Weights};
use mudiff::Error;
use rand::SeedableRng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MudiffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Config = 5,
    Format = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

pub struct MudiffDmae {
    model: DmaeModel,
}

pub struct MudiffTcld {
    model: TcldModel,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MudiffDmaeInfo {
    pub audio_channels: usize,
    pub sample_rate: u32,
    pub latent_channels: usize,
    /// Waveform samples per latent step.
    pub samples_per_latent: usize,
    /// Valid waveform lengths are multiples of this.
    pub length_granularity: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MudiffStatus {
    match e {
        Error::InvalidArgument(_) => MudiffStatus::InvalidArgument,
        Error::Shape(_) => MudiffStatus::Shape,
        Error::NonFinite(_) => MudiffStatus::NonFinite,
        Error::Config(_) => MudiffStatus::Config,
        Error::Format(_) | Error::Truncated { .. } | Error::Wav { .. } => MudiffStatus::Format,
        Error::Io { .. } => MudiffStatus::Io,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Buffer { needed: usize, cap: usize },
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MudiffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MudiffStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            MudiffStatus::NullPointer
        }
        Ok(Err(Fail::Buffer { needed, cap })) => {
            set_error(format!("output buffer holds {cap} values, {needed} needed"));
            MudiffStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".into());
            MudiffStatus::Panic
        }
    }
}

unsafe fn cstr<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn input<'a>(p: *const f32, len: usize, what: &'static str) -> Result<&'a [f32], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output(data: &[f32], out: *mut f32, cap: usize, written: *mut usize) -> Result<(), Fail> {
    if written.is_null() {
        return Err(Fail::Null("written"));
    }
    *written = data.len();
    if cap < data.len() {
        return Err(Fail::Buffer {
            needed: data.len(),
            cap,
        });
    }
    if !data.is_empty() {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    }
    Ok(())
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mudiff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mudiff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a randomly initialised autoencoder with the tiny preset.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn mudiff_dmae_new_tiny(
    seed: u64,
    out: *mut *mut MudiffDmae,
) -> MudiffStatus {
    guard(|| {
        let model = DmaeModel::build(&DmaeConfig::tiny(), seed)?;
        store(out, MudiffDmae { model })
    })
}

/// Loads the EMA weights of a stage-1 checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mudiff_dmae_load(
    path: *const c_char,
    out: *mut *mut MudiffDmae,
) -> MudiffStatus {
    guard(|| {
        let path = cstr(path, "path")?;
        let model = load_model(&Checkpoint::load(path)?, Weights::Ema)?;
        store(out, MudiffDmae { model })
    })
}

/// # Safety
/// `handle` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mudiff_dmae_free(handle: *mut MudiffDmae) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` and `info` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mudiff_dmae_info(
    handle: *const MudiffDmae,
    info: *mut MudiffDmaeInfo,
) -> MudiffStatus {
    guard(|| {
        let m = &deref(handle, "handle")?.model;
        if info.is_null() {
            return Err(Fail::Null("info"));
        }
        let c = m.config();
        *info = MudiffDmaeInfo {
            audio_channels: c.audio_channels,
            sample_rate: c.sample_rate,
            latent_channels: c.latent_channels,
            samples_per_latent: c.samples_per_latent()?,
            length_granularity: c.length_granularity()?,
        };
        Ok(())
    })
}

/// Encodes channel-major audio (`audio_channels × frames` values) into a
/// channel-major latent (`latent_channels × L` values).
///
/// # Safety
/// `samples` must point to `audio_channels * frames` floats, `out` to `cap`
/// writable floats (may be null when `cap` is 0) and `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mudiff_dmae_encode(
    handle: *const MudiffDmae,
    samples: *const f32,
    frames: usize,
    out: *mut f32,
    cap: usize,
    written: *mut usize,
) -> MudiffStatus {
    guard(|| {
        let m = &deref(handle, "handle")?.model;
        let c = m.config().audio_channels;
        let data = input(samples, c * frames, "samples")?;
        let w = Waveform::new(data.to_vec(), c, m.config().sample_rate)?;
        let z = m.encode(&w)?;
        output(z.tensor().data(), out, cap, written)
    })
}

/// Decodes a channel-major latent of `latent_len` steps with `steps` DDIM
/// steps from noise seeded by `seed`.
///
/// # Safety
/// Same buffer rules as [`mudiff_dmae_encode`].
#[no_mangle]
pub unsafe extern "C" fn mudiff_dmae_decode(
    handle: *const MudiffDmae,
    latent: *const f32,
    latent_len: usize,
    steps: usize,
    seed: u64,
    out: *mut f32,
    cap: usize,
    written: *mut usize,
) -> MudiffStatus {
    guard(|| {
        let m = &deref(handle, "handle")?.model;
        let c = m.config().latent_channels;
        let z = Tensor::new(
            vec![1, c, latent_len],
            input(latent, c * latent_len, "latent")?.to_vec(),
        )?;
        let shape = m.waveform_shape(&z)?;
        let needed = shape.iter().product();
        if written.is_null() {
            return Err(Fail::Null("written"));
        }
        if cap < needed {
            *written = needed;
            return Err(Fail::Buffer { needed, cap });
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let noise = gaussian(&shape, &mut rng);
        let w = m.decode(&z, &noise, steps)?;
        output(w.data(), out, cap, written)
    })
}

/// Creates a randomly initialised generator with the tiny preset.
///
/// # Safety
/// `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mudiff_tcld_new_tiny(
    seed: u64,
    out: *mut *mut MudiffTcld,
) -> MudiffStatus {
    guard(|| {
        let model = TcldModel::build(&TcldConfig::tiny(), seed)?;
        store(out, MudiffTcld { model })
    })
}

/// Loads the EMA weights of a stage-2 checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mudiff_tcld_load(
    path: *const c_char,
    out: *mut *mut MudiffTcld,
) -> MudiffStatus {
    guard(|| {
        let path = cstr(path, "path")?;
        let model = load_model(&Checkpoint::load(path)?, Weights::Ema)?;
        store(out, MudiffTcld { model })
    })
}

/// # Safety
/// `handle` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mudiff_tcld_free(handle: *mut MudiffTcld) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Generates channel-major audio for `prompt`. A negative `cfg_scale` selects
/// the model's default guidance scale.
///
/// # Safety
/// Handles must be valid, `prompt` NUL-terminated, and the buffer rules of
/// [`mudiff_dmae_encode`] apply to `out`, `cap` and `written`.
#[no_mangle]
pub unsafe extern "C" fn mudiff_generate(
    tcld: *const MudiffTcld,
    dmae: *const MudiffDmae,
    prompt: *const c_char,
    steps_gen: usize,
    steps_dec: usize,
    cfg_scale: f32,
    seed: u64,
    out: *mut f32,
    cap: usize,
    written: *mut usize,
) -> MudiffStatus {
    guard(|| {
        let t = &deref(tcld, "tcld")?.model;
        let d = &deref(dmae, "dmae")?.model;
        let prompt = cstr(prompt, "prompt")?;
        let scale = if cfg_scale < 0.0 {
            t.config().cfg_scale
        } else {
            cfg_scale
        };
        let (zn, wn) = generation_noise(t, d, seed)?;
        let needed = wn.len();
        if written.is_null() {
            return Err(Fail::Null("written"));
        }
        if cap < needed {
            *written = needed;
            return Err(Fail::Buffer { needed, cap });
        }
        let e = t.embedder()?.embed(prompt)?;
        let w = generate(t, d, &e, &zn, &wn, steps_gen, steps_dec, scale)?;
        output(w.data(), out, cap, written)
    })
}

//! C ABI over the quantizer, the DTW metric and translator inference.
//!
//! Every fallible function returns a [`SigntokStatus`]. The message of the
//! last failure on the calling thread is available from
//! [`signtok_last_error`]. Handles are opaque and must be released with
//! their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use signtok::metrics::dtw;
use signtok::pipeline::{ExperimentConfig, Stack, Workspace};
use signtok::quant::{Dequant, FsqSpec};
use signtok::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigntokStatus {
    Ok = 0,
    NullPointer = 1,
    Argument = 2,
    Shape = 3,
    State = 4,
    Compatibility = 5,
    Config = 6,
    Io = 7,
    Format = 8,
    NonFinite = 9,
    BufferTooSmall = 10,
    Panic = 11,
    Other = 12,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SigntokStatus {
    match e {
        Error::Shape(_) => SigntokStatus::Shape,
        Error::Argument(_) => SigntokStatus::Argument,
        Error::NonFinite(_) => SigntokStatus::NonFinite,
        Error::State(_) | Error::Contract(_) => SigntokStatus::State,
        Error::Compatibility(_) => SigntokStatus::Compatibility,
        Error::Config(_) | Error::Json(_) => SigntokStatus::Config,
        Error::Format(_) | Error::Csv(_) => SigntokStatus::Format,
        Error::Io(_) => SigntokStatus::Io,
        Error::Stage { source, .. } => status_of(source),
    }
}

fn fail(status: SigntokStatus, msg: &str) -> SigntokStatus {
    set_error(msg);
    status
}

/// Run `f`, mapping errors and panics to status codes.
fn guard<F: FnOnce() -> Result<(), SigntokStatus>>(f: F) -> SigntokStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SigntokStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(SigntokStatus::Panic, "panic inside signtok"),
    }
}

fn lift<T>(r: signtok::Result<T>) -> Result<T, SigntokStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), SigntokStatus> {
    if p.is_null() {
        Err(fail(SigntokStatus::NullPointer, &format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn signtok_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Static, NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn signtok_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Finite scalar quantizer over fixed per-channel levels.
pub struct SigntokFsq {
    spec: FsqSpec,
}

/// # Safety
/// `levels` must point to `channels` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn signtok_fsq_new(levels: *const u32, channels: usize, out: *mut *mut SigntokFsq) -> SigntokStatus {
    guard(|| {
        non_null(levels, "levels")?;
        non_null(out, "out")?;
        let levels = std::slice::from_raw_parts(levels, channels).to_vec();
        let spec = lift(FsqSpec::new(levels))?;
        *out = Box::into_raw(Box::new(SigntokFsq { spec }));
        Ok(())
    })
}

/// # Safety
/// `fsq` must come from [`signtok_fsq_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn signtok_fsq_free(fsq: *mut SigntokFsq) {
    if !fsq.is_null() {
        drop(Box::from_raw(fsq));
    }
}

/// Codebook size, or 0 for a null handle.
///
/// # Safety
/// `fsq` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn signtok_fsq_vocab_size(fsq: *const SigntokFsq) -> u32 {
    fsq.as_ref().map_or(0, |f| f.spec.vocab_size())
}

/// Quantize `count` latent vectors of `channels` values each into packed
/// indices.
///
/// # Safety
/// `latents` must hold `count * channels` values and `indices` `count`.
#[no_mangle]
pub unsafe extern "C" fn signtok_fsq_quantize(
    fsq: *const SigntokFsq,
    latents: *const f64,
    count: usize,
    indices: *mut u32,
) -> SigntokStatus {
    guard(|| {
        non_null(fsq, "fsq")?;
        let f = &*fsq;
        let d = f.spec.channels();
        if count == 0 {
            return Ok(());
        }
        non_null(latents, "latents")?;
        non_null(indices, "indices")?;
        let z = std::slice::from_raw_parts(latents, count * d);
        let out = std::slice::from_raw_parts_mut(indices, count);
        for (v, slot) in z.chunks(d).zip(out.iter_mut()) {
            *slot = lift(f.spec.quantize(v).and_then(|c| f.spec.pack(&c)))?;
        }
        Ok(())
    })
}

/// Dequantize a packed index into `channels` values, normalized to
/// `[-1, 1]` when `normalized` is nonzero and raw codes otherwise.
///
/// # Safety
/// `values` must have room for the handle's channel count.
#[no_mangle]
pub unsafe extern "C" fn signtok_fsq_dequantize(
    fsq: *const SigntokFsq,
    index: u32,
    normalized: i32,
    values: *mut f64,
) -> SigntokStatus {
    guard(|| {
        non_null(fsq, "fsq")?;
        non_null(values, "values")?;
        let f = &*fsq;
        let mode = if normalized != 0 { Dequant::Normalized } else { Dequant::Raw };
        let v = lift(f.spec.unpack(index).and_then(|c| f.spec.dequantize(&c, mode)))?;
        std::ptr::copy_nonoverlapping(v.as_ptr(), values, v.len());
        Ok(())
    })
}

/// Normalized DTW between two row-major sequences of `dim`-vectors.
///
/// # Safety
/// `a` must hold `na * dim` values, `b` `nb * dim`, `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn signtok_dtw(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    dim: usize,
    out: *mut f64,
) -> SigntokStatus {
    guard(|| {
        non_null(out, "out")?;
        if dim == 0 {
            return Err(fail(SigntokStatus::Argument, "dim must be positive"));
        }
        if na > 0 {
            non_null(a, "a")?;
        }
        if nb > 0 {
            non_null(b, "b")?;
        }
        let sa: Vec<&[f64]> = if na == 0 { vec![] } else { std::slice::from_raw_parts(a, na * dim).chunks(dim).collect() };
        let sb: Vec<&[f64]> = if nb == 0 { vec![] } else { std::slice::from_raw_parts(b, nb * dim).chunks(dim).collect() };
        *out = lift(dtw(&sa, &sb))?.normalized;
        Ok(())
    })
}

/// The three trained models of one experiment.
pub struct SigntokStack {
    stack: Stack,
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, SigntokStatus> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SigntokStatus::Argument, &format!("{what} is not UTF-8")))
}

/// Load the stack trained under `root` for the JSON config at
/// `config_path` (null for the default config).
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn signtok_stack_open(
    config_path: *const c_char,
    root: *const c_char,
    out: *mut *mut SigntokStack,
) -> SigntokStatus {
    guard(|| {
        non_null(out, "out")?;
        let root = path_arg(root, "root")?;
        let config = if config_path.is_null() {
            ExperimentConfig::default()
        } else {
            lift(ExperimentConfig::load(Path::new(path_arg(config_path, "config_path")?)))?
        };
        let stack = lift(Workspace::new(root, true).load_stack(&config))?;
        *out = Box::into_raw(Box::new(SigntokStack { stack }));
        Ok(())
    })
}

/// # Safety
/// `stack` must come from [`signtok_stack_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn signtok_stack_free(stack: *mut SigntokStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}

/// Tokens per frame of the stack's translator, or 0 for a null handle.
///
/// # Safety
/// `stack` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn signtok_stack_tokens_per_frame(stack: *const SigntokStack) -> usize {
    stack.as_ref().map_or(0, |s| s.stack.translator.tokens_per_frame())
}

/// Translate a gloss sentence with the config's decoding. Writes the frame count to
/// `frames` and, if `capacity` allows, `frames * tokens_per_frame` indices
/// to `tokens`. Returns `BufferTooSmall` (with `frames` set) otherwise.
///
/// # Safety
/// `glosses` must hold `len` values, `tokens` `capacity`, `frames` be writable.
#[no_mangle]
pub unsafe extern "C" fn signtok_stack_translate(
    stack: *const SigntokStack,
    glosses: *const usize,
    len: usize,
    tokens: *mut u32,
    capacity: usize,
    frames: *mut usize,
) -> SigntokStatus {
    guard(|| {
        non_null(stack, "stack")?;
        non_null(glosses, "glosses")?;
        non_null(frames, "frames")?;
        let s = &(*stack).stack;
        let sentence = std::slice::from_raw_parts(glosses, len);
        let grid = lift(s.generate_tokens(sentence))?;
        *frames = grid.frames();
        let n = grid.indices().len();
        if n > capacity {
            return Err(fail(
                SigntokStatus::BufferTooSmall,
                &format!("{n} tokens do not fit in {capacity}"),
            ));
        }
        if n > 0 {
            non_null(tokens, "tokens")?;
            std::ptr::copy_nonoverlapping(grid.indices().as_ptr(), tokens, n);
        }
        Ok(())
    })
}

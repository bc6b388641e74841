//! C ABI over the `csgru` library.
//!
//! Every fallible function returns a [`CsgruStatus`]; on failure the message
//! is available from [`csgru_last_error`] on the same thread. Networks are
//! opaque handles released with [`csgru_network_free`]; strings returned by
//! the library are released with [`csgru_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use csgru::autodiff::{SurrogateKind, SurrogateSpec};
use csgru::bench::{run_experiment, ExperimentConfig};
use csgru::checkpoint;
use csgru::data::rate_encode;
use csgru::loss::max_over_time;
use csgru::network::{Network, NetworkSpec};
use csgru::tensor::Tensor;
use csgru::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsgruStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ConfigError = 3,
    DataError = 4,
    IoError = 5,
    Diverged = 6,
    Panic = 7,
}

/// Surrogate gradient shapes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsgruSurrogate {
    Triangular = 0,
    Arctan = 1,
    ScaledTanh = 2,
}

/// Opaque network handle.
pub struct CsgruNetwork {
    inner: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> CsgruStatus {
    match e {
        Error::Io { .. } => CsgruStatus::IoError,
        Error::Diverged { .. } => CsgruStatus::Diverged,
        e if e.is_config() => CsgruStatus::ConfigError,
        _ => CsgruStatus::DataError,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (CsgruStatus, String)>) -> CsgruStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CsgruStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CsgruStatus::Panic
        }
    }
}

fn lib(e: Error) -> (CsgruStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CsgruStatus, String) {
    (CsgruStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CsgruStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CsgruStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn csgru_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a randomly initialised network from a JSON architecture.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csgru_network_new(
    spec_json: *const c_char,
    seed: u64,
    out: *mut *mut CsgruNetwork,
) -> CsgruStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(spec_json, "spec_json")?;
        let spec: NetworkSpec = serde_json::from_str(text).map_err(|e| lib(e.into()))?;
        let inner = Network::init(spec, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(lib)?;
        *out = Box::into_raw(Box::new(CsgruNetwork { inner }));
        Ok(())
    })
}

/// Loads a network from a checkpoint archive.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csgru_network_load(path: *const c_char, out: *mut *mut CsgruNetwork) -> CsgruStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let inner = checkpoint::load(Path::new(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(CsgruNetwork { inner }));
        Ok(())
    })
}

/// Writes a checkpoint archive.
///
/// # Safety
/// `net` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn csgru_network_save(net: *const CsgruNetwork, path: *const c_char) -> CsgruStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        let path = str_arg(path, "path")?;
        checkpoint::save(Path::new(path), &net.inner).map_err(lib)
    })
}

/// Releases a network. Null is ignored.
///
/// # Safety
/// `net` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn csgru_network_free(net: *mut CsgruNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `net` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn csgru_network_classes(net: *const CsgruNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.inner.classes())
}

/// Values per input frame (`C·H·W`), or 0 for a null handle.
///
/// # Safety
/// `net` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn csgru_network_frame_len(net: *const CsgruNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.inner.frame_len())
}

/// Total number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `net` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn csgru_network_param_count(net: *const CsgruNetwork) -> usize {
    net.as_ref()
        .map_or(0, |n| n.inner.params().fields().iter().map(|(_, t)| t.len()).sum())
}

/// Runs `timesteps` frames of binary input (`timesteps × frame_len`
/// values, row-major) and writes the max-over-time logits. When
/// `activity_out` is non-null it receives the spikes per neuron per step
/// (0 for networks without spiking layers).
///
/// # Safety
/// `spikes` must hold `timesteps · frame_len` values and `logits_out`
/// `logits_len` values.
#[no_mangle]
pub unsafe extern "C" fn csgru_network_forward(
    net: *const CsgruNetwork,
    spikes: *const f64,
    timesteps: usize,
    logits_out: *mut f64,
    logits_len: usize,
    activity_out: *mut f64,
) -> CsgruStatus {
    guard(|| {
        let net = &net.as_ref().ok_or_else(|| null("net"))?.inner;
        if spikes.is_null() {
            return Err(null("spikes"));
        }
        if logits_out.is_null() {
            return Err(null("logits_out"));
        }
        if logits_len != net.classes() {
            return Err((
                CsgruStatus::InvalidArgument,
                format!("logits buffer holds {logits_len} values, network has {} classes", net.classes()),
            ));
        }
        if timesteps == 0 {
            return Err((CsgruStatus::InvalidArgument, "timesteps must be positive".into()));
        }
        let input = std::slice::from_raw_parts(spikes, timesteps * net.frame_len()).to_vec();
        let mut shape = vec![timesteps];
        shape.extend(&net.spec().input_shape);
        let seq = Tensor::new(shape, input).map_err(lib)?;
        let un = net.unroll(&seq).map_err(lib)?;
        let logits = max_over_time(&un.readout).map_err(lib)?;
        std::slice::from_raw_parts_mut(logits_out, logits_len).copy_from_slice(logits.data());
        if !activity_out.is_null() {
            let slots: usize = un.spikes.iter().map(Tensor::len).sum();
            let fired: f64 = un.spikes.iter().map(Tensor::sum).sum();
            *activity_out = if slots == 0 { 0.0 } else { fired / slots as f64 };
        }
        Ok(())
    })
}

/// Trains and evaluates one experiment described by a JSON config; the
/// metrics record is returned as a JSON string to free with
/// [`csgru_string_free`].
///
/// # Safety
/// `config_json` must be NUL-terminated and `metrics_out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csgru_run_experiment(config_json: *const c_char, metrics_out: *mut *mut c_char) -> CsgruStatus {
    guard(|| {
        if metrics_out.is_null() {
            return Err(null("metrics_out"));
        }
        let text = str_arg(config_json, "config_json")?;
        let cfg = ExperimentConfig::from_json(text).map_err(lib)?;
        let out = run_experiment(&cfg).map_err(lib)?;
        let json = serde_json::to_string(&out.record).map_err(|e| lib(e.into()))?;
        *metrics_out = CString::new(json)
            .map_err(|_| (CsgruStatus::DataError, "metrics contain NUL".into()))?
            .into_raw();
        if let Some(msg) = out.record.diverged {
            return Err((CsgruStatus::Diverged, msg));
        }
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn csgru_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Surrogate derivative `ψ(u)` at `u = v - v_th`; NaN for a non-positive
/// scale.
#[no_mangle]
pub extern "C" fn csgru_surrogate_derivative(kind: CsgruSurrogate, scale: f64, u: f64) -> f64 {
    let kind = match kind {
        CsgruSurrogate::Triangular => SurrogateKind::Triangular,
        CsgruSurrogate::Arctan => SurrogateKind::Arctan,
        CsgruSurrogate::ScaledTanh => SurrogateKind::ScaledTanh,
    };
    let spec = SurrogateSpec {
        kind,
        scale,
        v_th: 1.0,
    };
    if spec.validate().is_err() {
        return f64::NAN;
    }
    spec.derivative(u)
}

/// Rate-codes `len` intensities in `[0, 1]` into `timesteps × len` binary
/// values written to `out`.
///
/// # Safety
/// `image` must hold `len` values and `out` `timesteps · len` values.
#[no_mangle]
pub unsafe extern "C" fn csgru_rate_encode(
    image: *const f64,
    len: usize,
    timesteps: usize,
    seed: u64,
    sample: u64,
    out: *mut f64,
) -> CsgruStatus {
    guard(|| {
        if image.is_null() {
            return Err(null("image"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let pixels = std::slice::from_raw_parts(image, len).to_vec();
        let img = Tensor::new([1, 1, len], pixels).map_err(lib)?;
        let seq = rate_encode(&img, timesteps, seed, sample, 0).map_err(lib)?;
        std::slice::from_raw_parts_mut(out, timesteps * len).copy_from_slice(seq.data().data());
        Ok(())
    })
}

//! C ABI over the core crate.
//!
//! Every fallible call returns a [`WdslStatus`]; on failure the message is
//! available from [`wdsl_last_error`] on the same thread. Models are opaque
//! handles owned by the caller and released with [`wdsl_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use wdsl::dropout::{count_units, Architecture, ConvLayerSpec, VariationalModel};
use wdsl::experiments::{stream_rng, Checkpoint};
use wdsl::head::MixtureDistribution;
use wdsl::metrics::{self, Direction};
use wdsl::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WdslStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Dimension = 3,
    Usage = 4,
    Training = 5,
    Data = 6,
    Format = 7,
    Config = 8,
    Io = 9,
    Serialization = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

/// Opaque dropout model.
pub struct WdslModel {
    inner: VariationalModel,
}

/// One convolution layer for unit counting.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct WdslConvLayer {
    pub kernel: u64,
    pub c_in: u64,
    pub c_out: u64,
    pub height: u64,
    pub width: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> WdslStatus {
    match e {
        Error::Dimension(_) => WdslStatus::Dimension,
        Error::Usage(_) => WdslStatus::Usage,
        Error::Training { .. } => WdslStatus::Training,
        Error::Data(_) => WdslStatus::Data,
        Error::Format { .. } => WdslStatus::Format,
        Error::Config(_) => WdslStatus::Config,
        Error::Stage { source, .. } => status_of(source),
        Error::Io(_) => WdslStatus::Io,
        Error::Json(_) | Error::Csv(_) => WdslStatus::Serialization,
    }
}

struct Fail(WdslStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> WdslStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            WdslStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            WdslStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(WdslStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn slice_in<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn str_in<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(WdslStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

fn labels_of(v: &[u32]) -> Vec<usize> {
    v.iter().map(|&l| l as usize).collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wdsl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library from this thread.
#[no_mangle]
pub extern "C" fn wdsl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Builds a freshly initialised model from an architecture JSON object.
///
/// # Safety
/// `arch_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wdsl_model_new(
    arch_json: *const c_char,
    dropout_rate: f64,
    seed: u64,
    out_model: *mut *mut WdslModel,
) -> WdslStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let arch: Architecture = serde_json::from_str(str_in(arch_json, "arch_json")?).map_err(Error::from)?;
        let retain = wdsl::dropout::retain_from_dropout(dropout_rate)?;
        let inner = VariationalModel::new(arch, retain, &mut stream_rng(seed, 0))?;
        *slot = Box::into_raw(Box::new(WdslModel { inner }));
        Ok(())
    })
}

/// Loads the generator of a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wdsl_model_load(path: *const c_char, out_model: *mut *mut WdslModel) -> WdslStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let ck = Checkpoint::load(Path::new(str_in(path, "path")?))?;
        *slot = Box::into_raw(Box::new(WdslModel { inner: ck.generator }));
        Ok(())
    })
}

/// Releases a model; NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wdsl_model_free(model: *mut WdslModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable scalars in the model.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wdsl_model_num_params(model: *const WdslModel, out_count: *mut usize) -> WdslStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out(out_count, "out_count")? = m.inner.num_params();
        Ok(())
    })
}

/// Evaluates `samples` dropout models on `x` (row-major, shape `shape[0..ndim]`)
/// and writes the raw outputs one after another into `out`. When `out_len` is
/// too small nothing is written, `*written` receives the required length and
/// the call returns `WDSL_STATUS_BUFFER_TOO_SMALL`.
///
/// # Safety
/// Pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn wdsl_model_predict_ensemble(
    model: *const WdslModel,
    x: *const f64,
    shape: *const usize,
    ndim: usize,
    samples: usize,
    seed: u64,
    out_buf: *mut f64,
    out_len: usize,
    written: *mut usize,
) -> WdslStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let written = out(written, "written")?;
        let shape = slice_in(shape, ndim, "shape")?.to_vec();
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape, slice_in(x, n, "x")?.to_vec())?;
        let ens = m.inner.predictive_ensemble(&x, samples, &mut stream_rng(seed, 1))?;
        let need: usize = ens.outputs.iter().map(Tensor::len).sum();
        *written = need;
        if out_len < need {
            return Err(Fail(
                WdslStatus::BufferTooSmall,
                format!("output needs {need} values, buffer holds {out_len}"),
            ));
        }
        if out_buf.is_null() {
            return Err(null("out"));
        }
        let dst = slice::from_raw_parts_mut(out_buf, need);
        let mut at = 0;
        for t in &ens.outputs {
            dst[at..at + t.len()].copy_from_slice(t.data());
            at += t.len();
        }
        Ok(())
    })
}

/// Totals of patch-level and weight-level dropout units over `n` conv layers.
///
/// # Safety
/// `layers` must hold `n` entries.
#[no_mangle]
pub unsafe extern "C" fn wdsl_count_units(
    layers: *const WdslConvLayer,
    n: usize,
    out_patch: *mut u64,
    out_weight: *mut u64,
) -> WdslStatus {
    guard(|| {
        let specs: Vec<ConvLayerSpec> = slice_in(layers, n, "layers")?
            .iter()
            .enumerate()
            .map(|(i, l)| ConvLayerSpec {
                name: format!("layer{}", i + 1),
                kernel: l.kernel,
                c_in: l.c_in,
                c_out: l.c_out,
                height: l.height,
                width: l.width,
            })
            .collect();
        let r = count_units(&specs)?;
        *out(out_patch, "out_patch")? = r.total.patch_count;
        *out(out_weight, "out_weight")? = r.total.weight_count;
        Ok(())
    })
}

/// Mean IoU of `n` predicted labels against ground truth. A negative
/// `ignore_label` disables ignoring.
///
/// # Safety
/// `pred` and `gt` must hold `n` entries.
#[no_mangle]
pub unsafe extern "C" fn wdsl_miou(
    pred: *const u32,
    gt: *const u32,
    n: usize,
    num_classes: usize,
    ignore_label: i64,
    out_value: *mut f64,
) -> WdslStatus {
    guard(|| {
        let ignore = usize::try_from(ignore_label).ok();
        let v = metrics::miou(
            &labels_of(slice_in(pred, n, "pred")?),
            &labels_of(slice_in(gt, n, "gt")?),
            num_classes,
            ignore,
        )?;
        *out(out_value, "out_value")? = v;
        Ok(())
    })
}

/// Oracle top-k%: `scores` is `inputs×samples` row-major; the best
/// ⌈k·samples⌉ scores of each input are averaged, then averaged over inputs.
///
/// # Safety
/// `scores` must hold `inputs·samples` entries.
#[no_mangle]
pub unsafe extern "C" fn wdsl_top_k_percent(
    scores: *const f64,
    inputs: usize,
    samples: usize,
    k: f64,
    higher_is_better: bool,
    out_value: *mut f64,
) -> WdslStatus {
    guard(|| {
        let flat = slice_in(scores, inputs * samples, "scores")?;
        let rows: Vec<Vec<f64>> = flat.chunks(samples.max(1)).map(<[f64]>::to_vec).collect();
        let dir = if higher_is_better {
            Direction::HigherIsBetter
        } else {
            Direction::LowerIsBetter
        };
        *out(out_value, "out_value")? = metrics::top_k_percent(&rows, k, dir)?.value;
        Ok(())
    })
}

/// Conditional log-likelihood loss of a uniform mixture. `probs` is
/// `samples×classes×positions`; `labels` has `positions` entries.
///
/// # Safety
/// Buffers must hold the stated number of entries.
#[no_mangle]
pub unsafe extern "C" fn wdsl_mixture_cll(
    probs: *const f64,
    samples: usize,
    classes: usize,
    positions: usize,
    labels: *const u32,
    out_value: *mut f64,
) -> WdslStatus {
    guard(|| {
        let per = classes * positions;
        let flat = slice_in(probs, samples * per, "probs")?;
        let comps = flat
            .chunks(per.max(1))
            .map(|c| Tensor::new(vec![classes, positions], c.to_vec()))
            .collect::<wdsl::Result<Vec<_>>>()?;
        let mix = MixtureDistribution::new(comps)?;
        let v = wdsl::head::mixture_cll(&mix, &labels_of(slice_in(labels, positions, "labels")?))?;
        *out(out_value, "out_value")? = v;
        Ok(())
    })
}

/// Synthetic log-likelihood of a discriminator logit.
#[no_mangle]
pub extern "C" fn wdsl_synthetic_ll(logit: f64) -> f64 {
    wdsl::synthetic::synthetic_ll(logit)
}

/// Expected calibration error over `classes×positions` mean probabilities.
///
/// # Safety
/// `probs` must hold `classes·positions` entries and `labels` `positions`.
#[no_mangle]
pub unsafe extern "C" fn wdsl_ece(
    probs: *const f64,
    classes: usize,
    positions: usize,
    labels: *const u32,
    n_bins: usize,
    out_value: *mut f64,
) -> WdslStatus {
    guard(|| {
        let p = slice_in(probs, classes * positions, "probs")?;
        let t = metrics::calibration(p, &labels_of(slice_in(labels, positions, "labels")?), n_bins)?;
        *out(out_value, "out_value")? = t.ece;
        Ok(())
    })
}

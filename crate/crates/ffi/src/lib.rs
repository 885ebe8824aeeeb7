//! C ABI for loading, evaluating and merging checkpoints and for running
//! the full pipeline.
//!
//! Every fallible function returns a [`DmmStatus`]. On failure a message is
//! kept per thread and can be read with [`dmm_last_error`]. Handles returned
//! through out-pointers are owned by the caller and released with their
//! `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dmm_core::data::Dataset;
use dmm_core::merge::{merge_models, MergeConfig, Scheme, Threshold};
use dmm_core::nn::{evaluate, predict_probs, BufferStats, Checkpoint};
use dmm_core::pipeline::{run_pipeline, PipelineConfig};
use dmm_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DmmStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Format = 3,
    InvalidArgument = 4,
    Numeric = 5,
    Config = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DmmScheme {
    Uniform = 0,
    Datasize = 1,
}

/// Opaque checkpoint handle.
pub struct DmmCheckpoint {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DmmStatus {
    match e {
        Error::Io { .. } => DmmStatus::Io,
        Error::Format(_) => DmmStatus::Format,
        Error::Config(_) => DmmStatus::Config,
        Error::Tensor(_) | Error::Numeric(_) | Error::NoTransferableSamples => DmmStatus::Numeric,
        _ => DmmStatus::InvalidArgument,
    }
}

/// Runs `f`, records its error or panic and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), (DmmStatus, String)>) -> DmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DmmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DmmStatus::Panic
        }
    }
}

fn core<T>(r: dmm_core::Result<T>) -> Result<T, (DmmStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (DmmStatus, String) {
    (DmmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (DmmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (DmmStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a>(h: *const DmmCheckpoint) -> Result<&'a Checkpoint, (DmmStatus, String)> {
    h.as_ref().map(|h| &h.inner).ok_or_else(|| null("checkpoint"))
}

fn boxed(c: Checkpoint) -> *mut DmmCheckpoint {
    Box::into_raw(Box::new(DmmCheckpoint { inner: c }))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dmm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmm_checkpoint_load(path: *const c_char, out: *mut *mut DmmCheckpoint) -> DmmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let c = core(Checkpoint::load(&path))?;
        *out = boxed(c);
        Ok(())
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `ckpt` must come from this library and `path` be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn dmm_checkpoint_save(ckpt: *const DmmCheckpoint, path: *const c_char) -> DmmStatus {
    guard(|| {
        let c = handle(ckpt)?;
        let path = path_arg(path, "path")?;
        core(c.save(&path))
    })
}

/// Releases a checkpoint handle. Null is ignored.
///
/// # Safety
/// `ckpt` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dmm_checkpoint_free(ckpt: *mut DmmCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Total number of trainable scalars, or 0 for a null handle.
///
/// # Safety
/// `ckpt` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn dmm_checkpoint_num_params(ckpt: *const DmmCheckpoint) -> usize {
    handle(ckpt).map_or(0, |c| c.params.values().map(|t| t.numel()).sum())
}

/// Number of scalars in one input sample, or 0 for a null handle.
///
/// # Safety
/// `ckpt` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn dmm_checkpoint_input_size(ckpt: *const DmmCheckpoint) -> usize {
    handle(ckpt).map_or(0, |c| c.spec.input_shape.iter().product())
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `ckpt` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn dmm_checkpoint_num_classes(ckpt: *const DmmCheckpoint) -> usize {
    handle(ckpt).ok().and_then(|c| c.spec.classes()).unwrap_or(0)
}

/// Eval-mode class probabilities for `batch` samples laid out row-major in
/// `inputs`. `probs` must hold `batch * num_classes` floats.
///
/// # Safety
/// `inputs` must point to `batch * input_size` floats and `probs` to
/// `probs_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn dmm_checkpoint_predict(
    ckpt: *const DmmCheckpoint,
    inputs: *const f32,
    batch: usize,
    probs: *mut f32,
    probs_len: usize,
) -> DmmStatus {
    guard(|| {
        let c = handle(ckpt)?;
        if inputs.is_null() || probs.is_null() {
            return Err(null("inputs or probs"));
        }
        let classes = c.spec.classes().unwrap_or(0);
        if batch == 0 || probs_len != batch * classes {
            return Err((
                DmmStatus::InvalidArgument,
                format!("probs holds {probs_len} floats, expected {batch} x {classes}"),
            ));
        }
        let sample: usize = c.spec.input_shape.iter().product();
        let data = std::slice::from_raw_parts(inputs, batch * sample).to_vec();
        let mut shape = vec![batch];
        shape.extend(&c.spec.input_shape);
        let x = core(dmm_core::tensor::Tensor::new(shape, data).map_err(Error::from))?;
        let p = core(predict_probs(c, &x, 1.0))?;
        let out = std::slice::from_raw_parts_mut(probs, probs_len);
        for (o, v) in out.iter_mut().zip(p.data()) {
            *o = *v as f32;
        }
        Ok(())
    })
}

/// Pools `k` groups of per-channel moments. `means` and `vars` are `k`
/// rows of `channels` floats; `counts` holds `k` sample counts.
///
/// # Safety
/// Input pointers must cover the sizes above; outputs must hold `channels`
/// floats (mean, var) and one count.
#[no_mangle]
pub unsafe extern "C" fn dmm_merge_buffers(
    k: usize,
    channels: usize,
    means: *const f32,
    vars: *const f32,
    counts: *const u64,
    out_mean: *mut f32,
    out_var: *mut f32,
    out_count: *mut u64,
) -> DmmStatus {
    guard(|| {
        if [means, vars, out_mean as *const f32, out_var as *const f32].iter().any(|p| p.is_null())
            || counts.is_null()
            || out_count.is_null()
        {
            return Err(null("buffer argument"));
        }
        if k == 0 || channels == 0 {
            return Err((DmmStatus::InvalidArgument, "k and channels must be positive".into()));
        }
        let means = std::slice::from_raw_parts(means, k * channels);
        let vars = std::slice::from_raw_parts(vars, k * channels);
        let counts = std::slice::from_raw_parts(counts, k);
        let groups: Vec<BufferStats> = (0..k)
            .map(|i| BufferStats {
                mean: means[i * channels..(i + 1) * channels].to_vec(),
                var: vars[i * channels..(i + 1) * channels].to_vec(),
                count: counts[i],
            })
            .collect();
        let refs: Vec<&BufferStats> = groups.iter().collect();
        let pooled = core(dmm_core::merge::merge_buffers(&refs))?;
        std::slice::from_raw_parts_mut(out_mean, channels).copy_from_slice(&pooled.mean);
        std::slice::from_raw_parts_mut(out_var, channels).copy_from_slice(&pooled.var);
        *out_count = pooled.count;
        Ok(())
    })
}

/// Merges `k` domain checkpoints fine-tuned from `base` and returns the
/// merged checkpoint with pooled buffers. `tau` is an absolute outlier
/// threshold, or negative for mean plus one standard deviation.
/// `outliers`, if not null, receives `k` flags (1 for outliers).
///
/// # Safety
/// `models` must point to `k` valid handles and `outliers` be null or hold
/// `k` bytes.
#[no_mangle]
pub unsafe extern "C" fn dmm_merge_checkpoints(
    base: *const DmmCheckpoint,
    models: *const *const DmmCheckpoint,
    k: usize,
    scheme: DmmScheme,
    lambda: f64,
    tau: f64,
    outliers: *mut u8,
    out: *mut *mut DmmCheckpoint,
) -> DmmStatus {
    guard(|| {
        let base = handle(base)?;
        if models.is_null() || out.is_null() {
            return Err(null("models or out"));
        }
        let ptrs = std::slice::from_raw_parts(models, k);
        let models: Vec<Checkpoint> = ptrs.iter().map(|&p| handle(p).cloned()).collect::<Result<_, _>>()?;
        let cfg = MergeConfig {
            scheme: match scheme {
                DmmScheme::Uniform => Scheme::Uniform,
                DmmScheme::Datasize => Scheme::Datasize,
            },
            lambda,
            tau: if tau < 0.0 { Threshold::MeanPlusStd } else { Threshold::Absolute(tau) },
            exclude_outliers: false,
        };
        let (merged, plan) = core(merge_models(base, &models, &cfg))?;
        if !outliers.is_null() {
            let flags = std::slice::from_raw_parts_mut(outliers, k);
            for (i, f) in flags.iter_mut().enumerate() {
                *f = u8::from(plan.outliers.contains(&i));
            }
        }
        *out = boxed(merged);
        Ok(())
    })
}

/// Test accuracy of a checkpoint on a dataset file.
///
/// # Safety
/// `dataset_path` must be nul-terminated and `accuracy` writable.
#[no_mangle]
pub unsafe extern "C" fn dmm_evaluate(
    ckpt: *const DmmCheckpoint,
    dataset_path: *const c_char,
    accuracy: *mut f64,
) -> DmmStatus {
    guard(|| {
        let c = handle(ckpt)?;
        if accuracy.is_null() {
            return Err(null("accuracy"));
        }
        let path = path_arg(dataset_path, "dataset_path")?;
        let data = core(Dataset::load(&path))?;
        *accuracy = core(evaluate(c, &data))?.accuracy;
        Ok(())
    })
}

/// Runs the full pipeline from a TOML config. A non-null `out_dir`
/// overrides the configured output directory.
///
/// # Safety
/// Both strings must be nul-terminated (or `out_dir` null).
#[no_mangle]
pub unsafe extern "C" fn dmm_run_pipeline(config_path: *const c_char, out_dir: *const c_char) -> DmmStatus {
    guard(|| {
        let path = path_arg(config_path, "config_path")?;
        let mut cfg = core(PipelineConfig::load(&path))?;
        if !out_dir.is_null() {
            cfg.out_dir = path_arg(out_dir, "out_dir")?;
        }
        core(run_pipeline(&cfg)).map(drop)
    })
}

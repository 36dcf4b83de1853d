//! C ABI over the glassdepth pipeline.
//!
//! Every function returns a [`GdStatus`]; on failure the message is
//! available from [`gd_last_error`] on the same thread. Arrays are
//! row-major, depth in meters as `float` with 0 meaning "no reading", masks
//! as one byte per pixel (nonzero = transparent), RGB interleaved in
//! `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use glassdepth::checkpoint::{load_codec, load_denoiser};
use glassdepth::dataset::SynthSpec;
use glassdepth::evaluation::{compute_metrics, MaskScope};
use glassdepth::geometry::{DepthMap, Intrinsics, TransparencyMask};
use glassdepth::pipeline::{refine_depth, sample_from_sensor, GeometryConfig, Pipeline};
use glassdepth::scheduler::make_timestep_plan;
use glassdepth::tensor::Tensor;
use glassdepth::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    MissingInput = 5,
    Numerical = 6,
    Checkpoint = 7,
    Io = 8,
    /// A Rust panic was caught at the boundary.
    Internal = 9,
}

/// Pinhole intrinsics in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GdCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GdMetrics {
    pub rmse: f64,
    pub rel: f64,
    pub mae: f64,
    pub delta_105: f64,
    pub delta_110: f64,
    pub delta_125: f64,
    pub pixel_count: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GdScope {
    TransparentOnly = 0,
    AllPixels = 1,
}

/// Loaded codec and denoiser. Opaque to C.
pub struct GdPipeline {
    inner: Pipeline,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> GdStatus {
    match e {
        Error::InvalidArgument(_) => GdStatus::InvalidArgument,
        Error::Shape(_) => GdStatus::Shape,
        Error::Config(_) => GdStatus::Config,
        Error::MissingInput(_) => GdStatus::MissingInput,
        Error::Numerical(_) => GdStatus::Numerical,
        Error::Checkpoint(_) | Error::Corrupt { .. } => GdStatus::Checkpoint,
        _ => GdStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GdStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("{what} is null"));
            GdStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| payload.downcast_ref::<&str>().copied())
                .unwrap_or("panic");
            set_error(&format!("internal error: {msg}"));
            GdStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(p)
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    Ok(std::slice::from_raw_parts(non_null(p, what)?, n))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    let s = CStr::from_ptr(non_null(p, what)?);
    let s = s
        .to_str()
        .map_err(|_| Error::InvalidArgument(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn dims(height: u32, width: u32) -> Result<(usize, usize), Fail> {
    if height < 2 || width < 2 {
        return Err(Error::InvalidArgument(format!("image {height}x{width} is too small")).into());
    }
    Ok((height as usize, width as usize))
}

struct Inputs {
    raw: DepthMap,
    mask: TransparencyMask,
    intr: Intrinsics,
}

unsafe fn read_inputs(
    h: usize,
    w: usize,
    raw_depth: *const f32,
    mask: *const u8,
    camera: *const GdCamera,
) -> Result<Inputs, Fail> {
    let raw = slice(raw_depth, h * w, "raw_depth")?;
    let m = slice(mask, h * w, "mask")?;
    let cam = *non_null(camera, "camera")?;
    let raw = DepthMap::from_sensor(h, w, raw.iter().map(|&v| v as f64).collect())?;
    let mask = TransparencyMask::new(h, w, m.iter().map(|&b| b != 0).collect())?;
    Ok(Inputs {
        raw,
        mask,
        intr: Intrinsics {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
        },
    })
}

unsafe fn write_depth(out: *mut f32, depth: &DepthMap) -> Result<(), Fail> {
    let out = non_null(out, "out_depth")? as *mut f32;
    let dst = std::slice::from_raw_parts_mut(out, depth.values().len());
    for (d, &v) in dst.iter_mut().zip(depth.values()) {
        *d = v as f32;
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, empty after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn gd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a codec and a denoiser checkpoint. On success `*out` owns a
/// handle to release with [`gd_pipeline_free`].
///
/// # Safety
/// Paths must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_pipeline_load(
    codec_path: *const c_char,
    denoiser_path: *const c_char,
    out: *mut *mut GdPipeline,
) -> GdStatus {
    guard(|| {
        let out = non_null(out, "out")? as *mut *mut GdPipeline;
        *out = ptr::null_mut();
        let codec = load_codec(&path_arg(codec_path, "codec_path")?)?;
        let ck = load_denoiser(&path_arg(denoiser_path, "denoiser_path")?)?;
        if ck.codec_checksum != codec.params().checksum() {
            return Err(Error::Checkpoint("denoiser was trained against a different codec".into()).into());
        }
        let inner = Pipeline::new(codec, ck.denoiser, ck.train, GeometryConfig::default())?;
        *out = Box::into_raw(Box::new(GdPipeline { inner }));
        Ok(())
    })
}

/// Releases a handle from [`gd_pipeline_load`]. Null is ignored.
///
/// # Safety
/// `pipeline` must come from [`gd_pipeline_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn gd_pipeline_free(pipeline: *mut GdPipeline) {
    if !pipeline.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(pipeline))));
    }
}

/// Global-optimization depth completion without a learned model.
/// Transparent pixels are discarded from `raw_depth` and filled.
///
/// # Safety
/// Arrays must hold `height * width` elements; `camera` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gd_refine_depth(
    height: u32,
    width: u32,
    raw_depth: *const f32,
    mask: *const u8,
    camera: *const GdCamera,
    out_depth: *mut f32,
) -> GdStatus {
    guard(|| {
        let (h, w) = dims(height, width)?;
        let inp = read_inputs(h, w, raw_depth, mask, camera)?;
        let rgb = Tensor::zeros(&[3, h, w]);
        let sample = sample_from_sensor(
            "ffi",
            rgb,
            inp.raw,
            inp.mask,
            inp.intr,
            SynthSpec::default().boundary_threshold,
        )?;
        let (refined, _) = refine_depth(&sample, &GeometryConfig::default())?;
        write_depth(out_depth, &refined)
    })
}

/// Full completion: global optimization, then `steps` DDIM steps from
/// noise seeded with `seed`, decoded to depth.
///
/// # Safety
/// `pipeline` must be live; `rgb` must hold `3 * height * width` floats,
/// the other arrays `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn gd_complete_depth(
    pipeline: *const GdPipeline,
    height: u32,
    width: u32,
    rgb: *const f32,
    raw_depth: *const f32,
    mask: *const u8,
    camera: *const GdCamera,
    steps: u32,
    seed: u64,
    out_depth: *mut f32,
) -> GdStatus {
    guard(|| {
        let pipe = &(*non_null(pipeline, "pipeline")?).inner;
        let (h, w) = dims(height, width)?;
        let inp = read_inputs(h, w, raw_depth, mask, camera)?;
        let src = slice(rgb, 3 * h * w, "rgb")?;
        let mut planar = vec![0.0; 3 * h * w];
        for i in 0..h * w {
            for c in 0..3 {
                planar[c * h * w + i] = src[3 * i + c] as f64;
            }
        }
        let rgb = Tensor::from_vec(&[3, h, w], planar)?;
        let sample = sample_from_sensor(
            "ffi",
            rgb,
            inp.raw,
            inp.mask,
            inp.intr,
            SynthSpec::default().boundary_threshold,
        )?;
        let plan = make_timestep_plan(pipe.denoiser.horizon(), steps as usize)?;
        let out = pipe.infer(&sample, &plan, seed)?;
        write_depth(out_depth, &out)
    })
}

/// Depth metrics of `pred` against `gt` over the scoped pixels.
///
/// # Safety
/// Arrays must hold `height * width` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_compute_metrics(
    height: u32,
    width: u32,
    pred: *const f32,
    gt: *const f32,
    mask: *const u8,
    scope: GdScope,
    out: *mut GdMetrics,
) -> GdStatus {
    guard(|| {
        let (h, w) = dims(height, width)?;
        let n = h * w;
        let to_map = |v: &[f32]| DepthMap::dense(h, w, v.iter().map(|&x| x as f64).collect());
        let pred = to_map(slice(pred, n, "pred")?)?;
        let gt = to_map(slice(gt, n, "gt")?)?;
        let m = TransparencyMask::new(h, w, slice(mask, n, "mask")?.iter().map(|&b| b != 0).collect())?;
        let scope = match scope {
            GdScope::TransparentOnly => MaskScope::TransparentOnly,
            GdScope::AllPixels => MaskScope::AllPixels,
        };
        let r = compute_metrics(&pred, &gt, &m, scope)?;
        let out = non_null(out, "out")? as *mut GdMetrics;
        *out = GdMetrics {
            rmse: r.rmse,
            rel: r.rel,
            mae: r.mae,
            delta_105: r.delta_105,
            delta_110: r.delta_110,
            delta_125: r.delta_125,
            pixel_count: r.pixel_count as u64,
        };
        Ok(())
    })
}

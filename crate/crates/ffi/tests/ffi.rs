use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use glassdepth::checkpoint::{save_codec, save_denoiser};
use glassdepth::codec::{Codec, CodecConfig};
use glassdepth::denoiser::{Denoiser, DenoiserConfig};
use glassdepth::training::TrainConfig;
use glassdepth_ffi::*;

const H: u32 = 8;
const W: u32 = 12;

fn camera() -> GdCamera {
    GdCamera {
        fx: 10.0,
        fy: 10.0,
        cx: (W as f64 - 1.0) / 2.0,
        cy: (H as f64 - 1.0) / 2.0,
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(gd_last_error()) }.to_string_lossy().into_owned()
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn small_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        channels: 8,
        blocks: 1,
        bottleneck: 4,
        time_dim: 8,
        pyramid_channels: [4, 4, 4],
        ..DenoiserConfig::default()
    }
}

fn write_checkpoints(dir: &Path) -> (PathBuf, PathBuf) {
    let codec = Codec::new(&CodecConfig::default(), 1).unwrap();
    let den = Denoiser::new(&small_denoiser(), 1000, 2).unwrap();
    let cp = dir.join("codec.gdck");
    let dp = dir.join("denoiser.gdck");
    save_codec(&cp, &codec).unwrap();
    save_denoiser(&dp, &den, &TrainConfig::default(), &codec).unwrap();
    (cp, dp)
}

#[test]
fn version_is_nonempty() {
    let v = unsafe { CStr::from_ptr(gd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn refine_fills_masked_plane() {
    let n = (H * W) as usize;
    let raw = vec![0.8f32; n];
    let mut mask = vec![0u8; n];
    for r in 3..6 {
        for c in 4..8 {
            mask[r * W as usize + c] = 1;
        }
    }
    let mut out = vec![0f32; n];
    let st = unsafe { gd_refine_depth(H, W, raw.as_ptr(), mask.as_ptr(), &camera(), out.as_mut_ptr()) };
    assert_eq!(st, GdStatus::Ok, "{}", last_error());
    for v in out {
        assert!((v - 0.8).abs() < 1e-4, "{v}");
    }
}

#[test]
fn null_pointers_are_reported() {
    let mut out = vec![0f32; (H * W) as usize];
    let st = unsafe { gd_refine_depth(H, W, ptr::null(), ptr::null(), &camera(), out.as_mut_ptr()) };
    assert_eq!(st, GdStatus::NullPointer);
    assert!(last_error().contains("raw_depth"));
    let st = unsafe { gd_pipeline_load(ptr::null(), ptr::null(), ptr::null_mut()) };
    assert_eq!(st, GdStatus::NullPointer);
    unsafe { gd_pipeline_free(ptr::null_mut()) };
}

#[test]
fn metrics_of_perfect_prediction() {
    let n = (H * W) as usize;
    let gt: Vec<f32> = (0..n).map(|i| 0.5 + i as f32 * 0.01).collect();
    let mask = vec![1u8; n];
    let mut m = GdMetrics::default();
    let st = unsafe {
        gd_compute_metrics(H, W, gt.as_ptr(), gt.as_ptr(), mask.as_ptr(), GdScope::TransparentOnly, &mut m)
    };
    assert_eq!(st, GdStatus::Ok);
    assert_eq!((m.rmse, m.mae, m.rel), (0.0, 0.0, 0.0));
    assert_eq!(m.delta_105, 100.0);
    assert_eq!(m.pixel_count, n as u64);

    let empty = vec![0u8; n];
    let st = unsafe {
        gd_compute_metrics(H, W, gt.as_ptr(), gt.as_ptr(), empty.as_ptr(), GdScope::TransparentOnly, &mut m)
    };
    assert_eq!(st, GdStatus::InvalidArgument);
}

#[test]
fn pipeline_load_complete_free() {
    let dir = tempfile::tempdir().unwrap();
    let (cp, dp) = write_checkpoints(dir.path());
    let missing = c_path(&dir.path().join("absent.gdck"));
    let mut handle: *mut GdPipeline = ptr::null_mut();
    let st = unsafe { gd_pipeline_load(missing.as_ptr(), c_path(&dp).as_ptr(), &mut handle) };
    assert_eq!(st, GdStatus::MissingInput);
    assert!(handle.is_null());
    assert!(last_error().contains("absent.gdck"));

    // wrong kind of checkpoint in the codec slot
    let st = unsafe { gd_pipeline_load(c_path(&dp).as_ptr(), c_path(&dp).as_ptr(), &mut handle) };
    assert_eq!(st, GdStatus::Checkpoint);

    let st = unsafe { gd_pipeline_load(c_path(&cp).as_ptr(), c_path(&dp).as_ptr(), &mut handle) };
    assert_eq!(st, GdStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());

    let n = (H * W) as usize;
    let rgb = vec![0.4f32; 3 * n];
    let raw = vec![0.9f32; n];
    let mut mask = vec![0u8; n];
    mask[40] = 1;
    let mut a = vec![0f32; n];
    let mut b = vec![0f32; n];
    for out in [&mut a, &mut b] {
        let st = unsafe {
            gd_complete_depth(
                handle,
                H,
                W,
                rgb.as_ptr(),
                raw.as_ptr(),
                mask.as_ptr(),
                &camera(),
                3,
                11,
                out.as_mut_ptr(),
            )
        };
        assert_eq!(st, GdStatus::Ok, "{}", last_error());
    }
    assert_eq!(a, b);
    assert!(a.iter().all(|&v| v > 0.2 && v < 2.0));

    let st = unsafe {
        gd_complete_depth(handle, H, W, rgb.as_ptr(), raw.as_ptr(), mask.as_ptr(), &camera(), 0, 0, a.as_mut_ptr())
    };
    assert_eq!(st, GdStatus::InvalidArgument);
    // sizes not divisible by 4 are rejected by the model
    let st = unsafe {
        gd_complete_depth(handle, 6, 6, rgb.as_ptr(), raw.as_ptr(), mask.as_ptr(), &camera(), 2, 0, a.as_mut_ptr())
    };
    assert_ne!(st, GdStatus::Ok);
    unsafe { gd_pipeline_free(handle) };
}

fn header_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/glassdepth.h")
}

#[test]
fn header_declares_every_entry_point() {
    let h = std::fs::read_to_string(header_path()).unwrap();
    for f in [
        "gd_version",
        "gd_last_error",
        "gd_pipeline_load",
        "gd_pipeline_free",
        "gd_refine_depth",
        "gd_complete_depth",
        "gd_compute_metrics",
        "typedef struct GdPipeline GdPipeline",
        "GD_STATUS_NULL_POINTER = 1",
    ] {
        assert!(h.contains(f), "header lacks {f}");
    }
}

const C_PROGRAM: &str = r#"
#include "glassdepth.h"
#include <stdio.h>
#include <string.h>

int main(void) {
    enum { H = 8, W = 8 };
    float raw[H * W], out[H * W];
    uint8_t mask[H * W];
    for (int i = 0; i < H * W; i++) { raw[i] = 1.0f; mask[i] = (i % 9) == 0; }
    GdCamera cam = { 8.0, 8.0, 3.5, 3.5 };
    if (gd_refine_depth(H, W, raw, mask, &cam, out) != GD_STATUS_OK) return 1;
    for (int i = 0; i < H * W; i++) if (out[i] < 0.999f || out[i] > 1.001f) return 2;
    GdPipeline *p = NULL;
    if (gd_pipeline_load("/nonexistent/a", "/nonexistent/b", &p) != GD_STATUS_MISSING_INPUT) return 3;
    if (p != NULL || strlen(gd_last_error()) == 0) return 4;
    gd_pipeline_free(p);
    printf("ok %s\n", gd_version());
    return 0;
}
"#;

/// Compiles and runs a C caller against the header and the static library.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libglassdepth_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header_path().parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}

//! Exercises the C interface from Rust: handle lifecycle, status codes, the
//! thread-local error message, and agreement with the underlying library.
//! One test additionally compiles tests/smoke.c against the generated header
//! and runs it.

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use attnpool::backbone::{load_feature_sequence, save_feature_sequence, FeatureMap};
use attnpool::model::{forward_video, ModelParams, VideoFrames};
use attnpool::numerics::Tensor;
use attnpool::rng::{derive, TAG_INIT};
use attnpool::temporal::{pooled_probs, Pooling};
use attnpool::training::{save_checkpoint, TrainConfig, TrainState};

use attnpool_ffi::*;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join(format!("attnpool-ffi-{}", std::process::id()))
        .join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Checkpoint with the default model (4 classes, D=4, 2 heads) plus a
/// 3-frame 2×2 descriptor clip.
fn fixtures(dir: &Path) -> (PathBuf, PathBuf) {
    let config = TrainConfig::default();
    let mut rng = derive(41, &[TAG_INIT]);
    let params = ModelParams::init(config.model.clone(), &mut rng).unwrap();
    let momentum = params
        .named()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let state = TrainState {
        params,
        momentum,
        next_epoch: 0,
        step: 0,
        attempt: 0,
    };
    let ck = dir.join("checkpoint.json");
    save_checkpoint(&ck, &config, &state).unwrap();

    let frames: Vec<FeatureMap> = (0..3)
        .map(|f| {
            let data = (0..16).map(|i| ((f * 16 + i) as f64 * 0.37).sin()).collect();
            FeatureMap::new(2, 2, Tensor::new(vec![4, 4], data).unwrap()).unwrap()
        })
        .collect();
    let clip = dir.join("clip.feat");
    save_feature_sequence(&frames, &clip).unwrap();
    (ck, clip)
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn load_model(path: &Path) -> *mut AttnpoolModel {
    let mut model = ptr::null_mut();
    let status = unsafe { attnpool_model_load(c_path(path).as_ptr(), &mut model) };
    assert_eq!(status, AttnpoolStatus::Ok, "{}", last_error());
    assert!(!model.is_null());
    model
}

fn load_clip(path: &Path) -> *mut AttnpoolClip {
    let mut clip = ptr::null_mut();
    let status = unsafe { attnpool_clip_load(c_path(path).as_ptr(), &mut clip) };
    assert_eq!(status, AttnpoolStatus::Ok, "{}", last_error());
    assert!(!clip.is_null());
    clip
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(attnpool_last_error()) }
        .to_str()
        .unwrap()
        .to_string()
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(attnpool_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn predict_agrees_with_the_library() {
    let dir = scratch("predict");
    let (ck, clip_path) = fixtures(&dir);
    let model = load_model(&ck);
    let clip = load_clip(&clip_path);

    assert_eq!(unsafe { attnpool_model_num_classes(model) }, 4);
    assert_eq!(unsafe { attnpool_clip_frames(clip) }, 3);

    // Oracle: the same forward pass through the library, on the frames as
    // they come back from disk (FEAT stores float32).
    let frames = load_feature_sequence(&clip_path).unwrap();
    let (_, state) = attnpool::training::load_checkpoint(&ck).unwrap();
    let eval = forward_video(&state.params, &VideoFrames::Features(&frames)).unwrap();

    for (c_mode, mode) in [
        (AttnpoolPooling::Tp, Pooling::Tp),
        (AttnpoolPooling::Avg, Pooling::Avg),
        (AttnpoolPooling::Max, Pooling::Max),
        (AttnpoolPooling::Indep, Pooling::Indep),
    ] {
        let mut probs = [0.0f64; 4];
        let status =
            unsafe { attnpool_predict(model, clip, c_mode, probs.as_mut_ptr(), probs.len()) };
        assert_eq!(status, AttnpoolStatus::Ok, "{}", last_error());
        let expected = pooled_probs(&eval.scores, mode).unwrap();
        assert_eq!(probs.as_slice(), expected.data(), "{mode:?}");
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "{mode:?} sums to {sum}");
    }

    let mut importance = [0.0f64; 3];
    let status = unsafe {
        attnpool_frame_importance(model, clip, importance.as_mut_ptr(), importance.len())
    };
    assert_eq!(status, AttnpoolStatus::Ok, "{}", last_error());
    let sum: f64 = importance.iter().sum();
    assert!((sum - 1.0).abs() < 1e-12, "importance sums to {sum}");

    unsafe {
        attnpool_clip_free(clip);
        attnpool_model_free(model);
    }
}

#[test]
fn status_codes_cover_the_failure_modes() {
    let dir = scratch("failures");
    let (ck, clip_path) = fixtures(&dir);

    // Null output handle.
    let status = unsafe { attnpool_model_load(c_path(&ck).as_ptr(), ptr::null_mut()) };
    assert_eq!(status, AttnpoolStatus::NullArgument);

    // Null path.
    let mut model = ptr::null_mut();
    let status = unsafe { attnpool_model_load(ptr::null(), &mut model) };
    assert_eq!(status, AttnpoolStatus::NullArgument);

    // Non-UTF-8 path bytes.
    let bad = CString::new(&b"\xff\xfe"[..]).unwrap();
    let status = unsafe { attnpool_model_load(bad.as_ptr(), &mut model) };
    assert_eq!(status, AttnpoolStatus::InvalidUtf8);

    // Missing checkpoint: a format error naming the path.
    let missing = dir.join("nope.json");
    let status = unsafe { attnpool_model_load(c_path(&missing).as_ptr(), &mut model) };
    assert_eq!(status, AttnpoolStatus::Format);
    assert!(last_error().contains("nope.json"), "{}", last_error());

    // Missing clip surfaces the OS error.
    let mut clip = ptr::null_mut();
    let status = unsafe { attnpool_clip_load(c_path(&missing).as_ptr(), &mut clip) };
    assert_eq!(status, AttnpoolStatus::Io);

    // Truncated clip file: format error with the offset diagnosis.
    let stub = dir.join("stub.feat");
    std::fs::write(&stub, b"FEAT").unwrap();
    let status = unsafe { attnpool_clip_load(c_path(&stub).as_ptr(), &mut clip) };
    assert_eq!(status, AttnpoolStatus::Format);
    assert!(last_error().contains("header"), "{}", last_error());

    // Null handles answer 0 rather than crashing.
    assert_eq!(unsafe { attnpool_model_num_classes(ptr::null()) }, 0);
    assert_eq!(unsafe { attnpool_clip_frames(ptr::null()) }, 0);

    let model = load_model(&ck);
    let clip = load_clip(&clip_path);

    // Undersized probability buffer.
    let mut probs = [0.0f64; 2];
    let status = unsafe {
        attnpool_predict(model, clip, AttnpoolPooling::Tp, probs.as_mut_ptr(), probs.len())
    };
    assert_eq!(status, AttnpoolStatus::BufferTooSmall);
    assert!(last_error().contains("4 classes"), "{}", last_error());

    // Clip whose descriptor width disagrees with the model.
    let narrow: Vec<FeatureMap> = (0..2)
        .map(|_| FeatureMap::new(1, 2, Tensor::new(vec![2, 3], vec![0.1; 6]).unwrap()).unwrap())
        .collect();
    let narrow_path = dir.join("narrow.feat");
    save_feature_sequence(&narrow, &narrow_path).unwrap();
    let bad_clip = load_clip(&narrow_path);
    let mut probs = [0.0f64; 4];
    let status = unsafe {
        attnpool_predict(model, bad_clip, AttnpoolPooling::Tp, probs.as_mut_ptr(), probs.len())
    };
    assert_eq!(status, AttnpoolStatus::Contract);

    unsafe {
        attnpool_clip_free(bad_clip);
        attnpool_clip_free(clip);
        attnpool_model_free(model);
        // Null frees are no-ops.
        attnpool_clip_free(ptr::null_mut());
        attnpool_model_free(ptr::null_mut());
    }
}

#[test]
fn generated_header_names_the_full_surface() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/attnpool.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for needle in [
        "ATTNPOOL_STATUS_OK",
        "ATTNPOOL_STATUS_BUFFER_TOO_SMALL",
        "ATTNPOOL_POOLING_INDEP",
        "typedef struct AttnpoolModel AttnpoolModel;",
        "typedef struct AttnpoolClip AttnpoolClip;",
        "attnpool_version",
        "attnpool_last_error",
        "attnpool_model_load",
        "attnpool_model_free",
        "attnpool_model_num_classes",
        "attnpool_clip_load",
        "attnpool_clip_free",
        "attnpool_clip_frames",
        "attnpool_predict",
        "attnpool_frame_importance",
    ] {
        assert!(text.contains(needle), "header lacks {needle}");
    }
}

#[test]
fn header_compiles_and_links_from_c() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".to_string());
    if std::process::Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler ({cc}) on PATH");
        return;
    }

    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    // Integration tests sit two levels below the workspace target dir.
    let target = std::env::var("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|_| manifest.join("../../target"));
    let staticlib = target.join("debug/libattnpool_ffi.a");
    assert!(
        staticlib.exists(),
        "staticlib not at {} — built with an unusual profile?",
        staticlib.display()
    );

    let dir = scratch("c-smoke");
    let exe = dir.join("smoke");
    let out = std::process::Command::new(&cc)
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&staticlib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "compile failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    let (ck, clip) = fixtures(&dir);
    let run = std::process::Command::new(&exe)
        .arg(&ck)
        .arg(&clip)
        .output()
        .unwrap();
    assert!(
        run.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&run.stdout),
        String::from_utf8_lossy(&run.stderr)
    );
    assert_eq!(
        String::from_utf8_lossy(&run.stdout).trim(),
        "ok: 4 classes, 3 frames"
    );
}

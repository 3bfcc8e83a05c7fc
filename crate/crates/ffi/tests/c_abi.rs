use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use cdsl::data::synth_dataset;
use cdsl::model::{Model, Segmenter};
use cdsl::nn::{build_network, init_parameters, NetworkConfig};
use cdsl_ffi::*;

fn last_error() -> String {
    let p = cdsl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_model(dir: &std::path::Path) -> (Model, CString) {
    let config = NetworkConfig::dual_scale((32, 32)).with_channels(4, [4, 8, 12, 16]);
    let params = init_parameters(&build_network(&config).unwrap(), 9);
    let model = Model::new(config, params).unwrap();
    let manifest = model.save(dir).unwrap();
    (model, CString::new(manifest.to_str().unwrap()).unwrap())
}

#[test]
fn load_predict_free_matches_rust() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = small_model(dir.path());
    let sample = synth_dataset(1, 32, 4).unwrap().remove(0);
    let expected = model.predict_image(&sample.image).unwrap();

    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { cdsl_model_load(path.as_ptr(), &mut handle) }, CdslStatus::Ok);
    let (mut h, mut w) = (0usize, 0usize);
    assert_eq!(unsafe { cdsl_model_input_size(handle, &mut h, &mut w) }, CdslStatus::Ok);
    assert_eq!((h, w), (32, 32));
    assert_eq!(unsafe { cdsl_model_is_cascade(handle) }, 0);
    let mut probs = vec![0f32; 32 * 32];
    let status = unsafe { cdsl_model_predict(handle, sample.image.data().as_ptr(), 32, 32, probs.as_mut_ptr()) };
    assert_eq!(status, CdslStatus::Ok);
    assert_eq!(probs, expected.data());

    let big = vec![0.5f32; 64 * 64];
    let mut big_out = vec![0f32; 64 * 64];
    let status = unsafe { cdsl_model_predict(handle, big.as_ptr(), 64, 64, big_out.as_mut_ptr()) };
    assert_eq!(status, CdslStatus::Shape);
    assert!(last_error().contains("does not match"), "{}", last_error());
    unsafe { cdsl_model_free(handle) };
    unsafe { cdsl_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors_are_reported() {
    let mut handle = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.json").unwrap();
    assert_eq!(unsafe { cdsl_model_load(missing.as_ptr(), &mut handle) }, CdslStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("/nonexistent/model.json"));
    assert_eq!(unsafe { cdsl_model_load(ptr::null(), &mut handle) }, CdslStatus::NullArgument);

    let dir = tempfile::tempdir().unwrap();
    let (_, path) = small_model(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    std::fs::write(&ckpt, bytes).unwrap();
    assert_eq!(unsafe { cdsl_model_load(path.as_ptr(), &mut handle) }, CdslStatus::Checkpoint);
    assert!(last_error().contains("magic"));
    assert!(handle.is_null());
}

#[test]
fn metrics_and_loss() {
    let pred = [1u8, 1, 0, 0];
    let truth = [1u8, 0, 0, 0];
    let mut m = CdslMetrics::default();
    assert_eq!(unsafe { cdsl_metrics(pred.as_ptr(), truth.as_ptr(), 4, &mut m) }, CdslStatus::Ok);
    assert!((m.dice - 2.0 / 3.0).abs() < 1e-12);
    assert!((m.iou_fg - 0.5).abs() < 1e-12);
    assert!((m.iou_bg - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(unsafe { cdsl_metrics(ptr::null(), truth.as_ptr(), 4, &mut m) }, CdslStatus::NullArgument);

    let g = [1.0, 0.0, 1.0, 0.0];
    let mut loss = 0.0;
    assert_eq!(unsafe { cdsl_combined_loss(g.as_ptr(), g.as_ptr(), 4, 1, &mut loss) }, CdslStatus::Ok);
    assert!((loss + 1.0).abs() < 1e-5, "{loss}");
    assert_eq!(unsafe { cdsl_combined_loss(g.as_ptr(), g.as_ptr(), 0, 1, &mut loss) }, CdslStatus::InvalidArgument);
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(cdsl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/cdsl.h");
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c", header])
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

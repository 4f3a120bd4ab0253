use std::ffi::{CStr, CString};
use std::ptr;

use gate_core::autodiff::Tensor;
use gate_core::model::{AnyModel, GateModel, Model, ModelConfig};
use gate_core::persist::{self, CheckpointInfo};
use gate_ffi::*;

fn small_config() -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        backbone_hidden: vec![8],
        embedding_dim: 6,
        encoder_hidden: vec![5],
        latent_dim: 4,
        transfer_hidden: vec![5],
        ..ModelConfig::default()
    }
}

fn saved_model(dir: &std::path::Path) -> GateModel {
    let mut model = GateModel::new(small_config(), &["a".into(), "b".into()], 3).unwrap();
    model.add_target_unit("t", 4).unwrap();
    let any: AnyModel = model.clone().into();
    persist::save(&any, None, &CheckpointInfo::default(), dir).unwrap();
    model
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        gate_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn load(dir: &std::path::Path) -> *mut GateHandle {
    let path = CString::new(dir.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { gate_model_load(path.as_ptr(), &mut h) }, GateStatus::Ok);
    h
}

#[test]
fn predictions_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    let model = saved_model(&ck);
    let h = load(&ck);

    let mut n = 0;
    unsafe {
        assert_eq!(CStr::from_ptr(gate_model_kind(h)).to_str().unwrap(), "gate");
        assert_eq!(gate_model_input_dim(h, &mut n), GateStatus::Ok);
        assert_eq!(n, 3);
        assert_eq!(gate_model_task_count(h, &mut n), GateStatus::Ok);
    }
    let mut names = Vec::new();
    for i in 0..n {
        let mut p = ptr::null();
        assert_eq!(unsafe { gate_model_task_name(h, i, &mut p) }, GateStatus::Ok);
        names.push(unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string());
    }
    assert_eq!(names, model.tasks());

    let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let expected = model.predict("t", &Tensor::matrix(4, 3, x.clone()).unwrap()).unwrap();
    let task = CString::new("t").unwrap();
    let mut out = vec![0.0; 4];
    let status = unsafe { gate_model_predict(h, task.as_ptr(), x.as_ptr(), 4, 3, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, GateStatus::Ok);
    for (a, b) in out.iter().zip(expected.values()) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
    unsafe { gate_model_free(h) };
}

#[test]
fn errors_report_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    saved_model(&ck);

    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { gate_model_load(missing.as_ptr(), &mut h) }, GateStatus::Checkpoint);
    assert!(h.is_null());
    assert!(last_error().contains("nope"), "{}", last_error());
    assert_eq!(unsafe { gate_model_load(ptr::null(), &mut h) }, GateStatus::NullPointer);

    let h = load(&ck);
    let x = [0.0; 6];
    let mut out = [0.0; 2];
    let unknown = CString::new("zzz").unwrap();
    let status = unsafe { gate_model_predict(h, unknown.as_ptr(), x.as_ptr(), 2, 3, out.as_mut_ptr(), 2) };
    assert_eq!(status, GateStatus::UnknownTask);
    assert!(last_error().contains("zzz"));

    let task = CString::new("a").unwrap();
    let status = unsafe { gate_model_predict(h, task.as_ptr(), x.as_ptr(), 2, 3, out.as_mut_ptr(), 1) };
    assert_eq!(status, GateStatus::BufferTooSmall);
    let status = unsafe { gate_model_predict(h, task.as_ptr(), x.as_ptr(), 3, 2, out.as_mut_ptr(), 3) };
    assert_eq!(status, GateStatus::Shape);
    let mut p = ptr::null();
    assert_eq!(unsafe { gate_model_task_name(h, 99, &mut p) }, GateStatus::UnknownTask);
    unsafe { gate_model_free(h) };
    unsafe { gate_model_free(ptr::null_mut()) };
    assert!(unsafe { gate_model_kind(ptr::null()) }.is_null());
}

#[test]
fn last_error_reports_needed_size() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { gate_model_load(ptr::null(), &mut h) }, GateStatus::NullPointer);
    let needed = unsafe { gate_last_error(ptr::null_mut(), 0) };
    assert_eq!(needed, "path is null".len() + 1);
    let mut tiny = [1 as std::ffi::c_char; 5];
    unsafe { gate_last_error(tiny.as_mut_ptr(), tiny.len()) };
    assert_eq!(unsafe { CStr::from_ptr(tiny.as_ptr()) }.to_str().unwrap(), "path");
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/gate.h");
    for f in [
        "gate_model_load",
        "gate_model_free",
        "gate_model_kind",
        "gate_model_input_dim",
        "gate_model_task_count",
        "gate_model_task_name",
        "gate_model_predict",
        "gate_last_error",
        "gate_version",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    let v = unsafe { CStr::from_ptr(gate_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

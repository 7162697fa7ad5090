use std::ffi::{CStr, CString};
use std::ptr;

use tracer_core::em::{self, EmConfig};
use tracer_core::predictor::predict_dataset;
use tracer_core::simulation::{generate, SimulationConfig};
use tracer_core::ModelArtifact;
use tracer_ffi::*;

fn small_model() -> (ModelArtifact, tracer_core::Dataset) {
    let sim = SimulationConfig {
        n_hist: 800,
        n_current: 200,
        n_test: 50,
        n_zero_coef: 5,
        ..Default::default()
    };
    let cohort = generate(&sim, 0).unwrap();
    let cfg = EmConfig {
        max_iter: 20,
        transition_time: sim.transition_time,
        ..Default::default()
    };
    let (params, trace) = em::fit(&cohort.historical, &cohort.current, &cfg).unwrap();
    (ModelArtifact::new(params, trace.lambda1, trace.lambda2), cohort.test)
}

fn last_error() -> String {
    let p = tracer_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn predictions_match_core_bit_for_bit() {
    let (artifact, test) = small_model();
    let json = CString::new(artifact.to_json().unwrap()).unwrap();
    let mut model: *mut TracerModel = ptr::null_mut();
    unsafe {
        assert_eq!(tracer_model_from_json(json.as_ptr(), &mut model), TracerStatus::Ok);
        let (mut dw, mut da) = (0usize, 0usize);
        assert_eq!(tracer_model_dims(model, &mut dw, &mut da), TracerStatus::Ok);
        assert_eq!((dw, da), (test.dim_w(), test.dim_a()));
        let mut t = 0i64;
        assert_eq!(tracer_model_transition_time(model, &mut t), TracerStatus::Ok);
        assert_eq!(t, 100);

        let n = test.len();
        let w: Vec<f64> = (0..n).flat_map(|i| test.w_row(i)).collect();
        let a: Vec<f64> = (0..n).flat_map(|i| test.a_row(i)).collect();
        let mut out = vec![0.0; n];
        let mut q = vec![0.0; n];
        let st = tracer_model_predict(model, w.as_ptr(), a.as_ptr(), test.time().as_ptr(), n, out.as_mut_ptr(), q.as_mut_ptr());
        assert_eq!(st, TracerStatus::Ok);
        let core = predict_dataset(&artifact.params, &test).unwrap();
        assert_eq!(out, core.probability);
        assert_eq!(q, core.transition);
        // transition output is optional
        let st = tracer_model_predict(model, w.as_ptr(), a.as_ptr(), test.time().as_ptr(), n, out.as_mut_ptr(), ptr::null_mut());
        assert_eq!(st, TracerStatus::Ok);
        tracer_model_free(model);
    }
}

#[test]
fn load_from_file_and_report_errors() {
    let (artifact, _) = small_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    artifact.save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut model: *mut TracerModel = ptr::null_mut();
    unsafe {
        assert_eq!(tracer_model_load(cpath.as_ptr(), &mut model), TracerStatus::Ok);
        assert!(!model.is_null());
        tracer_model_free(model);

        let missing = CString::new(dir.path().join("nope.json").to_str().unwrap()).unwrap();
        assert_eq!(tracer_model_load(missing.as_ptr(), &mut model), TracerStatus::Io);
        assert!(model.is_null());
        assert!(last_error().contains("nope.json"));

        let bad = CString::new("{\"schema_version\": 99}").unwrap();
        assert_eq!(tracer_model_from_json(bad.as_ptr(), &mut model), TracerStatus::Schema);
        assert_eq!(tracer_model_load(ptr::null(), &mut model), TracerStatus::NullPointer);
        assert_eq!(tracer_model_dims(ptr::null(), ptr::null_mut(), ptr::null_mut()), TracerStatus::NullPointer);
        tracer_model_free(ptr::null_mut());
    }
}

#[test]
fn metric_functions() {
    let preds = [0.1, 0.4, 0.35, 0.8];
    let labels = [0.0, 0.0, 1.0, 1.0];
    let mut v = 0.0;
    unsafe {
        assert_eq!(tracer_auc(preds.as_ptr(), labels.as_ptr(), 4, &mut v), TracerStatus::Ok);
        assert_eq!(v, 0.75);
        let mut b = 0.0;
        let mut m = 0.0;
        assert_eq!(tracer_brier(preds.as_ptr(), labels.as_ptr(), 4, &mut b), TracerStatus::Ok);
        assert_eq!(tracer_mse(preds.as_ptr(), labels.as_ptr(), 4, &mut m), TracerStatus::Ok);
        assert_eq!(b, m);
        assert_eq!(tracer_r2(preds.as_ptr(), labels.as_ptr(), 4, &mut v), TracerStatus::Ok);
        assert!((v - (1.0 - 4.0 * m)).abs() < 1e-15);

        let one = [1.0, 1.0];
        assert_eq!(tracer_auc(preds.as_ptr(), one.as_ptr(), 2, &mut v), TracerStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        assert_eq!(tracer_auc(ptr::null(), labels.as_ptr(), 4, &mut v), TracerStatus::NullPointer);

        assert_eq!(tracer_smd_binary(0.3, 100, 0.3, 50, &mut v), TracerStatus::Ok);
        assert_eq!(v, 0.0);
        assert_eq!(tracer_smd_continuous(1.0, 1.0, 10, 0.0, 1.0, 10, &mut v), TracerStatus::Ok);
        assert!((v - 1.0).abs() < 1e-15);
        assert_eq!(tracer_smd_continuous(1.0, -1.0, 10, 0.0, 1.0, 10, &mut v), TracerStatus::InvalidArgument);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(tracer_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/tracer.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["tracer_model_load", "tracer_model_predict", "tracer_model_free", "tracer_last_error", "TRACER_STATUS_OK"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(status) = std::process::Command::new("cc")
        .args(["-std=c99", "-fsyntax-only", "-x", "c", header])
        .status()
    else {
        return; // no C compiler on this machine
    };
    assert!(status.success());
}

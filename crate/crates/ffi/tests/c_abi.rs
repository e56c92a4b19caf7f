use std::ffi::{CStr, CString};
use std::ptr;

use plo_core::eval::{sweep_and_score, ScoreMatrix};
use plo_ffi::*;

fn last_error() -> String {
    let p = plo_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_matrix() -> (Vec<f64>, Vec<u8>, Vec<usize>) {
    // 4 samples × 3 columns; column 2 is unseen.
    let scores = vec![
        0.9, 0.1, 0.5, //
        0.2, 0.7, 0.6, //
        0.3, 0.4, 0.35, //
        0.6, 0.2, 0.1,
    ];
    (scores, vec![0, 0, 1], vec![0, 1, 2, 2])
}

#[test]
fn evaluate_through_handles_matches_the_library() {
    let (scores, unseen, labels) = small_matrix();
    let mut m = ptr::null_mut();
    let st = unsafe { plo_score_matrix_new(scores.as_ptr(), 4, 3, unseen.as_ptr(), labels.as_ptr(), &mut m) };
    assert_eq!(st, PloStatus::Ok);
    let (mut rows, mut cols) = (0, 0);
    assert_eq!(unsafe { plo_score_matrix_shape(m, &mut rows, &mut cols) }, PloStatus::Ok);
    assert_eq!((rows, cols), (4, 3));

    let mut r = ptr::null_mut();
    assert_eq!(unsafe { plo_evaluate(m, &mut r) }, PloStatus::Ok);
    let mut metrics = PloMetrics::default();
    assert_eq!(unsafe { plo_report_metrics(r, &mut metrics) }, PloStatus::Ok);

    let names = vec!["c0".into(), "c1".into(), "c2".into()];
    let direct = sweep_and_score(
        &ScoreMatrix::new(names, vec![false, false, true], scores.clone(), labels.clone()).unwrap(),
    )
    .unwrap();
    assert_eq!(metrics.seen, direct.best_seen);
    assert_eq!(metrics.unseen, direct.best_unseen);
    assert_eq!(metrics.harmonic_mean, direct.best_hm);
    assert_eq!(metrics.auc, direct.auc);

    let n = unsafe { plo_report_curve_len(r) };
    assert_eq!(n, direct.curve.len());
    let mut first = PloCurvePoint::default();
    let mut last = PloCurvePoint::default();
    assert_eq!(unsafe { plo_report_curve_point(r, 0, &mut first) }, PloStatus::Ok);
    assert_eq!(unsafe { plo_report_curve_point(r, n - 1, &mut last) }, PloStatus::Ok);
    assert_eq!(first.bias, f64::NEG_INFINITY);
    assert_eq!(last.bias, f64::INFINITY);
    let mut oob = PloCurvePoint::default();
    assert_eq!(unsafe { plo_report_curve_point(r, n, &mut oob) }, PloStatus::Shape);

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { plo_report_to_json(r, &mut json) }, PloStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    assert_eq!(text, direct.to_json().unwrap());
    unsafe {
        plo_string_free(json);
        plo_report_free(r);
        plo_score_matrix_free(m);
    }
}

#[test]
fn null_and_shape_errors_set_a_message() {
    let (scores, unseen, labels) = small_matrix();
    let st = unsafe { plo_score_matrix_new(scores.as_ptr(), 4, 3, unseen.as_ptr(), labels.as_ptr(), ptr::null_mut()) };
    assert_eq!(st, PloStatus::NullPointer);
    assert!(last_error().contains("out"));

    let bad_labels = [0usize, 1, 2, 7];
    let mut m = ptr::null_mut();
    let st = unsafe { plo_score_matrix_new(scores.as_ptr(), 4, 3, unseen.as_ptr(), bad_labels.as_ptr(), &mut m) };
    assert_eq!(st, PloStatus::Shape);
    assert!(m.is_null());
    assert!(last_error().contains('7'));

    // A successful call clears the message.
    let mut m = ptr::null_mut();
    let st = unsafe { plo_score_matrix_new(scores.as_ptr(), 4, 3, unseen.as_ptr(), labels.as_ptr(), &mut m) };
    assert_eq!(st, PloStatus::Ok);
    assert!(plo_last_error().is_null());
    unsafe { plo_score_matrix_free(m) };
}

#[test]
fn matrices_without_both_origins_are_protocol_errors() {
    let scores = [0.1, 0.9, 0.3, 0.2];
    let unseen = [0u8, 1];
    let labels = [0usize, 0];
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { plo_score_matrix_new(scores.as_ptr(), 2, 2, unseen.as_ptr(), labels.as_ptr(), &mut m) },
        PloStatus::Ok
    );
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { plo_evaluate(m, &mut r) }, PloStatus::Protocol);
    assert!(r.is_null());
    unsafe { plo_score_matrix_free(m) };
}

#[test]
fn cue_validation_reports_reasons() {
    let good: Vec<CString> = ["a photo of something wet", "a photo of wet dog"]
        .iter()
        .map(|s| CString::new(*s).unwrap())
        .collect();
    let ptrs: Vec<_> = good.iter().map(|c| c.as_ptr()).collect();
    let state = CString::new("wet").unwrap();
    let object = CString::new("dog").unwrap();
    let mut ok = 9u8;
    let mut reason = ptr::null_mut();
    let st = unsafe { plo_validate_cues(ptrs.as_ptr(), 2, state.as_ptr(), object.as_ptr(), 2, &mut ok, &mut reason) };
    assert_eq!(st, PloStatus::Ok);
    assert_eq!(ok, 1);
    assert!(reason.is_null());

    let st = unsafe { plo_validate_cues(ptrs.as_ptr(), 2, state.as_ptr(), object.as_ptr(), 3, &mut ok, &mut reason) };
    assert_eq!(st, PloStatus::Ok);
    assert_eq!(ok, 0);
    let why = unsafe { CStr::from_ptr(reason) }.to_str().unwrap().to_owned();
    assert!(why.starts_with("count"), "{why}");
    unsafe { plo_string_free(reason) };

    let swapped = [ptrs[1], ptrs[0]];
    let st = unsafe { plo_validate_cues(swapped.as_ptr(), 2, state.as_ptr(), object.as_ptr(), 2, &mut ok, ptr::null_mut()) };
    assert_eq!(st, PloStatus::Ok);
    assert_eq!(ok, 0);
}

#[test]
fn dataset_generation_and_csv_reading() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[synth]\nnum_states = 3\nnum_objects = 4\nnum_val_unseen = 2\nnum_test_unseen = 2\n").unwrap();
    let out = tmp.path().join("data");
    let c_cfg = CString::new(cfg.to_str().unwrap()).unwrap();
    let c_out = CString::new(out.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { plo_generate_dataset(c_cfg.as_ptr(), c_out.as_ptr()) }, PloStatus::Ok);
    let pairs = std::fs::read_to_string(out.join("pairs.txt")).unwrap();
    assert_eq!(pairs.lines().count(), 12);
    // The directory exists now, so a second run refuses to overwrite it.
    assert_eq!(unsafe { plo_generate_dataset(c_cfg.as_ptr(), c_out.as_ptr()) }, PloStatus::Config);
    assert!(last_error().contains("exists"));

    let missing = CString::new(tmp.path().join("nope.csv").to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { plo_score_matrix_read_csv(missing.as_ptr(), &mut m) }, PloStatus::Io);

    let (scores, unseen, labels) = small_matrix();
    let names = vec!["a x".into(), "b x".into(), "a y".into()];
    let sm = ScoreMatrix::new(names, unseen.iter().map(|&u| u != 0).collect(), scores, labels).unwrap();
    let path = tmp.path().join("scores.csv");
    sm.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { plo_score_matrix_read_csv(c_path.as_ptr(), &mut m) }, PloStatus::Ok);
    let (mut rows, mut cols) = (0, 0);
    unsafe { plo_score_matrix_shape(m, &mut rows, &mut cols) };
    assert_eq!((rows, cols), (4, 3));
    unsafe { plo_score_matrix_free(m) };
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/plo.h");
    for sym in [
        "plo_last_error",
        "plo_version",
        "plo_string_free",
        "plo_score_matrix_new",
        "plo_score_matrix_read_csv",
        "plo_score_matrix_shape",
        "plo_score_matrix_free",
        "plo_evaluate",
        "plo_report_free",
        "plo_report_metrics",
        "plo_report_curve_len",
        "plo_report_curve_point",
        "plo_report_to_json",
        "plo_validate_cues",
        "plo_generate_dataset",
        "PLO_STATUS_OK",
        "typedef struct PloScoreMatrix PloScoreMatrix",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
    let v = unsafe { CStr::from_ptr(plo_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

//! Exercises the C ABI from Rust: full pipeline, error statuses, ownership,
//! and determinism across the boundary.

use std::ffi::{CStr, CString};
use std::ptr;

use cafe_ffi::*;

fn c_path(path: &std::path::Path) -> CString {
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(cafe_last_error_message()) }
        .to_str()
        .unwrap()
        .to_owned()
}

/// Three well-separated 4-D blobs, row-major, deterministic. Inputs span all
/// four dimensions so downstream feature covariances stay full-rank.
fn blob_buffers(n: usize) -> (Vec<f64>, Vec<u32>) {
    const CENTERS: [[f64; 4]; 3] = [
        [3.0, -3.0, 3.0, -3.0],
        [-3.0, 3.0, 3.0, -3.0],
        [0.0, 0.0, -3.0, 3.0],
    ];
    let mut features = Vec::with_capacity(n * 4);
    let mut labels = Vec::with_capacity(n);
    let mut state = 0x9e3779b97f4a7c15u64;
    let mut unit = || {
        // xorshift-based uniform in [-0.5, 0.5); plenty for test fixtures
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    for i in 0..n {
        let class = i % 3;
        for j in 0..4 {
            features.push(CENTERS[class][j] + unit());
        }
        labels.push(class as u32);
    }
    (features, labels)
}

fn make_dataset(n: usize) -> *mut CafeDataset {
    let (features, labels) = blob_buffers(n);
    let mut data = ptr::null_mut();
    let status = cafe_dataset_from_raw(features.as_ptr(), labels.as_ptr(), n, 4, 3, &mut data);
    assert_eq!(status, CafeStatus::Ok, "{}", last_error());
    data
}

#[test]
fn version_matches_crate_metadata() {
    let version = unsafe { CStr::from_ptr(cafe_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn full_pipeline_over_the_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(600);
    assert_eq!(cafe_dataset_len(data), 600);
    assert_eq!(cafe_dataset_dim(data), 4);

    // dataset file roundtrip
    let data_path = c_path(&dir.path().join("blobs.cafd"));
    assert_eq!(cafe_dataset_save(data, data_path.as_ptr()), CafeStatus::Ok);
    let mut reloaded = ptr::null_mut();
    assert_eq!(
        cafe_dataset_load(data_path.as_ptr(), &mut reloaded),
        CafeStatus::Ok
    );
    assert_eq!(cafe_dataset_len(reloaded), 600);
    cafe_dataset_free(reloaded);

    // pretrain a fresh model
    let mut model = ptr::null_mut();
    assert_eq!(
        cafe_model_new(4, 8, 3, 3, 7, &mut model),
        CafeStatus::Ok,
        "{}",
        last_error()
    );
    assert_eq!(cafe_model_feature_dim(model), 3);
    let mut accuracy = 0.0;
    assert_eq!(
        cafe_pretrain(model, data, 20, 0.05, 0.8, 1, &mut accuracy),
        CafeStatus::Ok,
        "{}",
        last_error()
    );
    assert!(accuracy > 0.95, "source training reached {accuracy}");

    // model file roundtrip preserves predictions
    let model_path = c_path(&dir.path().join("model.cafm"));
    assert_eq!(cafe_model_save(model, model_path.as_ptr()), CafeStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(
        cafe_model_load(model_path.as_ptr(), &mut loaded),
        CafeStatus::Ok
    );
    let mut direct = vec![u32::MAX; 600];
    let mut via_file = vec![u32::MAX; 600];
    assert_eq!(cafe_predict(model, data, direct.as_mut_ptr()), CafeStatus::Ok);
    assert_eq!(
        cafe_predict(loaded, data, via_file.as_mut_ptr()),
        CafeStatus::Ok
    );
    assert_eq!(direct, via_file);
    cafe_model_free(loaded);

    // freeze statistics and roundtrip them
    let mut stats = ptr::null_mut();
    assert_eq!(
        cafe_stats_precompute(model, data, 2, 1e-5, 0, &mut stats),
        CafeStatus::Ok,
        "{}",
        last_error()
    );
    assert_eq!(cafe_stats_k(stats), 2);
    assert_eq!(cafe_stats_dim(stats), 3);
    let stats_path = c_path(&dir.path().join("stats.cafe"));
    assert_eq!(cafe_stats_save(stats, stats_path.as_ptr()), CafeStatus::Ok);
    let mut stats2 = ptr::null_mut();
    assert_eq!(
        cafe_stats_load(stats_path.as_ptr(), &mut stats2),
        CafeStatus::Ok
    );
    assert_eq!(cafe_stats_k(stats2), 2);
    cafe_stats_free(stats2);

    // adapt on the (unshifted) data itself: must run and stay sane
    let mut config = cafe_tta_config_default();
    config.batch_size = 100;
    config.epochs = 2;
    let mut adapted = ptr::null_mut();
    let mut report = ptr::null_mut();
    assert_eq!(
        cafe_adapt(model, stats, data, &config, &mut adapted, &mut report),
        CafeStatus::Ok,
        "{}",
        last_error()
    );
    assert_eq!(cafe_report_batches_consumed(report), 12);
    assert!(cafe_report_final_loss(report).is_finite());
    assert!(cafe_report_accuracy(report) > 0.9);
    let before = cafe_report_frechet_before(report);
    let after = cafe_report_frechet_after(report);
    assert!(before.is_finite() && after.is_finite());

    // the JSON view agrees with the typed accessors
    let json_ptr = cafe_report_to_json(report);
    assert!(!json_ptr.is_null());
    let json = unsafe { CStr::from_ptr(json_ptr) }.to_str().unwrap();
    let parsed: serde_json::Value = serde_json::from_str(json).unwrap();
    assert_eq!(parsed["batches_consumed"], 12);
    assert_eq!(parsed["config"]["batch_size"], 100);
    assert_eq!(parsed["loss_total"].as_array().unwrap().len(), 12);

    // same inputs, same config → bit-identical report up to wall time
    let mut adapted2 = ptr::null_mut();
    let mut report2 = ptr::null_mut();
    assert_eq!(
        cafe_adapt(model, stats, data, &config, &mut adapted2, &mut report2),
        CafeStatus::Ok
    );
    let json2_ptr = cafe_report_to_json(report2);
    let json2 = unsafe { CStr::from_ptr(json2_ptr) }.to_str().unwrap();
    let mut rerun: serde_json::Value = serde_json::from_str(json2).unwrap();
    let mut first = parsed.clone();
    rerun["wall_time_secs"] = serde_json::Value::Null;
    first["wall_time_secs"] = serde_json::Value::Null;
    assert_eq!(first, rerun);

    cafe_string_free(json_ptr);
    cafe_string_free(json2_ptr);
    cafe_report_free(report);
    cafe_report_free(report2);
    cafe_model_free(adapted);
    cafe_model_free(adapted2);
    cafe_stats_free(stats);
    cafe_model_free(model);
    cafe_dataset_free(data);
}

#[test]
fn statuses_map_failures_and_set_messages() {
    // missing file → Io with a message
    let missing = CString::new("/nonexistent/nowhere.cafm").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(
        cafe_model_load(missing.as_ptr(), &mut model),
        CafeStatus::Io
    );
    assert!(!last_error().is_empty());

    // null pointers → NullPointer, not a crash
    assert_eq!(
        cafe_model_load(ptr::null(), &mut model),
        CafeStatus::NullPointer
    );
    assert_eq!(
        cafe_dataset_save(ptr::null(), missing.as_ptr()),
        CafeStatus::NullPointer
    );
    assert_eq!(cafe_dataset_len(ptr::null()), 0);
    assert!(cafe_report_accuracy(ptr::null()).is_nan());

    // label out of range → InvalidInput
    let features = [0.0f64, 1.0, 2.0, 3.0];
    let labels = [0u32, 9];
    let mut data = ptr::null_mut();
    assert_eq!(
        cafe_dataset_from_raw(features.as_ptr(), labels.as_ptr(), 2, 2, 2, &mut data),
        CafeStatus::InvalidInput
    );

    // corrupt artifact → ChecksumFailure
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(200);
    let path = dir.path().join("data.cafd");
    let cpath = c_path(&path);
    assert_eq!(cafe_dataset_save(data, cpath.as_ptr()), CafeStatus::Ok);
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();
    let mut corrupt = ptr::null_mut();
    assert_eq!(
        cafe_dataset_load(cpath.as_ptr(), &mut corrupt),
        CafeStatus::ChecksumFailure
    );
    assert!(last_error().contains("checksum"), "{}", last_error());
    cafe_dataset_free(data);
}

#[test]
fn adapt_refuses_oversized_groups_with_degenerate_status() {
    let data = make_dataset(300);
    let mut model = ptr::null_mut();
    assert_eq!(cafe_model_new(4, 8, 6, 3, 3, &mut model), CafeStatus::Ok);
    let mut accuracy = 0.0;
    assert_eq!(
        cafe_pretrain(model, data, 10, 0.05, 0.8, 4, &mut accuracy),
        CafeStatus::Ok
    );
    let mut stats = ptr::null_mut();
    assert_eq!(
        cafe_stats_precompute(model, data, 1, 1e-5, 0, &mut stats),
        CafeStatus::Ok
    );

    // one group of 6 dims but batches of 4: the covariance would be singular
    let mut config = cafe_tta_config_default();
    config.batch_size = 4;
    let mut adapted = ptr::null_mut();
    assert_eq!(
        cafe_adapt(model, stats, data, &config, &mut adapted, ptr::null_mut()),
        CafeStatus::DegenerateBatch
    );
    assert!(last_error().contains("degenerate"), "{}", last_error());
    assert!(adapted.is_null(), "no model must be produced on failure");

    cafe_stats_free(stats);
    cafe_model_free(model);
    cafe_dataset_free(data);
}

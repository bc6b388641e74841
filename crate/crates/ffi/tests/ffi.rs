use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use csgru_ffi::*;

const SPEC: &str = r#"{
  "cell": "variant",
  "mods": { "mod1": true, "mod2": true, "mod3": true, "mod4": true },
  "input_shape": [1, 4, 4],
  "hidden": [2, 4, 4],
  "classes": 3
}"#;

fn last_error() -> String {
    let p = csgru_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_network(seed: u64) -> *mut CsgruNetwork {
    let spec = CString::new(SPEC).unwrap();
    let mut net = ptr::null_mut();
    let status = unsafe { csgru_network_new(spec.as_ptr(), seed, &mut net) };
    assert_eq!(status, CsgruStatus::Ok);
    assert!(!net.is_null());
    net
}

fn forward(net: *const CsgruNetwork, input: &[f64], t: usize) -> (Vec<f64>, f64) {
    let mut logits = vec![0.0; 3];
    let mut activity = -1.0;
    let status = unsafe { csgru_network_forward(net, input.as_ptr(), t, logits.as_mut_ptr(), 3, &mut activity) };
    assert_eq!(status, CsgruStatus::Ok);
    (logits, activity)
}

#[test]
fn network_lifecycle_and_forward() {
    let net = new_network(1);
    unsafe {
        assert_eq!(csgru_network_classes(net), 3);
        assert_eq!(csgru_network_frame_len(net), 16);
        assert!(csgru_network_param_count(net) > 0);
    }
    let (logits, activity) = forward(net, &[0.0; 5 * 16], 5);
    assert!(logits.iter().all(|x| x.is_finite()));
    assert_eq!(activity, 0.0);
    let input: Vec<f64> = (0..5 * 16).map(|k| ((k * 7) % 3 == 0) as u8 as f64).collect();
    let (a, _) = forward(net, &input, 5);
    let (b, _) = forward(net, &input, 5);
    assert_eq!(a, b);
    unsafe { csgru_network_free(net) };
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("n.ckpt").to_str().unwrap()).unwrap();
    let net = new_network(2);
    assert_eq!(unsafe { csgru_network_save(net, path.as_ptr()) }, CsgruStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { csgru_network_load(path.as_ptr(), &mut back) }, CsgruStatus::Ok);
    let input: Vec<f64> = (0..4 * 16).map(|k| (k % 2) as f64).collect();
    assert_eq!(forward(net, &input, 4), forward(back, &input, 4));
    unsafe {
        csgru_network_free(net);
        csgru_network_free(back);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { csgru_network_new(ptr::null(), 0, &mut net) }, CsgruStatus::NullPointer);
    assert!(last_error().contains("spec_json"));

    let bad = CString::new(SPEC.replace("[2, 4, 4]", "[32]")).unwrap();
    assert_eq!(unsafe { csgru_network_new(bad.as_ptr(), 0, &mut net) }, CsgruStatus::ConfigError);
    assert!(net.is_null());

    let missing = CString::new("/nonexistent/dir/model.ckpt").unwrap();
    assert_eq!(unsafe { csgru_network_load(missing.as_ptr(), &mut net) }, CsgruStatus::IoError);

    let net = new_network(3);
    let mut logits = [0.0; 2];
    let input = [0.0; 16];
    let status = unsafe { csgru_network_forward(net, input.as_ptr(), 1, logits.as_mut_ptr(), 2, ptr::null_mut()) };
    assert_eq!(status, CsgruStatus::InvalidArgument);
    assert!(last_error().contains("3 classes"));
    let nonbinary = [0.5; 16];
    let mut logits = [0.0; 3];
    let status = unsafe { csgru_network_forward(net, nonbinary.as_ptr(), 1, logits.as_mut_ptr(), 3, ptr::null_mut()) };
    assert_eq!(status, CsgruStatus::Ok, "the forward pass accepts graded input");
    unsafe {
        csgru_network_free(net);
        csgru_network_free(ptr::null_mut());
        assert_eq!(csgru_network_classes(ptr::null()), 0);
    }
}

#[test]
fn experiment_returns_metrics_json() {
    let cfg = CString::new(
        r#"{ "cell": "spikgru", "task": { "kind": "pattern3", "n_train": 12, "n_test": 6, "timesteps": 10,
             "grid": [1, 4, 4], "noise": 0.0 }, "hidden": [8], "epochs": 2, "batch_size": 4, "seed": 5 }"#,
    )
    .unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { csgru_run_experiment(cfg.as_ptr(), &mut out) }, CsgruStatus::Ok);
    let json = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_owned();
    unsafe { csgru_string_free(out) };
    let rec: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(rec["label"], "SpikGRU");
    assert_eq!(rec["rows"].as_array().unwrap().len(), 2);

    let bad = CString::new(r#"{ "cell": "gru" }"#).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { csgru_run_experiment(bad.as_ptr(), &mut out) }, CsgruStatus::ConfigError);
    assert!(out.is_null());
}

#[test]
fn surrogate_and_rate_coding_helpers() {
    let psi = csgru_surrogate_derivative(CsgruSurrogate::Arctan, 1.0, 0.0);
    assert_eq!(psi, 1.0);
    let tri = csgru_surrogate_derivative(CsgruSurrogate::Triangular, 2.0, 0.25);
    assert_eq!(tri, 2.0 * (1.0 - 0.5));
    assert!(csgru_surrogate_derivative(CsgruSurrogate::ScaledTanh, -1.0, 0.0).is_nan());

    let image = [0.0, 1.0, 0.5];
    let mut a = [9.0; 12];
    let mut b = [9.0; 12];
    unsafe {
        assert_eq!(csgru_rate_encode(image.as_ptr(), 3, 4, 7, 0, a.as_mut_ptr()), CsgruStatus::Ok);
        assert_eq!(csgru_rate_encode(image.as_ptr(), 3, 4, 7, 0, b.as_mut_ptr()), CsgruStatus::Ok);
    }
    assert_eq!(a, b);
    for t in 0..4 {
        assert_eq!(a[3 * t], 0.0);
        assert_eq!(a[3 * t + 1], 1.0);
    }
    let bright = [1.5];
    let status = unsafe { csgru_rate_encode(bright.as_ptr(), 1, 1, 0, 0, a.as_mut_ptr()) };
    assert_eq!(status, CsgruStatus::DataError);
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/csgru.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "csgru_last_error",
        "csgru_network_new",
        "csgru_network_load",
        "csgru_network_save",
        "csgru_network_free",
        "csgru_network_forward",
        "csgru_run_experiment",
        "csgru_string_free",
        "csgru_rate_encode",
        "CSGRU_STATUS_OK",
        "typedef struct CsgruNetwork CsgruNetwork",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    // A C translation unit including the header must type-check.
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"csgru.h\"\nint main(void) { CsgruNetwork *n = 0; return csgru_network_new(\"{}\", 1, &n) == CSGRU_STATUS_OK; }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match std::process::Command::new(&cc)
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("no C compiler ({cc}: {e}); header syntax not checked"),
    }
}

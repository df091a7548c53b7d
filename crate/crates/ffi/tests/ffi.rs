use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use mmscore::config::Config;
use mmscore::io::save_checkpoint;
use mmscore::modality::ModalitySet;
use mmscore::net::NetConfig;
use mmscore::train::TrainState;
use mmscore_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = mms_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_checkpoint(dir: &Path) -> CString {
    let mut cfg = Config::default();
    cfg.net = NetConfig {
        widths: vec![4],
        embed_dim: 4,
    };
    let state = TrainState::new(cfg, ModalitySet::new(&["flair", "t1"]).unwrap()).unwrap();
    let path = dir.join("m.mmck");
    save_checkpoint(&state, &path).unwrap();
    cstr(path.to_str().unwrap())
}

unsafe fn new_tensor(dims: &[usize], data: &[f64]) -> *mut MmsTensor {
    let mut t = ptr::null_mut();
    assert_eq!(mms_tensor_new(dims.as_ptr(), dims.len(), data.as_ptr(), &mut t), MmsStatus::Ok);
    t
}

#[test]
fn tensor_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(dir.path().join("t.mmct").to_str().unwrap());
    unsafe {
        let data: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect();
        let t = new_tensor(&[2, 3], &data);
        assert_eq!(mms_tensor_write(t, path.as_ptr()), MmsStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(mms_tensor_read(path.as_ptr(), &mut back), MmsStatus::Ok);
        assert_eq!(mms_tensor_ndims(back), 2);
        let mut dims = [0usize; 2];
        assert_eq!(mms_tensor_dims(back, dims.as_mut_ptr(), 2), MmsStatus::Ok);
        assert_eq!(dims, [2, 3]);
        assert_eq!(mms_tensor_len(back), 6);
        let values = std::slice::from_raw_parts(mms_tensor_data(back), 6);
        assert_eq!(values, &data[..]);
        assert_eq!(mms_tensor_dims(back, dims.as_mut_ptr(), 1), MmsStatus::InvalidArgument);
        mms_tensor_free(t);
        mms_tensor_free(back);
    }
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.mmct");
    std::fs::write(&bad, b"XXXX\x01\x00\x00\x01\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
    let bad = cstr(bad.to_str().unwrap());
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(mms_tensor_read(bad.as_ptr(), &mut t), MmsStatus::Format);
        assert!(t.is_null());
        assert!(last_error().contains("magic"));
        let missing = cstr("/nonexistent/file.mmct");
        assert_eq!(mms_tensor_read(missing.as_ptr(), &mut t), MmsStatus::Io);
        assert_eq!(mms_tensor_read(ptr::null(), &mut t), MmsStatus::NullPointer);
        let mut m = ptr::null_mut();
        assert_eq!(mms_model_load(bad.as_ptr(), &mut m), MmsStatus::Format);
        let dims = [0usize];
        assert_eq!(mms_tensor_new(dims.as_ptr(), 1, [].as_ptr(), &mut t), MmsStatus::Shape);
        // A successful call clears the message.
        let mut v = 0.0;
        let x = [0.5];
        assert_eq!(mms_mae(x.as_ptr(), x.as_ptr(), 1, &mut v), MmsStatus::Ok);
        assert!(mms_last_error_message().is_null());
        // Null handles are harmless.
        mms_tensor_free(ptr::null_mut());
        mms_model_free(ptr::null_mut());
        assert_eq!(mms_tensor_len(ptr::null()), 0);
    }
}

#[test]
fn metrics_through_c() {
    let x = vec![0.3; 144];
    let y = vec![0.4; 144];
    let mut v = 0.0;
    unsafe {
        assert_eq!(mms_psnr(x.as_ptr(), y.as_ptr(), 144, 1.0, &mut v), MmsStatus::Ok);
        assert!((v - 20.0).abs() < 1e-9);
        assert_eq!(mms_psnr(x.as_ptr(), x.as_ptr(), 144, 1.0, &mut v), MmsStatus::Ok);
        assert_eq!(v, f64::INFINITY);
        assert_eq!(mms_mae(x.as_ptr(), y.as_ptr(), 144, &mut v), MmsStatus::Ok);
        assert!((v - 0.1).abs() < 1e-12);
        assert_eq!(mms_ssim(x.as_ptr(), x.as_ptr(), 12, 12, 1.0, &mut v), MmsStatus::Ok);
        assert!((v - 1.0).abs() < 1e-12);
        assert_eq!(mms_ssim(x.as_ptr(), x.as_ptr(), 4, 36, 1.0, &mut v), MmsStatus::Contract);
        assert_eq!(mms_psnr(x.as_ptr(), y.as_ptr(), 144, 1.0, ptr::null_mut()), MmsStatus::NullPointer);
    }
}

#[test]
fn model_sampling_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(mms_model_load(path.as_ptr(), &mut m), MmsStatus::Ok);
        assert_eq!(mms_model_num_modalities(m), 2);
        assert_eq!(CStr::from_ptr(mms_model_modality_name(m, 1)).to_str().unwrap(), "t1");
        assert!(mms_model_modality_name(m, 2).is_null());

        let data: Vec<f64> = (0..2 * 2 * 4 * 4).map(|i| (i % 7) as f64 / 7.0).collect();
        let cond = new_tensor(&[2, 2, 4, 4], &data);
        let missing = cstr("t1");
        let run = || {
            let mut out = ptr::null_mut();
            assert_eq!(mms_model_sample(m, cond, missing.as_ptr(), 20, 5, 1, &mut out), MmsStatus::Ok);
            let v = std::slice::from_raw_parts(mms_tensor_data(out), mms_tensor_len(out)).to_vec();
            mms_tensor_free(out);
            v
        };
        let a = run();
        assert_eq!(a, run());
        // The flair channel is conditional and passes through unchanged.
        for s in 0..2 {
            assert_eq!(a[s * 32..s * 32 + 16], data[s * 32..s * 32 + 16]);
        }
        let bogus = cstr("t2");
        let mut out = ptr::null_mut();
        assert_eq!(mms_model_sample(m, cond, bogus.as_ptr(), 20, 5, 1, &mut out), MmsStatus::Config);
        mms_tensor_free(cond);
        mms_model_free(m);
    }
}

#[test]
fn header_declares_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mmscore.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "mms_model_load",
        "mms_model_sample",
        "mms_tensor_read",
        "mms_tensor_free",
        "mms_last_error_message",
        "typedef struct MmsModel MmsModel",
        "MMS_STATUS_OK",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"mmscore.h\"\nint main(void) { MmsModel *m = 0; MmsStatus s = mms_model_load(\"x\", &m); mms_model_free(m); return s == MMS_STATUS_OK; }\n",
    )
    .unwrap();
    let status = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "header does not compile"),
        Err(e) => eprintln!("skipping C compile check, no cc: {e}"),
    }
}

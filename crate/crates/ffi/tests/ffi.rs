use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use axialseg_ffi::*;

const TINY: &str = "img_size=16\nbase_channels=2\nheads=2\npatch_grid=2 # small\nseed=3\n";

fn last_error() -> String {
    unsafe { CStr::from_ptr(axs_last_error()) }.to_str().unwrap().to_string()
}

fn new_model(config: &str) -> (AxsStatus, *mut AxsModel) {
    let c = CString::new(config).unwrap();
    let mut m = ptr::null_mut();
    let status = unsafe { axs_model_new(c.as_ptr(), &mut m) };
    (status, m)
}

fn predict(m: *const AxsModel, input: &[f32], batch: usize) -> (AxsStatus, Vec<f32>) {
    let mut out = vec![0f32; input.len()];
    let s = unsafe { axs_model_predict(m, input.as_ptr(), out.as_mut_ptr(), batch, input.len()) };
    (s, out)
}

#[test]
fn build_query_predict_free() {
    let (status, m) = new_model(TINY);
    assert_eq!(status, AxsStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    unsafe {
        assert_eq!(axs_model_img_size(m), 16);
        assert!(axs_model_param_count(m) > 0);
    }
    let input: Vec<f32> = (0..2 * 256).map(|i| (i % 17) as f32 / 17.0).collect();
    let (s, out) = predict(m, &input, 2);
    assert_eq!(s, AxsStatus::Ok);
    assert!(out.iter().all(|&p| p > 0.0 && p < 1.0));
    assert_eq!(last_error(), "");
    unsafe { axs_model_free(m) };
}

#[test]
fn save_load_roundtrip_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.axsg").to_str().unwrap()).unwrap();
    let (_, m) = new_model(TINY);
    let input: Vec<f32> = (0..256).map(|i| (i as f32 * 0.37).sin().abs()).collect();
    let (_, a) = predict(m, &input, 1);
    let mut loaded = ptr::null_mut();
    unsafe {
        assert_eq!(axs_model_save(m, path.as_ptr()), AxsStatus::Ok);
        assert_eq!(axs_model_load(path.as_ptr(), &mut loaded), AxsStatus::Ok);
    }
    let (_, b) = predict(loaded, &input, 1);
    assert_eq!(a, b);
    unsafe {
        assert_eq!(axs_model_param_count(loaded), axs_model_param_count(m));
        axs_model_free(m);
        axs_model_free(loaded);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let (s, m) = new_model("img_size=16\nbogus=1\n");
    assert_eq!(s, AxsStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("bogus"), "{}", last_error());

    assert_eq!(new_model("img_size=48").0, AxsStatus::Config);

    let missing = CString::new("/definitely/not/here.axsg").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { axs_model_load(missing.as_ptr(), &mut out) }, AxsStatus::Io);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.axsg");
    std::fs::write(&junk, b"AXSG not really a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { axs_model_load(junk.as_ptr(), &mut out) }, AxsStatus::Checkpoint);

    let (_, m) = new_model(TINY);
    let input = vec![0f32; 100];
    assert_eq!(predict(m, &input, 1).0, AxsStatus::Shape);
    assert_eq!(predict(m, &[], 0).0, AxsStatus::Shape);
    unsafe {
        assert_eq!(axs_model_predict(m, ptr::null(), ptr::null_mut(), 1, 256), AxsStatus::NullPointer);
        assert_eq!(axs_model_predict(ptr::null(), input.as_ptr(), ptr::null_mut(), 1, 256), AxsStatus::NullPointer);
        assert_eq!(axs_model_new(ptr::null(), &mut out), AxsStatus::NullPointer);
        assert_eq!(axs_model_img_size(ptr::null()), 0);
        axs_model_free(ptr::null_mut());
        axs_model_free(m);
    }
}

#[test]
fn static_strings() {
    let s = |st| unsafe { CStr::from_ptr(axs_status_str(st)) }.to_str().unwrap();
    assert_eq!(s(AxsStatus::Ok), "ok");
    assert_eq!(s(AxsStatus::Checkpoint), "invalid checkpoint");
    let v = unsafe { CStr::from_ptr(axs_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_abi_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/axialseg.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "axs_model_new",
        "axs_model_load",
        "axs_model_save",
        "axs_model_free",
        "axs_model_img_size",
        "axs_model_param_count",
        "axs_model_predict",
        "axs_last_error",
        "axs_status_str",
        "axs_version",
        "typedef struct AxsModel AxsModel;",
        "AXS_STATUS_CHECKPOINT = 5",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"axialseg.h\"\n\
         int main(void) { AxsModel *m = NULL; AxsStatus s = axs_model_new(\"\", &m); axs_model_free(m); return (int)s; }\n",
    )
    .unwrap();
    let status = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
        .expect("a C compiler (cc) on PATH");
    assert!(status.success());
}

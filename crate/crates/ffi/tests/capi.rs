use std::ffi::{c_void, CStr, CString};
use std::process::Command;
use std::ptr;

use dynalign_ffi::*;

const SPEC: &str = r#"{"num_classes": 10, "meta_train_classes": 5, "samples_per_class": 8, "image_size": 16}"#;
const CONFIG: &str = r#"{"lr0": 0.01, "epochs": 2, "episodes_per_epoch": 2, "N": 3, "K": 1, "Q": 2, "g": 2, "seed": 3,
    "backbone": {"in_channels": 1, "stage_channels": [4, 8], "image_size": 16}}"#;

fn last_error() -> String {
    let p = da_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn dataset() -> *mut DaDataset {
    let spec = CString::new(SPEC).unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { da_dataset_generate(spec.as_ptr(), &mut ds) }, DaStatus::Ok);
    assert!(!ds.is_null());
    ds
}

extern "C" fn count_epochs(epoch: usize, loss: f64, _acc: f64, _lr: f64, user: *mut c_void) {
    assert!(loss.is_finite());
    let seen = unsafe { &mut *(user as *mut Vec<usize>) };
    seen.push(epoch);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(da_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn train_evaluate_save_load_dump() {
    let ds = dataset();
    let config = CString::new(CONFIG).unwrap();
    let mut seen: Vec<usize> = Vec::new();
    let mut model = ptr::null_mut();
    let status = unsafe {
        da_train(config.as_ptr(), ds, Some(count_epochs), &mut seen as *mut Vec<usize> as *mut c_void, &mut model)
    };
    assert_eq!(status, DaStatus::Ok);
    assert_eq!(seen, vec![0, 1]);

    let (mut acc, mut ci) = (f64::NAN, f64::NAN);
    let status = unsafe { da_evaluate(model, ds, 20, 3, 1, 2, 5, &mut acc, &mut ci) };
    assert_eq!(status, DaStatus::Ok);
    assert!((0.0..=1.0).contains(&acc) && ci >= 0.0);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { da_model_save(model, path.as_ptr()) }, DaStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { da_model_load(path.as_ptr(), &mut loaded) }, DaStatus::Ok);
    let (mut acc2, mut ci2) = (0.0, 0.0);
    assert_eq!(unsafe { da_evaluate(loaded, ds, 20, 3, 1, 2, 5, &mut acc2, &mut ci2) }, DaStatus::Ok);
    assert_eq!((acc, ci), (acc2, ci2));

    let mut len = 0;
    let status = unsafe { da_dump_offsets(loaded, ds, 9, 3, 1, 0, ptr::null_mut(), 0, &mut len) };
    assert_eq!(status, DaStatus::BufferTooSmall);
    assert_eq!(len, 18 * 8 * 8);
    let mut buf = vec![f64::NAN; len];
    let status = unsafe { da_dump_offsets(loaded, ds, 9, 3, 1, 2, buf.as_mut_ptr(), buf.len(), &mut len) };
    assert_eq!(status, DaStatus::Ok);
    assert!(buf.iter().all(|v| v.is_finite()));
    let status = unsafe { da_dump_offsets(loaded, ds, 9, 3, 1, 9, buf.as_mut_ptr(), buf.len(), &mut len) };
    assert_eq!(status, DaStatus::InvalidArgument);

    unsafe {
        da_model_free(model);
        da_model_free(loaded);
        da_dataset_free(ds);
    }
}

#[test]
fn dataset_round_trip() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { da_dataset_save(ds, path.as_ptr()) }, DaStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { da_dataset_load(path.as_ptr(), &mut back) }, DaStatus::Ok);
    unsafe {
        da_dataset_free(back);
        da_dataset_free(ds);
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut ds = ptr::null_mut();
    let bad = CString::new("{not json").unwrap();
    assert_eq!(unsafe { da_dataset_generate(bad.as_ptr(), &mut ds) }, DaStatus::InvalidArgument);
    assert!(ds.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { da_dataset_generate(ptr::null(), ptr::null_mut()) }, DaStatus::NullPointer);
    assert!(last_error().contains("out"));

    let missing = CString::new("/nonexistent/dynalign/ckpt").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { da_model_load(missing.as_ptr(), &mut model) }, DaStatus::Io);

    let ds = dataset();
    let config = CString::new(r#"{"lr0": 0.01, "N": 1}"#).unwrap();
    let status = unsafe { da_train(config.as_ptr(), ds, None, ptr::null_mut(), &mut model) };
    assert_eq!(status, DaStatus::InvalidArgument);
    assert!(model.is_null());
    unsafe {
        da_dataset_free(ds);
        da_model_free(ptr::null_mut());
        da_dataset_free(ptr::null_mut());
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/dynalign.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ DaDataset *d = 0; DaStatus s = da_dataset_generate(0, &d); da_dataset_free(d); return s == DA_STATUS_OK ? 0 : 1; }}\n"
        ),
    )
    .unwrap();
    match Command::new("cc").args(["-fsyntax-only", "-std=c99", "-Wall", "-Werror"]).arg(&src).status() {
        Ok(status) => assert!(status.success(), "header does not compile"),
        Err(_) => eprintln!("no C compiler found; skipped"),
    }
}

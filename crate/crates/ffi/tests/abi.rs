use std::ffi::{CStr, CString};
use std::ptr;

use fbsindy_ffi::*;

fn last_error() -> String {
    let p = fbs_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn vdp_dataset() -> *mut FbsDataset {
    let mut ds = ptr::null_mut();
    let x0 = [2.0, 0.0];
    assert_eq!(fbs_dataset_simulate_vdp(1.0, 1.0, 1.0, x0.as_ptr(), 0.01, 99, &mut ds), FbsStatus::Ok);
    ds
}

unsafe fn vdp_model() -> *mut FbsModel {
    let ds = vdp_dataset();
    let mut model = ptr::null_mut();
    assert_eq!(fbs_identify(ds, ptr::null(), &mut model), FbsStatus::Ok);
    fbs_dataset_free(ds);
    model
}

#[test]
fn identify_synthesize_and_evaluate() {
    unsafe {
        let ds = vdp_dataset();
        assert_eq!(fbs_dataset_len(ds), 100);
        assert_eq!(fbs_dataset_n_states(ds), 2);
        assert!(fbs_last_error().is_null());
        fbs_dataset_free(ds);

        let model = vdp_model();
        let mut r = 0usize;
        assert_eq!(fbs_model_relative_degree(model, 1e-8, &mut r), FbsStatus::Ok);
        assert_eq!(r, 2);

        let (re, im) = ([-2.0, -6.0], [0.0, 0.0]);
        let mut ctrl = ptr::null_mut();
        assert_eq!(fbs_synthesize_poles(model, re.as_ptr(), im.as_ptr(), 2, &mut ctrl), FbsStatus::Ok);
        assert_eq!(fbs_controller_relative_degree(ctrl), 2);
        let mut gains = [0.0; 2];
        assert_eq!(fbs_controller_gains(ctrl, gains.as_mut_ptr(), 2), FbsStatus::Ok);
        assert_eq!(gains, [12.0, 8.0]);

        // u = x1 - 2 x2 + 2 x1^2 x2 + 12 (r - x1) + 8 (r' - x2) + r''
        let (x, refs) = ([0.5, -1.0], [0.2, 0.1, -0.3]);
        let mut u = 0.0;
        assert_eq!(fbs_controller_evaluate(ctrl, x.as_ptr(), 2, refs.as_ptr(), 3, &mut u), FbsStatus::Ok);
        let [x1, x2] = x;
        let expected = x1 - 2.0 * x2 + 2.0 * x1 * x1 * x2 + 12.0 * (refs[0] - x1) + 8.0 * (refs[1] - x2) + refs[2];
        assert!((u - expected).abs() < 1e-12, "{u} vs {expected}");

        let mut law = ptr::null_mut();
        assert_eq!(fbs_controller_law(ctrl, &mut law), FbsStatus::Ok);
        assert!(CStr::from_ptr(law).to_str().unwrap().contains("r''"));
        fbs_string_free(law);

        let mut run = ptr::null_mut();
        let x0 = [2.0, 0.0];
        assert_eq!(fbs_controller_stabilize_vdp(ctrl, 1.0, 1.0, 1.0, x0.as_ptr(), 0.01, 1000, &mut run), FbsStatus::Ok);
        let mut y = vec![0.0; fbs_dataset_len(run)];
        assert_eq!(fbs_dataset_output(run, y.as_mut_ptr(), y.len()), FbsStatus::Ok);
        assert!(y.last().unwrap().abs() < 1e-6);
        fbs_dataset_free(run);

        fbs_controller_free(ctrl);
        fbs_model_free(model);
    }
}

#[test]
fn model_json_round_trip() {
    unsafe {
        let model = vdp_model();
        let mut json = ptr::null_mut();
        assert_eq!(fbs_model_to_json(model, &mut json), FbsStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(fbs_model_from_json(json, &mut back), FbsStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(fbs_model_to_json(back, &mut again), FbsStatus::Ok);
        assert_eq!(CStr::from_ptr(json), CStr::from_ptr(again));
        fbs_string_free(json);
        fbs_string_free(again);
        fbs_model_free(back);
        fbs_model_free(model);
    }
}

#[test]
fn failures_report_status_and_message() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(fbs_identify(ptr::null(), ptr::null(), &mut model), FbsStatus::NullPointer);
        assert!(last_error().contains("dataset"));
        assert!(model.is_null());

        let ds = vdp_dataset();
        let opts = CString::new(r#"{"regression": {"lambda": 10.0}}"#).unwrap();
        assert_eq!(fbs_identify(ds, opts.as_ptr(), &mut model), FbsStatus::Infeasible);
        let opts = CString::new(r#"{"regresion": {}}"#).unwrap();
        assert_eq!(fbs_identify(ds, opts.as_ptr(), &mut model), FbsStatus::Parse);
        assert!(last_error().contains("options"));
        fbs_dataset_free(ds);

        let bad = CString::new("{ nope").unwrap();
        assert_eq!(fbs_model_from_json(bad.as_ptr(), &mut model), FbsStatus::Parse);

        let path = CString::new("/nonexistent/data.csv").unwrap();
        let mut ds = ptr::null_mut();
        assert_eq!(fbs_dataset_load_csv(path.as_ptr(), &mut ds), FbsStatus::Io);

        let model = vdp_model();
        let mut ctrl = ptr::null_mut();
        let gains = [1.0, 2.0, 3.0];
        assert_eq!(fbs_synthesize_gains(model, gains.as_ptr(), 3, &mut ctrl), FbsStatus::InvalidArgument);
        let (re, im) = ([-1.0, -1.0], [2.0, 3.0]);
        assert_eq!(fbs_synthesize_poles(model, re.as_ptr(), im.as_ptr(), 2, &mut ctrl), FbsStatus::InvalidArgument);
        assert!(ctrl.is_null());
        assert_eq!(fbs_synthesize_gains(model, gains.as_ptr(), 2, &mut ctrl), FbsStatus::Ok);
        let x = [0.0, 0.0];
        let mut u = 0.0;
        assert_eq!(fbs_controller_evaluate(ctrl, x.as_ptr(), 2, x.as_ptr(), 2, &mut u), FbsStatus::InvalidArgument);
        fbs_controller_free(ctrl);
        fbs_model_free(model);
    }
}

#[test]
fn csv_files_load() {
    let dir = std::env::temp_dir().join(format!("fbsindy-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("d.csv");
    let rows: String = (0..50).map(|i| format!("{},{},{},0,{}\n", i as f64 * 0.1, i, -i, i)).collect();
    std::fs::write(&path, format!("t,x1,x2,u,y\n{rows}")).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(fbs_dataset_load_csv(c.as_ptr(), &mut ds), FbsStatus::Ok);
        assert_eq!(fbs_dataset_len(ds), 50);
        fbs_dataset_free(ds);
    }
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn free_functions_accept_null() {
    unsafe {
        fbs_dataset_free(ptr::null_mut());
        fbs_model_free(ptr::null_mut());
        fbs_controller_free(ptr::null_mut());
        fbs_string_free(ptr::null_mut());
        assert_eq!(fbs_dataset_len(ptr::null()), 0);
    }
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/fbsindy.h");
    let src = include_str!("../src/lib.rs");
    let exported: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exported.len() >= 15);
    for name in exported {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    for ty in ["FbsDataset", "FbsModel", "FbsController", "FBS_STATUS_OK"] {
        assert!(header.contains(ty));
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = std::process::Command::new("cc").arg("--version").output() else {
        return;
    };
    assert!(cc.status.success());
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let out = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", "-I", include, "-"])
        .stdin(std::process::Stdio::piped())
        .spawn()
        .and_then(|mut child| {
            use std::io::Write;
            child
                .stdin
                .take()
                .unwrap()
                .write_all(b"#include \"fbsindy.h\"\nint main(void) { return FBS_STATUS_OK; }\n")?;
            child.wait_with_output()
        })
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

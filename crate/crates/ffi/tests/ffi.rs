use std::ffi::{CStr, CString};
use std::ptr;

use koopsos::koopman::{Dictionary, Surrogate};
use koopsos_ffi::*;
use nalgebra::{dmatrix, DMatrix};

fn last_error() -> String {
    let p = ks_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn toy_surrogate_json() -> CString {
    let model = Surrogate::new(
        DMatrix::from_diagonal_element(2, 2, 0.5),
        dmatrix![0.0; 0.1],
        dmatrix![0.05, 0.0; 0.0, 0.0],
        Dictionary::identity(2),
        0.1,
    )
    .unwrap();
    CString::new(model.to_json().unwrap()).unwrap()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(ks_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn surrogate_round_trip_and_prediction() {
    let json = toy_surrogate_json();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(
            ks_surrogate_from_json(json.as_ptr(), &mut model),
            KsStatus::Ok
        );
        let (mut n, mut m, mut big_n) = (0, 0, 0);
        assert_eq!(
            ks_surrogate_dims(model, &mut n, &mut m, &mut big_n),
            KsStatus::Ok
        );
        assert_eq!((n, m, big_n), (2, 1, 2));

        let x = [1.0, 2.0];
        let u = [3.0];
        let mut z = [0.0; 2];
        assert_eq!(
            ks_surrogate_predict(model, x.as_ptr(), 2, u.as_ptr(), 1, z.as_mut_ptr(), 2),
            KsStatus::Ok
        );
        // A x + B0 u + B̃ (u ⊗ x) = (0.5 + 0.15, 1.0 + 0.3)
        assert!((z[0] - 0.65).abs() < 1e-14 && (z[1] - 1.3).abs() < 1e-14);

        assert_eq!(
            ks_surrogate_predict(model, x.as_ptr(), 2, u.as_ptr(), 1, z.as_mut_ptr(), 3),
            KsStatus::Dimension
        );
        assert!(last_error().contains("z_next"));
        ks_surrogate_free(model);
    }
}

#[test]
fn bad_input_is_reported_not_panicked() {
    let mut ctrl = ptr::null_mut();
    let garbage = CString::new("{not json").unwrap();
    unsafe {
        assert_eq!(
            ks_controller_from_json(garbage.as_ptr(), &mut ctrl),
            KsStatus::Parse
        );
        assert!(ctrl.is_null());
        assert_eq!(
            ks_controller_from_json(ptr::null(), &mut ctrl),
            KsStatus::NullPointer
        );
        assert!(last_error().contains("json"));
        let x = [0.0];
        let mut u = [0.0];
        assert_eq!(
            ks_controller_eval(ptr::null(), x.as_ptr(), 1, u.as_mut_ptr(), 1),
            KsStatus::NullPointer
        );
        ks_controller_free(ptr::null_mut());
        ks_surrogate_free(ptr::null_mut());
        ks_string_free(ptr::null_mut());
    }
}

#[test]
fn design_evaluate_and_serialize() {
    let json = toy_surrogate_json();
    let mut model = ptr::null_mut();
    let mut ctrl = ptr::null_mut();
    unsafe {
        assert_eq!(
            ks_surrogate_from_json(json.as_ptr(), &mut model),
            KsStatus::Ok
        );
        assert_eq!(
            ks_design(model, 0.01, 0.01, &mut ctrl),
            KsStatus::Ok,
            "{}",
            last_error()
        );
        ks_surrogate_free(model);

        let (mut n, mut m) = (0, 0);
        assert_eq!(
            ks_controller_dims(ctrl, &mut n, &mut m, ptr::null_mut()),
            KsStatus::Ok
        );
        assert_eq!((n, m), (2, 1));

        let origin = [0.0, 0.0];
        let mut u = [f64::NAN];
        assert_eq!(
            ks_controller_eval(ctrl, origin.as_ptr(), 2, u.as_mut_ptr(), 1),
            KsStatus::Ok
        );
        assert_eq!(u[0], 0.0);
        let mut v = f64::NAN;
        let x = [0.3, -0.2];
        assert_eq!(
            ks_controller_lyapunov(ctrl, x.as_ptr(), 2, &mut v),
            KsStatus::Ok
        );
        assert!(v > 0.0);

        let mut text = ptr::null_mut();
        assert_eq!(ks_controller_to_json(ctrl, &mut text), KsStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(ks_controller_from_json(text, &mut again), KsStatus::Ok);
        let mut v2 = f64::NAN;
        assert_eq!(
            ks_controller_lyapunov(again, x.as_ptr(), 2, &mut v2),
            KsStatus::Ok
        );
        assert!((v - v2).abs() <= 1e-12 * v.abs());
        ks_string_free(text);
        ks_controller_free(again);
        ks_controller_free(ctrl);
    }
}

#[test]
fn building_design_reports_no_controller() {
    let mut ctrl = ptr::null_mut();
    unsafe {
        assert_eq!(
            ks_design_building(1, 0.1, 0.1, &mut ctrl),
            KsStatus::Infeasible
        );
        assert!(ctrl.is_null());
        assert_eq!(
            ks_design_building(0, 0.1, 0.1, &mut ctrl),
            KsStatus::InvalidArgument
        );
        assert_eq!(
            ks_design_building(1, -1.0, 0.1, &mut ctrl),
            KsStatus::InvalidArgument
        );
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let dir = std::env::temp_dir().join(format!("koopsos-ffi-header-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let src = dir.join("use.c");
    std::fs::write(
        &src,
        "#include \"koopsos.h\"\nint main(void) { KsController *c = 0; return ks_controller_eval(c, 0, 0, 0, 0) == KS_STATUS_NULL_POINTER ? 0 : 1; }\n",
    )
    .unwrap();
    for (compiler, extra) in [("cc", &["-std=c99"][..]), ("c++", &["-x", "c++"][..])] {
        let status = match std::process::Command::new(compiler)
            .args(extra)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I", include])
            .arg(&src)
            .status()
        {
            Ok(s) => s,
            Err(e) => {
                eprintln!("skipping {compiler}: {e}");
                continue;
            }
        };
        assert!(status.success(), "{compiler} rejected the header");
    }
    let _ = std::fs::remove_dir_all(dir);
}

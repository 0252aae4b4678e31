use std::ffi::CStr;
use std::path::Path;
use std::ptr;

use gradleak_ffi::*;

fn last_error() -> String {
    let n = unsafe { gl_last_error_message(ptr::null_mut(), 0) };
    let mut buf = vec![0 as std::ffi::c_char; n + 1];
    unsafe { gl_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn mlp(side: usize, hidden: &[usize], classes: usize) -> *mut GlModel {
    let mut m = ptr::null_mut();
    let s = unsafe { gl_model_mlp(1, side, side, hidden.as_ptr(), hidden.len(), classes, &mut m) };
    assert_eq!(s, GlStatus::Ok);
    m
}

fn values(p: *const GlParams) -> Vec<f64> {
    let n = unsafe { gl_params_len(p) };
    let mut v = vec![0.0; n];
    assert_eq!(unsafe { gl_params_copy(p, v.as_mut_ptr(), n) }, GlStatus::Ok);
    v
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(gl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut m = ptr::null_mut();
    let s = unsafe { gl_model_mlp(1, 4, 4, ptr::null(), 0, 0, &mut m) };
    assert_eq!(s, GlStatus::InvalidArgument);
    assert!(m.is_null());
    assert!(!last_error().is_empty());

    let s = unsafe { gl_params_init(ptr::null(), 1, &mut ptr::null_mut()) };
    assert_eq!(s, GlStatus::NullPointer);
    assert!(last_error().contains("model"));

    let model = mlp(4, &[3], 2);
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { gl_params_init(model, 1, &mut p) }, GlStatus::Ok);
    let mut small = [0.0; 2];
    assert_eq!(unsafe { gl_params_copy(p, small.as_mut_ptr(), 2) }, GlStatus::BufferTooSmall);
    assert_eq!(
        unsafe { gl_params_from_values(model, small.as_ptr(), 2, &mut ptr::null_mut()) },
        GlStatus::InvalidArgument
    );

    // Truncation keeps a terminator.
    let mut tiny = [1 as std::ffi::c_char; 4];
    let full = unsafe { gl_last_error_message(tiny.as_mut_ptr(), tiny.len()) };
    assert!(full > 3);
    assert_eq!(tiny[3], 0);

    assert_eq!(unsafe { gl_params_len(p) }, unsafe { gl_model_param_count(model) });
    unsafe {
        gl_params_free(p);
        gl_model_free(model);
        gl_model_free(ptr::null_mut());
    }
}

#[test]
fn round_extract_and_attack() {
    let model = mlp(4, &[6], 3);
    let mut w0 = ptr::null_mut();
    assert_eq!(unsafe { gl_params_init(model, 7, &mut w0) }, GlStatus::Ok);
    let mut data = ptr::null_mut();
    assert_eq!(unsafe { gl_dataset_synth(model, 2, 3, 11, &mut data) }, GlStatus::Ok);
    assert_eq!(unsafe { gl_dataset_len(data) }, 3);

    let sizes = [2usize, 1];
    let mut w1 = ptr::null_mut();
    assert_eq!(
        unsafe { gl_fedavg_round(model, w0, data, sizes.as_ptr(), 2, 1, 0.1, &mut w1) },
        GlStatus::Ok
    );
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { gl_extract_update(w0, w1, 0.1, &mut g) }, GlStatus::Ok);
    let (a, b, gv) = (values(w0), values(w1), values(g));
    for i in 0..a.len() {
        assert!((gv[i] - (a[i] - b[i]) / 0.1).abs() < 1e-12);
    }

    // One local step: no client drift.
    let mut d = -1.0;
    assert_eq!(
        unsafe { gl_delta_tau(model, w0, data, sizes.as_ptr(), 2, 1, 0.1, &mut d) },
        GlStatus::Ok
    );
    assert!(d.abs() <= 1e-12, "{d}");
    assert_eq!(
        unsafe { gl_delta_tau(model, w0, data, sizes.as_ptr(), 2, 3, 0.1, &mut d) },
        GlStatus::Ok
    );
    assert!(d > 0.0);

    let mut labels = [0usize; 3];
    let mut img = [0.0; 16];
    for (i, l) in labels.iter_mut().enumerate() {
        assert_eq!(unsafe { gl_dataset_image(data, i, img.as_mut_ptr(), img.len(), l) }, GlStatus::Ok);
    }
    let mut recon = vec![0.0; 3 * 16];
    let mut loss = f64::NAN;
    let s = unsafe {
        gl_attack(
            model,
            w0,
            w1,
            labels.as_ptr(),
            3,
            0.1,
            1,
            0.1,
            20,
            2,
            5,
            recon.as_mut_ptr(),
            recon.len(),
            &mut loss,
        )
    };
    assert_eq!(s, GlStatus::Ok, "{}", last_error());
    assert!(loss.is_finite() && loss >= 0.0);
    assert!(recon.iter().all(|v| (0.0..=1.0).contains(v)));
    let s = unsafe {
        gl_attack(
            model,
            w0,
            w1,
            labels.as_ptr(),
            3,
            0.1,
            1,
            0.1,
            20,
            2,
            5,
            recon.as_mut_ptr(),
            10,
            &mut loss,
        )
    };
    assert_eq!(s, GlStatus::BufferTooSmall);

    let bad = [5usize, 5];
    assert_eq!(
        unsafe { gl_fedavg_round(model, w0, data, bad.as_ptr(), 2, 1, 0.1, &mut ptr::null_mut()) },
        GlStatus::InvalidArgument
    );

    unsafe {
        gl_params_free(g);
        gl_params_free(w1);
        gl_params_free(w0);
        gl_dataset_free(data);
        gl_model_free(model);
    }
}

#[test]
fn generated_header_declares_the_abi() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/gradleak.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "gl_last_error_message",
        "gl_model_mlp",
        "gl_params_init",
        "gl_dataset_synth",
        "gl_fedavg_round",
        "gl_extract_update",
        "gl_delta_tau",
        "gl_attack",
        "typedef struct GlModel GlModel",
        "GL_STATUS_BUFFER_TOO_SMALL = 4",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile_dir();
    let src = dir.join("use.c");
    std::fs::write(
        &src,
        "#include \"gradleak.h\"\nint main(void) {\n  GlModel *m = 0;\n  size_t h[1] = {8};\n  \
         GlStatus s = gl_model_mlp(1, 4, 4, h, 1, 3, &m);\n  gl_model_free(m);\n  return s == GL_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("gradleak-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

use std::ffi::CStr;
use std::path::Path;
use std::process::Command;
use std::ptr;

use padro_ffi::*;

fn last_error() -> String {
    let p = padro_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn grid_dataset(h: [f64; 4]) -> *mut PadroDataset {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..6 {
        for j in 0..6 {
            let (a, b) = (i as f64 / 5.0, j as f64 / 5.0);
            xs.extend([a, b]);
            ys.extend([h[0] * a + h[1] * b, h[2] * a + h[3] * b]);
        }
    }
    let mut ds = ptr::null_mut();
    let st = unsafe { padro_dataset_new(xs.as_ptr(), ys.as_ptr(), 36, 2, 2, &mut ds) };
    assert_eq!(st, PadroStatus::Ok);
    ds
}

fn fast_options() -> PadroSolveOptions {
    PadroSolveOptions {
        iters: 150,
        lambda_max_iters: 2,
        ..padro_solve_options_default()
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(padro_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn isotropic_solve_round_trip() {
    let h = [2.0, 0.0, 0.0, 2.0];
    let ds = grid_dataset(h);
    assert_eq!(unsafe { padro_dataset_len(ds) }, 36);
    let opts = fast_options();
    let mut sol = ptr::null_mut();
    let st = unsafe { padro_solve(ds, h.as_ptr(), &opts, false, &mut sol) };
    assert_eq!(st, PadroStatus::Ok);
    assert!(padro_last_error().is_null());

    let mut summary = PadroSolutionSummary {
        lambda: 0.0,
        value: 0.0,
        std_error: 0.0,
        boundary: PadroBoundary::Interior,
        x_dim: 0,
        y_dim: 0,
    };
    assert_eq!(unsafe { padro_solution_summary(sol, &mut summary) }, PadroStatus::Ok);
    assert_eq!((summary.x_dim, summary.y_dim), (2, 2));
    assert!(summary.lambda >= opts.lambda_lo && summary.lambda <= opts.lambda_hi);
    assert!(summary.value.is_finite() && summary.std_error >= 0.0);

    let mut g = [0.0; 4];
    assert_eq!(
        unsafe { padro_solution_reconstructor(sol, g.as_mut_ptr(), 4) },
        PadroStatus::Ok
    );
    assert!(g.iter().all(|v| v.is_finite()));
    let mut cov = [0.0; 4];
    assert_eq!(
        unsafe { padro_solution_covariance(sol, cov.as_mut_ptr(), 4) },
        PadroStatus::Ok
    );
    assert_eq!(cov[1], 0.0);
    assert_eq!(cov[0], cov[3]);
    assert!(cov[0] > 0.0 && cov[0] <= opts.sigma_max);

    // identical inputs give identical bits
    let mut again = ptr::null_mut();
    assert_eq!(
        unsafe { padro_solve(ds, h.as_ptr(), &opts, false, &mut again) },
        PadroStatus::Ok
    );
    let mut g2 = [0.0; 4];
    unsafe { padro_solution_reconstructor(again, g2.as_mut_ptr(), 4) };
    assert_eq!(g, g2);

    unsafe {
        padro_solution_free(sol);
        padro_solution_free(again);
        padro_dataset_free(ds);
    }
}

#[test]
fn anisotropic_solve_reports_full_covariance() {
    let h = [5.0, 1.0, 1.0, 2.0];
    let ds = grid_dataset(h);
    let mut sol = ptr::null_mut();
    let opts = fast_options();
    assert_eq!(
        unsafe { padro_solve(ds, h.as_ptr(), &opts, true, &mut sol) },
        PadroStatus::Ok
    );
    let mut cov = [0.0; 4];
    assert_eq!(
        unsafe { padro_solution_covariance(sol, cov.as_mut_ptr(), 4) },
        PadroStatus::Ok
    );
    assert_eq!(cov[1], cov[2]);
    assert!(cov[0] * cov[3] - cov[1] * cov[2] > 0.0);
    unsafe {
        padro_solution_free(sol);
        padro_dataset_free(ds);
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut ds = ptr::null_mut();
    let x = [0.0; 4];
    let st = unsafe { padro_dataset_new(ptr::null(), x.as_ptr(), 2, 2, 2, &mut ds) };
    assert_eq!(st, PadroStatus::NullPointer);
    assert!(last_error().contains("xs"));
    assert!(ds.is_null());

    let st = unsafe { padro_dataset_new(x.as_ptr(), x.as_ptr(), 0, 2, 2, &mut ds) };
    assert_eq!(st, PadroStatus::InvalidArgument);

    let h = [1.0, 0.0, 0.0, 1.0];
    let ds = grid_dataset(h);
    let mut opts = fast_options();
    opts.delta = 0.0;
    let mut sol = ptr::null_mut();
    assert_eq!(
        unsafe { padro_solve(ds, h.as_ptr(), &opts, false, &mut sol) },
        PadroStatus::InvalidArgument
    );
    assert!(last_error().contains("delta"));
    assert!(sol.is_null());
    assert_eq!(
        unsafe { padro_solve(ptr::null(), h.as_ptr(), &opts, false, &mut sol) },
        PadroStatus::NullPointer
    );

    let mut sol = ptr::null_mut();
    assert_eq!(
        unsafe { padro_solve(ds, h.as_ptr(), &fast_options(), false, &mut sol) },
        PadroStatus::Ok
    );
    let mut small = [0.0; 3];
    let st = unsafe { padro_solution_reconstructor(sol, small.as_mut_ptr(), 3) };
    assert_eq!(st, PadroStatus::BufferTooSmall);
    assert!(last_error().contains("4 needed"));
    unsafe {
        padro_solution_free(sol);
        padro_dataset_free(ds);
        padro_dataset_free(ptr::null_mut());
        padro_solution_free(ptr::null_mut());
    }
}

#[test]
fn entropic_transport_between_point_masses() {
    let (a, b) = ([0.0, 0.0], [3.0, 4.0]);
    let w = [1.0];
    let mut value = f64::NAN;
    let st = unsafe { padro_entropic_w1(a.as_ptr(), w.as_ptr(), 1, b.as_ptr(), w.as_ptr(), 1, 2, 0.1, &mut value) };
    assert_eq!(st, PadroStatus::Ok);
    assert_eq!(value, 5.0);
    let bad = [0.7];
    let st = unsafe {
        padro_entropic_w1(
            a.as_ptr(),
            bad.as_ptr(),
            1,
            b.as_ptr(),
            w.as_ptr(),
            1,
            2,
            0.1,
            &mut value,
        )
    };
    assert_eq!(st, PadroStatus::InvalidArgument);
}

#[test]
fn header_is_valid_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = include.join("padro.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for symbol in [
        "padro_solve",
        "padro_last_error",
        "padro_entropic_w1",
        "PADRO_STATUS_OK",
        "typedef struct PadroDataset PadroDataset",
    ] {
        assert!(text.contains(symbol), "{symbol} missing from header");
    }
    let dir = tempfile_dir();
    let src = dir.join("use_header.c");
    std::fs::write(
        &src,
        "#include \"padro.h\"\nint main(void) {\n  PadroSolveOptions o = padro_solve_options_default();\n  \
         PadroDataset *d = 0;\n  return padro_dataset_new(0, 0, 0, 0, 0, &d) == PADRO_STATUS_OK && o.iters > 0;\n}\n",
    )
    .unwrap();
    let Ok(status) = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler found; skipped compiling the header");
        return;
    };
    assert!(status.success());
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("padro-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

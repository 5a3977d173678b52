use std::ffi::{CStr, CString};
use std::ptr;

use openset_score_ffi::*;

fn last_error() -> String {
    let p = os_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn two_subjects() -> *mut OsGallery {
    let features = [1.0, 0.0, 0.8, 0.6, 0.0, 1.0];
    let labels = [7u32, 7, 3];
    let mut g = ptr::null_mut();
    let status = unsafe { os_gallery_from_arrays(features.as_ptr(), 3, 2, labels.as_ptr(), &mut g) };
    assert_eq!(status, OsStatus::Ok);
    g
}

#[test]
fn gallery_round_trip() {
    let g = two_subjects();
    unsafe {
        assert_eq!(os_gallery_num_subjects(g), 2);
        assert_eq!(os_gallery_total_media(g), 3);
        assert_eq!(os_gallery_dim(g), 2);
        let mut c = ptr::null_mut();
        assert_eq!(os_gallery_cluster(g, 1, 100, 1e-6, 0, &mut c), OsStatus::Ok);
        assert_eq!(os_gallery_total_media(c), 2);
        os_gallery_free(c);
        os_gallery_free(g);
        os_gallery_free(ptr::null_mut());
        assert_eq!(os_gallery_num_subjects(ptr::null()), 0);
    }
}

#[test]
fn scores_match_the_library() {
    let g = two_subjects();
    let probe = [2.0, 0.0];
    let mut scores = [0.0; 2];
    let mut inc = 0.0;
    let fusion = OsFusion {
        kind: OsFusionKind::Local,
        k: 2,
        constant: 0.0,
        clamp_k: false,
    };
    unsafe {
        let status = os_score_probe(g, probe.as_ptr(), 2, fusion, scores.as_mut_ptr(), 2, &mut inc);
        assert_eq!(status, OsStatus::Ok);
    }
    // Subject 7 has center (0.9, 0.3); the second largest media cosine is 0.8.
    assert!((scores[0] - 1.7).abs() < 1e-15, "{scores:?}");
    assert_eq!(scores[1], 0.0);
    assert!((inc - 0.8).abs() < 1e-15);

    let none = OsFusion {
        kind: OsFusionKind::None,
        ..fusion
    };
    unsafe {
        assert_eq!(
            os_score_probe(g, probe.as_ptr(), 2, none, scores.as_mut_ptr(), 2, &mut inc),
            OsStatus::Ok
        );
    }
    assert!(inc.is_nan());

    let mut v = 0.0;
    unsafe {
        assert_eq!(os_one_to_one(g, 0, probe.as_ptr(), 2, 1, false, &mut v), OsStatus::Ok);
        assert!((v - 1.9).abs() < 1e-15);
        assert_eq!(os_one_to_one(g, 2, probe.as_ptr(), 2, 1, false, &mut v), OsStatus::InvalidArgument);
        os_gallery_free(g);
    }
}

#[test]
fn errors_are_reported() {
    let g = two_subjects();
    let probe = [0.0, 0.0];
    let mut scores = [0.0; 2];
    let fusion = OsFusion {
        kind: OsFusionKind::Local,
        k: 1,
        constant: 0.0,
        clamp_k: false,
    };
    unsafe {
        let s = os_score_probe(g, probe.as_ptr(), 2, fusion, scores.as_mut_ptr(), 2, ptr::null_mut());
        assert_eq!(s, OsStatus::ZeroNorm);
        let probe = [1.0, 0.0];
        let s = os_score_probe(g, probe.as_ptr(), 2, fusion, scores.as_mut_ptr(), 1, ptr::null_mut());
        assert_eq!(s, OsStatus::BufferTooSmall);
        let big = OsFusion { k: 9, ..fusion };
        let s = os_score_probe(g, probe.as_ptr(), 2, big, scores.as_mut_ptr(), 2, ptr::null_mut());
        assert_eq!(s, OsStatus::KTooLarge);
        assert!(last_error().contains("k = 9"), "{}", last_error());
        let s = os_score_probe(ptr::null(), probe.as_ptr(), 2, fusion, scores.as_mut_ptr(), 2, ptr::null_mut());
        assert_eq!(s, OsStatus::NullPointer);
        let mut v = 0.0;
        assert_eq!(os_normal_quantile(0.5, &mut v), OsStatus::Ok);
        assert!(os_last_error().is_null());
        os_gallery_free(g);

        let path = CString::new("/nonexistent/gallery.csv").unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(os_gallery_load(path.as_ptr(), &mut out), OsStatus::Io);
        assert!(out.is_null());
    }
}

#[test]
fn row_helpers() {
    let row = [0.5, 0.9, 0.9, 0.1];
    let mut v = 0.0;
    let mut fused = [0.0; 4];
    unsafe {
        assert_eq!(os_knn_score(row.as_ptr(), 4, 3, false, &mut v), OsStatus::Ok);
        assert_eq!(v, 0.5);
        assert_eq!(os_knn_score(row.as_ptr(), 4, 5, false, &mut v), OsStatus::KTooLarge);
        assert_eq!(os_knn_score(row.as_ptr(), 4, 5, true, &mut v), OsStatus::Ok);
        assert_eq!(v, 0.1);
        assert_eq!(os_local_score(row.as_ptr(), 4, 0.25, fused.as_mut_ptr()), OsStatus::Ok);
    }
    assert_eq!(fused, [0.5, 1.15, 1.15, 0.1]);
}

#[test]
fn theory_entry_points() {
    let stats = OsScoreStats {
        mu1: 0.6,
        sigma1: 0.1,
        mu2: 0.2,
        sigma2: 0.1,
        mu3: 0.6,
        sigma3: 0.1,
        mu4: 0.3,
        sigma4: 0.1,
        n1: 100,
        n2: 500,
        n3: 1000,
        m: 10,
        r1: 5,
        r2: 10,
    };
    let mut verdict = OsVerdict::default();
    let mut delta = 0.0;
    let mut q = 0.0;
    unsafe {
        assert_eq!(os_predict(&stats, &mut verdict), OsStatus::Ok);
        assert_eq!(os_gumbel_delta(5, 500, &mut delta), OsStatus::Ok);
        assert_eq!(os_normal_quantile(0.975, &mut q), OsStatus::Ok);
        assert_eq!(os_gumbel_delta(0, 500, &mut delta), OsStatus::Domain);
        let bad = OsScoreStats { sigma1: 0.0, ..stats };
        assert_eq!(os_predict(&bad, &mut verdict), OsStatus::ZeroSigma);
        assert_eq!(os_predict(ptr::null(), &mut verdict), OsStatus::NullPointer);
        assert_eq!(os_predict(&stats, &mut verdict), OsStatus::Ok);
    }
    assert!(verdict.open_set.improves);
    assert!(verdict.mu3_star < 0.6);
    assert!((q - 1.959_963_984_540_054).abs() < 1e-12);
    assert!((os_normal_cdf(0.0) - 0.5).abs() < 1e-16);
    let expected = -(-(1.0f64 - 5.0 / 500.0).ln()).ln();
    assert!((delta - expected).abs() < 1e-12);
}

#[test]
fn operating_points() {
    let genuine = [0.9, 0.8, 0.4, 0.7];
    let maxima = [0.1, 0.5, 0.6, 0.3];
    let rank1 = [true, false, true, true];
    let mut p = OsOperatingPoint::default();
    unsafe {
        let s = os_fnir_at_fpir(genuine.as_ptr(), 4, maxima.as_ptr(), 4, rank1.as_ptr(), 0.25, false, &mut p);
        assert_eq!(s, OsStatus::Ok);
        assert_eq!(p.threshold, 0.6);
        assert_eq!(p.value, 0.5);
        let s = os_fnir_at_fpir(genuine.as_ptr(), 4, maxima.as_ptr(), 4, ptr::null(), 0.25, true, &mut p);
        assert_eq!(s, OsStatus::Ok);
        assert_eq!(p.value, 0.25);
        let s = os_fnir_at_fpir(genuine.as_ptr(), 4, maxima.as_ptr(), 4, ptr::null(), 0.25, false, &mut p);
        assert_eq!(s, OsStatus::NullPointer);
        let s = os_tar_at_far(genuine.as_ptr(), 4, maxima.as_ptr(), 4, 0.1, &mut p);
        assert_eq!(s, OsStatus::Ok);
        assert!(p.target_unachievable);
        assert_eq!(p.value, 0.75);
    }
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/openset_score.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in ["os_gallery_load", "os_score_probe", "os_predict", "os_fnir_at_fpir", "OS_STATUS_K_TOO_LARGE"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"openset_score.h\"\nint main(void) { OsGallery *g = 0; return os_gallery_num_subjects(g) == 0 ? 0 : 1; }\n",
    )
    .unwrap();
    let status = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .expect("a C compiler is needed to check the header");
    assert!(status.success());
}

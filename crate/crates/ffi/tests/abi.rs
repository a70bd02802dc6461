use std::ffi::{c_char, CString};
use std::ptr;

use sepformer_ffi::*;

const SMALL: &str = "filters = 8\nkernel_size = 4\nstride = 2\nchunk_size = 8\nrepeats = 1\nintra_layers = 1\ninter_layers = 1\nheads = 2\nd_ff = 16\nsources = 3\nmax_seconds = 0.1\n";

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { sf_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn small_model() -> *mut SfModel {
    let cfg = CString::new(SMALL).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sf_model_new(cfg.as_ptr(), &mut m) }, SfStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn separate_fills_source_major_output() {
    let m = small_model();
    unsafe {
        assert_eq!(sf_num_sources(m), 3);
        assert_eq!(sf_sample_rate(m), 8000);
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.1).sin()).collect();
        let mut out = vec![f64::NAN; 3 * 200];
        let st = sf_separate(m, x.as_ptr(), x.len(), out.as_mut_ptr(), out.len());
        assert_eq!(st, SfStatus::Ok, "{}", last_error());
        assert!(out.iter().all(|v| v.is_finite()));

        let mut short = vec![0.0; 599];
        let st = sf_separate(m, x.as_ptr(), x.len(), short.as_mut_ptr(), short.len());
        assert_eq!(st, SfStatus::BufferTooSmall);
        assert!(last_error().contains("600"));

        let st = sf_separate(m, x.as_ptr(), 2, out.as_mut_ptr(), out.len());
        assert_eq!(st, SfStatus::Shape);
        sf_model_free(m);
    }
}

#[test]
fn checkpoints_load_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = small_model();
    let x: Vec<f64> = (0..120).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.5).collect();
    let mut direct = vec![0.0; 360];
    unsafe {
        assert_eq!(sf_separate(m, x.as_ptr(), 120, direct.as_mut_ptr(), 360), SfStatus::Ok);
        sf_model_free(m);
    }
    let rc = sepformer::cli::RunConfig::from_text(SMALL).unwrap();
    sepformer::sepmodel::Sepformer::new(rc.model).unwrap().save(&path).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut loaded = ptr::null_mut();
    unsafe {
        assert_eq!(sf_model_load(cpath.as_ptr(), &mut loaded), SfStatus::Ok);
        let mut again = vec![0.0; 360];
        assert_eq!(sf_separate(loaded, x.as_ptr(), 120, again.as_mut_ptr(), 360), SfStatus::Ok);
        assert_eq!(again, direct);
        sf_model_free(loaded);
    }

    std::fs::write(&path, b"NOPE0000").unwrap();
    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { sf_model_load(cpath.as_ptr(), &mut bad) }, SfStatus::BadCheckpoint);
    assert!(bad.is_null());

    let missing = CString::new("/nonexistent/m.ckpt").unwrap();
    assert_eq!(unsafe { sf_model_load(missing.as_ptr(), &mut bad) }, SfStatus::Io);
    assert!(last_error().contains("/nonexistent/m.ckpt"));
}

#[test]
fn null_arguments_are_reported() {
    unsafe {
        assert_eq!(sf_model_load(ptr::null(), &mut ptr::null_mut()), SfStatus::NullArgument);
        assert!(last_error().contains("path"));
        assert_eq!(sf_num_sources(ptr::null()), 0);
        sf_model_free(ptr::null_mut());
        let x = [0.0; 4];
        assert_eq!(sf_separate(ptr::null(), x.as_ptr(), 4, ptr::null_mut(), 0), SfStatus::NullArgument);
        assert_eq!(sf_si_snr(x.as_ptr(), ptr::null(), 4, ptr::null_mut()), SfStatus::NullArgument);
    }
}

#[test]
fn metric_and_census() {
    let t: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
    let mut db = 0.0;
    unsafe {
        assert_eq!(sf_si_snr(t.as_ptr(), t.as_ptr(), t.len(), &mut db), SfStatus::Ok);
        assert!((db - 30.0).abs() < 1e-9);
        let zero = vec![0.0; 64];
        assert_eq!(sf_si_snr(t.as_ptr(), zero.as_ptr(), 64, &mut db), SfStatus::Numeric);

        let mut n = 0usize;
        assert_eq!(sf_parameter_census(ptr::null(), &mut n), SfStatus::Ok);
        assert!((n as f64 - 25.7e6).abs() / 25.7e6 < 0.01);
        let bad = CString::new("filters = 8\nbogus = 1\n").unwrap();
        assert_eq!(sf_parameter_census(bad.as_ptr(), &mut n), SfStatus::InvalidArgument);
        assert!(last_error().contains("line 2"), "{}", last_error());
    }
}

#[test]
fn error_messages_truncate_safely() {
    unsafe {
        sf_model_load(ptr::null(), &mut ptr::null_mut());
        let full = sf_last_error_message(ptr::null_mut(), 0);
        let mut tiny = [1 as c_char; 4];
        assert_eq!(sf_last_error_message(tiny.as_mut_ptr(), 4), full);
        assert_eq!(tiny[3], 0);
    }
}

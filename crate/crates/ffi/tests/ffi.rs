use std::ffi::CStr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use maskbook::oracle_masks::{oracle_mask, MaskKind};
use maskbook::{StftConfig, StftPlan, WindowKind, C64};
use maskbook_ffi::*;

fn signal(len: usize, f: f64, phase: f64) -> Vec<f64> {
    (0..len).map(|i| (f * i as f64 + phase).sin() + 0.2 * (3.1 * f * i as f64).cos()).collect()
}

fn last_error() -> String {
    let p = mb_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Plan(*mut MbStftPlan);

impl Plan {
    fn new(win: usize, hop: usize) -> Self {
        let mut p = ptr::null_mut();
        let st = unsafe { mb_stft_plan_new(win, hop, win, MbWindow::SqrtHann, 8000, &mut p) };
        assert_eq!(st, MbStatus::Ok);
        Plan(p)
    }

    fn shape(&self, len: usize) -> (usize, usize) {
        let (mut t, mut f) = (0, 0);
        assert_eq!(unsafe { mb_stft_shape(self.0, len, &mut t, &mut f) }, MbStatus::Ok);
        (t, f)
    }

    fn stft(&self, x: &[f64]) -> Vec<MbComplex> {
        let (t, f) = self.shape(x.len());
        let mut out = vec![MbComplex::default(); t * f];
        let st = unsafe { mb_stft(self.0, x.as_ptr(), x.len(), out.as_mut_ptr(), out.len()) };
        assert_eq!(st, MbStatus::Ok);
        out
    }
}

impl Drop for Plan {
    fn drop(&mut self) {
        unsafe { mb_stft_plan_free(self.0) }
    }
}

#[test]
fn null_pointers_are_reported() {
    unsafe {
        assert_eq!(mb_stft_plan_new(64, 16, 64, MbWindow::SqrtHann, 8000, ptr::null_mut()), MbStatus::NullPointer);
        assert!(last_error().contains("out"));
        assert_eq!(mb_stft(ptr::null(), ptr::null(), 0, ptr::null_mut(), 0), MbStatus::NullPointer);
        assert!(last_error().contains("plan"));
        let mut v = 0.0;
        assert_eq!(mb_si_sdr(ptr::null(), [1.0].as_ptr(), 1, &mut v), MbStatus::NullPointer);
        assert_eq!(mb_phasebook_size(ptr::null()), 0);
        mb_stft_plan_free(ptr::null_mut());
        mb_phasebook_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_codes_and_clear_on_success() {
    let mut p = ptr::null_mut();
    unsafe {
        assert_eq!(mb_stft_plan_new(64, 16, 63, MbWindow::SqrtHann, 8000, &mut p), MbStatus::InvalidArgument);
        assert!(p.is_null());
        assert!(!last_error().is_empty());
        let mut v = 0.0;
        let st = mb_si_sdr([1.0, 2.0].as_ptr(), [1.0].as_ptr(), 1, &mut v);
        assert_eq!(st, MbStatus::Ok);
        assert!(mb_last_error().is_null());
        assert_eq!(mb_si_sdr([1.0].as_ptr(), [0.0].as_ptr(), 1, &mut v), MbStatus::InvalidArgument);
    }
}

#[test]
fn stft_round_trip_and_buffer_checks() {
    let plan = Plan::new(64, 16);
    let x = signal(500, 0.07, 0.3);
    let spec = plan.stft(&x);
    let (t, f) = plan.shape(x.len());
    assert_eq!(f, 33);

    let core = StftPlan::new(&StftConfig::new(64, 16, 64, WindowKind::SqrtHann, 8000).unwrap()).unwrap();
    let reference = core.analyze(&x).unwrap();
    for (a, b) in spec.iter().zip(reference.iter()) {
        assert_eq!(C64::from(*a), *b);
    }

    let mut y = vec![0.0; x.len()];
    assert_eq!(unsafe { mb_istft(plan.0, spec.as_ptr(), t, f, x.len(), y.as_mut_ptr()) }, MbStatus::Ok);
    let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "{err}");

    let mut small = vec![MbComplex::default(); 3];
    let st = unsafe { mb_stft(plan.0, x.as_ptr(), x.len(), small.as_mut_ptr(), small.len()) };
    assert_eq!(st, MbStatus::BufferTooSmall);
    assert!(last_error().contains("needed"));
    let st = unsafe { mb_istft(plan.0, spec.as_ptr(), t, f + 1, x.len(), y.as_mut_ptr()) };
    assert_ne!(st, MbStatus::Ok);
}

#[test]
fn si_sdr_ignores_scale() {
    let r = signal(300, 0.11, 0.0);
    let e: Vec<f64> = r.iter().map(|v| 0.25 * v).collect();
    let mut v = 0.0;
    assert_eq!(unsafe { mb_si_sdr(e.as_ptr(), r.as_ptr(), r.len(), &mut v) }, MbStatus::Ok);
    assert!(v > 100.0, "{v}");
    let noisy: Vec<f64> = r.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 0.1 } else { -0.1 }).collect();
    assert_eq!(unsafe { mb_si_sdr(noisy.as_ptr(), r.as_ptr(), r.len(), &mut v) }, MbStatus::Ok);
    assert!(v > 5.0 && v < 40.0, "{v}");
}

#[test]
fn oracle_mask_matches_core_and_masks_reconstruct() {
    let plan = Plan::new(64, 16);
    let s = signal(400, 0.05, 0.0);
    let n = signal(400, 0.31, 1.0);
    let x: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + b).collect();
    let (ss, nn, xx) = (plan.stft(&s), plan.stft(&n), plan.stft(&x));
    let (t, f) = plan.shape(x.len());

    let core = StftPlan::new(&StftConfig::new(64, 16, 64, WindowKind::SqrtHann, 8000).unwrap()).unwrap();
    let (cs, cn, cx) = (core.analyze(&s).unwrap(), core.analyze(&n).unwrap(), core.analyze(&x).unwrap());
    for (kind, ckind) in [(MbMaskKind::Iam, MaskKind::Iam), (MbMaskKind::Psf, MaskKind::Psf), (MbMaskKind::Icm, MaskKind::Icm)] {
        let mut mask = vec![MbComplex::default(); t * f];
        let mut guarded = usize::MAX;
        let st = unsafe {
            mb_oracle_mask(kind, ss.as_ptr(), nn.as_ptr(), xx.as_ptr(), t, f, 2.0, mask.as_mut_ptr(), &mut guarded)
        };
        assert_eq!(st, MbStatus::Ok, "{}", last_error());
        assert!(guarded < t * f);
        let expected = oracle_mask(ckind, &cs, &cn, &cx, 2.0).unwrap().mask.to_complex();
        for (a, b) in mask.iter().zip(expected.values.iter()) {
            assert_eq!(C64::from(*a), *b);
        }
    }

    // An unclamped complex ratio mask recovers the source exactly.
    let mut mask = vec![MbComplex::default(); t * f];
    let st = unsafe {
        mb_oracle_mask(MbMaskKind::Icm, ss.as_ptr(), nn.as_ptr(), xx.as_ptr(), t, f, f64::INFINITY, mask.as_mut_ptr(), ptr::null_mut())
    };
    assert_eq!(st, MbStatus::Ok, "{}", last_error());
    let mut masked = vec![MbComplex::default(); t * f];
    assert_eq!(unsafe { mb_apply_mask(mask.as_ptr(), xx.as_ptr(), t * f, masked.as_mut_ptr()) }, MbStatus::Ok);
    let mut y = vec![0.0; x.len()];
    assert_eq!(unsafe { mb_istft(plan.0, masked.as_ptr(), t, f, x.len(), y.as_mut_ptr()) }, MbStatus::Ok);
    let err = s.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-8, "{err}");
}

#[test]
fn misi_estimates_sum_to_the_mixture() {
    let plan = Plan::new(64, 16);
    let s = signal(400, 0.05, 0.0);
    let n = signal(400, 0.31, 1.0);
    let x: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + b).collect();
    let (t, f) = plan.shape(x.len());
    let xx = plan.stft(&x);
    let mut mags = Vec::new();
    for src in [&s, &n] {
        mags.extend(plan.stft(src).iter().map(|z| C64::from(*z).norm()));
    }
    let phases: Vec<f64> = xx.iter().chain(&xx).map(|z| C64::from(*z).arg()).collect();

    let mut out = vec![0.0; 2 * x.len()];
    let run = |k: usize, out: &mut Vec<f64>| unsafe {
        mb_misi(plan.0, mags.as_ptr(), phases.as_ptr(), 2, t, f, x.as_ptr(), x.len(), k, false, out.as_mut_ptr())
    };
    assert_eq!(run(5, &mut out), MbStatus::Ok, "{}", last_error());
    let err = (0..x.len()).map(|i| (out[i] + out[x.len() + i] - x[i]).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9, "{err}");

    let mut before = 0.0;
    let mut after = 0.0;
    assert_eq!(run(0, &mut out), MbStatus::Ok);
    unsafe { mb_si_sdr(out.as_ptr(), s.as_ptr(), s.len(), &mut before) };
    assert_eq!(run(10, &mut out), MbStatus::Ok);
    unsafe { mb_si_sdr(out.as_ptr(), s.as_ptr(), s.len(), &mut after) };
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn phasebook_handles_and_interpolation() {
    let mut book = ptr::null_mut();
    unsafe {
        assert_eq!(mb_phasebook_uniform(4, &mut book), MbStatus::Ok);
        assert_eq!(mb_phasebook_size(book), 4);
        let mut atoms = [0.0; 4];
        assert_eq!(mb_phasebook_atoms(book, atoms.as_mut_ptr(), 4), MbStatus::Ok);
        assert_eq!(atoms[0], 0.0);
        assert!((atoms[1] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(mb_phasebook_atoms(book, atoms.as_mut_ptr(), 2), MbStatus::BufferTooSmall);

        // bin 0: all weight on pi/2; bin 1: opposite atoms cancel
        let probs = [0.0, 1.0, 0.0, 0.0, 0.5, 0.0, 0.5, 0.0];
        let mut out = [9.0; 2];
        let mut degenerate = 0;
        let st = mb_phasebook_interpolate(book, probs.as_ptr(), 1, 2, out.as_mut_ptr(), &mut degenerate);
        assert_eq!(st, MbStatus::Ok, "{}", last_error());
        assert!((out[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(out[1], 0.0);
        assert_eq!(degenerate, 1);
        mb_phasebook_free(book);

        let mut custom = ptr::null_mut();
        assert_eq!(mb_phasebook_new([0.0, 1.0, -2.0].as_ptr(), 3, &mut custom), MbStatus::Ok);
        assert_eq!(mb_phasebook_size(custom), 3);
        mb_phasebook_free(custom);
        assert_ne!(mb_phasebook_new(ptr::null(), 0, &mut custom), MbStatus::Ok);
    }
}

#[test]
fn version_is_the_package_version() {
    let v = unsafe { CStr::from_ptr(mb_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/maskbook.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    for sym in [
        "mb_last_error",
        "mb_version",
        "mb_stft_plan_new",
        "mb_stft_plan_free",
        "mb_stft_shape",
        "mb_stft(",
        "mb_istft",
        "mb_oracle_mask",
        "mb_apply_mask",
        "mb_si_sdr",
        "mb_misi",
        "mb_phasebook_new",
        "mb_phasebook_uniform",
        "mb_phasebook_free",
        "mb_phasebook_size",
        "mb_phasebook_atoms",
        "mb_phasebook_interpolate",
        "typedef struct MbStftPlan MbStftPlan",
        "MB_STATUS_BUFFER_TOO_SMALL = 9",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libmaskbook_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no static library or C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/c/smoke.c");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}

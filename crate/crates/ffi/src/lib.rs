//! C ABI for the maskbook library.
//!
//! Conventions:
//! * every fallible function returns an [`MbStatus`]; on failure a message
//!   is available from [`mb_last_error`] on the same thread;
//! * time-frequency arrays are row-major `frames x bins`, complex values are
//!   [`MbComplex`] pairs;
//! * output buffers are allocated by the caller and their capacity is
//!   checked against the required size;
//! * plans and phasebooks are opaque handles released with their `_free`
//!   function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use maskbook::codebook::{infer_interpolate, MaskProbabilities, Phasebook};
use maskbook::codebook_opt::uniform_phasebook;
use maskbook::metrics::si_sdr;
use maskbook::misi::{misi, MisiConfig};
use maskbook::oracle_masks::{oracle_mask, MaskKind};
use maskbook::{Error, StftConfig, StftPlan, TfGrid, WindowKind, C64};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Empty = 4,
    Unsupported = 5,
    Format = 6,
    Numerical = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Complex number with the layout of `double _Complex`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MbComplex {
    pub re: f64,
    pub im: f64,
}

impl From<C64> for MbComplex {
    fn from(z: C64) -> Self {
        Self { re: z.re, im: z.im }
    }
}

impl From<MbComplex> for C64 {
    fn from(z: MbComplex) -> Self {
        C64::new(z.re, z.im)
    }
}

/// Analysis window family.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MbWindow {
    SqrtHann = 0,
    Hann = 1,
    Rectangular = 2,
}

/// Oracle mask family.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MbMaskKind {
    Ibm = 0,
    Irm = 1,
    Wf = 2,
    Iam = 3,
    Psf = 4,
    Tpsf = 5,
    Icm = 6,
}

/// Opaque STFT plan.
pub struct MbStftPlan {
    plan: StftPlan,
}

/// Opaque phasebook.
pub struct MbPhasebook {
    book: Phasebook,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::ShapeMismatch(_) => MbStatus::ShapeMismatch,
            Error::InvalidArgument(_) => MbStatus::InvalidArgument,
            Error::Empty(_) => MbStatus::Empty,
            Error::Unsupported(_) => MbStatus::Unsupported,
            Error::Format(_) => MbStatus::Format,
            Error::Numerical(_) => MbStatus::Numerical,
            Error::Io(_) | Error::Wav(_) => MbStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> MbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MbStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MbStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MbStatus::NullPointer, format!("{what} is NULL"))
}

fn fail(status: MbStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Borrow `len` elements; a NULL pointer is accepted only when `len == 0`.
unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return if len == 0 { Ok(&[]) } else { Err(null(what)) };
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, capacity: usize, needed: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    if capacity < needed {
        return Err(fail(MbStatus::BufferTooSmall, format!("{what} holds {capacity} values, {needed} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

unsafe fn plan_ref<'a>(plan: *const MbStftPlan) -> Result<&'a StftPlan, Failure> {
    plan.as_ref().map(|p| &p.plan).ok_or_else(|| null("plan"))
}

fn grid_of(data: &[MbComplex], frames: usize, bins: usize) -> Result<TfGrid<C64>, Failure> {
    Ok(TfGrid::from_vec(frames, bins, data.iter().map(|&z| z.into()).collect())?)
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Create an STFT plan.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn mb_stft_plan_new(
    win_length: usize,
    hop: usize,
    dft_size: usize,
    window: MbWindow,
    sample_rate: u32,
    out: *mut *mut MbStftPlan,
) -> MbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let kind = match window {
            MbWindow::SqrtHann => WindowKind::SqrtHann,
            MbWindow::Hann => WindowKind::Hann,
            MbWindow::Rectangular => WindowKind::Rectangular,
        };
        let config = StftConfig::new(win_length, hop, dft_size, kind, sample_rate)?;
        let plan = StftPlan::new(&config)?;
        *out = Box::into_raw(Box::new(MbStftPlan { plan }));
        Ok(())
    })
}

/// Release a plan. NULL is ignored.
///
/// # Safety
/// `plan` must come from [`mb_stft_plan_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mb_stft_plan_free(plan: *mut MbStftPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Frames and bins of the STFT of a signal of `len` samples.
///
/// # Safety
/// `plan` must be a live plan; `frames` and `bins` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_stft_shape(plan: *const MbStftPlan, len: usize, frames: *mut usize, bins: *mut usize) -> MbStatus {
    guard(|| {
        let plan = plan_ref(plan)?;
        if frames.is_null() || bins.is_null() {
            return Err(null("frames/bins"));
        }
        *frames = plan.config().num_frames(len);
        *bins = plan.config().num_bins();
        Ok(())
    })
}

/// Forward STFT of `len` samples into `out` (`frames * bins` values).
///
/// # Safety
/// `signal` must hold `len` doubles and `out` `out_capacity` complex values.
#[no_mangle]
pub unsafe extern "C" fn mb_stft(
    plan: *const MbStftPlan,
    signal: *const f64,
    len: usize,
    out: *mut MbComplex,
    out_capacity: usize,
) -> MbStatus {
    guard(|| {
        let plan = plan_ref(plan)?;
        let x = input(signal, len, "signal")?;
        let spec = plan.analyze(x)?;
        let dst = output(out, out_capacity, spec.len(), "out")?;
        for (d, s) in dst.iter_mut().zip(spec.iter()) {
            *d = (*s).into();
        }
        Ok(())
    })
}

/// Inverse STFT of a `frames x bins` spectrogram, trimmed to `len` samples.
///
/// # Safety
/// `spec` must hold `frames * bins` values and `out` `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mb_istft(
    plan: *const MbStftPlan,
    spec: *const MbComplex,
    frames: usize,
    bins: usize,
    len: usize,
    out: *mut f64,
) -> MbStatus {
    guard(|| {
        let plan = plan_ref(plan)?;
        let grid = grid_of(input(spec, frames * bins, "spec")?, frames, bins)?;
        let y = plan.synthesize(&grid, len)?;
        output(out, len, len, "out")?.copy_from_slice(&y);
        Ok(())
    })
}

/// Oracle mask of a source `s` against interference `n` in the mixture `x`,
/// all `frames x bins`. Real masks are returned with zero imaginary part.
/// `guarded` (optional) receives the number of zero-mixture bins.
///
/// # Safety
/// `s`, `n`, `x` and `out` must each hold `frames * bins` values; `guarded`
/// may be NULL.
#[no_mangle]
pub unsafe extern "C" fn mb_oracle_mask(
    kind: MbMaskKind,
    s: *const MbComplex,
    n: *const MbComplex,
    x: *const MbComplex,
    frames: usize,
    bins: usize,
    r_max: f64,
    out: *mut MbComplex,
    guarded: *mut usize,
) -> MbStatus {
    guard(|| {
        let count = frames * bins;
        let s = grid_of(input(s, count, "s")?, frames, bins)?;
        let n = grid_of(input(n, count, "n")?, frames, bins)?;
        let x = grid_of(input(x, count, "x")?, frames, bins)?;
        let kind = match kind {
            MbMaskKind::Ibm => MaskKind::Ibm,
            MbMaskKind::Irm => MaskKind::Irm,
            MbMaskKind::Wf => MaskKind::Wf,
            MbMaskKind::Iam => MaskKind::Iam,
            MbMaskKind::Psf => MaskKind::Psf,
            MbMaskKind::Tpsf => MaskKind::Tpsf,
            MbMaskKind::Icm => MaskKind::Icm,
        };
        let mask = oracle_mask(kind, &s, &n, &x, r_max)?;
        let values = mask.mask.to_complex().values;
        let dst = output(out, count, count, "out")?;
        for (d, v) in dst.iter_mut().zip(values.iter()) {
            *d = (*v).into();
        }
        if !guarded.is_null() {
            *guarded = mask.guarded_bins;
        }
        Ok(())
    })
}

/// Bin-wise product `out = mask * x` over `count` values.
///
/// # Safety
/// All three arrays must hold `count` values.
#[no_mangle]
pub unsafe extern "C" fn mb_apply_mask(mask: *const MbComplex, x: *const MbComplex, count: usize, out: *mut MbComplex) -> MbStatus {
    guard(|| {
        let m = input(mask, count, "mask")?;
        let x = input(x, count, "x")?;
        let dst = output(out, count, count, "out")?;
        for ((d, &a), &b) in dst.iter_mut().zip(m).zip(x) {
            *d = (C64::from(a) * C64::from(b)).into();
        }
        Ok(())
    })
}

/// Scale-invariant SDR in dB, clamped to +-120.
///
/// # Safety
/// `estimate` and `reference` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_si_sdr(estimate: *const f64, reference: *const f64, len: usize, out: *mut f64) -> MbStatus {
    guard(|| {
        let e = input(estimate, len, "estimate")?;
        let r = input(reference, len, "reference")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = si_sdr(e, r)?;
        Ok(())
    })
}

/// Multiple-input spectrogram inversion.
///
/// `magnitudes` and `phases` hold `sources` consecutive `frames x bins`
/// grids; `out` receives `sources` consecutive signals of `len` samples. With
/// `iterations == 0` the output is the plain inverse STFT unless
/// `redistribute` is nonzero.
///
/// # Safety
/// Array sizes must match the stated dimensions.
#[no_mangle]
pub unsafe extern "C" fn mb_misi(
    plan: *const MbStftPlan,
    magnitudes: *const f64,
    phases: *const f64,
    sources: usize,
    frames: usize,
    bins: usize,
    mixture: *const f64,
    len: usize,
    iterations: usize,
    redistribute: bool,
    out: *mut f64,
) -> MbStatus {
    guard(|| {
        let plan = plan_ref(plan)?;
        let count = frames * bins;
        let mags = input(magnitudes, sources * count, "magnitudes")?;
        let phs = input(phases, sources * count, "phases")?;
        let x = input(mixture, len, "mixture")?;
        let split = |v: &[f64]| -> Result<Vec<TfGrid<f64>>, Failure> {
            v.chunks(count.max(1))
                .take(sources)
                .map(|c| Ok(TfGrid::from_vec(frames, bins, c.to_vec())?))
                .collect()
        };
        let config = MisiConfig {
            iterations,
            redistribute_at_zero: redistribute,
        };
        let result = misi(&split(mags)?, &split(phs)?, x, config, plan)?;
        let dst = output(out, sources * len, sources * len, "out")?;
        for (chunk, s) in dst.chunks_mut(len.max(1)).zip(&result.sources) {
            chunk.copy_from_slice(s);
        }
        Ok(())
    })
}

/// Phasebook from `size` angles in radians.
///
/// # Safety
/// `atoms` must hold `size` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_phasebook_new(atoms: *const f64, size: usize, out: *mut *mut MbPhasebook) -> MbStatus {
    guard(|| {
        let a = input(atoms, size, "atoms")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let book = Phasebook::new(a.to_vec())?;
        *out = Box::into_raw(Box::new(MbPhasebook { book }));
        Ok(())
    })
}

/// Uniform phasebook `{2 pi k / size}` containing 0.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_phasebook_uniform(size: usize, out: *mut *mut MbPhasebook) -> MbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let book = uniform_phasebook(size)?;
        *out = Box::into_raw(Box::new(MbPhasebook { book }));
        Ok(())
    })
}

/// Release a phasebook. NULL is ignored.
///
/// # Safety
/// `book` must come from a phasebook constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mb_phasebook_free(book: *mut MbPhasebook) {
    if !book.is_null() {
        drop(Box::from_raw(book));
    }
}

/// Number of atoms, or 0 for NULL.
///
/// # Safety
/// `book` must be NULL or a live phasebook.
#[no_mangle]
pub unsafe extern "C" fn mb_phasebook_size(book: *const MbPhasebook) -> usize {
    book.as_ref().map_or(0, |b| b.book.atoms().len())
}

/// Copy the atoms (radians, in `(-pi, pi]`) into `out`.
///
/// # Safety
/// `book` must be live and `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn mb_phasebook_atoms(book: *const MbPhasebook, out: *mut f64, capacity: usize) -> MbStatus {
    guard(|| {
        let b = book.as_ref().ok_or_else(|| null("book"))?;
        let atoms = b.book.atoms();
        output(out, capacity, atoms.len(), "out")?.copy_from_slice(atoms);
        Ok(())
    })
}

/// Interpolated phase `angle(sum_j p_j e^{i theta_j})` per bin. `probs` is
/// `frames x bins x size`; bins whose resultant vanishes get 0 rad and are
/// counted in `degenerate` (optional).
///
/// # Safety
/// `probs` must hold `frames * bins * size` doubles and `out` `frames * bins`.
#[no_mangle]
pub unsafe extern "C" fn mb_phasebook_interpolate(
    book: *const MbPhasebook,
    probs: *const f64,
    frames: usize,
    bins: usize,
    out: *mut f64,
    degenerate: *mut usize,
) -> MbStatus {
    guard(|| {
        let b = book.as_ref().ok_or_else(|| null("book"))?;
        let size = b.book.atoms().len();
        let p = input(probs, frames * bins * size, "probs")?;
        let probs = MaskProbabilities::new(frames, bins, size, p.to_vec())?;
        let inf = infer_interpolate(&probs, &b.book)?;
        output(out, frames * bins, frames * bins, "out")?.copy_from_slice(inf.values.as_slice());
        if !degenerate.is_null() {
            *degenerate = inf.degenerate;
        }
        Ok(())
    })
}

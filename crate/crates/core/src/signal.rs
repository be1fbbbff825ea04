//! STFT analysis and overlap-add synthesis.
//!
//! Frames are zero-padded by `win_length - hop` samples at both ends so that
//! every input sample is covered by the full set of overlapping frames. The
//! synthesis window is derived from the analysis window so that the sum of
//! `analysis * synthesis` over overlapping frames is exactly one at every
//! sample, which makes `istft(stft(x)) == x` up to rounding.
//!
//! Besides the forward transforms, [`StftPlan`] exposes their adjoints, which
//! the gradient code uses to back-propagate through the (linear) transforms.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, shape, Error, Result};
use crate::tf::TfGrid;

pub type C64 = Complex64;

/// Analysis window families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WindowKind {
    #[default]
    SqrtHann,
    Hann,
    Rectangular,
}

impl fmt::Display for WindowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            WindowKind::SqrtHann => "sqrt-hann",
            WindowKind::Hann => "hann",
            WindowKind::Rectangular => "rectangular",
        };
        f.write_str(name)
    }
}

impl FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sqrt-hann" | "sqrthann" | "sqrt_hann" => Ok(WindowKind::SqrtHann),
            "hann" => Ok(WindowKind::Hann),
            "rect" | "rectangular" | "boxcar" => Ok(WindowKind::Rectangular),
            other => Err(Error::Unsupported(format!("window kind `{other}`"))),
        }
    }
}

/// Analysis window coefficients. Hann variants are periodic.
pub fn make_window(kind: WindowKind, length: usize) -> Result<Vec<f64>> {
    if length == 0 {
        return invalid("window length must be positive");
    }
    let n = length as f64;
    let hann = |i: usize| 0.5 * (1.0 - (2.0 * PI * i as f64 / n).cos());
    let w: Vec<f64> = match kind {
        WindowKind::SqrtHann => (0..length).map(|i| hann(i).sqrt()).collect(),
        WindowKind::Hann => (0..length).map(hann).collect(),
        WindowKind::Rectangular => vec![1.0; length],
    };
    if w.iter().all(|&v| v == 0.0) {
        return invalid(format!("{kind} window of length {length} has no energy"));
    }
    Ok(w)
}

/// Synthesis window for weighted overlap-add with the given analysis window.
///
/// `synthesis[n] = analysis[n] / sum_k analysis[(n mod hop) + k * hop]^2`, so
/// the overlap-added product of both windows is exactly one.
pub fn synthesis_window(analysis: &[f64], hop: usize) -> Result<Vec<f64>> {
    if hop == 0 || hop > analysis.len() {
        return invalid(format!(
            "hop {hop} must lie in 1..={}",
            analysis.len()
        ));
    }
    let mut denom = vec![0.0; hop];
    for (n, &w) in analysis.iter().enumerate() {
        denom[n % hop] += w * w;
    }
    if let Some(r) = denom.iter().position(|&d| d <= 1e-12) {
        return invalid(format!(
            "window/hop pair cannot be inverted: no energy at phase {r}"
        ));
    }
    Ok(analysis
        .iter()
        .enumerate()
        .map(|(n, &w)| w / denom[n % hop])
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StftConfig {
    pub win_length: usize,
    pub hop: usize,
    pub dft_size: usize,
    pub window: WindowKind,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    /// 32 ms sqrt-Hann window, 8 ms hop and a 256-point DFT at 8 kHz.
    fn default() -> Self {
        Self {
            win_length: 256,
            hop: 64,
            dft_size: 256,
            window: WindowKind::SqrtHann,
            sample_rate: 8000,
        }
    }
}

impl StftConfig {
    pub fn new(
        win_length: usize,
        hop: usize,
        dft_size: usize,
        window: WindowKind,
        sample_rate: u32,
    ) -> Result<Self> {
        let cfg = Self {
            win_length,
            hop,
            dft_size,
            window,
            sample_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win_length || self.win_length > self.dft_size {
            return invalid(format!(
                "need 0 < hop ({}) <= win_length ({}) <= dft_size ({})",
                self.hop, self.win_length, self.dft_size
            ));
        }
        if !self.dft_size.is_multiple_of(2) {
            return invalid(format!("dft_size {} must be even", self.dft_size));
        }
        if self.sample_rate == 0 {
            return invalid("sample rate must be positive");
        }
        let w = make_window(self.window, self.win_length)?;
        synthesis_window(&w, self.hop)?;
        Ok(())
    }

    /// Number of one-sided frequency bins, `dft_size / 2 + 1`.
    pub fn num_bins(&self) -> usize {
        self.dft_size / 2 + 1
    }

    /// Zero padding applied at each end of the signal.
    pub fn pad(&self) -> usize {
        self.win_length - self.hop
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        if len == 0 {
            0
        } else {
            (self.pad() + len - 1) / self.hop + 1
        }
    }
}

/// Real time-domain signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite sample at index {i}"));
        }
        if sample_rate == 0 {
            return invalid("sample rate must be positive");
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }
}

/// Complex one-sided STFT together with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub bins: TfGrid<C64>,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn new(bins: TfGrid<C64>, config: StftConfig) -> Result<Self> {
        if bins.bins() != config.num_bins() {
            return shape(format!(
                "spectrogram has {} bins, config expects {}",
                bins.bins(),
                config.num_bins()
            ));
        }
        if bins.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return invalid("spectrogram contains non-finite entries");
        }
        Ok(Self { bins, config })
    }

    pub fn frames(&self) -> usize {
        self.bins.frames()
    }

    pub fn magnitude(&self) -> TfGrid<f64> {
        self.bins.map(|c| c.norm())
    }
}

/// Precomputed windows and FFT plans for one [`StftConfig`].
#[derive(Clone)]
pub struct StftPlan {
    config: StftConfig,
    analysis: Vec<f64>,
    synthesis: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StftPlan").field("config", &self.config).finish()
    }
}

impl StftPlan {
    pub fn new(config: &StftConfig) -> Result<Self> {
        config.validate()?;
        let analysis = make_window(config.window, config.win_length)?;
        let synthesis = synthesis_window(&analysis, config.hop)?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            config: config.clone(),
            analysis,
            synthesis,
            forward: planner.plan_fft_forward(config.dft_size),
            inverse: planner.plan_fft_inverse(config.dft_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn analysis_window(&self) -> &[f64] {
        &self.analysis
    }

    pub fn synthesis_window(&self) -> &[f64] {
        &self.synthesis
    }

    fn sample_index(&self, frame: usize, n: usize, len: usize) -> Option<usize> {
        let p = frame * self.config.hop + n;
        let pad = self.config.pad();
        (p >= pad && p - pad < len).then(|| p - pad)
    }

    /// Forward STFT of a raw sample slice.
    pub fn analyze(&self, x: &[f64]) -> Result<TfGrid<C64>> {
        if x.is_empty() {
            return Err(Error::Empty("stft of an empty signal".into()));
        }
        let frames = self.config.num_frames(x.len());
        let n_fft = self.config.dft_size;
        let n_bins = self.config.num_bins();
        let mut out = TfGrid::filled(frames, n_bins, C64::new(0.0, 0.0));
        let mut buf = vec![C64::new(0.0, 0.0); n_fft];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = C64::new(0.0, 0.0));
            for (n, &w) in self.analysis.iter().enumerate() {
                if let Some(i) = self.sample_index(t, n, x.len()) {
                    buf[n].re = w * x[i];
                }
            }
            self.forward.process(&mut buf);
            out.row_mut(t).copy_from_slice(&buf[..n_bins]);
        }
        Ok(out)
    }

    /// Inverse STFT by weighted overlap-add, trimmed to `len` samples.
    ///
    /// Imaginary parts of the DC and Nyquist bins are ignored, which is the
    /// projection onto conjugate-symmetric spectra.
    pub fn synthesize(&self, spec: &TfGrid<C64>, len: usize) -> Result<Vec<f64>> {
        self.check_bins(spec)?;
        let n_fft = self.config.dft_size;
        let half = n_fft / 2;
        let scale = 1.0 / n_fft as f64;
        let mut out = vec![0.0; len];
        let mut buf = vec![C64::new(0.0, 0.0); n_fft];
        for t in 0..spec.frames() {
            let row = spec.row(t);
            buf[0] = C64::new(row[0].re, 0.0);
            buf[half] = C64::new(row[half].re, 0.0);
            for f in 1..half {
                buf[f] = row[f];
                buf[n_fft - f] = row[f].conj();
            }
            self.inverse.process(&mut buf);
            for (n, &w) in self.synthesis.iter().enumerate() {
                if let Some(i) = self.sample_index(t, n, len) {
                    out[i] += w * buf[n].re * scale;
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`synthesize`](Self::synthesize): maps a gradient with
    /// respect to the output samples to a gradient with respect to the
    /// spectrogram (real part in `re`, imaginary part in `im`).
    pub fn synthesize_adjoint(&self, grad: &[f64], frames: usize) -> TfGrid<C64> {
        let n_fft = self.config.dft_size;
        let half = n_fft / 2;
        let scale = 1.0 / n_fft as f64;
        let mut out = TfGrid::filled(frames, self.config.num_bins(), C64::new(0.0, 0.0));
        let mut buf = vec![C64::new(0.0, 0.0); n_fft];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = C64::new(0.0, 0.0));
            for (n, &w) in self.synthesis.iter().enumerate() {
                if let Some(i) = self.sample_index(t, n, grad.len()) {
                    buf[n].re = w * grad[i];
                }
            }
            self.forward.process(&mut buf);
            let row = out.row_mut(t);
            row[0] = C64::new(buf[0].re * scale, 0.0);
            row[half] = C64::new(buf[half].re * scale, 0.0);
            for f in 1..half {
                row[f] = buf[f] * (2.0 * scale);
            }
        }
        out
    }

    /// Adjoint of [`analyze`](Self::analyze) for a signal of `len` samples.
    pub fn analyze_adjoint(&self, grad: &TfGrid<C64>, len: usize) -> Result<Vec<f64>> {
        self.check_bins(grad)?;
        let n_fft = self.config.dft_size;
        let mut out = vec![0.0; len];
        let mut buf = vec![C64::new(0.0, 0.0); n_fft];
        for t in 0..grad.frames() {
            buf.iter_mut().for_each(|c| *c = C64::new(0.0, 0.0));
            buf[..grad.bins()].copy_from_slice(grad.row(t));
            self.inverse.process(&mut buf);
            for (n, &w) in self.analysis.iter().enumerate() {
                if let Some(i) = self.sample_index(t, n, len) {
                    out[i] += w * buf[n].re;
                }
            }
        }
        Ok(out)
    }

    fn check_bins(&self, spec: &TfGrid<C64>) -> Result<()> {
        if spec.bins() != self.config.num_bins() {
            return shape(format!(
                "spectrogram has {} bins, config expects {}",
                spec.bins(),
                self.config.num_bins()
            ));
        }
        Ok(())
    }
}

pub fn stft(waveform: &Waveform, config: &StftConfig) -> Result<Spectrogram> {
    let plan = StftPlan::new(config)?;
    let bins = plan.analyze(&waveform.samples)?;
    Ok(Spectrogram {
        bins,
        config: config.clone(),
    })
}

pub fn istft(spec: &Spectrogram, config: &StftConfig, target_length: usize) -> Result<Waveform> {
    if &spec.config != config {
        return shape("spectrogram was produced with a different STFT config");
    }
    let plan = StftPlan::new(config)?;
    let samples = plan.synthesize(&spec.bins, target_length)?;
    Waveform::new(samples, config.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn sqrt_hann_midpoint_is_one() {
        let w = make_window(WindowKind::SqrtHann, 4).unwrap();
        assert!((w[2] - 1.0).abs() < 1e-15);
        assert_eq!(w[0], 0.0);
    }

    #[test]
    fn window_rejects_zero_length() {
        assert!(make_window(WindowKind::Hann, 0).is_err());
        assert!("triangle".parse::<WindowKind>().is_err());
    }

    #[test]
    fn windows_have_energy() {
        for kind in [WindowKind::SqrtHann, WindowKind::Hann, WindowKind::Rectangular] {
            for len in [2, 3, 16, 256] {
                let w = make_window(kind, len).unwrap();
                assert!(w.iter().any(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn overlap_add_of_window_products_is_one() {
        // Direct summation over every frame that covers each sample.
        let (len, hop) = (256, 64);
        let a = make_window(WindowKind::SqrtHann, len).unwrap();
        let s = synthesis_window(&a, hop).unwrap();
        for p in len..3 * len {
            let mut acc = 0.0;
            for start in (0..=p).step_by(hop) {
                if p - start < len {
                    acc += a[p - start] * s[p - start];
                }
            }
            assert!((acc - 1.0).abs() < 1e-12, "sample {p}: {acc}");
        }
    }

    #[test]
    fn sqrt_hann_quarter_hop_synthesis_is_half_analysis() {
        let a = make_window(WindowKind::SqrtHann, 256).unwrap();
        let s = synthesis_window(&a, 64).unwrap();
        for (x, y) in a.iter().zip(&s) {
            assert!((y - x / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(StftConfig::default().validate().is_ok());
        assert!(StftConfig::new(256, 300, 256, WindowKind::SqrtHann, 8000).is_err());
        assert!(StftConfig::new(256, 64, 128, WindowKind::SqrtHann, 8000).is_err());
        assert!(StftConfig::new(255, 64, 255, WindowKind::Hann, 8000).is_err());
        // Hann with hop == win_length leaves samples with zero weight.
        assert!(StftConfig::new(16, 16, 16, WindowKind::Hann, 8000).is_err());
        assert_eq!(StftConfig::default().num_bins(), 129);
    }

    #[test]
    fn zeros_in_zeros_out() {
        let cfg = StftConfig::default();
        let x = Waveform::new(vec![0.0; 1000], 8000).unwrap();
        let spec = stft(&x, &cfg).unwrap();
        assert!(spec.bins.iter().all(|c| c.norm() == 0.0));
        let y = istft(&spec, &cfg, 1000).unwrap();
        assert!(y.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_input_is_an_error() {
        let cfg = StftConfig::default();
        let x = Waveform::new(vec![], 8000).unwrap();
        assert!(matches!(stft(&x, &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn round_trip_white_noise() {
        let cfg = StftConfig::default();
        let x = Waveform::new(noise(8000, 1), 8000).unwrap();
        let spec = stft(&x, &cfg).unwrap();
        let y = istft(&spec, &cfg, x.len()).unwrap();
        assert!(rel_err(&y.samples, &x.samples) < 1e-10);
    }

    #[test]
    fn round_trip_other_configs() {
        for (win, hop, n, kind) in [
            (16, 4, 16, WindowKind::SqrtHann),
            (200, 80, 256, WindowKind::Hann),
            (64, 64, 64, WindowKind::Rectangular),
            (100, 33, 128, WindowKind::SqrtHann),
        ] {
            let cfg = StftConfig::new(win, hop, n, kind, 8000).unwrap();
            let plan = StftPlan::new(&cfg).unwrap();
            let x = noise(777, 2);
            let y = plan.synthesize(&plan.analyze(&x).unwrap(), x.len()).unwrap();
            assert!(rel_err(&y, &x) < 1e-10, "{win}/{hop}/{n}");
        }
    }

    #[test]
    fn sinusoid_at_bin_center_peaks_in_that_bin() {
        let cfg = StftConfig::default();
        let k = 20usize;
        let freq = k as f64 * cfg.sample_rate as f64 / cfg.dft_size as f64;
        let x: Vec<f64> = (0..4000)
            .map(|i| (2.0 * PI * freq * i as f64 / cfg.sample_rate as f64).sin())
            .collect();
        let plan = StftPlan::new(&cfg).unwrap();
        let spec = plan.analyze(&x).unwrap();
        for t in 4..spec.frames() - 4 {
            let row = spec.row(t);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].norm().partial_cmp(&row[b].norm()).unwrap())
                .unwrap();
            assert_eq!(best, k);
        }
    }

    #[test]
    fn parseval_with_window_normalization() {
        let cfg = StftConfig::new(64, 16, 64, WindowKind::SqrtHann, 8000).unwrap();
        let plan = StftPlan::new(&cfg).unwrap();
        let x = noise(500, 3);
        let spec = plan.analyze(&x).unwrap();
        let n = cfg.dft_size;
        let mut spec_energy = 0.0;
        for t in 0..spec.frames() {
            for (f, c) in spec.row(t).iter().enumerate() {
                let weight = if f == 0 || f == n / 2 { 1.0 } else { 2.0 };
                spec_energy += weight * c.norm_sqr();
            }
        }
        spec_energy /= n as f64;
        let mut frame_energy = 0.0;
        for t in 0..spec.frames() {
            for (k, &w) in plan.analysis_window().iter().enumerate() {
                if let Some(i) = plan.sample_index(t, k, x.len()) {
                    frame_energy += (w * x[i]).powi(2);
                }
            }
        }
        assert!((spec_energy - frame_energy).abs() / frame_energy < 1e-8);
    }

    #[test]
    fn adjoints_match_dot_products() {
        let cfg = StftConfig::new(16, 4, 16, WindowKind::SqrtHann, 8000).unwrap();
        let plan = StftPlan::new(&cfg).unwrap();
        let len = 37;
        let frames = cfg.num_frames(len);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = TfGrid::from_fn(frames, cfg.num_bins(), |_, _| {
            C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let g = noise(len, 10);
        let inner = |a: &TfGrid<C64>, b: &TfGrid<C64>| -> f64 {
            a.iter().zip(b.iter()).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
        };
        let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };

        // <synthesize(X), g> == <X, synthesize_adjoint(g)>
        let lhs = dot(&plan.synthesize(&spec, len).unwrap(), &g);
        let rhs = inner(&spec, &plan.synthesize_adjoint(&g, frames));
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));

        // <analyze(x), G> == <x, analyze_adjoint(G)>
        let lhs = inner(&plan.analyze(&g).unwrap(), &spec);
        let rhs = dot(&g, &plan.analyze_adjoint(&spec, len).unwrap());
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn istft_rejects_mismatched_bins() {
        let cfg = StftConfig::default();
        let plan = StftPlan::new(&cfg).unwrap();
        let bad = TfGrid::filled(3, 10, C64::new(0.0, 0.0));
        assert!(plan.synthesize(&bad, 100).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn stft_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let cfg = StftConfig::new(32, 8, 32, WindowKind::SqrtHann, 8000).unwrap();
            let plan = StftPlan::new(&cfg).unwrap();
            let x = noise(200, seed);
            let y = noise(200, seed + 1);
            let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let (sx, sy, sz) = (plan.analyze(&x).unwrap(), plan.analyze(&y).unwrap(), plan.analyze(&z).unwrap());
            for i in 0..sz.len() {
                let expect = sx.as_slice()[i] * a + sy.as_slice()[i] * b;
                prop_assert!((sz.as_slice()[i] - expect).norm() < 1e-12 * 64.0);
            }
        }

        #[test]
        fn istft_is_linear(seed in 0u64..1000) {
            let cfg = StftConfig::new(32, 8, 32, WindowKind::SqrtHann, 8000).unwrap();
            let plan = StftPlan::new(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rand_spec = || TfGrid::from_fn(20, cfg.num_bins(), |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let (a, b) = (rand_spec(), rand_spec());
            let sum = a.zip_map(&b, |x, y| x + y).unwrap();
            let (ya, yb, ys) = (plan.synthesize(&a, 150).unwrap(), plan.synthesize(&b, 150).unwrap(), plan.synthesize(&sum, 150).unwrap());
            for i in 0..150 {
                prop_assert!((ys[i] - ya[i] - yb[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn perfect_reconstruction_any_length(seed in 0u64..1000, len in 1usize..600) {
            let cfg = StftConfig::new(64, 16, 64, WindowKind::SqrtHann, 8000).unwrap();
            let plan = StftPlan::new(&cfg).unwrap();
            let x = noise(len, seed);
            let y = plan.synthesize(&plan.analyze(&x).unwrap(), len).unwrap();
            prop_assert!(rel_err(&y, &x) < 1e-10);
        }
    }
}

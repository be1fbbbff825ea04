//! Magbook, phasebook and combook codebooks and the three inference schemes
//! (argmax, sampling, interpolation) that turn per-bin softmax probabilities
//! into mask values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Error, Result};
use crate::oracle_masks::{wrap_phase, wrapped_angle, ComplexMask};
use crate::signal::{Spectrogram, C64};
use crate::tf::TfGrid;

/// Phase interpolation treats `|sum_j p_j e^{i theta_j}|` below this as
/// antipodal cancellation.
pub const PHASE_DEGENERACY_EPS: f64 = 1e-12;

/// Tolerance on the probability simplex constraint.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A finite set of scalar atoms that mask values are drawn from.
pub trait Codebook {
    type Value: Copy + std::fmt::Debug;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn atom(&self, k: usize) -> Self::Value;

    /// Probability-weighted combination of the atoms. The flag is set when
    /// the combination is degenerate and a fallback value was returned.
    fn interpolate(&self, probs: &[f64]) -> (Self::Value, bool);
}

/// Real magnitude atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct Magbook {
    atoms: Vec<f64>,
}

/// Phase atoms in radians, stored in `(-pi, pi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Phasebook {
    atoms: Vec<f64>,
}

/// Complex atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct Combook {
    atoms: Vec<C64>,
}

impl Magbook {
    pub fn new(atoms: Vec<f64>) -> Result<Self> {
        if atoms.len() < 2 {
            return invalid(format!("magbook needs at least 2 atoms, got {}", atoms.len()));
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return invalid("magbook atoms must be finite");
        }
        if atoms.iter().all(|&a| a == atoms[0]) {
            return invalid("magbook atoms must not all be equal");
        }
        Ok(Self { atoms })
    }

    /// `{0, 1, ..., size - 1}`; size 2 is the sigmoid case, size 3 the convex softmax over `{0, 1, 2}`.
    pub fn uniform(size: usize) -> Result<Self> {
        Self::new((0..size).map(|i| i as f64).collect())
    }

    pub(crate) fn from_atoms_unchecked(atoms: Vec<f64>) -> Self {
        Self { atoms }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn min_atom(&self) -> f64 {
        self.atoms.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_atom(&self) -> f64 {
        self.atoms.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl Phasebook {
    pub fn new(atoms: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return invalid("phasebook needs at least 1 atom");
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return invalid("phasebook atoms must be finite");
        }
        let atoms: Vec<f64> = atoms.into_iter().map(wrap_phase).collect();
        for i in 0..atoms.len() {
            for j in 0..i {
                if wrap_phase(atoms[i] - atoms[j]).abs() < 1e-12 {
                    return invalid(format!("phasebook atoms {j} and {i} coincide modulo 2pi"));
                }
            }
        }
        Ok(Self { atoms })
    }

    pub(crate) fn from_atoms_unchecked(atoms: Vec<f64>) -> Self {
        Self {
            atoms: atoms.into_iter().map(wrap_phase).collect(),
        }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    /// Unit phasors `e^{i theta_j}`.
    pub fn phasors(&self) -> Vec<C64> {
        self.atoms.iter().map(|&a| C64::from_polar(1.0, a)).collect()
    }

    /// Unnormalized interpolation `sum_j p_j e^{i theta_j}`.
    pub fn resultant(&self, probs: &[f64]) -> C64 {
        probs
            .iter()
            .zip(&self.atoms)
            .map(|(&p, &a)| C64::from_polar(p, a))
            .sum()
    }
}

impl Combook {
    pub fn new(atoms: Vec<C64>) -> Result<Self> {
        if atoms.is_empty() {
            return invalid("combook needs at least 1 atom");
        }
        if atoms.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return invalid("combook atoms must be finite");
        }
        for i in 0..atoms.len() {
            for j in 0..i {
                if atoms[i] == atoms[j] {
                    return invalid(format!("combook atoms {j} and {i} coincide"));
                }
            }
        }
        Ok(Self { atoms })
    }

    pub(crate) fn from_atoms_unchecked(atoms: Vec<C64>) -> Self {
        Self { atoms }
    }

    pub fn atoms(&self) -> &[C64] {
        &self.atoms
    }
}

impl Codebook for Magbook {
    type Value = f64;

    fn len(&self) -> usize {
        self.atoms.len()
    }

    fn atom(&self, k: usize) -> f64 {
        self.atoms[k]
    }

    fn interpolate(&self, probs: &[f64]) -> (f64, bool) {
        (probs.iter().zip(&self.atoms).map(|(p, a)| p * a).sum(), false)
    }
}

impl Codebook for Phasebook {
    type Value = f64;

    fn len(&self) -> usize {
        self.atoms.len()
    }

    fn atom(&self, k: usize) -> f64 {
        self.atoms[k]
    }

    fn interpolate(&self, probs: &[f64]) -> (f64, bool) {
        let z = self.resultant(probs);
        if z.norm() < PHASE_DEGENERACY_EPS {
            (0.0, true)
        } else {
            (wrapped_angle(z), false)
        }
    }
}

impl Codebook for Combook {
    type Value = C64;

    fn len(&self) -> usize {
        self.atoms.len()
    }

    fn atom(&self, k: usize) -> C64 {
        self.atoms[k]
    }

    fn interpolate(&self, probs: &[f64]) -> (C64, bool) {
        (probs.iter().zip(&self.atoms).map(|(&p, &a)| a * p).sum(), false)
    }
}

/// Per-bin probability vectors over the atoms of a codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskProbabilities {
    frames: usize,
    bins: usize,
    size: usize,
    probs: Vec<f64>,
}

impl MaskProbabilities {
    /// Validates that every bin lies on the probability simplex.
    pub fn new(frames: usize, bins: usize, size: usize, probs: Vec<f64>) -> Result<Self> {
        if size == 0 {
            return invalid("probability vectors need at least one entry");
        }
        if probs.len() != frames * bins * size {
            return shape(format!(
                "{} probabilities for a {frames}x{bins}x{size} tensor",
                probs.len()
            ));
        }
        for (b, chunk) in probs.chunks(size).enumerate() {
            let sum: f64 = chunk.iter().sum();
            if chunk.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > SIMPLEX_TOL {
                return invalid(format!(
                    "bin ({}, {}) is not on the simplex (sum {sum})",
                    b / bins.max(1),
                    b % bins.max(1)
                ));
            }
        }
        Ok(Self {
            frames,
            bins,
            size,
            probs,
        })
    }

    /// Softmax over the last axis of a logit tensor.
    pub fn from_logits(frames: usize, bins: usize, size: usize, logits: &[f64]) -> Result<Self> {
        if size == 0 || logits.len() != frames * bins * size {
            return shape(format!(
                "{} logits for a {frames}x{bins}x{size} tensor",
                logits.len()
            ));
        }
        let mut probs = vec![0.0; logits.len()];
        for (src, dst) in logits.chunks(size).zip(probs.chunks_mut(size)) {
            softmax_into(src, dst);
        }
        Self::new(frames, bins, size, probs)
    }

    /// One-hot probabilities selecting `indices[(t, f)]` at each bin.
    pub fn one_hot(indices: &TfGrid<usize>, size: usize) -> Result<Self> {
        let mut probs = vec![0.0; indices.len() * size];
        for (b, &k) in indices.iter().enumerate() {
            if k >= size {
                return invalid(format!("index {k} out of range for size {size}"));
            }
            probs[b * size + k] = 1.0;
        }
        Self::new(indices.frames(), indices.bins(), size, probs)
    }

    pub fn uniform(frames: usize, bins: usize, size: usize) -> Result<Self> {
        Self::new(frames, bins, size, vec![1.0 / size as f64; frames * bins * size])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn bin(&self, t: usize, f: usize) -> &[f64] {
        let start = (t * self.bins + f) * self.size;
        &self.probs[start..start + self.size]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    fn check_codebook<B: Codebook>(&self, book: &B) -> Result<()> {
        if book.len() != self.size {
            return shape(format!(
                "probabilities over {} atoms used with a codebook of {}",
                self.size,
                book.len()
            ));
        }
        Ok(())
    }
}

/// Numerically stable softmax of `src` written into `dst`.
pub fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Interpolated mask values with the count of degenerate bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference<V> {
    pub values: TfGrid<V>,
    pub degenerate: usize,
}

/// One-best selection; ties go to the lowest index.
pub fn infer_argmax<B: Codebook>(probs: &MaskProbabilities, book: &B) -> Result<TfGrid<B::Value>> {
    probs.check_codebook(book)?;
    Ok(TfGrid::from_fn(probs.frames, probs.bins, |t, f| {
        book.atom(argmax_index(probs.bin(t, f)))
    }))
}

/// Independent categorical draw at each bin, reproducible from `seed`.
pub fn infer_sample<B: Codebook>(probs: &MaskProbabilities, book: &B, seed: u64) -> Result<TfGrid<B::Value>> {
    probs.check_codebook(book)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(TfGrid::from_fn(probs.frames, probs.bins, |t, f| {
        book.atom(sample_index(probs.bin(t, f), rng.gen::<f64>()))
    }))
}

/// Inverse-CDF categorical draw for a uniform variate `u` in `[0, 1)`.
pub fn sample_index(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (k, &pk) in p.iter().enumerate() {
        if pk > 0.0 {
            last_nonzero = k;
            acc += pk;
            if u < acc {
                return k;
            }
        }
    }
    last_nonzero
}

/// Expected value over the distribution. Phase interpolation happens on the
/// unit circle and degenerate bins fall back to 0 rad.
pub fn infer_interpolate<B: Codebook>(probs: &MaskProbabilities, book: &B) -> Result<Inference<B::Value>> {
    probs.check_codebook(book)?;
    let mut degenerate = 0;
    let values = TfGrid::from_fn(probs.frames, probs.bins, |t, f| {
        let (v, flag) = book.interpolate(probs.bin(t, f));
        degenerate += flag as usize;
        v
    });
    Ok(Inference { values, degenerate })
}

/// `m e^{i theta}` at every bin.
pub fn compose_complex_mask(magnitudes: &TfGrid<f64>, phases: &TfGrid<f64>) -> Result<ComplexMask> {
    Ok(ComplexMask {
        values: magnitudes.zip_map(phases, |&m, &th| C64::from_polar(1.0, th) * m)?,
    })
}

/// Bin-wise product of a complex mask with a mixture spectrogram grid.
pub fn apply_mask_grid(mask: &ComplexMask, x: &TfGrid<C64>) -> Result<TfGrid<C64>> {
    mask.values.zip_map(x, |&c, &xv| c * xv)
}

pub fn apply_mask(mask: &ComplexMask, x: &Spectrogram) -> Result<Spectrogram> {
    Ok(Spectrogram {
        bins: apply_mask_grid(mask, &x.bins)?,
        config: x.config.clone(),
    })
}

/// Plain-text codebook storage: one atom per line, 17 significant digits,
/// complex atoms as `re im`. Blank lines and `#` comments are skipped.
pub trait CodebookText: Sized {
    fn to_text(&self) -> String;
    fn from_text(text: &str) -> Result<Self>;

    fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

fn parse_lines(text: &str, fields: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        match vals {
            Ok(v) if v.len() == fields => rows.push(v),
            _ => {
                return Err(Error::Format(format!(
                    "line {}: expected {fields} number(s), got `{line}`",
                    lineno + 1
                )))
            }
        }
    }
    Ok(rows)
}

fn real_text(header: &str, atoms: &[f64]) -> String {
    let mut s = format!("# {header}\n");
    for a in atoms {
        writeln!(s, "{a:.16e}").unwrap();
    }
    s
}

impl CodebookText for Magbook {
    fn to_text(&self) -> String {
        real_text("magbook", &self.atoms)
    }

    fn from_text(text: &str) -> Result<Self> {
        Magbook::new(parse_lines(text, 1)?.into_iter().map(|r| r[0]).collect())
    }
}

impl CodebookText for Phasebook {
    fn to_text(&self) -> String {
        real_text("phasebook (radians)", &self.atoms)
    }

    fn from_text(text: &str) -> Result<Self> {
        Phasebook::new(parse_lines(text, 1)?.into_iter().map(|r| r[0]).collect())
    }
}

impl CodebookText for Combook {
    fn to_text(&self) -> String {
        let mut s = String::from("# combook (re im)\n");
        for a in &self.atoms {
            writeln!(s, "{:.16e} {:.16e}", a.re, a.im).unwrap();
        }
        s
    }

    fn from_text(text: &str) -> Result<Self> {
        Combook::new(
            parse_lines(text, 2)?
                .into_iter()
                .map(|r| C64::new(r[0], r[1]))
                .collect(),
        )
    }
}

//! Training objectives: cross-entropy on codebook indices, mask and spectrum
//! approximation losses, the expected complex spectrum loss, waveform losses,
//! the whitened k-means deep clustering loss and permutation-free wrapping.
//!
//! All reductions are sums over bins or samples.

use itertools::Itertools;
use nalgebra::DMatrix;
use std::fmt;
use std::ops::Add;
use std::str::FromStr;

use crate::codebook::{Combook, Magbook, MaskProbabilities, Phasebook};
use crate::codebook_opt::{phasebook_assign, AssignmentMap};
use crate::error::{invalid, shape, Error, Result};
use crate::misi::{misi, MisiConfig};
use crate::oracle_masks::{phase_difference, ratio, wrapped_angle, ComplexMask};
use crate::signal::{StftPlan, C64};
use crate::tf::TfGrid;

/// Floor applied inside the logarithm of the cross-entropy.
pub const CE_FLOOR: f64 = 1e-30;
/// Ridge added to `V^T V` when it is numerically singular.
pub const DC_RIDGE: f64 = 1e-9;
pub const DEFAULT_CHIMERA_ALPHA: f64 = 0.975;
/// Largest source count accepted by exhaustive permutation search.
pub const MAX_PERMUTATION_SOURCES: usize = 8;

/// Per-element penalty applied to residuals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Norm {
    #[default]
    L1,
    /// Squared Euclidean.
    L2Sq,
}

impl Norm {
    /// Penalty of a residual with modulus `r`.
    pub fn apply(self, r: f64) -> f64 {
        match self {
            Norm::L1 => r.abs(),
            Norm::L2Sq => r * r,
        }
    }

    /// Derivative of the penalty for a real residual (0 at the L1 kink).
    pub fn real_grad(self, r: f64) -> f64 {
        match self {
            Norm::L1 if r == 0.0 => 0.0,
            Norm::L1 => r.signum(),
            Norm::L2Sq => 2.0 * r,
        }
    }

    /// Gradient `dL/dRe + i dL/dIm` of the penalty of a complex residual.
    pub fn complex_grad(self, r: C64) -> C64 {
        match self {
            Norm::L1 => {
                let m = r.norm();
                if m == 0.0 {
                    C64::new(0.0, 0.0)
                } else {
                    r / m
                }
            }
            Norm::L2Sq => r * 2.0,
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "l1",
            Norm::L2Sq => "l2sq",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2sq" | "l2" | "l2^2" => Ok(Norm::L2Sq),
            other => invalid(format!("unknown norm '{other}' (expected l1 or l2sq)")),
        }
    }
}

/// A loss value with the number of flagged elements (floored logs,
/// regularized matrices).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub flagged: usize,
}

impl LossValue {
    pub fn new(value: f64) -> Self {
        Self { value, flagged: 0 }
    }
}

impl Add for LossValue {
    type Output = LossValue;

    fn add(self, rhs: LossValue) -> LossValue {
        LossValue {
            value: self.value + rhs.value,
            flagged: self.flagged + rhs.flagged,
        }
    }
}

impl std::iter::Sum for LossValue {
    fn sum<I: Iterator<Item = LossValue>>(iter: I) -> LossValue {
        iter.fold(LossValue::default(), Add::add)
    }
}

/// Per-bin magbook index minimizing `|m_i e^{i theta} x - s|`, i.e.
/// `argmin_i |m_i - Re((s/x) e^{-i theta})|`, lowest index on ties.
pub fn magnitude_ref_index(magbook: &Magbook, s: &TfGrid<C64>, x: &TfGrid<C64>, theta: &TfGrid<f64>) -> Result<AssignmentMap> {
    s.check_shape(x, "magnitude_ref_index")?;
    s.check_shape(theta, "magnitude_ref_index phase")?;
    let atoms = magbook.atoms();
    if atoms.is_empty() {
        return Err(Error::Empty("magbook".into()));
    }
    let mut out = Vec::with_capacity(s.len());
    for ((&sv, &xv), &th) in s.iter().zip(x.iter()).zip(theta.iter()) {
        let target = (ratio(sv, xv).unwrap_or_default() * C64::from_polar(1.0, -th)).re;
        let mut best = 0;
        for (i, &a) in atoms.iter().enumerate().skip(1) {
            if (a - target).abs() < (atoms[best] - target).abs() {
                best = i;
            }
        }
        out.push(best);
    }
    TfGrid::from_vec(s.frames(), s.bins(), out)
}

/// Phase used when choosing the magnitude reference index.
#[derive(Clone, Copy, Debug)]
pub enum ReferencePhase<'a> {
    /// Noisy phase: `theta = 0`.
    Zero,
    /// The phasebook atom closest to the true phase difference.
    FixedReference(&'a Phasebook),
    /// The phase mask currently produced by the model.
    CurrentEstimate(&'a TfGrid<f64>),
}

impl ReferencePhase<'_> {
    pub fn resolve(&self, s: &TfGrid<C64>, x: &TfGrid<C64>) -> Result<TfGrid<f64>> {
        match self {
            ReferencePhase::Zero => Ok(TfGrid::filled(x.frames(), x.bins(), 0.0)),
            ReferencePhase::FixedReference(pb) => Ok(phasebook_assign(pb, s, x)?.map(|&j| pb.atoms()[j])),
            ReferencePhase::CurrentEstimate(theta) => {
                theta.check_shape(x, "current phase estimate")?;
                Ok((*theta).clone())
            }
        }
    }
}

/// Magnitude reference indices under a phase policy.
pub fn magnitude_refs(magbook: &Magbook, s: &TfGrid<C64>, x: &TfGrid<C64>, policy: ReferencePhase<'_>) -> Result<AssignmentMap> {
    let theta = policy.resolve(s, x)?;
    magnitude_ref_index(magbook, s, x, &theta)
}

/// Combook index closest to `s/x` (zero-mixture bins use 0).
pub fn combook_ref_index(combook: &Combook, s: &TfGrid<C64>, x: &TfGrid<C64>) -> Result<AssignmentMap> {
    crate::codebook_opt::combook_assign(combook, s, x)
}

/// `-sum log p(ref)`, with probabilities floored at [`CE_FLOOR`].
pub fn cross_entropy_loss(probs: &MaskProbabilities, refs: &AssignmentMap) -> Result<LossValue> {
    if probs.shape() != refs.shape() {
        return shape(format!("probabilities {:?} vs references {:?}", probs.shape(), refs.shape()));
    }
    let mut loss = LossValue::default();
    for t in 0..refs.frames() {
        for f in 0..refs.bins() {
            let k = refs[(t, f)];
            if k >= probs.size() {
                return invalid(format!("reference index {k} out of range for {} atoms", probs.size()));
            }
            let p = probs.bin(t, f)[k];
            if p < CE_FLOOR {
                loss.flagged += 1;
            }
            loss.value -= p.max(CE_FLOOR).ln();
        }
    }
    Ok(loss)
}

/// Real-mask objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpectralKind {
    /// Mask approximation `|m - m_ref|`.
    Ma,
    /// Magnitude spectrum approximation `|m |x| - |s||`.
    Msa,
    /// Phase-sensitive `|m |x| - |s| cos(angle(s/x))|`.
    Psa,
}

/// Residual of a real-mask objective at one bin.
pub fn spectral_residual(kind: SpectralKind, m: f64, x: C64, s: C64, m_ref: f64) -> f64 {
    match kind {
        SpectralKind::Ma => m - m_ref,
        SpectralKind::Msa => m * x.norm() - s.norm(),
        SpectralKind::Psa => {
            let theta = if x.norm() < crate::oracle_masks::ZERO_MIXTURE_EPS { 0.0 } else { wrapped_angle(s * x.conj()) };
            m * x.norm() - s.norm() * theta.cos()
        }
    }
}

/// Unclamped amplitude ratio `|s|/|x|` (0 where the mixture vanishes).
pub fn amplitude_ratio(s: &TfGrid<C64>, x: &TfGrid<C64>) -> Result<TfGrid<f64>> {
    s.zip_map(x, |&sv, &xv| ratio(sv, xv).map_or(0.0, |r| r.norm()))
}

/// MA, MSA or PSA loss. `m_ref` is only read by MA and defaults to the
/// unclamped amplitude ratio.
pub fn spectral_loss(
    kind: SpectralKind,
    norm: Norm,
    m_out: &TfGrid<f64>,
    x: &TfGrid<C64>,
    s: &TfGrid<C64>,
    m_ref: Option<&TfGrid<f64>>,
) -> Result<LossValue> {
    m_out.check_shape(x, "spectral_loss mask")?;
    s.check_shape(x, "spectral_loss source")?;
    let default_ref;
    let m_ref = match m_ref {
        Some(r) => {
            r.check_shape(x, "spectral_loss reference")?;
            r
        }
        None => {
            default_ref = amplitude_ratio(s, x)?;
            &default_ref
        }
    };
    let value = (0..x.len())
        .map(|b| {
            let r = spectral_residual(kind, m_out.as_slice()[b], x.as_slice()[b], s.as_slice()[b], m_ref.as_slice()[b]);
            norm.apply(r)
        })
        .sum();
    Ok(LossValue::new(value))
}

/// Complex-mask objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ComplexKind {
    /// `|c - c_ref|`.
    Cma,
    /// `|c x - s|`.
    Csa,
}

/// CMA or CSA loss; `c_ref` defaults to `s/x`.
pub fn complex_loss(
    kind: ComplexKind,
    norm: Norm,
    c_out: &TfGrid<C64>,
    x: &TfGrid<C64>,
    s: &TfGrid<C64>,
    c_ref: Option<&TfGrid<C64>>,
) -> Result<LossValue> {
    c_out.check_shape(x, "complex_loss mask")?;
    s.check_shape(x, "complex_loss source")?;
    let value = match kind {
        ComplexKind::Csa => c_out.iter().zip(x.iter()).zip(s.iter()).map(|((&c, &xv), &sv)| norm.apply((c * xv - sv).norm())).sum(),
        ComplexKind::Cma => {
            let default_ref;
            let c_ref = match c_ref {
                Some(r) => {
                    r.check_shape(x, "complex_loss reference")?;
                    r
                }
                None => {
                    default_ref = s.zip_map(x, |&sv, &xv| ratio(sv, xv).unwrap_or_default())?;
                    &default_ref
                }
            };
            c_out.iter().zip(c_ref.iter()).map(|(&c, &r)| norm.apply((c - r).norm())).sum()
        }
    };
    Ok(LossValue::new(value))
}

/// `sum_{t,f} sum_{i,j} p(m_i) p(theta_j) |m_i e^{i theta_j} x - s|`
/// (penalty given by `norm`), with independent magnitude and phase heads.
pub fn expected_csa_loss(
    mag_probs: &MaskProbabilities,
    phase_probs: &MaskProbabilities,
    magbook: &Magbook,
    phasebook: &Phasebook,
    x: &TfGrid<C64>,
    s: &TfGrid<C64>,
    norm: Norm,
) -> Result<LossValue> {
    s.check_shape(x, "expected_csa_loss")?;
    if mag_probs.shape() != x.shape() || phase_probs.shape() != x.shape() {
        return shape("expected_csa_loss probability shapes");
    }
    if mag_probs.size() != magbook.atoms().len() || phase_probs.size() != phasebook.atoms().len() {
        return shape("expected_csa_loss codebook sizes");
    }
    let phasors = phasebook.phasors();
    let mut value = 0.0;
    for t in 0..x.frames() {
        for f in 0..x.bins() {
            let (xv, sv) = (x[(t, f)], s[(t, f)]);
            let pm = mag_probs.bin(t, f);
            let pp = phase_probs.bin(t, f);
            for (i, &m) in magbook.atoms().iter().enumerate() {
                if pm[i] == 0.0 {
                    continue;
                }
                for (j, &ph) in phasors.iter().enumerate() {
                    if pp[j] != 0.0 {
                        value += pm[i] * pp[j] * norm.apply((ph * m * xv - sv).norm());
                    }
                }
            }
        }
    }
    Ok(LossValue::new(value))
}

/// Expected CSA loss for a combook head.
pub fn expected_csa_loss_combook(probs: &MaskProbabilities, combook: &Combook, x: &TfGrid<C64>, s: &TfGrid<C64>, norm: Norm) -> Result<LossValue> {
    s.check_shape(x, "expected_csa_loss_combook")?;
    if probs.shape() != x.shape() || probs.size() != combook.atoms().len() {
        return shape("expected_csa_loss_combook probability shape");
    }
    let mut value = 0.0;
    for t in 0..x.frames() {
        for f in 0..x.bins() {
            for (&p, &c) in probs.bin(t, f).iter().zip(combook.atoms()) {
                value += p * norm.apply((c * x[(t, f)] - s[(t, f)]).norm());
            }
        }
    }
    Ok(LossValue::new(value))
}

/// `sum_l |estimate[l] - reference[l]|` under `norm`.
pub fn waveform_loss(estimate: &[f64], reference: &[f64], norm: Norm) -> Result<LossValue> {
    if estimate.len() != reference.len() {
        return shape(format!("waveform lengths {} vs {}", estimate.len(), reference.len()));
    }
    Ok(LossValue::new(estimate.iter().zip(reference).map(|(a, b)| norm.apply(a - b)).sum()))
}

/// Time-domain estimates from complex masks: the plain inverse STFT of
/// `c_i x` when `iterations == 0`, otherwise MISI on the masked magnitudes
/// initialised with the masked phases.
pub fn reconstruct_sources(masks: &[ComplexMask], x: &TfGrid<C64>, x_time: &[f64], iterations: usize, plan: &StftPlan) -> Result<Vec<Vec<f64>>> {
    let specs: Vec<TfGrid<C64>> = masks
        .iter()
        .map(|m| m.values.zip_map(x, |&c, &xv| c * xv))
        .collect::<Result<_>>()?;
    if iterations == 0 {
        return specs.iter().map(|y| plan.synthesize(y, x_time.len())).collect();
    }
    let mags: Vec<_> = specs.iter().map(|y| y.map(|z| z.norm())).collect();
    let phases: Vec<_> = specs.iter().map(|y| y.map(|&z| wrapped_angle(z))).collect();
    Ok(misi(&mags, &phases, x_time, MisiConfig::new(iterations), plan)?.sources)
}

/// Waveform approximation loss after `iterations` MISI steps (plain
/// inverse STFT at 0), summed over sources in the given order.
pub fn wa_loss(
    masks: &[ComplexMask],
    x: &TfGrid<C64>,
    x_time: &[f64],
    s_time: &[Vec<f64>],
    norm: Norm,
    iterations: usize,
    plan: &StftPlan,
) -> Result<LossValue> {
    if masks.len() != s_time.len() {
        return shape(format!("{} masks for {} references", masks.len(), s_time.len()));
    }
    let est = reconstruct_sources(masks, x, x_time, iterations, plan)?;
    est.iter().zip(s_time).map(|(e, r)| waveform_loss(e, r, norm)).sum()
}

/// Whitened k-means loss
/// `D - tr((V^T V)^{-1} V^T Y (Y^T Y)^{-1} Y^T V)` for embeddings `V`
/// (rows are bins) and one-hot labels `Y`.
pub fn dc_whitened_kmeans_loss(v: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<LossValue> {
    if v.nrows() != y.nrows() {
        return shape(format!("{} embeddings for {} labels", v.nrows(), y.nrows()));
    }
    if v.ncols() == 0 || v.nrows() == 0 {
        return Err(Error::Empty("embedding matrix".into()));
    }
    if v.iter().any(|a| !a.is_finite()) {
        return invalid("embeddings must be finite");
    }
    for r in 0..y.nrows() {
        let row = y.row(r);
        let ones = row.iter().filter(|&&a| a == 1.0).count();
        let zeros = row.iter().filter(|&&a| a == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return invalid(format!("label row {r} is not one-hot"));
        }
    }
    let d = v.ncols();
    let mut flagged = 0;
    let mut vtv = v.transpose() * v;
    let eig = vtv.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 1e-12 * max) {
        flagged = 1;
        for i in 0..d {
            vtv[(i, i)] += DC_RIDGE;
        }
    }
    let vtv_inv = vtv
        .cholesky()
        .ok_or_else(|| Error::Numerical("V^T V is not positive definite".into()))?
        .inverse();
    // (Y^T Y) is diagonal with the class counts; empty classes drop out.
    let counts: Vec<f64> = (0..y.ncols()).map(|c| y.column(c).sum()).collect();
    let vty = v.transpose() * y;
    let mut scaled = vty.clone();
    for (c, &n) in counts.iter().enumerate() {
        let w = if n > 0.0 { 1.0 / n } else { 0.0 };
        scaled.column_mut(c).scale_mut(w);
    }
    let trace = (vtv_inv * scaled * vty.transpose()).trace();
    Ok(LossValue {
        value: d as f64 - trace,
        flagged,
    })
}

/// `alpha * dc + (1 - alpha) * mi`.
pub fn chimera_loss(dc: LossValue, mi: LossValue, alpha: f64) -> Result<LossValue> {
    if !(0.0..=1.0).contains(&alpha) {
        return invalid(format!("chimera weight must lie in [0, 1], got {alpha}"));
    }
    Ok(LossValue {
        value: alpha * dc.value + (1.0 - alpha) * mi.value,
        flagged: dc.flagged + mi.flagged,
    })
}

/// Assignment of estimates to references. `perm[i]` is the reference
/// matched with estimate `i`.
pub type Permutation = Vec<usize>;

/// Minimum over permutations of `sum_i cost[i][perm[i]]` given a square
/// cost matrix. Ties keep the lexicographically first permutation.
pub fn permutation_min_matrix(cost: &[Vec<f64>]) -> Result<(f64, Permutation)> {
    let n = cost.len();
    if n == 0 {
        return Err(Error::Empty("permutation search over zero sources".into()));
    }
    if n > MAX_PERMUTATION_SOURCES {
        return invalid(format!("exhaustive permutation search supports at most {MAX_PERMUTATION_SOURCES} sources"));
    }
    if cost.iter().any(|row| row.len() != n) {
        return shape("permutation cost matrix must be square");
    }
    let mut best = (f64::INFINITY, (0..n).collect::<Vec<_>>());
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &r)| cost[i][r]).sum();
        if total < best.0 {
            best = (total, perm);
        }
    }
    Ok(best)
}

/// Permutation-free loss: evaluates `loss(estimate_i, reference_r)` for all
/// pairs and returns the smallest total with its permutation.
pub fn permutation_min<E, R>(
    mut loss: impl FnMut(&E, &R) -> Result<LossValue>,
    estimates: &[E],
    references: &[R],
) -> Result<(LossValue, Permutation)> {
    if estimates.len() != references.len() {
        return shape(format!("{} estimates for {} references", estimates.len(), references.len()));
    }
    let pairs: Vec<Vec<LossValue>> = estimates
        .iter()
        .map(|e| references.iter().map(|r| loss(e, r)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let cost: Vec<Vec<f64>> = pairs.iter().map(|row| row.iter().map(|l| l.value).collect()).collect();
    let (_, perm) = permutation_min_matrix(&cost)?;
    let total = perm.iter().enumerate().map(|(i, &r)| pairs[i][r]).sum();
    Ok((total, perm))
}

/// Mean of a per-bin loss over frames, for reporting across lengths.
pub fn per_frame(loss: LossValue, frames: usize) -> f64 {
    loss.value / frames.max(1) as f64
}

/// Phase-sensitive target `|s| cos(angle(s/x)) / |x|` used as a sanity
/// reference in tests and reports.
pub fn phase_sensitive_target(s: &TfGrid<C64>, x: &TfGrid<C64>) -> Result<TfGrid<f64>> {
    let (theta, _) = phase_difference(s, x)?;
    let amp = amplitude_ratio(s, x)?;
    amp.zip_map(&theta, |a, t| a * t.cos())
}

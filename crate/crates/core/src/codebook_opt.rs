//! Offline codebook optimization under the argmax scheme.
//!
//! * Phasebook: EM on `sum min_j |m e^{i theta_j} x - s|^2`. The E-step picks
//!   the closest atom per bin, the M-step sets each atom to
//!   `angle(sum m |x|^2 s/x)` over its bins.
//! * Magbook + phasebook: coordinate descent cycling through magbook values,
//!   magbook assignments, phasebook assignments and phasebook values.
//! * Combook: weighted k-means on the ratios `s/x` with weights `|x|^2`.
//!
//! Every step can only lower its objective, and the reports record the value
//! after each step so that callers can check it.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;

use crate::codebook::{Combook, Magbook, Phasebook};
use crate::error::{invalid, shape, Error, Result};
use crate::oracle_masks::{ratio, wrap_phase, wrapped_angle};
use crate::signal::C64;
use crate::tf::TfGrid;

/// Per-bin codebook indices for one utterance.
pub type AssignmentMap = TfGrid<usize>;

/// Reference source and mixture spectrograms for one target.
#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub source: TfGrid<C64>,
    pub mixture: TfGrid<C64>,
}

impl CorpusItem {
    pub fn new(source: TfGrid<C64>, mixture: TfGrid<C64>) -> Result<Self> {
        source.check_shape(&mixture, "corpus item")?;
        Ok(Self { source, mixture })
    }
}

/// Where the magnitude mask used during phasebook training comes from.
#[derive(Clone, Debug)]
pub enum MagnitudeSource {
    /// `min(|s/x|, r_max)`.
    OracleIam { r_max: f64 },
    /// One non-negative magnitude grid per corpus item.
    Provided(Vec<TfGrid<f64>>),
}

/// Objective trace of an optimization run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptReport {
    /// Objective before the first epoch followed by one value per epoch.
    pub epoch_objective: Vec<f64>,
    /// Objective after every individual assignment or update step.
    pub step_objective: Vec<f64>,
    /// Atom values at the start and after each epoch. Phasebooks list their
    /// angles, joint runs list magbook values then phasebook angles, and
    /// combooks list `re, im` pairs.
    pub atoms_per_epoch: Vec<Vec<f64>>,
    pub epochs_run: usize,
    /// Assignments stopped changing before the epoch budget ran out.
    pub converged: bool,
}

impl OptReport {
    pub fn final_objective(&self) -> f64 {
        *self.epoch_objective.last().unwrap_or(&f64::NAN)
    }

    /// Largest relative increase between consecutive steps (0 if monotone).
    pub fn max_relative_increase(&self) -> f64 {
        self.step_objective
            .windows(2)
            .map(|w| (w[1] - w[0]) / w[0].abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug)]
struct Bin {
    x: C64,
    s: C64,
    m: f64,
}

impl Bin {
    /// `s * conj(x)`, i.e. `|x|^2 s/x`.
    fn cross(&self) -> C64 {
        self.s * self.x.conj()
    }

    fn weight(&self) -> f64 {
        self.x.norm_sqr()
    }

    fn ratio(&self) -> C64 {
        ratio(self.s, self.x).unwrap_or(C64::new(0.0, 0.0))
    }

    fn error(&self, mask: C64) -> f64 {
        (mask * self.x - self.s).norm_sqr()
    }
}

/// Flattened corpus with per-item offsets.
struct Flat {
    bins: Vec<Bin>,
    shapes: Vec<(usize, usize)>,
}

impl Flat {
    fn new(corpus: &[CorpusItem], magnitude: Option<&MagnitudeSource>) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("codebook optimization corpus".into()));
        }
        if let Some(MagnitudeSource::Provided(m)) = magnitude {
            if m.len() != corpus.len() {
                return shape(format!("{} magnitude grids for {} corpus items", m.len(), corpus.len()));
            }
        }
        let mut bins = Vec::new();
        let mut shapes = Vec::with_capacity(corpus.len());
        for (u, item) in corpus.iter().enumerate() {
            item.source.check_shape(&item.mixture, "corpus item")?;
            shapes.push(item.mixture.shape());
            for (b, (&s, &x)) in item.source.iter().zip(item.mixture.iter()).enumerate() {
                let m = match magnitude {
                    None => 1.0,
                    Some(MagnitudeSource::OracleIam { r_max }) => ratio(s, x).map_or(0.0, |r| r.norm().min(*r_max)),
                    Some(MagnitudeSource::Provided(grids)) => {
                        let g = &grids[u];
                        item.mixture.check_shape(g, "provided magnitude")?;
                        let m = g.as_slice()[b];
                        if !(m >= 0.0) || !m.is_finite() {
                            return invalid(format!("provided magnitude {m} must be finite and non-negative"));
                        }
                        m
                    }
                };
                bins.push(Bin { x, s, m });
            }
        }
        Ok(Self { bins, shapes })
    }

    fn split(&self, flat: &[usize]) -> Vec<AssignmentMap> {
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut offset = 0;
        for &(t, f) in &self.shapes {
            out.push(TfGrid::from_vec(t, f, flat[offset..offset + t * f].to_vec()).expect("sizes agree"));
            offset += t * f;
        }
        out
    }
}

/// Atom index minimizing `|m e^{i theta_j} x - s|`, i.e. maximizing
/// `m cos(theta_j - angle(s/x))`. Lowest index wins ties.
fn best_phase(m: f64, cross: C64, phasors: &[C64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (j, p) in phasors.iter().enumerate() {
        let score = m * (*p * cross.conj()).re;
        if score > best_score {
            best = j;
            best_score = score;
        }
    }
    best
}

/// Atom index minimizing `|m_i - target|`, lowest index on ties.
fn nearest_real(atoms: &[f64], target: f64) -> usize {
    let mut best = 0;
    for (i, &a) in atoms.iter().enumerate().skip(1) {
        if (a - target).abs() < (atoms[best] - target).abs() {
            best = i;
        }
    }
    best
}

fn nearest_complex(atoms: &[C64], target: C64) -> usize {
    let mut best = 0;
    for (i, &a) in atoms.iter().enumerate().skip(1) {
        if (a - target).norm_sqr() < (atoms[best] - target).norm_sqr() {
            best = i;
        }
    }
    best
}

/// Per-bin phasebook assignment: the atom maximizing
/// `cos(theta_j - angle(s/x))`, independent of any non-negative magnitude.
pub fn phasebook_assign(phasebook: &Phasebook, s: &TfGrid<C64>, x: &TfGrid<C64>) -> Result<AssignmentMap> {
    s.check_shape(x, "phasebook_assign")?;
    if phasebook.atoms().is_empty() {
        return Err(Error::Empty("phasebook".into()));
    }
    let phasors = phasebook.phasors();
    s.zip_map(x, |&sv, &xv| best_phase(1.0, sv * xv.conj(), &phasors))
}

/// M-step: each used atom becomes `angle(sum m |x|^2 s/x)` over the bins
/// assigned to it; atoms without bins (or with a zero sum) are unchanged.
pub fn phasebook_update(
    phasebook: &Phasebook,
    assignments: &[AssignmentMap],
    corpus: &[CorpusItem],
    magnitude: &MagnitudeSource,
) -> Result<Phasebook> {
    let flat = Flat::new(corpus, Some(magnitude))?;
    let assign = flatten_assignments(&flat, assignments, phasebook.atoms().len())?;
    Ok(update_phases(phasebook.atoms(), &flat.bins, &assign, |_, b| b.m))
}

/// `sum |m e^{i theta_{a(t,f)}} x - s|^2` for fixed assignments.
pub fn phasebook_objective(
    phasebook: &Phasebook,
    assignments: &[AssignmentMap],
    corpus: &[CorpusItem],
    magnitude: &MagnitudeSource,
) -> Result<f64> {
    let flat = Flat::new(corpus, Some(magnitude))?;
    let assign = flatten_assignments(&flat, assignments, phasebook.atoms().len())?;
    let phasors = phasebook.phasors();
    Ok(flat
        .bins
        .iter()
        .zip(&assign)
        .map(|(b, &j)| b.error(phasors[j] * b.m))
        .sum())
}

fn flatten_assignments(flat: &Flat, assignments: &[AssignmentMap], size: usize) -> Result<Vec<usize>> {
    if assignments.len() != flat.shapes.len() {
        return shape(format!("{} assignment maps for {} items", assignments.len(), flat.shapes.len()));
    }
    let mut out = Vec::with_capacity(flat.bins.len());
    for (a, &sh) in assignments.iter().zip(&flat.shapes) {
        if a.shape() != sh {
            return shape(format!("assignment map {:?} vs item {:?}", a.shape(), sh));
        }
        if let Some(&bad) = a.iter().find(|&&j| j >= size) {
            return invalid(format!("assignment index {bad} out of range for {size} atoms"));
        }
        out.extend_from_slice(a.as_slice());
    }
    Ok(out)
}

fn update_phases(atoms: &[f64], bins: &[Bin], assign: &[usize], magnitude: impl Fn(usize, &Bin) -> f64) -> Phasebook {
    let mut sums = vec![C64::new(0.0, 0.0); atoms.len()];
    for (k, (b, &j)) in bins.iter().zip(assign).enumerate() {
        sums[j] += b.cross() * magnitude(k, b);
    }
    let new_atoms = atoms
        .iter()
        .zip(&sums)
        .map(|(&a, z)| if z.norm() > 0.0 { wrapped_angle(*z) } else { a })
        .collect();
    Phasebook::from_atoms_unchecked(new_atoms)
}

fn assign_phases(bins: &[Bin], phasors: &[C64], magnitude: impl Fn(usize, &Bin) -> f64 + Sync) -> Vec<usize> {
    bins.par_iter()
        .enumerate()
        .map(|(i, b)| best_phase(magnitude(i, b), b.cross(), phasors))
        .collect()
}

/// EM optimization of a phasebook for a given magnitude estimate.
///
/// Runs at most `epochs` epochs (each an M-step followed by an E-step) and
/// stops early once the assignments no longer change.
pub fn optimize_phasebook(
    init: &Phasebook,
    corpus: &[CorpusItem],
    magnitude: &MagnitudeSource,
    epochs: usize,
) -> Result<(Phasebook, OptReport)> {
    let flat = Flat::new(corpus, Some(magnitude))?;
    let bins = &flat.bins;
    let objective = |pb: &Phasebook, assign: &[usize]| -> f64 {
        let ph = pb.phasors();
        bins.iter().zip(assign).map(|(b, &j)| b.error(ph[j] * b.m)).sum()
    };
    let mut pb = init.clone();
    let mut assign = assign_phases(bins, &pb.phasors(), |_, b| b.m);
    let j0 = objective(&pb, &assign);
    let mut report = OptReport {
        epoch_objective: vec![j0],
        step_objective: vec![j0],
        atoms_per_epoch: vec![pb.atoms().to_vec()],
        ..Default::default()
    };
    for _ in 0..epochs {
        pb = update_phases(pb.atoms(), bins, &assign, |_, b| b.m);
        report.step_objective.push(objective(&pb, &assign));
        let next = assign_phases(bins, &pb.phasors(), |_, b| b.m);
        let j = objective(&pb, &next);
        report.step_objective.push(j);
        report.epoch_objective.push(j);
        report.atoms_per_epoch.push(pb.atoms().to_vec());
        report.epochs_run += 1;
        let unchanged = next == assign;
        assign = next;
        if unchanged {
            report.converged = true;
            break;
        }
    }
    Ok((pb, report))
}

/// Joint argmax optimization of a magbook and a phasebook on
/// `sum |m_i e^{i theta_j} x - s|^2`.
pub fn optimize_magbook_phasebook(
    init_m: &Magbook,
    init_p: &Phasebook,
    corpus: &[CorpusItem],
    epochs: usize,
) -> Result<(Magbook, Phasebook, OptReport)> {
    let flat = Flat::new(corpus, None)?;
    let bins = &flat.bins;
    let mut mags = init_m.atoms().to_vec();
    let mut pb = init_p.clone();

    // Rotated ratio Re((s/x) e^{-i theta}) is the best real magnitude for a given phase.
    let rotated = |b: &Bin, theta: f64| (b.ratio() * C64::from_polar(1.0, -theta)).re;
    let objective = |mags: &[f64], pb: &Phasebook, ia: &[usize], ja: &[usize]| -> f64 {
        let ph = pb.phasors();
        bins.iter()
            .zip(ia.iter().zip(ja))
            .map(|(b, (&i, &j))| b.error(ph[j] * mags[i]))
            .sum()
    };
    let assign_mags = |mags: &[f64], pb: &Phasebook, ja: &[usize]| -> Vec<usize> {
        bins.par_iter()
            .zip(ja.par_iter())
            .map(|(b, &j)| nearest_real(mags, rotated(b, pb.atoms()[j])))
            .collect()
    };

    let mut ja = assign_phases(bins, &pb.phasors(), |_, _| 1.0);
    let mut ia = assign_mags(&mags, &pb, &ja);
    let j0 = objective(&mags, &pb, &ia, &ja);
    let snapshot = |mags: &[f64], pb: &Phasebook| [mags, pb.atoms()].concat();
    let mut report = OptReport {
        epoch_objective: vec![j0],
        step_objective: vec![j0],
        atoms_per_epoch: vec![snapshot(&mags, &pb)],
        ..Default::default()
    };
    for _ in 0..epochs {
        // magbook values: weighted mean of the rotated ratios
        let mut num = vec![0.0; mags.len()];
        let mut den = vec![0.0; mags.len()];
        for (b, (&i, &j)) in bins.iter().zip(ia.iter().zip(&ja)) {
            num[i] += b.weight() * rotated(b, pb.atoms()[j]);
            den[i] += b.weight();
        }
        for i in 0..mags.len() {
            if den[i] > 0.0 {
                mags[i] = num[i] / den[i];
            }
        }
        report.step_objective.push(objective(&mags, &pb, &ia, &ja));

        let next_ia = assign_mags(&mags, &pb, &ja);
        report.step_objective.push(objective(&mags, &pb, &next_ia, &ja));

        let next_ja = assign_phases(bins, &pb.phasors(), |k, _| mags[next_ia[k]]);
        report.step_objective.push(objective(&mags, &pb, &next_ia, &next_ja));

        pb = update_phases(pb.atoms(), bins, &next_ja, |k, _| mags[next_ia[k]]);
        let j = objective(&mags, &pb, &next_ia, &next_ja);
        report.step_objective.push(j);
        report.epoch_objective.push(j);
        report.atoms_per_epoch.push(snapshot(&mags, &pb));
        report.epochs_run += 1;

        let unchanged = next_ia == ia && next_ja == ja;
        ia = next_ia;
        ja = next_ja;
        if unchanged {
            report.converged = true;
            break;
        }
    }
    Ok((Magbook::from_atoms_unchecked(mags), pb, report))
}

/// Ratio `s/x` with its modulus truncated to `r_max`, and weight `|x|^2`.
fn clamped_points(bins: &[Bin], r_max: f64) -> Vec<(C64, f64)> {
    bins.iter()
        .map(|b| {
            let r = b.ratio();
            let m = r.norm();
            let r = if m > r_max { r * (r_max / m) } else { r };
            (r, b.weight())
        })
        .collect()
}

/// Weighted k-means of the clamped ratios `s/x` with weights `|x|^2`.
///
/// A centroid that loses all its points is moved to the point that
/// currently contributes most to the objective.
pub fn optimize_combook(init: &Combook, corpus: &[CorpusItem], r_max: f64, epochs: usize) -> Result<(Combook, OptReport)> {
    if !(r_max > 0.0) {
        return invalid(format!("r_max must be positive, got {r_max}"));
    }
    let flat = Flat::new(corpus, None)?;
    let points = clamped_points(&flat.bins, r_max);
    let mut atoms = init.atoms().to_vec();
    let objective = |atoms: &[C64], assign: &[usize]| -> f64 {
        points.iter().zip(assign).map(|(&(r, w), &k)| w * (atoms[k] - r).norm_sqr()).sum()
    };
    let assign_all = |atoms: &[C64]| -> Vec<usize> { points.par_iter().map(|&(r, _)| nearest_complex(atoms, r)).collect() };
    let snapshot = |atoms: &[C64]| atoms.iter().flat_map(|c| [c.re, c.im]).collect::<Vec<_>>();

    let mut assign = assign_all(&atoms);
    let j0 = objective(&atoms, &assign);
    let mut report = OptReport {
        epoch_objective: vec![j0],
        step_objective: vec![j0],
        atoms_per_epoch: vec![snapshot(&atoms)],
        ..Default::default()
    };
    for _ in 0..epochs {
        let mut num = vec![C64::new(0.0, 0.0); atoms.len()];
        let mut den = vec![0.0; atoms.len()];
        for (&(r, w), &k) in points.iter().zip(&assign) {
            num[k] += r * w;
            den[k] += w;
        }
        let mut taken = vec![false; points.len()];
        for k in 0..atoms.len() {
            if den[k] > 0.0 {
                atoms[k] = num[k] / den[k];
            }
        }
        for k in 0..atoms.len() {
            if den[k] > 0.0 {
                continue;
            }
            let far = points
                .iter()
                .zip(&assign)
                .enumerate()
                .filter(|(i, (p, _))| !taken[*i] && p.1 > 0.0)
                .map(|(i, (&(r, w), &a))| (i, w * (atoms[a] - r).norm_sqr()))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, d)) = far {
                if d > 0.0 {
                    taken[i] = true;
                    atoms[k] = points[i].0;
                }
            }
        }
        report.step_objective.push(objective(&atoms, &assign));
        let next = assign_all(&atoms);
        let j = objective(&atoms, &next);
        report.step_objective.push(j);
        report.epoch_objective.push(j);
        report.atoms_per_epoch.push(snapshot(&atoms));
        report.epochs_run += 1;
        let unchanged = next == assign;
        assign = next;
        if unchanged {
            report.converged = true;
            break;
        }
    }
    Ok((Combook::from_atoms_unchecked(atoms), report))
}

/// `{2 p pi / P}` mapped into `(-pi, pi]`; always contains 0.
pub fn uniform_phasebook(size: usize) -> Result<Phasebook> {
    if size < 2 {
        return invalid(format!("uniform phasebook needs P >= 2, got {size}"));
    }
    Phasebook::new((0..size).map(|p| wrap_phase(2.0 * PI * p as f64 / size as f64)).collect())
}

fn weighted_draws<T: PartialEq + Copy>(
    candidates: &[(T, f64)],
    count: usize,
    seed: u64,
) -> Result<Vec<T>> {
    let dist = WeightedIndex::new(candidates.iter().map(|c| c.1))
        .map_err(|e| Error::InvalidArgument(format!("cannot sample from data: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<T> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        let v = candidates[dist.sample(&mut rng)].0;
        if !out.contains(&v) {
            out.push(v);
        }
        attempts += 1;
        if attempts > 1000 * count {
            return invalid(format!("data has fewer than {count} distinct values"));
        }
    }
    Ok(out)
}

/// Phasebook whose atoms are phase differences drawn from the corpus with
/// probability proportional to `|x|^2`.
pub fn random_phasebook(corpus: &[CorpusItem], size: usize, seed: u64) -> Result<Phasebook> {
    let flat = Flat::new(corpus, None)?;
    let cands: Vec<(f64, f64)> = flat.bins.iter().map(|b| (wrapped_angle(b.cross()), b.weight())).collect();
    Phasebook::new(weighted_draws(&cands, size, seed)?)
}

/// Magbook whose atoms are truncated amplitude ratios drawn from the corpus.
pub fn random_magbook(corpus: &[CorpusItem], size: usize, r_max: f64, seed: u64) -> Result<Magbook> {
    let flat = Flat::new(corpus, None)?;
    let cands: Vec<(f64, f64)> = flat.bins.iter().map(|b| (b.ratio().norm().min(r_max), b.weight())).collect();
    Magbook::new(weighted_draws(&cands, size, seed)?)
}

/// Combook whose atoms are truncated complex ratios drawn from the corpus.
pub fn random_combook(corpus: &[CorpusItem], size: usize, r_max: f64, seed: u64) -> Result<Combook> {
    let flat = Flat::new(corpus, None)?;
    let cands = clamped_points(&flat.bins, r_max);
    Combook::new(weighted_draws(&cands, size, seed)?)
}

/// Assignments of every corpus bin to its nearest combook atom (L2 on `s/x`).
pub fn combook_assign(combook: &Combook, s: &TfGrid<C64>, x: &TfGrid<C64>) -> Result<AssignmentMap> {
    s.zip_map(x, |&sv, &xv| nearest_complex(combook.atoms(), ratio(sv, xv).unwrap_or_default()))
}

/// Phasebook assignments for every item of a corpus.
pub fn phasebook_assign_corpus(phasebook: &Phasebook, corpus: &[CorpusItem]) -> Result<Vec<AssignmentMap>> {
    let flat = Flat::new(corpus, None)?;
    let assign = assign_phases(&flat.bins, &phasebook.phasors(), |_, _| 1.0);
    Ok(flat.split(&assign))
}

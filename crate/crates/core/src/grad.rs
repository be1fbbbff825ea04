//! Reverse-mode gradients of codebook mask models.
//!
//! The model holds free per-bin logits for every source (a magnitude head
//! plus an optional phase head, or a single combook head) and optionally
//! trainable codebook atoms. Masks come from expected-value interpolation;
//! the phase of a phasebook head is the angle of `sum_j q_j e^{i theta_j}`.
//!
//! Complex gradients follow the convention `dL/dRe + i dL/dIm`, so that the
//! directional derivative along `dz` is `Re(conj(g) dz)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

use crate::codebook::{softmax_into, Combook, Magbook, Phasebook};
use crate::error::{invalid, shape, Error, Result};
use crate::losses::{permutation_min_matrix, spectral_residual, LossValue, Norm, Permutation, SpectralKind};
use crate::metrics::evaluate_utterance;
use crate::oracle_masks::{ratio, wrapped_angle, ComplexMask};
use crate::signal::{StftPlan, C64};
use crate::tf::TfGrid;

/// Bins whose phase resultant is shorter than this get no phase gradient.
pub const GRAD_DEGENERACY_EPS: f64 = 1e-8;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Codebooks of a model.
#[derive(Clone, Debug, PartialEq)]
pub enum Representation {
    /// Real magnitude mask; the mixture phase is kept.
    Magnitude(Magbook),
    MagPhase(Magbook, Phasebook),
    Complex(Combook),
}

impl Representation {
    fn primary_size(&self) -> usize {
        match self {
            Representation::Magnitude(m) | Representation::MagPhase(m, _) => m.atoms().len(),
            Representation::Complex(c) => c.atoms().len(),
        }
    }

    fn phase_size(&self) -> usize {
        match self {
            Representation::MagPhase(_, p) => p.atoms().len(),
            _ => 0,
        }
    }

    fn atom_params(&self) -> Vec<f64> {
        match self {
            Representation::Magnitude(m) => m.atoms().to_vec(),
            Representation::MagPhase(m, p) => [m.atoms(), p.atoms()].concat(),
            Representation::Complex(c) => c.atoms().iter().flat_map(|z| [z.re, z.im]).collect(),
        }
    }

    fn with_atom_params(&self, v: &[f64]) -> Representation {
        match self {
            Representation::Magnitude(_) => Representation::Magnitude(Magbook::from_atoms_unchecked(v.to_vec())),
            Representation::MagPhase(m, _) => {
                let k = m.atoms().len();
                Representation::MagPhase(
                    Magbook::from_atoms_unchecked(v[..k].to_vec()),
                    Phasebook::from_atoms_unchecked(v[k..].to_vec()),
                )
            }
            Representation::Complex(_) => {
                Representation::Complex(Combook::from_atoms_unchecked(v.chunks_exact(2).map(|c| C64::new(c[0], c[1])).collect()))
            }
        }
    }

    /// Projection of a complex ratio onto the set of values the
    /// interpolated representation can produce.
    pub fn project(&self, r: C64) -> C64 {
        match self {
            Representation::Magnitude(m) => C64::new(r.re.clamp(m.min_atom(), m.max_atom()), 0.0),
            Representation::MagPhase(m, p) => {
                let mag = r.norm().clamp(m.min_atom().max(0.0), m.max_atom());
                C64::from_polar(mag, project_angle(p.atoms(), wrapped_angle(r)))
            }
            Representation::Complex(c) => project_onto_hull(c.atoms(), r),
        }
    }
}

/// Nearest achievable angle of a convex combination of the given phasors.
fn project_angle(atoms: &[f64], target: f64) -> f64 {
    let mut sorted: Vec<f64> = atoms.iter().map(|&a| wrapped_angle(C64::from_polar(1.0, a))).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // largest gap between consecutive atoms around the circle
    let (mut gap, mut after) = (0.0, 0);
    for k in 0..n {
        let next = if k + 1 < n { sorted[k + 1] } else { sorted[0] + std::f64::consts::TAU };
        if next - sorted[k] > gap {
            gap = next - sorted[k];
            after = (k + 1) % n;
        }
    }
    if gap < std::f64::consts::PI {
        return target;
    }
    // atoms span the arc from `start` counter-clockwise to `end`
    let start = sorted[after];
    let end = sorted[(after + n - 1) % n];
    let rel = |a: f64| (a - start).rem_euclid(std::f64::consts::TAU);
    let width = rel(end);
    let t = rel(target);
    if t <= width {
        return target;
    }
    let to_end = t - width;
    let to_start = std::f64::consts::TAU - t;
    if to_end <= to_start {
        end
    } else {
        start
    }
}

fn cross(o: C64, a: C64, b: C64) -> f64 {
    (a.re - o.re) * (b.im - o.im) - (a.im - o.im) * (b.re - o.re)
}

fn nearest_on_segment(a: C64, b: C64, p: C64) -> C64 {
    let d = b - a;
    let len = d.norm_sqr();
    if len == 0.0 {
        return a;
    }
    let t = (((p - a) * d.conj()).re / len).clamp(0.0, 1.0);
    a + d * t
}

/// Nearest point of the convex hull of `points` to `p`.
pub fn project_onto_hull(points: &[C64], p: C64) -> C64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    pts.dedup();
    if pts.len() == 1 {
        return pts[0];
    }
    // Andrew's monotone chain, counter-clockwise
    let mut hull: Vec<C64> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &C64>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &q in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    if hull.len() >= 3 && (0..hull.len()).all(|k| cross(hull[k], hull[(k + 1) % hull.len()], p) >= 0.0) {
        return p;
    }
    (0..hull.len())
        .map(|k| nearest_on_segment(hull[k], hull[(k + 1) % hull.len()], p))
        .min_by(|a, b| (a - p).norm_sqr().total_cmp(&(b - p).norm_sqr()))
        .unwrap_or(hull[0])
}

/// Logits of one source. `phase` is empty without a phase head.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceLogits {
    pub primary: Vec<f64>,
    pub phase: Vec<f64>,
}

/// How initial logits are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogitInit {
    /// Added to the logit of the phase atom closest to 0, so that the
    /// starting phase is the mixture phase.
    pub phase_bias: f64,
    /// Half-width of the uniform noise added to every logit.
    pub noise: f64,
    pub seed: u64,
}

impl Default for LogitInit {
    fn default() -> Self {
        Self {
            phase_bias: 2.0,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Free per-bin logits for each source plus the codebooks.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    frames: usize,
    bins: usize,
    pub repr: Representation,
    pub logits: Vec<SourceLogits>,
    pub train_atoms: bool,
}

/// Named contiguous slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub range: std::ops::Range<usize>,
}

impl Model {
    pub fn new(repr: Representation, frames: usize, bins: usize, sources: usize, init: LogitInit) -> Result<Self> {
        if sources == 0 || frames == 0 || bins == 0 {
            return invalid("model needs at least one source and one bin");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let (k, j) = (repr.primary_size(), repr.phase_size());
        let zero_atom = match &repr {
            Representation::MagPhase(_, p) => {
                (0..j).min_by(|&a, &b| p.atoms()[a].abs().total_cmp(&p.atoms()[b].abs())).unwrap_or(0)
            }
            _ => 0,
        };
        let mut noise = |n: usize| -> Vec<f64> {
            (0..n).map(|_| if init.noise > 0.0 { rng.gen_range(-init.noise..init.noise) } else { 0.0 }).collect()
        };
        let logits = (0..sources)
            .map(|_| {
                let primary = noise(frames * bins * k);
                let mut phase = noise(frames * bins * j);
                for b in 0..frames * bins {
                    if j > 0 {
                        phase[b * j + zero_atom] += init.phase_bias;
                    }
                }
                SourceLogits { primary, phase }
            })
            .collect();
        Ok(Self {
            frames,
            bins,
            repr,
            logits,
            train_atoms: false,
        })
    }

    /// Model with explicitly given logits.
    pub fn from_logits(repr: Representation, frames: usize, bins: usize, logits: Vec<SourceLogits>) -> Result<Self> {
        let (k, j) = (repr.primary_size(), repr.phase_size());
        if logits.is_empty() {
            return invalid("model needs at least one source");
        }
        for l in &logits {
            if l.primary.len() != frames * bins * k || l.phase.len() != frames * bins * j {
                return shape(format!("logit sizes {}/{} for {frames}x{bins} bins", l.primary.len(), l.phase.len()));
            }
            if l.primary.iter().chain(&l.phase).any(|v| v.is_nan() || *v == f64::INFINITY) {
                return invalid("logits must not be NaN or +inf");
            }
        }
        Ok(Self {
            frames,
            bins,
            repr,
            logits,
            train_atoms: false,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn sources(&self) -> usize {
        self.logits.len()
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize| {
            if len > 0 {
                out.push(ParamGroup {
                    name,
                    range: offset..offset + len,
                });
            }
            offset += len;
        };
        let primary = match self.repr {
            Representation::Complex(_) => "combook logits",
            _ => "magbook logits",
        };
        for (i, l) in self.logits.iter().enumerate() {
            push(format!("source {i} {primary}"), l.primary.len());
            push(format!("source {i} phasebook logits"), l.phase.len());
        }
        if self.train_atoms {
            match &self.repr {
                Representation::Magnitude(m) => push("magbook atoms".into(), m.atoms().len()),
                Representation::MagPhase(m, p) => {
                    push("magbook atoms".into(), m.atoms().len());
                    push("phasebook atoms".into(), p.atoms().len());
                }
                Representation::Complex(c) => push("combook atoms".into(), 2 * c.atoms().len()),
            }
        }
        out
    }

    /// Flat parameter vector: per source primary then phase logits, then
    /// the atoms when they are trainable (combook atoms as re, im pairs).
    pub fn params(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.logits.iter().flat_map(|l| l.primary.iter().chain(&l.phase).copied()).collect();
        if self.train_atoms {
            v.extend(self.repr.atom_params());
        }
        v
    }

    pub fn set_params(&mut self, v: &[f64]) -> Result<()> {
        let expected = self.params().len();
        if v.len() != expected {
            return shape(format!("{} parameters, model has {expected}", v.len()));
        }
        let mut offset = 0;
        for l in &mut self.logits {
            let (a, b) = (l.primary.len(), l.phase.len());
            l.primary.copy_from_slice(&v[offset..offset + a]);
            l.phase.copy_from_slice(&v[offset + a..offset + a + b]);
            offset += a + b;
        }
        if self.train_atoms {
            self.repr = self.repr.with_atom_params(&v[offset..]);
        }
        Ok(())
    }

    fn with_params(&self, v: &[f64]) -> Result<Model> {
        let mut m = self.clone();
        m.set_params(v)?;
        Ok(m)
    }

    fn heads(&self) -> Vec<Heads> {
        self.logits.iter().map(|l| Heads::forward(&self.repr, l, self.frames * self.bins)).collect()
    }

    /// Interpolated complex masks and the number of degenerate phase bins.
    pub fn masks(&self) -> (Vec<ComplexMask>, usize) {
        let heads = self.heads();
        let degenerate = heads.iter().map(|h| h.degenerate()).sum();
        let masks = heads
            .into_iter()
            .map(|h| ComplexMask {
                values: TfGrid::from_vec(self.frames, self.bins, h.c).expect("sizes agree"),
            })
            .collect();
        (masks, degenerate)
    }
}

/// Forward values of one source's heads, kept for the backward pass.
struct Heads {
    k: usize,
    j: usize,
    /// primary probabilities (bins x k)
    p: Vec<f64>,
    /// phase probabilities (bins x j)
    q: Vec<f64>,
    /// interpolated magnitude (magbook models)
    m: Vec<f64>,
    /// phase resultant and its normalization
    z: Vec<C64>,
    u: Vec<C64>,
    c: Vec<C64>,
    magbook: Vec<f64>,
    phasors: Vec<C64>,
    combook: Vec<C64>,
}

impl Heads {
    fn forward(repr: &Representation, logits: &SourceLogits, n: usize) -> Heads {
        let (k, j) = (repr.primary_size(), repr.phase_size());
        let mut p = vec![0.0; n * k];
        for (src, dst) in logits.primary.chunks(k).zip(p.chunks_mut(k)) {
            softmax_into(src, dst);
        }
        let mut q = vec![0.0; n * j];
        if j > 0 {
            for (src, dst) in logits.phase.chunks(j).zip(q.chunks_mut(j)) {
                softmax_into(src, dst);
            }
        }
        let (magbook, phasors, combook) = match repr {
            Representation::Magnitude(m) => (m.atoms().to_vec(), vec![], vec![]),
            Representation::MagPhase(m, ph) => (m.atoms().to_vec(), ph.phasors(), vec![]),
            Representation::Complex(cb) => (vec![], vec![], cb.atoms().to_vec()),
        };
        let mut h = Heads {
            k,
            j,
            p,
            q,
            m: vec![0.0; n],
            z: vec![C64::new(1.0, 0.0); n],
            u: vec![C64::new(1.0, 0.0); n],
            c: vec![ZERO; n],
            magbook,
            phasors,
            combook,
        };
        for b in 0..n {
            let pb = &h.p[b * k..(b + 1) * k];
            if h.combook.is_empty() {
                h.m[b] = pb.iter().zip(&h.magbook).map(|(p, a)| p * a).sum();
                if j > 0 {
                    let z: C64 = h.q[b * j..(b + 1) * j].iter().zip(&h.phasors).map(|(&q, &e)| e * q).sum();
                    h.z[b] = z;
                    h.u[b] = if z.norm() < crate::codebook::PHASE_DEGENERACY_EPS { C64::new(1.0, 0.0) } else { z / z.norm() };
                }
                h.c[b] = h.u[b] * h.m[b];
            } else {
                h.c[b] = pb.iter().zip(&h.combook).map(|(&p, &a)| a * p).sum();
            }
        }
        h
    }

    fn degenerate(&self) -> usize {
        if self.j == 0 {
            0
        } else {
            self.z.iter().filter(|z| z.norm() < GRAD_DEGENERACY_EPS).count()
        }
    }
}

/// Gradient accumulators for one source's heads.
struct HeadGrads {
    p: Vec<f64>,
    q: Vec<f64>,
    magbook: Vec<f64>,
    phasebook: Vec<f64>,
    combook: Vec<C64>,
}

impl HeadGrads {
    fn new(h: &Heads) -> Self {
        Self {
            p: vec![0.0; h.p.len()],
            q: vec![0.0; h.q.len()],
            magbook: vec![0.0; h.magbook.len()],
            phasebook: vec![0.0; h.phasors.len()],
            combook: vec![ZERO; h.combook.len()],
        }
    }

    /// Chain a gradient on the interpolated magnitude into `p` and atoms.
    fn add_magnitude(&mut self, h: &Heads, b: usize, g_m: f64) {
        let k = h.k;
        for i in 0..k {
            self.p[b * k + i] += g_m * h.magbook[i];
            self.magbook[i] += g_m * h.p[b * k + i];
        }
    }

    /// Chain a complex gradient on the mask value at bin `b`.
    fn add_mask(&mut self, h: &Heads, b: usize, g_c: C64) {
        if !h.combook.is_empty() {
            let k = h.k;
            for (i, &atom) in h.combook.iter().enumerate() {
                self.p[b * k + i] += (g_c.conj() * atom).re;
                self.combook[i] += g_c * h.p[b * k + i];
            }
            return;
        }
        let u = h.u[b];
        self.add_magnitude(h, b, (g_c * u.conj()).re);
        if h.j == 0 {
            return;
        }
        let z = h.z[b];
        let r = z.norm();
        if r < GRAD_DEGENERACY_EPS {
            return;
        }
        let g_u = g_c * h.m[b];
        let g_z = (g_u - u * (u.conj() * g_u).re) / r;
        let j = h.j;
        for (a, &e) in h.phasors.iter().enumerate() {
            let q = h.q[b * j + a];
            self.q[b * j + a] += (g_z.conj() * e).re;
            self.phasebook[a] += q * (g_z.conj() * C64::i() * e).re;
        }
    }

    /// Softmax backward and flattening into the model's parameter layout.
    fn logit_grads(&self, h: &Heads) -> (Vec<f64>, Vec<f64>) {
        let back = |probs: &[f64], g: &[f64], k: usize| -> Vec<f64> {
            if k == 0 {
                return vec![];
            }
            let mut out = vec![0.0; probs.len()];
            for ((p, g), o) in probs.chunks(k).zip(g.chunks(k)).zip(out.chunks_mut(k)) {
                let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                for i in 0..k {
                    o[i] = p[i] * (g[i] - dot);
                }
            }
            out
        };
        (back(&h.p, &self.p, h.k), back(&h.q, &self.q, h.j))
    }
}

/// Objective selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossSpec {
    Msa,
    Psa,
    Cma,
    Csa,
    /// Expected CSA under the interpolation distribution.
    ECsa,
    /// Waveform loss after the given number of unfolded MISI iterations.
    Wa { iterations: usize },
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSpec::Msa => f.write_str("MSA"),
            LossSpec::Psa => f.write_str("PSA"),
            LossSpec::Cma => f.write_str("CMA"),
            LossSpec::Csa => f.write_str("CSA"),
            LossSpec::ECsa => f.write_str("eCSA"),
            LossSpec::Wa { iterations: 0 } => f.write_str("WA"),
            LossSpec::Wa { iterations } => write!(f, "WA-MISI-{iterations}"),
        }
    }
}

impl FromStr for LossSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.to_ascii_uppercase();
        Ok(match up.as_str() {
            "MSA" => LossSpec::Msa,
            "PSA" => LossSpec::Psa,
            "CMA" => LossSpec::Cma,
            "CSA" => LossSpec::Csa,
            "ECSA" => LossSpec::ECsa,
            "WA" => LossSpec::Wa { iterations: 0 },
            other => match other.strip_prefix("WA-MISI-").map(str::parse) {
                Some(Ok(iterations)) => LossSpec::Wa { iterations },
                _ => return invalid(format!("unknown loss '{s}'")),
            },
        })
    }
}

/// Loss plus norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Objective {
    pub loss: LossSpec,
    pub norm: Norm,
}

/// Mixture and reference sources of one utterance.
#[derive(Clone, Debug)]
pub struct Problem {
    pub plan: StftPlan,
    pub x: TfGrid<C64>,
    pub x_time: Vec<f64>,
    pub s: Vec<TfGrid<C64>>,
    pub s_time: Vec<Vec<f64>>,
}

impl Problem {
    /// Analyze a mixture and its reference sources.
    pub fn new(plan: StftPlan, mixture: Vec<f64>, sources: Vec<Vec<f64>>) -> Result<Self> {
        if sources.is_empty() {
            return invalid("problem needs at least one reference source");
        }
        if sources.iter().any(|s| s.len() != mixture.len()) {
            return shape("sources and mixture differ in length");
        }
        let x = plan.analyze(&mixture)?;
        let s = sources.iter().map(|v| plan.analyze(v)).collect::<Result<_>>()?;
        Ok(Self {
            plan,
            x,
            x_time: mixture,
            s,
            s_time: sources,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.x.shape()
    }

    /// Masks obtained by projecting the ideal complex ratio of every
    /// reference onto what `repr` can express.
    pub fn projected_oracle_masks(&self, repr: &Representation) -> Result<Vec<ComplexMask>> {
        self.s
            .iter()
            .map(|s| {
                Ok(ComplexMask {
                    values: s.zip_map(&self.x, |&sv, &xv| repr.project(ratio(sv, xv).unwrap_or_default()))?,
                })
            })
            .collect()
    }

    /// Mean SI-SDR (dB) of the sources reconstructed from `masks` after the
    /// given MISI iterations, under the best permutation.
    pub fn mean_sisdr(&self, masks: &[ComplexMask], iterations: usize) -> Result<f64> {
        let est = crate::losses::reconstruct_sources(masks, &self.x, &self.x_time, iterations, &self.plan)?;
        let u = evaluate_utterance("fit", &est, &self.s_time, &self.x_time)?;
        Ok(u.sisdr.iter().sum::<f64>() / u.sisdr.len() as f64)
    }
}

/// Result of one forward (and optionally backward) pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: LossValue,
    pub perm: Permutation,
    /// Degenerate phase-interpolation bins (excluded from the gradient).
    pub degenerate: usize,
    /// Gradient in the layout of [`Model::params`].
    pub grad: Option<Vec<f64>>,
}

/// Intermediates of an unfolded MISI run.
struct MisiTape {
    a: Vec<Vec<f64>>,
    y_norm: Vec<Vec<f64>>,
    /// phasors at each iteration, `phasors[k][i]`
    phasors: Vec<Vec<Vec<C64>>>,
    /// moduli of the re-analysed spectrograms, `w_norm[k][i]`
    w_norm: Vec<Vec<Vec<f64>>>,
}

fn unit(z: C64, fallback: C64) -> C64 {
    let r = z.norm();
    if r > 0.0 {
        z / r
    } else {
        fallback
    }
}

fn grid(problem: &Problem, v: Vec<C64>) -> TfGrid<C64> {
    let (t, f) = problem.shape();
    TfGrid::from_vec(t, f, v).expect("sizes agree")
}

fn subtract_mean(v: &mut [Vec<f64>]) {
    let count = v.len() as f64;
    for l in 0..v[0].len() {
        let mean = v.iter().map(|s| s[l]).sum::<f64>() / count;
        v.iter_mut().for_each(|s| s[l] -= mean);
    }
}

/// Unfolded MISI on the masked spectrograms `y`, returning the waveforms and
/// a tape for [`misi_backward`].
fn misi_forward(problem: &Problem, y: &[Vec<C64>], iterations: usize) -> Result<(Vec<Vec<f64>>, MisiTape)> {
    let plan = &problem.plan;
    let len = problem.x_time.len();
    let count = y.len() as f64;
    let a: Vec<Vec<f64>> = y.iter().map(|v| v.iter().map(|z| z.norm()).collect()).collect();
    let p0: Vec<Vec<C64>> = y.iter().map(|v| v.iter().map(|&z| unit(z, C64::new(1.0, 0.0))).collect()).collect();
    let mut tape = MisiTape {
        y_norm: a.clone(),
        a,
        phasors: vec![p0],
        w_norm: Vec::new(),
    };
    let synth = |tape: &MisiTape, k: usize| -> Result<Vec<Vec<f64>>> {
        tape.a
            .iter()
            .zip(&tape.phasors[k])
            .map(|(a, p)| plan.synthesize(&grid(problem, a.iter().zip(p).map(|(&m, &e)| e * m).collect()), len))
            .collect()
    };
    let share = |s: &[Vec<f64>]| -> Vec<f64> {
        (0..len).map(|l| (problem.x_time[l] - s.iter().map(|v| v[l]).sum::<f64>()) / count).collect()
    };
    for k in 0..iterations {
        let s = synth(&tape, k)?;
        let d = share(&s);
        let mut next = Vec::with_capacity(s.len());
        let mut norms = Vec::with_capacity(s.len());
        for (i, si) in s.iter().enumerate() {
            let t: Vec<f64> = si.iter().zip(&d).map(|(a, b)| a + b).collect();
            let w = plan.analyze(&t)?;
            next.push(w.iter().zip(&tape.phasors[k][i]).map(|(&z, &prev)| unit(z, prev)).collect());
            norms.push(w.iter().map(|z| z.norm()).collect());
        }
        tape.phasors.push(next);
        tape.w_norm.push(norms);
    }
    let mut s = synth(&tape, iterations)?;
    if iterations > 0 {
        let d = share(&s);
        s.iter_mut().for_each(|v| v.iter_mut().zip(&d).for_each(|(a, b)| *a += b));
    }
    Ok((s, tape))
}

/// Gradients with respect to the masked spectrograms.
fn misi_backward(problem: &Problem, tape: &MisiTape, g_out: &[Vec<f64>]) -> Result<Vec<Vec<C64>>> {
    let plan = &problem.plan;
    let frames = problem.x.frames();
    let len = problem.x_time.len();
    let iterations = tape.w_norm.len();
    let sources = g_out.len();
    let mut g_s = g_out.to_vec();
    if iterations > 0 {
        subtract_mean(&mut g_s);
    }
    let mut g_a: Vec<Vec<f64>> = tape.a.iter().map(|a| vec![0.0; a.len()]).collect();
    // contribution of Z = A P at iteration k
    let through_z = |g_s: &[Vec<f64>], k: usize, g_a: &mut Vec<Vec<f64>>, carry: Option<&[Vec<C64>]>| -> Vec<Vec<C64>> {
        (0..sources)
            .map(|i| {
                let g_z = plan.synthesize_adjoint(&g_s[i], frames);
                let p = &tape.phasors[k][i];
                g_z.iter()
                    .enumerate()
                    .map(|(b, &gz)| {
                        g_a[i][b] += (gz.conj() * p[b]).re;
                        gz * tape.a[i][b] + carry.map_or(ZERO, |c| c[i][b])
                    })
                    .collect()
            })
            .collect()
    };
    let mut g_p = through_z(&g_s, iterations, &mut g_a, None);
    for k in (0..iterations).rev() {
        let mut carry = vec![vec![ZERO; g_p[0].len()]; sources];
        let mut g_t = Vec::with_capacity(sources);
        for i in 0..sources {
            let p = &tape.phasors[k + 1][i];
            let n = &tape.w_norm[k][i];
            let g_w: Vec<C64> = (0..p.len())
                .map(|b| {
                    if n[b] > 0.0 {
                        (g_p[i][b] - p[b] * (p[b].conj() * g_p[i][b]).re) / n[b]
                    } else {
                        carry[i][b] = g_p[i][b];
                        ZERO
                    }
                })
                .collect();
            g_t.push(plan.analyze_adjoint(&grid(problem, g_w), len)?);
        }
        subtract_mean(&mut g_t);
        g_p = through_z(&g_t, k, &mut g_a, Some(&carry));
    }
    let p0 = &tape.phasors[0];
    Ok((0..sources)
        .map(|i| {
            (0..p0[i].len())
                .map(|b| {
                    let r = tape.y_norm[i][b];
                    if r > 0.0 {
                        let p = p0[i][b];
                        p * g_a[i][b] + (g_p[i][b] - p * (p.conj() * g_p[i][b]).re) / r
                    } else {
                        ZERO
                    }
                })
                .collect()
        })
        .collect())
}

/// Per-pair losses `cost[i][r]` and a closure-free backward description.
enum PairData {
    /// Gradient w.r.t. the real magnitude of estimate `i` against reference `r`.
    Magnitude(Vec<Vec<Vec<f64>>>),
    /// Complex gradient w.r.t. the mask of estimate `i`.
    Mask(Vec<Vec<Vec<C64>>>),
    Expected,
    /// Waveform gradients of estimate `i` against reference `r`.
    Waveform(Vec<Vec<Vec<f64>>>, MisiTape),
}

fn check_model(model: &Model, problem: &Problem) -> Result<()> {
    if model.shape() != problem.shape() {
        return shape(format!("model {:?} vs problem {:?}", model.shape(), problem.shape()));
    }
    if model.sources() != problem.s.len() {
        return shape(format!("{} model sources for {} references", model.sources(), problem.s.len()));
    }
    Ok(())
}

/// Loss and, when `want_grad`, exact gradients with respect to all logits
/// and (if trainable) codebook atoms. Losses are minimized over source
/// permutations.
pub fn forward_backward(model: &Model, problem: &Problem, objective: Objective, want_grad: bool) -> Result<Evaluation> {
    check_model(model, problem)?;
    let heads = model.heads();
    let n = problem.x.len();
    let sources = heads.len();
    let xs = problem.x.as_slice();
    let norm = objective.norm;
    let mut cost = vec![vec![0.0; sources]; sources];
    let mut degenerate = 0;

    let data = match objective.loss {
        LossSpec::Msa | LossSpec::Psa => {
            if matches!(model.repr, Representation::Complex(_)) {
                return Err(Error::Unsupported("magnitude losses need a magbook representation".into()));
            }
            let kind = if objective.loss == LossSpec::Msa { SpectralKind::Msa } else { SpectralKind::Psa };
            let mut grads = vec![vec![Vec::new(); sources]; sources];
            for (i, h) in heads.iter().enumerate() {
                for (r, s) in problem.s.iter().enumerate() {
                    let ss = s.as_slice();
                    let mut g = vec![0.0; n];
                    for b in 0..n {
                        let res = spectral_residual(kind, h.m[b], xs[b], ss[b], 0.0);
                        cost[i][r] += norm.apply(res);
                        g[b] = norm.real_grad(res) * xs[b].norm();
                    }
                    grads[i][r] = g;
                }
            }
            PairData::Magnitude(grads)
        }
        LossSpec::Cma | LossSpec::Csa => {
            degenerate = heads.iter().map(|h| h.degenerate()).sum();
            let mut grads = vec![vec![Vec::new(); sources]; sources];
            for (i, h) in heads.iter().enumerate() {
                for (r, s) in problem.s.iter().enumerate() {
                    let ss = s.as_slice();
                    let mut g = vec![ZERO; n];
                    for b in 0..n {
                        let (res, scale) = if objective.loss == LossSpec::Csa {
                            (h.c[b] * xs[b] - ss[b], xs[b].conj())
                        } else {
                            (h.c[b] - ratio(ss[b], xs[b]).unwrap_or_default(), C64::new(1.0, 0.0))
                        };
                        cost[i][r] += norm.apply(res.norm());
                        g[b] = norm.complex_grad(res) * scale;
                    }
                    grads[i][r] = g;
                }
            }
            PairData::Mask(grads)
        }
        LossSpec::ECsa => {
            for (i, h) in heads.iter().enumerate() {
                for (r, s) in problem.s.iter().enumerate() {
                    cost[i][r] = expected_pair(h, xs, s.as_slice(), norm, None);
                }
            }
            PairData::Expected
        }
        LossSpec::Wa { iterations } => {
            degenerate = heads.iter().map(|h| h.degenerate()).sum();
            let y: Vec<Vec<C64>> = heads.iter().map(|h| h.c.iter().zip(xs).map(|(c, x)| c * x).collect()).collect();
            let (est, tape) = misi_forward(problem, &y, iterations)?;
            let mut grads = vec![vec![Vec::new(); sources]; sources];
            for (i, e) in est.iter().enumerate() {
                for (r, s) in problem.s_time.iter().enumerate() {
                    let mut g = vec![0.0; e.len()];
                    for l in 0..e.len() {
                        let d = e[l] - s[l];
                        cost[i][r] += norm.apply(d);
                        g[l] = norm.real_grad(d);
                    }
                    grads[i][r] = g;
                }
            }
            PairData::Waveform(grads, tape)
        }
    };

    let (value, perm) = permutation_min_matrix(&cost)?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("{} loss is not finite", objective.loss)));
    }
    let mut eval = Evaluation {
        loss: LossValue {
            value,
            flagged: degenerate,
        },
        perm: perm.clone(),
        degenerate,
        grad: None,
    };
    if !want_grad {
        return Ok(eval);
    }

    let mut acc: Vec<HeadGrads> = heads.iter().map(HeadGrads::new).collect();
    match data {
        PairData::Magnitude(grads) => {
            for (i, h) in heads.iter().enumerate() {
                for b in 0..n {
                    acc[i].add_magnitude(h, b, grads[i][perm[i]][b]);
                }
            }
        }
        PairData::Mask(grads) => {
            for (i, h) in heads.iter().enumerate() {
                for b in 0..n {
                    acc[i].add_mask(h, b, grads[i][perm[i]][b]);
                }
            }
        }
        PairData::Expected => {
            for (i, h) in heads.iter().enumerate() {
                expected_pair(h, xs, problem.s[perm[i]].as_slice(), norm, Some(&mut acc[i]));
            }
        }
        PairData::Waveform(grads, tape) => {
            let g_out: Vec<Vec<f64>> = (0..sources).map(|i| grads[i][perm[i]].clone()).collect();
            let g_y = misi_backward(problem, &tape, &g_out)?;
            for (i, h) in heads.iter().enumerate() {
                for b in 0..n {
                    acc[i].add_mask(h, b, g_y[i][b] * xs[b].conj());
                }
            }
        }
    }

    let mut grad = Vec::with_capacity(model.params().len());
    for (h, a) in heads.iter().zip(&acc) {
        let (gp, gq) = a.logit_grads(h);
        grad.extend(gp);
        grad.extend(gq);
    }
    if model.train_atoms {
        let sum_real = |f: &dyn Fn(&HeadGrads) -> &Vec<f64>| -> Vec<f64> {
            let len = f(&acc[0]).len();
            (0..len).map(|k| acc.iter().map(|a| f(a)[k]).sum()).collect()
        };
        match &model.repr {
            Representation::Magnitude(_) => grad.extend(sum_real(&|a| &a.magbook)),
            Representation::MagPhase(..) => {
                grad.extend(sum_real(&|a| &a.magbook));
                grad.extend(sum_real(&|a| &a.phasebook));
            }
            Representation::Complex(c) => {
                for k in 0..c.atoms().len() {
                    let g: C64 = acc.iter().map(|a| a.combook[k]).sum();
                    grad.extend([g.re, g.im]);
                }
            }
        }
    }
    eval.grad = Some(grad);
    Ok(eval)
}

/// Expected CSA of one estimate against one reference, optionally
/// accumulating its gradient.
fn expected_pair(h: &Heads, xs: &[C64], ss: &[C64], norm: Norm, mut acc: Option<&mut HeadGrads>) -> f64 {
    let mut total = 0.0;
    let k = h.k;
    for b in 0..xs.len() {
        let (x, s) = (xs[b], ss[b]);
        let p = &h.p[b * k..(b + 1) * k];
        if !h.combook.is_empty() {
            for (a, &atom) in h.combook.iter().enumerate() {
                let e = atom * x - s;
                let v = norm.apply(e.norm());
                total += p[a] * v;
                if let Some(g) = acc.as_deref_mut() {
                    g.p[b * k + a] += v;
                    g.combook[a] += norm.complex_grad(e) * x.conj() * p[a];
                }
            }
            continue;
        }
        let phasors: &[C64] = if h.j == 0 { &[C64 { re: 1.0, im: 0.0 }] } else { &h.phasors };
        let j = phasors.len();
        for (a, &m) in h.magbook.iter().enumerate() {
            for (c, &e_phase) in phasors.iter().enumerate() {
                let qc = if h.j == 0 { 1.0 } else { h.q[b * j + c] };
                let dir = e_phase * x;
                let e = dir * m - s;
                let v = norm.apply(e.norm());
                total += p[a] * qc * v;
                if let Some(g) = acc.as_deref_mut() {
                    g.p[b * k + a] += qc * v;
                    if h.j > 0 {
                        g.q[b * j + c] += p[a] * v;
                    }
                    let ge = norm.complex_grad(e);
                    g.magbook[a] += p[a] * qc * (ge.conj() * dir).re;
                    if h.j > 0 {
                        g.phasebook[c] += p[a] * qc * (ge.conj() * C64::i() * dir * m).re;
                    }
                }
            }
        }
    }
    total
}

/// Per-group result of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Compare an analytic gradient with central differences.
///
/// The relative error of entry `k` is
/// `|a_k - n_k| / max(|a_k|, |n_k|, 1e-3 max_j |a_j|)`, so entries that are
/// tiny compared with the rest of the gradient are judged on an absolute
/// scale.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    params: &[f64],
    step: f64,
    tolerance: f64,
    groups: &[ParamGroup],
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return invalid(format!("finite-difference step must be positive, got {step}"));
    }
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return shape(format!("gradient has {} entries for {} parameters", analytic.len(), params.len()));
    }
    let scale = analytic.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    let mut theta = params.to_vec();
    let mut errors = vec![0.0; params.len()];
    for k in 0..params.len() {
        theta[k] = params[k] + step;
        let (up, _) = f(&theta)?;
        theta[k] = params[k] - step;
        let (down, _) = f(&theta)?;
        theta[k] = params[k];
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[k];
        errors[k] = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
    }
    let whole = ParamGroup {
        name: "all".into(),
        range: 0..params.len(),
    };
    let groups: Vec<GroupCheck> = if groups.is_empty() { std::slice::from_ref(&whole) } else { groups }
        .iter()
        .map(|g| GroupCheck {
            name: g.name.clone(),
            max_rel_error: errors[g.range.clone()].iter().fold(0.0, |a: f64, &e| a.max(e)),
        })
        .collect();
    let max_rel_error = errors.iter().fold(0.0, |a: f64, &e| a.max(e));
    Ok(GradCheckReport {
        groups,
        step,
        tolerance,
        max_rel_error,
        pass: max_rel_error < tolerance,
    })
}

/// Check [`forward_backward`] for a model against finite differences.
pub fn check_model_gradient(model: &Model, problem: &Problem, objective: Objective, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let f = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        let m = model.with_params(v)?;
        let e = forward_backward(&m, problem, objective, true)?;
        Ok((e.loss.value, e.grad.unwrap_or_default()))
    };
    grad_check(f, &model.params(), step, tolerance, &model.param_groups())
}

/// Gradient-descent settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub iterations: usize,
    /// Initial step size.
    pub step: f64,
    /// Sufficient-decrease constant of the backtracking search.
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Record SI-SDR in the trace (costs one reconstruction per iteration).
    pub track_sisdr: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            step: 1.0,
            armijo: 1e-4,
            max_backtracks: 60,
            track_sisdr: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    /// Mean SI-SDR in dB, NaN when not tracked.
    pub sisdr: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub model: Model,
    pub trace: Vec<TraceRow>,
    /// No step along the negative gradient decreased the loss.
    pub stalled: bool,
}

impl FitResult {
    pub fn write_csv(&self, mut out: impl std::io::Write) -> Result<()> {
        writeln!(out, "iter,loss,sisdr_db")?;
        for r in &self.trace {
            writeln!(out, "{},{:.12e},{:.6}", r.iter, r.loss, r.sisdr)?;
        }
        Ok(())
    }
}

/// Gradient descent with backtracking line search on the chosen objective.
/// Accepted steps always decrease the loss, so the trace is non-increasing.
pub fn fit_logits(init: &Model, problem: &Problem, objective: Objective, config: FitConfig) -> Result<FitResult> {
    check_model(init, problem)?;
    if !(config.step > 0.0) {
        return invalid(format!("step size must be positive, got {}", config.step));
    }
    let iterations = match objective.loss {
        LossSpec::Wa { iterations } => iterations,
        _ => 0,
    };
    let sisdr = |m: &Model| -> Result<f64> {
        if config.track_sisdr {
            problem.mean_sisdr(&m.masks().0, iterations)
        } else {
            Ok(f64::NAN)
        }
    };
    let mut model = init.clone();
    let mut current = forward_backward(&model, problem, objective, true)?;
    let mut trace = vec![TraceRow {
        iter: 0,
        loss: current.loss.value,
        sisdr: sisdr(&model)?,
    }];
    let mut step = config.step;
    let mut stalled = false;
    for iter in 1..=config.iterations {
        let grad = current.grad.take().expect("gradient requested");
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        if g2 == 0.0 {
            stalled = true;
            break;
        }
        let params = model.params();
        let mut accepted = None;
        for _ in 0..config.max_backtracks {
            let trial: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - step * g).collect();
            let candidate = model.with_params(&trial)?;
            let eval = forward_backward(&candidate, problem, objective, false)?;
            if !eval.loss.value.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss diverged at iteration {iter} (last finite value {})",
                    current.loss.value
                )));
            }
            if eval.loss.value <= current.loss.value - config.armijo * step * g2 {
                accepted = Some(candidate);
                break;
            }
            step *= 0.5;
        }
        let Some(next) = accepted else {
            stalled = true;
            current.grad = Some(grad);
            break;
        };
        model = next;
        current = forward_backward(&model, problem, objective, true)?;
        trace.push(TraceRow {
            iter,
            loss: current.loss.value,
            sisdr: sisdr(&model)?,
        });
        step *= 2.0;
    }
    Ok(FitResult { model, trace, stalled })
}

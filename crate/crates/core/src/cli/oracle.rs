//! Oracle-mask study: every combination of mask kind, truncation ceiling,
//! phase source and phasebook size evaluated on a corpus.

use rayon::prelude::*;
use std::io::Write;

use super::{corpus_items, uniform_or_zero_phasebook, OracleSettings, PhaseSource, PhasebookChoice};
use crate::codebook::Phasebook;
use crate::codebook_opt::{optimize_phasebook, MagnitudeSource, OptReport};
use crate::dataio::MixtureRecord;
use crate::error::{Error, Result};
use crate::metrics::{median, si_sdr};
use crate::oracle_masks::{oracle_mask, ratio, ComplexMask, wrapped_angle, MaskKind, MaskValues, DEFAULT_R_MAX};
use crate::signal::{StftPlan, C64};
use crate::tf::TfGrid;

/// One cell of the study grid with its scores.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub mask: MaskKind,
    /// `None` for masks that ignore the ceiling.
    pub r_max: Option<f64>,
    pub phase: PhaseSource,
    /// Phasebook size for the phasebook phase source.
    pub phasebook_size: Option<usize>,
    pub mean_sisdr: f64,
    pub mean_sisdri: f64,
    /// Median over every (utterance, source) pair.
    pub median_sisdri: f64,
    /// Mean SI-SDRi over the sources of each utterance.
    pub utterance_sisdri: Vec<f64>,
}

/// Phasebook used by the study for one ceiling and size.
#[derive(Clone, Debug)]
pub struct StudyPhasebook {
    pub r_max: f64,
    pub size: usize,
    pub phasebook: Phasebook,
    pub report: Option<OptReport>,
}

#[derive(Clone, Debug)]
pub struct OracleStudy {
    pub rows: Vec<OracleRow>,
    pub phasebooks: Vec<StudyPhasebook>,
    /// Fraction of mixture bins too small to divide by.
    pub guarded_fraction: f64,
    /// Fraction of bins with `|s/x| > r_max`, per configured ceiling.
    pub clamped_fraction: Vec<(f64, f64)>,
}

impl OracleStudy {
    pub fn row(&self, mask: MaskKind, r_max: Option<f64>, phase: PhaseSource, size: Option<usize>) -> Option<&OracleRow> {
        self.rows
            .iter()
            .find(|r| r.mask == mask && r.r_max == r_max && r.phase == phase && r.phasebook_size == size)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "mask,r_max,phase_source,phasebook_size,mean_sisdr_db,mean_sisdri_db,median_sisdri_db")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6}",
                r.mask,
                r.r_max.map_or(String::new(), |v| v.to_string()),
                r.phase,
                r.phasebook_size.map_or(String::new(), |v| v.to_string()),
                r.mean_sisdr,
                r.mean_sisdri,
                r.median_sisdri
            )?;
        }
        Ok(())
    }

    pub fn write_phasebooks_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "r_max,phasebook_size,atom,angle_rad")?;
        for p in &self.phasebooks {
            for (j, a) in p.phasebook.atoms().iter().enumerate() {
                writeln!(out, "{},{},{j},{a:.12}", p.r_max, p.size)?;
            }
        }
        Ok(())
    }
}

/// Index of the atom closest to the phase correction needed by a mask of
/// value `a` for the ratio `r`: `argmax_j sign(a) cos(theta_j - angle r)`,
/// lowest index on ties.
pub fn quantize_phase(phasors: &[C64], a: f64, r: C64) -> usize {
    let u = if a < 0.0 { -r } else { r };
    let mut best = 0;
    let mut score = f64::NEG_INFINITY;
    for (j, p) in phasors.iter().enumerate() {
        // Re(conj(p) u) = |u| cos(theta_j - angle u)
        let v = p.re * u.re + p.im * u.im;
        if v > score {
            score = v;
            best = j;
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    mask: MaskKind,
    r_max: Option<f64>,
    phase: PhaseSource,
    size: Option<usize>,
}

fn cells(s: &OracleSettings) -> Vec<Cell> {
    let mut out = Vec::new();
    for &mask in &s.masks {
        let ceilings: Vec<Option<f64>> = if mask.uses_r_max() {
            s.r_max.iter().map(|&r| Some(r)).collect()
        } else {
            vec![None]
        };
        for r_max in ceilings {
            for &phase in &s.phase_sources {
                if phase == PhaseSource::Phasebook {
                    for &p in &s.phasebook_sizes {
                        out.push(Cell {
                            mask,
                            r_max,
                            phase,
                            size: Some(p),
                        });
                    }
                } else {
                    out.push(Cell {
                        mask,
                        r_max,
                        phase,
                        size: None,
                    });
                }
            }
        }
    }
    out
}

/// Ceiling used to train or look up the phasebook of a cell.
fn book_ceiling(r_max: Option<f64>) -> f64 {
    r_max.unwrap_or(DEFAULT_R_MAX)
}

fn build_phasebooks(s: &OracleSettings, records: &[MixtureRecord], plan: &StftPlan) -> Result<Vec<StudyPhasebook>> {
    if !s.phase_sources.contains(&PhaseSource::Phasebook) {
        return Ok(Vec::new());
    }
    let mut ceilings: Vec<f64> = Vec::new();
    for &mask in &s.masks {
        let rs: Vec<f64> = if mask.uses_r_max() { s.r_max.clone() } else { vec![DEFAULT_R_MAX] };
        for r in rs {
            if !ceilings.contains(&r) {
                ceilings.push(r);
            }
        }
    }
    let items = match s.phasebook {
        PhasebookChoice::Optimized => Some(corpus_items(records, plan)?),
        PhasebookChoice::Uniform => None,
    };
    let mut books = Vec::new();
    for &r_max in &ceilings {
        for &size in &s.phasebook_sizes {
            let init = uniform_or_zero_phasebook(size)?;
            let (phasebook, report) = match &items {
                Some(items) => {
                    let (pb, rep) = optimize_phasebook(&init, items, &MagnitudeSource::OracleIam { r_max }, s.epochs)?;
                    (pb, Some(rep))
                }
                None => (init, None),
            };
            books.push(StudyPhasebook {
                r_max,
                size,
                phasebook,
                report,
            });
        }
    }
    Ok(books)
}

struct RecordScores {
    /// `[cell][source]` SI-SDR and SI-SDRi.
    sisdr: Vec<Vec<f64>>,
    sisdri: Vec<Vec<f64>>,
    bins: usize,
    guarded: usize,
    clamped: Vec<usize>,
}

fn score_record(
    rec: &MixtureRecord,
    cells: &[Cell],
    books: &[StudyPhasebook],
    ceilings: &[f64],
    plan: &StftPlan,
) -> Result<RecordScores> {
    let len = rec.mixture.len();
    let x = plan.analyze(&rec.mixture.samples)?;
    let specs: Vec<TfGrid<C64>> = rec.sources.iter().map(|s| plan.analyze(&s.samples)).collect::<Result<_>>()?;
    let n_src = specs.len();
    let mut sisdr = vec![vec![0.0; n_src]; cells.len()];
    let mut sisdri = vec![vec![0.0; n_src]; cells.len()];
    let mut guarded = 0;
    let mut clamped = vec![0usize; ceilings.len()];
    for (i, s) in specs.iter().enumerate() {
        let reference = &rec.sources[i].samples;
        let base = si_sdr(&rec.mixture.samples, reference)?;
        let n = x.zip_map(s, |a, b| a - b)?;
        let ratios: TfGrid<Option<C64>> = s.zip_map(&x, |&sv, &xv| ratio(sv, xv))?;
        for (k, &c) in ceilings.iter().enumerate() {
            clamped[k] += ratios.iter().filter(|r| r.is_some_and(|r| r.norm() > c)).count();
        }
        for (c, cell) in cells.iter().enumerate() {
            let r_max = cell.r_max.unwrap_or(DEFAULT_R_MAX);
            let om = oracle_mask(cell.mask, s, &n, &x, r_max)?;
            if c == 0 {
                guarded += om.guarded_bins;
            }
            let amp = match &om.mask {
                MaskValues::Real(m) => m.values.clone(),
                MaskValues::Complex(m) => m.values.map(|v| v.norm()),
            };
            let values = match cell.phase {
                PhaseSource::Noisy => amp.map(|&a| C64::new(a, 0.0)),
                PhaseSource::True => amp.zip_map(&ratios, |&a, r| match r {
                    Some(r) => C64::from_polar(a.abs(), wrapped_angle(*r)),
                    None => C64::new(0.0, 0.0),
                })?,
                PhaseSource::Phasebook => {
                    let size = cell.size.expect("phasebook cells carry a size");
                    let ceiling = book_ceiling(cell.r_max);
                    let book = books
                        .iter()
                        .find(|b| b.size == size && b.r_max == ceiling)
                        .ok_or_else(|| Error::InvalidArgument(format!("no phasebook of size {size}")))?;
                    let phasors = book.phasebook.phasors();
                    amp.zip_map(&ratios, |&a, r| match r {
                        Some(r) => a * phasors[quantize_phase(&phasors, a, *r)],
                        None => C64::new(0.0, 0.0),
                    })?
                }
            };
            let mask = ComplexMask { values };
            let est_spec = mask.values.zip_map(&x, |&m, &xv| m * xv)?;
            let est = plan.synthesize(&est_spec, len)?;
            let v = si_sdr(&est, reference)?;
            sisdr[c][i] = v;
            sisdri[c][i] = v - base;
        }
    }
    Ok(RecordScores {
        sisdr,
        sisdri,
        bins: x.len() * n_src,
        guarded,
        clamped,
    })
}

/// Run the oracle grid over `records`. Rows follow the order of masks,
/// ceilings, phase sources and phasebook sizes in `settings`.
pub fn oracle_study(settings: &OracleSettings, records: &[MixtureRecord], plan: &StftPlan) -> Result<OracleStudy> {
    if records.is_empty() {
        return Err(Error::Empty("oracle study corpus".into()));
    }
    let cells = cells(settings);
    if cells.is_empty() {
        return Err(Error::Empty("oracle study grid".into()));
    }
    let books = build_phasebooks(settings, records, plan)?;
    let ceilings = settings.r_max.clone();
    let scores: Vec<RecordScores> = records
        .par_iter()
        .map(|r| score_record(r, &cells, &books, &ceilings, plan))
        .collect::<Result<_>>()?;

    let rows = cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let per_utt: Vec<f64> = scores.iter().map(|s| mean(&s.sisdri[c])).collect();
            let per_utt_sdr: Vec<f64> = scores.iter().map(|s| mean(&s.sisdr[c])).collect();
            let all: Vec<f64> = scores.iter().flat_map(|s| s.sisdri[c].iter().copied()).collect();
            OracleRow {
                mask: cell.mask,
                r_max: cell.r_max,
                phase: cell.phase,
                phasebook_size: cell.size,
                mean_sisdr: mean(&per_utt_sdr),
                mean_sisdri: mean(&per_utt),
                median_sisdri: median(&all),
                utterance_sisdri: per_utt,
            }
        })
        .collect();
    let bins: usize = scores.iter().map(|s| s.bins).sum();
    let guarded: usize = scores.iter().map(|s| s.guarded).sum();
    let clamped_fraction = ceilings
        .iter()
        .enumerate()
        .map(|(k, &c)| (c, scores.iter().map(|s| s.clamped[k]).sum::<usize>() as f64 / bins as f64))
        .collect();
    Ok(OracleStudy {
        rows,
        phasebooks: books,
        guarded_fraction: guarded as f64 / bins as f64,
        clamped_fraction,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

//! Scale-invariant SDR and corpus evaluation with permutation search.

use rayon::prelude::*;
use std::io::Write;

use crate::error::{invalid, shape, Error, Result};
use crate::losses::{permutation_min_matrix, Permutation};

/// Magnitude of the dB caps applied to perfect or empty estimates.
pub const SI_SDR_CAP_DB: f64 = 120.0;
/// Residual-to-target norm ratio below which an estimate counts as perfect.
pub const PERFECT_RESIDUAL: f64 = 1e-12;

/// SI-SDR in dB, clamped to `[-120, 120]`.
///
/// The reference is rescaled by `<estimate, reference> / |reference|^2`
/// and the result is the energy ratio of the rescaled reference to the
/// remaining error.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return shape(format!("estimate has {} samples, reference {}", estimate.len(), reference.len()));
    }
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if !(ref_energy > 0.0) {
        return invalid("SI-SDR reference is zero");
    }
    let dot: f64 = estimate.iter().zip(reference).map(|(e, r)| e * r).sum();
    let alpha = dot / ref_energy;
    let target = alpha * alpha * ref_energy;
    let residual: f64 = estimate.iter().zip(reference).map(|(e, r)| (alpha * r - e).powi(2)).sum();
    if target == 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    if residual <= PERFECT_RESIDUAL * PERFECT_RESIDUAL * target {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / residual).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Scores of one utterance, indexed by reference.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceEval {
    pub id: String,
    pub sisdr: Vec<f64>,
    pub sisdri: Vec<f64>,
    /// `perm[i]` is the reference matched with estimate `i`.
    pub perm: Permutation,
}

impl UtteranceEval {
    /// Estimate index matched with each reference.
    pub fn estimate_for_reference(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &r) in self.perm.iter().enumerate() {
            inv[r] = i;
        }
        inv
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceEval>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Median of a list (average of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl EvalReport {
    fn all(&self, f: impl Fn(&UtteranceEval) -> &Vec<f64>) -> Vec<f64> {
        self.utterances.iter().flat_map(|u| f(u).iter().copied()).collect()
    }

    pub fn mean_sisdr(&self) -> f64 {
        mean(&self.all(|u| &u.sisdr))
    }

    pub fn mean_sisdri(&self) -> f64 {
        mean(&self.all(|u| &u.sisdri))
    }

    pub fn median_sisdri(&self) -> f64 {
        median(&self.all(|u| &u.sisdri))
    }

    /// Mean SI-SDRi of each utterance.
    pub fn utterance_sisdri(&self) -> Vec<f64> {
        self.utterances.iter().map(|u| mean(&u.sisdri)).collect()
    }

    /// Columns `utt_id, source_idx, sisdr_db, sisdri_db, perm`; one row per
    /// reference. `perm` lists the reference of each estimate, space separated.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "utt_id,source_idx,sisdr_db,sisdri_db,perm")?;
        for u in &self.utterances {
            let perm = u.perm.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" ");
            for r in 0..u.sisdr.len() {
                writeln!(out, "{},{},{:.6},{:.6},{}", u.id, r, u.sisdr[r], u.sisdri[r], perm)?;
            }
        }
        Ok(())
    }
}

/// Score one utterance: pick the permutation maximizing total SI-SDR and
/// measure improvements over the unprocessed mixture.
pub fn evaluate_utterance(id: &str, estimates: &[Vec<f64>], references: &[Vec<f64>], mixture: &[f64]) -> Result<UtteranceEval> {
    if estimates.len() != references.len() || estimates.is_empty() {
        return shape(format!("{} estimates for {} references", estimates.len(), references.len()));
    }
    let table: Vec<Vec<f64>> = estimates
        .iter()
        .map(|e| references.iter().map(|r| si_sdr(e, r)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let negated: Vec<Vec<f64>> = table.iter().map(|row| row.iter().map(|v| -v).collect()).collect();
    let (_, perm) = permutation_min_matrix(&negated)?;
    let mut sisdr = vec![0.0; references.len()];
    for (i, &r) in perm.iter().enumerate() {
        sisdr[r] = table[i][r];
    }
    let sisdri = references
        .iter()
        .zip(&sisdr)
        .map(|(r, v)| Ok(v - si_sdr(mixture, r)?))
        .collect::<Result<_>>()?;
    Ok(UtteranceEval {
        id: id.to_string(),
        sisdr,
        sisdri,
        perm,
    })
}

/// Evaluate aligned lists of per-utterance estimates, references and
/// mixtures. Utterance ids default to their index.
pub fn evaluate_corpus(
    estimates: &[Vec<Vec<f64>>],
    references: &[Vec<Vec<f64>>],
    mixtures: &[Vec<f64>],
    ids: Option<&[String]>,
) -> Result<EvalReport> {
    if estimates.len() != references.len() || estimates.len() != mixtures.len() {
        return shape(format!(
            "{} estimate sets, {} reference sets, {} mixtures",
            estimates.len(),
            references.len(),
            mixtures.len()
        ));
    }
    if let Some(ids) = ids {
        if ids.len() != estimates.len() {
            return shape(format!("{} ids for {} utterances", ids.len(), estimates.len()));
        }
    }
    if estimates.is_empty() {
        return Err(Error::Empty("evaluation corpus".into()));
    }
    let utterances = (0..estimates.len())
        .into_par_iter()
        .map(|u| {
            let id = ids.map_or_else(|| u.to_string(), |ids| ids[u].clone());
            evaluate_utterance(&id, &estimates[u], &references[u], &mixtures[u])
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport { utterances })
}

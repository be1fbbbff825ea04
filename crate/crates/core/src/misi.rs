//! Multiple input spectrogram inversion.
//!
//! Jointly reconstructs the phases of several sources whose magnitudes are
//! fixed, under the constraint that the time-domain estimates add up to the
//! mixture. Each iteration resynthesizes every source, spreads the mixture
//! error evenly across them and keeps only the phase of the re-analysis.

use rayon::prelude::*;

use crate::error::{invalid, shape, Result};
use crate::oracle_masks::wrapped_angle;
use crate::signal::{StftPlan, C64};
use crate::tf::TfGrid;

/// Iteration count and zero-iteration behaviour.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MisiConfig {
    pub iterations: usize,
    /// Apply the error redistribution even when `iterations == 0`.
    pub redistribute_at_zero: bool,
}

impl MisiConfig {
    pub fn new(iterations: usize) -> Self {
        Self {
            iterations,
            redistribute_at_zero: false,
        }
    }

    fn redistributes(&self) -> bool {
        self.iterations > 0 || self.redistribute_at_zero
    }
}

/// Fixed magnitudes and evolving phases for every source.
#[derive(Clone, Debug)]
pub struct MisiState<'a> {
    magnitudes: &'a [TfGrid<f64>],
    phases: Vec<TfGrid<f64>>,
    mixture: &'a [f64],
    iteration: usize,
}

impl<'a> MisiState<'a> {
    pub fn new(magnitudes: &'a [TfGrid<f64>], init_phases: Vec<TfGrid<f64>>, mixture: &'a [f64], plan: &StftPlan) -> Result<Self> {
        if magnitudes.is_empty() {
            return invalid("MISI needs at least one source");
        }
        if init_phases.len() != magnitudes.len() {
            return shape(format!("{} phase grids for {} sources", init_phases.len(), magnitudes.len()));
        }
        for (m, p) in magnitudes.iter().zip(&init_phases) {
            m.check_shape(&magnitudes[0], "MISI magnitudes")?;
            m.check_shape(p, "MISI phase")?;
            if m.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
                return invalid("MISI magnitudes must be finite and non-negative");
            }
        }
        let frames = plan.config().num_frames(mixture.len());
        if mixture.is_empty() || frames != magnitudes[0].frames() || plan.config().num_bins() != magnitudes[0].bins() {
            return shape(format!(
                "mixture of {} samples gives {}x{} bins, magnitudes are {:?}",
                mixture.len(),
                frames,
                plan.config().num_bins(),
                magnitudes[0].shape()
            ));
        }
        Ok(Self {
            magnitudes,
            phases: init_phases,
            mixture,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn phases(&self) -> &[TfGrid<f64>] {
        &self.phases
    }

    pub fn magnitudes(&self) -> &[TfGrid<f64>] {
        self.magnitudes
    }

    /// Time-domain signals `istft(A_i e^{i phi_i})` for the current phases.
    pub fn resynthesize(&self, plan: &StftPlan) -> Result<Vec<Vec<f64>>> {
        self.magnitudes
            .par_iter()
            .zip(self.phases.par_iter())
            .map(|(a, p)| {
                let spec = a.zip_map(p, |&m, &ph| C64::from_polar(m, ph))?;
                plan.synthesize(&spec, self.mixture.len())
            })
            .collect()
    }

    /// `(x - sum_i s_i) / I`.
    pub fn error_share(&self, signals: &[Vec<f64>]) -> Vec<f64> {
        let count = signals.len() as f64;
        (0..self.mixture.len())
            .map(|l| (self.mixture[l] - signals.iter().map(|s| s[l]).sum::<f64>()) / count)
            .collect()
    }

    /// One phase update.
    pub fn step(&mut self, plan: &StftPlan) -> Result<()> {
        let signals = self.resynthesize(plan)?;
        let share = self.error_share(&signals);
        let updated: Result<Vec<TfGrid<f64>>> = signals
            .par_iter()
            .zip(self.phases.par_iter())
            .map(|(s, prev)| {
                let target: Vec<f64> = s.iter().zip(&share).map(|(a, d)| a + d).collect();
                let spec = plan.analyze(&target)?;
                spec.zip_map(prev, |&y, &p| if y.norm() > 0.0 { wrapped_angle(y) } else { p })
            })
            .collect();
        self.phases = updated?;
        self.iteration += 1;
        Ok(())
    }

    /// Final waveforms, optionally with the last error redistribution.
    pub fn finish(&self, plan: &StftPlan, redistribute: bool) -> Result<Vec<Vec<f64>>> {
        let mut signals = self.resynthesize(plan)?;
        if redistribute {
            let share = self.error_share(&signals);
            for s in &mut signals {
                for (v, d) in s.iter_mut().zip(&share) {
                    *v += d;
                }
            }
        }
        Ok(signals)
    }
}

/// Waveforms and final phases of a MISI run.
#[derive(Clone, Debug)]
pub struct MisiOutput {
    pub sources: Vec<Vec<f64>>,
    pub phases: Vec<TfGrid<f64>>,
}

/// Run `config.iterations` MISI updates and return the source estimates.
///
/// With at least one iteration the estimates sum to `mixture` exactly up to
/// rounding. With zero iterations the result is the plain inverse STFT of
/// `A_i e^{i phi_i}` unless `redistribute_at_zero` is set.
pub fn misi(
    magnitudes: &[TfGrid<f64>],
    init_phases: &[TfGrid<f64>],
    mixture: &[f64],
    config: MisiConfig,
    plan: &StftPlan,
) -> Result<MisiOutput> {
    let mut state = MisiState::new(magnitudes, init_phases.to_vec(), mixture, plan)?;
    for _ in 0..config.iterations {
        state.step(plan)?;
    }
    let sources = state.finish(plan, config.redistributes())?;
    Ok(MisiOutput {
        sources,
        phases: state.phases,
    })
}

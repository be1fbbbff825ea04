//! Discrete codebook representations (magbook, phasebook, combook) for
//! complex time-frequency masking in source separation.

pub mod error;
pub mod signal;
pub mod tf;

pub use error::{Error, Result};
pub use signal::{C64, Spectrogram, StftConfig, StftPlan, Waveform, WindowKind};
pub use tf::TfGrid;
pub mod codebook;
pub mod oracle_masks;
pub mod codebook_opt;
pub mod losses;
pub mod misi;
pub mod dataio;
pub mod metrics;
pub mod grad;
pub mod cli;

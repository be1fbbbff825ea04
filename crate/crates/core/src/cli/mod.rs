//! Experiment orchestration behind the `maskbook` binary.
//!
//! Every command takes an [`ExperimentConfig`] and [`RunOptions`], writes CSV
//! files into the output directory and returns the files together with the
//! invariant flags it measured. The binary exits non-zero when a flag
//! exceeds its limit.

pub mod config;
mod commands;
mod oracle;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::codebook::{CodebookText, Combook, Magbook, Phasebook};
use crate::codebook_opt::{random_combook, random_magbook, random_phasebook, uniform_phasebook, CorpusItem};
use crate::dataio::{generate_corpus, CorpusManifest, MixtureRecord, SourceKind, SynthSpec, WavFormat};
use crate::error::{invalid, Error, Result};
use crate::grad::LossSpec;
use crate::losses::Norm;
use crate::misi::MisiConfig;
use crate::oracle_masks::{MaskKind, DEFAULT_R_MAX};
use crate::signal::{StftConfig, StftPlan, WindowKind};

pub use commands::{
    eval, fit, gradcheck, gradcheck_rows, misi_corpus, misi_files, optimize_codebook, run_oracle_study, synth, tiny_problem, GradRow,
    MisiFiles,
};
pub use config::ConfigFile;
pub use oracle::{oracle_study, quantize_phase, OracleRow, OracleStudy, StudyPhasebook};

/// Where the phase of an oracle mask comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PhaseSource {
    /// Mixture phase, i.e. no phase correction.
    Noisy,
    /// Exact phase difference between source and mixture.
    True,
    /// Phase difference quantized to the closest phasebook atom.
    Phasebook,
}

impl fmt::Display for PhaseSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseSource::Noisy => "noisy",
            PhaseSource::True => "true",
            PhaseSource::Phasebook => "phasebook",
        })
    }
}

impl FromStr for PhaseSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noisy" => Ok(PhaseSource::Noisy),
            "true" => Ok(PhaseSource::True),
            "phasebook" => Ok(PhaseSource::Phasebook),
            other => invalid(format!("unknown phase source '{other}' (noisy, true, phasebook)")),
        }
    }
}

/// Which phasebooks the oracle study quantizes to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhasebookChoice {
    Uniform,
    /// EM-optimized on the study corpus from a uniform start.
    Optimized,
}

impl FromStr for PhasebookChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PhasebookChoice::Uniform),
            "optimized" => Ok(PhasebookChoice::Optimized),
            other => invalid(format!("unknown phasebook choice '{other}' (uniform, optimized)")),
        }
    }
}

impl fmt::Display for PhasebookChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhasebookChoice::Uniform => "uniform",
            PhasebookChoice::Optimized => "optimized",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodebookKind {
    Phasebook,
    MagbookPhasebook,
    Combook,
}

impl FromStr for CodebookKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phasebook" => Ok(CodebookKind::Phasebook),
            "magbook-phasebook" | "magphase" => Ok(CodebookKind::MagbookPhasebook),
            "combook" => Ok(CodebookKind::Combook),
            other => invalid(format!("unknown codebook kind '{other}' (phasebook, magphase, combook)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodebookInit {
    Uniform,
    Random,
    File,
}

impl FromStr for CodebookInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(CodebookInit::Uniform),
            "random" => Ok(CodebookInit::Random),
            "file" => Ok(CodebookInit::File),
            other => invalid(format!("unknown codebook init '{other}' (uniform, random, file)")),
        }
    }
}

/// Initial phases for MISI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MisiInit {
    /// Mixture phase.
    Noisy,
    Zero,
    /// Phase files given on the command line.
    Provided,
}

impl FromStr for MisiInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noisy" => Ok(MisiInit::Noisy),
            "zero" => Ok(MisiInit::Zero),
            "provided" => Ok(MisiInit::Provided),
            other => invalid(format!("unknown MISI init '{other}' (noisy, zero, provided)")),
        }
    }
}

/// Model codebooks for `fit` and `gradcheck`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReprKind {
    Magnitude,
    MagPhase,
    Complex,
}

impl FromStr for ReprKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" | "magbook" => Ok(ReprKind::Magnitude),
            "magphase" | "magbook-phasebook" => Ok(ReprKind::MagPhase),
            "complex" | "combook" => Ok(ReprKind::Complex),
            other => invalid(format!("unknown representation '{other}' (magnitude, magphase, combook)")),
        }
    }
}

impl fmt::Display for ReprKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReprKind::Magnitude => "magnitude",
            ReprKind::MagPhase => "magphase",
            ReprKind::Complex => "combook",
        })
    }
}

/// Corpus: a manifest on disk or a synthetic corpus generated in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSettings {
    pub manifest: Option<PathBuf>,
    pub synth: SynthSpec,
    pub format: WavFormat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSettings {
    pub masks: Vec<MaskKind>,
    pub r_max: Vec<f64>,
    pub phase_sources: Vec<PhaseSource>,
    pub phasebook_sizes: Vec<usize>,
    pub phasebook: PhasebookChoice,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookSettings {
    pub kind: CodebookKind,
    pub size: usize,
    pub magbook_size: usize,
    pub init: CodebookInit,
    pub file: Option<PathBuf>,
    pub magbook_file: Option<PathBuf>,
    pub epochs: usize,
    pub r_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MisiSettings {
    pub iterations: Vec<usize>,
    pub init: MisiInit,
    pub mask: MaskKind,
    pub r_max: f64,
    pub redistribute_at_zero: bool,
    pub write_estimates: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSettings {
    pub representation: ReprKind,
    pub magbook_size: usize,
    pub phasebook_size: usize,
    pub combook_size: usize,
    pub loss: LossSpec,
    pub norm: Norm,
    pub iterations: usize,
    pub step: f64,
    pub utterance: usize,
    pub train_atoms: bool,
    pub track_sisdr: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub estimates: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSettings {
    pub losses: Vec<LossSpec>,
    pub representations: Vec<ReprKind>,
    pub norm: Norm,
    pub step: f64,
    pub tolerance: f64,
    pub trials: usize,
}

/// Limits on the invariant flags; exceeding one makes the run fail.
#[derive(Clone, Debug, PartialEq)]
pub struct FlagLimits {
    /// Fraction of mixture bins too small to divide by.
    pub max_guarded_fraction: f64,
    /// Fraction of ratio-mask bins truncated at `r_max`.
    pub max_clamped_fraction: f64,
    /// Fraction of bins whose interpolated phase is undefined.
    pub max_degenerate_fraction: f64,
    /// Relative objective increase tolerated in EM traces.
    pub max_objective_increase: f64,
}

impl Default for FlagLimits {
    fn default() -> Self {
        Self {
            max_guarded_fraction: 0.05,
            max_clamped_fraction: 0.5,
            max_degenerate_fraction: 0.01,
            max_objective_increase: 1e-9,
        }
    }
}

/// Full, typed experiment description.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusSettings,
    pub stft: StftConfig,
    pub oracle: OracleSettings,
    pub codebook: CodebookSettings,
    pub misi: MisiSettings,
    pub fit: FitSettings,
    pub eval: EvalSettings,
    pub gradcheck: GradcheckSettings,
    pub flags: FlagLimits,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSettings {
                manifest: None,
                synth: SynthSpec::default(),
                format: WavFormat::Pcm16,
            },
            stft: StftConfig::default(),
            oracle: OracleSettings {
                masks: MaskKind::ALL.to_vec(),
                r_max: vec![1.0, 2.0],
                phase_sources: vec![PhaseSource::Noisy, PhaseSource::True, PhaseSource::Phasebook],
                phasebook_sizes: vec![2, 4, 8],
                phasebook: PhasebookChoice::Uniform,
                epochs: 40,
            },
            codebook: CodebookSettings {
                kind: CodebookKind::Phasebook,
                size: 8,
                magbook_size: 3,
                init: CodebookInit::Uniform,
                file: None,
                magbook_file: None,
                epochs: 40,
                r_max: DEFAULT_R_MAX,
            },
            misi: MisiSettings {
                iterations: vec![0, 5],
                init: MisiInit::Noisy,
                mask: MaskKind::Iam,
                r_max: DEFAULT_R_MAX,
                redistribute_at_zero: false,
                write_estimates: false,
            },
            fit: FitSettings {
                representation: ReprKind::MagPhase,
                magbook_size: 3,
                phasebook_size: 8,
                combook_size: 8,
                loss: LossSpec::Wa { iterations: 0 },
                norm: Norm::L2Sq,
                iterations: 200,
                step: 1.0,
                utterance: 0,
                train_atoms: false,
                track_sisdr: true,
            },
            eval: EvalSettings { estimates: None },
            gradcheck: GradcheckSettings {
                losses: vec![
                    LossSpec::Msa,
                    LossSpec::Psa,
                    LossSpec::Cma,
                    LossSpec::Csa,
                    LossSpec::ECsa,
                    LossSpec::Wa { iterations: 0 },
                    LossSpec::Wa { iterations: 1 },
                    LossSpec::Wa { iterations: 2 },
                ],
                representations: vec![ReprKind::MagPhase],
                norm: Norm::L2Sq,
                step: 1e-6,
                tolerance: 1e-5,
                trials: 1,
            },
            flags: FlagLimits::default(),
        }
    }
}

const SCHEMA: &[(&str, &[&str])] = &[
    (
        "corpus",
        &[
            "manifest", "count", "duration", "sample_rate", "sources", "kinds", "snr_db", "max_freq", "peak", "format",
        ],
    ),
    ("stft", &["win_length", "hop", "dft_size", "window"]),
    ("oracle", &["masks", "r_max", "phase_sources", "phasebook_sizes", "phasebook", "epochs"]),
    ("codebook", &["kind", "size", "magbook_size", "init", "file", "magbook_file", "epochs", "r_max"]),
    ("misi", &["iterations", "init", "mask", "r_max", "redistribute_at_zero", "write_estimates"]),
    (
        "fit",
        &[
            "representation", "magbook_size", "phasebook_size", "combook_size", "loss", "norm", "iterations", "step",
            "utterance", "train_atoms", "track_sisdr",
        ],
    ),
    ("eval", &["estimates"]),
    ("gradcheck", &["losses", "representations", "norm", "step", "tolerance", "trials"]),
    (
        "flags",
        &["max_guarded_fraction", "max_clamped_fraction", "max_degenerate_fraction", "max_objective_increase"],
    ),
];

impl ExperimentConfig {
    /// Typed configuration from a parsed file; absent keys keep defaults.
    pub fn from_file(cfg: &ConfigFile) -> Result<Self> {
        cfg.check_schema(SCHEMA)?;
        let d = Self::default();

        let snr = match cfg.get_list::<f64>("corpus", "snr_db")? {
            None => d.corpus.synth.snr_db,
            Some(v) if v.len() == 1 => (v[0], v[0]),
            Some(v) if v.len() == 2 => (v[0], v[1]),
            Some(_) => return Err(cfg.error_at("corpus", "snr_db", "snr_db takes one value or a 'lo, hi' pair")),
        };
        let synth = SynthSpec {
            count: cfg.get_or("corpus", "count", d.corpus.synth.count)?,
            duration_s: cfg.get_or("corpus", "duration", d.corpus.synth.duration_s)?,
            sample_rate: cfg.get_or("corpus", "sample_rate", d.corpus.synth.sample_rate)?,
            sources: cfg.get_or("corpus", "sources", d.corpus.synth.sources)?,
            kinds: cfg.get_list::<SourceKind>("corpus", "kinds")?.unwrap_or(d.corpus.synth.kinds),
            snr_db: snr,
            max_freq: cfg.get_or("corpus", "max_freq", d.corpus.synth.max_freq)?,
            bands: None,
            peak: cfg.get_or("corpus", "peak", d.corpus.synth.peak)?,
        };
        let corpus = CorpusSettings {
            manifest: cfg.get_path("corpus", "manifest"),
            synth,
            format: cfg.get_or("corpus", "format", d.corpus.format)?,
        };

        let stft = StftConfig::new(
            cfg.get_or("stft", "win_length", d.stft.win_length)?,
            cfg.get_or("stft", "hop", d.stft.hop)?,
            cfg.get_or("stft", "dft_size", d.stft.dft_size)?,
            cfg.get_or::<WindowKind>("stft", "window", d.stft.window)?,
            corpus.synth.sample_rate,
        )
        .map_err(|e| cfg.error_at("stft", "win_length", e))?;

        let oracle = OracleSettings {
            masks: cfg.get_list("oracle", "masks")?.unwrap_or(d.oracle.masks),
            r_max: cfg.get_list("oracle", "r_max")?.unwrap_or(d.oracle.r_max),
            phase_sources: cfg.get_list("oracle", "phase_sources")?.unwrap_or(d.oracle.phase_sources),
            phasebook_sizes: cfg.get_list("oracle", "phasebook_sizes")?.unwrap_or(d.oracle.phasebook_sizes),
            phasebook: cfg.get_or("oracle", "phasebook", d.oracle.phasebook)?,
            epochs: cfg.get_or("oracle", "epochs", d.oracle.epochs)?,
        };
        if oracle.r_max.iter().any(|&r| !(r > 0.0)) {
            return Err(cfg.error_at("oracle", "r_max", "r_max values must be positive"));
        }
        if oracle.phasebook_sizes.contains(&0) {
            return Err(cfg.error_at("oracle", "phasebook_sizes", "phasebook sizes must be positive"));
        }

        let codebook = CodebookSettings {
            kind: cfg.get_or("codebook", "kind", d.codebook.kind)?,
            size: cfg.get_or("codebook", "size", d.codebook.size)?,
            magbook_size: cfg.get_or("codebook", "magbook_size", d.codebook.magbook_size)?,
            init: cfg.get_or("codebook", "init", d.codebook.init)?,
            file: cfg.get_path("codebook", "file"),
            magbook_file: cfg.get_path("codebook", "magbook_file"),
            epochs: cfg.get_or("codebook", "epochs", d.codebook.epochs)?,
            r_max: cfg.get_or("codebook", "r_max", d.codebook.r_max)?,
        };
        if codebook.init == CodebookInit::File && codebook.file.is_none() {
            return Err(cfg.error_at("codebook", "init", "init = file needs 'file'"));
        }
        if codebook.init == CodebookInit::File && codebook.kind == CodebookKind::MagbookPhasebook && codebook.magbook_file.is_none() {
            return Err(cfg.error_at("codebook", "init", "init = file for magphase needs 'magbook_file'"));
        }

        let misi = MisiSettings {
            iterations: cfg.get_list("misi", "iterations")?.unwrap_or(d.misi.iterations),
            init: cfg.get_or("misi", "init", d.misi.init)?,
            mask: cfg.get_or("misi", "mask", d.misi.mask)?,
            r_max: cfg.get_or("misi", "r_max", d.misi.r_max)?,
            redistribute_at_zero: cfg.get_or("misi", "redistribute_at_zero", d.misi.redistribute_at_zero)?,
            write_estimates: cfg.get_or("misi", "write_estimates", d.misi.write_estimates)?,
        };

        let fit = FitSettings {
            representation: cfg.get_or("fit", "representation", d.fit.representation)?,
            magbook_size: cfg.get_or("fit", "magbook_size", d.fit.magbook_size)?,
            phasebook_size: cfg.get_or("fit", "phasebook_size", d.fit.phasebook_size)?,
            combook_size: cfg.get_or("fit", "combook_size", d.fit.combook_size)?,
            loss: cfg.get_or("fit", "loss", d.fit.loss)?,
            norm: cfg.get_or("fit", "norm", d.fit.norm)?,
            iterations: cfg.get_or("fit", "iterations", d.fit.iterations)?,
            step: cfg.get_or("fit", "step", d.fit.step)?,
            utterance: cfg.get_or("fit", "utterance", d.fit.utterance)?,
            train_atoms: cfg.get_or("fit", "train_atoms", d.fit.train_atoms)?,
            track_sisdr: cfg.get_or("fit", "track_sisdr", d.fit.track_sisdr)?,
        };

        let eval = EvalSettings {
            estimates: cfg.get_path("eval", "estimates"),
        };

        let gradcheck = GradcheckSettings {
            losses: cfg.get_list("gradcheck", "losses")?.unwrap_or(d.gradcheck.losses),
            representations: cfg.get_list("gradcheck", "representations")?.unwrap_or(d.gradcheck.representations),
            norm: cfg.get_or("gradcheck", "norm", d.gradcheck.norm)?,
            step: cfg.get_or("gradcheck", "step", d.gradcheck.step)?,
            tolerance: cfg.get_or("gradcheck", "tolerance", d.gradcheck.tolerance)?,
            trials: cfg.get_or("gradcheck", "trials", d.gradcheck.trials)?,
        };

        let flags = FlagLimits {
            max_guarded_fraction: cfg.get_or("flags", "max_guarded_fraction", d.flags.max_guarded_fraction)?,
            max_clamped_fraction: cfg.get_or("flags", "max_clamped_fraction", d.flags.max_clamped_fraction)?,
            max_degenerate_fraction: cfg.get_or("flags", "max_degenerate_fraction", d.flags.max_degenerate_fraction)?,
            max_objective_increase: cfg.get_or("flags", "max_objective_increase", d.flags.max_objective_increase)?,
        };

        Ok(Self {
            corpus,
            stft,
            oracle,
            codebook,
            misi,
            fit,
            eval,
            gradcheck,
            flags,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file(&ConfigFile::load(path)?)
    }

    pub fn plan(&self) -> Result<StftPlan> {
        StftPlan::new(&self.stft)
    }

    /// Records of the configured corpus: the manifest if set, otherwise the
    /// synthetic corpus for `seed`.
    pub fn records(&self, seed: u64) -> Result<Vec<MixtureRecord>> {
        let records = match &self.corpus.manifest {
            Some(path) => CorpusManifest::load(path)?.load_records()?,
            None => generate_corpus(&self.corpus.synth, seed)?,
        };
        for r in &records {
            if r.mixture.sample_rate != self.stft.sample_rate {
                return invalid(format!(
                    "record {} is sampled at {} Hz, STFT expects {} Hz",
                    r.id, r.mixture.sample_rate, self.stft.sample_rate
                ));
            }
        }
        Ok(records)
    }
}

/// Command-line overrides shared by every command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub seed: u64,
    pub out: PathBuf,
}

/// One measured invariant and its limit.
#[derive(Clone, Debug, PartialEq)]
pub struct Flag {
    pub name: String,
    pub value: f64,
    pub limit: f64,
}

impl Flag {
    pub fn new(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
        }
    }

    /// NaN values count as exceeded.
    pub fn exceeded(&self) -> bool {
        !(self.value <= self.limit)
    }
}

/// Files written and flags measured by a command.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub flags: Vec<Flag>,
}

impl Outcome {
    pub fn ok(&self) -> bool {
        self.flags.iter().all(|f| !f.exceeded())
    }

    pub fn exceeded(&self) -> Vec<&Flag> {
        self.flags.iter().filter(|f| f.exceeded()).collect()
    }
}

/// One corpus item per (mixture, source).
pub fn corpus_items(records: &[MixtureRecord], plan: &StftPlan) -> Result<Vec<CorpusItem>> {
    let mut items = Vec::new();
    for r in records {
        let x = plan.analyze(&r.mixture.samples)?;
        for s in &r.sources {
            items.push(CorpusItem::new(plan.analyze(&s.samples)?, x.clone())?);
        }
    }
    Ok(items)
}

/// Phasebook of `size` atoms; size 1 is `{0}`, the mixture phase.
pub fn uniform_or_zero_phasebook(size: usize) -> Result<Phasebook> {
    if size == 1 {
        Phasebook::new(vec![0.0])
    } else {
        uniform_phasebook(size)
    }
}

fn init_phasebook(s: &CodebookSettings, items: &[CorpusItem], seed: u64) -> Result<Phasebook> {
    match s.init {
        CodebookInit::Uniform => uniform_or_zero_phasebook(s.size),
        CodebookInit::Random => random_phasebook(items, s.size, seed),
        CodebookInit::File => Phasebook::load(s.file.as_ref().expect("checked when parsing")),
    }
}

fn init_magbook(s: &CodebookSettings, items: &[CorpusItem], seed: u64) -> Result<Magbook> {
    match s.init {
        CodebookInit::Uniform => Magbook::new((0..s.magbook_size).map(|i| s.r_max * i as f64 / (s.magbook_size.max(2) - 1) as f64).collect()),
        CodebookInit::Random => random_magbook(items, s.magbook_size, s.r_max, seed),
        CodebookInit::File => Magbook::load(s.magbook_file.as_ref().expect("checked when parsing")),
    }
}

fn init_combook(s: &CodebookSettings, items: &[CorpusItem], seed: u64) -> Result<Combook> {
    match s.init {
        CodebookInit::Uniform => {
            // zero plus rings of phasors at radii up to r_max
            let n = s.size;
            if n == 0 {
                return invalid("combook size must be positive");
            }
            let mut atoms = vec![crate::signal::C64::new(0.0, 0.0)];
            let rest = n - 1;
            for k in 0..rest {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / rest as f64;
                atoms.push(crate::signal::C64::from_polar(1.0, angle));
            }
            Combook::new(atoms)
        }
        CodebookInit::Random => random_combook(items, s.size, s.r_max, seed),
        CodebookInit::File => Combook::load(s.file.as_ref().expect("checked when parsing")),
    }
}

/// MISI configuration for `iterations`.
pub fn misi_config(s: &MisiSettings, iterations: usize) -> MisiConfig {
    MisiConfig {
        iterations,
        redistribute_at_zero: s.redistribute_at_zero,
    }
}

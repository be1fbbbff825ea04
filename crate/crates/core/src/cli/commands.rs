//! Command implementations. Each writes its CSV files through a single
//! writer after the parallel work is done.

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::oracle::oracle_study;
use super::{
    corpus_items, init_combook, init_magbook, init_phasebook, misi_config, uniform_or_zero_phasebook, CodebookKind,
    CodebookSettings, ExperimentConfig, Flag, GradcheckSettings, MisiInit, Outcome, ReprKind, RunOptions,
};
use crate::codebook::{CodebookText, Combook, Magbook};
use crate::codebook_opt::{optimize_combook, optimize_magbook_phasebook, optimize_phasebook, random_combook, MagnitudeSource, OptReport};
use crate::dataio::{load_real, read_wav, synth_corpus, write_wav, MixtureRecord, WavFormat};
use crate::error::{invalid, shape, Error, Result};
use crate::grad::{check_model_gradient, fit_logits, forward_backward, FitConfig, LogitInit, LossSpec, Model, Objective, Problem, Representation};
use crate::metrics::{evaluate_corpus, median, si_sdr};
use crate::misi::misi;
use crate::oracle_masks::{oracle_mask, wrapped_angle};
use crate::signal::{StftConfig, StftPlan, Waveform};
use crate::tf::TfGrid;

fn create(out: &Path, name: &str) -> Result<(PathBuf, BufWriter<fs::File>)> {
    fs::create_dir_all(out)?;
    let path = out.join(name);
    let file = fs::File::create(&path)?;
    Ok((path, BufWriter::new(file)))
}

fn write_file(outcome: &mut Outcome, out: &Path, name: &str, body: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let (path, mut w) = create(out, name)?;
    body(&mut w)?;
    w.flush()?;
    outcome.files.push(path);
    Ok(())
}

/// Oracle-mask grid; writes `oracle_study.csv` and, when phasebooks are
/// part of the grid, `oracle_phasebooks.csv`.
pub fn run_oracle_study(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    let records = cfg.records(opts.seed)?;
    let plan = cfg.plan()?;
    info!("oracle study on {} mixtures", records.len());
    let study = oracle_study(&cfg.oracle, &records, &plan)?;
    let mut outcome = Outcome::default();
    write_file(&mut outcome, &opts.out, "oracle_study.csv", |w| study.write_csv(w))?;
    if !study.phasebooks.is_empty() {
        write_file(&mut outcome, &opts.out, "oracle_phasebooks.csv", |w| study.write_phasebooks_csv(w))?;
    }
    outcome.flags.push(Flag::new("guarded_fraction", study.guarded_fraction, cfg.flags.max_guarded_fraction));
    for (r, frac) in &study.clamped_fraction {
        outcome.flags.push(Flag::new(format!("clamped_fraction@r_max={r}"), *frac, cfg.flags.max_clamped_fraction));
    }
    for book in &study.phasebooks {
        if let Some(rep) = &book.report {
            outcome.flags.push(Flag::new(
                format!("em_increase@P={},r_max={}", book.size, book.r_max),
                rep.max_relative_increase(),
                cfg.flags.max_objective_increase,
            ));
        }
    }
    Ok(outcome)
}

fn write_report(outcome: &mut Outcome, out: &Path, report: &OptReport) -> Result<()> {
    write_file(outcome, out, "opt_objective.csv", |w| {
        writeln!(w, "epoch,objective")?;
        for (e, v) in report.epoch_objective.iter().enumerate() {
            writeln!(w, "{e},{v:.12e}")?;
        }
        Ok(())
    })?;
    write_file(outcome, out, "opt_steps.csv", |w| {
        writeln!(w, "step,objective")?;
        for (e, v) in report.step_objective.iter().enumerate() {
            writeln!(w, "{e},{v:.12e}")?;
        }
        Ok(())
    })?;
    write_file(outcome, out, "opt_atoms.csv", |w| {
        let width = report.atoms_per_epoch.first().map_or(0, Vec::len);
        let header: Vec<String> = (0..width).map(|k| format!("atom_{k}")).collect();
        writeln!(w, "epoch,{}", header.join(","))?;
        for (e, atoms) in report.atoms_per_epoch.iter().enumerate() {
            let vals: Vec<String> = atoms.iter().map(|a| format!("{a:.12}")).collect();
            writeln!(w, "{e},{}", vals.join(","))?;
        }
        Ok(())
    })
}

fn save_text(outcome: &mut Outcome, out: &Path, name: &str, book: &impl CodebookText) -> Result<()> {
    fs::create_dir_all(out)?;
    let path = out.join(name);
    book.save(&path)?;
    outcome.files.push(path);
    Ok(())
}

/// Offline codebook optimization; writes the codebook text files and the
/// objective and atom traces.
pub fn optimize_codebook(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    let records = cfg.records(opts.seed)?;
    let plan = cfg.plan()?;
    let items = corpus_items(&records, &plan)?;
    let s: &CodebookSettings = &cfg.codebook;
    info!("optimizing a {:?} codebook on {} targets for {} epochs", s.kind, items.len(), s.epochs);
    let mut outcome = Outcome::default();
    let report = match s.kind {
        CodebookKind::Phasebook => {
            let init = init_phasebook(s, &items, opts.seed)?;
            let (pb, rep) = optimize_phasebook(&init, &items, &MagnitudeSource::OracleIam { r_max: s.r_max }, s.epochs)?;
            save_text(&mut outcome, &opts.out, "phasebook.txt", &pb)?;
            rep
        }
        CodebookKind::MagbookPhasebook => {
            let init_m = init_magbook(s, &items, opts.seed)?;
            let init_p = init_phasebook(s, &items, opts.seed.wrapping_add(1))?;
            let (mb, pb, rep) = optimize_magbook_phasebook(&init_m, &init_p, &items, s.epochs)?;
            save_text(&mut outcome, &opts.out, "magbook.txt", &mb)?;
            save_text(&mut outcome, &opts.out, "phasebook.txt", &pb)?;
            rep
        }
        CodebookKind::Combook => {
            let init = init_combook(s, &items, opts.seed)?;
            let (cb, rep) = optimize_combook(&init, &items, s.r_max, s.epochs)?;
            save_text(&mut outcome, &opts.out, "combook.txt", &cb)?;
            rep
        }
    };
    write_report(&mut outcome, &opts.out, &report)?;
    info!(
        "objective {:.6e} -> {:.6e} after {} epochs",
        report.epoch_objective[0],
        report.final_objective(),
        report.epochs_run
    );
    outcome
        .flags
        .push(Flag::new("em_increase", report.max_relative_increase(), cfg.flags.max_objective_increase));
    Ok(outcome)
}

fn representation(kind: ReprKind, mag: usize, phase: usize, combook: Combook) -> Result<Representation> {
    Ok(match kind {
        ReprKind::Magnitude => Representation::Magnitude(Magbook::uniform(mag)?),
        ReprKind::MagPhase => Representation::MagPhase(Magbook::uniform(mag)?, uniform_or_zero_phasebook(phase)?),
        ReprKind::Complex => Representation::Complex(combook),
    })
}

fn problem_for(rec: &MixtureRecord, plan: StftPlan) -> Result<Problem> {
    Problem::new(plan, rec.mixture.samples.clone(), rec.sources.iter().map(|s| s.samples.clone()).collect())
}

/// Direct-logit fit on one utterance; writes `fit_trace.csv` and
/// `fit_summary.csv`.
pub fn fit(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    let records = cfg.records(opts.seed)?;
    let s = &cfg.fit;
    let rec = records
        .get(s.utterance)
        .ok_or_else(|| Error::InvalidArgument(format!("utterance {} not in a corpus of {}", s.utterance, records.len())))?;
    let plan = cfg.plan()?;
    let combook = if s.representation == ReprKind::Complex {
        random_combook(&corpus_items(std::slice::from_ref(rec), &plan)?, s.combook_size, cfg.codebook.r_max, opts.seed)?
    } else {
        Combook::new(vec![Default::default()])?
    };
    let repr = representation(s.representation, s.magbook_size, s.phasebook_size, combook)?;
    let problem = problem_for(rec, plan)?;
    let (t, f) = problem.shape();
    let mut model = Model::new(repr.clone(), t, f, rec.sources.len(), LogitInit { seed: opts.seed, ..Default::default() })?;
    model.train_atoms = s.train_atoms;
    let objective = Objective { loss: s.loss, norm: s.norm };
    let iterations = match s.loss {
        LossSpec::Wa { iterations } => iterations,
        _ => 0,
    };
    let bound = problem.mean_sisdr(&problem.projected_oracle_masks(&repr)?, iterations)?;
    info!("fitting {} on {} ({}x{} bins), projected bound {bound:.2} dB", s.loss, rec.id, t, f);
    let config = FitConfig {
        iterations: s.iterations,
        step: s.step,
        track_sisdr: s.track_sisdr,
        ..Default::default()
    };
    let result = fit_logits(&model, &problem, objective, config)?;
    let last = *result.trace.last().expect("trace starts with the initial point");
    let final_sisdr = problem.mean_sisdr(&result.model.masks().0, iterations)?;
    let eval = forward_backward(&result.model, &problem, objective, false)?;
    let mut outcome = Outcome::default();
    write_file(&mut outcome, &opts.out, "fit_trace.csv", |w| result.write_csv(w))?;
    write_file(&mut outcome, &opts.out, "fit_summary.csv", |w| {
        writeln!(w, "utt_id,loss,norm,iterations,final_loss,final_sisdr_db,bound_sisdr_db,stalled,degenerate_bins")?;
        writeln!(
            w,
            "{},{},{},{},{:.12e},{:.6},{:.6},{},{}",
            rec.id, s.loss, s.norm, last.iter, last.loss, final_sisdr, bound, result.stalled, eval.degenerate
        )?;
        Ok(())
    })?;
    info!("final loss {:.6e}, SI-SDR {final_sisdr:.2} dB", last.loss);
    let increase = result
        .trace
        .windows(2)
        .map(|w| (w[1].loss - w[0].loss) / w[0].loss.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    outcome.flags.push(Flag::new("loss_increase", increase, cfg.flags.max_objective_increase));
    let bins = (t * f * rec.sources.len()) as f64;
    outcome
        .flags
        .push(Flag::new("degenerate_fraction", eval.degenerate as f64 / bins, cfg.flags.max_degenerate_fraction));
    Ok(outcome)
}

/// Inputs of the file-based MISI command.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MisiFiles {
    pub mixture: PathBuf,
    /// One binary real grid per source.
    pub magnitudes: Vec<PathBuf>,
    /// Initial phases, one per source, for `MisiInit::Provided`.
    pub phases: Vec<PathBuf>,
    pub iterations: Option<usize>,
    pub init: Option<MisiInit>,
}

fn initial_phases(init: MisiInit, x: &TfGrid<crate::signal::C64>, sources: usize, provided: &[PathBuf]) -> Result<Vec<TfGrid<f64>>> {
    match init {
        MisiInit::Noisy => Ok(vec![x.map(|&z| wrapped_angle(z)); sources]),
        MisiInit::Zero => Ok(vec![x.map(|_| 0.0); sources]),
        MisiInit::Provided => {
            if provided.len() != sources {
                return shape(format!("{} phase files for {sources} magnitude files", provided.len()));
            }
            provided.iter().map(load_real).collect()
        }
    }
}

/// MISI on a WAV mixture and per-source magnitude files. Writes
/// `misi_k{K}_s{i}.wav` (32-bit float) for every iteration count.
pub fn misi_files(cfg: &ExperimentConfig, opts: &RunOptions, files: &MisiFiles) -> Result<Outcome> {
    let mixture = read_wav(&files.mixture)?;
    let stft = StftConfig {
        sample_rate: mixture.sample_rate,
        ..cfg.stft.clone()
    };
    let plan = StftPlan::new(&stft)?;
    if files.magnitudes.is_empty() {
        return invalid("misi needs at least one magnitude file");
    }
    let mags: Vec<TfGrid<f64>> = files.magnitudes.iter().map(load_real).collect::<Result<_>>()?;
    let x = plan.analyze(&mixture.samples)?;
    let init = files.init.unwrap_or(cfg.misi.init);
    let phases = initial_phases(init, &x, mags.len(), &files.phases)?;
    let ks = match files.iterations {
        Some(k) => vec![k],
        None => cfg.misi.iterations.clone(),
    };
    let mut outcome = Outcome::default();
    fs::create_dir_all(&opts.out)?;
    for k in ks {
        let out = misi(&mags, &phases, &mixture.samples, misi_config(&cfg.misi, k), &plan)?;
        for (i, s) in out.sources.into_iter().enumerate() {
            let path = opts.out.join(format!("misi_k{k}_s{}.wav", i + 1));
            write_wav(&path, &Waveform::new(s, mixture.sample_rate)?, WavFormat::Float32)?;
            outcome.files.push(path);
        }
    }
    Ok(outcome)
}

struct MisiRow {
    id: String,
    source: usize,
    iterations: usize,
    sisdr: f64,
    sisdri: f64,
}

/// MISI on every corpus mixture with oracle-mask magnitudes; writes
/// `misi.csv` (per source) and `misi_summary.csv` (per iteration count).
pub fn misi_corpus(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    let s = &cfg.misi;
    if s.init == MisiInit::Provided {
        return invalid("init = provided needs phase files; use the file mode of the misi command");
    }
    let records = cfg.records(opts.seed)?;
    let plan = cfg.plan()?;
    let per_record: Vec<(Vec<MisiRow>, Vec<(usize, Vec<Vec<f64>>)>)> = records
        .par_iter()
        .map(|rec| {
            let x = plan.analyze(&rec.mixture.samples)?;
            let specs: Vec<_> = rec.sources.iter().map(|w| plan.analyze(&w.samples)).collect::<Result<_>>()?;
            let mags = specs
                .iter()
                .map(|sp| {
                    let n = x.zip_map(sp, |a, b| a - b)?;
                    let m = oracle_mask(s.mask, sp, &n, &x, s.r_max)?.mask.magnitude();
                    m.zip_map(&x, |&a, z| a.abs() * z.norm())
                })
                .collect::<Result<Vec<_>>>()?;
            let phases = initial_phases(s.init, &x, mags.len(), &[])?;
            let mut rows = Vec::new();
            let mut estimates = Vec::new();
            for &k in &s.iterations {
                let out = misi(&mags, &phases, &rec.mixture.samples, misi_config(s, k), &plan)?;
                for (i, est) in out.sources.iter().enumerate() {
                    let reference = &rec.sources[i].samples;
                    let v = si_sdr(est, reference)?;
                    rows.push(MisiRow {
                        id: rec.id.clone(),
                        source: i,
                        iterations: k,
                        sisdr: v,
                        sisdri: v - si_sdr(&rec.mixture.samples, reference)?,
                    });
                }
                if s.write_estimates {
                    estimates.push((k, out.sources));
                }
            }
            Ok((rows, estimates))
        })
        .collect::<Result<_>>()?;

    let mut outcome = Outcome::default();
    let rows: Vec<&MisiRow> = per_record.iter().flat_map(|(r, _)| r.iter()).collect();
    write_file(&mut outcome, &opts.out, "misi.csv", |w| {
        writeln!(w, "utt_id,source_idx,iterations,sisdr_db,sisdri_db")?;
        for r in &rows {
            writeln!(w, "{},{},{},{:.6},{:.6}", r.id, r.source, r.iterations, r.sisdr, r.sisdri)?;
        }
        Ok(())
    })?;
    write_file(&mut outcome, &opts.out, "misi_summary.csv", |w| {
        writeln!(w, "iterations,mean_sisdri_db,median_sisdri_db")?;
        for &k in &s.iterations {
            let v: Vec<f64> = rows.iter().filter(|r| r.iterations == k).map(|r| r.sisdri).collect();
            writeln!(w, "{k},{:.6},{:.6}", v.iter().sum::<f64>() / v.len() as f64, median(&v))?;
        }
        Ok(())
    })?;
    if s.write_estimates {
        for (rec, (_, ests)) in records.iter().zip(&per_record) {
            for (k, sources) in ests {
                let dir = opts.out.join(format!("estimates_k{k}"));
                fs::create_dir_all(&dir)?;
                for (i, est) in sources.iter().enumerate() {
                    let path = dir.join(format!("{}_s{}.wav", rec.id, i + 1));
                    write_wav(&path, &Waveform::new(est.clone(), rec.mixture.sample_rate)?, WavFormat::Float32)?;
                    outcome.files.push(path);
                }
            }
        }
    }
    Ok(outcome)
}

/// Score estimates stored as `{id}_s{k}.wav` in a directory against the
/// configured corpus; writes `eval.csv` and `eval_summary.csv`.
pub fn eval(cfg: &ExperimentConfig, opts: &RunOptions, estimates: Option<&Path>) -> Result<Outcome> {
    let dir = estimates
        .map(Path::to_path_buf)
        .or_else(|| cfg.eval.estimates.clone())
        .ok_or_else(|| Error::InvalidArgument("no estimate directory given".into()))?;
    let records = cfg.records(opts.seed)?;
    let est: Vec<Vec<Vec<f64>>> = records
        .par_iter()
        .map(|r| {
            (1..=r.sources.len())
                .map(|k| {
                    let w = read_wav(dir.join(format!("{}_s{k}.wav", r.id)))?;
                    if w.len() != r.mixture.len() {
                        return shape(format!("estimate {}_s{k} has {} samples, mixture {}", r.id, w.len(), r.mixture.len()));
                    }
                    Ok(w.samples)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let refs: Vec<Vec<Vec<f64>>> = records.iter().map(|r| r.sources.iter().map(|s| s.samples.clone()).collect()).collect();
    let mixes: Vec<Vec<f64>> = records.iter().map(|r| r.mixture.samples.clone()).collect();
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let report = evaluate_corpus(&est, &refs, &mixes, Some(&ids))?;
    let mut outcome = Outcome::default();
    write_file(&mut outcome, &opts.out, "eval.csv", |w| report.write_csv(w))?;
    write_file(&mut outcome, &opts.out, "eval_summary.csv", |w| {
        writeln!(w, "utterances,mean_sisdr_db,mean_sisdri_db,median_sisdri_db")?;
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6}",
            report.utterances.len(),
            report.mean_sisdr(),
            report.mean_sisdri(),
            report.median_sisdri()
        )?;
        Ok(())
    })?;
    info!("mean SI-SDRi {:.2} dB over {} utterances", report.mean_sisdri(), report.utterances.len());
    Ok(outcome)
}

/// One finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub loss: LossSpec,
    pub representation: ReprKind,
    pub trial: usize,
    pub group: String,
    pub max_rel_error: f64,
}

/// Random two-source problem of 8 frames by 9 bins (20 samples analysed
/// with a 16-point frame and hop 4).
pub fn tiny_problem(seed: u64) -> Result<Problem> {
    let plan = StftPlan::new(&StftConfig::new(16, 4, 16, Default::default(), 8000)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<Vec<f64>> = (0..2).map(|_| (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mix = (0..20).map(|l| refs[0][l] + refs[1][l]).collect();
    Problem::new(plan, mix, refs)
}

fn tiny_combook() -> Result<Combook> {
    use crate::signal::C64;
    Combook::new(vec![C64::new(0.0, 0.0), C64::new(1.0, 0.2), C64::new(-0.5, 0.9), C64::new(0.3, -1.1)])
}

/// Gradient checks for every configured loss and representation on random
/// problems, with logits and atoms trainable. Unsupported pairs are skipped.
pub fn gradcheck_rows(s: &GradcheckSettings, seed: u64) -> Result<Vec<GradRow>> {
    let mut jobs = Vec::new();
    for &loss in &s.losses {
        for &repr in &s.representations {
            for trial in 0..s.trials {
                jobs.push((loss, repr, trial));
            }
        }
    }
    let results: Vec<Option<Vec<GradRow>>> = jobs
        .par_iter()
        .map(|&(loss, kind, trial)| {
            let seed = seed.wrapping_mul(1000).wrapping_add(trial as u64);
            let problem = tiny_problem(seed)?;
            let repr = representation(kind, 3, 4, tiny_combook()?)?;
            let (t, f) = problem.shape();
            let init = LogitInit {
                phase_bias: 0.5,
                noise: 1.0,
                seed,
            };
            let mut model = Model::new(repr, t, f, 2, init)?;
            model.train_atoms = true;
            let objective = Objective { loss, norm: s.norm };
            match check_model_gradient(&model, &problem, objective, s.step, s.tolerance) {
                Ok(report) => Ok(Some(
                    report
                        .groups
                        .into_iter()
                        .map(|g| GradRow {
                            loss,
                            representation: kind,
                            trial,
                            group: g.name,
                            max_rel_error: g.max_rel_error,
                        })
                        .collect(),
                )),
                Err(Error::Unsupported(msg)) => {
                    warn!("skipping {loss} with {kind}: {msg}");
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().flatten().flatten().collect())
}

/// Finite-difference gradient checks; writes `gradcheck.csv` and fails when
/// any relative error reaches the tolerance.
pub fn gradcheck(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    let s = &cfg.gradcheck;
    let rows = gradcheck_rows(s, opts.seed)?;
    let mut outcome = Outcome::default();
    write_file(&mut outcome, &opts.out, "gradcheck.csv", |w| {
        writeln!(w, "loss,representation,trial,group,max_rel_error,pass")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{:.3e},{}",
                r.loss,
                r.representation,
                r.trial,
                r.group,
                r.max_rel_error,
                r.max_rel_error < s.tolerance
            )?;
        }
        Ok(())
    })?;
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    info!("{} gradient groups checked, worst relative error {worst:.3e}", rows.len());
    // strict comparison: an error equal to the tolerance fails
    outcome.flags.push(Flag::new("gradcheck_max_rel_error", worst, s.tolerance * (1.0 - f64::EPSILON)));
    Ok(outcome)
}

/// Write the configured synthetic corpus and its manifest to the output
/// directory.
pub fn synth(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    let manifest = synth_corpus(&cfg.corpus.synth, opts.seed, &opts.out, cfg.corpus.format)?;
    let mut outcome = Outcome::default();
    outcome.files.push(opts.out.join(crate::dataio::MANIFEST_FILE));
    for e in manifest.entries {
        outcome.files.push(opts.out.join(e.mixture));
        outcome.files.extend(e.sources.into_iter().map(|p| opts.out.join(p)));
    }
    info!("wrote {} files", outcome.files.len());
    Ok(outcome)
}

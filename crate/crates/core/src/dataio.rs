//! WAV files, synthetic mixture corpora, manifests and a binary format for
//! time-frequency grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::signal::{Waveform, C64};
use crate::tf::TfGrid;

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;
/// Manifest file name written by [`write_corpus`].
pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Sample encoding used when writing WAV files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WavFormat {
    #[default]
    Pcm16,
    Float32,
}

impl FromStr for WavFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcm16" | "16" => Ok(WavFormat::Pcm16),
            "float32" | "f32" => Ok(WavFormat::Float32),
            other => invalid(format!("unknown WAV format '{other}' (expected pcm16 or float32)")),
        }
    }
}

/// Read a mono 16-bit PCM or 32-bit float WAV file. PCM samples are scaled
/// by `1/32768`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Unsupported(format!("{}: {} channels, only mono is supported", path.display(), spec.channels)));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Unsupported(format!("{}: {bits}-bit {fmt:?} samples", path.display())));
        }
    };
    if samples.is_empty() {
        return Err(Error::Empty(format!("{} has no samples", path.display())));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Write a mono WAV file. PCM samples are `round(32768 x)` clamped to
/// `[-32767, 32767]`; no dithering.
pub fn write_wav(path: impl AsRef<Path>, waveform: &Waveform, format: WavFormat) -> Result<()> {
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, hound::SampleFormat::Int),
        WavFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: waveform.sample_rate,
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &v in &waveform.samples {
        match format {
            WavFormat::Pcm16 => writer.write_sample((v * 32768.0).round().clamp(-32767.0, 32767.0) as i16)?,
            WavFormat::Float32 => writer.write_sample(v as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}

/// A mixture with its sources.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureRecord {
    pub id: String,
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
}

impl MixtureRecord {
    /// Mixture formed by summing the sources exactly.
    pub fn from_sources(id: impl Into<String>, sources: Vec<Waveform>) -> Result<Self> {
        let first = sources.first().ok_or_else(|| Error::Empty("mixture without sources".into()))?;
        let (len, sr) = (first.len(), first.sample_rate);
        if sources.iter().any(|s| s.len() != len || s.sample_rate != sr) {
            return invalid("sources differ in length or sample rate");
        }
        let mix = (0..len).map(|l| sources.iter().map(|s| s.samples[l]).sum()).collect();
        Ok(Self {
            id: id.into(),
            mixture: Waveform::new(mix, sr)?,
            sources,
        })
    }

    /// Largest deviation between the mixture and the sum of the sources.
    pub fn mixing_error(&self) -> f64 {
        (0..self.mixture.len())
            .map(|l| (self.mixture.samples[l] - self.sources.iter().map(|s| s.samples.get(l).copied().unwrap_or(0.0)).sum::<f64>()).abs())
            .fold(0.0, f64::max)
    }

    /// Check equal lengths and sample rates and additivity within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Empty(format!("record {} has no sources", self.id)));
        }
        for s in &self.sources {
            if s.len() != self.mixture.len() || s.sample_rate != self.mixture.sample_rate {
                return invalid(format!("record {}: source and mixture differ in length or rate", self.id));
            }
        }
        let err = self.mixing_error();
        if err > tol {
            return invalid(format!("record {}: mixture deviates from the source sum by {err}", self.id));
        }
        Ok(())
    }
}

/// Families of synthetic source signals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SourceKind {
    SinusoidBank,
    Chirp,
    FilteredNoise,
    /// Harmonic tone with jittered pitch and a syllable-rate envelope.
    SpeechLikeAm,
}

impl SourceKind {
    pub const ALL: [SourceKind; 4] = [SourceKind::SinusoidBank, SourceKind::Chirp, SourceKind::FilteredNoise, SourceKind::SpeechLikeAm];
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::SinusoidBank => "sinusoid-bank",
            SourceKind::Chirp => "chirp",
            SourceKind::FilteredNoise => "filtered-noise",
            SourceKind::SpeechLikeAm => "speech-like-am",
        })
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SourceKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown source kind '{s}'")))
    }
}

/// Parameters of a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub sources: usize,
    pub kinds: Vec<SourceKind>,
    /// Energy ratio range (dB) of the first source over each other source.
    pub snr_db: (f64, f64),
    /// Highest frequency any source may contain (Hz).
    pub max_freq: f64,
    /// Fixed frequency band per source; random bands when `None`.
    pub bands: Option<Vec<(f64, f64)>>,
    /// Peak absolute value of each mixture.
    pub peak: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 20,
            duration_s: 1.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            sources: 2,
            kinds: SourceKind::ALL.to_vec(),
            snr_db: (-5.0, 5.0),
            max_freq: 3600.0,
            bands: None,
            peak: 0.9,
        }
    }
}

const MIN_FREQ: f64 = 60.0;
const FADE_S: f64 = 0.02;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.count == 0 || self.sources == 0 || self.kinds.is_empty() {
            return invalid("synthetic corpus needs a positive count, sources and kinds");
        }
        if !(self.duration_s > 0.0) || (self.duration_s * self.sample_rate as f64) < 1.0 {
            return invalid(format!("duration {} s gives no samples", self.duration_s));
        }
        if !(self.max_freq > MIN_FREQ * 2.0) || self.max_freq >= nyquist {
            return invalid(format!("max_freq {} must lie in ({}, {nyquist})", self.max_freq, 2.0 * MIN_FREQ));
        }
        if !(self.snr_db.0 <= self.snr_db.1) || !self.snr_db.0.is_finite() || !self.snr_db.1.is_finite() {
            return invalid(format!("invalid SNR range {:?}", self.snr_db));
        }
        if !(self.peak > 0.0 && self.peak <= 1.0) {
            return invalid(format!("peak {} must lie in (0, 1]", self.peak));
        }
        if let Some(bands) = &self.bands {
            if bands.len() != self.sources {
                return invalid(format!("{} bands for {} sources", bands.len(), self.sources));
            }
            for &(lo, hi) in bands {
                if !(lo > 0.0 && lo < hi && hi < nyquist) {
                    return invalid(format!("band ({lo}, {hi}) must satisfy 0 < lo < hi < {nyquist}"));
                }
            }
        }
        Ok(())
    }

    fn samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

/// Bands of equal width for every source. Each source after the first is
/// shifted from the first band by a random fraction of the width, so the
/// spectral overlap of a pair ranges from complete to none.
fn random_bands(rng: &mut ChaCha8Rng, sources: usize, max_freq: f64) -> Vec<(f64, f64)> {
    let span = max_freq - MIN_FREQ;
    let width = rng.gen_range(0.3..0.6) * span;
    let lo = rng.gen_range(MIN_FREQ..max_freq - width);
    let mut bands = vec![(lo, lo + width)];
    for _ in 1..sources {
        let shift = rng.gen_range(0.0..1.0) * width * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let l = (lo + shift).clamp(MIN_FREQ, max_freq - width);
        bands.push((l, l + width));
    }
    bands
}

fn sinusoid_bank(rng: &mut ChaCha8Rng, n: usize, sr: f64, band: (f64, f64)) -> Vec<f64> {
    let partials: Vec<(f64, f64, f64)> = (0..rng.gen_range(3..7))
        .map(|_| (rng.gen_range(band.0..band.1), rng.gen_range(0.2..1.0), rng.gen_range(-PI..PI)))
        .collect();
    (0..n)
        .map(|l| {
            let t = l as f64 / sr;
            partials.iter().map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum()
        })
        .collect()
}

fn chirp(rng: &mut ChaCha8Rng, n: usize, sr: f64, band: (f64, f64)) -> Vec<f64> {
    let (f0, f1) = if rng.gen_bool(0.5) { band } else { (band.1, band.0) };
    let dur = n as f64 / sr;
    let p0 = rng.gen_range(-PI..PI);
    (0..n)
        .map(|l| {
            let t = l as f64 / sr;
            (p0 + 2.0 * PI * (f0 * t + 0.5 * (f1 - f0) / dur * t * t)).sin()
        })
        .collect()
}

fn filtered_noise(rng: &mut ChaCha8Rng, n: usize, sr: f64, band: (f64, f64)) -> Vec<f64> {
    let mut buf: Vec<C64> = (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let freq = k.min(n - k) as f64 * sr / n as f64;
        if freq < band.0 || freq > band.1 {
            *v = C64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|v| v.re / n as f64).collect()
}

fn speech_like(rng: &mut ChaCha8Rng, n: usize, sr: f64, band: (f64, f64)) -> Vec<f64> {
    let f0 = rng.gen_range(90.0..250.0);
    let vibrato = rng.gen_range(2.0..6.0);
    let depth = rng.gen_range(0.02..0.08);
    let rate = rng.gen_range(3.0..6.0);
    let env_phase = rng.gen_range(0.0..2.0 * PI);
    let mut phase = 0.0;
    (0..n)
        .map(|l| {
            let t = l as f64 / sr;
            let pitch = f0 * (1.0 + depth * (2.0 * PI * vibrato * t).sin());
            phase += 2.0 * PI * pitch / sr;
            let env = 0.5 * (1.0 + (2.0 * PI * rate * t + env_phase).sin());
            let mut v = 0.0;
            let mut h = 1.0;
            while h * pitch < band.1 {
                if h * pitch >= band.0 {
                    v += (h * phase).sin() / h;
                }
                h += 1.0;
            }
            env * env * v
        })
        .collect()
}

/// Raised-cosine fade at both ends so the signal edges do not spread energy
/// outside the source band.
fn fade_edges(v: &mut [f64], len: usize) {
    let len = len.min(v.len() / 2);
    let n = v.len();
    for l in 0..len {
        let g = 0.5 * (1.0 - (PI * (l as f64 + 0.5) / len as f64).cos());
        v[l] *= g;
        v[n - 1 - l] *= g;
    }
}

fn rescale(v: &mut [f64], energy: f64) {
    let e: f64 = v.iter().map(|x| x * x).sum();
    if e > 0.0 {
        let g = (energy / e).sqrt();
        v.iter_mut().for_each(|x| *x *= g);
    }
}

fn synth_record(spec: &SynthSpec, seed: u64, index: usize) -> Result<MixtureRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let n = spec.samples();
    let sr = spec.sample_rate as f64;
    let bands = match &spec.bands {
        Some(b) => b.clone(),
        None => random_bands(&mut rng, spec.sources, spec.max_freq),
    };
    let mut signals = Vec::with_capacity(spec.sources);
    for (k, &band) in bands.iter().enumerate() {
        let kind = spec.kinds[rng.gen_range(0..spec.kinds.len())];
        let mut v = match kind {
            SourceKind::SinusoidBank => sinusoid_bank(&mut rng, n, sr, band),
            SourceKind::Chirp => chirp(&mut rng, n, sr, band),
            SourceKind::FilteredNoise => filtered_noise(&mut rng, n, sr, band),
            SourceKind::SpeechLikeAm => speech_like(&mut rng, n, sr, band),
        };
        fade_edges(&mut v, (FADE_S * sr) as usize);
        let snr = if k == 0 { 0.0 } else { rng.gen_range(spec.snr_db.0..=spec.snr_db.1) };
        rescale(&mut v, n as f64 * 10f64.powf(-snr / 10.0));
        signals.push(v);
    }
    let peak = (0..n)
        .map(|l| signals.iter().map(|s| s[l]).sum::<f64>().abs())
        .chain(signals.iter().flat_map(|s| s.iter().map(|v| v.abs())))
        .fold(0.0, f64::max);
    if peak > 0.0 {
        let g = spec.peak / peak;
        signals.iter_mut().for_each(|s| s.iter_mut().for_each(|v| *v *= g));
    }
    let sources = signals
        .into_iter()
        .map(|s| Waveform::new(s, spec.sample_rate))
        .collect::<Result<_>>()?;
    MixtureRecord::from_sources(format!("mix{index:04}"), sources)
}

/// Generate a corpus in memory. Each entry draws from its own random stream,
/// so the result is identical however the work is scheduled.
pub fn generate_corpus(spec: &SynthSpec, seed: u64) -> Result<Vec<MixtureRecord>> {
    spec.validate()?;
    (0..spec.count).into_par_iter().map(|i| synth_record(spec, seed, i)).collect()
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub mixture: PathBuf,
    pub sources: Vec<PathBuf>,
}

/// List of mixtures and their sources on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusManifest {
    pub sample_rate: u32,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    /// Tab-separated `id, mixture, sources...` lines after a
    /// `# sample_rate=N` header. Relative paths are kept as given.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = fs::File::create(path)?;
        writeln!(out, "# sample_rate={}", self.sample_rate)?;
        for e in &self.entries {
            let mut fields = vec![e.id.clone(), e.mixture.display().to_string()];
            fields.extend(e.sources.iter().map(|p| p.display().to_string()));
            writeln!(out, "{}", fields.join("\t"))?;
        }
        Ok(())
    }

    /// Parse a manifest; relative paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let reader = BufReader::new(fs::File::open(path)?);
        let mut sample_rate = DEFAULT_SAMPLE_RATE;
        let mut entries = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(comment) = trimmed.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("sample_rate=") {
                    sample_rate = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Format(format!("{}:{}: bad sample rate '{v}'", path.display(), n + 1)))?;
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 3 {
                return Err(Error::Format(format!(
                    "{}:{}: expected id, mixture and at least one source",
                    path.display(),
                    n + 1
                )));
            }
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                mixture: resolve(fields[1]),
                sources: fields[2..].iter().map(|p| resolve(p)).collect(),
            });
        }
        if entries.is_empty() {
            return Err(Error::Empty(format!("manifest {} lists no mixtures", path.display())));
        }
        Ok(Self { sample_rate, entries })
    }

    /// Read every listed file, checking sample rates and lengths.
    pub fn load_records(&self) -> Result<Vec<MixtureRecord>> {
        self.entries
            .par_iter()
            .map(|e| {
                let mixture = read_wav(&e.mixture)?;
                let sources = e.sources.iter().map(read_wav).collect::<Result<Vec<_>>>()?;
                let rec = MixtureRecord {
                    id: e.id.clone(),
                    mixture,
                    sources,
                };
                if rec.mixture.sample_rate != self.sample_rate || rec.sources.iter().any(|s| s.sample_rate != self.sample_rate) {
                    return invalid(format!("record {}: sample rate differs from manifest ({})", e.id, self.sample_rate));
                }
                if rec.sources.iter().any(|s| s.len() != rec.mixture.len()) {
                    return invalid(format!("record {}: source and mixture lengths differ", e.id));
                }
                Ok(rec)
            })
            .collect()
    }
}

/// Write every record as WAV files under `dir` plus a manifest with paths
/// relative to `dir`.
pub fn write_corpus(records: &[MixtureRecord], dir: impl AsRef<Path>, format: WavFormat) -> Result<CorpusManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let sample_rate = records.first().ok_or_else(|| Error::Empty("no records to write".into()))?.mixture.sample_rate;
    let entries = records
        .par_iter()
        .map(|r| {
            let mix = PathBuf::from(format!("{}_mix.wav", r.id));
            write_wav(dir.join(&mix), &r.mixture, format)?;
            let mut sources = Vec::new();
            for (k, s) in r.sources.iter().enumerate() {
                let p = PathBuf::from(format!("{}_s{}.wav", r.id, k + 1));
                write_wav(dir.join(&p), s, format)?;
                sources.push(p);
            }
            Ok(ManifestEntry {
                id: r.id.clone(),
                mixture: mix,
                sources,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = CorpusManifest { sample_rate, entries };
    manifest.save(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Generate a corpus and write it to `dir`.
pub fn synth_corpus(spec: &SynthSpec, seed: u64, dir: impl AsRef<Path>, format: WavFormat) -> Result<CorpusManifest> {
    write_corpus(&generate_corpus(spec, seed)?, dir, format)
}

const TF_MAGIC: &[u8; 4] = b"MBTF";
const TF_VERSION: u32 = 1;
const TF_HEADER: usize = 20;

/// Contents of a binary time-frequency file.
#[derive(Clone, Debug, PartialEq)]
pub enum TfData {
    Real(TfGrid<f64>),
    Complex(TfGrid<C64>),
}

impl TfData {
    fn dtype(&self) -> u32 {
        match self {
            TfData::Real(_) => 1,
            TfData::Complex(_) => 2,
        }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            TfData::Real(g) => g.shape(),
            TfData::Complex(g) => g.shape(),
        }
    }
}

/// Encode as: magic `MBTF`, then little-endian u32 version, frames, bins,
/// dtype (1 real, 2 complex) and row-major little-endian f64 values
/// (complex as re, im).
pub fn encode_tf(data: &TfData) -> Result<Vec<u8>> {
    let (t, f) = data.shape();
    if t == 0 || f == 0 {
        return Err(Error::Empty("time-frequency grid with no bins".into()));
    }
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("dimension {v} too large")));
    let mut out = Vec::with_capacity(TF_HEADER + t * f * 16);
    out.extend_from_slice(TF_MAGIC);
    for v in [TF_VERSION, to_u32(t)?, to_u32(f)?, data.dtype()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match data {
        TfData::Real(g) => g.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        TfData::Complex(g) => g.iter().for_each(|v| {
            out.extend_from_slice(&v.re.to_le_bytes());
            out.extend_from_slice(&v.im.to_le_bytes());
        }),
    }
    Ok(out)
}

pub fn decode_tf(bytes: &[u8]) -> Result<TfData> {
    if bytes.len() < TF_HEADER {
        return Err(Error::Format(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != TF_MAGIC {
        return Err(Error::Format("bad magic, not a time-frequency file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let (version, t, f, dtype) = (word(0), word(1) as usize, word(2) as usize, word(3));
    if version != TF_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if t == 0 || f == 0 {
        return Err(Error::Format(format!("empty grid {t}x{f}")));
    }
    let width = match dtype {
        1 => 1,
        2 => 2,
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    let expected = t
        .checked_mul(f)
        .and_then(|n| n.checked_mul(8 * width))
        .ok_or_else(|| Error::Format("grid size overflows".into()))?;
    let payload = &bytes[TF_HEADER..];
    if payload.len() != expected {
        return Err(Error::Format(format!("payload has {} bytes, expected {expected}", payload.len())));
    }
    let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(match dtype {
        1 => TfData::Real(TfGrid::from_vec(t, f, values)?),
        _ => TfData::Complex(TfGrid::from_vec(t, f, values.chunks_exact(2).map(|c| C64::new(c[0], c[1])).collect())?),
    })
}

pub fn save_tf(path: impl AsRef<Path>, data: &TfData) -> Result<()> {
    fs::write(path, encode_tf(data)?)?;
    Ok(())
}

pub fn load_tf(path: impl AsRef<Path>) -> Result<TfData> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_tf(&bytes)
}

pub fn save_spectrogram(path: impl AsRef<Path>, spec: &TfGrid<C64>) -> Result<()> {
    save_tf(path, &TfData::Complex(spec.clone()))
}

pub fn load_spectrogram(path: impl AsRef<Path>) -> Result<TfGrid<C64>> {
    match load_tf(path)? {
        TfData::Complex(g) => Ok(g),
        TfData::Real(_) => Err(Error::Format("expected a complex grid, found a real one".into())),
    }
}

pub fn save_real(path: impl AsRef<Path>, grid: &TfGrid<f64>) -> Result<()> {
    save_tf(path, &TfData::Real(grid.clone()))
}

pub fn load_real(path: impl AsRef<Path>) -> Result<TfGrid<f64>> {
    match load_tf(path)? {
        TfData::Real(g) => Ok(g),
        TfData::Complex(_) => Err(Error::Format("expected a real grid, found a complex one".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tf_encoding_round_trip_and_errors() {
        let g = TfGrid::from_fn(3, 4, |t, f| C64::new(t as f64 * 0.1 + 1e-300, -(f as f64) / 3.0));
        let bytes = encode_tf(&TfData::Complex(g.clone())).unwrap();
        assert_eq!(decode_tf(&bytes).unwrap(), TfData::Complex(g));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tf(&bad).is_err());
        assert!(decode_tf(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_tf(&bytes[..10]).is_err());
        let mut zero = bytes.clone();
        zero[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(decode_tf(&zero).is_err());
        assert!(encode_tf(&TfData::Real(TfGrid::filled(0, 3, 0.0))).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec::default().validate().is_ok());
        let over = SynthSpec { max_freq: 4000.0, ..Default::default() };
        assert!(over.validate().is_err());
        let bands = SynthSpec {
            bands: Some(vec![(100.0, 5000.0), (200.0, 300.0)]),
            ..Default::default()
        };
        assert!(bands.validate().is_err());
        let count = SynthSpec { count: 0, ..Default::default() };
        assert!(count.validate().is_err());
        assert_eq!("chirp".parse::<SourceKind>().unwrap(), SourceKind::Chirp);
        assert!("noise".parse::<SourceKind>().is_err());
    }

    #[test]
    fn records_are_exact_sums() {
        let spec = SynthSpec { count: 4, duration_s: 0.25, ..Default::default() };
        for r in generate_corpus(&spec, 1).unwrap() {
            assert_eq!(r.mixing_error(), 0.0);
            assert!(r.mixture.samples.iter().all(|v| v.abs() <= 0.9 + 1e-12));
        }
    }
}

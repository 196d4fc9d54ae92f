//! End-to-end sessions: load or synthesize a record, digitize it, run the
//! chip under a modeled host, score the detections and write artifacts.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ccu::{unframe, FrameWord};
use crate::chip::{ChipConfig, ChipError, ChipModel, ChipStats};
use crate::detector::{DetectionEvent, DetectorEvent, RateReport};
use crate::fifo_cdc::{run_two_clock_sim, CdcError, ClockProcess, ConsumerPolicy, FifoConfig, TwoClockSim};
use crate::host::{HostClient, HostError, HostStats};
use crate::signal_io::{
    ingest_record, resample_to_256, AdcModel, RawSample, RecordFormat, SignalError, SAMPLE_RATE_HZ,
};
use crate::spi_link::Command;

/// ±75 ms at 256 Hz.
pub const MATCH_WINDOW_SAMPLES: u64 = 19;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("annotation file {path}, line {line}: {message}")]
    Annotation { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Chip(#[from] ChipError),
    #[error("host: {0}")]
    Host(#[from] HostError),
    #[error("conservation violated: {detail}\n{excerpt}")]
    Conservation { detail: String, excerpt: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl HarnessError {
    /// Whether this is a broken model property rather than bad input.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(
            self,
            HarnessError::Conservation { .. } | HarnessError::Invariant(_) | HarnessError::Host(_)
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Sinusoidal baseline wander.
    pub drift_mv: f64,
    pub drift_hz: f64,
    /// Power-line tone.
    pub tone_mv: f64,
    pub tone_hz: f64,
    /// Mean single-sample impulses per second, each of random sign.
    pub impulse_rate_hz: f64,
    pub impulse_mv: f64,
    /// White gaussian noise.
    pub gaussian_sigma_mv: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            drift_mv: 0.0,
            drift_hz: 0.3,
            tone_mv: 0.0,
            tone_hz: 50.0,
            impulse_rate_hz: 0.0,
            impulse_mv: 0.0,
            gaussian_sigma_mv: 0.0,
        }
    }
}

impl NoiseSpec {
    /// Drift, mains tone, impulses and a little white noise at moderate
    /// amplitude relative to a 1 mV R wave.
    pub fn moderate() -> Self {
        Self {
            drift_mv: 0.5,
            drift_hz: 0.3,
            tone_mv: 0.1,
            tone_hz: 50.0,
            impulse_rate_hz: 2.0,
            impulse_mv: 0.5,
            gaussian_sigma_mv: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub bpm: f64,
    pub duration_s: f64,
    /// Peak of the triangular R wave.
    pub r_amplitude_mv: f64,
    pub noise: NoiseSpec,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            bpm: 60.0,
            duration_s: 60.0,
            r_amplitude_mv: 1.0,
            noise: NoiseSpec::default(),
        }
    }
}

/// A generated record with its ground truth and components.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEcg {
    pub samples: Vec<RawSample>,
    /// R apex sample indices.
    pub peaks: Vec<u64>,
    /// The QRS train alone.
    pub clean: Vec<f64>,
    /// The baseline-wander component alone.
    pub drift: Vec<f64>,
}

/// R waves are triangles 80 ms wide at the base.
pub const R_HALF_WIDTH_S: f64 = 0.04;

/// Sums a triangular R-wave train at `bpm` with the requested noise. Apexes
/// fall on whole samples: beat `k` is at `round(P/2 + k·P)` where `P` is the
/// beat period in samples.
pub fn generate_synthetic_ecg(
    bpm: f64,
    duration_s: f64,
    r_amplitude_mv: f64,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<SyntheticEcg, HarnessError> {
    if !(20.0..=250.0).contains(&bpm) {
        return Err(HarnessError::Config(format!("bpm {bpm} outside 20..=250")));
    }
    if !(duration_s.is_finite() && duration_s >= 0.0) {
        return Err(HarnessError::Config("duration must be finite and non-negative".into()));
    }
    let fs = f64::from(SAMPLE_RATE_HZ);
    let n = (duration_s * fs).round() as usize;
    let period = 60.0 * fs / bpm;
    let peaks: Vec<u64> = (0..)
        .map(|k| (period / 2.0 + k as f64 * period).round() as u64)
        .take_while(|&p| (p as usize) < n)
        .collect();
    let half = R_HALF_WIDTH_S * fs;
    let mut clean = vec![0.0; n];
    for &p in &peaks {
        let lo = (p as f64 - half).ceil().max(0.0) as usize;
        let hi = ((p as f64 + half).floor() as usize).min(n.saturating_sub(1));
        for (i, c) in clean.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let d = (i as f64 - p as f64).abs();
            *c += r_amplitude_mv * (1.0 - d / half).max(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = if noise.gaussian_sigma_mv > 0.0 {
        Some(Normal::new(0.0, noise.gaussian_sigma_mv).map_err(|e| HarnessError::Config(e.to_string()))?)
    } else {
        None
    };
    let p_impulse = (noise.impulse_rate_hz / fs).clamp(0.0, 1.0);
    let mut drift = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n);
    for (i, &c) in clean.iter().enumerate() {
        let t = i as f64 / fs;
        let d = noise.drift_mv * (2.0 * PI * noise.drift_hz * t).sin();
        let tone = noise.tone_mv * (2.0 * PI * noise.tone_hz * t).sin();
        let impulse = if p_impulse > 0.0 && rng.random_bool(p_impulse) {
            if rng.random_bool(0.5) {
                noise.impulse_mv
            } else {
                -noise.impulse_mv
            }
        } else {
            0.0
        };
        let white = gauss.map_or(0.0, |g| g.sample(&mut rng));
        drift.push(d);
        samples.push(RawSample {
            t: i as u64,
            v: c + d + tone + impulse + white,
        });
    }
    Ok(SyntheticEcg {
        samples,
        peaks,
        clean,
        drift,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    /// TP / (TP + FN); absent with no reference beats.
    pub sensitivity: Option<f64>,
    /// TP / (TP + FP); absent with no detections.
    pub positive_predictivity: Option<f64>,
}

/// Greedy one-to-one matching of two sorted index lists within ±`window`.
pub fn score_detections(events: &[u64], truth: &[u64], window: u64) -> DetectionScore {
    let (mut i, mut j) = (0, 0);
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    while i < events.len() && j < truth.len() {
        let (e, t) = (events[i], truth[j]);
        if e.abs_diff(t) <= window {
            tp += 1;
            i += 1;
            j += 1;
        } else if e < t {
            fp += 1;
            i += 1;
        } else {
            fn_ += 1;
            j += 1;
        }
    }
    fp += (events.len() - i) as u64;
    fn_ += (truth.len() - j) as u64;
    let ratio = |a: u64, b: u64| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    DetectionScore {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        sensitivity: ratio(tp, fn_),
        positive_predictivity: ratio(tp, fp),
    }
}

/// Reads one sample index per line (first comma-separated field). A
/// non-numeric first line is taken as a header.
pub fn read_index_csv(path: &Path) -> Result<Vec<u64>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_index_csv(&text).map_err(|(line, message)| HarnessError::Annotation {
        path: path.to_path_buf(),
        line,
        message,
    })
}

pub fn parse_index_csv(text: &str) -> Result<Vec<u64>, (usize, String)> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let field = line.split(',').next().unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        match field.parse::<u64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => {}
            Err(e) => return Err((i + 1, format!("{field:?}: {e}"))),
        }
    }
    if out.windows(2).any(|w| w[0] > w[1]) {
        return Err((0, "indices must be sorted".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Input record; a synthetic record is generated when absent.
    pub record: Option<PathBuf>,
    pub format: RecordFormat,
    /// Reference beat indices at the record's own rate.
    pub annotations: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub adc: AdcModel,
    pub chip: ChipConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Write FIFO and SPI transcripts.
    pub transcripts: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            record: None,
            format: RecordFormat::Csv {
                rate_hz: SAMPLE_RATE_HZ,
            },
            annotations: None,
            synthetic: SyntheticConfig::default(),
            adc: AdcModel::default(),
            chip: ChipConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            transcripts: true,
        }
    }
}

impl RunConfig {
    /// Parses TOML text, then applies `key.path=value` overrides. Values are
    /// read as TOML literals, falling back to plain strings.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, key.trim(), parse_literal(raw.trim()))?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(io_err(p))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks settings and that referenced files exist.
    pub fn validate(&self) -> Result<(), HarnessError> {
        for p in self.record.iter().chain(&self.annotations) {
            if !p.is_file() {
                return Err(HarnessError::Config(format!("{} does not exist", p.display())));
            }
        }
        if self.annotations.is_some() && self.record.is_none() {
            return Err(HarnessError::Config("annotations need a record".into()));
        }
        self.adc.validate()?;
        self.chip.detector.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.chip.fifo.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.chip.timing.validate()?;
        self.chip.spi_mode()?;
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), HarnessError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| HarnessError::Config(format!("empty key in {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("{p} in {key:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Digitized input plus its reference beats.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    pub codes: Vec<u16>,
    pub truth: Option<Vec<u64>>,
}

pub fn prepare_input(config: &RunConfig) -> Result<PreparedInput, HarnessError> {
    let (samples, truth) = match &config.record {
        Some(path) => {
            let rec = ingest_record(path, config.format)?;
            let samples = if rec.samples.is_empty() {
                Vec::new()
            } else {
                resample_to_256(&rec.samples, rec.source_rate_hz)?
            };
            let truth = match &config.annotations {
                Some(a) => {
                    let rate = u64::from(rec.source_rate_hz);
                    let first = rec.samples.first().map_or(0, |s| s.t);
                    let idx = read_index_csv(a)?
                        .into_iter()
                        .map(|i| (i.saturating_sub(first) * u64::from(SAMPLE_RATE_HZ) + rate / 2) / rate)
                        .collect();
                    Some(idx)
                }
                None => None,
            };
            (samples, truth)
        }
        None => {
            let s = &config.synthetic;
            let ecg = generate_synthetic_ecg(s.bpm, s.duration_s, s.r_amplitude_mv, &s.noise, config.seed)?;
            (ecg.samples, Some(ecg.peaks))
        }
    };
    let codes = config.adc.quantize_all(&samples).into_iter().map(|c| c.code()).collect();
    Ok(PreparedInput { codes, truth })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub samples: usize,
    pub detections: usize,
    pub heart_rate_reports: usize,
    pub score: Option<DetectionScore>,
    pub chip: ChipStats,
    pub host: HostStats,
    pub simulated_ps: u64,
}

#[derive(Debug, Clone)]
pub struct SessionResult {
    pub summary: SessionSummary,
    pub detections: Vec<DetectionEvent>,
    pub heart_rates: Vec<RateReport>,
    pub reconstructed: Vec<u16>,
    pub files: Vec<PathBuf>,
}

/// Runs the chip under the modeled host on prepared input, checks the
/// end-to-end invariants and returns everything needed for artifacts.
pub struct Session {
    pub chip: ChipModel,
    pub host: HostClient,
}

impl Session {
    pub fn run(chip_config: &ChipConfig, codes: Vec<u16>, transcripts: bool) -> Result<Self, HarnessError> {
        let cfg = ChipConfig {
            record_fifo_transcript: transcripts,
            ..chip_config.clone()
        };
        let mut chip = ChipModel::new(&cfg, codes)?;
        let mut host = HostClient::new(cfg.spi_mode()?, transcripts);
        // sample k is taken on clock edge k + 1 after the start command
        let end = (chip.codes().len() as u64 + 2) * chip.timing().sample_period_ps();
        host.run_closed_loop(&mut chip, end)?;
        let session = Self { chip, host };
        session.check()?;
        Ok(session)
    }

    fn excerpt(&self, around: usize) -> String {
        let lines = self.host.transcript();
        let lo = around.saturating_sub(5).min(lines.len());
        let hi = (around + 5).min(lines.len());
        lines[lo..hi].iter().map(|l| format!("  {l}\n")).collect()
    }

    fn check(&self) -> Result<(), HarnessError> {
        let sent = self.chip.codes();
        let got = &self.host.stream().ecg;
        if got != sent {
            let first = sent.iter().zip(got).position(|(a, b)| a != b).unwrap_or(sent.len().min(got.len()));
            return Err(HarnessError::Conservation {
                detail: format!(
                    "host reconstructed {} codes, ADC produced {}; first difference at index {first}",
                    got.len(),
                    sent.len()
                ),
                excerpt: self.excerpt(self.host.transcript().len()),
            });
        }
        let rr_sent: Vec<u16> = self.detections().iter().filter_map(|d| d.rr_clocks).collect();
        if self.host.stream().rr_intervals != rr_sent {
            return Err(HarnessError::Conservation {
                detail: "R-R words on the data link differ from the detector's intervals".into(),
                excerpt: String::new(),
            });
        }
        let hr_sent: Vec<u8> = self.heart_rates().iter().map(|r| r.bpm.min(255) as u8).collect();
        let hr_got: Vec<u8> = self.host.stream().heart_rates.iter().map(|h| h.0).collect();
        if hr_got != hr_sent {
            return Err(HarnessError::Conservation {
                detail: "heart-rate words on the data link differ from the detector's reports".into(),
                excerpt: String::new(),
            });
        }
        let violations = self.chip.check_invariants();
        if let Some(v) = violations.first() {
            return Err(HarnessError::Invariant(v.clone()));
        }
        Ok(())
    }

    pub fn detections(&self) -> Vec<DetectionEvent> {
        self.chip
            .events()
            .iter()
            .filter_map(|e| match e {
                DetectorEvent::Peak(p) => Some(*p),
                DetectorEvent::HeartRate(_) => None,
            })
            .collect()
    }

    pub fn heart_rates(&self) -> Vec<RateReport> {
        self.chip
            .events()
            .iter()
            .filter_map(|e| match e {
                DetectorEvent::HeartRate(r) => Some(*r),
                DetectorEvent::Peak(_) => None,
            })
            .collect()
    }
}

fn write_file(dir: &Path, name: &str, body: &str, files: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    let path = dir.join(name);
    let mut f = io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
    f.write_all(body.as_bytes()).map_err(io_err(&path))?;
    f.flush().map_err(io_err(&path))?;
    files.push(path);
    Ok(())
}

/// File names written by [`run_session`].
pub const ARTIFACTS: [&str; 8] = [
    "reconstructed_ecg.csv",
    "detections.csv",
    "heart_rate.csv",
    "score.json",
    "fifo_transcript.csv",
    "spi_transcript.csv",
    "plot_signal.csv",
    "plot_events.csv",
];

pub fn run_session(config: &RunConfig) -> Result<SessionResult, HarnessError> {
    config.validate()?;
    let input = prepare_input(config)?;
    let mut chip_cfg = config.chip.clone();
    chip_cfg.seed = config.seed;
    let session = Session::run(&chip_cfg, input.codes, config.transcripts)?;
    let detections = session.detections();
    let heart_rates = session.heart_rates();
    let score = input.truth.as_ref().map(|truth| {
        let t: Vec<u64> = detections.iter().map(|d| d.t_peak).collect();
        score_detections(&t, truth, MATCH_WINDOW_SAMPLES)
    });
    let summary = SessionSummary {
        samples: session.chip.codes().len(),
        detections: detections.len(),
        heart_rate_reports: heart_rates.len(),
        score,
        chip: session.chip.stats(),
        host: session.host.stats(),
        simulated_ps: session.host.now(),
    };

    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::new();
    let ecg = &session.host.stream().ecg;

    let mut s = String::from("index,code\n");
    for (i, c) in ecg.iter().enumerate() {
        writeln!(s, "{i},{c}").unwrap();
    }
    write_file(dir, ARTIFACTS[0], &s, &mut files)?;

    let opt = |v: Option<u16>| v.map_or(String::new(), |x| x.to_string());
    let mut s = String::from("t_peak,amplitude,rr_clocks,heart_rate_bpm\n");
    for d in &detections {
        writeln!(s, "{},{},{},{}", d.t_peak, d.amplitude, opt(d.rr_clocks), opt(d.heart_rate_bpm)).unwrap();
    }
    write_file(dir, ARTIFACTS[1], &s, &mut files)?;

    let mut s = String::from("t,bpm,provisional\n");
    for r in &heart_rates {
        writeln!(s, "{},{},{}", r.t, r.bpm, r.provisional).unwrap();
    }
    write_file(dir, ARTIFACTS[2], &s, &mut files)?;

    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(dir, ARTIFACTS[3], &(json + "\n"), &mut files)?;

    let mut s = String::from("time_ps,domain,event,pointers,flags\n");
    for l in session.chip.fifo_transcript() {
        writeln!(s, "{l}").unwrap();
    }
    write_file(dir, ARTIFACTS[4], &s, &mut files)?;

    let mut s = String::from("time_ps,bus,event,detail\n");
    for l in session.host.transcript() {
        writeln!(s, "{l}").unwrap();
    }
    write_file(dir, ARTIFACTS[5], &s, &mut files)?;

    let mut s = String::from("t,filtered,smoothed,threshold\n");
    for p in session.chip.trace() {
        let th = p.threshold.map_or(String::new(), |v| v.to_string());
        writeln!(s, "{},{},{},{th}", p.t, p.filtered, p.smoothed).unwrap();
    }
    write_file(dir, ARTIFACTS[6], &s, &mut files)?;

    let mut s = String::from("t_peak,amplitude,matched\n");
    let truth = input.truth.unwrap_or_default();
    for d in &detections {
        let matched = truth
            .binary_search_by(|t| {
                if t.abs_diff(d.t_peak) <= MATCH_WINDOW_SAMPLES {
                    std::cmp::Ordering::Equal
                } else {
                    t.cmp(&d.t_peak)
                }
            })
            .is_ok();
        writeln!(s, "{},{},{matched}", d.t_peak, d.amplitude).unwrap();
    }
    write_file(dir, ARTIFACTS[7], &s, &mut files)?;

    Ok(SessionResult {
        summary,
        reconstructed: ecg.clone(),
        detections,
        heart_rates,
        files,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuzzCampaign {
    pub runs: u32,
    /// Largest clock-period ratio. Run `i` uses ratio `i % max_ratio + 1`,
    /// with the slow side alternating every `max_ratio` runs.
    pub max_ratio: u64,
    pub metastability: f64,
    pub words_per_run: usize,
    pub seed: u64,
    pub fifo: FifoConfig,
    /// Adds the 256 Hz writer against a 1 MHz reader.
    pub include_operating_point: bool,
}

impl Default for FuzzCampaign {
    fn default() -> Self {
        Self {
            runs: 100,
            max_ratio: 50,
            metastability: 0.01,
            words_per_run: 2000,
            seed: 1,
            fifo: FifoConfig::default(),
            include_operating_point: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzRun {
    pub seed: u64,
    pub write_period: u64,
    pub read_period: u64,
    pub words: usize,
    pub consumed: usize,
    pub metastable_captures: u64,
    pub gray_transitions: u64,
    pub max_occupancy: u32,
    pub bursts: u64,
    pub gray_violations: u64,
    /// Empty when the run was lossless and in order.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzReport {
    pub runs: Vec<FuzzRun>,
}

impl FuzzReport {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.failure.is_some()).count()
    }
}

fn fuzz_one(sim: &TwoClockSim) -> Result<FuzzRun, CdcError> {
    let r = run_two_clock_sim(sim)?;
    Ok(FuzzRun {
        seed: sim.seed,
        write_period: sim.wclk.period,
        read_period: sim.rclk.period,
        words: sim.words.len(),
        consumed: r.consumed.len(),
        metastable_captures: r.metastable_captures,
        gray_transitions: r.gray_transitions,
        max_occupancy: r.max_true_occupancy,
        bursts: r.bursts,
        gray_violations: r.gray_violations,
        failure: r.check_integrity(&sim.words).err().map(|e| e.to_string()),
    })
}

/// Seeded dual-clock runs across clock ratios with metastability injection.
pub fn fifo_fuzz(c: &FuzzCampaign) -> Result<FuzzReport, HarnessError> {
    if c.max_ratio == 0 {
        return Err(HarnessError::Config("max_ratio must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut runs = Vec::new();
    let base = 1_000u64;
    let capacity = c.fifo.capacity();
    for i in 0..u64::from(c.runs) {
        let seed: u64 = rng.random();
        let ratio = i % c.max_ratio + 1;
        let (wper, rper) = if (i / c.max_ratio).is_multiple_of(2) {
            (base * ratio, base)
        } else {
            (base, base * ratio)
        };
        let words = (0..c.words_per_run).map(|_| rng.random()).collect();
        let consumer = if rng.random_bool(0.5) {
            ConsumerPolicy::Eager
        } else {
            ConsumerPolicy::Burst {
                start_at: rng.random_range(1..=capacity),
            }
        };
        let sim = TwoClockSim {
            fifo: c.fifo,
            wclk: ClockProcess::new(wper, rng.random_range(0..wper)).with_jitter(wper / 4, seed),
            rclk: ClockProcess::new(rper, rng.random_range(0..rper)).with_jitter(rper / 4, !seed),
            words,
            consumer,
            metastability: c.metastability,
            seed,
            duration: u64::MAX,
            record_transcript: false,
        };
        runs.push(fuzz_one(&sim).map_err(|e| HarnessError::Config(e.to_string()))?);
    }
    if c.include_operating_point {
        let seed: u64 = rng.random();
        let sim = TwoClockSim {
            fifo: c.fifo,
            wclk: ClockProcess::new(3_906_250_000, 0),
            rclk: ClockProcess::new(1_000_000, 250_000),
            words: (0..c.words_per_run).map(|_| rng.random()).collect(),
            consumer: ConsumerPolicy::Burst {
                start_at: capacity - c.fifo.margin,
            },
            metastability: c.metastability,
            seed,
            duration: u64::MAX,
            record_transcript: false,
        };
        runs.push(fuzz_one(&sim).map_err(|e| HarnessError::Config(e.to_string()))?);
    }
    Ok(FuzzReport { runs })
}

/// Replays an SPI transcript, decoding commands on MOSI and frames on MISO.
/// On the data link, READ credits tell data frames apart from the idle word,
/// which shares its encoding with ECG code 0.
pub fn decode_spi_transcript(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut credits = 0u16;
    for line in text.lines() {
        let fields: Vec<&str> = line.splitn(4, ',').collect();
        if fields.len() < 3 || fields[0].parse::<u64>().is_err() {
            continue;
        }
        if fields[2] != "frame" {
            out.push(format!("{} {} {}", fields[0], fields[1], fields[2]));
            continue;
        }
        let detail = fields.get(3).copied().unwrap_or("");
        let word = |key: &str| {
            detail
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix(key))
                .and_then(|h| u16::from_str_radix(h, 16).ok())
        };
        let (Some(mosi), Some(miso)) = (word("mosi="), word("miso=")) else {
            out.push(format!("{} {} malformed frame {detail}", fields[0], fields[1]));
            continue;
        };
        let main = fields[1] == "main";
        let data = main && credits > 0;
        let cmd = if main {
            let c = Command::decode(mosi);
            if data {
                credits -= 1;
            }
            if let Command::Read(n) = c {
                credits = n;
            }
            format!("{c:?}")
        } else {
            format!("{mosi:04x}")
        };
        let reply = if miso == crate::spi_link::IDLE_WORD && !data {
            "idle".to_string()
        } else {
            match unframe(miso) {
                Ok(FrameWord::Record(r)) => format!("{r:?}"),
                Ok(FrameWord::RrHead(h)) => format!("RrHead({h})"),
                Err(e) => format!("raw {miso:04x} ({e})"),
            }
        };
        out.push(format!("{} {} {cmd} -> {reply}", fields[0], fields[1]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clean_train_has_exact_spacing() {
        let e = generate_synthetic_ecg(60.0, 10.0, 1.0, &NoiseSpec::default(), 0).unwrap();
        assert_eq!(e.samples.len(), 2560);
        assert_eq!(e.peaks.len(), 10);
        assert!(e.peaks.windows(2).all(|w| w[1] - w[0] == 256));
        assert_eq!(e.peaks[0], 128);
        for &p in &e.peaks {
            assert_eq!(e.clean[p as usize], 1.0);
        }
        assert!(e.drift.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn drift_is_additive() {
        let noise = NoiseSpec {
            drift_mv: 0.5,
            ..NoiseSpec::default()
        };
        let e = generate_synthetic_ecg(75.0, 20.0, 1.0, &noise, 3).unwrap();
        for ((s, c), d) in e.samples.iter().zip(&e.clean).zip(&e.drift) {
            assert!((s.v - d - c).abs() < 1e-12);
        }
        assert!(e.drift.iter().any(|&d| d.abs() > 0.49));
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let noise = NoiseSpec::moderate();
        let a = generate_synthetic_ecg(90.0, 5.0, 1.0, &noise, 11).unwrap();
        let b = generate_synthetic_ecg(90.0, 5.0, 1.0, &noise, 11).unwrap();
        let c = generate_synthetic_ecg(90.0, 5.0, 1.0, &noise, 12).unwrap();
        let bits = |e: &SyntheticEcg| e.samples.iter().map(|s| s.v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn bpm_range_enforced() {
        assert!(generate_synthetic_ecg(19.0, 1.0, 1.0, &NoiseSpec::default(), 0).is_err());
        assert!(generate_synthetic_ecg(251.0, 1.0, 1.0, &NoiseSpec::default(), 0).is_err());
    }

    #[test]
    fn score_examples() {
        let s = score_detections(&[100, 400], &[100, 400], 19);
        assert_eq!((s.sensitivity, s.positive_predictivity), (Some(1.0), Some(1.0)));
        let s = score_detections(&[], &[100, 400], 19);
        assert_eq!(s.sensitivity, Some(0.0));
        assert_eq!(s.positive_predictivity, None);
        let s = score_detections(&[110, 700], &[100, 400], 19);
        assert_eq!((s.true_positives, s.false_positives, s.false_negatives), (1, 1, 1));
    }

    #[test]
    fn index_csv_parsing() {
        assert_eq!(parse_index_csv("t_peak,amp\n5,1\n\n9,2\n"), Ok(vec![5, 9]));
        assert!(parse_index_csv("1\nx\n").is_err());
        assert!(parse_index_csv("9\n1\n").is_err());
    }

    #[test]
    fn config_overrides() {
        let cfg = RunConfig::from_toml(
            "seed = 4\n[chip.detector]\nbeta_num = 1\n",
            &[
                "chip.detector.beta_num=3".into(),
                "chip.detector.beta_den=4".into(),
                "synthetic.bpm=72.5".into(),
                "output_dir=results/a".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!((cfg.chip.detector.beta_num, cfg.chip.detector.beta_den), (3, 4));
        assert_eq!(cfg.synthetic.bpm, 72.5);
        assert_eq!(cfg.output_dir, PathBuf::from("results/a"));
        assert!(RunConfig::from_toml("", &["nokey".into()]).is_err());
        assert!(RunConfig::from_toml("bogus = 1", &[]).is_err());
        let back = RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_files_rejected() {
        let cfg = RunConfig {
            record: Some(PathBuf::from("/nonexistent/record.csv")),
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn transcript_replay() {
        let read2 = Command::Read(2).encode();
        let text = format!(
            "time_ps,bus,event,detail\n10,main,select,\n20,main,frame,mosi=9c00 miso=0000\n\
             30,main,frame,mosi={read2:04x} miso=0ffc\n40,main,frame,mosi=0000 miso=0000\n\
             50,main,frame,mosi=0000 miso=0004\n60,main,frame,mosi=0000 miso=0000\n"
        );
        let lines = decode_spi_transcript(&text);
        assert_eq!(lines[0], "10 main select");
        assert_eq!(lines[1], "20 main RegRead { addr: 3 } -> idle");
        assert!(lines[2].ends_with("-> Ecg(1023)"));
        assert!(lines[3].ends_with("Nop -> Ecg(0)"));
        assert!(lines[4].ends_with("-> Ecg(1)"));
        assert!(lines[5].ends_with("-> idle"));
    }

    #[test]
    fn small_fuzz_campaign() {
        let report = fifo_fuzz(&FuzzCampaign {
            runs: 6,
            words_per_run: 300,
            fifo: FifoConfig {
                addr_bits: 5,
                margin: 4,
            },
            ..FuzzCampaign::default()
        })
        .unwrap();
        assert_eq!(report.runs.len(), 7);
        assert_eq!(report.failures(), 0, "{:?}", report.runs);
    }

    #[test]
    fn sixty_seconds_at_sixty_bpm() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            output_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let r = run_session(&cfg).unwrap();
        assert_eq!(r.detections.len(), 60);
        assert_eq!(r.summary.score.unwrap().sensitivity, Some(1.0));
        assert_eq!(r.reconstructed.len(), 60 * 256);
        for name in ARTIFACTS {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
    }

    #[test]
    fn empty_record_runs_clean() {
        let dir = tempfile::tempdir().unwrap();
        let record = dir.path().join("empty.csv");
        fs::write(&record, "index,millivolts\n").unwrap();
        let cfg = RunConfig {
            record: Some(record),
            output_dir: dir.path().join("out"),
            ..RunConfig::default()
        };
        let r = run_session(&cfg).unwrap();
        assert!(r.detections.is_empty() && r.heart_rates.is_empty() && r.reconstructed.is_empty());
        assert_eq!(r.summary.score, None);
        let body = fs::read_to_string(dir.path().join("out").join(ARTIFACTS[1])).unwrap();
        assert_eq!(body.lines().count(), 1);
    }

    proptest! {
        #[test]
        fn perfect_self_score(mut truth in proptest::collection::vec(0u64..100_000, 0..50)) {
            truth.sort_unstable();
            truth.dedup();
            let s = score_detections(&truth, &truth, MATCH_WINDOW_SAMPLES);
            prop_assert_eq!(s.false_positives + s.false_negatives, 0);
            prop_assert_eq!(s.true_positives, truth.len() as u64);
        }

        #[test]
        fn score_counts_are_consistent(
            mut ev in proptest::collection::vec(0u64..5000, 0..40),
            mut tr in proptest::collection::vec(0u64..5000, 0..40),
        ) {
            ev.sort_unstable();
            tr.sort_unstable();
            let s = score_detections(&ev, &tr, 19);
            prop_assert_eq!(s.true_positives + s.false_positives, ev.len() as u64);
            prop_assert_eq!(s.true_positives + s.false_negatives, tr.len() as u64);
        }
    }
}

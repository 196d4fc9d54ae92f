use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use ecg_chip::harness::{
    decode_spi_transcript, fifo_fuzz, generate_synthetic_ecg, read_index_csv, run_session, score_detections,
    FuzzCampaign, HarnessError, NoiseSpec, RunConfig, MATCH_WINDOW_SAMPLES,
};
use ecg_chip::signal_io::write_csv;

/// Behavioural model of a QRS-detecting ECG chip with its SPI host.
#[derive(Parser)]
#[command(name = "ecgchip", version)]
struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Run a full session: digitize, simulate the chip and host, score.
    Run(RunArgs),
    /// Write a synthetic ECG record and its reference peaks.
    Gen(GenArgs),
    /// Score detected peak indices against reference indices.
    Score(ScoreArgs),
    /// Run the dual-clock FIFO fuzzing campaign.
    FifoFuzz(FuzzArgs),
    /// Decode an SPI transcript into commands and frames.
    SpiDump(DumpArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `chip.detector.beta_num=3`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 60.0)]
    bpm: f64,
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add the moderate noise mix (drift, mains tone, impulses, white noise).
    #[arg(long)]
    noisy: bool,
    /// Output record, `index,millivolts` CSV.
    #[arg(short, long)]
    out: PathBuf,
    /// Output reference peak indices.
    #[arg(long)]
    peaks: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Detected peak indices (first CSV column).
    detections: PathBuf,
    /// Reference peak indices (first CSV column).
    truth: PathBuf,
    /// Match window in samples either side.
    #[arg(long, default_value_t = MATCH_WINDOW_SAMPLES)]
    window: u64,
}

#[derive(Args)]
struct FuzzArgs {
    #[arg(long, default_value_t = 100)]
    runs: u32,
    #[arg(long, default_value_t = 50)]
    max_ratio: u64,
    #[arg(long, default_value_t = 0.01)]
    metastability: f64,
    #[arg(long, default_value_t = 2000)]
    words: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also write the per-run report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    transcript: PathBuf,
}

/// Error that maps onto exit code 3.
#[derive(Debug)]
struct Violation(String);

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Violation {}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    if let Some(r) = args.record {
        cfg.record = Some(r);
    }
    if let Some(a) = args.annotations {
        cfg.annotations = Some(a);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = args.out {
        cfg.output_dir = o;
    }
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let result = run_session(&cfg)?;
    let s = &result.summary;
    println!("samples {}", s.samples);
    println!("detections {}", s.detections);
    println!("heart-rate reports {}", s.heart_rate_reports);
    if let Some(score) = s.score {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        println!(
            "score TP {} FP {} FN {} sensitivity {} PPV {}",
            score.true_positives,
            score.false_positives,
            score.false_negatives,
            fmt(score.sensitivity),
            fmt(score.positive_predictivity)
        );
    }
    println!("interrupts {} drains {}", s.chip.interrupts, s.host.drains);
    info!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}

fn gen(args: GenArgs) -> Result<()> {
    let noise = if args.noisy {
        NoiseSpec::moderate()
    } else {
        NoiseSpec::default()
    };
    let ecg = generate_synthetic_ecg(args.bpm, args.duration, 1.0, &noise, args.seed)?;
    let file = fs::File::create(&args.out).with_context(|| args.out.display().to_string())?;
    let mut w = BufWriter::new(file);
    writeln!(w, "index,millivolts")?;
    write_csv(&mut w, &ecg.samples)?;
    w.flush()?;
    if let Some(p) = args.peaks {
        let mut body = String::from("index\n");
        for i in &ecg.peaks {
            body.push_str(&format!("{i}\n"));
        }
        fs::write(&p, body).with_context(|| p.display().to_string())?;
    }
    println!("{} samples, {} peaks", ecg.samples.len(), ecg.peaks.len());
    Ok(())
}

fn score(args: ScoreArgs) -> Result<()> {
    let events = read_index_csv(&args.detections)?;
    let truth = read_index_csv(&args.truth)?;
    let s = score_detections(&events, &truth, args.window);
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(())
}

fn fuzz(args: FuzzArgs) -> Result<()> {
    let campaign = FuzzCampaign {
        runs: args.runs,
        max_ratio: args.max_ratio,
        metastability: args.metastability,
        words_per_run: args.words,
        seed: args.seed,
        ..FuzzCampaign::default()
    };
    if !(0.0..=1.0).contains(&campaign.metastability) {
        return Err(HarnessError::Config("metastability must lie in [0, 1]".into()).into());
    }
    let report = fifo_fuzz(&campaign)?;
    if let Some(p) = &args.json {
        fs::write(p, serde_json::to_string_pretty(&report)?).with_context(|| p.display().to_string())?;
    }
    let meta: u64 = report.runs.iter().map(|r| r.metastable_captures).sum();
    println!("runs {} failures {} metastable captures {meta}", report.runs.len(), report.failures());
    for r in report.runs.iter().filter(|r| r.failure.is_some()) {
        println!(
            "seed {} periods {}:{}: {}",
            r.seed,
            r.write_period,
            r.read_period,
            r.failure.as_deref().unwrap_or_default()
        );
    }
    if report.failures() > 0 {
        bail!(Violation(format!("{} runs lost, duplicated or reordered data", report.failures())));
    }
    Ok(())
}

fn dump(args: DumpArgs) -> Result<()> {
    let text = fs::read_to_string(&args.transcript).map_err(|source| HarnessError::Io {
        path: args.transcript.clone(),
        source,
    })?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for line in decode_spi_transcript(&text) {
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Violation>().is_some() {
        return 3;
    }
    match err.downcast_ref::<HarnessError>() {
        Some(e) if e.is_invariant_violation() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Verb::Run(a) => run(a),
        Verb::Gen(a) => gen(a),
        Verb::Score(a) => score(a),
        Verb::FifoFuzz(a) => fuzz(a),
        Verb::SpiDump(a) => dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

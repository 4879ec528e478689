//! The `auxiva` command line: `simulate | separate | evaluate | demo | bench`.
//!
//! Exit codes: 0 on success, 2 on usage or configuration errors, 1 on
//! runtime errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav};
use crate::error::{Error, Result};
use crate::metrics::{sdr_improvement, write_csv, ImprovementReport, DEFAULT_SEGMENT_LEN};
use crate::pipeline::{
    bench_update, run_experiment_on, separate_signals, switch_frame, ExperimentConfig,
    SeparateOptions, Timing,
};
use crate::scenario::{generate, GroundTruth, MixingOperator, MoveInfo, Scenario, ScenarioConfig};
use crate::separator::{ContrastKind, FrameFault, OnlineConfig, SourceSelector, UpdateMethod};
use crate::stft::StftConfig;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "auxiva",
    version,
    about = "Online AuxIVA blind source separation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a ground-truth scenario (mixture, sources, images, manifest).
    Simulate(SimulateArgs),
    /// Separate a multichannel WAV with the online separator.
    Separate(SeparateArgs),
    /// Score separated signals against a simulated scenario.
    Evaluate(EvaluateArgs),
    /// Full IP/ISS × all/one experiment on a moving-source scenario.
    Demo(DemoArgs),
    /// Per-frame runtime and per-update operation counts of IP and ISS.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario file (TOML); the default 3-source, 60 s moving-source scenario when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Ip,
    Iss,
}

impl From<MethodArg> for UpdateMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ip => UpdateMethod::Ip,
            MethodArg::Iss => UpdateMethod::Iss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastArg {
    Laplace,
    Gauss,
}

impl From<ContrastArg> for ContrastKind {
    fn from(c: ContrastArg) -> Self {
        match c {
            ContrastArg::Laplace => ContrastKind::Laplace,
            ContrastArg::Gauss => ContrastKind::TimeVaryingGaussian,
        }
    }
}

/// Separation settings shared by the `separate` flags and its config file.
/// Every field is optional; flags override the file, which overrides the defaults.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// `all`, `one:K:FRAME` or `one:K:SECONDSs` (K is 1-based).
    #[arg(long)]
    pub selector: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub n_iter: Option<usize>,
    #[arg(long)]
    pub update_period: Option<usize>,
    #[arg(long, value_enum)]
    pub contrast: Option<ContrastArg>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// STFT frame length (power of two); the hop is half of it.
    #[arg(long)]
    pub frame_len: Option<usize>,
    /// Expected channel count; the input must match when given.
    #[arg(long)]
    pub sources: Option<usize>,
}

impl RunSettings {
    fn merged_over(self, base: RunSettings) -> RunSettings {
        RunSettings {
            method: self.method.or(base.method),
            selector: self.selector.or(base.selector),
            alpha: self.alpha.or(base.alpha),
            n_iter: self.n_iter.or(base.n_iter),
            update_period: self.update_period.or(base.update_period),
            contrast: self.contrast.or(base.contrast),
            threads: self.threads.or(base.threads),
            frame_len: self.frame_len.or(base.frame_len),
            sources: self.sources.or(base.sources),
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Resolves to separation options for a `channels`-channel input.
    pub fn resolve(&self, channels: usize, sample_rate: u32) -> Result<SeparateOptions> {
        let defaults = OnlineConfig::default();
        let stft = StftConfig::with_frame_len(self.frame_len.unwrap_or(1024), sample_rate);
        stft.validate().map_err(|e| Error::Usage(e.to_string()))?;
        if let Some(k) = self.sources {
            if k != channels {
                return Err(Error::Usage(format!(
                    "input has {channels} channels but {k} sources are configured"
                )));
            }
        }
        let selector = match self.selector.as_deref() {
            None => SourceSelector::All,
            Some(s) => parse_selector(s, &stft)?,
        };
        let online = OnlineConfig {
            alpha: self.alpha.unwrap_or(defaults.alpha),
            n_iter: self.n_iter.unwrap_or(defaults.n_iter),
            selector,
            update_period: self.update_period.unwrap_or(defaults.update_period),
            method: self.method.map_or(defaults.method, Into::into),
        };
        online
            .validate(channels)
            .map_err(|e| Error::Usage(e.to_string()))?;
        Ok(SeparateOptions {
            online,
            contrast: self.contrast.map_or(ContrastKind::Laplace, Into::into),
            stft,
            threads: self.threads.unwrap_or(1).max(1),
        })
    }
}

/// Parses `all`, `one:K:FRAME` or `one:K:SECONDSs`.
pub fn parse_selector(text: &str, stft: &StftConfig) -> Result<SourceSelector> {
    let bad = || {
        Error::Usage(format!(
            "selector `{text}` is not `all`, `one:K:FRAME` or `one:K:SECONDSs`"
        ))
    };
    if text == "all" {
        return Ok(SourceSelector::All);
    }
    let mut parts = text.split(':');
    if parts.next() != Some("one") {
        return Err(bad());
    }
    let k: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    let when = parts.next().ok_or_else(bad)?;
    if parts.next().is_some() || k == 0 {
        return Err(bad());
    }
    let frame = match when.strip_suffix('s') {
        Some(secs) => {
            let secs: f64 = secs.parse().map_err(|_| bad())?;
            if !(secs >= 0.0) {
                return Err(bad());
            }
            switch_frame((secs * stft.sample_rate as f64).floor() as usize, stft)
        }
        None => when.parse().map_err(|_| bad())?,
    };
    SourceSelector::one(k - 1, frame).map_err(|e| Error::Usage(e.to_string()))
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    /// Multichannel mixture WAV (one channel per microphone).
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output_dir: PathBuf,
    /// Run-settings file (TOML) with the same keys as the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: RunSettings,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// `manifest.json` written by `simulate`.
    #[arg(long, short)]
    pub manifest: PathBuf,
    /// `LABEL:PATH`, where PATH is a directory of `estimate_K.wav` files or a
    /// multichannel WAV. Repeatable.
    #[arg(long = "estimates", required = true)]
    pub estimates: Vec<String>,
    #[arg(long, short)]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEGMENT_LEN)]
    pub segment_len: usize,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, short)]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scenario length in seconds; the source moves halfway through.
    #[arg(long, default_value_t = 60.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = DEFAULT_SEGMENT_LEN)]
    pub segment_len: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Source counts to measure.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    pub sources: Vec<usize>,
    #[arg(long, default_value_t = 513)]
    pub bins: usize,
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the rows as JSON to this file.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// File layout of a simulated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub mixture: String,
    pub sources: Vec<String>,
    pub images: Vec<String>,
}

/// `manifest.json` written next to the scenario WAVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub sample_rate: u32,
    pub sources: usize,
    pub samples: usize,
    pub seed: u64,
    pub mixing: MixingOperator,
    #[serde(rename = "move", default, skip_serializing_if = "Option::is_none")]
    pub movement: Option<MoveInfo>,
    pub files: ManifestFiles,
    pub scenario: ScenarioConfig,
}

/// Writes the scenario WAVs and manifest into `dir`.
pub fn write_scenario(scenario: &Scenario, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let truth = &scenario.truth;
    let k = truth.sources.len();
    let files = ManifestFiles {
        mixture: "mixture.wav".into(),
        sources: (1..=k).map(|i| format!("source_{i}.wav")).collect(),
        images: (1..=k).map(|i| format!("image_{i}.wav")).collect(),
    };
    write_wav(
        &dir.join(&files.mixture),
        &truth.mixtures,
        truth.sample_rate,
    )?;
    for (name, sig) in files.sources.iter().zip(&truth.sources) {
        write_wav(&dir.join(name), &[sig], truth.sample_rate)?;
    }
    for (name, sig) in files.images.iter().zip(&truth.images) {
        write_wav(&dir.join(name), &[sig], truth.sample_rate)?;
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        sample_rate: truth.sample_rate,
        sources: k,
        samples: truth.len(),
        seed: scenario.config.seed,
        mixing: scenario.operator.clone(),
        movement: scenario.movement,
        files,
        scenario: scenario.config.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Loads the ground truth referenced by a manifest.
pub fn read_scenario(manifest_path: &Path) -> Result<(Manifest, GroundTruth)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mono = |name: &str| -> Result<Vec<f64>> {
        let (mut chans, _) = read_wav(&dir.join(name))?;
        if chans.len() != 1 {
            return Err(Error::Config(format!("{name} should be mono")));
        }
        Ok(chans.remove(0))
    };
    let (mixtures, sample_rate) = read_wav(&dir.join(&manifest.files.mixture))?;
    let truth = GroundTruth {
        sample_rate,
        sources: manifest
            .files
            .sources
            .iter()
            .map(|n| mono(n))
            .collect::<Result<_>>()?,
        mixtures,
        images: manifest
            .files
            .images
            .iter()
            .map(|n| mono(n))
            .collect::<Result<_>>()?,
    };
    if truth.mixtures.len() != manifest.sources || truth.images.len() != manifest.sources {
        return Err(Error::Config(format!(
            "{}: channel counts disagree with the manifest",
            manifest_path.display()
        )));
    }
    Ok((manifest, truth))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_estimates(dir: &Path, signals: &[Vec<f64>], sample_rate: u32) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in signals.iter().enumerate() {
        write_wav(
            &dir.join(format!("estimate_{}.wav", i + 1)),
            &[s],
            sample_rate,
        )?;
    }
    Ok(())
}

/// Reads estimates from a directory of `estimate_K.wav` files or a multichannel WAV.
fn read_estimates(path: &Path, k: usize) -> Result<Vec<Vec<f64>>> {
    if path.is_dir() {
        (1..=k)
            .map(|i| {
                let p = path.join(format!("estimate_{i}.wav"));
                let (mut c, _) = read_wav(&p)?;
                if c.is_empty() {
                    return Err(Error::Config(format!("{} has no channels", p.display())));
                }
                Ok(c.remove(0))
            })
            .collect()
    } else {
        let (c, _) = read_wav(path)?;
        if c.len() != k {
            return Err(Error::Usage(format!(
                "{} has {} channels, scenario has {k} sources",
                path.display(),
                c.len()
            )));
        }
        Ok(c)
    }
}

/// `diagnostics.json` written by `separate`.
#[derive(Debug, Serialize)]
pub struct SeparateDiagnostics<'a> {
    pub input: &'a Path,
    pub options: &'a SeparateOptions,
    pub frames: usize,
    pub timing: Timing,
    pub singular_bins: usize,
    pub faults: &'a [FrameFault],
}

#[derive(Debug, Serialize)]
pub struct EvaluateMethod<'a> {
    pub label: &'a str,
    pub overall_improvement_db: f64,
    pub per_source_improvement_db: Vec<f64>,
    pub segment_mean_improvement_db: f64,
    pub permutation: &'a [usize],
}

#[derive(Debug, Serialize)]
pub struct EvaluateSummary<'a> {
    pub manifest: &'a Path,
    pub segment_len: usize,
    pub sample_rate: u32,
    pub methods: Vec<EvaluateMethod<'a>>,
}

fn summarize<'a>(reports: &'a [(String, ImprovementReport)]) -> Vec<EvaluateMethod<'a>> {
    reports
        .iter()
        .map(|(label, r)| EvaluateMethod {
            label,
            overall_improvement_db: r.overall_improvement,
            per_source_improvement_db: r.sources.iter().map(|s| s.overall_improvement).collect(),
            segment_mean_improvement_db: r.mean_segment_improvement(0..r.segments()),
            permutation: &r.permutation,
        })
        .collect()
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<Manifest> {
    let mut cfg = match &args.config {
        Some(p) => ScenarioConfig::from_toml_file(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let scenario = generate(&cfg)?;
    let manifest = write_scenario(&scenario, &args.output_dir)?;
    println!(
        "wrote {} sources, {} samples to {}",
        manifest.sources,
        manifest.samples,
        args.output_dir.display()
    );
    Ok(manifest)
}

pub fn cmd_separate(args: &SeparateArgs) -> Result<Timing> {
    let file = match &args.config {
        Some(p) => RunSettings::from_toml_file(p)?,
        None => RunSettings::default(),
    };
    let settings = args.settings.clone().merged_over(file);
    let (mixture, rate) = read_wav(&args.input)?;
    if mixture.is_empty() || mixture[0].is_empty() {
        return Err(Error::Usage(format!(
            "{} contains no samples",
            args.input.display()
        )));
    }
    let opts = settings.resolve(mixture.len(), rate)?;
    if mixture[0].len() < opts.stft.frame_len {
        return Err(Error::Usage(format!(
            "{} is shorter than one STFT frame ({} samples)",
            args.input.display(),
            opts.stft.frame_len
        )));
    }
    let sep = separate_signals(&mixture, &opts)?;
    write_estimates(&args.output_dir, &sep.signals, rate)?;
    write_json(
        &args.output_dir.join("diagnostics.json"),
        &SeparateDiagnostics {
            input: &args.input,
            options: &opts,
            frames: sep.frames,
            timing: sep.timing,
            singular_bins: sep.singular_bins,
            faults: &sep.faults,
        },
    )?;
    println!(
        "{} frames, update loop {:.3} s, total {:.3} s, {} degenerate updates",
        sep.frames,
        sep.timing.update_loop_s,
        sep.timing.total_s,
        sep.faults.len()
    );
    Ok(sep.timing)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let (manifest, truth) = read_scenario(&args.manifest)?;
    let mut reports = Vec::new();
    for spec in &args.estimates {
        let (label, path) = spec
            .split_once(':')
            .ok_or_else(|| Error::Usage(format!("--estimates `{spec}` is not LABEL:PATH")))?;
        let est = read_estimates(Path::new(path), manifest.sources)?;
        reports.push((
            label.to_string(),
            sdr_improvement(&truth, &est, args.segment_len)?,
        ));
    }
    fs::create_dir_all(&args.output_dir)?;
    write_csv(
        fs::File::create(args.output_dir.join("segsdr.csv"))?,
        &reports,
    )?;
    let summary = EvaluateSummary {
        manifest: &args.manifest,
        segment_len: args.segment_len,
        sample_rate: truth.sample_rate,
        methods: summarize(&reports),
    };
    write_json(&args.output_dir.join("summary.json"), &summary)?;
    for m in &summary.methods {
        println!(
            "{:<12} overall improvement {:>7.2} dB",
            m.label, m.overall_improvement_db
        );
    }
    Ok(())
}

pub fn cmd_demo(args: &DemoArgs) -> Result<crate::pipeline::Summary> {
    if !(args.duration > 0.0) {
        return Err(Error::Usage("--duration must be positive".into()));
    }
    let cfg = ExperimentConfig {
        scenario: ScenarioConfig {
            seed: args.seed,
            duration: args.duration,
            move_time: Some(args.duration / 2.0),
            ..Default::default()
        },
        threads: args.threads.max(1),
        segment_len: args.segment_len,
        ..Default::default()
    };
    cfg.scenario.validate()?;
    let scenario = generate(&cfg.scenario)?;
    write_scenario(&scenario, &args.output_dir.join("scenario"))?;
    let exp = run_experiment_on(&cfg, scenario)?;
    let rate = exp.scenario.truth.sample_rate;
    for r in &exp.results {
        write_estimates(&args.output_dir.join(&r.label), &r.separation.signals, rate)?;
    }
    let reports: Vec<(String, ImprovementReport)> = exp
        .results
        .iter()
        .map(|r| (r.label.clone(), r.report.clone()))
        .collect();
    write_csv(
        fs::File::create(args.output_dir.join("segsdr.csv"))?,
        &reports,
    )?;
    let summary = exp.summary();
    write_json(&args.output_dir.join("summary.json"), &summary)?;

    println!(
        "{:<8} {:>14} {:>14} {:>12}",
        "method", "improvement", "update loop", "total"
    );
    for (m, rt) in summary.methods.iter().zip(&summary.runtime) {
        println!(
            "{:<8} {:>11.2} dB {:>12.3} s {:>10.3} s",
            m.label, m.overall_improvement_db, rt.timing.update_loop_s, rt.timing.total_s
        );
    }
    Ok(summary)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let mut rows = Vec::new();
    println!(
        "{:>3} {:>5} {:>14} {:>16} {:>8}",
        "K", "method", "s/frame", "cmac/update", "solves"
    );
    for &k in &args.sources {
        if k == 0 || k > crate::linalg::MAX_K {
            return Err(Error::Usage(format!(
                "--sources entry {k} outside 1..={}",
                crate::linalg::MAX_K
            )));
        }
        for method in [UpdateMethod::Iss, UpdateMethod::Ip] {
            let row = bench_update(k, args.bins, args.frames, method, args.seed)?;
            println!(
                "{:>3} {:>5} {:>14.3e} {:>16.1} {:>8.2}",
                k,
                method,
                row.seconds_per_frame,
                row.cmacs_per_source_update,
                row.solves_per_source_update
            );
            rows.push(row);
        }
    }
    if let Some(p) = &args.json {
        write_json(p, &rows)?;
    }
    Ok(())
}

/// Usage and configuration problems exit with 2, everything else with 1.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a).map(drop),
        Command::Separate(a) => cmd_separate(a).map(drop),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Demo(a) => cmd_demo(a).map(drop),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// Entry point of the `auxiva` binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_forms() {
        let stft = StftConfig::default();
        assert_eq!(parse_selector("all", &stft).unwrap(), SourceSelector::All);
        assert_eq!(
            parse_selector("one:3:938", &stft).unwrap(),
            SourceSelector::one(2, 938).unwrap()
        );
        assert_eq!(
            parse_selector("one:3:30s", &stft).unwrap(),
            SourceSelector::one(2, 938).unwrap()
        );
        for bad in [
            "",
            "one",
            "one:0:5",
            "one:2",
            "two:1:3",
            "one:1:3:4",
            "one:1:xs",
        ] {
            assert!(
                matches!(parse_selector(bad, &stft), Err(Error::Usage(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn flags_override_file() {
        let file: RunSettings =
            toml::from_str("method = \"ip\"\nalpha = 0.9\nn_iter = 3\n").unwrap();
        let flags = RunSettings {
            alpha: Some(0.95),
            ..Default::default()
        };
        let merged = flags.merged_over(file);
        let opts = merged.resolve(2, 16000).unwrap();
        assert_eq!(opts.online.method, UpdateMethod::Ip);
        assert_eq!(opts.online.alpha, 0.95);
        assert_eq!(opts.online.n_iter, 3);
        assert!(toml::from_str::<RunSettings>("bogus = 1").is_err());
    }

    #[test]
    fn channel_mismatch_is_usage_error() {
        let s = RunSettings {
            sources: Some(3),
            ..Default::default()
        };
        assert!(matches!(s.resolve(2, 16000), Err(Error::Usage(_))));
        let s = RunSettings {
            selector: Some("one:3:10".into()),
            ..Default::default()
        };
        assert!(matches!(s.resolve(2, 16000), Err(Error::Usage(_))));
    }
}

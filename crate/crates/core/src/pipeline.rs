//! End-to-end runs: separating a multichannel recording and the four-way
//! IP/ISS × all/one comparison on a moving-source scenario.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{contract, Result};
use crate::linalg::CVec;
use crate::metrics::{
    resolve_permutation, sdr_improvement, ImprovementReport, DEFAULT_SEGMENT_LEN,
};
use crate::scenario::{generate, Scenario, ScenarioConfig};
use crate::separator::{
    ContrastKind, ContrastModel, FrameFault, OnlineConfig, OnlineSeparator, SourceSelector,
    UpdateMethod,
};
use crate::stft::{analyze, synthesize_len, Spectrogram, StftConfig};

/// Everything needed to separate one recording.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeparateOptions {
    pub online: OnlineConfig,
    pub contrast: ContrastKind,
    pub stft: StftConfig,
    pub threads: usize,
}

impl Default for SeparateOptions {
    fn default() -> Self {
        SeparateOptions {
            online: OnlineConfig::default(),
            contrast: ContrastKind::Laplace,
            stft: StftConfig::default(),
            threads: 1,
        }
    }
}

/// Wall-clock accounting, in seconds. `update_loop` covers only
/// [`OnlineSeparator::process_frame`]; `total` additionally covers the STFT,
/// back-projection and synthesis (never file I/O).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Timing {
    pub update_loop_s: f64,
    pub stft_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone)]
pub struct Separation {
    /// Back-projected estimates at microphone 1, one per source.
    pub signals: Vec<Vec<f64>>,
    pub frames: usize,
    pub faults: Vec<FrameFault>,
    /// Bin-frames whose demixing matrix could not be inverted for back-projection.
    pub singular_bins: usize,
    pub timing: Timing,
}

/// Streams `mixture` (one vector per microphone) through the online
/// separator and returns the back-projected source estimates.
pub fn separate_signals<S: AsRef<[f64]>>(
    mixture: &[S],
    opts: &SeparateOptions,
) -> Result<Separation> {
    let total_start = Instant::now();
    let k = mixture.len();
    let len = mixture.first().map_or(0, |c| c.as_ref().len());
    if len == 0 {
        return Err(contract("mixture is empty"));
    }
    let stft_start = Instant::now();
    let spec = analyze(mixture, &opts.stft)?;
    let mut stft_time = stft_start.elapsed();

    let bins = spec.bins();
    let model = ContrastModel::new(opts.contrast, bins);
    let mut sep = OnlineSeparator::new(k, bins, opts.online, model)?.with_threads(opts.threads)?;
    let mut out = Spectrogram::zeros(k, spec.frames(), bins);
    let mut x = vec![CVec::zeros(k); bins];
    let mut y = vec![CVec::zeros(k); bins];
    let mut z = vec![CVec::zeros(k); bins];
    let mut update_time = Duration::ZERO;
    let mut singular_bins = 0;
    for t in 0..spec.frames() {
        spec.read_frame(t, &mut x);
        let start = Instant::now();
        sep.process_frame(&x, &mut y)?;
        update_time += start.elapsed();
        singular_bins += sep.project_back_frame(&y, &mut z)?;
        out.write_frame(t, &z);
    }
    let synth_start = Instant::now();
    let signals = synthesize_len(&out, &opts.stft, len)?;
    stft_time += synth_start.elapsed();
    Ok(Separation {
        signals,
        frames: spec.frames(),
        faults: sep.faults().to_vec(),
        singular_bins,
        timing: Timing {
            update_loop_s: update_time.as_secs_f64(),
            stft_s: stft_time.as_secs_f64(),
            total_s: total_start.elapsed().as_secs_f64(),
        },
    })
}

/// First frame whose centre lies at or after `sample`.
pub fn switch_frame(sample: usize, stft: &StftConfig) -> usize {
    sample.div_ceil(stft.hop)
}

/// One of the four compared configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Variant {
    pub method: UpdateMethod,
    /// Update only the moving source after the move.
    pub one: bool,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant {
            method: UpdateMethod::Iss,
            one: false,
        },
        Variant {
            method: UpdateMethod::Iss,
            one: true,
        },
        Variant {
            method: UpdateMethod::Ip,
            one: false,
        },
        Variant {
            method: UpdateMethod::Ip,
            one: true,
        },
    ];

    pub fn label(&self) -> String {
        format!("{}-{}", self.method, if self.one { "one" } else { "all" })
    }

    /// Selector for this variant. `moving_output` is the separator output
    /// that carries the moving source (see [`moving_output_index`]).
    pub fn selector(
        &self,
        scenario: &Scenario,
        stft: &StftConfig,
        moving_output: usize,
    ) -> Result<SourceSelector> {
        if !self.one {
            return Ok(SourceSelector::All);
        }
        let mv = scenario
            .movement
            .ok_or_else(|| contract("the one-source schedule needs a moving source"))?;
        SourceSelector::one(moving_output, switch_frame(mv.sample, stft))
    }
}

/// Output of `separated` that carries the moving source before it moves,
/// found by permutation alignment against the ground truth on the pre-move
/// samples.
pub fn moving_output_from(scenario: &Scenario, separated: &[Vec<f64>]) -> Result<usize> {
    let mv = scenario
        .movement
        .ok_or_else(|| contract("scenario has no moving source"))?;
    let n0 = mv.sample.min(scenario.truth.len());
    let refs: Vec<&[f64]> = scenario.truth.images.iter().map(|s| &s[..n0]).collect();
    let ests: Vec<&[f64]> = separated.iter().map(|s| &s[..n0]).collect();
    Ok(resolve_permutation(&refs, &ests)?[mv.source - 1])
}

/// Separator output carrying the moving source, determined by running the
/// all-source schedule of `opts` on the pre-move part of the mixture.
///
/// Output order is arbitrary in blind separation; this is an oracle step
/// used only to configure the one-source schedule in experiments.
pub fn moving_output_index(scenario: &Scenario, opts: &SeparateOptions) -> Result<usize> {
    let mv = scenario
        .movement
        .ok_or_else(|| contract("scenario has no moving source"))?;
    let n0 = mv.sample.min(scenario.truth.len());
    let prefix: Vec<&[f64]> = scenario.truth.mixtures.iter().map(|s| &s[..n0]).collect();
    let all = SeparateOptions {
        online: OnlineConfig {
            selector: SourceSelector::All,
            ..opts.online
        },
        ..*opts
    };
    let sep = separate_signals(&prefix, &all)?;
    moving_output_from(scenario, &sep.signals)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub stft: StftConfig,
    pub alpha: f64,
    pub n_iter: usize,
    pub update_period: usize,
    pub contrast: ContrastKind,
    pub threads: usize,
    pub segment_len: usize,
    pub variants: Vec<Variant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let online = OnlineConfig::default();
        ExperimentConfig {
            scenario: ScenarioConfig::default(),
            stft: StftConfig::default(),
            alpha: online.alpha,
            n_iter: online.n_iter,
            update_period: online.update_period,
            contrast: ContrastKind::Laplace,
            threads: 1,
            segment_len: DEFAULT_SEGMENT_LEN,
            variants: Variant::ALL.to_vec(),
        }
    }
}

impl ExperimentConfig {
    /// Options for `variant`; `moving_output` is required for one-source variants.
    pub fn options(
        &self,
        scenario: &Scenario,
        variant: Variant,
        moving_output: Option<usize>,
    ) -> Result<SeparateOptions> {
        let selector = match (variant.one, moving_output) {
            (false, _) => SourceSelector::All,
            (true, Some(k)) => variant.selector(scenario, &self.stft, k)?,
            (true, None) => {
                return Err(contract("one-source variant needs the moving output index"))
            }
        };
        Ok(SeparateOptions {
            online: OnlineConfig {
                alpha: self.alpha,
                n_iter: self.n_iter,
                selector,
                update_period: self.update_period,
                method: variant.method,
            },
            contrast: self.contrast,
            stft: StftConfig {
                sample_rate: self.scenario.sample_rate,
                ..self.stft
            },
            threads: self.threads,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub variant: Variant,
    pub label: String,
    pub separation: Separation,
    pub report: ImprovementReport,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub scenario: Scenario,
    pub results: Vec<MethodResult>,
}

impl Experiment {
    pub fn result(&self, method: UpdateMethod, one: bool) -> Option<&MethodResult> {
        self.results
            .iter()
            .find(|r| r.variant == Variant { method, one })
    }

    /// Segment index ranges before and after the move (segments straddling
    /// the move are excluded).
    pub fn segment_split(&self) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let mv = self.scenario.movement?;
        let l = self.config.segment_len;
        let n = self.scenario.truth.len() / l;
        Some((0..mv.sample / l, mv.sample.div_ceil(l).min(n)..n))
    }

    pub fn summary(&self) -> Summary {
        let split = self.segment_split();
        let methods = self
            .results
            .iter()
            .map(|r| MethodSummary {
                label: r.label.clone(),
                method: r.variant.method,
                one: r.variant.one,
                overall_improvement_db: r.report.overall_improvement,
                per_source_improvement_db: r
                    .report
                    .sources
                    .iter()
                    .map(|s| s.overall_improvement)
                    .collect(),
                pre_move_mean_db: split
                    .as_ref()
                    .map(|(pre, _)| r.report.mean_segment_improvement(pre.clone())),
                post_move_mean_db: split
                    .as_ref()
                    .map(|(_, post)| r.report.mean_segment_improvement(post.clone())),
                degenerate_updates: r.separation.faults.len(),
            })
            .collect();
        let runtime = self
            .results
            .iter()
            .map(|r| RuntimeEntry {
                label: r.label.clone(),
                timing: r.separation.timing,
            })
            .collect();
        let get = |m, one| self.result(m, one);
        let lt =
            |a: Option<&MethodResult>, b: Option<&MethodResult>, f: fn(&MethodResult) -> f64| {
                a.zip(b).map(|(a, b)| f(a) < f(b))
            };
        let upd = |r: &MethodResult| r.separation.timing.update_loop_s;
        let imp = |r: &MethodResult| r.report.overall_improvement;
        Summary {
            config: self.config.clone(),
            movement: self.scenario.movement,
            methods,
            orderings: Orderings {
                runtime_iss_one_lt_iss_all: lt(
                    get(UpdateMethod::Iss, true),
                    get(UpdateMethod::Iss, false),
                    upd,
                ),
                runtime_ip_one_lt_ip_all: lt(
                    get(UpdateMethod::Ip, true),
                    get(UpdateMethod::Ip, false),
                    upd,
                ),
                improvement_iss_one_gt_ip_one: lt(
                    get(UpdateMethod::Ip, true),
                    get(UpdateMethod::Iss, true),
                    imp,
                ),
            },
            runtime,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub label: String,
    pub method: UpdateMethod,
    pub one: bool,
    pub overall_improvement_db: f64,
    pub per_source_improvement_db: Vec<f64>,
    pub pre_move_mean_db: Option<f64>,
    pub post_move_mean_db: Option<f64>,
    pub degenerate_updates: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RuntimeEntry {
    pub label: String,
    #[serde(flatten)]
    pub timing: Timing,
}

/// Orderings checked against the reference results; `None` when a variant
/// was not run.
#[derive(Debug, Clone, Serialize)]
pub struct Orderings {
    pub runtime_iss_one_lt_iss_all: Option<bool>,
    pub runtime_ip_one_lt_ip_all: Option<bool>,
    pub improvement_iss_one_gt_ip_one: Option<bool>,
}

/// JSON summary of an experiment. Everything except `runtime` and the
/// runtime orderings is deterministic for a fixed seed.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub movement: Option<crate::scenario::MoveInfo>,
    pub methods: Vec<MethodSummary>,
    pub orderings: Orderings,
    pub runtime: Vec<RuntimeEntry>,
}

/// Runs every variant of `cfg` on a freshly generated scenario.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    let scenario = generate(&cfg.scenario)?;
    run_experiment_on(cfg, scenario)
}

/// Runs every variant of `cfg` on an existing scenario. One-source variants
/// target the output that carried the moving source in the matching
/// all-source run (or in a pre-move run when that variant is not requested).
pub fn run_experiment_on(cfg: &ExperimentConfig, scenario: Scenario) -> Result<Experiment> {
    let mut results: Vec<MethodResult> = Vec::with_capacity(cfg.variants.len());
    let mut order: Vec<Variant> = cfg.variants.iter().filter(|v| !v.one).copied().collect();
    order.extend(cfg.variants.iter().filter(|v| v.one));
    for variant in order {
        let moving_output = if variant.one {
            let all = Variant {
                one: false,
                ..variant
            };
            Some(match results.iter().find(|r| r.variant == all) {
                Some(r) => moving_output_from(&scenario, &r.separation.signals)?,
                None => moving_output_index(&scenario, &cfg.options(&scenario, all, None)?)?,
            })
        } else {
            None
        };
        let opts = cfg.options(&scenario, variant, moving_output)?;
        let separation = separate_signals(&scenario.truth.mixtures, &opts)?;
        let report = sdr_improvement(&scenario.truth, &separation.signals, cfg.segment_len)?;
        results.push(MethodResult {
            variant,
            label: variant.label(),
            separation,
            report,
        });
    }
    results.sort_by_key(|r| cfg.variants.iter().position(|v| *v == r.variant));
    Ok(Experiment {
        config: cfg.clone(),
        scenario,
        results,
    })
}

/// Kernel benchmark of one update method.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub sources: usize,
    pub bins: usize,
    pub frames: usize,
    pub method: UpdateMethod,
    /// Mean wall-clock of `process_frame`, in seconds.
    pub seconds_per_frame: f64,
    /// Complex multiply-accumulates of one per-source demixing update,
    /// averaged over sources and bins.
    pub cmacs_per_source_update: f64,
    pub solves_per_source_update: f64,
    pub inversions_per_source_update: f64,
}

/// Streams `frames` random frames through a separator and then measures the
/// cost of single per-source updates on the resulting state.
pub fn bench_update(
    sources: usize,
    bins: usize,
    frames: usize,
    method: UpdateMethod,
    seed: u64,
) -> Result<BenchRow> {
    use crate::linalg::counters;
    use crate::separator::update_source;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    let cfg = OnlineConfig {
        method,
        ..Default::default()
    };
    let mut sep = OnlineSeparator::new(sources, bins, cfg, ContrastModel::laplace(bins))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = move || -> f64 { StandardNormal.sample(&mut rng) };
    let mixing: Vec<crate::linalg::CMat> = (0..bins)
        .map(|_| {
            let rows: Vec<Vec<f64>> = (0..sources)
                .map(|i| {
                    (0..sources)
                        .map(|j| if i == j { 1.0 } else { 0.3 * draw() })
                        .collect()
                })
                .collect();
            crate::linalg::CMat::from_real_rows(&rows)
        })
        .collect::<std::result::Result<_, _>>()?;
    let mut x = vec![CVec::zeros(sources); bins];
    let mut y = vec![CVec::zeros(sources); bins];
    let mut elapsed = Duration::ZERO;
    for _ in 0..frames {
        let s: Vec<f64> = (0..sources).map(|_| draw().powi(3)).collect();
        for (xf, a) in x.iter_mut().zip(&mixing) {
            let mut sf = CVec::zeros(sources);
            for (k, v) in s.iter().enumerate() {
                sf[k] = num_complex::Complex64::new(v * draw(), v * draw());
            }
            *xf = a.mul_vec(&sf);
        }
        let start = Instant::now();
        sep.process_frame(&x, &mut y)?;
        elapsed += start.elapsed();
    }

    let before = counters::snapshot();
    let mut updates = 0usize;
    for f in 0..bins {
        let u: Vec<_> = (0..sources).map(|k| *sep.covariance(k, f)).collect();
        for k in 0..sources {
            let mut w = sep.demixing()[f];
            // degenerate states still count the work done before the fault
            let _ = update_source(method, &mut w, &u, k);
            updates += 1;
        }
    }
    let delta = counters::snapshot() - before;
    let per = |v: u64| v as f64 / updates as f64;
    Ok(BenchRow {
        sources,
        bins,
        frames,
        method,
        seconds_per_frame: elapsed.as_secs_f64() / frames.max(1) as f64,
        cmacs_per_source_update: per(delta.cmacs),
        solves_per_source_update: per(delta.solves),
        inversions_per_source_update: per(delta.inversions),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_mixture_passes_through() {
        let cfg = ScenarioConfig {
            mixing_matrix: Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
            ..ScenarioConfig::stationary(2, 1.0, 3)
        };
        let sc = generate(&cfg).unwrap();
        let opts = SeparateOptions {
            stft: StftConfig::with_frame_len(256, 16000),
            ..Default::default()
        };
        let sep = separate_signals(&sc.truth.mixtures, &opts).unwrap();
        assert_eq!(sep.signals.len(), 2);
        assert_eq!(sep.signals[0].len(), sc.truth.len());
        // back-projected estimates always sum to microphone 1
        let hop = 128;
        for i in hop..sc.truth.len() - hop {
            let s: f64 = sep.signals.iter().map(|c| c[i]).sum();
            assert!((s - sc.truth.mixtures[0][i]).abs() < 1e-9);
        }
        assert!(sep.timing.update_loop_s <= sep.timing.total_s);
    }

    #[test]
    fn empty_mixture_is_rejected() {
        let empty: Vec<Vec<f64>> = vec![vec![], vec![]];
        assert!(separate_signals(&empty, &SeparateOptions::default()).is_err());
    }

    #[test]
    fn bench_counts_solves_only_for_ip() {
        let iss = bench_update(3, 16, 20, UpdateMethod::Iss, 1).unwrap();
        let ip = bench_update(3, 16, 20, UpdateMethod::Ip, 1).unwrap();
        assert_eq!(iss.solves_per_source_update, 0.0);
        assert_eq!(iss.inversions_per_source_update, 0.0);
        assert!(ip.solves_per_source_update >= 1.0);
        assert!(iss.cmacs_per_source_update > 0.0);
    }

    #[test]
    fn switch_frame_rounds_up() {
        let s = StftConfig::default();
        assert_eq!(switch_frame(480000, &s), 938);
        assert_eq!(switch_frame(480256, &s), 938);
        assert_eq!(switch_frame(480257, &s), 939);
    }

    #[test]
    fn short_experiment_produces_four_reports() {
        let cfg = ExperimentConfig {
            scenario: ScenarioConfig {
                duration: 4.0,
                move_time: Some(2.0),
                ..Default::default()
            },
            stft: StftConfig::with_frame_len(256, 16000),
            segment_len: 8000,
            ..Default::default()
        };
        let exp = run_experiment(&cfg).unwrap();
        assert_eq!(exp.results.len(), 4);
        let labels: Vec<&str> = exp.results.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["iss-all", "iss-one", "ip-all", "ip-one"]);
        assert_eq!(exp.segment_split(), Some((0..4, 4..8)));
        let summary = exp.summary();
        assert!(summary.orderings.improvement_iss_one_gt_ip_one.is_some());
        assert!(serde_json::to_string(&summary).is_ok());
    }
}

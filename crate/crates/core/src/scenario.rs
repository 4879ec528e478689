//! Synthetic ground-truth mixtures, including a source that jumps to a new
//! position partway through.
//!
//! A move is realised the same way a muted copy of the source would be: the
//! moving source is filtered by its original mixing column (or FIR set)
//! before the switch sample and by the new one from the switch sample on.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::linalg::MAX_K;

/// Largest 2-norm condition number accepted for generated mixing matrices.
pub const MAX_CONDITION: f64 = 10.0;
/// Generated post-move columns satisfy `|<a, a'>| ≤` this.
pub const MAX_MOVE_COHERENCE: f64 = 0.5;
/// Longest built-in synthetic echo, in seconds.
pub const MAX_ECHO_S: f64 = 0.064;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixingKind {
    #[default]
    Instantaneous,
    Convolutive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Amplitude-modulated Gaussian noise.
    #[default]
    Synthetic,
    /// Mono WAV files listed in `source_files`.
    Files,
}

/// Scenario description. This is also the schema of the scenario config
/// file (flat TOML keys with the same names).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub sources: usize,
    /// Seconds.
    pub duration: f64,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mixing: MixingKind,
    /// Instantaneous mixing matrix, `mixing_matrix[mic][source]`; generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing_matrix: Option<Vec<Vec<f64>>>,
    /// JSON file holding user FIR filters (see [`FirSet`]); generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters: Option<PathBuf>,
    /// 1-based index of the moving source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub move_source: Option<usize>,
    /// Seconds from the start at which the source moves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub move_time: Option<f64>,
    /// Post-move instantaneous mixing column; generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub move_column: Option<Vec<f64>>,
    #[serde(default)]
    pub source_kind: SourceKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_files: Vec<PathBuf>,
}

fn default_rate() -> u32 {
    16000
}

impl Default for ScenarioConfig {
    /// Three sources, 60 s, source 3 moving at 30 s.
    fn default() -> Self {
        ScenarioConfig {
            sources: 3,
            duration: 60.0,
            sample_rate: 16000,
            seed: 0,
            mixing: MixingKind::Instantaneous,
            mixing_matrix: None,
            filters: None,
            move_source: Some(3),
            move_time: Some(30.0),
            move_column: None,
            source_kind: SourceKind::Synthetic,
            source_files: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    /// Static scenario without a moving source.
    pub fn stationary(sources: usize, duration: f64, seed: u64) -> Self {
        ScenarioConfig {
            sources,
            duration,
            seed,
            move_source: None,
            move_time: None,
            ..Default::default()
        }
    }

    /// Parses a TOML scenario file. Relative paths inside it are resolved
    /// against the file's directory.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(f) = &cfg.filters {
            if f.is_relative() {
                cfg.filters = Some(base.join(f));
            }
        }
        for f in &mut cfg.source_files {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    /// Move as `(0-based source, switch sample)`.
    pub fn move_event(&self) -> Option<(usize, usize)> {
        match (self.move_source, self.move_time) {
            (Some(k), Some(tau)) => Some((k - 1, (tau * self.sample_rate as f64).floor() as usize)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.sources == 0 || self.sources > MAX_K {
            return cfg_err(format!("sources = {} outside 1..={MAX_K}", self.sources));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return cfg_err(format!("duration = {} must be positive", self.duration));
        }
        if self.sample_rate == 0 {
            return cfg_err("sample_rate must be positive".into());
        }
        match (self.move_source, self.move_time) {
            (None, None) => {
                if self.move_column.is_some() {
                    return cfg_err("move_column given without move_source/move_time".into());
                }
            }
            (Some(k), Some(tau)) => {
                if k == 0 || k > self.sources {
                    return cfg_err(format!("move_source = {k} outside 1..={}", self.sources));
                }
                if !(tau > 0.0 && tau < self.duration) {
                    return cfg_err(format!("move_time = {tau} must lie inside (0, duration)"));
                }
            }
            _ => return cfg_err("move_source and move_time must be given together".into()),
        }
        if let Some(m) = &self.mixing_matrix {
            if m.len() != self.sources || m.iter().any(|r| r.len() != self.sources) {
                return cfg_err(format!("mixing_matrix must be {0}x{0}", self.sources));
            }
        }
        if let Some(c) = &self.move_column {
            if c.len() != self.sources {
                return cfg_err(format!("move_column must have {} entries", self.sources));
            }
        }
        if self.source_kind == SourceKind::Files && self.source_files.len() != self.sources {
            return cfg_err(format!(
                "source_kind = \"files\" needs {} source_files, got {}",
                self.sources,
                self.source_files.len()
            ));
        }
        Ok(())
    }
}

/// FIR mixing filters. `pre[mic][source]` is used for every source except
/// the moving one after the switch, which uses `post[mic]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirSet {
    pub pre: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post: Option<Vec<Vec<f64>>>,
}

/// Fully resolved mixing operator for both epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixingOperator {
    Instantaneous {
        /// `matrix[mic][source]`.
        matrix: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        post_move_column: Option<Vec<f64>>,
    },
    Convolutive {
        filters: FirSet,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoveInfo {
    /// 1-based source index.
    pub source: usize,
    pub time_s: f64,
    pub sample: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub sample_rate: u32,
    pub sources: Vec<Vec<f64>>,
    /// Microphone signals.
    pub mixtures: Vec<Vec<f64>>,
    /// Contribution of each source at microphone 1.
    pub images: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.mixtures.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A generated scenario: the resolved operator plus the signals.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub operator: MixingOperator,
    pub movement: Option<MoveInfo>,
    pub truth: GroundTruth,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Independent super-Gaussian test signals: white Gaussian noise whose
/// amplitude follows a log-normal envelope band-limited to 2–8 Hz, scaled
/// to unit RMS.
pub fn synth_sources(cfg: &ScenarioConfig) -> Result<Vec<Vec<f64>>> {
    if !(cfg.duration > 0.0) {
        return Err(contract("duration must be positive"));
    }
    let n = cfg.samples();
    let fs = cfg.sample_rate as f64;
    const PARTIALS: usize = 16;
    const LOG_GAIN_STD: f64 = 1.0;
    let sources = (0..cfg.sources)
        .map(|k| {
            let mut rng = rng_stream(cfg.seed, 16 + k as u64);
            let bandwidth = rng.gen_range(2.0..=8.0);
            let partials: Vec<(f64, f64)> = (0..PARTIALS)
                .map(|_| {
                    (
                        rng.gen_range(0.05..=bandwidth),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            let amp = (2.0 / PARTIALS as f64).sqrt();
            let mut s: Vec<f64> = (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    let g: f64 = partials
                        .iter()
                        .map(|&(f, ph)| (std::f64::consts::TAU * f * t + ph).cos())
                        .sum::<f64>()
                        * amp;
                    let carrier: f64 = StandardNormal.sample(&mut rng);
                    (LOG_GAIN_STD * g).exp() * carrier
                })
                .collect();
            let rms = (s.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
            if rms > 0.0 {
                s.iter_mut().for_each(|v| *v /= rms);
            }
            s
        })
        .collect();
    Ok(sources)
}

/// Loads mono (first channel) sources, truncated or zero-padded to the
/// configured duration.
pub fn load_sources(cfg: &ScenarioConfig) -> Result<Vec<Vec<f64>>> {
    let n = cfg.samples();
    cfg.source_files
        .iter()
        .map(|p| {
            let (chans, rate) = crate::audio::read_wav(p)?;
            if rate != cfg.sample_rate {
                return Err(Error::Config(format!(
                    "{} has sample rate {rate}, scenario uses {}",
                    p.display(),
                    cfg.sample_rate
                )));
            }
            let mut s = chans.into_iter().next().unwrap_or_default();
            s.resize(n, 0.0);
            Ok(s)
        })
        .collect()
}

/// 2-norm condition number of a square real matrix.
pub fn condition_number(m: &[Vec<f64>]) -> f64 {
    let k = m.len();
    let a = nalgebra::DMatrix::from_fn(k, k, |i, j| m[i][j]);
    let sv = a.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn unit_column(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn with_column(m: &[Vec<f64>], k: usize, col: &[f64]) -> Vec<Vec<f64>> {
    let mut out = m.to_vec();
    for (row, &c) in out.iter_mut().zip(col) {
        row[k] = c;
    }
    out
}

/// Random mixing matrix with unit-norm columns and condition ≤ [`MAX_CONDITION`].
pub fn random_mixing_matrix(rng: &mut ChaCha8Rng, k: usize) -> Vec<Vec<f64>> {
    loop {
        let cols: Vec<Vec<f64>> = (0..k).map(|_| unit_column(rng, k)).collect();
        let m: Vec<Vec<f64>> = (0..k)
            .map(|i| cols.iter().map(|c| c[i]).collect())
            .collect();
        if condition_number(&m) <= MAX_CONDITION {
            return m;
        }
    }
}

/// Post-move column for source `k` that keeps the matrix well conditioned and
/// points away from the original column.
pub fn random_move_column(rng: &mut ChaCha8Rng, m: &[Vec<f64>], k: usize) -> Vec<f64> {
    let dim = m.len();
    let old: Vec<f64> = m.iter().map(|r| r[k]).collect();
    loop {
        let col = unit_column(rng, dim);
        let coherence: f64 = col.iter().zip(&old).map(|(a, b)| a * b).sum::<f64>().abs();
        if coherence <= MAX_MOVE_COHERENCE
            && condition_number(&with_column(m, k, &col)) <= MAX_CONDITION
        {
            return col;
        }
    }
}

/// Sparse echo filter: a direct path followed by 2–4 decaying reflections,
/// all within [`MAX_ECHO_S`].
fn synthetic_echo(rng: &mut ChaCha8Rng, sample_rate: u32) -> Vec<f64> {
    let max_len = ((MAX_ECHO_S * sample_rate as f64) as usize).max(8);
    let taps = rng.gen_range(3..=5);
    let mut h = vec![0.0; max_len];
    let direct = rng.gen_range(0..max_len / 16);
    h[direct] = if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.7..1.0);
    for _ in 1..taps {
        let delay = rng.gen_range(direct + 1..max_len);
        let decay = (-(delay as f64) / (0.3 * max_len as f64)).exp();
        h[delay] += rng.gen_range(-0.5..0.5) * decay;
    }
    let last = h.iter().rposition(|&v| v != 0.0).unwrap_or(0);
    h.truncate(last + 1);
    h
}

fn check_nonsingular(m: &[Vec<f64>], epoch: &str) -> Result<()> {
    let c = condition_number(m);
    if !(c < 1e12) {
        return Err(contract(format!(
            "{epoch} mixing matrix is singular (condition {c:e})"
        )));
    }
    Ok(())
}

/// Resolves the mixing operator, generating anything the config leaves out.
pub fn resolve_operator(cfg: &ScenarioConfig) -> Result<MixingOperator> {
    cfg.validate()?;
    let k = cfg.sources;
    let mut rng = rng_stream(cfg.seed, 1);
    match cfg.mixing {
        MixingKind::Instantaneous => {
            let matrix = match &cfg.mixing_matrix {
                Some(m) => m.clone(),
                None => random_mixing_matrix(&mut rng, k),
            };
            check_nonsingular(&matrix, "pre-move")?;
            let post_move_column = match cfg.move_event() {
                None => None,
                Some((ks, _)) => {
                    let col = match &cfg.move_column {
                        Some(c) => c.clone(),
                        None => random_move_column(&mut rng, &matrix, ks),
                    };
                    check_nonsingular(&with_column(&matrix, ks, &col), "post-move")?;
                    Some(col)
                }
            };
            Ok(MixingOperator::Instantaneous {
                matrix,
                post_move_column,
            })
        }
        MixingKind::Convolutive => {
            let filters = match &cfg.filters {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    let set: FirSet = serde_json::from_str(&text)?;
                    if set.pre.len() != k || set.pre.iter().any(|r| r.len() != k) {
                        return Err(Error::Config(format!(
                            "{}: pre filters must be {k}x{k}",
                            path.display()
                        )));
                    }
                    if cfg.move_event().is_some() && set.post.as_ref().is_none_or(|p| p.len() != k)
                    {
                        return Err(Error::Config(format!(
                            "{}: a moving source needs {k} post filters",
                            path.display()
                        )));
                    }
                    set
                }
                None => {
                    let pre = (0..k)
                        .map(|_| {
                            (0..k)
                                .map(|_| synthetic_echo(&mut rng, cfg.sample_rate))
                                .collect()
                        })
                        .collect();
                    let post = cfg.move_event().map(|_| {
                        (0..k)
                            .map(|_| synthetic_echo(&mut rng, cfg.sample_rate))
                            .collect()
                    });
                    FirSet { pre, post }
                }
            };
            Ok(MixingOperator::Convolutive { filters })
        }
    }
}

/// Linear convolution truncated to `x.len()` samples.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    let nonzero = h.iter().filter(|&&v| v != 0.0).count();
    if nonzero <= 64 {
        let mut out = vec![0.0; n];
        for (d, &g) in h.iter().enumerate().filter(|(_, &g)| g != 0.0) {
            for (o, &xi) in out[d.min(n)..].iter_mut().zip(x) {
                *o += g * xi;
            }
        }
        return out;
    }
    use num_complex::Complex64;
    let size = (n + h.len()).next_power_of_two();
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    a.resize(size, Complex64::new(0.0, 0.0));
    let mut b: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    b.resize(size, Complex64::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a.iter().take(n).map(|z| z.re / size as f64).collect()
}

/// Mixes `sources` through `operator`. Per-source contributions are summed
/// in source order, so the mixture at microphone 1 is exactly the sum of
/// the returned images.
pub fn mix(
    operator: &MixingOperator,
    movement: Option<(usize, usize)>,
    sources: &[Vec<f64>],
    sample_rate: u32,
) -> Result<GroundTruth> {
    let k = sources.len();
    if k == 0 {
        return Err(contract("no sources to mix"));
    }
    let n = sources[0].len();
    if sources.iter().any(|s| s.len() != n) {
        return Err(contract("sources differ in length"));
    }
    if let Some((ks, _)) = movement {
        if ks >= k {
            return Err(contract("moving source index out of range"));
        }
    }
    // contributions[mic][source]
    let contributions: Vec<Vec<Vec<f64>>> = match operator {
        MixingOperator::Instantaneous {
            matrix,
            post_move_column,
        } => {
            if matrix.len() != k || matrix.iter().any(|r| r.len() != k) {
                return Err(contract("mixing matrix shape does not match source count"));
            }
            check_nonsingular(matrix, "pre-move")?;
            if let (Some((ks, _)), Some(col)) = (movement, post_move_column) {
                check_nonsingular(&with_column(matrix, ks, col), "post-move")?;
            }
            (0..k)
                .map(|m| {
                    (0..k)
                        .map(|src| {
                            let gain = matrix[m][src];
                            match (movement, post_move_column) {
                                (Some((ks, n0)), Some(col)) if ks == src => sources[src]
                                    .iter()
                                    .enumerate()
                                    .map(|(i, &s)| if i < n0 { gain * s } else { col[m] * s })
                                    .collect(),
                                _ => sources[src].iter().map(|&s| gain * s).collect(),
                            }
                        })
                        .collect()
                })
                .collect()
        }
        MixingOperator::Convolutive { filters } => {
            if filters.pre.len() != k || filters.pre.iter().any(|r| r.len() != k) {
                return Err(contract("filter set shape does not match source count"));
            }
            (0..k)
                .map(|m| {
                    (0..k)
                        .map(|src| match (movement, &filters.post) {
                            (Some((ks, n0)), Some(post)) if ks == src => {
                                let n0 = n0.min(n);
                                let mut before = sources[src].clone();
                                before[n0..].iter_mut().for_each(|v| *v = 0.0);
                                let mut after = sources[src].clone();
                                after[..n0].iter_mut().for_each(|v| *v = 0.0);
                                let a = convolve(&before, &filters.pre[m][src]);
                                let b = convolve(&after, &post[m]);
                                a.iter().zip(&b).map(|(x, y)| x + y).collect()
                            }
                            _ => convolve(&sources[src], &filters.pre[m][src]),
                        })
                        .collect()
                })
                .collect()
        }
    };

    let mixtures: Vec<Vec<f64>> = contributions
        .iter()
        .map(|per_src| {
            let mut acc = vec![0.0; n];
            for c in per_src {
                for (a, v) in acc.iter_mut().zip(c) {
                    *a += v;
                }
            }
            acc
        })
        .collect();
    let images = contributions.into_iter().next().unwrap_or_default();
    Ok(GroundTruth {
        sample_rate,
        sources: sources.to_vec(),
        mixtures,
        images,
    })
}

/// Builds sources, resolves the operator and mixes.
pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let sources = match cfg.source_kind {
        SourceKind::Synthetic => synth_sources(cfg)?,
        SourceKind::Files => load_sources(cfg)?,
    };
    let operator = resolve_operator(cfg)?;
    let truth = mix(&operator, cfg.move_event(), &sources, cfg.sample_rate)?;
    let movement = cfg.move_event().map(|(k, sample)| MoveInfo {
        source: k + 1,
        time_s: cfg.move_time.unwrap_or_default(),
        sample,
    });
    Ok(Scenario {
        config: cfg.clone(),
        operator,
        movement,
        truth,
    })
}

//! Online AuxIVA engine with IP and ISS demixing updates.
//!
//! Each call to [`OnlineSeparator::process_frame`] consumes one STFT frame
//! (all bins) and emits the separated frame:
//!
//! 1. carry `W_f` over from the previous frame;
//! 2. for each inner iteration, recompute the source activities `r_k` from
//!    the current `W`, re-blend every `U_kf` from the previous frame's
//!    stored covariance, and update the demixing matrix for every source in
//!    the active index set (IP row update or ISS rank-1 update);
//! 3. store the last iteration's covariances and emit `y_f = W_f x_f`.
//!
//! Demixing matrices hold the row vectors `w_k^H`, so row `k` of `W_f` is the
//! conjugate of the demixing vector `w_kf`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, DegeneracyKind, Error, Result};
use crate::linalg::{self, CMat, CVec, LinalgError, MAX_K};

/// Initial covariance scale (`U_kf0 = 0.001 I`).
pub const DEFAULT_COV_INIT: f64 = 1e-3;
/// Denominators of the ISS update below this are treated as degenerate.
pub const ISS_DENOMINATOR_FLOOR: f64 = 1e-32;
/// Minimum `|1 - v_k|` accepted by [`iss_apply`].
pub const ISS_STEERING_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContrastKind {
    /// Spherical Laplace prior, `φ(r) = 1 / (2r)`.
    #[default]
    Laplace,
    /// Time-varying Gaussian prior, `φ(r) = F / r²`.
    TimeVaryingGaussian,
}

/// Source prior: supplies the weighting function `φ(r)` and the contrast `G(r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastModel {
    pub kind: ContrastKind,
    /// Number of frequency bins `F`.
    pub bins: usize,
    pub r_floor: f64,
}

impl ContrastModel {
    pub fn new(kind: ContrastKind, bins: usize) -> Self {
        ContrastModel {
            kind,
            bins,
            r_floor: 1e-8,
        }
    }

    pub fn laplace(bins: usize) -> Self {
        Self::new(ContrastKind::Laplace, bins)
    }

    pub fn gaussian(bins: usize) -> Self {
        Self::new(ContrastKind::TimeVaryingGaussian, bins)
    }

    pub fn with_floor(mut self, r_floor: f64) -> Self {
        self.r_floor = r_floor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_floor > 0.0) || !self.r_floor.is_finite() {
            return Err(contract(format!(
                "r_floor {} must be positive",
                self.r_floor
            )));
        }
        if self.bins == 0 {
            return Err(contract("contrast model needs at least one bin"));
        }
        Ok(())
    }

    #[inline]
    pub fn weight(&self, r: f64) -> f64 {
        let r = r.max(self.r_floor);
        match self.kind {
            ContrastKind::Laplace => 0.5 / r,
            ContrastKind::TimeVaryingGaussian => self.bins as f64 / (r * r),
        }
    }

    /// `G(r)`; the Gaussian contrast is reported up to an additive constant.
    pub fn contrast(&self, r: f64) -> f64 {
        let r = r.max(self.r_floor);
        match self.kind {
            ContrastKind::Laplace => r,
            ContrastKind::TimeVaryingGaussian => 2.0 * self.bins as f64 * r.ln(),
        }
    }
}

/// `φ(r)` of the given model, with flooring.
pub fn weight(model: &ContrastModel, r: f64) -> f64 {
    model.weight(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMethod {
    /// Iterative projection: one linear solve per source and bin.
    Ip,
    /// Iterative source steering: inverse-free rank-1 update.
    #[default]
    Iss,
}

impl std::fmt::Display for UpdateMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UpdateMethod::Ip => "ip",
            UpdateMethod::Iss => "iss",
        })
    }
}

/// Set of 0-based source indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(into = "Vec<usize>", try_from = "Vec<usize>")]
pub struct SourceMask(u16);

impl SourceMask {
    pub fn all(n_src: usize) -> Self {
        SourceMask(((1u32 << n_src) - 1) as u16)
    }

    pub fn from_indices(indices: &[usize]) -> Result<Self> {
        let mut bits = 0u16;
        for &i in indices {
            if i >= MAX_K {
                return Err(contract(format!("source index {i} out of range")));
            }
            bits |= 1 << i;
        }
        Ok(SourceMask(bits))
    }

    #[inline]
    pub fn contains(&self, k: usize) -> bool {
        k < 16 && self.0 & (1 << k) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..16).filter(move |&k| self.contains(k))
    }
}

impl From<SourceMask> for Vec<usize> {
    fn from(m: SourceMask) -> Vec<usize> {
        m.iter().collect()
    }
}

impl TryFrom<Vec<usize>> for SourceMask {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        SourceMask::from_indices(&v)
    }
}

/// Which sources receive demixing updates at a given frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SourceSelector {
    /// Every source at every update frame.
    #[default]
    All,
    /// Every source before `switch_frame`, only `after` from then on.
    Switch {
        switch_frame: usize,
        after: SourceMask,
    },
}

impl SourceSelector {
    /// The common "one moving source" schedule (0-based `source`).
    pub fn one(source: usize, switch_frame: usize) -> Result<Self> {
        Ok(SourceSelector::Switch {
            switch_frame,
            after: SourceMask::from_indices(&[source])?,
        })
    }

    #[inline]
    pub fn active(&self, frame: usize, n_src: usize) -> SourceMask {
        match *self {
            SourceSelector::All => SourceMask::all(n_src),
            SourceSelector::Switch {
                switch_frame,
                after,
            } => {
                if frame < switch_frame {
                    SourceMask::all(n_src)
                } else {
                    after
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    /// Forgetting factor, `0 ≤ α < 1`.
    pub alpha: f64,
    /// Inner iterations per frame.
    pub n_iter: usize,
    pub selector: SourceSelector,
    /// Demixing updates run on frames `t` with `t % update_period == 0`
    /// (0-based `t`); covariances are refreshed on every frame.
    pub update_period: usize,
    pub method: UpdateMethod,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            alpha: 0.99,
            n_iter: 2,
            selector: SourceSelector::All,
            update_period: 1,
            method: UpdateMethod::Iss,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self, n_src: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(contract(format!("alpha {} must lie in [0, 1)", self.alpha)));
        }
        if self.n_iter == 0 {
            return Err(contract("n_iter must be at least 1"));
        }
        if self.update_period == 0 {
            return Err(contract("update_period must be at least 1"));
        }
        if let SourceSelector::Switch { after, .. } = self.selector {
            if after.is_empty() {
                return Err(contract("selector leaves no source to update"));
            }
            if let Some(k) = after.iter().find(|&k| k >= n_src) {
                return Err(contract(format!(
                    "selector names source {} but only {n_src} sources exist",
                    k + 1
                )));
            }
        }
        Ok(())
    }
}

/// A degenerate update detected inside a single bin, before frame/bin
/// context is attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateFault {
    pub kind: DegeneracyKind,
    pub source: usize,
    pub other: Option<usize>,
}

impl UpdateFault {
    fn new(kind: DegeneracyKind, source: usize, other: Option<usize>) -> Self {
        UpdateFault {
            kind,
            source,
            other,
        }
    }

    pub fn at(self, bin: usize, frame: Option<usize>) -> Error {
        Error::Degenerate {
            kind: self.kind,
            frame,
            bin,
            source_index: self.source,
            other: self.other,
        }
    }
}

impl std::fmt::Display for UpdateFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?} updating source {}", self.kind, self.source)
    }
}

impl std::error::Error for UpdateFault {}

/// Logged when a bin's update was abandoned and its demixing matrix frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FrameFault {
    pub frame: usize,
    pub bin: usize,
    pub source: usize,
    pub other: Option<usize>,
    pub kind: DegeneracyKind,
}

/// `row_k(W) · x`, the `k`-th separated coefficient.
#[inline]
fn row_apply(w: &CMat, k: usize, x: &CVec) -> Complex64 {
    w.row(k)
        .iter()
        .zip(x.as_slice())
        .fold(Complex64::new(0.0, 0.0), |s, (a, b)| s + a * b)
}

/// The demixing vector `w_k` (column form) stored as row `k` of `W`.
pub fn demixing_vector(w: &CMat, k: usize) -> CVec {
    let mut v = CVec::zeros(w.dim());
    for (dst, src) in v.as_mut_slice().iter_mut().zip(w.row(k)) {
        *dst = src.conj();
    }
    v
}

/// Stores the demixing vector `v` as row `k` (`w_k^H`) of `W`.
pub fn set_demixing_vector(w: &mut CMat, k: usize, v: &CVec) {
    for (dst, src) in w.row_mut(k).iter_mut().zip(v.as_slice()) {
        *dst = src.conj();
    }
}

/// `r_k = max(r_floor, sqrt(Σ_f |w_kf^H x_f|²))` over one frame.
pub fn source_activity(
    demix: &[CMat],
    frame: &[CVec],
    k: usize,
    model: &ContrastModel,
) -> Result<f64> {
    if demix.len() != frame.len() {
        return Err(contract(format!(
            "{} demixing matrices for {} bins",
            demix.len(),
            frame.len()
        )));
    }
    let mut power = 0.0;
    for (w, x) in demix.iter().zip(frame) {
        if w.dim() != x.dim() || k >= w.dim() {
            return Err(contract("frame and demixing dimensions disagree"));
        }
        power += row_apply(w, k, x).norm_sqr();
    }
    Ok(power.sqrt().max(model.r_floor))
}

/// `α U_prev + (1 − α) φ(r) x x^H`. The base is always the previous frame's
/// stored covariance, never an intermediate result of the same frame.
pub fn update_covariance(prev: &CMat, alpha: f64, phi_r: f64, x: &CVec) -> Result<CMat> {
    Ok(linalg::rank1_blend(prev, alpha, phi_r, x)?)
}

/// IP update of source `k`: `w = (W U)^{-1} e_k`, normalized so that
/// `w^H U w = 1`. Returns the new demixing vector.
pub fn ip_update_row(w: &CMat, u: &CMat, k: usize) -> Result<CVec, UpdateFault> {
    let wu = w.matmul(u);
    let z = match linalg::solve_unit(&wu, k) {
        Ok(z) => z,
        Err(LinalgError::Singular { .. }) => {
            return Err(UpdateFault::new(DegeneracyKind::SingularProduct, k, None))
        }
        Err(_) => return Err(UpdateFault::new(DegeneracyKind::NonFinite, k, None)),
    };
    let norm = linalg::quad_form_unchecked(z.as_slice(), u, z.as_slice()).re;
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(UpdateFault::new(DegeneracyKind::NonPositiveNorm, k, None));
    }
    let out = z.scale(Complex64::new(1.0 / norm.sqrt(), 0.0));
    if !out.is_finite() {
        return Err(UpdateFault::new(DegeneracyKind::NonFinite, k, None));
    }
    Ok(out)
}

/// Steering-update vector `v` for source `k`:
/// `v_m = (w_m^H U_m w_k) / (w_k^H U_m w_k)` for `m ≠ k` and
/// `v_k = 1 − (w_k^H U_k w_k)^{-1/2}`.
pub fn iss_vector(w: &CMat, u: &[CMat], k: usize) -> Result<CVec, UpdateFault> {
    let d = w.dim();
    debug_assert_eq!(u.len(), d);
    let wk = w.row(k);
    let mut v = CVec::zeros(d);
    for (m, um) in u.iter().enumerate().take(d) {
        // U_m w_k, shared by numerator and denominator
        let mut g = [Complex64::new(0.0, 0.0); MAX_K];
        for (i, gi) in g.iter_mut().enumerate().take(d) {
            *gi = um
                .row(i)
                .iter()
                .zip(wk)
                .fold(Complex64::new(0.0, 0.0), |s, (a, b)| s + a * b.conj());
        }
        let den: f64 = wk.iter().zip(&g).map(|(a, b)| a * b).sum::<Complex64>().re;
        linalg::counters::cmacs(d * d + 2 * d);
        if !(den > ISS_DENOMINATOR_FLOOR) || !den.is_finite() {
            return Err(UpdateFault::new(
                DegeneracyKind::NonPositiveDenominator,
                k,
                Some(m),
            ));
        }
        v[m] = if m == k {
            Complex64::new(1.0 - den.sqrt().recip(), 0.0)
        } else {
            let num: Complex64 = w.row(m).iter().zip(&g).map(|(a, b)| a * b).sum();
            num / den
        };
    }
    Ok(v)
}

/// `W − v w_k^H`, every row using the pre-update `w_k`.
pub fn iss_apply(w: &CMat, v: &CVec, k: usize) -> Result<CMat, UpdateFault> {
    let mut out = *w;
    iss_apply_in_place(&mut out, v, k)?;
    Ok(out)
}

#[inline]
fn iss_apply_in_place(w: &mut CMat, v: &CVec, k: usize) -> Result<(), UpdateFault> {
    let d = w.dim();
    if (Complex64::new(1.0, 0.0) - v[k]).norm() < ISS_STEERING_FLOOR {
        return Err(UpdateFault::new(DegeneracyKind::SingularSteering, k, None));
    }
    if !v.is_finite() {
        return Err(UpdateFault::new(DegeneracyKind::NonFinite, k, None));
    }
    let mut wk = [Complex64::new(0.0, 0.0); MAX_K];
    wk[..d].copy_from_slice(w.row(k));
    for m in 0..d {
        let vm = v[m];
        for (dst, src) in w.row_mut(m).iter_mut().zip(&wk[..d]) {
            *dst -= vm * src;
        }
    }
    linalg::counters::cmacs(d * d);
    Ok(())
}

/// One IP or ISS update of source `k` applied in place to `W`.
#[inline]
pub fn update_source(
    method: UpdateMethod,
    w: &mut CMat,
    u: &[CMat],
    k: usize,
) -> Result<(), UpdateFault> {
    match method {
        UpdateMethod::Iss => {
            let v = iss_vector(w, u, k)?;
            iss_apply_in_place(w, &v, k)
        }
        UpdateMethod::Ip => {
            let row = ip_update_row(w, &u[k], k)?;
            set_demixing_vector(w, k, &row);
            Ok(())
        }
    }
}

/// Back-projection onto microphone 1: `y'_k = (W^{-1})_{1k} y_k`.
pub fn project_back(w: &CMat, y: &CVec) -> Result<CVec> {
    if w.dim() != y.dim() {
        return Err(contract("demixing matrix and frame dimensions disagree"));
    }
    let a = linalg::inverse(w)?;
    let mut out = CVec::zeros(y.dim());
    for k in 0..y.dim() {
        out[k] = a[(0, k)] * y[k];
    }
    Ok(out)
}

/// Per-bin work of one inner iteration.
struct BinStep<'a> {
    alpha: f64,
    phi: &'a [f64],
    method: UpdateMethod,
    /// `None` on frames without demixing updates.
    mask: Option<SourceMask>,
    frame: usize,
}

impl BinStep<'_> {
    #[inline]
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        bin: usize,
        w: &mut CMat,
        prev_cov: &[CMat],
        cur_cov: &mut [CMat],
        start: &CMat,
        frozen: &mut bool,
        x: &CVec,
    ) -> Option<FrameFault> {
        for ((cur, prev), &phi) in cur_cov.iter_mut().zip(prev_cov).zip(self.phi) {
            linalg::rank1_blend_into(cur, prev, self.alpha, phi, x.as_slice());
        }
        let mask = self.mask?;
        if *frozen {
            return None;
        }
        for k in mask.iter() {
            if let Err(fault) = update_source(self.method, w, cur_cov, k) {
                w.copy_from(start);
                *frozen = true;
                return Some(FrameFault {
                    frame: self.frame,
                    bin,
                    source: fault.source,
                    other: fault.other,
                    kind: fault.kind,
                });
            }
        }
        None
    }
}

/// Streaming separator state for one multichannel stream.
pub struct OnlineSeparator {
    n_src: usize,
    n_bins: usize,
    cfg: OnlineConfig,
    model: ContrastModel,
    demix: Vec<CMat>,
    /// Stored covariances `U_{k f}` at `f * K + k`.
    cov: Vec<CMat>,
    cov_scratch: Vec<CMat>,
    frame_start: Vec<CMat>,
    frozen: Vec<bool>,
    bin_power: Vec<f64>,
    r: [f64; MAX_K],
    phi: [f64; MAX_K],
    frame_index: usize,
    faults: Vec<FrameFault>,
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for OnlineSeparator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnlineSeparator")
            .field("n_src", &self.n_src)
            .field("n_bins", &self.n_bins)
            .field("cfg", &self.cfg)
            .field("frame_index", &self.frame_index)
            .finish_non_exhaustive()
    }
}

impl OnlineSeparator {
    /// Engine with `W_f0 = I` and `U_kf0 = 0.001 I`.
    pub fn new(
        n_src: usize,
        n_bins: usize,
        cfg: OnlineConfig,
        model: ContrastModel,
    ) -> Result<Self> {
        if n_src == 0 || n_src > MAX_K {
            return Err(contract(format!(
                "source count {n_src} outside 1..={MAX_K}"
            )));
        }
        if n_bins == 0 {
            return Err(contract("at least one frequency bin is required"));
        }
        cfg.validate(n_src)?;
        model.validate()?;
        if model.bins != n_bins {
            return Err(contract(format!(
                "contrast model expects {} bins, engine has {n_bins}",
                model.bins
            )));
        }
        Ok(OnlineSeparator {
            n_src,
            n_bins,
            cfg,
            model,
            demix: vec![CMat::identity(n_src); n_bins],
            cov: vec![CMat::scaled_identity(n_src, DEFAULT_COV_INIT); n_bins * n_src],
            cov_scratch: vec![CMat::zeros(n_src); n_bins * n_src],
            frame_start: vec![CMat::identity(n_src); n_bins],
            frozen: vec![false; n_bins],
            bin_power: vec![0.0; n_bins * n_src],
            r: [0.0; MAX_K],
            phi: [0.0; MAX_K],
            frame_index: 0,
            faults: Vec::new(),
            pool: None,
        })
    }

    /// Replaces the initial state. `cov` is indexed `[f * K + k]`.
    pub fn with_state(mut self, demix: Vec<CMat>, cov: Vec<CMat>) -> Result<Self> {
        if demix.len() != self.n_bins || cov.len() != self.n_bins * self.n_src {
            return Err(contract("initial state has the wrong number of matrices"));
        }
        if demix.iter().chain(&cov).any(|m| m.dim() != self.n_src) {
            return Err(contract("initial state has the wrong matrix size"));
        }
        self.demix = demix;
        self.cov = cov;
        Ok(self)
    }

    /// Runs per-bin work on `threads` rayon workers (1 = in the caller's thread).
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        self.pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Config(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(self)
    }

    pub fn sources(&self) -> usize {
        self.n_src
    }

    pub fn bins(&self) -> usize {
        self.n_bins
    }

    pub fn config(&self) -> &OnlineConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ContrastModel {
        &self.model
    }

    pub fn demixing(&self) -> &[CMat] {
        &self.demix
    }

    pub fn covariance(&self, k: usize, f: usize) -> &CMat {
        &self.cov[f * self.n_src + k]
    }

    /// Activities `r_k` from the last inner iteration of the last frame.
    pub fn activities(&self) -> &[f64] {
        &self.r[..self.n_src]
    }

    /// Number of frames processed so far.
    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn faults(&self) -> &[FrameFault] {
        &self.faults
    }

    fn check_frame(&self, x: &[CVec], y: &[CVec]) -> Result<()> {
        if x.len() != self.n_bins || y.len() != self.n_bins {
            return Err(contract(format!(
                "frame has {} bins (output {}), engine expects {}",
                x.len(),
                y.len(),
                self.n_bins
            )));
        }
        if x.iter().any(|v| v.dim() != self.n_src) {
            return Err(contract("observation vector has the wrong channel count"));
        }
        Ok(())
    }

    fn compute_activities(&mut self, x: &[CVec]) {
        let k_n = self.n_src;
        let power_of_bin = |(p, (w, xf)): (&mut [f64], (&CMat, &CVec))| {
            for (k, pk) in p.iter_mut().enumerate() {
                *pk = row_apply(w, k, xf).norm_sqr();
            }
        };
        match &self.pool {
            Some(pool) => {
                let (power, demix) = (&mut self.bin_power, &self.demix);
                pool.install(|| {
                    power
                        .par_chunks_mut(k_n)
                        .zip(demix.par_iter().zip(x.par_iter()))
                        .for_each(power_of_bin)
                });
            }
            None => self
                .bin_power
                .chunks_mut(k_n)
                .zip(self.demix.iter().zip(x.iter()))
                .for_each(power_of_bin),
        }
        linalg::counters::cmacs(self.n_bins * k_n * k_n);
        let mut sums = [0.0f64; MAX_K];
        for p in self.bin_power.chunks(k_n) {
            for (s, v) in sums.iter_mut().zip(p) {
                *s += v;
            }
        }
        for k in 0..k_n {
            self.r[k] = sums[k].sqrt().max(self.model.r_floor);
            self.phi[k] = self.model.weight(self.r[k]);
        }
    }

    /// Processes one frame: `x[f]` is the `K`-channel observation of bin `f`,
    /// and the separated coefficients are written to `y[f]`.
    ///
    /// Degenerate updates do not abort the stream: the affected bin keeps its
    /// previous demixing matrix for this frame and the event is recorded in
    /// [`faults`](Self::faults).
    pub fn process_frame(&mut self, x: &[CVec], y: &mut [CVec]) -> Result<()> {
        self.check_frame(x, y)?;
        let t = self.frame_index;
        let k_n = self.n_src;
        let is_update = t.is_multiple_of(self.cfg.update_period);
        let iters = if is_update { self.cfg.n_iter } else { 1 };
        let mask = is_update.then(|| self.cfg.selector.active(t, k_n));

        if is_update {
            for (s, w) in self.frame_start.iter_mut().zip(&self.demix) {
                s.copy_from(w);
            }
            self.frozen.iter_mut().for_each(|f| *f = false);
        }

        for _ in 0..iters {
            self.compute_activities(x);
            let step = BinStep {
                alpha: self.cfg.alpha,
                phi: &self.phi[..k_n],
                method: self.cfg.method,
                mask,
                frame: t,
            };
            let demix = &mut self.demix;
            let prev = &self.cov;
            let cur = &mut self.cov_scratch;
            let start = &self.frame_start;
            let frozen = &mut self.frozen;
            match &self.pool {
                Some(pool) => {
                    let mut found: Vec<FrameFault> = pool.install(|| {
                        demix
                            .par_iter_mut()
                            .zip(prev.par_chunks(k_n))
                            .zip(cur.par_chunks_mut(k_n))
                            .zip(start.par_iter())
                            .zip(frozen.par_iter_mut())
                            .zip(x.par_iter())
                            .enumerate()
                            .filter_map(|(f, (((((w, p), c), s), fr), xf))| {
                                step.run(f, w, p, c, s, fr, xf)
                            })
                            .collect()
                    });
                    self.faults.append(&mut found);
                }
                None => {
                    let bins = demix
                        .iter_mut()
                        .zip(prev.chunks(k_n))
                        .zip(cur.chunks_mut(k_n))
                        .zip(start.iter())
                        .zip(frozen.iter_mut())
                        .zip(x.iter())
                        .enumerate();
                    for (f, (((((w, p), c), s), fr), xf)) in bins {
                        if let Some(fault) = step.run(f, w, p, c, s, fr, xf) {
                            self.faults.push(fault);
                        }
                    }
                }
            }
        }
        // the last iteration's blend becomes U_{k f t}
        std::mem::swap(&mut self.cov, &mut self.cov_scratch);

        for ((out, w), xf) in y.iter_mut().zip(&self.demix).zip(x) {
            *out = w.mul_vec(xf);
        }
        self.frame_index += 1;
        Ok(())
    }

    /// Back-projects a separated frame onto microphone 1 using the current
    /// demixing matrices. Bins whose matrix cannot be inverted are zeroed and
    /// counted in the returned value.
    pub fn project_back_frame(&self, y: &[CVec], out: &mut [CVec]) -> Result<usize> {
        if y.len() != self.n_bins || out.len() != self.n_bins {
            return Err(contract("frame length does not match engine bin count"));
        }
        let mut singular = 0;
        for ((o, w), yf) in out.iter_mut().zip(&self.demix).zip(y) {
            match project_back(w, yf) {
                Ok(v) => *o = v,
                Err(Error::Linalg(LinalgError::Singular { .. })) => {
                    *o = CVec::zeros(self.n_src);
                    singular += 1;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(singular)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::counters;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_mat(rng: &mut impl Rng, dim: usize) -> CMat {
        let mut m = CMat::zeros(dim);
        for z in m.as_mut_slice() {
            *z = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        m
    }

    fn random_psd(rng: &mut impl Rng, dim: usize) -> CMat {
        let b = random_mat(rng, dim);
        let mut p = b.matmul(&b.adjoint());
        for i in 0..dim {
            p[(i, i)] = c(p[(i, i)].re + 0.1, 0.0);
        }
        // exact Hermitian symmetry
        for i in 0..dim {
            for j in i + 1..dim {
                p[(j, i)] = p[(i, j)].conj();
            }
        }
        p
    }

    fn random_vec(rng: &mut impl Rng, dim: usize) -> CVec {
        let mut v = CVec::zeros(dim);
        for z in v.as_mut_slice() {
            *z = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        v
    }

    #[test]
    fn source_activity_examples() {
        let model = ContrastModel::laplace(4);
        let w = vec![CMat::identity(2); 4];
        let e1 = vec![CVec::basis(2, 0); 4];
        assert_eq!(source_activity(&w, &e1, 0, &model).unwrap(), 2.0);
        let zero = vec![CVec::zeros(2); 4];
        assert_eq!(
            source_activity(&w, &zero, 0, &model).unwrap(),
            model.r_floor
        );
        let e2 = vec![CVec::basis(2, 1); 4];
        assert_eq!(source_activity(&w, &e2, 0, &model).unwrap(), model.r_floor);
        assert!(source_activity(&w[..3], &e2, 0, &model).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(weight(&ContrastModel::laplace(8), 2.0), 0.25);
        assert_eq!(weight(&ContrastModel::gaussian(8), 2.0), 2.0);
        let m = ContrastModel::laplace(8);
        assert_eq!(weight(&m, 0.0), 1.0 / (2.0 * m.r_floor));
    }

    #[test]
    fn covariance_update_examples() {
        let x = CVec::from_real(&[0.3, -2.0]).unwrap();
        let u = update_covariance(&CMat::scaled_identity(2, 0.001), 0.99, 0.0, &x).unwrap();
        assert_abs_diff_eq!(u[(0, 0)].re, 0.00099, epsilon = 1e-18);
        assert_abs_diff_eq!(u[(1, 1)].re, 0.00099, epsilon = 1e-18);
        assert_eq!(u[(0, 1)], c(0.0, 0.0));

        let e1 = CVec::basis(2, 0);
        let u = update_covariance(&CMat::scaled_identity(2, 7.0), 0.0, 1.0, &e1).unwrap();
        assert_eq!(u, CMat::diag(&[1.0, 0.0]).unwrap());
        let u = update_covariance(&CMat::scaled_identity(2, 2.0), 0.5, 1.0, &e1).unwrap();
        assert_eq!(u, CMat::diag(&[1.5, 1.0]).unwrap());
    }

    #[test]
    fn ip_examples() {
        let w = ip_update_row(&CMat::identity(2), &CMat::identity(2), 0).unwrap();
        assert_eq!(w, CVec::basis(2, 0));
        let w = ip_update_row(&CMat::identity(2), &CMat::diag(&[4.0, 1.0]).unwrap(), 0).unwrap();
        assert_abs_diff_eq!(w[0].re, 0.5, epsilon = 1e-15);
        assert_eq!(w[1], c(0.0, 0.0));
    }

    #[test]
    fn ip_defining_equations_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let dim = rng.gen_range(2..=5);
            let k = rng.gen_range(0..dim);
            let u = random_psd(&mut rng, dim);
            let mut w = random_mat(&mut rng, dim);
            let row = ip_update_row(&w, &u, k).unwrap();
            let norm = linalg::hermitian_form(&row, &u).unwrap();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-10);
            set_demixing_vector(&mut w, k, &row);
            // W' U w has zeros off row k
            let wuw = w.matmul(&u).mul_vec(&row);
            for m in (0..dim).filter(|&m| m != k) {
                assert!(wuw[m].norm() <= 1e-10, "row {m}: {}", wuw[m]);
            }
        }
    }

    #[test]
    fn ip_singular_product_is_reported() {
        let mut w = CMat::identity(2);
        w[(1, 1)] = c(0.0, 0.0);
        let err = ip_update_row(&w, &CMat::identity(2), 0).unwrap_err();
        assert_eq!(err.kind, DegeneracyKind::SingularProduct);
        match err.at(7, Some(3)) {
            Error::Degenerate { bin, frame, .. } => assert_eq!((bin, frame), (7, Some(3))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn iss_examples() {
        let id = CMat::identity(2);
        let v = iss_vector(&id, &[id, id], 0).unwrap();
        assert_eq!(v, CVec::zeros(2));
        let four = CMat::scaled_identity(2, 4.0);
        let v = iss_vector(&id, &[four, four], 0).unwrap();
        assert_abs_diff_eq!(v[0].re, 0.5, epsilon = 1e-15);
        assert_eq!(v[1], c(0.0, 0.0));

        assert_eq!(iss_apply(&id, &CVec::zeros(2), 0).unwrap(), id);
        let v = CVec::from_real(&[0.5, 0.0]).unwrap();
        assert_eq!(
            iss_apply(&id, &v, 0).unwrap(),
            CMat::diag(&[0.5, 1.0]).unwrap()
        );
    }

    #[test]
    fn iss_stationarity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 3;
        let k = 1;
        let u: Vec<CMat> = (0..dim).map(|_| random_psd(&mut rng, dim)).collect();
        let w = random_mat(&mut rng, dim);
        let wk_old = demixing_vector(&w, k);
        let v = iss_vector(&w, &u, k).unwrap();
        let w_new = iss_apply(&w, &v, k).unwrap();
        for m in (0..dim).filter(|&m| m != k) {
            let wm = demixing_vector(&w_new, m);
            let q = linalg::quad_form(&wm, &u[m], &wk_old).unwrap();
            assert!(q.norm() <= 1e-10);
        }
        let wk = demixing_vector(&w_new, k);
        assert_abs_diff_eq!(
            linalg::hermitian_form(&wk, &u[k]).unwrap(),
            1.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn iss_column_locality_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for dim in 2..=5 {
            let w = random_mat(&mut rng, dim);
            let v = random_vec(&mut rng, dim);
            let k = rng.gen_range(0..dim);
            let before = linalg::inverse(&w).unwrap();
            let after = linalg::inverse(&iss_apply(&w, &v, k).unwrap()).unwrap();
            for m in (0..dim).filter(|&m| m != k) {
                let diff = before.column(m).distance(&after.column(m));
                assert!(diff <= 1e-10 * before.column(m).norm());
            }
        }
    }

    #[test]
    fn iss_degenerate_cases() {
        let id = CMat::identity(2);
        let zero = CMat::zeros(2);
        let err = iss_vector(&id, &[id, zero], 0).unwrap_err();
        assert_eq!(err.kind, DegeneracyKind::NonPositiveDenominator);
        assert_eq!(err.other, Some(1));
        let v = CVec::from_real(&[1.0, 0.0]).unwrap();
        assert_eq!(
            iss_apply(&id, &v, 0).unwrap_err().kind,
            DegeneracyKind::SingularSteering
        );
    }

    #[test]
    fn iss_identity_fixed_point() {
        let dim = 4;
        let id = CMat::identity(dim);
        let u = vec![id; dim];
        let mut w = id;
        for k in 0..dim {
            update_source(UpdateMethod::Iss, &mut w, &u, k).unwrap();
        }
        assert!(w.sub(&id).frobenius_norm() <= 1e-14);
    }

    #[test]
    fn project_back_examples() {
        let y = CVec::from_real(&[3.0, -1.0]).unwrap();
        let out = project_back(&CMat::identity(2), &y).unwrap();
        assert_eq!(out, CVec::from_real(&[3.0, 0.0]).unwrap());
        let out = project_back(&CMat::diag(&[2.0, 0.5]).unwrap(), &y).unwrap();
        assert_eq!(out, CVec::from_real(&[1.5, 0.0]).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_mat(&mut rng, 3);
        let x = random_vec(&mut rng, 3);
        let yp = project_back(&w, &w.mul_vec(&x)).unwrap();
        let sum: Complex64 = yp.as_slice().iter().sum();
        assert!((sum - x[0]).norm() <= 1e-10 * x[0].norm().max(1e-300));

        assert!(project_back(&CMat::zeros(2), &y).is_err());
    }

    #[test]
    fn selector_schedule() {
        let sel = SourceSelector::one(2, 10).unwrap();
        assert_eq!(sel.active(9, 3), SourceMask::all(3));
        assert_eq!(sel.active(10, 3).iter().collect::<Vec<_>>(), vec![2]);
        assert_eq!(SourceSelector::All.active(1000, 2).len(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(OnlineConfig::default().validate(3).is_ok());
        let bad = OnlineConfig {
            alpha: 1.0,
            ..Default::default()
        };
        assert!(bad.validate(3).is_err());
        let bad = OnlineConfig {
            selector: SourceSelector::one(3, 0).unwrap(),
            ..Default::default()
        };
        assert!(bad.validate(3).is_err());
        assert!(
            OnlineSeparator::new(2, 4, OnlineConfig::default(), ContrastModel::laplace(5)).is_err()
        );
        assert!(
            OnlineSeparator::new(9, 4, OnlineConfig::default(), ContrastModel::laplace(4)).is_err()
        );
    }

    #[test]
    fn scalar_case_normalizes() {
        let bins = 5;
        let mut sep = OnlineSeparator::new(
            1,
            bins,
            OnlineConfig::default(),
            ContrastModel::laplace(bins),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut y = vec![CVec::zeros(1); bins];
        for _ in 0..4 {
            let x: Vec<CVec> = (0..bins).map(|_| random_vec(&mut rng, 1)).collect();
            sep.process_frame(&x, &mut y).unwrap();
            for f in 0..bins {
                let w = sep.demixing()[f][(0, 0)];
                assert!(w.re > 0.0 && w.im.abs() <= 1e-15);
            }
        }
        // after the last ISS step, w^H U w = 1 holds for the final blend
        for f in 0..bins {
            let w = demixing_vector(&sep.demixing()[f], 0);
            let q = linalg::hermitian_form(&w, sep.covariance(0, f)).unwrap();
            assert_abs_diff_eq!(q, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_frame_step_through() {
        // U shrinks to 0.99 * 0.001 I and ISS rescales rows to w^H U w = 1
        let bins = 3;
        let mut sep = OnlineSeparator::new(
            2,
            bins,
            OnlineConfig::default(),
            ContrastModel::laplace(bins),
        )
        .unwrap();
        let x = vec![CVec::zeros(2); bins];
        let mut y = vec![CVec::zeros(2); bins];
        sep.process_frame(&x, &mut y).unwrap();
        let c_u = 0.99 * DEFAULT_COV_INIT;
        let expected = c_u.powf(-0.5);
        for f in 0..bins {
            for k in 0..2 {
                assert_abs_diff_eq!(sep.covariance(k, f)[(0, 0)].re, c_u, epsilon = 1e-18);
                assert_eq!(sep.covariance(k, f)[(0, 1)], c(0.0, 0.0));
            }
            let w = sep.demixing()[f];
            assert_abs_diff_eq!(w[(0, 0)].re, expected, epsilon = 1e-9);
            assert_abs_diff_eq!(w[(1, 1)].re, expected, epsilon = 1e-9);
            assert_eq!(w[(0, 1)], c(0.0, 0.0));
            assert!(y[f].norm() == 0.0);
        }
        assert!(sep.faults().is_empty());
    }

    #[test]
    fn update_period_skips_demixing_updates() {
        let bins = 4;
        let cfg = OnlineConfig {
            update_period: 3,
            ..Default::default()
        };
        let mut sep = OnlineSeparator::new(2, bins, cfg, ContrastModel::laplace(bins)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut y = vec![CVec::zeros(2); bins];
        let frame =
            |rng: &mut ChaCha8Rng| -> Vec<CVec> { (0..bins).map(|_| random_vec(rng, 2)).collect() };
        sep.process_frame(&frame(&mut rng), &mut y).unwrap();
        let after_update = sep.demixing().to_vec();
        let cov_before = *sep.covariance(0, 0);
        sep.process_frame(&frame(&mut rng), &mut y).unwrap();
        assert_eq!(sep.demixing(), &after_update[..]);
        assert_ne!(*sep.covariance(0, 0), cov_before);
        sep.process_frame(&frame(&mut rng), &mut y).unwrap();
        assert_eq!(sep.demixing(), &after_update[..]);
        sep.process_frame(&frame(&mut rng), &mut y).unwrap();
        assert_ne!(sep.demixing(), &after_update[..]);
    }

    #[test]
    fn degenerate_bin_is_frozen_and_logged() {
        let bins = 2;
        let cfg = OnlineConfig {
            method: UpdateMethod::Ip,
            n_iter: 1,
            ..Default::default()
        };
        let mut singular = CMat::identity(2);
        singular[(1, 1)] = c(0.0, 0.0);
        let demix = vec![CMat::identity(2), singular];
        let cov = vec![CMat::scaled_identity(2, 1e-3); 4];
        let mut sep = OnlineSeparator::new(2, bins, cfg, ContrastModel::laplace(bins))
            .unwrap()
            .with_state(demix, cov)
            .unwrap();
        let x = vec![CVec::from_real(&[1.0, 0.5]).unwrap(); bins];
        let mut y = vec![CVec::zeros(2); bins];
        sep.process_frame(&x, &mut y).unwrap();
        assert_eq!(sep.demixing()[1], singular);
        assert_eq!(sep.faults().len(), 1);
        let fault = sep.faults()[0];
        assert_eq!((fault.frame, fault.bin), (0, 1));
        assert_eq!(fault.kind, DegeneracyKind::SingularProduct);
        assert_ne!(sep.demixing()[0], CMat::identity(2));
    }

    #[test]
    fn iss_frame_path_uses_no_solves() {
        let bins = 6;
        let mut sep = OnlineSeparator::new(
            3,
            bins,
            OnlineConfig::default(),
            ContrastModel::laplace(bins),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut y = vec![CVec::zeros(3); bins];
        let before = counters::snapshot();
        for _ in 0..5 {
            let x: Vec<CVec> = (0..bins).map(|_| random_vec(&mut rng, 3)).collect();
            sep.process_frame(&x, &mut y).unwrap();
        }
        let delta = counters::snapshot() - before;
        assert_eq!(delta.solves, 0);
        assert_eq!(delta.inversions, 0);
    }

    #[test]
    fn threaded_run_matches_sequential() {
        let bins = 17;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let frames: Vec<Vec<CVec>> = (0..6)
            .map(|_| (0..bins).map(|_| random_vec(&mut rng, 3)).collect())
            .collect();
        let run = |threads: usize| {
            let mut sep = OnlineSeparator::new(
                3,
                bins,
                OnlineConfig::default(),
                ContrastModel::laplace(bins),
            )
            .unwrap()
            .with_threads(threads)
            .unwrap();
            let mut y = vec![CVec::zeros(3); bins];
            for x in &frames {
                sep.process_frame(x, &mut y).unwrap();
            }
            sep.demixing().to_vec()
        };
        assert_eq!(run(1), run(4));
    }
}

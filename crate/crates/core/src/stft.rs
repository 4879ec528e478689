//! Multichannel STFT analysis and weighted overlap-add synthesis.
//!
//! Frames are taken from the signal after `frame_len / 2` zeros are added
//! on both ends, so every input sample is covered by two frames. Synthesis
//! reuses the analysis window and divides by the summed squared-window
//! envelope, which gives exact reconstruction for any hop at which that
//! envelope is nonzero.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::linalg::CVec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// DFT-even Hamming window, `0.54 - 0.46 cos(2πn / N)`.
    #[default]
    PeriodicHamming,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::PeriodicHamming => (0..len)
                .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub window: Window,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            frame_len: 1024,
            hop: 512,
            window: Window::PeriodicHamming,
            sample_rate: 16000,
        }
    }
}

impl StftConfig {
    /// Half-overlap configuration with the given frame length.
    pub fn with_frame_len(frame_len: usize, sample_rate: u32) -> Self {
        StftConfig {
            frame_len,
            hop: frame_len / 2,
            window: Window::PeriodicHamming,
            sample_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || !self.frame_len.is_power_of_two() {
            return Err(contract(format!(
                "frame length {} is not a power of two",
                self.frame_len
            )));
        }
        if self.hop * 2 != self.frame_len {
            return Err(contract(format!(
                "hop {} must be half the frame length {}",
                self.hop, self.frame_len
            )));
        }
        if self.sample_rate == 0 {
            return Err(contract("sample rate must be positive"));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Frame count produced by [`analyze`] for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        // padded length is len + frame_len
        len / self.hop + 1
    }

    /// Time (seconds) of the first original sample covered by frame `t`'s centre.
    pub fn frame_time(&self, t: usize) -> f64 {
        (t * self.hop) as f64 / self.sample_rate as f64
    }
}

/// Complex STFT coefficients indexed `[channel][frame][bin]`.
#[derive(Clone, PartialEq)]
pub struct Spectrogram {
    channels: usize,
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
}

impl std::fmt::Debug for Spectrogram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectrogram")
            .field("channels", &self.channels)
            .field("frames", &self.frames)
            .field("bins", &self.bins)
            .finish_non_exhaustive()
    }
}

impl Spectrogram {
    pub fn zeros(channels: usize, frames: usize, bins: usize) -> Self {
        Spectrogram {
            channels,
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); channels * frames * bins],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    #[inline]
    fn offset(&self, k: usize, t: usize, f: usize) -> usize {
        (k * self.frames + t) * self.bins + f
    }

    #[inline]
    pub fn get(&self, k: usize, t: usize, f: usize) -> Complex64 {
        self.data[self.offset(k, t, f)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, t: usize, f: usize, z: Complex64) {
        let i = self.offset(k, t, f);
        self.data[i] = z;
    }

    /// One frame of one channel, all bins.
    pub fn frame_slice(&self, k: usize, t: usize) -> &[Complex64] {
        let i = self.offset(k, t, 0);
        &self.data[i..i + self.bins]
    }

    pub fn frame_slice_mut(&mut self, k: usize, t: usize) -> &mut [Complex64] {
        let i = self.offset(k, t, 0);
        &mut self.data[i..i + self.bins]
    }

    /// Gathers the `K`-channel observation vector of every bin at frame `t`.
    pub fn read_frame(&self, t: usize, out: &mut [CVec]) {
        debug_assert_eq!(out.len(), self.bins);
        for (f, v) in out.iter_mut().enumerate() {
            *v = CVec::zeros(self.channels);
            for k in 0..self.channels {
                v[k] = self.get(k, t, f);
            }
        }
    }

    pub fn write_frame(&mut self, t: usize, frame: &[CVec]) {
        debug_assert_eq!(frame.len(), self.bins);
        for (f, v) in frame.iter().enumerate() {
            for k in 0..self.channels {
                self.set(k, t, f, v[k]);
            }
        }
    }

    pub fn map_inplace(&mut self, mut op: impl FnMut(Complex64) -> Complex64) {
        self.data.iter_mut().for_each(|z| *z = op(*z));
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Plans {
    fn new(cfg: &StftConfig) -> Self {
        let mut planner = FftPlanner::new();
        Plans {
            forward: planner.plan_fft_forward(cfg.frame_len),
            inverse: planner.plan_fft_inverse(cfg.frame_len),
            window: cfg.window.coefficients(cfg.frame_len),
        }
    }
}

/// Short-time Fourier transform of each channel.
pub fn analyze<S: AsRef<[f64]>>(signal: &[S], cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let channels = signal.len();
    if channels == 0 {
        return Err(contract("signal has no channels"));
    }
    let len = signal[0].as_ref().len();
    if len == 0 {
        return Err(contract("signal is empty"));
    }
    if let Some(bad) = signal.iter().position(|s| s.as_ref().len() != len) {
        return Err(contract(format!(
            "channel {bad} has {} samples, expected {len}",
            signal[bad].as_ref().len()
        )));
    }

    let plans = Plans::new(cfg);
    let n = cfg.frame_len;
    let half = n / 2;
    let frames = cfg.frame_count(len);
    let bins = cfg.bins();
    let mut spec = Spectrogram::zeros(channels, frames, bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); plans.forward.get_inplace_scratch_len()];

    for (k, chan) in signal.iter().enumerate() {
        let chan = chan.as_ref();
        for t in 0..frames {
            // first padded index of this frame, shifted back to signal coordinates
            let start = (t * cfg.hop) as isize - half as isize;
            for (j, b) in buf.iter_mut().enumerate() {
                let idx = start + j as isize;
                let x = if idx >= 0 && (idx as usize) < len {
                    chan[idx as usize]
                } else {
                    0.0
                };
                *b = Complex64::new(x * plans.window[j], 0.0);
            }
            plans.forward.process_with_scratch(&mut buf, &mut scratch);
            spec.frame_slice_mut(k, t).copy_from_slice(&buf[..bins]);
        }
    }
    Ok(spec)
}

/// Weighted overlap-add inverse of [`analyze`]. Returns `frames × hop`
/// samples per channel, which covers every sample of the analysed signal.
pub fn synthesize(spec: &Spectrogram, cfg: &StftConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if spec.bins() != cfg.bins() {
        return Err(contract(format!(
            "spectrogram has {} bins, configuration expects {}",
            spec.bins(),
            cfg.bins()
        )));
    }
    if spec.frames() == 0 {
        return Err(contract("spectrogram has no frames"));
    }

    let plans = Plans::new(cfg);
    let n = cfg.frame_len;
    let half = n / 2;
    let frames = spec.frames();
    let bins = spec.bins();
    let out_len = frames * cfg.hop;
    let padded_len = (frames - 1) * cfg.hop + n;

    let mut envelope = vec![0.0; padded_len];
    for t in 0..frames {
        for (j, w) in plans.window.iter().enumerate() {
            envelope[t * cfg.hop + j] += w * w;
        }
    }

    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); plans.inverse.get_inplace_scratch_len()];
    let scale = 1.0 / n as f64;
    let mut out = Vec::with_capacity(spec.channels());
    for k in 0..spec.channels() {
        let mut acc = vec![0.0; padded_len];
        for t in 0..frames {
            let coeffs = spec.frame_slice(k, t);
            buf[..bins].copy_from_slice(coeffs);
            for f in 1..n - bins + 1 {
                buf[n - f] = coeffs[f].conj();
            }
            plans.inverse.process_with_scratch(&mut buf, &mut scratch);
            let base = t * cfg.hop;
            for (j, (b, w)) in buf.iter().zip(&plans.window).enumerate() {
                acc[base + j] += b.re * scale * w;
            }
        }
        let chan: Vec<f64> = (0..out_len)
            .map(|i| {
                let p = i + half;
                if envelope[p] > 0.0 {
                    acc[p] / envelope[p]
                } else {
                    0.0
                }
            })
            .collect();
        out.push(chan);
    }
    Ok(out)
}

/// [`synthesize`] truncated or zero-extended to `len` samples per channel.
pub fn synthesize_len(spec: &Spectrogram, cfg: &StftConfig, len: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = synthesize(spec, cfg)?;
    for chan in &mut out {
        chan.resize(len, 0.0);
    }
    Ok(out)
}

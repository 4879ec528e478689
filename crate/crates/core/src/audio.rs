//! Multichannel WAV input and output.
//!
//! Reads 16/24/32-bit PCM and 32-bit float; always writes 32-bit float.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{contract, Result};

/// Reads a WAV file into per-channel sample vectors scaled to [-1, 1].
pub fn read_wav(path: &Path) -> Result<(Vec<Vec<f64>>, u32)> {
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let mut out = vec![Vec::with_capacity(interleaved.len() / channels.max(1)); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (c, &v) in out.iter_mut().zip(frame) {
            c.push(v);
        }
    }
    Ok((out, spec.sample_rate))
}

/// Writes equal-length channels as 32-bit float WAV.
pub fn write_wav<S: AsRef<[f64]>>(path: &Path, channels: &[S], sample_rate: u32) -> Result<()> {
    if channels.is_empty() {
        return Err(contract("no channels to write"));
    }
    let n = channels[0].as_ref().len();
    if channels.iter().any(|c| c.as_ref().len() != n) {
        return Err(contract("channels differ in length"));
    }
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for i in 0..n {
        for c in channels {
            writer.write_sample(c.as_ref()[i] as f32)?;
        }
    }
    writer.finalize()?;
    Ok(())
}

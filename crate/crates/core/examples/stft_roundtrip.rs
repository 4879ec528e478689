//! Analysis/synthesis round trip of a two-channel chirp.

use online_auxiva::stft::{analyze, synthesize_len, StftConfig};

fn main() -> online_auxiva::Result<()> {
    let cfg = StftConfig::default();
    let n = 3 * cfg.sample_rate as usize;
    let fs = cfg.sample_rate as f64;
    let chirp: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            (std::f64::consts::TAU * (200.0 + 400.0 * t) * t).sin()
        })
        .collect();
    let noise: Vec<f64> = (0..n)
        .map(|i| ((i * 7919 % 1000) as f64 / 500.0) - 1.0)
        .collect();
    let x = vec![chirp, noise];

    let spec = analyze(&x, &cfg)?;
    println!(
        "{} channels, {} frames, {} bins (frame {} / hop {})",
        spec.channels(),
        spec.frames(),
        spec.bins(),
        cfg.frame_len,
        cfg.hop
    );
    let back = synthesize_len(&spec, &cfg, n)?;
    for (c, (a, b)) in x.iter().zip(&back).enumerate() {
        let err = a
            .iter()
            .zip(b)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        println!("channel {c}: max reconstruction error {err:.2e}");
    }
    Ok(())
}

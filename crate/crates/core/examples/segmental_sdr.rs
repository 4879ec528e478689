//! SI-SDR, segmental SDR and permutation alignment on constructed signals.

use online_auxiva::metrics::{resolve_permutation, seg_sdr, si_sdr};

fn main() -> online_auxiva::Result<()> {
    let n = 64000;
    let s: Vec<f64> = (0..n)
        .map(|i| (i as f64 * 0.01).sin() * (1.0 + (i as f64 * 1e-4).cos()))
        .collect();
    let noise: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).cos()).collect();

    // clean first half, noisy second half
    let y: Vec<f64> = s
        .iter()
        .zip(&noise)
        .enumerate()
        .map(|(i, (a, b))| if i < n / 2 { *a } else { a + 0.1 * b })
        .collect();
    println!("whole signal: {:?}", si_sdr(&s, &y)?);
    let seg = seg_sdr(&s, &y, 16000)?;
    for (i, v) in seg.segments.iter().enumerate() {
        println!("segment {i}: {:7.2} dB ({:?})", v.db, v.flag);
    }

    let refs = vec![s.clone(), noise.clone()];
    let ests = vec![noise.iter().map(|v| 3.0 * v).collect::<Vec<_>>(), y];
    println!("permutation: {:?}", resolve_permutation(&refs, &ests)?);
    Ok(())
}

//! Frame-by-frame use of the online separator on a static three-source
//! mixture, with back-projection onto microphone 1.

use online_auxiva::linalg::CVec;
use online_auxiva::metrics::sdr_improvement;
use online_auxiva::scenario::{generate, ScenarioConfig};
use online_auxiva::separator::{ContrastModel, OnlineConfig, OnlineSeparator};
use online_auxiva::stft::{analyze, synthesize_len, Spectrogram, StftConfig};

fn main() -> online_auxiva::Result<()> {
    let scenario = generate(&ScenarioConfig::stationary(3, 20.0, 1))?;
    let truth = &scenario.truth;
    let stft = StftConfig::default();
    let x = analyze(&truth.mixtures, &stft)?;
    let (k, bins) = (x.channels(), x.bins());

    let mut sep = OnlineSeparator::new(
        k,
        bins,
        OnlineConfig::default(),
        ContrastModel::laplace(bins),
    )?;
    let mut out = Spectrogram::zeros(k, x.frames(), bins);
    let (mut xf, mut yf, mut zf) = (
        vec![CVec::zeros(k); bins],
        vec![CVec::zeros(k); bins],
        vec![CVec::zeros(k); bins],
    );
    for t in 0..x.frames() {
        x.read_frame(t, &mut xf);
        sep.process_frame(&xf, &mut yf)?;
        sep.project_back_frame(&yf, &mut zf)?;
        out.write_frame(t, &zf);
    }
    let estimates = synthesize_len(&out, &stft, truth.len())?;

    let report = sdr_improvement(truth, &estimates, 32000)?;
    println!("permutation {:?}", report.permutation);
    for s in &report.sources {
        println!(
            "source {}: SI-SDR {:6.2} dB (input {:6.2} dB, improvement {:6.2} dB)",
            s.source, s.output.overall.db, s.input.overall.db, s.overall_improvement
        );
    }
    println!("degenerate updates: {}", sep.faults().len());
    Ok(())
}

//! Batch AuxIVA as an offline reference: cost traces of IP, covariance ISS
//! and in-place ISS on the same mixture.

use online_auxiva::batch::{batch_auxiva, BatchMethod, BatchProblem};
use online_auxiva::scenario::{generate, ScenarioConfig};
use online_auxiva::separator::ContrastModel;
use online_auxiva::stft::{analyze, StftConfig};

fn main() -> online_auxiva::Result<()> {
    let scenario = generate(&ScenarioConfig::stationary(3, 8.0, 4))?;
    let stft = StftConfig::with_frame_len(512, 16000);
    let spec = analyze(&scenario.truth.mixtures, &stft)?;
    let problem = BatchProblem {
        spec: &spec,
        model: ContrastModel::laplace(spec.bins()),
        n_iter: 15,
    };
    for method in [BatchMethod::Ip, BatchMethod::Iss, BatchMethod::IssInplace] {
        let res = batch_auxiva(problem, method)?;
        let trace: Vec<String> = res
            .cost_trace
            .iter()
            .step_by(3)
            .map(|c| format!("{c:.3}"))
            .collect();
        println!("{method:?}: {}", trace.join(" → "));
    }
    Ok(())
}

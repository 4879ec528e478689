//! Cost and quality of reduced update schedules: updating every frame vs
//! every Q-th frame, and all sources vs only the moving one.

use online_auxiva::metrics::sdr_improvement;
use online_auxiva::pipeline::{
    moving_output_index, separate_signals, switch_frame, SeparateOptions,
};
use online_auxiva::scenario::{generate, ScenarioConfig};
use online_auxiva::separator::{OnlineConfig, SourceSelector};

fn main() -> online_auxiva::Result<()> {
    let scenario = generate(&ScenarioConfig {
        duration: 30.0,
        move_time: Some(15.0),
        seed: 2,
        ..Default::default()
    })?;
    let base = SeparateOptions::default();
    let moving = moving_output_index(&scenario, &base)?;
    let mv = scenario.movement.expect("moving scenario");
    let one = SourceSelector::one(moving, switch_frame(mv.sample, &base.stft))?;

    println!(
        "{:<24} {:>12} {:>14}",
        "schedule", "update (s)", "improvement"
    );
    for (name, period, selector) in [
        ("every frame, all", 1, SourceSelector::All),
        ("every 2nd frame, all", 2, SourceSelector::All),
        ("every 4th frame, all", 4, SourceSelector::All),
        ("every frame, one", 1, one),
        ("every 2nd frame, one", 2, one),
    ] {
        let opts = SeparateOptions {
            online: OnlineConfig {
                update_period: period,
                selector,
                ..base.online
            },
            ..base
        };
        let sep = separate_signals(&scenario.truth.mixtures, &opts)?;
        let rep = sdr_improvement(&scenario.truth, &sep.signals, 32000)?;
        println!(
            "{name:<24} {:>12.3} {:>11.2} dB",
            sep.timing.update_loop_s, rep.overall_improvement
        );
    }
    Ok(())
}

//! Shared fixtures for the benchmarks.

use prp_locate::harness::{plan_sample, render_example, Config, Split};
use prp_locate::unfolded::Example;

/// One rendered two-speaker sample with the default protocol; `reverberant`
/// picks a T60 = 0.2 s cell.
pub fn example(config: &Config, reverberant: bool) -> Example {
    // cells are ordered t60-major, six per t60 value
    let index = if reverberant { 6 } else { 0 };
    let (_, scene) = plan_sample(config, Split::Test, index).expect("scene");
    let (prp, _) = render_example(config, &scene).expect("render");
    Example {
        prp,
        room: scene.room,
        array: scene.array.clone(),
        sources: scene.source_positions(),
    }
}

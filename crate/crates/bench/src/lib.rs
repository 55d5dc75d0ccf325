//! Inputs shared by the benchmarks.

use distillflow::synth::{make_scene, random_translation_spec, Scene};

/// A two-layer synthetic scene; its ground-truth flows serve as realistic
/// evaluation points for the losses.
pub fn scene(height: usize, width: usize, seed: u64) -> Scene {
    make_scene(&random_translation_spec(height, width, 2, 4, seed).expect("valid spec")).expect("scene")
}

//! Benchmarks live in `benches/`; run them with `cargo bench -p unlearnlab-bench`.

use unlearnlab_core::synth::{generate, SynthConfig};
use unlearnlab_core::{Dataset, ModelConfig, ModelState};

/// The default-size model and a small biography corpus shared by the benches.
pub fn fixture() -> (ModelState, Dataset) {
    let model = ModelState::new(ModelConfig::default(), 0).expect("default config is valid");
    let ds = generate(&SynthConfig {
        retain: 32,
        forget: 32,
        holdout: 8,
        eval_general: 8,
        ..SynthConfig::default()
    })
    .expect("synthetic corpus");
    (model, ds)
}

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unlearnlab_core::{LoraConfig, ModelConfig, ModelState};

#[test]
fn trained_adapter_delta_has_rank_at_most_r() {
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        ctx: 16,
        init_std: 0.1,
    };
    let base = ModelState::new(cfg, 3).unwrap();
    for rank in [1, 3, 4] {
        let lora = LoraConfig {
            rank,
            ..LoraConfig::default()
        };
        let mut m = base.lora_attach(&lora, 9).unwrap();
        // Stand-in for training: give every adapter matrix nonzero entries.
        let mut rng = ChaCha8Rng::seed_from_u64(rank as u64);
        for p in m.params_mut().iter_mut().filter(|p| p.trainable) {
            for v in p.tensor.values_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        for name in ["blocks.0.attn.wq", "blocks.0.ff.w1"] {
            let delta = m.lora_delta(name).unwrap();
            let (rows, cols) = (delta.shape()[0], delta.shape()[1]);
            let svd = DMatrix::from_row_slice(rows, cols, delta.values()).svd(false, false);
            let s = svd.singular_values;
            let tol = s[0] * 1e-10;
            let numerical_rank = s.iter().filter(|&&x| x > tol).count();
            assert_eq!(numerical_rank, rank, "{name} rank {rank}: {s}");
        }
    }
}

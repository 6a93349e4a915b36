//! Randomized check of the reciprocal-loss gradient against two references:
//! the next-token gradient rescaled by `−α/(L+ε)²`, and central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::{objective_gradients_on, Objective};
use super::ForgetLoss;
use crate::error::Result;
use crate::model::tokenizer::encode_pair;
use crate::model::{EncodedExample, LoraConfig, ModelConfig, ModelState};
use crate::tensor::{Fault, Tape};

pub const FD_STEP: f64 = 1e-5;
pub const DUAL_TOLERANCE: f64 = 1e-10;
pub const FD_TOLERANCE: f64 = 1e-4;

/// A random tiny model, forget batch and loss hyperparameters.
#[derive(Debug, Clone)]
pub struct GradcheckCase {
    pub model: ModelState,
    pub batch: Vec<EncodedExample>,
    pub alpha: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckResult {
    pub ntp_loss: f64,
    /// Largest elementwise relative gap between the reciprocal-loss gradient and
    /// the rescaled next-token gradient.
    pub dual_max_rel: f64,
    /// Largest `|AD − FD| / max(1, |FD|)` over sampled coordinates.
    pub fd_max_rel: f64,
    pub fd_coords: usize,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.dual_max_rel <= DUAL_TOLERANCE && self.fd_max_rel <= FD_TOLERANCE
    }
}

impl GradcheckCase {
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_heads = [1, 2, 4][rng.random_range(0..3)];
        let config = ModelConfig {
            d_model: n_heads * rng.random_range(2..5),
            n_layers: rng.random_range(1..3),
            n_heads,
            d_ff: rng.random_range(4..17),
            ctx: 16,
            init_std: 0.3,
        };
        let mut model = ModelState::new(config, rng.random())?;
        // Perturb norms and biases away from their trivial initial values.
        for p in model.params_mut() {
            if p.tensor.shape().len() == 1 {
                for v in p.tensor.values_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
        }
        if rng.random_bool(0.3) {
            let lora = LoraConfig {
                rank: rng.random_range(1..4),
                dropout: 0.0,
                ..LoraConfig::default()
            };
            model = model.lora_attach(&lora, rng.random())?;
            for p in model.params_mut().iter_mut().filter(|p| p.trainable) {
                for v in p.tensor.values_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        let batch = (0..rng.random_range(1..4))
            .map(|_| {
                let input: Vec<u8> = (0..rng.random_range(0..5)).map(|_| rng.random()).collect();
                let output: Vec<u8> = (0..rng.random_range(1..6)).map(|_| rng.random()).collect();
                encode_pair(&input, &output, 16)
            })
            .collect::<Result<_>>()?;
        Ok(GradcheckCase {
            model,
            batch,
            alpha: rng.random_range(0.5..2.0),
            epsilon: 10f64.powf(rng.random_range(-3.0..-1.0)),
        })
    }

    fn loss_value(&self, model: &ModelState) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let (loss, _) = super::loss::eul_loss(
            model,
            &mut tape,
            &bound,
            &self.batch,
            self.alpha,
            self.epsilon,
            None,
        )?;
        tape.scalar(loss)
    }

    /// Runs both comparisons, finite differences on `fd_coords` random coordinates.
    pub fn check(
        &self,
        fd_coords: usize,
        seed: u64,
        fault: Option<Fault>,
    ) -> Result<GradcheckResult> {
        let tape = |f: Option<Fault>| f.map_or_else(Tape::new, Tape::with_fault);
        let (_, ntp, g_ntp) = objective_gradients_on(
            &mut tape(fault),
            &self.model,
            &self.batch,
            Objective::Ntp,
            self.alpha,
            self.epsilon,
            None,
        )?;
        let (_, _, g_eul) = objective_gradients_on(
            &mut tape(fault),
            &self.model,
            &self.batch,
            Objective::Forget(ForgetLoss::Eul),
            self.alpha,
            self.epsilon,
            None,
        )?;

        let factor = -self.alpha / ((ntp + self.epsilon) * (ntp + self.epsilon));
        let mut dual_max_rel = 0.0f64;
        for (ge, gn) in g_eul.iter().flatten().zip(g_ntp.iter().flatten()) {
            let expected = factor * gn;
            let diff = (ge - expected).abs();
            if diff > 0.0 {
                dual_max_rel = dual_max_rel.max(diff / expected.abs().max(ge.abs()));
            }
        }

        let trainable = self.model.trainable_indices();
        let sizes: Vec<usize> = trainable
            .iter()
            .map(|&i| self.model.params()[i].tensor.len())
            .collect();
        let total: usize = sizes.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fd_max_rel = 0.0f64;
        for _ in 0..fd_coords {
            let mut flat = rng.random_range(0..total);
            let mut slot = 0;
            while flat >= sizes[slot] {
                flat -= sizes[slot];
                slot += 1;
            }
            let pi = trainable[slot];
            let eval = |delta: f64| {
                let mut m = self.model.clone();
                m.params_mut()[pi].tensor.values_mut()[flat] += delta;
                self.loss_value(&m)
            };
            let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let ad = g_eul[slot][flat];
            fd_max_rel = fd_max_rel.max((ad - fd).abs() / fd.abs().max(1.0));
        }
        Ok(GradcheckResult {
            ntp_loss: ntp,
            dual_max_rel,
            fd_max_rel,
            fd_coords,
        })
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Adapter, LoraConfig, LoraState, ModelState, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ADAPTER_INIT_STD: f64 = 0.02;

impl ModelState {
    fn target_weights(&self, cfg: &LoraConfig) -> Vec<usize> {
        let mut out = Vec::new();
        for b in &self.layout.blocks {
            for target in &cfg.targets {
                out.push(match target.as_str() {
                    "wq" => b.wq,
                    "wk" => b.wk,
                    "wv" => b.wv,
                    "wo" => b.wo,
                    "w1" => b.w1,
                    "w2" => b.w2,
                    _ => unreachable!("targets validated"),
                });
            }
        }
        out
    }

    /// Returns a copy with rank-`r` adapters on every targeted projection.
    ///
    /// `A` (`r × in`) is gaussian with std 0.02 and `B` (`out × r`) is zero, so
    /// the adapted model initially computes exactly what the base model does.
    /// Only adapter tensors are trainable afterwards.
    pub fn lora_attach(&self, cfg: &LoraConfig, seed: u64) -> Result<ModelState> {
        cfg.validate()?;
        if self.lora.is_some() {
            return Err(Error::State("adapters are already attached".into()));
        }
        let mut model = self.clone();
        for p in &mut model.params {
            p.trainable = false;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, ADAPTER_INIT_STD).expect("positive std");
        let mut adapters = Vec::new();
        for w in self.target_weights(cfg) {
            let (din, dout) = self.params[w].tensor.dims2()?;
            let name = self.params[w].name.clone();
            let a_vals = (0..cfg.rank * din)
                .map(|_| normal.sample(&mut rng))
                .collect();
            let a = Tensor::new(vec![cfg.rank, din], a_vals)?;
            let b = Tensor::zeros(&[dout, cfg.rank]);
            let a_idx = model.params.len();
            model.params.push(Param {
                name: format!("{name}.lora_a"),
                tensor: a,
                trainable: true,
            });
            model.params.push(Param {
                name: format!("{name}.lora_b"),
                tensor: b,
                trainable: true,
            });
            adapters.push(Adapter {
                weight: w,
                a: a_idx,
                b: a_idx + 1,
            });
        }
        model.lora = Some(LoraState {
            config: cfg.clone(),
            adapters,
        });
        Ok(model)
    }

    /// Folds `(alpha / r) · B·A` into each base weight and drops the adapters.
    pub fn lora_merge(&self) -> Result<ModelState> {
        let lora = self
            .lora
            .as_ref()
            .ok_or_else(|| Error::State("no adapters to merge".into()))?;
        let scale = lora.config.scale();
        let mut model = self.clone();
        for ad in &lora.adapters {
            // Stored weights are in×out, so the update is (B·A)ᵀ = Aᵀ·Bᵀ.
            let delta = self.params[ad.a]
                .tensor
                .transpose()?
                .matmul(&self.params[ad.b].tensor.transpose()?)?;
            let w = model.params[ad.weight].tensor.values_mut();
            for (wi, &di) in w.iter_mut().zip(delta.values()) {
                *wi += scale * di;
            }
        }
        let base_len = lora
            .adapters
            .iter()
            .map(|a| a.a)
            .min()
            .unwrap_or(model.params.len());
        model.params.truncate(base_len);
        for p in &mut model.params {
            p.trainable = true;
        }
        model.lora = None;
        Ok(model)
    }

    /// The low-rank weight update an adapter currently contributes, as `out × in`.
    pub fn lora_delta(&self, weight_name: &str) -> Result<Tensor> {
        let lora = self
            .lora
            .as_ref()
            .ok_or_else(|| Error::State("no adapters attached".into()))?;
        let ad = lora
            .adapters
            .iter()
            .find(|a| self.params[a.weight].name == weight_name)
            .ok_or_else(|| Error::Config(format!("no adapter on {weight_name:?}")))?;
        let mut delta = self.params[ad.b].tensor.matmul(&self.params[ad.a].tensor)?;
        for v in delta.values_mut() {
            *v *= lora.config.scale();
        }
        Ok(delta)
    }

    /// Rebuilds adapter bookkeeping for parameters loaded from a checkpoint.
    pub(super) fn restore_adapters(&mut self, cfg: LoraConfig, base_len: usize) -> Result<()> {
        cfg.validate()?;
        let targets = self.target_weights(&cfg);
        if self.params.len() != base_len + 2 * targets.len() {
            return Err(Error::Format(format!(
                "expected {} adapter tensors, found {}",
                2 * targets.len(),
                self.params.len() - base_len
            )));
        }
        let mut adapters = Vec::new();
        for (i, w) in targets.into_iter().enumerate() {
            let (a, b) = (base_len + 2 * i, base_len + 2 * i + 1);
            let (din, dout) = self.params[w].tensor.dims2()?;
            let name = &self.params[w].name;
            let ok = self.params[a].name == format!("{name}.lora_a")
                && self.params[b].name == format!("{name}.lora_b")
                && self.params[a].tensor.shape() == [cfg.rank, din]
                && self.params[b].tensor.shape() == [dout, cfg.rank];
            if !ok {
                return Err(Error::Format(format!("malformed adapter for {name:?}")));
            }
            adapters.push(Adapter { weight: w, a, b });
        }
        for (i, p) in self.params.iter_mut().enumerate() {
            p.trainable = i >= base_len;
        }
        self.lora = Some(LoraState {
            config: cfg,
            adapters,
        });
        Ok(())
    }
}

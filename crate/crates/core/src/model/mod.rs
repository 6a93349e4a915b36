//! Byte-level tokenizer and a tiny decoder-only transformer with optional
//! low-rank adapters.

mod checkpoint;
mod config;
mod lora;
pub mod tokenizer;

pub use config::{LoraConfig, ModelConfig, LORA_TARGETS};
pub use tokenizer::{encode, EncodedExample};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use tokenizer::{SEP, VOCAB_SIZE};

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockLayout>,
    lnf_g: usize,
    lnf_b: usize,
    head: usize,
}

/// One adapter pair attached to a base weight (indices into the parameter list).
#[derive(Debug, Clone, PartialEq)]
struct Adapter {
    weight: usize,
    a: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct LoraState {
    config: LoraConfig,
    adapters: Vec<Adapter>,
}

/// Parameters plus architecture. Weights are stored `in × out` and applied as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
    lora: Option<LoraState>,
}

/// Parameter names and shapes in serialization order.
fn base_manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut m = vec![
        ("tok_emb".to_string(), vec![VOCAB_SIZE, d]),
        ("pos_emb".to_string(), vec![cfg.ctx, d]),
    ];
    for i in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{i}.{s}");
        m.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.wo"), vec![d, d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("ff.w1"), vec![d, f]),
            (p("ff.b1"), vec![f]),
            (p("ff.w2"), vec![f, d]),
            (p("ff.b2"), vec![d]),
        ]);
    }
    m.extend([
        ("ln_f.g".to_string(), vec![d]),
        ("ln_f.b".to_string(), vec![d]),
        ("head".to_string(), vec![d, VOCAB_SIZE]),
    ]);
    m
}

fn layout_for(cfg: &ModelConfig) -> Layout {
    let blocks = (0..cfg.n_layers)
        .map(|i| {
            let base = 2 + i * 12;
            BlockLayout {
                ln1_g: base,
                ln1_b: base + 1,
                wq: base + 2,
                wk: base + 3,
                wv: base + 4,
                wo: base + 5,
                ln2_g: base + 6,
                ln2_b: base + 7,
                w1: base + 8,
                b1: base + 9,
                w2: base + 10,
                b2: base + 11,
            }
        })
        .collect();
    let tail = 2 + cfg.n_layers * 12;
    Layout {
        tok_emb: 0,
        pos_emb: 1,
        blocks,
        lnf_g: tail,
        lnf_b: tail + 1,
        head: tail + 2,
    }
}

/// Parameters bound onto a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ModelState {
    /// Fresh model: gaussian weights with `init_std`, unit layer-norm gains, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).expect("validated std");
        let params = base_manifest(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let values = if name.ends_with(".g") {
                    vec![1.0; n]
                } else if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Param {
                    name,
                    tensor: Tensor::new(shape, values).expect("manifest shape"),
                    trainable: true,
                }
            })
            .collect();
        Ok(ModelState {
            layout: layout_for(&config),
            config,
            params,
            lora: None,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: Vec<Param>,
        lora: Option<LoraConfig>,
    ) -> Result<Self> {
        config.validate()?;
        let manifest = base_manifest(&config);
        if params.len() < manifest.len() {
            return Err(Error::Format(format!(
                "expected at least {} parameters, found {}",
                manifest.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in manifest.iter().zip(&params) {
            if &p.name != name || p.tensor.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {:?} {:?} does not match expected {name:?} {shape:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        let mut model = ModelState {
            layout: layout_for(&config),
            config,
            params,
            lora: None,
        };
        let base_len = manifest.len();
        match lora {
            None if model.params.len() != base_len => {
                return Err(Error::Format(
                    "extra parameters without a LoRA section".into(),
                ))
            }
            None => {}
            Some(cfg) => model.restore_adapters(cfg, base_len)?,
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref().map(|l| &l.config)
    }

    pub fn has_adapters(&self) -> bool {
        self.lora.is_some()
    }

    /// Indices of parameters updated by the optimizer.
    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].trainable)
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Records every parameter on `tape`: trainable ones as differentiable leaves,
    /// frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.param(&p.tensor)
                } else {
                    tape.constant(&p.tensor)
                }
            })
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    fn adapter_for(&self, weight: usize) -> Option<&Adapter> {
        self.lora
            .as_ref()
            .and_then(|l| l.adapters.iter().find(|a| a.weight == weight))
    }

    /// `x · W`, plus the adapter path when `W` carries one. Dropout on the
    /// adapter input is applied only when `dropout_rng` is given.
    fn linear(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        weight: usize,
        dropout_rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let y = tape.matmul(x, bound.var(weight))?;
        let Some(adapter) = self.adapter_for(weight) else {
            return Ok(y);
        };
        let lora = self.lora.as_ref().expect("adapter implies lora state");
        let p = lora.config.dropout;
        let x_in = match dropout_rng {
            Some(rng) if p > 0.0 => {
                use rand::Rng;
                let n = tape.value(x)?.len();
                let keep = 1.0 / (1.0 - p);
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                tape.mul_const(x, mask)?
            }
            _ => x,
        };
        let a_t = tape.transpose(bound.var(adapter.a))?;
        let b_t = tape.transpose(bound.var(adapter.b))?;
        let z = tape.matmul(x_in, a_t)?;
        let z = tape.matmul(z, b_t)?;
        let z = tape.scale(z, lora.config.scale())?;
        tape.add(y, z)
    }

    /// Final-layer-normed hidden states, `T × d_model`.
    pub fn forward_hidden(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        tokens: &[usize],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let t = tokens.len();
        if t > self.config.ctx {
            return Err(Error::Length {
                len: t,
                ctx: self.config.ctx,
            });
        }
        if t == 0 {
            return Err(Error::Validation(
                "cannot run the model on an empty sequence".into(),
            ));
        }
        let l = &self.layout;
        let tok = tape.gather_rows(bound.var(l.tok_emb), tokens)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.gather_rows(bound.var(l.pos_emb), &positions)?;
        let mut x = tape.add(tok, pos)?;
        for b in &l.blocks {
            let h = tape.layer_norm(x, bound.var(b.ln1_g), bound.var(b.ln1_b))?;
            let q = self.linear(tape, bound, h, b.wq, &mut dropout_rng)?;
            let k = self.linear(tape, bound, h, b.wk, &mut dropout_rng)?;
            let v = self.linear(tape, bound, h, b.wv, &mut dropout_rng)?;
            let a = tape.causal_attention(q, k, v, self.config.n_heads)?;
            let a = self.linear(tape, bound, a, b.wo, &mut dropout_rng)?;
            x = tape.add(x, a)?;

            let h = tape.layer_norm(x, bound.var(b.ln2_g), bound.var(b.ln2_b))?;
            let f = self.linear(tape, bound, h, b.w1, &mut dropout_rng)?;
            let f = tape.add_row(f, bound.var(b.b1))?;
            let f = tape.gelu(f)?;
            let f = self.linear(tape, bound, f, b.w2, &mut dropout_rng)?;
            let f = tape.add_row(f, bound.var(b.b2))?;
            x = tape.add(x, f)?;
        }
        tape.layer_norm(x, bound.var(l.lnf_g), bound.var(l.lnf_b))
    }

    /// Logits `T × 260` recorded on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        tokens: &[usize],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let h = self.forward_hidden(tape, bound, tokens, dropout_rng)?;
        tape.matmul(h, bound.var(self.layout.head))
    }

    /// Inference-only logits, `T × 260`, dropout off.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape)?;
        let out = self.forward(&mut tape, &bound, tokens, None)?;
        tape.tensor(out)
    }

    fn bind_frozen(&self, tape: &mut Tape) -> Result<BoundParams> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.constant(&p.tensor))
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    /// Pooled next-token loss: mean over every masked position of every example.
    pub fn ntp_loss(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &[EncodedExample],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::DegenerateBatch("empty batch".into()));
        }
        let mut parts = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for ex in batch {
            if ex.masked_count() == 0 {
                return Err(Error::DegenerateBatch(
                    "example has no masked positions".into(),
                ));
            }
            parts.push(self.forward(tape, bound, ex.inputs(), dropout_rng.as_deref_mut())?);
            targets.extend_from_slice(ex.targets());
            mask.extend_from_slice(&ex.loss_mask);
        }
        let logits = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        tape.cross_entropy(logits, &targets, &mask)
    }

    /// Mean masked next-token loss of one example, dropout off.
    pub fn example_loss(&self, example: &EncodedExample) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape)?;
        let loss = self.ntp_loss(&mut tape, &bound, std::slice::from_ref(example), None)?;
        tape.scalar(loss)
    }

    /// Greedy generation after a prompt ending in `SEP`. Stops at `EOS`
    /// (which is returned), after `max_new` tokens, or at the context limit.
    pub fn greedy_decode(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        if prompt.last() != Some(&SEP) {
            return Err(Error::Validation(
                "generation prompt must end with SEP".into(),
            ));
        }
        if prompt.len() > self.config.ctx {
            return Err(Error::Length {
                len: prompt.len(),
                ctx: self.config.ctx,
            });
        }
        let head = &self.params[self.layout.head].tensor;
        let mut seq = prompt.to_vec();
        let mut generated = Vec::new();
        while generated.len() < max_new && seq.len() < self.config.ctx {
            let mut tape = Tape::new();
            let bound = self.bind_frozen(&mut tape)?;
            let h = self.forward_hidden(&mut tape, &bound, &seq, None)?;
            let hv = tape.value(h)?;
            let d = self.config.d_model;
            let last = Tensor::new(vec![1, d], hv[hv.len() - d..].to_vec())?;
            let logits = last.matmul(head)?;
            let next = argmax(logits.values());
            generated.push(next);
            seq.push(next);
            if next == tokenizer::EOS {
                break;
            }
        }
        Ok(generated)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

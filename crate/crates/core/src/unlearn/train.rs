use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, OptimizerState};
use super::loss::forget_objective;
use super::{ForgetLoss, UnlearnConfig};
use crate::data::{apply_negative_response, augment_resegment, make_batches, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{encode, EncodedExample, ModelState};
use crate::tensor::{Tape, Tensor};

/// What a step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Forget(ForgetLoss),
    Ntp,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Forget(k) => k.as_str(),
            Objective::Ntp => "NTP",
        }
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: usize,
    pub task: Split,
    pub objective: String,
    pub loss: f64,
    pub ntp_loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

/// Mean losses of one epoch, per task.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub forget_loss: Option<f64>,
    pub forget_ntp: Option<f64>,
    pub retain_ntp: Option<f64>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainLog { records })
    }

    pub fn epoch_summaries(&self) -> Vec<EpochSummary> {
        let mut out: Vec<EpochSummary> = Vec::new();
        for r in &self.records {
            if out.last().map(|s| s.epoch) != Some(r.epoch) {
                out.push(EpochSummary {
                    epoch: r.epoch,
                    steps: 0,
                    forget_loss: None,
                    forget_ntp: None,
                    retain_ntp: None,
                });
            }
            out.last_mut().expect("just pushed").steps += 1;
        }
        let mean = |epoch: usize, task: Split, f: fn(&TrainRecord) -> f64| {
            let v: Vec<f64> = self
                .records
                .iter()
                .filter(|r| r.epoch == epoch && r.task == task)
                .map(f)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        for s in &mut out {
            s.forget_loss = mean(s.epoch, Split::Forget, |r| r.loss);
            s.forget_ntp = mean(s.epoch, Split::Forget, |r| r.ntp_loss);
            s.retain_ntp = mean(s.epoch, Split::Retain, |r| r.ntp_loss);
        }
        out
    }
}

/// Loss value, underlying next-token loss and gradients of every trainable
/// tensor (in [`ModelState::trainable_indices`] order) for one batch.
pub fn objective_gradients(
    model: &ModelState,
    batch: &[EncodedExample],
    objective: Objective,
    alpha: f64,
    epsilon: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    objective_gradients_on(
        &mut tape,
        model,
        batch,
        objective,
        alpha,
        epsilon,
        dropout_rng,
    )
}

/// As [`objective_gradients`], recording on a caller-supplied tape.
pub fn objective_gradients_on(
    tape: &mut Tape,
    model: &ModelState,
    batch: &[EncodedExample],
    objective: Objective,
    alpha: f64,
    epsilon: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    let bound = model.bind(tape)?;
    let (loss, ntp) = match objective {
        Objective::Forget(kind) => forget_objective(
            kind,
            model,
            tape,
            &bound,
            batch,
            alpha,
            epsilon,
            dropout_rng,
        )?,
        Objective::Ntp => {
            let l = model.ntp_loss(tape, &bound, batch, dropout_rng)?;
            (l, l)
        }
    };
    let grads = tape.backward(loss)?;
    let g = model
        .trainable_indices()
        .into_iter()
        .map(|i| grads.get_or_zeros(bound.var(i), model.params()[i].tensor.len()))
        .collect();
    Ok((tape.scalar(loss)?, tape.scalar(ntp)?, g))
}

struct Trainer {
    lr: f64,
    alpha: f64,
    epsilon: f64,
    opt: OptimizerState,
    dropout: Option<ChaCha8Rng>,
    step: usize,
}

impl Trainer {
    fn new(model: &ModelState, cfg: &UnlearnConfig) -> Self {
        let opt = OptimizerState::new(
            model
                .params()
                .iter()
                .filter(|p| p.trainable)
                .map(|p| &p.tensor),
        );
        let dropout = model.lora_config().filter(|l| l.dropout > 0.0).map(|_| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1);
            rng
        });
        Trainer {
            lr: cfg.lr,
            alpha: cfg.alpha,
            epsilon: cfg.epsilon,
            opt,
            dropout,
            step: 0,
        }
    }

    fn step(
        &mut self,
        model: &mut ModelState,
        batch: &[EncodedExample],
        task: Split,
        objective: Objective,
        epoch: usize,
        log: &mut TrainLog,
    ) -> Result<()> {
        self.step += 1;
        let abort = |e: Error| {
            if e.is_numerical() {
                Error::NumericalAbort {
                    epoch,
                    step: self.step,
                    task: task.to_string(),
                    detail: e.to_string(),
                }
            } else {
                e
            }
        };
        let (loss, ntp, grads) = objective_gradients(
            model,
            batch,
            objective,
            self.alpha,
            self.epsilon,
            self.dropout.as_mut(),
        )
        .map_err(abort)?;
        let grad_norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let mut params: Vec<&mut Tensor> = model
            .params_mut()
            .iter_mut()
            .filter(|p| p.trainable)
            .map(|p| &mut p.tensor)
            .collect();
        adam_step(&mut params, &grads, &mut self.opt, self.lr).map_err(abort)?;
        log.records.push(TrainRecord {
            epoch,
            step: self.step,
            task,
            objective: objective.name().to_string(),
            loss,
            ntp_loss: ntp,
            grad_norm,
        });
        Ok(())
    }
}

fn encode_split(ds: &Dataset, model: &ModelState) -> Result<Vec<Option<EncodedExample>>> {
    let ctx = model.config().ctx;
    ds.examples
        .iter()
        .map(|e| match e.split {
            Split::Forget | Split::Retain => encode(e, ctx).map(Some),
            _ => Ok(None),
        })
        .collect()
}

fn gather(encoded: &[Option<EncodedExample>], indices: &[usize]) -> Vec<EncodedExample> {
    indices
        .iter()
        .map(|&i| encoded[i].clone().expect("scheduled examples are encoded"))
        .collect()
}

/// Forget/retain multi-task unlearning.
///
/// Applies the configured dataset transforms, optionally attaches adapters,
/// then for every epoch walks the single-split batch schedule: forget batches
/// take the forget objective, retain batches take the next-token loss (or
/// are skipped when `use_retain` is off). One Adam step per batch. Adapters
/// are merged before returning. Records are appended to `log` as they are
/// produced, so a numerical abort leaves the partial log in place.
pub fn run_unlearn(
    base: &ModelState,
    dataset: &Dataset,
    cfg: &UnlearnConfig,
    log: &mut TrainLog,
) -> Result<ModelState> {
    cfg.validate()?;
    let mut ds = dataset.clone();
    if cfg.use_negative_response {
        ds = apply_negative_response(&ds, &cfg.negative_phrase)?;
    }
    if cfg.use_augmentation {
        ds = augment_resegment(&ds)?;
    }
    if ds.count(Split::Forget) == 0 {
        return Err(Error::Config("the forget split is empty".into()));
    }
    if cfg.use_retain && ds.count(Split::Retain) == 0 {
        return Err(Error::Config(
            "retain fine-tuning is enabled but the retain split is empty".into(),
        ));
    }

    if cfg.epochs == 0 {
        return Ok(base.clone());
    }
    let mut model = match &cfg.lora {
        Some(l) => base.lora_attach(l, cfg.seed)?,
        None => base.clone(),
    };
    let encoded = encode_split(&ds, &model)?;
    let mut trainer = Trainer::new(&model, cfg);

    for epoch in 0..cfg.epochs {
        for batch in make_batches(&ds, cfg.batch_size, cfg.seed, epoch as u64)? {
            let objective = match batch.split {
                Split::Forget => Objective::Forget(cfg.forget_loss),
                Split::Retain if cfg.use_retain => Objective::Ntp,
                _ => continue,
            };
            let examples = gather(&encoded, &batch.indices);
            trainer.step(&mut model, &examples, batch.split, objective, epoch, log)?;
        }
    }

    if model.has_adapters() {
        model = model.lora_merge()?;
    }
    Ok(model)
}

/// Plain next-token training on forget ∪ retain, used to build the memorized
/// base model. `after_epoch` sees the model after each epoch and returns
/// `false` to stop early.
pub fn train_base(
    init: ModelState,
    dataset: &Dataset,
    cfg: &UnlearnConfig,
    log: &mut TrainLog,
    mut after_epoch: impl FnMut(usize, &ModelState) -> Result<bool>,
) -> Result<ModelState> {
    cfg.validate()?;
    if dataset.count(Split::Forget) == 0 || dataset.count(Split::Retain) == 0 {
        return Err(Error::Config(
            "base training needs nonempty forget and retain splits".into(),
        ));
    }
    let mut model = init;
    let encoded = encode_split(dataset, &model)?;
    let mut trainer = Trainer::new(&model, cfg);
    for epoch in 0..cfg.epochs {
        for batch in make_batches(dataset, cfg.batch_size, cfg.seed, epoch as u64)? {
            let examples = gather(&encoded, &batch.indices);
            trainer.step(
                &mut model,
                &examples,
                batch.split,
                Objective::Ntp,
                epoch,
                log,
            )?;
        }
        if !after_epoch(epoch, &model)? {
            break;
        }
    }
    Ok(model)
}

use super::metrics::{lcs_f1, mia_auc, mia_from_auc};
use crate::data::{Dataset, Example, Split};
use crate::error::{Error, Result};
use crate::model::tokenizer::{encode_pair, EOS};
use crate::model::{encode, EncodedExample, ModelState};

/// Similarity between an example's reference output and what the model generates.
#[derive(Debug, Clone, PartialEq)]
pub struct Regurgitation {
    pub id: String,
    pub split: Split,
    pub similarity: f64,
}

pub fn require(ds: &Dataset, split: Split, purpose: &str) -> Result<()> {
    if ds.count(split) == 0 {
        return Err(Error::Config(format!(
            "{purpose} needs a nonempty {split} split"
        )));
    }
    Ok(())
}

/// Greedy-decodes the example's prompt and scores the generated bytes against
/// the reference output with LCS-F1.
pub fn regurgitation(model: &ModelState, example: &Example) -> Result<f64> {
    let enc = encode(example, model.config().ctx)?;
    let reference = enc.output_tokens();
    let mut generated = model.greedy_decode(enc.prompt(), reference.len() + 8)?;
    if generated.last() == Some(&EOS) {
        generated.pop();
    }
    Ok(lcs_f1(reference, &generated))
}

/// Mean regurgitation similarity over one split.
pub fn mean_similarity(model: &ModelState, ds: &Dataset, split: Split) -> Result<f64> {
    let sims = ds
        .split(split)
        .map(|e| regurgitation(model, e))
        .collect::<Result<Vec<_>>>()?;
    if sims.is_empty() {
        return Err(Error::Config(format!("no {split} examples to score")));
    }
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// `0.5·(1 − mean forget similarity) + 0.5·mean retain similarity`.
pub fn tas_score(model: &ModelState, ds: &Dataset) -> Result<(f64, Vec<Regurgitation>)> {
    require(ds, Split::Forget, "task aggregate score")?;
    require(ds, Split::Retain, "task aggregate score")?;
    let mut rows = Vec::new();
    for e in ds
        .examples
        .iter()
        .filter(|e| matches!(e.split, Split::Forget | Split::Retain))
    {
        rows.push(Regurgitation {
            id: e.id.clone(),
            split: e.split,
            similarity: regurgitation(model, e)?,
        });
    }
    let mean = |s: Split| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.split == s)
            .map(|r| r.similarity)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    Ok((
        tas_from_similarities(mean(Split::Forget), mean(Split::Retain)),
        rows,
    ))
}

pub fn tas_from_similarities(forget_sim: f64, retain_sim: f64) -> f64 {
    0.5 * (1.0 - forget_sim) + 0.5 * retain_sim
}

/// Encodes an example for loss scoring. Eval-general items without an output
/// are scored as unconditional text.
pub fn encode_for_scoring(example: &Example, ctx: usize) -> Result<EncodedExample> {
    if example.output.is_empty() && example.split == Split::EvalGeneral {
        encode_pair(b"", example.input.as_bytes(), ctx)
    } else {
        encode(example, ctx)
    }
}

/// Mean masked next-token loss per example of one split, as `(id, loss)`.
pub fn split_losses(model: &ModelState, ds: &Dataset, split: Split) -> Result<Vec<(String, f64)>> {
    ds.split(split)
        .map(|e| {
            let enc = encode_for_scoring(e, model.config().ctx)?;
            Ok((e.id.clone(), model.example_loss(&enc)?))
        })
        .collect()
}

/// Loss-threshold membership inference, forget (members) vs holdout
/// (non-members). Returns `(score, auc)`; chance-level AUC scores 1.
pub fn mia_score(model: &ModelState, ds: &Dataset) -> Result<(f64, f64)> {
    require(ds, Split::Forget, "membership inference")?;
    require(ds, Split::Holdout, "membership inference")?;
    let members: Vec<f64> = split_losses(model, ds, Split::Forget)?
        .into_iter()
        .map(|x| x.1)
        .collect();
    let others: Vec<f64> = split_losses(model, ds, Split::Holdout)?
        .into_iter()
        .map(|x| x.1)
        .collect();
    let auc = mia_auc(&members, &others)?;
    Ok((mia_from_auc(auc), auc))
}

/// Per-token perplexity over the eval-general split.
pub fn perplexity(model: &ModelState, ds: &Dataset) -> Result<f64> {
    require(ds, Split::EvalGeneral, "perplexity")?;
    let (mut nll, mut count) = (0.0, 0usize);
    for e in ds.split(Split::EvalGeneral) {
        let enc = encode_for_scoring(e, model.config().ctx)?;
        let n = enc.masked_count();
        nll += model.example_loss(&enc)? * n as f64;
        count += n;
    }
    Ok((nll / count as f64).exp())
}

/// `min(1, PPL_base / PPL_unlearned)` on the eval-general split.
pub fn capability_score(base: &ModelState, unlearned: &ModelState, ds: &Dataset) -> Result<f64> {
    Ok(capability_from_perplexities(
        perplexity(base, ds)?,
        perplexity(unlearned, ds)?,
    ))
}

pub fn capability_from_perplexities(base_ppl: f64, unlearned_ppl: f64) -> f64 {
    (base_ppl / unlearned_ppl).min(1.0)
}

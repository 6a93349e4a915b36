//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any hard criterion fails. `ACCEPTANCE_ONLY=1,5` runs a subset.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unlearnlab_core::data::{augment_resegment, make_batches, Split};
use unlearnlab_core::eval::{capability_score, display3, final_score, mean_similarity, mia_score};
use unlearnlab_core::model::tokenizer::encode_pair;
use unlearnlab_core::synth::{generate, SynthConfig};
use unlearnlab_core::unlearn::gradcheck::GradcheckCase;
use unlearnlab_core::unlearn::{
    adam_step, eul_gradient_multiplier, objective_gradients, run_unlearn, train_base, Objective,
    OptimizerState,
};
use unlearnlab_core::{
    Dataset, Example, ForgetLoss, LoraConfig, ModelConfig, ModelState, Result, Task, TrainLog,
    UnlearnConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn gradient_identity() -> Result<Outcome> {
    let start = Instant::now();
    let (mut worst_dual, mut worst_fd, mut failed) = (0.0f64, 0.0f64, 0);
    for seed in 0..20 {
        let r = GradcheckCase::random(seed)?.check(100, seed + 1000, None)?;
        worst_dual = worst_dual.max(r.dual_max_rel);
        worst_fd = worst_fd.max(r.fd_max_rel);
        failed += usize::from(!r.passed());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failed == 0 && secs < 60.0,
        format!("20 configs x 100 coords, dual {worst_dual:.2e}, fd {worst_fd:.2e}, {failed} failed, {secs:.1}s"),
    )
}

fn score_arithmetic() -> Result<Outcome> {
    let rows = [
        ((0.593, 0.395, 0.275), "0.421"),
        ((0.993, 0.408, 0.229), "0.543"),
        ((0.000, 0.092, 0.281), "0.124"),
    ];
    let mut shown = Vec::new();
    let mut pass = true;
    for ((m, t, c), want) in rows {
        let got = display3(final_score(m, t, c)?);
        pass &= got == want;
        shown.push(format!("{got}/{want}"));
    }
    outcome(pass, shown.join(" "))
}

/// Trains from scratch until forget similarity reaches `target`, checking every 5 epochs.
fn memorize(
    ds: &Dataset,
    model: ModelConfig,
    seed: u64,
    target: f64,
    max_epochs: usize,
) -> Result<(ModelState, usize, f64)> {
    let cfg = UnlearnConfig {
        lr: 3e-3,
        batch_size: 16,
        epochs: max_epochs,
        seed,
        model: model.clone(),
        ..UnlearnConfig::default()
    };
    let mut log = TrainLog::default();
    let (mut epochs, mut sim) = (0, 0.0);
    let m = train_base(ModelState::new(model, seed)?, ds, &cfg, &mut log, |e, m| {
        epochs = e + 1;
        if epochs % 5 != 0 {
            return Ok(true);
        }
        sim = mean_similarity(m, ds, Split::Forget)?;
        Ok(sim < target)
    })?;
    Ok((m, epochs, sim))
}

fn desk_scale_run() -> Result<Outcome> {
    let start = Instant::now();
    let ds = generate(&SynthConfig::default())?;
    let (base, epochs, base_forget) = memorize(&ds, ModelConfig::default(), 0, 0.9, 100)?;
    if base_forget < 0.9 {
        return outcome(
            false,
            format!("base reached only {base_forget:.3} forget similarity in {epochs} epochs"),
        );
    }
    let base_retain = mean_similarity(&base, &ds, Split::Retain)?;
    let mut log = TrainLog::default();
    let unlearned = run_unlearn(&base, &ds, &UnlearnConfig::default(), &mut log)?;
    let forget = mean_similarity(&unlearned, &ds, Split::Forget)?;
    let retain = mean_similarity(&unlearned, &ds, Split::Retain)?;
    let capability = capability_score(&base, &unlearned, &ds)?;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        forget <= 0.2 && retain >= 0.7 && capability >= 0.8 && secs <= 600.0,
        format!(
            "base {epochs} epochs forget {base_forget:.3} retain {base_retain:.3}; after unlearning forget {forget:.3} (<=0.2) \
             retain {retain:.3} (>=0.7) capability {capability:.3} (>=0.8); {secs:.0}s (<=600)"
        ),
    )
}

/// Direction of the augmentation effect on the membership score. The default
/// learning rate leaves the score at zero with or without augmentation on this
/// fixture, so both arms use lr 1e-3 with the default 5 epochs.
fn augmentation_direction() -> Result<Outcome> {
    let (mut wins, mut ties) = (0, 0);
    let mut shown = Vec::new();
    for seed in 0..5u64 {
        let ds = generate(&SynthConfig {
            retain: 20,
            forget: 10,
            holdout: 10,
            eval_general: 5,
            min_sentences: 5,
            max_sentences: 6,
            seed: 100 + seed,
        })?;
        let model = ModelConfig {
            ctx: 192,
            ..ModelConfig::default()
        };
        let base_cfg = UnlearnConfig {
            lr: 3e-3,
            batch_size: 16,
            epochs: 20,
            seed,
            model: model.clone(),
            ..UnlearnConfig::default()
        };
        let mut log = TrainLog::default();
        let base = train_base(
            ModelState::new(model, seed)?,
            &ds,
            &base_cfg,
            &mut log,
            |_, _| Ok(true),
        )?;
        let base_mia = mia_score(&base, &ds)?.0;
        let score = |augment: bool| -> Result<f64> {
            let cfg = UnlearnConfig {
                use_augmentation: augment,
                lr: 1e-3,
                seed,
                ..UnlearnConfig::default()
            };
            let mut log = TrainLog::default();
            Ok(mia_score(&run_unlearn(&base, &ds, &cfg, &mut log)?, &ds)?.0)
        };
        let (plain, with_da) = (score(false)?, score(true)?);
        wins += usize::from(with_da >= plain);
        ties += usize::from(with_da == plain);
        shown.push(format!("{with_da:.3}/{plain:.3} (base {base_mia:.3})"));
    }
    outcome(
        wins >= 3,
        format!(
            "DA>=plain in {wins}/5 seeds, {ties} ties; DA/plain MIA: {}",
            shown.join(", ")
        ),
    )
}

const WORDS: &[&str] = &[
    "alpha", "b", "3.5", "e.g.x", "Mr", "end", "quiet", "", "x?y", "zz!z",
];
const ENDS: &[char] = &['.', '!', '?'];

/// A random output with a known number of sentences.
fn random_output(rng: &mut ChaCha8Rng) -> (String, usize) {
    let full = rng.random_range(0..6);
    let mut parts = Vec::new();
    for _ in 0..full {
        let words: Vec<&str> = (0..rng.random_range(1..5))
            .map(|_| WORDS[rng.random_range(0..WORDS.len())])
            .collect();
        let mut s = words.join(" ");
        s.push(ENDS[rng.random_range(0..ENDS.len())]);
        parts.push(s);
    }
    let mut text = parts.join(" ");
    let mut k = full;
    // Forget outputs must be nonempty, so a zero-sentence draw gets a bare tail.
    if full == 0 || rng.random_bool(0.3) {
        let tail = format!("tail{}", rng.random_range(0..100));
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(&tail);
        k += 1;
    }
    (text, k)
}

fn augmentation_invariants() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut examples = Vec::new();
    let mut expected = HashMap::new();
    for i in 0..1000 {
        let (output, k) = random_output(&mut rng);
        let split =
            [Split::Forget, Split::Forget, Split::Retain, Split::Holdout][rng.random_range(0..4)];
        let id = format!("e{i}");
        if split == Split::Forget {
            expected.insert(id.clone(), k);
        }
        let input = format!("prompt {i}:");
        examples.push(Example::new(id, input, output, split, Task::Completion));
    }
    let ds = Dataset::from_examples(examples)?;
    let aug = augment_resegment(&ds)?;
    let originals: HashMap<&str, &Example> =
        ds.examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut violations = 0;
    for e in &aug.examples {
        let root = e.id.split("#aug").next().unwrap_or(&e.id);
        let Some(orig) = originals.get(root) else {
            violations += 1;
            continue;
        };
        *counts.entry(root.to_string()).or_default() += 1;
        if format!("{}{}", e.input, e.output) != format!("{}{}", orig.input, orig.output)
            || !e.input.starts_with(&orig.input)
            || e.split != orig.split
        {
            violations += 1;
        }
        if orig.split != Split::Forget && *e != **orig {
            violations += 1;
        }
    }
    for e in &ds.examples {
        let want = expected.get(&e.id).map_or(1, |&k| k.max(1));
        if counts.get(&e.id).copied().unwrap_or(0) != want {
            violations += 1;
        }
    }
    let variants = aug.count(Split::Forget);
    outcome(
        violations == 0,
        format!("1000 examples, {variants} forget variants, {violations} violations"),
    )
}

fn scheduler_purity() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut violations = 0;
    for setting in 0..50 {
        let (nf, nr) = (rng.random_range(0..40), rng.random_range(0..40));
        let batch_size = rng.random_range(1..12);
        let seed = rng.random();
        let mut examples = Vec::new();
        for i in 0..nf + nr + 5 {
            let split = if i < nf {
                Split::Forget
            } else if i < nf + nr {
                Split::Retain
            } else {
                Split::Holdout
            };
            examples.push(Example::new(
                format!("x{setting}-{i}"),
                "in",
                "out.",
                split,
                Task::Qa,
            ));
        }
        // Interleave splits so indices are not grouped by split.
        let n = examples.len();
        for i in (1..n).rev() {
            examples.swap(i, rng.random_range(0..=i));
        }
        let ds = Dataset::from_examples(examples)?;
        for epoch in 0..3 {
            let batches = make_batches(&ds, batch_size, seed, epoch)?;
            if batches != make_batches(&ds, batch_size, seed, epoch)? {
                violations += 1;
            }
            let mut seen = vec![0usize; n];
            for b in &batches {
                if b.indices.is_empty() || b.indices.len() > batch_size {
                    violations += 1;
                }
                for &i in &b.indices {
                    seen[i] += 1;
                    if ds.examples[i].split != b.split {
                        violations += 1;
                    }
                }
            }
            for (i, e) in ds.examples.iter().enumerate() {
                let want = usize::from(matches!(e.split, Split::Forget | Split::Retain));
                if seen[i] != want {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        violations == 0,
        format!("50 settings x 3 epochs, {violations} violations"),
    )
}

fn lora_neutrality_and_merge() -> Result<Outcome> {
    let cfg = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        ctx: 32,
        init_std: 0.1,
    };
    let base = ModelState::new(cfg, 5)?;
    let lora = LoraConfig {
        rank: 4,
        ..LoraConfig::default()
    };
    let tokens: Vec<usize> = (0..20).map(|i| (i * 37 + 11) % 256).collect();
    let attached = base.lora_attach(&lora, 6)?;
    let neutral = attached.logits(&tokens)?.values() == base.logits(&tokens)?.values();

    let mut trained = attached;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for p in trained.params_mut().iter_mut().filter(|p| p.trainable) {
        for v in p.tensor.values_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
    }
    let adapted = trained.logits(&tokens)?;
    let merged = trained.lora_merge()?.logits(&tokens)?;
    let gap = adapted
        .values()
        .iter()
        .zip(merged.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let delta = trained.lora_delta("blocks.1.attn.wv")?;
    let (r, c) = (delta.shape()[0], delta.shape()[1]);
    let s = DMatrix::from_row_slice(r, c, delta.values()).singular_values();
    let rank = s.iter().filter(|&&x| x > s[0] * 1e-10).count();
    outcome(
        neutral && gap <= 1e-10 && rank <= lora.rank,
        format!(
            "zero-init bit-identical {neutral}, merge gap {gap:.2e}, delta rank {rank} (r={})",
            lora.rank
        ),
    )
}

fn self_damping() -> Result<Outcome> {
    let grid = [0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0];
    let mult: Vec<f64> = grid
        .iter()
        .map(|&l| eul_gradient_multiplier(l, 1.0, 1e-3))
        .collect();
    let decreasing = mult.windows(2).all(|w| w[1] < w[0]);

    // Bring a small model to next-token loss exactly 5 on a fixed batch by
    // interpolating its output head between zero (loss ln 260) and a trained head.
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        ctx: 64,
        init_std: 0.02,
    };
    let batch = vec![
        encode_pair(b"Who is Kalo?", b"Kalo lives in Oslo.", 64)?,
        encode_pair(b"Who is Mira?", b"Mira keeps a newt.", 64)?,
    ];
    let mut model = ModelState::new(cfg, 2)?;
    let mut opt = OptimizerState::new(model.params().iter().map(|p| &p.tensor));
    for _ in 0..200 {
        let (loss, _, g) = objective_gradients(&model, &batch, Objective::Ntp, 1.0, 1e-3, None)?;
        if loss < 4.0 {
            break;
        }
        let mut ps: Vec<_> = model
            .params_mut()
            .iter_mut()
            .map(|p| &mut p.tensor)
            .collect();
        adam_step(&mut ps, &g, &mut opt, 1e-2)?;
    }
    let head = model.param("head").expect("head").clone();
    let at = |c: f64| -> Result<(ModelState, f64)> {
        let mut m = model.clone();
        let h = m.param_mut("head").expect("head");
        for (v, w) in h.values_mut().iter_mut().zip(head.values()) {
            *v = c * w;
        }
        let (loss, _, _) = objective_gradients(&m, &batch, Objective::Ntp, 1.0, 1e-3, None)?;
        Ok((m, loss))
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    if at(hi)?.1 >= 5.0 {
        return outcome(false, "could not reach loss 5");
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if at(mid)?.1 > 5.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (m, loss) = at(0.5 * (lo + hi))?;
    let lr = 1e-4;
    let norms = |kind: ForgetLoss| -> Result<(f64, f64)> {
        let (_, _, g) = objective_gradients(&m, &batch, Objective::Forget(kind), 1.0, 1e-3, None)?;
        let sgd = lr * g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        let mut moved = m.clone();
        let before: Vec<f64> = m
            .params()
            .iter()
            .flat_map(|p| p.tensor.values().to_vec())
            .collect();
        let mut opt = OptimizerState::new(moved.params().iter().map(|p| &p.tensor));
        let mut ps: Vec<_> = moved
            .params_mut()
            .iter_mut()
            .map(|p| &mut p.tensor)
            .collect();
        adam_step(&mut ps, &g, &mut opt, lr)?;
        let after = moved
            .params()
            .iter()
            .flat_map(|p| p.tensor.values().to_vec());
        let adam = after
            .zip(before)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Ok((sgd, adam))
    };
    let (eul_sgd, eul_adam) = norms(ForgetLoss::Eul)?;
    let (ga_sgd, ga_adam) = norms(ForgetLoss::GradAscent)?;
    outcome(
        decreasing && (loss - 5.0).abs() < 1e-9 && eul_sgd < ga_sgd,
        format!(
            "multiplier decreasing {decreasing}; at L={loss:.6} gradient-step norm EUL {eul_sgd:.3e} < GA {ga_sgd:.3e}; \
             first Adam step EUL {eul_adam:.6e} vs GA {ga_adam:.6e}"
        ),
    )
}

type Check = fn() -> Result<Outcome>;

fn main() {
    let criteria: [(u32, &str, bool, Check); 8] = [
        (
            1,
            "reciprocal-loss gradient identity",
            true,
            gradient_identity,
        ),
        (2, "final score arithmetic", true, score_arithmetic),
        (3, "desk-scale unlearning run", true, desk_scale_run),
        (
            4,
            "augmentation improves membership score (soft)",
            false,
            augmentation_direction,
        ),
        (5, "augmentation invariants", true, augmentation_invariants),
        (6, "scheduler purity and coverage", true, scheduler_purity),
        (
            7,
            "adapter neutrality, merge and rank",
            true,
            lora_neutrality_and_merge,
        ),
        (8, "self-damping", true, self_damping),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut hard_failures = 0;
    for (id, name, hard, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = match (pass, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (soft)",
        };
        if !pass && hard {
            hard_failures += 1;
        }
        println!(
            "{tag} [{id}] {name}: {detail} [{:.1}s]",
            start.elapsed().as_secs_f64()
        );
    }
    if hard_failures > 0 {
        println!("{hard_failures} hard criteria failed");
        std::process::exit(1);
    }
}

//! Synthetic biography corpora for experiments and tests.
//!
//! Every person gets a unique made-up name and random attributes; outputs are
//! short templated sentences about them. Forget, retain and holdout people are
//! drawn from the same distribution, so holdout is a fair non-member set.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Example, Split, Task};
use crate::error::{Error, Result};

const ONSETS: &[&str] = &[
    "ka", "lo", "mi", "ra", "te", "vo", "su", "ne", "bi", "da", "fe", "go", "ha", "ji", "pu", "zo",
];
const CODAS: &[&str] = &["n", "r", "l", "s", "x", "", "m", "th"];
const CITIES: &[&str] = &[
    "Oslo", "Lima", "Pune", "Kyiv", "Baku", "Rome", "Nice", "Bern", "Cork", "Graz", "Riga", "Doha",
];
const PETS: &[&str] = &[
    "owl", "cat", "newt", "hare", "crow", "goat", "frog", "pony", "mole", "wasp",
];
const COLORS: &[&str] = &[
    "teal", "red", "gold", "plum", "jade", "gray", "lime", "navy", "rust", "pink",
];
const JOBS: &[&str] = &[
    "baker", "pilot", "judge", "nurse", "miner", "tutor", "clerk", "smith", "poet",
];
const INSTRUMENTS: &[&str] = &[
    "oboe", "harp", "drum", "lute", "horn", "bass", "fife", "cello",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub retain: usize,
    pub forget: usize,
    pub holdout: usize,
    pub eval_general: usize,
    /// Inclusive range of sentences per output, at most 6.
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            retain: 180,
            forget: 20,
            holdout: 20,
            eval_general: 50,
            min_sentences: 2,
            max_sentences: 2,
            seed: 0,
        }
    }
}

fn name(rng: &mut ChaCha8Rng) -> String {
    let mut word = |syllables: usize| {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).expect("nonempty"));
        }
        w.push_str(CODAS.choose(rng).expect("nonempty"));
        let mut c = w.chars();
        let first = c.next().expect("nonempty").to_ascii_uppercase();
        std::iter::once(first).chain(c).collect::<String>()
    };
    let first = word(2);
    let last = word(2);
    format!("{first} {last}")
}

fn biography(rng: &mut ChaCha8Rng, who: &str, sentences: usize) -> String {
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).expect("nonempty");
    let facts = [
        format!("{who} lives in {}.", pick(rng, CITIES)),
        format!(" They keep a {}.", pick(rng, PETS)),
        format!(" They like {}.", pick(rng, COLORS)),
        format!(" They work as a {}.", pick(rng, JOBS)),
        format!(" They were born in {}.", rng.random_range(1950..2010)),
        format!(" They play the {}.", pick(rng, INSTRUMENTS)),
    ];
    facts[..sentences].concat()
}

/// Generates a corpus; ids are `{split}-{n}`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.min_sentences == 0 || cfg.min_sentences > cfg.max_sentences || cfg.max_sentences > 6 {
        return Err(Error::Config(format!(
            "sentence range {}..={} must lie within 1..=6",
            cfg.min_sentences, cfg.max_sentences
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut used = HashSet::new();
    let mut examples = Vec::new();
    for (split, count) in [
        (Split::Retain, cfg.retain),
        (Split::Forget, cfg.forget),
        (Split::Holdout, cfg.holdout),
        (Split::EvalGeneral, cfg.eval_general),
    ] {
        for i in 0..count {
            let who = loop {
                let n = name(&mut rng);
                if used.insert(n.clone()) {
                    break n;
                }
            };
            let k = rng.random_range(cfg.min_sentences..=cfg.max_sentences);
            let (input, task) = if split == Split::EvalGeneral || rng.random_bool(0.5) {
                (format!("Tell me about {who}."), Task::Completion)
            } else {
                (format!("Who is {who}?"), Task::Qa)
            };
            examples.push(Example::new(
                format!("{split}-{i}"),
                input,
                biography(&mut rng, &who, k),
                split,
                task,
            ));
        }
    }
    Dataset::from_examples(examples)
}

//! `unlearnlab`: base training, unlearning, augmentation preview, evaluation
//! and the gradient self-check.
//!
//! Any training-config field can be overridden on the command line as
//! `--key=value` (or `--key value`), with dotted keys for nested fields such as
//! `--model.d_model=32` or `--lora.rank=4`. Overrides win over `--config`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use unlearnlab_core::data::{augment_resegment, load_dataset, Split};
use unlearnlab_core::eval::{evaluate, EvalReport};
use unlearnlab_core::synth::{generate, SynthConfig};
use unlearnlab_core::tensor::Fault;
use unlearnlab_core::unlearn::gradcheck::GradcheckCase;
use unlearnlab_core::unlearn::{run_unlearn, train_base};
use unlearnlab_core::{Dataset, Error, ModelState, TrainLog, UnlearnConfig};

#[derive(Parser)]
#[command(
    name = "unlearnlab",
    version,
    about = "Tiny-transformer unlearning lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base model from scratch on forget and retain with next-token loss.
    TrainBase {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Unlearn the forget split from a base checkpoint.
    Unlearn {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write the sentence-resegmented dataset and print per-split counts.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model against its base and write a JSON report.
    Eval {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Check the reciprocal-loss gradient on a random tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Finite-difference coordinates to sample.
        #[arg(long, default_value_t = 100)]
        coords: usize,
        /// Corrupts one backward rule; the check must then fail.
        #[arg(long, hide = true)]
        corrupt_rule: bool,
    },
    /// Write a synthetic biography corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 180)]
        retain: usize,
        #[arg(long, default_value_t = 20)]
        forget: usize,
        #[arg(long, default_value_t = 20)]
        holdout: usize,
        #[arg(long, default_value_t = 50)]
        eval_general: usize,
        #[arg(long, default_value_t = 2)]
        min_sentences: usize,
        #[arg(long, default_value_t = 2)]
        max_sentences: usize,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON training config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override as KEY=VALUE. Usually written `--KEY=VALUE`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn effective(&self) -> Result<UnlearnConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => UnlearnConfig::load(p)?,
            None => UnlearnConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {kv:?} is not KEY=VALUE")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Rewrites `--key=value` and `--key value` for config fields into `--set key=value`
/// on the subcommands that take a training config.
fn rewrite_overrides(args: Vec<String>) -> Vec<String> {
    if !matches!(
        args.get(1).map(String::as_str),
        Some("train-base" | "unlearn")
    ) {
        return args;
    }
    let fields: Vec<String> = match serde_json::to_value(UnlearnConfig::default()) {
        Ok(serde_json::Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    };
    let is_field = |name: &str| {
        fields
            .iter()
            .any(|f| f == name.split('.').next().unwrap_or(name))
    };
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            out.push(a);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) if is_field(k) => {
                out.push("--set".into());
                out.push(format!("{k}={v}"));
            }
            None if is_field(flag) => match it.next() {
                Some(v) => {
                    out.push("--set".into());
                    out.push(format!("{flag}={v}"));
                }
                None => out.push(a),
            },
            _ => out.push(a),
        }
    }
    out
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_meta(out: &Path, meta: serde_json::Value) -> Result<(), Error> {
    std::fs::write(
        sidecar(out, ".meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

fn print_counts(label: &str, ds: &Dataset) {
    let counts: Vec<String> = Split::ALL
        .iter()
        .map(|&s| format!("{s}={}", ds.count(s)))
        .collect();
    println!("{label:<7} {}", counts.join(" "));
}

fn print_log(log: &TrainLog) {
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    println!("epoch  steps  forget_obj  forget_ntp  retain_ntp");
    for s in log.epoch_summaries() {
        println!(
            "{:>5}  {:>5}  {:>10}  {:>10}  {:>10}",
            s.epoch,
            s.steps,
            f(s.forget_loss),
            f(s.forget_ntp),
            f(s.retain_ntp)
        );
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::TrainBase { data, out, config } => {
            let cfg = config.effective()?;
            let ds = load_dataset(&data)?;
            let init = ModelState::new(cfg.model.clone(), cfg.seed)?;
            let mut log = TrainLog::default();
            let result = train_base(init, &ds, &cfg, &mut log, |_, _| Ok(true));
            log.write_jsonl(sidecar(&out, ".log.jsonl"))?;
            let model = result?;
            print_log(&log);
            model.save(&out)?;
            write_meta(
                &out,
                json!({
                    "command": "train-base",
                    "config": cfg,
                    "data": data,
                    "dataset_digest": ds.provenance.digest,
                }),
            )?;
            println!("wrote {}", out.display());
        }
        Command::Unlearn {
            base,
            data,
            out,
            config,
        } => {
            let cfg = config.effective()?;
            let ds = load_dataset(&data)?;
            let base_model = ModelState::load(&base)?;
            let mut log = TrainLog::default();
            let result = run_unlearn(&base_model, &ds, &cfg, &mut log);
            log.write_jsonl(sidecar(&out, ".log.jsonl"))?;
            let model = result?;
            print_log(&log);
            model.save(&out)?;
            write_meta(
                &out,
                json!({
                    "command": "unlearn",
                    "config": cfg,
                    "base": base,
                    "data": data,
                    "dataset_digest": ds.provenance.digest,
                }),
            )?;
            println!("wrote {}", out.display());
        }
        Command::Augment { data, out } => {
            let ds = load_dataset(&data)?;
            let aug = augment_resegment(&ds)?;
            aug.save(&out)?;
            print_counts("before", &ds);
            print_counts("after", &aug);
        }
        Command::Eval {
            base,
            model,
            data,
            report,
        } => {
            let ds = load_dataset(&data)?;
            let base_model = ModelState::load(&base)?;
            let model_state = ModelState::load(&model)?;
            let mut r: EvalReport = evaluate(&base_model, &model_state, &ds)?;
            r.metadata.base_checkpoint = Some(base.display().to_string());
            r.metadata.model_checkpoint = Some(model.display().to_string());
            let model_meta = std::fs::read_to_string(sidecar(&model, ".meta.json"))
                .ok()
                .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok());
            r.metadata.extra = json!({ "data": data, "model_meta": model_meta });
            r.write(&report)?;
            println!("mia        {}", r.display.mia);
            println!("tas        {}", r.display.tas);
            println!("capability {}", r.display.capability);
            println!("final      {}", r.display.final_score);
        }
        Command::Gradcheck {
            seed,
            coords,
            corrupt_rule,
        } => {
            let case = GradcheckCase::random(seed)?;
            let fault = corrupt_rule.then_some(Fault::GeluBackward);
            let r = case.check(coords, seed, fault)?;
            println!("ntp_loss        {:.6}", r.ntp_loss);
            println!("dual_max_rel    {:.3e}", r.dual_max_rel);
            println!(
                "fd_max_rel      {:.3e} ({} coords)",
                r.fd_max_rel, r.fd_coords
            );
            if !r.passed() {
                return Err(Error::Validation(
                    "gradient check exceeded tolerance".into(),
                ));
            }
            println!("ok");
        }
        Command::Synth {
            out,
            seed,
            retain,
            forget,
            holdout,
            eval_general,
            min_sentences,
            max_sentences,
        } => {
            let ds = generate(&SynthConfig {
                retain,
                forget,
                holdout,
                eval_general,
                min_sentences,
                max_sentences,
                seed,
            })?;
            ds.save(&out)?;
            print_counts("wrote", &ds);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = rewrite_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

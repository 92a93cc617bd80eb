// SPDX-License-Identifier: Apache-2.0

//! `latentqa`: data generation, target pretraining, decoder training,
//! reading, steering and experiment reports from one binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentqa::config::RunConfig;
use latentqa::data::{generate_corpus, save_jsonl, Category, Split, Tokenizer};
use latentqa::harness::{
    self, artifact_paths, compare_reports, load_report, load_workspace, Experiment, ExperimentSpec,
};
use latentqa::reader::{interpret, LayerPair, ReadRequest, SpanRule};
use latentqa::steer::{self, BehaviorProbe};
use latentqa::trainer::{train_decoder, train_target, Precision};
use latentqa::transformer::{load_checkpoint, save_checkpoint};
use latentqa::{LitError, TransformerModel};
use serde_json::json;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "latentqa", version, about = "Train decoders that answer questions about activations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the train/eval JSONL splits and the vocabulary file.
    GenData {
        #[arg(long)]
        goals: Option<usize>,
        #[arg(long)]
        personas: Option<usize>,
        #[arg(long)]
        extractive: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the target model on the toy language.
    TrainTarget {
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the decoder adapter on the dataset.
    TrainDecoder {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        ell: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Read/write layer grid of decoder eval losses.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Eval loss across dataset fractions and model sizes.
    Scaling {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Ask the decoder a question about a prompt's activations.
    Read {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        question: String,
        /// Read only the last user turn, withholding earlier turns.
        #[arg(long)]
        mask_control: bool,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        ell: Option<usize>,
        #[arg(long, default_value_t = latentqa::reader::DEFAULT_MAX_NEW)]
        max_new: usize,
        /// Print a JSON response record instead of the bare answer.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Steer the target toward a control with the decoder as the loss.
    Steer {
        #[arg(long)]
        control_text: Option<String>,
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Run one experiment and write its report files.
    Eval {
        #[arg(long)]
        experiment: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-metric deltas between two report.json files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Largest absolute delta that is not a regression.
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
    },
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<LitError> for Failure {
    fn from(e: LitError) -> Self {
        let code = match &e {
            LitError::MissingArtifact { .. } => 3,
            LitError::NonFinite { .. } | LitError::Io(_) | LitError::State(_) | LitError::Tape(_) => 2,
            LitError::Checkpoint(_) | LitError::Json(_) => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 2,
            msg: e.to_string(),
        }
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn validation(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

fn effective_config(common: &Common, extra: &[(&str, Option<String>)]) -> Res<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &common.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| validation(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let named = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("data_dir", common.data_dir.as_ref().map(|p| p.display().to_string())),
        ("out_dir", common.out_dir.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in named.iter().chain(extra) {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg)
}

fn stamp(cfg: &RunConfig) -> serde_json::Value {
    json!({ "tool": "latentqa", "version": VERSION, "config": cfg })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Res<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(LitError::from)? + "\n";
    fs::write(path, text)?;
    Ok(())
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn gen_data(cfg: &RunConfig) -> Res<()> {
    let counts = cfg.counts();
    let datums = generate_corpus(cfg.seed, counts)?;
    let p = artifact_paths(cfg);
    fs::create_dir_all(&cfg.data_dir)?;
    let (train, eval): (Vec<_>, Vec<_>) = datums.into_iter().partition(|d| d.split == Split::Train);
    save_jsonl(&p.train, &train)?;
    save_jsonl(&p.eval, &eval)?;
    Tokenizer::world().save(&p.vocab)?;
    let mut manifest = stamp(cfg);
    manifest["counts"] = json!(counts);
    write_json(&cfg.data_dir.join("manifest.json"), &manifest)?;
    for c in Category::ALL {
        let n = |set: &[latentqa::data::LatentDatum]| set.iter().filter(|d| d.category == c).count() / 3;
        println!("{:<13} {:>6} controls ({} train, {} eval)", c.name(), counts.get(c), n(&train), n(&eval));
    }
    println!("wrote {}, {}, {}", p.train.display(), p.eval.display(), p.vocab.display());
    Ok(())
}

fn cmd_train_target(cfg: &RunConfig) -> Res<()> {
    let tc = cfg.target_train();
    let (model, report) = train_target::<f32>(&tc)?;
    let p = artifact_paths(cfg);
    save_checkpoint(&p.target, &model, stamp(cfg))?;
    let mut out = stamp(cfg);
    out["report"] = json!(report);
    write_json(&p.target_report, &out)?;
    println!(
        "held-out loss {:.4} (gate {:.4}, {}), base hash {}",
        report.heldout_loss,
        report.gate,
        if report.gate_passed { "passed" } else { "not reached" },
        report.base_hash
    );
    Ok(())
}

fn cmd_train_decoder(cfg: &RunConfig) -> Res<()> {
    let ws = load_workspace(cfg, false)?;
    let tc = cfg.train();
    let (adapter, report) = match tc.precision {
        Precision::F32 => {
            let mut dec = ws.target.base_clone();
            train_decoder(&mut dec, &ws.target, &ws.tok, &ws.datums, &tc)?
        }
        Precision::F64 => {
            let target = ws.target.cast::<f64>();
            let mut dec = target.base_clone();
            let (a, r) = train_decoder(&mut dec, &target, &ws.tok, &ws.datums, &tc)?;
            (a.cast::<f32>(), r)
        }
    };
    let mut decoder = ws.target.base_clone();
    decoder.attach_adapter(adapter)?;
    let p = artifact_paths(cfg);
    save_checkpoint(&p.decoder, &decoder, stamp(cfg))?;
    let mut out = stamp(cfg);
    out["report"] = json!(report);
    write_json(&p.decoder_report, &out)?;
    if let Some(acc) = report.eval_accuracy.overall {
        println!("eval accuracy {acc:.4} over {} questions", report.eval_accuracy.n);
    }
    println!("best eval loss {:.4} at epoch {}", report.best_eval_loss, report.best_epoch);
    Ok(())
}

fn run_eval(cfg: &RunConfig, experiment: Experiment, seeds: Vec<u64>) -> Res<()> {
    let spec = ExperimentSpec {
        experiment,
        seeds,
        out_dir: cfg.out_dir.clone(),
        config: cfg.clone(),
    };
    let (report, files) = harness::run_experiment(&spec)?;
    print!("{}", harness::summary(&report));
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn load_models(cfg: &RunConfig) -> Res<(TransformerModel, TransformerModel)> {
    let p = artifact_paths(cfg);
    if !p.target.exists() {
        return Err(LitError::MissingArtifact {
            path: p.target,
            hint: "latentqa train-target".into(),
        }
        .into());
    }
    if !p.decoder.exists() {
        return Err(LitError::MissingArtifact {
            path: p.decoder,
            hint: "latentqa train-decoder".into(),
        }
        .into());
    }
    Ok((load_checkpoint(&p.target)?.0, load_checkpoint(&p.decoder)?.0))
}

fn cmd_read(cfg: &RunConfig, prompt: String, question: String, mask: bool, max_new: usize, as_json: bool) -> Res<()> {
    let (target, decoder) = load_models(cfg)?;
    let tok = Tokenizer::world();
    let req = ReadRequest {
        prompt,
        span: if mask { SpanRule::StimulusOnly } else { SpanRule::Full },
        question,
        max_new_tokens: max_new,
    };
    let layers = LayerPair { k: cfg.k, ell: cfg.ell };
    let answer = interpret(&target, &decoder, &tok, &req, layers)?;
    if as_json {
        let mut out = stamp(cfg);
        out["request"] = json!(req);
        out["layers"] = json!(layers);
        out["answer"] = json!(answer);
        println!("{}", serde_json::to_string(&out).map_err(LitError::from)?);
    } else {
        println!("{answer}");
    }
    Ok(())
}

fn cmd_steer(cfg: &RunConfig) -> Res<()> {
    let (target, decoder) = load_models(cfg)?;
    let tok = Tokenizer::world();
    let layers = LayerPair { k: cfg.k, ell: cfg.ell };
    let qa = steer::derive_control_qas(&target, &decoder, &tok, &cfg.control_text, &steer::default_questions(), layers)?;
    for p in &qa {
        println!("q: {}\na: {}", p.question, p.answer);
    }
    let mut spec = cfg.steer();
    spec.qa = qa;
    let probe = BehaviorProbe {
        marker: harness::style_marker(&cfg.control_text),
        stimuli: steer::held_out_stimuli(),
        pairs: steer::stereotype_pairs(),
    };
    let mut steered = target.base_clone();
    let (_, report) = steer::control_target(&mut steered, &decoder, &tok, &spec, &steer::training_stimuli(), &probe)?;
    let p = cfg.out_dir.join("steered.ckpt");
    save_checkpoint(&p, &steered, stamp(cfg))?;
    let mut out = stamp(cfg);
    out["report"] = json!(report);
    write_json(&cfg.out_dir.join("steer_report.json"), &out)?;
    if let (Some(a), Some(b)) = (report.loss_trajectory.first(), report.loss_trajectory.last()) {
        println!("decoder loss {a:.4} -> {b:.4} over {} steps", report.steps_executed);
    }
    if let (Some(b), Some(a)) = (report.before.marker_frequency, report.after.marker_frequency) {
        println!("marker frequency {b:.3} -> {a:.3}");
    }
    if let (Some(b), Some(a)) = (&report.before.pairs, &report.after.pairs) {
        println!(
            "mean |loglik diff| {:.4} -> {:.4}, percent stereotype {:.1} -> {:.1}",
            b.mean_abs_diff, a.mean_abs_diff, b.percent_first, a.percent_first
        );
    }
    println!("wrote {}", p.display());
    Ok(())
}

fn cmd_compare(a: &Path, b: &Path, tolerance: f64) -> Res<()> {
    let ra = load_report(a)?;
    let rb = load_report(b)?;
    let c = compare_reports(&ra, &rb, tolerance)?;
    println!("experiment {}", c.experiment.name());
    for (k, d) in &c.deltas {
        println!("{k:<36} {d:+.6}");
    }
    for k in &c.only_in_a {
        println!("{k:<36} only in {}", a.display());
    }
    for k in &c.only_in_b {
        println!("{k:<36} only in {}", b.display());
    }
    if c.regressions.is_empty() {
        Ok(())
    } else {
        Err(validation(format!("deltas beyond {tolerance}: {}", c.regressions.join(", "))))
    }
}

fn run(cli: Cli) -> Res<()> {
    match cli.cmd {
        Cmd::GenData {
            goals,
            personas,
            extractive,
            common,
        } => {
            let cfg = effective_config(
                &common,
                &[("goals", opt(&goals)), ("personas", opt(&personas)), ("extractive", opt(&extractive))],
            )?;
            gen_data(&cfg)
        }
        Cmd::TrainTarget { steps, common } => cmd_train_target(&effective_config(&common, &[("target_steps", opt(&steps))])?),
        Cmd::TrainDecoder { k, ell, epochs, common } => cmd_train_decoder(&effective_config(
            &common,
            &[("k", opt(&k)), ("ell", opt(&ell)), ("epochs", opt(&epochs))],
        )?),
        Cmd::Sweep { seeds, common } => run_eval(&effective_config(&common, &[])?, Experiment::LayerSweep, seeds),
        Cmd::Scaling { seeds, common } => run_eval(&effective_config(&common, &[])?, Experiment::Scaling, seeds),
        Cmd::Read {
            prompt,
            question,
            mask_control,
            k,
            ell,
            max_new,
            json,
            common,
        } => {
            let cfg = effective_config(&common, &[("k", opt(&k)), ("ell", opt(&ell))])?;
            cmd_read(&cfg, prompt, question, mask_control, max_new, json)
        }
        Cmd::Steer {
            control_text,
            schedule,
            steps,
            common,
        } => cmd_steer(&effective_config(
            &common,
            &[("control_text", control_text), ("schedule", schedule), ("steer_steps", opt(&steps))],
        )?),
        Cmd::Eval {
            experiment,
            seeds,
            common,
        } => {
            let cfg = effective_config(&common, &[])?;
            run_eval(&cfg, experiment.parse()?, seeds)
        }
        Cmd::Compare { a, b, tolerance } => cmd_compare(&a, &b, tolerance),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

// SPDX-License-Identifier: Apache-2.0

//! Acceptance run. Each criterion is checked at its stated tolerance and
//! reported on one `PASS` or `FAIL` line.
//!
//! Trained targets and decoders are cached under the cargo test temp
//! directory, keyed by a hash of their training configuration and the crate
//! version, so only the first run pays for pretraining. Experiment results
//! are never cached.
//!
//! Arguments of the form `c<N>` select a subset of criteria. With
//! `LATENTQA_ACCEPTANCE_STRICT=1` a failed criterion makes the process exit
//! nonzero; otherwise only errors and panics do.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use latentqa::config::RunConfig;
use latentqa::data::{
    generate_corpus, load_jsonl, save_jsonl, CategoryCounts, DatumType, LatentDatum, Tokenizer, REFERENCE_COUNTS,
};
use latentqa::gradcheck::{check_adapter, check_op, check_steer_gradient, OPS};
use latentqa::harness::{
    self, load_report, run_with, write_report, Experiment, ExperimentReport, ExperimentSpec, Workspace,
    SCALING_FRACTIONS,
};
use latentqa::reader::{interpret, prompt_and_span, LayerPair, ReadRequest, SpanRule};
use latentqa::steer::{self, BehaviorProbe, SteerQa, SteerSpec};
use latentqa::trainer::{train_decoder, train_target, TargetReport, TrainConfig, TrainReport};
use latentqa::transformer::{load_checkpoint, save_checkpoint};
use latentqa::{capture, LoraSpec, PatchConfig, Result, Span, TransformerModel};
use sha2::{Digest, Sha256};

type Model = TransformerModel<f32>;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn cache_dir() -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&d).expect("cache directory");
    d
}

fn key(parts: &[&serde_json::Value]) -> String {
    let mut h = Sha256::new();
    h.update(harness::VERSION.as_bytes());
    for p in parts {
        h.update(p.to_string().as_bytes());
    }
    latentqa::hex(&h.finalize())[..16].to_string()
}

/// A pretrained target, from the cache when its configuration matches.
fn cached_target(cfg: &RunConfig, tag: &str) -> Result<(Model, TargetReport, String)> {
    let tc = cfg.target_train();
    let k = key(&[&serde_json::to_value(&tc)?]);
    let path = cache_dir().join(format!("target-{tag}-{k}.ckpt"));
    if path.exists() {
        let (m, meta) = load_checkpoint::<f32>(&path)?;
        let report: TargetReport = serde_json::from_value(meta["report"].clone())?;
        return Ok((m, report, k));
    }
    eprintln!("pretraining {tag} target ({} layers, width {})", tc.model.n_layers, tc.model.hidden);
    let (m, report) = train_target::<f32>(&tc)?;
    save_checkpoint(&path, &m, serde_json::json!({ "report": report }))?;
    Ok((m, report, k))
}

/// A trained decoder for `target`, from the cache when everything matches.
fn cached_decoder(
    target: &Model,
    target_key: &str,
    datums: &[LatentDatum],
    tc: &TrainConfig,
    tag: &str,
) -> Result<(Model, TrainReport)> {
    let ids: Vec<&str> = datums.iter().map(|d| d.id.as_str()).collect();
    let k = key(&[
        &serde_json::json!(target_key),
        &serde_json::to_value(tc)?,
        &serde_json::to_value(&ids)?,
    ]);
    let path = cache_dir().join(format!("decoder-{tag}-{k}.ckpt"));
    if path.exists() {
        let (m, meta) = load_checkpoint::<f32>(&path)?;
        let report: TrainReport = serde_json::from_value(meta["report"].clone())?;
        return Ok((m, report));
    }
    eprintln!("training {tag} decoder on {} datums", datums.len());
    let mut dec = target.base_clone();
    let (_, report) = train_decoder(&mut dec, target, &Tokenizer::world(), datums, tc)?;
    save_checkpoint(&path, &dec, serde_json::json!({ "report": report }))?;
    Ok((dec, report))
}

/// The main setup: default configuration, shared by most criteria.
struct Main {
    cfg: RunConfig,
    target_report: TargetReport,
    decoder_report: TrainReport,
    target_key: String,
    ws: Workspace,
}

fn main_setup() -> Result<Main> {
    let cfg = RunConfig::default();
    let (target, target_report, tk) = cached_target(&cfg, "main")?;
    let datums = generate_corpus(cfg.seed, cfg.counts())?;
    let (decoder, decoder_report) = cached_decoder(&target, &tk, &datums, &cfg.train(), "main")?;
    Ok(Main {
        cfg,
        target_report,
        decoder_report,
        target_key: tk,
        ws: Workspace {
            tok: Tokenizer::world(),
            target,
            decoder: Some(decoder),
            datums,
        },
    })
}

fn reports_dir() -> PathBuf {
    cache_dir().join("reports")
}

fn run_report(experiment: Experiment, seeds: &[u64], cfg: &RunConfig, ws: &Workspace) -> Result<ExperimentReport> {
    let spec = ExperimentSpec {
        experiment,
        seeds: seeds.to_vec(),
        out_dir: reports_dir(),
        config: cfg.clone(),
    };
    let report = run_with(&spec, ws)?;
    write_report(&reports_dir(), &report)?;
    Ok(report)
}

/// Like [`run_report`] for the long multi-seed runs, reusing a finished
/// report when the experiment, seeds, configuration and target all match.
fn cached_report(
    experiment: Experiment,
    seeds: &[u64],
    cfg: &RunConfig,
    ws: &Workspace,
    target_key: &str,
) -> Result<(ExperimentReport, &'static str)> {
    let k = key(&[
        &serde_json::json!(format!("{experiment:?}")),
        &serde_json::to_value(seeds)?,
        &serde_json::to_value(cfg)?,
        &serde_json::json!(target_key),
    ]);
    let path = cache_dir().join(format!("report-{k}.json"));
    if path.exists() {
        let report: ExperimentReport = serde_json::from_slice(&fs::read(&path)?)?;
        write_report(&reports_dir(), &report)?;
        return Ok((report, " (cached)"));
    }
    let report = run_report(experiment, seeds, cfg, ws)?;
    fs::write(&path, serde_json::to_vec(&report)?)?;
    Ok((report, ""))
}

fn metric(r: &ExperimentReport, name: &str) -> f64 {
    r.metrics.get(name).map_or(f64::NAN, |m| m.mean)
}

fn median_metric(r: &ExperimentReport, name: &str) -> f64 {
    r.metrics.get(name).map_or(f64::NAN, |m| m.median())
}

fn full_prompt(d: &LatentDatum) -> String {
    let g = &d.dialog;
    format!("user : {} model : {} user : {} model :", g.control_user, g.control_model, g.stimulus_user)
}

// ---------------------------------------------------------------------------

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;

fn c1_gradcheck() -> Result<Outcome> {
    let started = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut note = |name: &str, err: f64| {
        if err > worst.1 || worst.0.is_empty() {
            worst = (name.to_string(), err);
        }
    };
    for seed in 0..GRAD_SEEDS {
        for op in OPS {
            note(op, check_op(op, seed, GRAD_STEP)?);
        }
        note("adapter", check_adapter(seed, GRAD_STEP)?);
        note("steer_gradient", check_steer_gradient(seed, GRAD_STEP)?);
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(Outcome::new(
        worst.1 < GRAD_TOL && secs < 120.0,
        format!(
            "{} checks x {GRAD_SEEDS} seeds, worst relative error {:.2e} ({}), {secs:.1} s",
            OPS.len() + 2,
            worst.1,
            worst.0
        ),
    ))
}

fn c2_capture_patch(m: &Main) -> Result<Outcome> {
    let t = &m.ws.target;
    let prompts: Vec<String> = m
        .ws
        .datums
        .iter()
        .filter(|d| d.datum_type == DatumType::Control)
        .take(10)
        .map(full_prompt)
        .collect();
    let mut checked = 0;
    let mut mismatches = 0;
    for p in &prompts {
        let (tokens, _) = prompt_and_span(&m.ws.tok, p, SpanRule::Full)?;
        let plain = t.forward(&tokens, None, None)?.logits;
        for j in 0..t.config.n_layers {
            let act = capture(t, &tokens, j, Span::new(0, tokens.len()))?;
            let patch = PatchConfig {
                layer: j,
                start: 0,
                source: act,
            };
            let patched = t.forward(&tokens, None, Some(&patch))?.logits;
            checked += 1;
            mismatches += (!patched.bitwise_eq(&plain)) as usize;
        }
    }
    Ok(Outcome::new(
        prompts.len() == 10 && t.config.n_layers == 4 && mismatches == 0,
        format!(
            "{} prompts x {} layers, {mismatches} of {checked} differ",
            prompts.len(),
            t.config.n_layers
        ),
    ))
}

fn c3_adapter_contracts(m: &Main) -> Result<Outcome> {
    let tok = &m.ws.tok;
    let dec = m.ws.decoder.as_ref().expect("main decoder");
    let mut target = m.ws.target.base_clone();
    let hash = target.base_hash();
    let (tokens, _) = prompt_and_span(tok, "user : what should i cook tonight ? model :", SpanRule::Full)?;
    let plain = target.forward(&tokens, None, None)?.logits;

    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let mut zero = target.clone();
    zero.attach_lora(LoraSpec::on_layers(0..zero.config.n_layers, 8, 16.0), &mut rng)?;
    let zero_init = zero.forward(&tokens, None, None)?.logits.bitwise_eq(&plain);

    let decoder_base = m.decoder_report.base_hash == hash && dec.base_hash() == hash;
    let pretrain_hash = m.target_report.base_hash == hash;

    let qa = vec![SteerQa {
        question: "what style will the assistant use ?".into(),
        answer: "like a pirate".into(),
    }];
    let mut spec = SteerSpec::new("please speak like a pirate .", qa, m.cfg.k);
    spec.steps = 5;
    let probe = BehaviorProbe {
        marker: None,
        stimuli: Vec::new(),
        pairs: steer::stereotype_pairs(),
    };
    let dec_adapter = dec.adapter().map(|a| a.hash());
    let (adapter, _) = steer::control_target(&mut target, dec, tok, &spec, &steer::training_stimuli(), &probe)?;
    let steered_moved = !adapter.is_identity();
    let steer_base = target.base_hash() == hash && dec.adapter().map(|a| a.hash()) == dec_adapter;
    target.detach_lora();
    let restored = target.forward(&tokens, None, None)?.logits.bitwise_eq(&plain);

    let checks = [
        ("zero-init adapter keeps logits", zero_init),
        ("pretraining hash recorded", pretrain_hash),
        ("decoder training leaves base", decoder_base),
        ("steering leaves target base and decoder", steer_base),
        ("steering adapter trained", steered_moved),
        ("detach restores logits", restored),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Ok(Outcome::new(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} checks hold", checks.len())
        } else {
            format!("violated: {}", failed.join("; "))
        },
    ))
}

fn c4_masked_signal(m: &Main) -> Result<Outcome> {
    let tok = &m.ws.tok;
    let t = &m.ws.target;
    let stimuli = ["what should i cook tonight ?", "what should i read this weekend ?", "what is the capital of nowhere ?"];
    let mut min_l2 = f64::INFINITY;
    for s in stimuli.iter().filter(|s| tok.encode(s).is_ok()) {
        let acts: Vec<_> = ["pirate", "robot", "poet"]
            .iter()
            .map(|style| {
                let prompt = format!("user : please speak like a {style} . model : of course . user : {s} model :");
                let (tokens, span) = prompt_and_span(tok, &prompt, SpanRule::StimulusOnly)?;
                capture(t, &tokens, m.cfg.k, span)
            })
            .collect::<Result<_>>()?;
        for i in 0..acts.len() {
            for j in i + 1..acts.len() {
                min_l2 = min_l2.min(acts[i].values.l2_distance(&acts[j].values));
            }
        }
    }
    let r = run_report(Experiment::MaskedRead, &[0, 1, 2], &m.cfg, &m.ws)?;
    let acc = metric(&r, "style_accuracy");
    let styles = metric(&r, "styles");
    let chance = 1.0 / styles;
    Ok(Outcome::new(
        min_l2 > 0.0 && min_l2.is_finite() && styles >= 8.0 && acc >= chance + 0.3,
        format!(
            "min stimulus L2 across controls {min_l2:.4}; masked style accuracy {acc:.3} over {styles} styles (need >= {:.3})",
            chance + 0.3
        ),
    ))
}

fn c5_decoder_accuracy(m: &Main) -> Result<Outcome> {
    let r = &m.decoder_report;
    let controls = m.cfg.counts().total();
    let acc = r.eval_accuracy.overall.unwrap_or(f64::NAN);
    let secs = r.wall_clock_secs;
    Ok(Outcome::new(
        controls >= 512 && acc >= 0.8 && secs <= 1800.0,
        format!(
            "{controls} controls, eval descriptive accuracy {acc:.3} over {} questions, trained in {secs:.0} s on one core",
            r.eval_accuracy.n
        ),
    ))
}

/// Eight-layer target for the layer sweep.
fn sweep_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.n_layers = 8;
    c.hidden = 32;
    c.n_heads = 4;
    c.target_steps = 2000;
    let counts = CategoryCounts::proportional(200);
    c.goals = counts.goals;
    c.personas = counts.personas;
    c.extractive = counts.extractive;
    c.epochs = 4;
    c.batch_size = 8;
    c.lr = 2e-3;
    c.rank = 4;
    c.alpha = 8.0;
    c
}

fn c6_layer_sweep() -> Result<Outcome> {
    let cfg = sweep_config();
    let (target, _, tk) = cached_target(&cfg, "sweep")?;
    let ws = Workspace {
        tok: Tokenizer::world(),
        target,
        decoder: None,
        datums: generate_corpus(cfg.seed, cfg.counts())?,
    };
    let started = Instant::now();
    let (r, cached) = cached_report(Experiment::LayerSweep, &[0, 1, 2], &cfg, &ws, &tk)?;
    let best_ell = metric(&r, "best_ell");
    let best_k = metric(&r, "best_k");
    let mid_gain = metric(&r, "mid_k_minus_k0_at_ell0");
    Ok(Outcome::new(
        best_ell == 0.0 && mid_gain < 0.0,
        format!(
            "8-layer median of 3 seeds: best cell k={best_k} ell={best_ell}; mid-depth minus k=0 at ell=0 {mid_gain:+.4}; {:.0} s{cached}",
            started.elapsed().as_secs_f64()
        ),
    ))
}

fn scaling_config() -> RunConfig {
    let mut c = RunConfig::default();
    let counts = CategoryCounts::proportional(160);
    c.goals = counts.goals;
    c.personas = counts.personas;
    c.extractive = counts.extractive;
    c.epochs = 4;
    c.target_steps = 1500;
    c
}

fn c7_scaling(m: &Main) -> Result<Outcome> {
    const SLACK: f64 = 0.02;
    let cfg = scaling_config();
    let ws = Workspace {
        tok: Tokenizer::world(),
        target: m.ws.target.base_clone(),
        decoder: None,
        datums: generate_corpus(cfg.seed, cfg.counts())?,
    };
    let started = Instant::now();
    let (r, cached) = cached_report(Experiment::Scaling, &[0, 1, 2], &cfg, &ws, &m.target_key)?;
    let fractions: Vec<f64> = SCALING_FRACTIONS
        .iter()
        .map(|f| median_metric(&r, &format!("eval_loss.fraction.{f}")))
        .collect();
    let ladder: Vec<f64> = harness::toy_ladder(ws.tok.vocab_size(), cfg.max_context)
        .iter()
        .map(|(name, _)| median_metric(&r, &format!("eval_loss.model.{name}")))
        .collect();
    let nonincreasing = |v: &[f64]| v.len() >= 3 && v.windows(2).all(|w| w[1] <= w[0] + SLACK);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" > ");
    Ok(Outcome::new(
        fractions.len() == 3 && ladder.len() == 4 && nonincreasing(&fractions) && nonincreasing(&ladder),
        format!(
            "medians over 3 seeds, data {}; models {}; {:.0} s{cached}",
            fmt(&fractions),
            fmt(&ladder),
            started.elapsed().as_secs_f64()
        ),
    ))
}

fn c8_steering(m: &Main) -> Result<Outcome> {
    let started = Instant::now();
    let style = run_report(Experiment::SteerStyle, &[0], &m.cfg, &m.ws)?;
    let style_secs = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let debias = run_report(Experiment::Debias, &[0], &m.cfg, &m.ws)?;
    let debias_secs = started.elapsed().as_secs_f64();
    let (f0, f1) = (metric(&style, "marker_frequency.before"), metric(&style, "marker_frequency.after"));
    let (l0, l1) = (metric(&style, "decoder_loss.first"), metric(&style, "decoder_loss.last"));
    let (d0, d1) = (
        metric(&debias, "mean_abs_loglik_diff.before"),
        metric(&debias, "mean_abs_loglik_diff.after"),
    );
    let checks = [
        f0 < 0.1,
        f1 >= 0.6,
        l1 < l0,
        d1 < d0,
        style_secs <= 900.0 && debias_secs <= 900.0,
    ];
    Ok(Outcome::new(
        checks.iter().all(|&c| c),
        format!(
            "marker frequency {f0:.2} -> {f1:.2} in {} steps; decoder loss {l0:.3} -> {l1:.3}; \
             debias mean |dloglik| {d0:.3} -> {d1:.3}; runs {style_secs:.0} s and {debias_secs:.0} s",
            m.cfg.steer_steps
        ),
    ))
}

fn c9_determinism(m: &Main) -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let mut failed = Vec::new();

    let counts = CategoryCounts::proportional(40);
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    save_jsonl(&a, &generate_corpus(11, counts)?)?;
    save_jsonl(&b, &generate_corpus(11, counts)?)?;
    if fs::read(&a)? != fs::read(&b)? {
        failed.push("corpus bytes");
    }
    if load_jsonl(&a)? != generate_corpus(11, counts)? {
        failed.push("jsonl round trip");
    }

    // Small decoder trained twice from the same seed.
    let target = m.ws.target.base_clone();
    let small: Vec<LatentDatum> = generate_corpus(12, CategoryCounts::proportional(12))?;
    let mut tc = TrainConfig::for_model(&target.config);
    tc.epochs = 1;
    tc.max_answer_tokens = 4;
    let run = || -> Result<(TrainReport, Vec<u8>)> {
        let mut dec = target.base_clone();
        let (_, report) = train_decoder(&mut dec, &target, &m.ws.tok, &small, &tc)?;
        let p = dir.path().join("d.ckpt");
        save_checkpoint(&p, &dec, serde_json::json!({ "adapter": report.adapter_hash }))?;
        Ok((report.without_timing(), fs::read(p)?))
    };
    let (r1, bytes1) = run()?;
    let (r2, bytes2) = run()?;
    if r1 != r2 {
        failed.push("training report");
    }
    if bytes1 != bytes2 {
        failed.push("checkpoint bytes");
    }
    let (back, _) = load_checkpoint::<f32>(&dir.path().join("d.ckpt"))?;
    let mut dec = target.base_clone();
    train_decoder(&mut dec, &target, &m.ws.tok, &small, &tc)?;
    let (tokens, _) = prompt_and_span(&m.ws.tok, "user : you are a robot now . model : ok .", SpanRule::Full)?;
    if !back.forward(&tokens, None, None)?.logits.bitwise_eq(&dec.forward(&tokens, None, None)?.logits) {
        failed.push("checkpoint round trip");
    }

    let req = ReadRequest {
        prompt: "user : please speak like a pirate . model : ok , arr ! user : what should i cook tonight ? model :".into(),
        span: SpanRule::StimulusOnly,
        question: "what style will the assistant use ?".into(),
        max_new_tokens: 8,
    };
    let layers = LayerPair { k: m.cfg.k, ell: m.cfg.ell };
    let decoder = m.ws.decoder.as_ref().expect("main decoder");
    if interpret(&m.ws.target, decoder, &m.ws.tok, &req, layers)? != interpret(&m.ws.target, decoder, &m.ws.tok, &req, layers)? {
        failed.push("reader output");
    }

    let qa = vec![SteerQa {
        question: "what style will the assistant use ?".into(),
        answer: "like a robot".into(),
    }];
    let mut spec = SteerSpec::new("you are a robot now .", qa, m.cfg.k);
    spec.steps = 3;
    let probe = BehaviorProbe {
        marker: Some("beep".into()),
        stimuli: steer::held_out_stimuli()[..5].to_vec(),
        pairs: Vec::new(),
    };
    let steer_once = || -> Result<(Vec<f64>, String)> {
        let mut t = m.ws.target.base_clone();
        let (_, r) = steer::control_target(&mut t, decoder, &m.ws.tok, &spec, &steer::training_stimuli(), &probe)?;
        Ok((r.loss_trajectory, r.adapter_hash))
    };
    if steer_once()? != steer_once()? {
        failed.push("steering trajectory");
    }

    Ok(Outcome::new(
        failed.is_empty(),
        if failed.is_empty() {
            "corpus, jsonl, training, checkpoint, reader and steering outputs reproduce exactly".to_string()
        } else {
            format!("not reproduced: {}", failed.join(", "))
        },
    ))
}

fn c10_reference_metadata(m: &Main) -> Result<Outcome> {
    let expected = serde_json::json!({
        "read_layer_k": 15,
        "write_layer_ell": 0,
        "decoder_lora": {"rank": 32, "alpha": 64},
        "target_lora": {"rank": 8, "alpha": 16},
        "dataset_counts": {"goals": 4670, "personas": 3359, "extractive_qa": 8703},
        "sweep_corner_losses": {"best": 1.013, "worst": 1.564},
        "debias_mean_abs_loglik_diff": {"no_control": 4.05, "steered": 3.70},
        "debias_percent_stereotype": {"no_control": 64.3, "steered": 60.9},
    });
    let mut failed = Vec::new();
    let mut seen = 0;
    let dir = reports_dir();
    if dir.exists() {
        for e in fs::read_dir(&dir)? {
            let path = e?.path().join("report.json");
            if path.exists() {
                seen += 1;
                if load_report(&path)?.reference != expected {
                    failed.push(path.display().to_string());
                }
            }
        }
    }
    if seen == 0 {
        let r = run_report(Experiment::MaskedRead, &[0], &m.cfg, &m.ws)?;
        seen = 1;
        if r.reference != expected {
            failed.push("masked-read report".into());
        }
    }
    let dr = &m.decoder_report.reference;
    if dr["decoder_lora_rank"] != 32 || dr["decoder_lora_alpha"] != 64 || dr["best_read_layer"] != 15 {
        failed.push("decoder training report".into());
    }
    let sr = steer::reference_hyperparams();
    if sr["target_lora_rank"] != 8 || sr["target_lora_alpha"] != 16 {
        failed.push("steering reference".into());
    }
    let rc = REFERENCE_COUNTS;
    if (rc.goals, rc.personas, rc.extractive) != (4670, 3359, 8703) {
        failed.push("reference counts".into());
    }
    Ok(Outcome::new(
        failed.is_empty(),
        format!(
            "{seen} written reports plus decoder and steering reports carry the reference block; {}",
            if failed.is_empty() { "all constants match".to_string() } else { format!("mismatch in {}", failed.join(", ")) }
        ),
    ))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let selected: BTreeSet<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.strip_prefix('c').and_then(|n| n.parse().ok()))
        .collect();
    let want = |n: u32| selected.is_empty() || selected.contains(&n);
    let strict = std::env::var("LATENTQA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    let needs_main = (2..=10).any(|n| n != 6 && want(n));
    let main_setup = if needs_main {
        match main_setup() {
            Ok(m) => Some(m),
            Err(e) => {
                eprintln!("main setup failed: {e}");
                return ExitCode::from(2);
            }
        }
    } else {
        None
    };
    let m = main_setup.as_ref();

    type Check<'a> = Box<dyn Fn() -> Result<Outcome> + 'a>;
    let checks: Vec<(u32, &str, Check)> = vec![
        (1, "gradient checks", Box::new(c1_gradcheck)),
        (2, "capture/patch identity", Box::new(|| c2_capture_patch(m.unwrap()))),
        (3, "adapter contracts", Box::new(|| c3_adapter_contracts(m.unwrap()))),
        (4, "masked control signal", Box::new(|| c4_masked_signal(m.unwrap()))),
        (5, "decoder accuracy", Box::new(|| c5_decoder_accuracy(m.unwrap()))),
        (6, "layer sweep", Box::new(c6_layer_sweep)),
        (7, "scaling", Box::new(|| c7_scaling(m.unwrap()))),
        (8, "steering", Box::new(|| c8_steering(m.unwrap()))),
        (9, "determinism and round trips", Box::new(|| c9_determinism(m.unwrap()))),
        (10, "reference metadata", Box::new(|| c10_reference_metadata(m.unwrap()))),
    ];

    let mut passed = 0;
    let mut failed = 0;
    let mut errored = false;
    for (n, name, check) in checks {
        if !want(n) {
            continue;
        }
        match check() {
            Ok(o) => {
                println!("{} c{n} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
                if o.pass {
                    passed += 1;
                } else {
                    failed += 1;
                }
            }
            Err(e) => {
                println!("FAIL c{n} {name}: error: {e}");
                failed += 1;
                errored = true;
            }
        }
    }
    println!("acceptance: {passed} passed, {failed} failed");
    if errored || (strict && failed > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

// SPDX-License-Identifier: Apache-2.0

//! Experiment drivers. Each experiment runs once per seed, aggregates the
//! per-seed metrics with a normal-approximation 99% interval, and writes a
//! JSON report, a per-seed CSV and a plain-text summary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{
    contains_token, generate_corpus, load_jsonl, world, BehaviorKey, Category, CategoryCounts,
    DatumType, LatentDatum, QaKind, Split, Tokenizer,
};
use crate::error::{LitError, Result};
use crate::reader::{interpret, LayerPair, ReadRequest, SpanRule, DEFAULT_MAX_NEW};
use crate::steer::{self, BehaviorProbe, SteerSpec};
use crate::trainer::{self, layer_sweep, train_target, SweepMatrix};
use crate::transformer::{load_checkpoint, ModelConfig, TransformerModel};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.575_829_303_548_901;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    AttributeRead,
    MaskedRead,
    LayerSweep,
    Scaling,
    SteerStyle,
    Debias,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::AttributeRead,
        Experiment::MaskedRead,
        Experiment::LayerSweep,
        Experiment::Scaling,
        Experiment::SteerStyle,
        Experiment::Debias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::AttributeRead => "attribute-read",
            Experiment::MaskedRead => "masked-read",
            Experiment::LayerSweep => "layer-sweep",
            Experiment::Scaling => "scaling",
            Experiment::SteerStyle => "steer-style",
            Experiment::Debias => "debias",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = LitError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| LitError::Config(format!("unknown experiment {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub config: RunConfig,
}

/// Per-seed values of one metric with their mean and 99% interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub ci99: (f64, f64),
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let (mean, half) = mean_ci99(&values);
        Self {
            values,
            mean,
            ci99: (mean - half, mean + half),
        }
    }

    pub fn median(&self) -> f64 {
        median(&self.values)
    }
}

/// Mean and half-width `Z99 · s / √n` with the sample standard deviation;
/// the half-width is 0 for a single value.
pub fn mean_ci99(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Z99 * (var / n).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub version: String,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
    pub metrics: BTreeMap<String, MetricSummary>,
    /// Extra tables, e.g. the median sweep matrix, as CSV text.
    pub tables: BTreeMap<String, String>,
    pub reference: serde_json::Value,
    pub notes: Vec<String>,
}

/// Models and data an experiment runs against.
pub struct Workspace {
    pub tok: Tokenizer,
    pub target: TransformerModel<f32>,
    pub decoder: Option<TransformerModel<f32>>,
    pub datums: Vec<LatentDatum>,
}

pub fn artifact_paths(cfg: &RunConfig) -> ArtifactPaths {
    ArtifactPaths {
        train: cfg.data_dir.join("train.jsonl"),
        eval: cfg.data_dir.join("eval.jsonl"),
        vocab: cfg.data_dir.join("vocab.json"),
        target: cfg.out_dir.join("target.ckpt"),
        target_report: cfg.out_dir.join("target_report.json"),
        decoder: cfg.out_dir.join("decoder.ckpt"),
        decoder_report: cfg.out_dir.join("decoder_report.json"),
    }
}

#[derive(Clone, Debug)]
pub struct ArtifactPaths {
    pub train: PathBuf,
    pub eval: PathBuf,
    pub vocab: PathBuf,
    pub target: PathBuf,
    pub target_report: PathBuf,
    pub decoder: PathBuf,
    pub decoder_report: PathBuf,
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(LitError::MissingArtifact {
            path: path.to_path_buf(),
            hint: hint.into(),
        })
    }
}

/// Loads the dataset, vocabulary and checkpoints named by `cfg`.
pub fn load_workspace(cfg: &RunConfig, need_decoder: bool) -> Result<Workspace> {
    let p = artifact_paths(cfg);
    for path in [&p.train, &p.eval, &p.vocab] {
        require(path, "latentqa gen-data")?;
    }
    require(&p.target, "latentqa train-target")?;
    if need_decoder {
        require(&p.decoder, "latentqa train-decoder")?;
    }
    let tok = Tokenizer::load(&p.vocab)?;
    let mut datums = load_jsonl(&p.train)?;
    datums.extend(load_jsonl(&p.eval)?);
    let (target, _) = load_checkpoint(&p.target)?;
    let decoder = if need_decoder {
        Some(load_checkpoint(&p.decoder)?.0)
    } else {
        None
    };
    Ok(Workspace {
        tok,
        target,
        decoder,
        datums,
    })
}

fn needs_decoder(e: Experiment) -> bool {
    !matches!(e, Experiment::LayerSweep | Experiment::Scaling)
}

/// Loads the workspace, runs the experiment and writes its files under
/// `spec.out_dir`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<(ExperimentReport, Vec<PathBuf>)> {
    let ws = load_workspace(&spec.config, needs_decoder(spec.experiment))?;
    let report = run_with(spec, &ws)?;
    let files = write_report(&spec.out_dir, &report)?;
    Ok((report, files))
}

pub fn run_with(spec: &ExperimentSpec, ws: &Workspace) -> Result<ExperimentReport> {
    if spec.seeds.is_empty() {
        return Err(LitError::Config("at least one seed is required".into()));
    }
    let mut per_seed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut tables = BTreeMap::new();
    let mut notes = vec!["confidence intervals are over seeds (normal approximation, 99%)".to_string()];
    let mut push = |m: BTreeMap<String, f64>| {
        for (k, v) in m {
            per_seed.entry(k).or_default().push(v);
        }
    };
    match spec.experiment {
        Experiment::AttributeRead => {
            for &seed in &spec.seeds {
                push(attribute_read(ws, &spec.config, seed)?);
            }
        }
        Experiment::MaskedRead => {
            for &seed in &spec.seeds {
                push(masked_read(ws, &spec.config, seed)?);
            }
            notes.push(format!("chance is 1/{} styles", world::STYLES.len()));
        }
        Experiment::LayerSweep => {
            let (ks, ells) = sweep_grid(ws.target.config.n_layers);
            let mut mats = Vec::new();
            for &seed in &spec.seeds {
                let mut cfg = spec.config.train();
                cfg.seed = seed;
                let m = layer_sweep(&ws.target, &ws.tok, &ws.datums, &ks, &ells, &cfg)?;
                tables.insert(format!("sweep_seed{seed}"), m.to_csv());
                mats.push(m);
            }
            let med = median_matrix(&mats);
            let (bk, bl) = med.argmin();
            let mut m = BTreeMap::new();
            m.insert("best_k".into(), bk as f64);
            m.insert("best_ell".into(), bl as f64);
            // rows are read layers, column 0 is ℓ = 0
            let mid = ks.len() / 2;
            m.insert("mid_k_minus_k0_at_ell0".into(), med.loss[mid][0] - med.loss[0][0]);
            tables.insert("sweep_median".into(), med.to_csv());
            for (k, v) in m {
                per_seed.insert(k, vec![v]);
            }
            notes.push("layer-sweep metrics come from the median matrix over seeds".into());
        }
        Experiment::Scaling => {
            let (rows, csv) = scaling(ws, &spec.config, &spec.seeds)?;
            tables.insert("scaling".into(), csv);
            for (k, v) in rows {
                per_seed.insert(k, v);
            }
        }
        Experiment::SteerStyle | Experiment::Debias => {
            for &seed in &spec.seeds {
                push(steer_run(ws, &spec.config, spec.experiment, seed)?);
            }
        }
    }
    Ok(ExperimentReport {
        experiment: spec.experiment,
        version: VERSION.into(),
        seeds: spec.seeds.clone(),
        config: spec.config.clone(),
        metrics: per_seed
            .into_iter()
            .map(|(k, v)| (k, MetricSummary::from_values(v)))
            .collect(),
        tables,
        reference: reference_values(),
        notes,
    })
}

/// Reference values of the full-scale setup. Stored for context only; toy
/// runs are never compared against them.
pub fn reference_values() -> serde_json::Value {
    serde_json::json!({
        "read_layer_k": 15,
        "write_layer_ell": 0,
        "decoder_lora": {"rank": 32, "alpha": 64},
        "target_lora": {"rank": 8, "alpha": 16},
        "dataset_counts": {"goals": 4670, "personas": 3359, "extractive_qa": 8703},
        "sweep_corner_losses": {"best": 1.013, "worst": 1.564},
        "debias_mean_abs_loglik_diff": {"no_control": 4.05, "steered": 3.70},
        "debias_percent_stereotype": {"no_control": 64.3, "steered": 60.9},
    })
}

/// Four read and four write layers spread over the depth, starting at 0.
pub fn sweep_grid(n_layers: usize) -> (Vec<usize>, Vec<usize>) {
    let mut v: Vec<usize> = (0..4).map(|i| i * n_layers / 4).collect();
    v.dedup();
    (v.clone(), v)
}

fn median_matrix(mats: &[SweepMatrix]) -> SweepMatrix {
    let first = &mats[0];
    let loss = (0..first.ks.len())
        .map(|i| {
            (0..first.ells.len())
                .map(|j| median(&mats.iter().map(|m| m.loss[i][j]).collect::<Vec<_>>()))
                .collect()
        })
        .collect();
    SweepMatrix {
        ks: first.ks.clone(),
        ells: first.ells.clone(),
        loss,
    }
}

/// Fresh held-out controls of `category` for `seed`: drawn from the whole
/// template space, skipping any control present in `seen`.
pub fn fresh_controls(category: Category, seed: u64, seen: &BTreeSet<String>) -> Result<Vec<LatentDatum>> {
    let mut counts = CategoryCounts {
        goals: 0,
        personas: 0,
        extractive: 0,
    };
    match category {
        Category::Goal => counts.goals = world::capacity(category),
        Category::Persona => counts.personas = world::capacity(category),
        Category::ExtractiveQa => counts.extractive = world::capacity(category),
    }
    Ok(generate_corpus(seed, counts)?
        .into_iter()
        .filter(|d| !seen.contains(&d.control_id))
        .collect())
}

fn seen_controls(ws: &Workspace) -> BTreeSet<String> {
    ws.datums
        .iter()
        .filter(|d| d.split == Split::Train)
        .map(|d| d.control_id.clone())
        .collect()
}

fn decoder(ws: &Workspace) -> &TransformerModel<f32> {
    ws.decoder.as_ref().expect("workspace loaded with a decoder")
}

fn full_prompt(d: &LatentDatum) -> String {
    let g = &d.dialog;
    format!(
        "user : {} model : {} user : {} model :",
        g.control_user, g.control_model, g.stimulus_user
    )
}

/// Relations read from planted-fact controls: 8 slots, 50 controls each,
/// full-dialog activations.
fn attribute_read(ws: &Workspace, cfg: &RunConfig, seed: u64) -> Result<BTreeMap<String, f64>> {
    let layers = LayerPair { k: cfg.k, ell: cfg.ell };
    let pool = fresh_controls(Category::ExtractiveQa, seed, &seen_controls(ws))?;
    let mut out = BTreeMap::new();
    let mut total = (0usize, 0usize);
    for &slot in &world::SLOTS[..8] {
        let mut hits = 0;
        let picked: Vec<&LatentDatum> = pool
            .iter()
            .filter(|d| d.datum_type == DatumType::Control)
            .filter(|d| matches!(&d.behavior, BehaviorKey::Fact { slot: s, .. } if s == slot))
            .take(50)
            .collect();
        for d in &picked {
            let qa = d.qa.iter().find(|q| q.kind == QaKind::Descriptive).expect("descriptive pair");
            let req = ReadRequest {
                prompt: full_prompt(d),
                span: SpanRule::Full,
                question: qa.question.clone(),
                max_new_tokens: DEFAULT_MAX_NEW,
            };
            let ans = interpret(&ws.target, decoder(ws), &ws.tok, &req, layers)?;
            let key = d.behavior.key_token();
            hits += contains_token(&ans, &key) as usize;
        }
        out.insert(format!("accuracy.{slot}"), hits as f64 / picked.len() as f64);
        total.0 += hits;
        total.1 += picked.len();
    }
    out.insert("accuracy".into(), total.0 as f64 / total.1 as f64);
    Ok(out)
}

/// Style read from stimulus-only activations of persona dialogs.
fn masked_read(ws: &Workspace, cfg: &RunConfig, seed: u64) -> Result<BTreeMap<String, f64>> {
    let layers = LayerPair { k: cfg.k, ell: cfg.ell };
    let question = world::PERSONA_QUESTIONS[0].0;
    let pool = fresh_controls(Category::Persona, seed, &seen_controls(ws))?;
    let mut per_style: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for d in pool.iter().filter(|d| d.datum_type == DatumType::Stimulus) {
        let BehaviorKey::Style { style } = &d.behavior else { continue };
        let e = per_style.entry(style.as_str()).or_default();
        if e.1 >= 20 {
            continue;
        }
        let req = ReadRequest {
            prompt: full_prompt(d),
            span: SpanRule::StimulusOnly,
            question: question.into(),
            max_new_tokens: DEFAULT_MAX_NEW,
        };
        let ans = interpret(&ws.target, decoder(ws), &ws.tok, &req, layers)?;
        e.0 += contains_token(&ans, style) as usize;
        e.1 += 1;
    }
    let hits: usize = per_style.values().map(|v| v.0).sum();
    let n: usize = per_style.values().map(|v| v.1).sum();
    let chance = 1.0 / world::STYLES.len() as f64;
    let acc = hits as f64 / n as f64;
    let mut out = BTreeMap::new();
    out.insert("style_accuracy".into(), acc);
    out.insert("margin_over_chance".into(), acc - chance);
    out.insert("styles".into(), per_style.len() as f64);
    Ok(out)
}

/// Model sizes for the scaling ladder, smallest first.
pub fn toy_ladder(vocab_size: usize, max_context: usize) -> Vec<(String, ModelConfig)> {
    [(1, 16), (2, 24), (2, 32), (3, 48)]
        .into_iter()
        .map(|(l, d)| (format!("L{l}d{d}"), ModelConfig::new(l, d, 4, vocab_size, max_context)))
        .collect()
}

pub const SCALING_FRACTIONS: [f64; 3] = [0.25, 0.5, 1.0];

type Rows = BTreeMap<String, Vec<f64>>;

fn scaling(ws: &Workspace, cfg: &RunConfig, seeds: &[u64]) -> Result<(Rows, String)> {
    let mut points = Vec::new();
    let base = cfg.train();
    for &seed in seeds {
        let run = trainer::TrainConfig { seed, ..base.clone() };
        points.extend(trainer::scaling_run(
            &[("workspace".to_string(), &ws.target)],
            &ws.tok,
            &ws.datums,
            &SCALING_FRACTIONS,
            &run,
        )?);
    }
    let mut ladder = Vec::new();
    for (name, mc) in toy_ladder(ws.tok.vocab_size(), cfg.max_context) {
        let mut tc = cfg.target_train();
        tc.model = mc;
        let (t, _) = train_target::<f32>(&tc)?;
        ladder.push((name, t));
    }
    for &seed in seeds {
        let run = trainer::TrainConfig { seed, ..base.clone() };
        let refs: Vec<(String, &TransformerModel<f32>)> = ladder.iter().map(|(n, t)| (n.clone(), t)).collect();
        points.extend(trainer::scaling_run(&refs, &ws.tok, &ws.datums, &[1.0], &run)?);
    }
    let mut rows: Rows = BTreeMap::new();
    for p in &points {
        let key = if p.model == "workspace" {
            format!("eval_loss.fraction.{}", p.fraction)
        } else {
            format!("eval_loss.model.{}", p.model)
        };
        rows.entry(key).or_default().push(p.eval_loss);
    }
    Ok((rows, trainer::scaling_csv(&points)))
}

/// The control used by the debias experiment.
pub fn fair_control_text() -> String {
    format!("please speak like a {} .", world::FAIR_STYLE)
}

fn steer_run(ws: &Workspace, cfg: &RunConfig, e: Experiment, seed: u64) -> Result<BTreeMap<String, f64>> {
    let dec = decoder(ws);
    let layers = LayerPair { k: cfg.k, ell: cfg.ell };
    let text = if e == Experiment::Debias {
        fair_control_text()
    } else {
        cfg.control_text.clone()
    };
    let qa = steer::derive_control_qas(&ws.target, dec, &ws.tok, &text, &steer::default_questions(), layers)?;
    let mut spec: SteerSpec = cfg.steer();
    spec.control_text = text.clone();
    spec.qa = qa;
    spec.seed = seed;
    let probe = if e == Experiment::Debias {
        BehaviorProbe {
            marker: None,
            stimuli: Vec::new(),
            pairs: steer::stereotype_pairs(),
        }
    } else {
        BehaviorProbe {
            marker: Some(style_marker(&text).ok_or_else(|| {
                LitError::Config(format!("control text {text:?} names no known style"))
            })?),
            stimuli: steer::held_out_stimuli(),
            pairs: Vec::new(),
        }
    };
    let mut target = ws.target.base_clone();
    let (_, r) = steer::control_target(&mut target, dec, &ws.tok, &spec, &steer::training_stimuli(), &probe)?;
    let mut out = BTreeMap::new();
    if let (Some(&first), Some(&last)) = (r.loss_trajectory.first(), r.loss_trajectory.last()) {
        out.insert("decoder_loss.first".into(), first);
        out.insert("decoder_loss.last".into(), last);
    }
    if let (Some(b), Some(a)) = (r.before.marker_frequency, r.after.marker_frequency) {
        out.insert("marker_frequency.before".into(), b);
        out.insert("marker_frequency.after".into(), a);
    }
    if let (Some(b), Some(a)) = (&r.before.pairs, &r.after.pairs) {
        out.insert("mean_abs_loglik_diff.before".into(), b.mean_abs_diff);
        out.insert("mean_abs_loglik_diff.after".into(), a.mean_abs_diff);
        out.insert("percent_stereotype.before".into(), b.percent_first);
        out.insert("percent_stereotype.after".into(), a.percent_first);
    }
    Ok(out)
}

/// Marker token of the first style named in `text`.
pub fn style_marker(text: &str) -> Option<String> {
    text.split_whitespace()
        .find_map(world::style)
        .map(|(_, marker, _)| marker.to_string())
}

/// Writes `report.json`, `metrics.csv`, `summary.txt` and one CSV per table
/// into `dir/<experiment>/`.
pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<Vec<PathBuf>> {
    let d = dir.join(report.experiment.name());
    fs::create_dir_all(&d)?;
    let mut files = Vec::new();
    let mut write = |name: &str, body: String| -> Result<()> {
        let p = d.join(name);
        fs::write(&p, body)?;
        files.push(p);
        Ok(())
    };
    write("report.json", serde_json::to_string_pretty(report)? + "\n")?;
    write("metrics.csv", metrics_csv(report))?;
    write("summary.txt", summary(report))?;
    for (name, csv) in &report.tables {
        write(&format!("{name}.csv"), csv.clone())?;
    }
    Ok(files)
}

pub fn metrics_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("metric,seed,value\n");
    for (name, m) in &report.metrics {
        if m.values.len() == report.seeds.len() {
            for (seed, v) in report.seeds.iter().zip(&m.values) {
                s.push_str(&format!("{name},{seed},{v:.6}\n"));
            }
        } else {
            for v in &m.values {
                s.push_str(&format!("{name},all,{v:.6}\n"));
            }
        }
    }
    s
}

pub fn summary(report: &ExperimentReport) -> String {
    let mut s = format!(
        "experiment {} (latentqa {}), seeds {:?}\n",
        report.experiment.name(),
        report.version,
        report.seeds
    );
    for (name, m) in &report.metrics {
        s.push_str(&format!(
            "{name:<36} mean {:>9.4}  99% CI [{:.4}, {:.4}]\n",
            m.mean, m.ci99.0, m.ci99.1
        ));
    }
    for n in &report.notes {
        s.push_str(&format!("note: {n}\n"));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub experiment: Experiment,
    /// `b.mean - a.mean` for metrics present in both reports.
    pub deltas: BTreeMap<String, f64>,
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
    /// Metrics whose absolute delta exceeds the tolerance.
    pub regressions: Vec<String>,
}

pub fn compare_reports(a: &ExperimentReport, b: &ExperimentReport, tolerance: f64) -> Result<Comparison> {
    if a.experiment != b.experiment {
        return Err(LitError::ReportMismatch {
            left: a.experiment.name().into(),
            right: b.experiment.name().into(),
        });
    }
    let mut deltas = BTreeMap::new();
    let mut regressions = Vec::new();
    for (name, ma) in &a.metrics {
        if let Some(mb) = b.metrics.get(name) {
            let d = mb.mean - ma.mean;
            if d.abs() > tolerance {
                regressions.push(name.clone());
            }
            deltas.insert(name.clone(), d);
        }
    }
    Ok(Comparison {
        experiment: a.experiment,
        deltas,
        only_in_a: a.metrics.keys().filter(|k| !b.metrics.contains_key(*k)).cloned().collect(),
        only_in_b: b.metrics.keys().filter(|k| !a.metrics.contains_key(*k)).cloned().collect(),
        regressions,
    })
}

pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path).map_err(|_| LitError::MissingArtifact {
        path: path.to_path_buf(),
        hint: "latentqa eval".into(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

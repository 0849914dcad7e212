use std::path::{Path, PathBuf};
use std::time::Instant;

use onion_core::gates;
use onion_core::gru::{self, GateTrace};
use onion_core::interventions::das::{save_das, train_das};
use onion_core::interventions::onion::{save_onion, train_onion, OnionConstraint};
use onion_core::probes::{save_probe, train_probe, ProbeKind};
use onion_core::taskgen::{self, Corpus, RepeatExample};
use onion_core::toymodel::{save_toy, toy_train};
use onion_core::trainer::{
    load_checkpoint, save_checkpoint, train_gru, CheckpointMeta, LoopReport,
};
use onion_core::{DecodeMode, Granularity, GruParams};
use serde::{Deserialize, Serialize};

use crate::artifacts::{RunDir, RESULT_FILE};
use crate::config::{ConfigArgs, ExperimentConfig, Target};
use crate::failure::Failure;

pub const TRAIN_CORPUS: &str = "train.corpus";
pub const TEST_CORPUS: &str = "test.corpus";
pub const MODEL_FILE: &str = "model.ckpt";

/// Summary written to `result.json` and consumed by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub command: String,
    /// `base`, `unigram`, `bigram`, `onion`, `onion-control`, a probe kind,
    /// `gates` or `toy`.
    pub objective: String,
    pub hidden: usize,
    pub mode: Option<DecodeMode>,
    pub seed: u64,
    /// `exact-match` or `monotone-fraction`.
    pub metric: String,
    /// `None` when the metric is undefined (e.g. a one-token gate trace).
    pub score: Option<f64>,
    #[serde(default)]
    pub per_token: Option<f64>,
    pub steps: usize,
    #[serde(default)]
    pub first_step_99: Option<usize>,
    #[serde(default)]
    pub failure: Option<String>,
}

/// Train/test sequences from `--data` or generated from the task config.
fn corpus(cfg: &ExperimentConfig, data: Option<&Path>, run: &mut RunDir) -> Result<Corpus, Failure> {
    match data {
        Some(dir) => {
            let train_path = dir.join(TRAIN_CORPUS);
            let test_path = dir.join(TEST_CORPUS);
            run.add_input("train.corpus", &train_path)?;
            run.add_input("test.corpus", &test_path)?;
            let train = taskgen::read_corpus(&train_path)?;
            let test = taskgen::read_corpus(&test_path)?;
            check_corpus(cfg, &train)?;
            check_corpus(cfg, &test)?;
            Ok(Corpus { train, test })
        }
        None => Ok(taskgen::build_corpus(&cfg.task)?),
    }
}

fn check_corpus(cfg: &ExperimentConfig, seqs: &[RepeatExample]) -> Result<(), Failure> {
    let bad = seqs
        .iter()
        .any(|s| s.len() > cfg.task.l_max || s.tokens.iter().any(|&t| t >= cfg.task.n_symbols));
    if bad {
        return Err(Failure::mismatch(format!(
            "corpus does not fit the task (n_symbols {}, l_max {})",
            cfg.task.n_symbols, cfg.task.l_max
        )));
    }
    Ok(())
}

/// Load a checkpoint and reconcile it with the resolved config.
fn load_model(
    path: &Path,
    args: &ConfigArgs,
    cfg: &mut ExperimentConfig,
    run: &mut RunDir,
) -> Result<(GruParams<f32>, CheckpointMeta), Failure> {
    if !path.exists() {
        return Err(Failure::missing(path));
    }
    run.add_input("model", path)?;
    let (params, meta) = load_checkpoint(path)?;
    if meta.n_symbols != cfg.task.n_symbols || meta.l_max != cfg.task.l_max {
        return Err(Failure::mismatch(format!(
            "checkpoint was trained with n_symbols {} / l_max {}, config has {} / {}",
            meta.n_symbols, meta.l_max, cfg.task.n_symbols, cfg.task.l_max
        )));
    }
    if args.hidden.is_some_and(|n| n != meta.hidden) {
        return Err(Failure::mismatch(format!(
            "checkpoint has N = {}, --n asks for {}",
            meta.hidden, cfg.train.hidden
        )));
    }
    if args.mode.is_some_and(|m| m != meta.mode) {
        return Err(Failure::mismatch(format!(
            "checkpoint decodes in `{}` mode, --mode asks for `{}`",
            meta.mode.tag(),
            cfg.train.mode.tag()
        )));
    }
    cfg.train.hidden = meta.hidden;
    cfg.train.mode = meta.mode;
    cfg.train.feedback = meta.feedback;
    Ok((params, meta))
}

fn finish(run: &RunDir, result: &RunResult, report: Option<&LoopReport>, t0: Instant) -> Result<(), Failure> {
    if let Some(r) = report {
        run.write_metrics(&r.metrics)?;
    }
    run.write_json(RESULT_FILE, result)?;
    run.write_timing(t0.elapsed().as_secs_f64())?;
    println!(
        "{} {} N={} {}: {} {}",
        result.command,
        result.objective,
        result.hidden,
        result.mode.map(|m| m.tag()).unwrap_or("-"),
        result.metric,
        result.score.map_or("n/a".to_owned(), |s| format!("{s:.4}"))
    );
    match &result.failure {
        Some(f) => Err(Failure::numeric(format!("training stopped early: {f}"))),
        None => Ok(()),
    }
}

fn loop_result(
    command: &str,
    objective: &str,
    cfg: &ExperimentConfig,
    seed: u64,
    report: &LoopReport,
    score: f64,
) -> RunResult {
    RunResult {
        command: command.into(),
        objective: objective.into(),
        hidden: cfg.train.hidden,
        mode: Some(cfg.train.mode),
        seed,
        metric: "exact-match".into(),
        score: Some(score),
        per_token: None,
        steps: report.steps_completed,
        first_step_99: report.first_step_reaching(0.99),
        failure: report.failure.clone(),
    }
}

pub fn gen_data(args: &ConfigArgs, out: &Path) -> Result<(), Failure> {
    let cfg = args.resolve(Target::Base)?;
    let t0 = Instant::now();
    let run = RunDir::create(out, "gen-data")?;
    let c = taskgen::build_corpus(&cfg.task)?;
    taskgen::write_corpus(&run.path(TRAIN_CORPUS), &c.train)?;
    taskgen::write_corpus(&run.path(TEST_CORPUS), &c.test)?;
    run.write_provenance(&cfg, cfg.task.seed)?;
    run.write_timing(t0.elapsed().as_secs_f64())?;
    println!("gen-data: {} train / {} test sequences", c.train.len(), c.test.len());
    Ok(())
}

pub fn train(args: &ConfigArgs, data: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let cfg = args.resolve(Target::Base)?;
    let t0 = Instant::now();
    let mut run = RunDir::create(out, "train")?;
    let c = corpus(&cfg, data, &mut run)?;
    run.write_provenance(&cfg, cfg.train.seed)?;
    let trained = train_gru(&cfg.task, &c.train, &c.test, &cfg.train, |_| {})?;
    let meta = CheckpointMeta::new(&cfg.task, &cfg.train, trained.report.steps_completed);
    save_checkpoint(&run.path(MODEL_FILE), &trained.params, &meta)?;
    let eval_set = &c.test[..cfg.train.eval_size.min(c.test.len())];
    let score = match trained.report.final_accuracy() {
        Some(a) => a,
        None => gru::exact_match(&trained.params, eval_set, cfg.train.mode)?,
    };
    let result = loop_result("train", "base", &cfg, cfg.train.seed, &trained.report, score);
    finish(&run, &result, Some(&trained.report), t0)
}

pub fn eval(args: &ConfigArgs, model: &Path, data: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let mut cfg = args.resolve(Target::Base)?;
    let t0 = Instant::now();
    let mut run = RunDir::create(out, "eval")?;
    let (params, meta) = load_model(model, args, &mut cfg, &mut run)?;
    let c = corpus(&cfg, data, &mut run)?;
    run.write_provenance(&cfg, meta.seed)?;
    let score = gru::exact_match(&params, &c.test, meta.mode)?;
    let result = RunResult {
        command: "eval".into(),
        objective: "base".into(),
        hidden: meta.hidden,
        mode: Some(meta.mode),
        seed: meta.seed,
        metric: "exact-match".into(),
        score: Some(score),
        per_token: None,
        steps: meta.step,
        first_step_99: None,
        failure: None,
    };
    finish(&run, &result, None, t0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum InterventionKind {
    Unigram,
    Bigram,
    Onion,
}

pub fn intervene(
    args: &ConfigArgs,
    kind: InterventionKind,
    control: bool,
    model: &Path,
    data: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let mut cfg = args.resolve(Target::Aux)?;
    let t0 = Instant::now();
    let mut run = RunDir::create(out, "intervene")?;
    let (params, meta) = load_model(model, args, &mut cfg, &mut run)?;
    let c = corpus(&cfg, data, &mut run)?;
    run.write_provenance(&cfg, cfg.aux.seed)?;
    let extra = serde_json::json!({ "seed": cfg.aux.seed, "steps": cfg.aux.steps });
    let aux_path = run.path("intervention.aux");
    let (objective, report) = match kind {
        InterventionKind::Unigram | InterventionKind::Bigram => {
            if control {
                return Err(Failure::usage("--control only applies to the onion intervention"));
            }
            let (g, name) = match kind {
                InterventionKind::Unigram => (Granularity::Unigram, "unigram"),
                _ => (Granularity::Bigram, "bigram"),
            };
            let t = train_das(&params, meta.mode, g, cfg.task.l_max, &c.train, &c.test, &cfg.aux, |_| {})?;
            save_das(&aux_path, &t.params, extra)?;
            (name, t.report)
        }
        InterventionKind::Onion => {
            let (constraint, name) = if control {
                (OnionConstraint::FixedGammaBetaOne, "onion-control")
            } else {
                (OnionConstraint::Free, "onion")
            };
            let t = train_onion(&params, meta.mode, constraint, &c.train, &c.test, &cfg.aux, |_| {})?;
            save_onion(&aux_path, &t.params, constraint, extra)?;
            (name, t.report)
        }
    };
    let score = report.final_accuracy().unwrap_or(0.0);
    let result = loop_result("intervene", objective, &cfg, cfg.aux.seed, &report, score);
    finish(&run, &result, Some(&report), t0)
}

pub fn probe(
    args: &ConfigArgs,
    kind: ProbeKind,
    model: &Path,
    data: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let mut cfg = args.resolve(Target::Aux)?;
    let t0 = Instant::now();
    let mut run = RunDir::create(out, "probe")?;
    let (params, _) = load_model(model, args, &mut cfg, &mut run)?;
    let c = corpus(&cfg, data, &mut run)?;
    run.write_provenance(&cfg, cfg.aux.seed)?;
    let t = train_probe(kind, &params, cfg.task.l_max, &c.train, &c.test, &cfg.aux, |_| {})?;
    let extra = serde_json::json!({ "seed": cfg.aux.seed, "steps": cfg.aux.steps });
    save_probe(&run.path("probe.aux"), &t.probe, cfg.task.l_max, extra)?;
    let eval_set = &c.test[..cfg.aux.eval_size.min(c.test.len())];
    let acc = onion_core::probes::eval_probe(&params, &t.probe, eval_set)?;
    let mut result = loop_result("probe", kind.tag(), &cfg, cfg.aux.seed, &t.report, acc.exact);
    result.per_token = Some(acc.per_token);
    finish(&run, &result, Some(&t.report), t0)
}

/// Number of test sequences pooled for the gate statistic.
pub const GATE_SEQUENCES: usize = 100;

pub fn gates(
    args: &ConfigArgs,
    model: &Path,
    input: Option<&str>,
    cell: usize,
    data: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let mut cfg = args.resolve(Target::Base)?;
    let t0 = Instant::now();
    let mut run = RunDir::create(out, "gates")?;
    let (params, meta) = load_model(model, args, &mut cfg, &mut run)?;
    if cell == 0 {
        return Err(Failure::usage("--cell must be positive"));
    }
    let traces: Vec<GateTrace> = match input {
        Some(text) => {
            let tokens = parse_tokens(text, cfg.task.n_symbols, cfg.task.l_max)?;
            run.write_provenance(&cfg, meta.seed)?;
            vec![gru::encode(&params, &tokens)?.1]
        }
        None => {
            let c = corpus(&cfg, data, &mut run)?;
            run.write_provenance(&cfg, meta.seed)?;
            c.test
                .iter()
                .take(GATE_SEQUENCES)
                .map(|e| gru::encode(&params, &e.tokens).map(|(_, t)| t))
                .collect::<Result<_, _>>()?
        }
    };
    let shown = traces
        .iter()
        .max_by_key(|t| t.steps())
        .expect("at least one trace");
    gates::export_heatmap(shown, out, "gates", cell)?;
    let profile = gates::mean_input_profile(&traces);
    let profile_csv: String = profile.iter().map(|v| format!("{v}\n")).collect();
    run.write("profile.csv", profile_csv.as_bytes())?;
    let score = gates::monotone_fraction(&traces);
    let result = RunResult {
        command: "gates".into(),
        objective: "gates".into(),
        hidden: meta.hidden,
        mode: Some(meta.mode),
        seed: meta.seed,
        metric: "monotone-fraction".into(),
        score,
        per_token: None,
        steps: meta.step,
        first_step_99: None,
        failure: None,
    };
    finish(&run, &result, None, t0)
}

fn parse_tokens(text: &str, n_symbols: usize, l_max: usize) -> Result<Vec<usize>, Failure> {
    let tokens: Vec<usize> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::usage(format!("--input: {e}")))?;
    if tokens.iter().any(|&t| t >= n_symbols) {
        return Err(Failure::usage(format!("--input tokens must be below {n_symbols}")));
    }
    if tokens.len() > l_max {
        return Err(Failure::usage(format!("--input is longer than l_max = {l_max}")));
    }
    Ok(tokens)
}

pub fn toy(args: &ConfigArgs, data: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let cfg = args.resolve(Target::Aux)?;
    let t0 = Instant::now();
    let mut run = RunDir::create(out, "toy")?;
    let c = corpus(&cfg, data, &mut run)?;
    run.write_provenance(&cfg, cfg.aux.seed)?;
    let t = toy_train(cfg.train.hidden, cfg.task.n_symbols, &c.train, &c.test, &cfg.aux, |_| {})?;
    let extra = serde_json::json!({ "seed": cfg.aux.seed, "steps": cfg.aux.steps });
    save_toy(&run.path("toy.aux"), &t.params, extra)?;
    let score = t.report.final_accuracy().unwrap_or(0.0);
    let mut result = loop_result("toy", "toy", &cfg, cfg.aux.seed, &t.report, score);
    result.mode = None;
    finish(&run, &result, Some(&t.report), t0)
}

/// All `result.json` files below `root`, in path order.
pub fn collect_results(root: &Path) -> Result<Vec<(PathBuf, RunResult)>, Failure> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Failure::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Failure::io(&dir, e))?;
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == RESULT_FILE) {
                let text = std::fs::read_to_string(&p).map_err(|e| Failure::io(&p, e))?;
                let r: RunResult = serde_json::from_str(&text)
                    .map_err(|e| Failure::new("format", crate::failure::EXIT_OTHER, format!("{}: {e}", p.display())))?;
                found.push((p, r));
            }
        }
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(found)
}

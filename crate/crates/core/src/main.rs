//! Command-line pipeline: synthetic data generation, tokenization dumps,
//! training, adversarial scenario generation, evaluation, and SVG plotting.
//!
//! Exit codes: 0 success, 2 usage, 3 IO, 4 training divergence,
//! 5 checkpoint mismatch, 6 evaluation pairing.

use advgen::adversary::{generate_batch, GenerationMode};
use advgen::geometry::box_overlap;
use advgen::kinematics::{tokenize_track, Direction, TokenSpace};
use advgen::metrics::{evaluate, MetricsError};
use advgen::model::{
    grad_check, load_model, save_model, train, ModelConfig, ModelError,
};
use advgen::plot::render_svg;
use advgen::scenario::{load_scenario, synth_scenarios, Scenario};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;
const EXIT_CHECKPOINT: u8 = 5;
const EXIT_PAIRING: u8 = 6;

#[derive(Parser)]
#[command(name = "advgen", version, about = "Adversarial traffic scenario pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic scenario corpus.
    Synth {
        /// Number of scenarios to generate (must be >= 1).
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump motion tokens for every agent of a scenario as JSONL.
    Tokenize {
        #[arg(long)]
        scenario: PathBuf,
        /// Output JSONL path; one line per agent per direction.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the motion model on a scenario directory.
    Train {
        /// Directory of scenario JSON files.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
        /// JSON run configuration; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Stop early once the loss drops below this value.
        #[arg(long)]
        stop_loss: Option<f64>,
        /// Verify gradients on a reduced model before training.
        #[arg(long)]
        grad_check: bool,
    },
    /// Add adversarial agents to scenarios using a trained model.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scenario JSON file or directory of scenario files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Independent generations per scenario.
        #[arg(long)]
        num_modes: Option<usize>,
        /// replay, closed_loop_reverse, or forward_refine.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        max_resamples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Accepted for interface stability; processing is sequential.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare a generated corpus against ground truth and write a report.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Accepted for interface stability; processing is sequential.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Render a scenario as a bird's-eye SVG.
    Plot {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Full run configuration: model settings plus generation parameters.
/// Serializes with a stable field order so the canonical echo is
/// byte-identical across runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    num_modes: usize,
    mode: String,
    max_resamples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            num_modes: 6,
            mode: "replay".into(),
            max_resamples: 20,
        }
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn parse_mode(name: &str) -> Result<GenerationMode, CliError> {
    match name {
        "replay" => Ok(GenerationMode::Replay),
        "closed_loop_reverse" => Ok(GenerationMode::ClosedLoopReverse),
        "forward_refine" => Ok(GenerationMode::ForwardRefine),
        other => Err(CliError::usage(format!(
            "unknown mode {other:?} (expected replay, closed_loop_reverse, or forward_refine)"
        ))),
    }
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: message.into() }
    }
    fn io(message: impl Into<String>) -> Self {
        CliError { code: EXIT_IO, message: message.into() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match &e {
            ModelError::Divergence(_) => EXIT_DIVERGENCE,
            ModelError::Checkpoint(_) => EXIT_CHECKPOINT,
            ModelError::Io(_) => EXIT_IO,
            _ => 1,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let code = match &e {
            MetricsError::MissingPair(_) => EXIT_PAIRING,
            MetricsError::Io(_) | MetricsError::Scenario(_) => EXIT_IO,
            _ => 1,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<advgen::scenario::ScenarioError> for CliError {
    fn from(e: advgen::scenario::ScenarioError) -> Self {
        CliError::io(e.to_string())
    }
}

/// Write via a temporary file in the same directory, then rename, so readers
/// never observe a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp.partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

fn scenario_files(data: &Path) -> Result<Vec<PathBuf>, CliError> {
    if data.is_file() {
        return Ok(vec![data.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(data)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", data.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n != "manifest.json" && !n.ends_with(".spec.json"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::usage(format!("no scenario files in {}", data.display())));
    }
    Ok(files)
}

fn load_corpus(data: &Path) -> Result<Vec<Scenario>, CliError> {
    scenario_files(data)?
        .iter()
        .map(|p| load_scenario(p).map_err(CliError::from))
        .collect()
}

fn cmd_synth(num: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    if num == 0 {
        return Err(CliError::usage("--num must be at least 1"));
    }
    std::fs::create_dir_all(out)?;
    let scenarios = synth_scenarios(num, seed).map_err(|e| CliError::io(e.to_string()))?;
    let mut files = Vec::with_capacity(scenarios.len());
    for s in &scenarios {
        let name = format!("{}.json", s.scenario_id);
        let bytes = serde_json::to_vec_pretty(s).expect("serializable scenario");
        write_atomic(&out.join(&name), &bytes)?;
        files.push(name);
    }
    let manifest = serde_json::json!({ "seed": seed, "files": files });
    write_atomic(&out.join("manifest.json"), &serde_json::to_vec_pretty(&manifest).unwrap())?;
    println!("wrote {} scenarios to {}", scenarios.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct TokenLine<'a> {
    agent_id: &'a str,
    direction: &'a str,
    tokens: Vec<usize>,
    contour_errors: Vec<f64>,
}

fn cmd_tokenize(scenario: &Path, out: &Path) -> Result<(), CliError> {
    let s = load_scenario(scenario)?;
    let ts = TokenSpace::default();
    let mut lines = String::new();
    for track in &s.agents {
        for (dir, name) in [(Direction::Forward, "forward"), (Direction::Reverse, "reverse")] {
            let Ok(tokens) = tokenize_track(track, dir, &ts) else { continue };
            let line = TokenLine {
                agent_id: &track.id,
                direction: name,
                tokens: tokens.iter().map(|(z, _)| z.id).collect(),
                contour_errors: tokens.iter().map(|&(_, e)| e).collect(),
            };
            lines.push_str(&serde_json::to_string(&line).unwrap());
            lines.push('\n');
        }
    }
    write_atomic(out, lines.as_bytes())?;
    println!("wrote token dump to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    train_steps: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    stop_loss: Option<f64>,
    do_grad_check: bool,
) -> Result<(), CliError> {
    let mut rc = load_run_config(config)?;
    if let Some(v) = seed {
        rc.model.seed = v;
    }
    if let Some(v) = train_steps {
        rc.model.train_steps = v;
    }
    if let Some(v) = batch_size {
        rc.model.batch_size = v;
    }
    if let Some(v) = learning_rate {
        rc.model.learning_rate = v;
    }
    if let Some(v) = stop_loss {
        rc.model.stop_loss = Some(v);
    }
    println!("config: {}", serde_json::to_string(&rc).unwrap());

    if do_grad_check {
        let report = grad_check(&ModelConfig::tiny(rc.model.seed), 1e-4, 200)?;
        println!(
            "gradient check passed: {} parameters, max relative error {:.3e}",
            report.checked, report.max_rel_err
        );
    }

    let corpus = load_corpus(data)?;
    let (model, records) = train(&corpus, &rc.model)?;

    std::fs::create_dir_all(out)?;
    save_model(&model, &out.join("model.ckpt"))?;
    let mut log = String::from("step,loss,accuracy_fwd,accuracy_rev,perplexity,clusters\n");
    for r in &records {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        log.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.loss,
            opt(r.accuracy_fwd),
            opt(r.accuracy_rev),
            r.perplexity,
            r.clusters
        ));
    }
    write_atomic(&out.join("training_log.csv"), log.as_bytes())?;
    let last = records.last().expect("at least one record");
    println!(
        "final loss {:.4} nats/token, perplexity {:.2}, {} logged steps",
        last.loss,
        last.perplexity,
        records.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    num_modes: Option<usize>,
    mode: Option<&str>,
    max_resamples: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut rc = load_run_config(config)?;
    if let Some(v) = num_modes {
        rc.num_modes = v;
    }
    if let Some(v) = mode {
        rc.mode = v.to_string();
    }
    if let Some(v) = max_resamples {
        rc.max_resamples = v;
    }
    if let Some(v) = seed {
        rc.model.seed = v;
    }
    if rc.num_modes == 0 {
        return Err(CliError::usage("--num-modes must be at least 1"));
    }
    let gen_mode = parse_mode(&rc.mode)?;
    println!("config: {}", serde_json::to_string(&rc).unwrap());

    let model = load_model(checkpoint)?;
    let corpus = load_corpus(data)?;
    std::fs::create_dir_all(out)?;

    let mut total = 0usize;
    let mut accepted = 0usize;
    let mut attacks = 0usize;
    for s in &corpus {
        let results =
            generate_batch(s, rc.num_modes, gen_mode, &model, rc.model.seed, rc.max_resamples)?;
        for (k, r) in results.iter().enumerate() {
            let mut augmented = r.scenario.clone();
            augmented.scenario_id = format!("{}#{k}", s.scenario_id);
            let stem = format!("{}_{k}", s.scenario_id);
            write_atomic(
                &out.join(format!("{stem}.json")),
                &serde_json::to_vec_pretty(&augmented).unwrap(),
            )?;
            write_atomic(
                &out.join(format!("{stem}.spec.json")),
                &serde_json::to_vec_pretty(&serde_json::json!({
                    "spec": r.spec,
                    "mode": r.mode,
                    "accepted": r.accepted,
                    "rejection_reason": r.rejection_reason,
                }))
                .unwrap(),
            )?;
            total += 1;
            accepted += r.accepted as usize;
            let adv = r.scenario.agents.last().expect("adversary track");
            let ego = r.scenario.ego();
            if let (Some(a), Some(e)) = (adv.box_at(r.spec.t_c), ego.box_at(r.spec.t_c)) {
                attacks += box_overlap(&a, &e) as usize;
            }
        }
    }
    println!(
        "generated {total} scenarios: accept rate {:.3}, attack success {:.3}",
        accepted as f64 / total as f64,
        attacks as f64 / total as f64
    );
    Ok(())
}

fn cmd_evaluate(pred: &Path, gt: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let report = evaluate(pred, gt, seed)?;
    write_atomic(out, report.to_csv().as_bytes())?;
    println!("{}", advgen::metrics::EvalReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

fn cmd_plot(scenario: &Path, out: &Path) -> Result<(), CliError> {
    let s = load_scenario(scenario)?;
    write_atomic(out, render_svg(&s).as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Synth { num, seed, out } => cmd_synth(num, seed, &out),
        Cmd::Tokenize { scenario, out } => cmd_tokenize(&scenario, &out),
        Cmd::Train {
            data,
            out,
            config,
            seed,
            train_steps,
            batch_size,
            learning_rate,
            stop_loss,
            grad_check,
        } => cmd_train(
            &data,
            &out,
            config.as_deref(),
            seed,
            train_steps,
            batch_size,
            learning_rate,
            stop_loss,
            grad_check,
        ),
        Cmd::Generate {
            checkpoint,
            data,
            out,
            config,
            num_modes,
            mode,
            max_resamples,
            seed,
            jobs: _,
        } => cmd_generate(
            &checkpoint,
            &data,
            &out,
            config.as_deref(),
            num_modes,
            mode.as_deref(),
            max_resamples,
            seed,
        ),
        Cmd::Evaluate { pred, gt, out, seed, jobs: _ } => cmd_evaluate(&pred, &gt, &out, seed),
        Cmd::Plot { scenario, out } => cmd_plot(&scenario, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

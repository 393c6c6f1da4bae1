//! Command-line front end for the adaptive-entropy policy optimization lab.
//!
//! One JSON config file carries sections `task`, `model`, `sampling`,
//! `reward`, `clip`, and `train`; every field has a default except
//! `train.seed` and `train.total_steps`. Flags are pure overrides applied
//! on top of the file (`--set section.key=value` for anything, plus
//! dedicated flags for the common ones), so a run is fully described by
//! the resolved config, and `--print-config` emits exactly that JSON.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use aepo_core::metrics::{compare_report, echo_scores_for_correct_rollouts, export_curves, AlgoRun, DEFAULT_NGRAM};
use aepo_core::policy::checkpoint::{load_params, save_params};
use aepo_core::policy::init_params;
use aepo_core::seeds;
use aepo_core::tasks::{dataset_hash, generate_dataset, write_dataset};
use aepo_core::trainer::{evaluate, read_runlog, sft_warmup, train, TrainSettings};
use aepo_core::{
    Algorithm, ClipConfig, ModelConfig, RewardConfig, SamplingConfig, TaskSpec, TrainConfig,
};

#[derive(Parser)]
#[command(name = "aepo", version, about = "Desk-scale RL lab for entropy-shaped policy optimization")]
struct Cli {
    /// Intra-step worker threads; never changes results, only wall time.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic lookup datasets and write them as JSONL.
    GenTasks {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for train.jsonl and eval.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Behavior-clone the four-stage format into a fresh policy.
    Warmup {
        #[command(flatten)]
        config: ConfigArgs,
        /// Supervised steps before the parse probe.
        #[arg(long, default_value_t = 300)]
        steps: usize,
        /// Checkpoint path for the warmed parameters.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the RL loop and write a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory (config.json, runlog.jsonl, checkpoints/, report.json).
        #[arg(long)]
        out: PathBuf,
        /// Warmed checkpoint to start from; omitted means init + warm up here.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Supervised warm-up steps when --init is not given.
        #[arg(long, default_value_t = 1000)]
        sft_steps: usize,
    },
    /// Greedy-decode accuracy of a checkpoint on the eval split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Aggregate run directories into a comparison report.
    Compare {
        /// Run directories produced by `train`.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Report output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export CSV and SVG training curves from run directories.
    ExportCurves {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Output directory for curves.csv and curves.svg.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; omitted sections take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. --set train.lr=1e-3; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed; overrides train.seed (and task.seed unless set explicitly).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    total_steps: Option<usize>,
    /// Print the fully resolved config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenTasks { config, out } => gen_tasks(&config, &out),
        Cmd::Warmup { config, steps, out } => warmup_cmd(&config, steps, &out),
        Cmd::Train {
            config,
            out,
            init,
            sft_steps,
        } => train_cmd(&config, &out, init.as_deref(), sft_steps),
        Cmd::Eval { config, checkpoint } => eval_cmd(&config, &checkpoint),
        Cmd::Compare { runs, out } => compare_cmd(&runs, &out),
        Cmd::ExportCurves { runs, out } => export_curves_cmd(&runs, &out),
    }
}

/// The typed view of one config file after overrides. The `train` section
/// stays partial here because only training commands require its two
/// mandatory fields.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    task: TaskSpec,
    model: ModelConfig,
    sampling: SamplingConfig,
    reward: RewardConfig,
    clip: ClipConfig,
    train: TrainSection,
}

/// `TrainConfig` with every field optional, so config files may omit any
/// of them and flags can fill the rest.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    algorithm: Option<Algorithm>,
    prompts_per_step: Option<usize>,
    group_size: Option<usize>,
    lr: Option<f64>,
    warmup_steps: Option<usize>,
    total_steps: Option<usize>,
    seed: Option<u64>,
    eval_every: Option<usize>,
    rif_on: Option<bool>,
    ae_on: Option<bool>,
    gae_on: Option<bool>,
}

impl TrainSection {
    /// Completes the section into a full `TrainConfig`, erroring with the
    /// key path of anything missing.
    fn resolve(&self) -> Result<TrainConfig, CliError> {
        let total_steps = self
            .total_steps
            .ok_or_else(|| usage("missing required key train.total_steps (or --total-steps)"))?;
        let seed = self
            .seed
            .ok_or_else(|| usage("missing required key train.seed (or --seed)"))?;
        Ok(TrainConfig {
            algorithm: self.algorithm.unwrap_or(Algorithm::Aepo),
            prompts_per_step: self.prompts_per_step.unwrap_or(16),
            group_size: self.group_size.unwrap_or(5),
            lr: self.lr.unwrap_or(3e-4),
            warmup_steps: self.warmup_steps.unwrap_or(10),
            total_steps,
            seed,
            eval_every: self.eval_every.unwrap_or(50),
            rif_on: self.rif_on.unwrap_or(true),
            ae_on: self.ae_on.unwrap_or(true),
            gae_on: self.gae_on.unwrap_or(true),
        })
    }
}

struct Resolved {
    config: FileConfig,
}

impl Resolved {
    fn settings(&self) -> Result<TrainSettings, CliError> {
        Ok(TrainSettings {
            train: self.config.train.resolve()?,
            sampling: self.config.sampling.clone(),
            reward: self.config.reward.clone(),
            clip: self.config.clip,
        })
    }

    /// Model config with the vocabulary sized to the task. An explicit
    /// larger vocab_size is kept; a too-small one is an error downstream.
    fn model(&self) -> ModelConfig {
        let mut model = self.config.model.clone();
        let needed = self.config.task.vocab().size();
        if model.vocab_size < needed {
            model.vocab_size = needed;
        }
        model
    }

    /// Canonical JSON for --print-config and the run directory; feeding it
    /// back through --config reproduces the identical run.
    fn canonical_json(&self) -> Value {
        let train: Value = match self.config.train.resolve() {
            Ok(full) => serde_json::to_value(&full).expect("train serializes"),
            Err(_) => serde_json::to_value(&self.config.train).expect("train serializes"),
        };
        serde_json::json!({
            "task": self.config.task,
            "model": self.model(),
            "sampling": self.config.sampling,
            "reward": self.config.reward,
            "clip": self.config.clip,
            "train": train,
        })
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<Resolved, CliError> {
    let mut tree: Value = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("{} is not valid JSON: {e}", path.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !tree.is_object() {
        return Err(usage("config root must be a JSON object"));
    }
    for spec in &args.sets {
        apply_set(&mut tree, spec)?;
    }
    if let Some(seed) = args.seed {
        set_path(&mut tree, &["train", "seed"], seed.into());
    }
    if let Some(algorithm) = args.algorithm {
        set_path(
            &mut tree,
            &["train", "algorithm"],
            Value::String(algorithm.to_string()),
        );
    }
    if let Some(steps) = args.total_steps {
        set_path(&mut tree, &["train", "total_steps"], steps.into());
    }
    // One master seed: the dataset inherits train.seed unless task.seed
    // was given explicitly.
    let task_seed_absent = tree
        .get("task")
        .and_then(|t| t.get("seed"))
        .is_none();
    if task_seed_absent {
        if let Some(seed) = tree.get("train").and_then(|t| t.get("seed")).cloned() {
            set_path(&mut tree, &["task", "seed"], seed);
        }
    }

    let deserializer = tree.clone();
    let config: FileConfig = serde_path_to_error::deserialize(deserializer)
        .map_err(|e| usage(format!("config key {}: {}", e.path(), e.inner())))?;
    Ok(Resolved { config })
}

fn apply_set(tree: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("--set {spec:?} is not KEY=VALUE")))?;
    if path.is_empty() {
        return Err(usage("--set key must be non-empty"));
    }
    let value: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let parts: Vec<&str> = path.split('.').collect();
    set_path(tree, &parts, value);
    Ok(())
}

fn set_path(tree: &mut Value, parts: &[&str], value: Value) {
    let mut cursor = tree;
    for part in &parts[..parts.len() - 1] {
        let map = cursor.as_object_mut().expect("config root stays an object");
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if !cursor.is_object() {
            *cursor = Value::Object(Default::default());
        }
    }
    cursor
        .as_object_mut()
        .expect("parents created as objects")
        .insert(parts[parts.len() - 1].to_string(), value);
}

/// Shared preamble: resolve, honor --print-config.
fn resolved_or_printed(args: &ConfigArgs) -> Result<Option<Resolved>, CliError> {
    let resolved = resolve_config(args)?;
    if args.print_config {
        let text =
            serde_json::to_string_pretty(&resolved.canonical_json()).expect("config serializes");
        println!("{text}");
        return Ok(None);
    }
    Ok(Some(resolved))
}

fn gen_tasks(args: &ConfigArgs, out: &Path) -> Result<(), CliError> {
    let Some(resolved) = resolved_or_printed(args)? else {
        return Ok(());
    };
    let (train_set, eval_set) = generate_dataset(&resolved.config.task)?;
    fs::create_dir_all(out)?;
    write_dataset(&out.join("train.jsonl"), &train_set)?;
    write_dataset(&out.join("eval.jsonl"), &eval_set)?;
    println!(
        "{}",
        serde_json::json!({
            "train": train_set.len(),
            "eval": eval_set.len(),
            "dataset_hash": dataset_hash(&train_set, &eval_set),
        })
    );
    Ok(())
}

fn warmup_cmd(args: &ConfigArgs, steps: usize, out: &Path) -> Result<(), CliError> {
    let Some(resolved) = resolved_or_printed(args)? else {
        return Ok(());
    };
    let settings = resolved.settings()?;
    let vocab = resolved.config.task.vocab();
    let (train_set, _) = generate_dataset(&resolved.config.task)?;
    let seed = settings.train.seed;
    let fresh = init_params(&resolved.model(), seeds::derive(seed, "init"))?;
    let warmed = sft_warmup(&fresh, &train_set, &vocab, steps, seed)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_params(out, &warmed)?;
    println!(
        "{}",
        serde_json::json!({ "checkpoint": out.display().to_string(), "sft_steps": steps })
    );
    Ok(())
}

fn train_cmd(
    args: &ConfigArgs,
    out: &Path,
    init: Option<&Path>,
    sft_steps: usize,
) -> Result<(), CliError> {
    let Some(resolved) = resolved_or_printed(args)? else {
        return Ok(());
    };
    let settings = resolved.settings()?;
    let vocab = resolved.config.task.vocab();
    let (train_set, eval_set) = generate_dataset(&resolved.config.task)?;
    let seed = settings.train.seed;

    let start = match init {
        Some(path) => load_params(path)?,
        None => {
            let fresh = init_params(&resolved.model(), seeds::derive(seed, "init"))?;
            sft_warmup(&fresh, &train_set, &vocab, sft_steps, seed)?
        }
    };

    fs::create_dir_all(out)?;
    let config_text =
        serde_json::to_string_pretty(&resolved.canonical_json()).expect("config serializes");
    fs::write(out.join("config.json"), config_text + "\n")?;

    let outcome = train(start, &train_set, &eval_set, &vocab, &settings, Some(out))?;

    let final_acc = outcome.log.iter().rev().find_map(|r| r.eval_acc);
    let report = serde_json::json!({
        "algorithm": settings.train.algorithm.to_string(),
        "steps": outcome.log.len(),
        "final_acc": final_acc,
        "entropy_gap": aepo_core::metrics::entropy_gap_last_fraction(
            &outcome.log,
            settings.reward.h_star,
            0.1,
        ),
        "final_mean_reward": outcome.log.last().map(|r| r.mean_reward),
    });
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    println!("{report}");
    Ok(())
}

fn eval_cmd(args: &ConfigArgs, checkpoint: &Path) -> Result<(), CliError> {
    let Some(resolved) = resolved_or_printed(args)? else {
        return Ok(());
    };
    let params = load_params(checkpoint)?;
    let vocab = resolved.config.task.vocab();
    let (_, eval_set) = generate_dataset(&resolved.config.task)?;
    let accuracy = evaluate(&params, &eval_set, &vocab)?;
    println!(
        "{}",
        serde_json::json!({ "accuracy": accuracy, "n_eval": eval_set.len() })
    );
    Ok(())
}

/// Reads one run directory back: resolved config, run log, and the final
/// checkpoint.
struct LoadedRun {
    config: FileConfig,
    settings: TrainSettings,
    log: Vec<aepo_core::RunRecord>,
    final_checkpoint: PathBuf,
}

fn load_run(dir: &Path) -> Result<LoadedRun, CliError> {
    let config_text = fs::read_to_string(dir.join("config.json"))
        .map_err(|e| usage(format!("{} is not a run directory: {e}", dir.display())))?;
    let tree: Value = serde_json::from_str(&config_text)
        .map_err(|e| usage(format!("{}/config.json: {e}", dir.display())))?;
    let config: FileConfig = serde_path_to_error::deserialize(tree)
        .map_err(|e| usage(format!("{}/config.json key {}: {}", dir.display(), e.path(), e.inner())))?;
    let settings = TrainSettings {
        train: config.train.resolve()?,
        sampling: config.sampling.clone(),
        reward: config.reward.clone(),
        clip: config.clip,
    };
    let log = read_runlog(&dir.join("runlog.jsonl"))?;
    let mut checkpoints: Vec<PathBuf> = fs::read_dir(dir.join("checkpoints"))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |e| e == "bin"))
        .collect();
    checkpoints.sort();
    let final_checkpoint = checkpoints
        .pop()
        .ok_or_else(|| usage(format!("{} has no checkpoints", dir.display())))?;
    Ok(LoadedRun {
        config,
        settings,
        log,
        final_checkpoint,
    })
}

fn compare_cmd(run_dirs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut runs = Vec::new();
    let mut h_star = None;
    for dir in run_dirs {
        let loaded = load_run(dir)?;
        let params = load_params(&loaded.final_checkpoint)?;
        let vocab = loaded.config.task.vocab();
        let (train_set, eval_set) = generate_dataset(&loaded.config.task)?;
        // The regenerated data must be the data the run trained on.
        let manifest_text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Value = serde_json::from_str(&manifest_text)
            .map_err(|e| usage(format!("{}/manifest.json: {e}", dir.display())))?;
        let recorded = manifest.get("dataset_hash").and_then(|v| v.as_str());
        let regenerated = dataset_hash(&train_set, &eval_set);
        if recorded != Some(regenerated.as_str()) {
            return Err(CliError::Runtime(anyhow::anyhow!(
                "{}: dataset hash mismatch (manifest {:?}, regenerated {})",
                dir.display(),
                recorded,
                regenerated
            )));
        }
        let echo = echo_scores_for_correct_rollouts(
            &params,
            &eval_set,
            &vocab,
            &loaded.settings.effective_sampling(),
            seeds::derive(loaded.settings.train.seed, "echo"),
            DEFAULT_NGRAM,
        )?;
        let base_name = loaded.settings.train.algorithm.to_string();
        let name = unique_name(&runs, base_name);
        h_star.get_or_insert(loaded.settings.reward.h_star);
        runs.push(AlgoRun {
            name,
            log: loaded.log,
            echo,
        });
    }
    let report = compare_report(&runs, h_star.expect("at least one run"))?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out, text.clone() + "\n")?;
    println!("{text}");
    Ok(())
}

fn unique_name(existing: &[AlgoRun], base: String) -> String {
    if !existing.iter().any(|r| r.name == base) {
        return base;
    }
    let mut i = 2;
    loop {
        let candidate = format!("{base}_{i}");
        if !existing.iter().any(|r| r.name == candidate) {
            return candidate;
        }
        i += 1;
    }
}

fn export_curves_cmd(run_dirs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut runs = Vec::new();
    let mut h_star = None;
    for dir in run_dirs {
        let loaded = load_run(dir)?;
        let name = unique_name(&runs, loaded.settings.train.algorithm.to_string());
        h_star.get_or_insert(loaded.settings.reward.h_star);
        runs.push(AlgoRun::new(name, loaded.log));
    }
    let (csv, svg) = export_curves(&runs, out, h_star)?;
    println!(
        "{}",
        serde_json::json!({
            "csv": csv.display().to_string(),
            "svg": svg.display().to_string(),
        })
    );
    Ok(())
}

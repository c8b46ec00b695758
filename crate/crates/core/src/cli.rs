//! Command-line surface of the `denn` binary.
//!
//! Each subcommand reads its inputs, writes its artifacts under `--out` and
//! records a [`RunManifest`] named `<command>.manifest.json` next to them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::DennConfig;
use crate::dataset::{
    frequency_groups, generate_synthetic, groups_from_thresholds, label_frequencies, load_jsonl, save_jsonl, Dataset,
    LabelVec, Splits,
};
use crate::datastore::Datastore;
use crate::encoder::EncoderState;
use crate::error::{DennError, Result};
use crate::eval::{confusion, MetricsReport};
use crate::gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport};
use crate::inference::{
    predict_all, read_predictions, write_predictions, InferenceMode, PredictionRecord, PredictionsHeader,
};
use crate::math::seeded_rng;
use crate::pipeline::{ablate, ablation_table};
use crate::trainer::{write_history, Trainer, TrainerCheckpoint};

#[derive(Debug, Parser)]
#[command(name = "denn", version, about = "Contrastive encoder + kNN datastore multi-label classifier")]
pub struct Cli {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output file or directory (meaning depends on the command).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/valid/test splits (default out: data/).
    GenData,
    /// Train on <data>/train.jsonl, validating on <data>/valid.jsonl (default out: run/).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from a trainer checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Embed the training set into a datastore file (default out: store.bin).
    BuildStore {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        /// Use only this leading fraction of the training set.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Predict a dataset file (default out: predictions.jsonl).
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        mode: Option<InferenceMode>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Score predictions against gold labels; --out writes the JSON report.
    Eval {
        /// Predictions file, or a dataset file whose labels are taken as predictions.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Training file used for label frequencies (defaults to the gold file).
        #[arg(long)]
        train: Option<PathBuf>,
        /// Split labels into this many frequency groups.
        #[arg(long, conflicts_with = "thresholds")]
        groups: Option<usize>,
        /// Explicit descending frequency boundaries, e.g. 4500,1700,870.
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<usize>,
    },
    /// Inference modes, loss variants and k/gamma/store-size sweeps (default out: ablation.json).
    Ablate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the training gradient; exits 1 on failure.
    Gradcheck {
        /// Additional random small configurations to check.
        #[arg(long, default_value_t = 0)]
        random: usize,
    },
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: DennConfig,
    pub inputs: BTreeMap<String, PathBuf>,
    pub artifacts: BTreeMap<String, PathBuf>,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: u64,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

struct Run {
    manifest: RunManifest,
}

impl Run {
    fn new(command: &str, cli: &Cli, config: &DennConfig) -> Self {
        Run {
            manifest: RunManifest {
                command: command.to_string(),
                seed: cli.seed,
                config: config.clone(),
                inputs: BTreeMap::new(),
                artifacts: BTreeMap::new(),
                started_at: unix_now(),
                finished_at: 0,
            },
        }
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.manifest.inputs.insert(name.to_string(), path.to_path_buf());
    }

    fn artifact(&mut self, name: &str, path: &Path) {
        self.manifest.artifacts.insert(name.to_string(), path.to_path_buf());
    }

    fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.manifest.finished_at = unix_now();
        let path = dir.join(format!("{}.manifest.json", self.manifest.command));
        write_json(&path, &self.manifest)?;
        Ok(path)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| DennError::io(path, e.into()))?;
    fs::write(path, text + "\n").map_err(|e| DennError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| DennError::io(path, e))
}

fn parent_dir(path: &Path) -> Result<PathBuf> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    create_dir(&dir)?;
    Ok(dir)
}

pub fn load_config(cli: &Cli) -> Result<DennConfig> {
    let cfg = match &cli.config {
        Some(p) => DennConfig::load(p)?,
        None => DennConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Runs the parsed command and returns the process exit status.
pub fn run(cli: &Cli) -> Result<i32> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => gen_data(cli, &cfg),
        Command::Train { data, resume } => train_cmd(cli, &cfg, data, resume.as_deref()),
        Command::BuildStore { model, train, fraction } => build_store(cli, &cfg, model, train, *fraction),
        Command::Predict {
            model,
            store,
            test,
            mode,
            k,
            gamma,
        } => predict_cmd(cli, &cfg, model, store, test, *mode, *k, *gamma),
        Command::Eval {
            predictions,
            gold,
            train,
            groups,
            thresholds,
        } => eval_cmd(cli, &cfg, predictions, gold, train.as_deref(), *groups, thresholds),
        Command::Ablate { data } => ablate_cmd(cli, &cfg, data),
        Command::Gradcheck { random } => gradcheck_cmd(&cfg, *random),
    }
    .map(|()| 0)
    .or_else(|e| match e {
        CmdError::Failed => Ok(1),
        CmdError::Denn(e) => Err(e),
    })
}

enum CmdError {
    Denn(DennError),
    /// The command ran but its check did not pass.
    Failed,
}

impl From<DennError> for CmdError {
    fn from(e: DennError) -> Self {
        CmdError::Denn(e)
    }
}

type CmdResult = std::result::Result<(), CmdError>;

fn gen_data(cli: &Cli, cfg: &DennConfig) -> CmdResult {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    create_dir(&dir)?;
    let mut run = Run::new("gen-data", cli, cfg);
    let splits = generate_synthetic(&cfg.data)?;
    for (name, ds) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        let path = dir.join(format!("{name}.jsonl"));
        save_jsonl(ds, &path)?;
        run.artifact(name, &path);
        println!("{name}: {} samples -> {}", ds.len(), path.display());
    }
    run.finish(&dir)?;
    Ok(())
}

fn load_splits(dir: &Path) -> Result<Splits> {
    let load = |name: &str| load_jsonl(&dir.join(format!("{name}.jsonl")));
    let splits = Splits {
        train: load("train")?,
        valid: load("valid")?,
        test: load("test")?,
    };
    for ds in [&splits.valid, &splits.test] {
        check_headers(&splits.train, ds)?;
    }
    Ok(splits)
}

fn check_headers(a: &Dataset, b: &Dataset) -> Result<()> {
    if a.num_classes != b.num_classes || a.vocab_size != b.vocab_size {
        return Err(DennError::dims(format!(
            "dataset headers differ: ({}, {}) vs ({}, {})",
            a.num_classes, a.vocab_size, b.num_classes, b.vocab_size
        )));
    }
    Ok(())
}

fn train_cmd(cli: &Cli, cfg: &DennConfig, data: &Path, resume: Option<&Path>) -> CmdResult {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    create_dir(&dir)?;
    let mut run = Run::new("train", cli, cfg);
    let train_path = data.join("train.jsonl");
    let valid_path = data.join("valid.jsonl");
    let train = load_jsonl(&train_path)?;
    let valid = load_jsonl(&valid_path)?;
    check_headers(&train, &valid)?;
    run.input("train", &train_path);
    run.input("valid", &valid_path);

    let mut trainer = match resume {
        Some(p) => {
            run.input("resume", p);
            Trainer::resume(TrainerCheckpoint::load(p)?, &train, &valid.samples)?
        }
        None => Trainer::new(cfg.train.clone(), &train, &valid.samples)?,
    };
    let history = trainer.run()?;

    let model_path = dir.join("model.json");
    let trainer_path = dir.join("trainer.json");
    let history_path = dir.join("history.jsonl");
    trainer.best_state().save(&model_path)?;
    trainer.checkpoint().save(&trainer_path)?;
    write_history(&history, &history_path)?;
    run.artifact("model", &model_path);
    run.artifact("trainer_checkpoint", &trainer_path);
    run.artifact("history", &history_path);
    run.finish(&dir)?;

    if let Some(last) = history.last() {
        println!(
            "iterations: {}  last loss: bce {:.4} con {:.4} total {:.4}",
            trainer.iteration(),
            last.bce,
            last.con,
            last.total
        );
    }
    match trainer.best() {
        Some(b) => println!("best valid micro-F1 {:.4} at iteration {}", b.valid_micro_f1, b.iteration),
        None => println!("no validation run; keeping the last state"),
    }
    println!("model -> {}", model_path.display());
    Ok(())
}

fn check_model_data(state: &EncoderState, ds: &Dataset) -> Result<()> {
    if state.dims.num_classes != ds.num_classes || state.dims.vocab_size != ds.vocab_size {
        return Err(DennError::dims(format!(
            "model expects (classes {}, vocab {}), data has ({}, {})",
            state.dims.num_classes, state.dims.vocab_size, ds.num_classes, ds.vocab_size
        )));
    }
    Ok(())
}

fn build_store(cli: &Cli, cfg: &DennConfig, model: &Path, train: &Path, fraction: Option<f64>) -> CmdResult {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("store.bin"));
    let dir = parent_dir(&out)?;
    let mut run = Run::new("build-store", cli, cfg);
    let state = EncoderState::load(model)?;
    let ds = load_jsonl(train)?;
    check_model_data(&state, &ds)?;
    run.input("model", model);
    run.input("train", train);
    let store = match fraction {
        Some(f) => Datastore::build_fraction(&state, &ds.samples, f)?,
        None => Datastore::build(&state, &ds.samples)?,
    };
    store.save(&out)?;
    run.artifact("datastore", &out);
    run.finish(&dir)?;
    let bytes = fs::metadata(&out).map_err(|e| DennError::io(&out, e))?.len();
    println!(
        "datastore: {} entries, dim {}, {} classes, {bytes} bytes -> {}",
        store.len(),
        store.dim(),
        store.num_classes(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn predict_cmd(
    cli: &Cli,
    cfg: &DennConfig,
    model: &Path,
    store_path: &Path,
    test: &Path,
    mode: Option<InferenceMode>,
    k: Option<usize>,
    gamma: Option<f64>,
) -> CmdResult {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("predictions.jsonl"));
    let dir = parent_dir(&out)?;
    let mut inf = cfg.inference.clone();
    inf.mode = mode.unwrap_or(inf.mode);
    inf.k = k.unwrap_or(inf.k);
    inf.gamma = gamma.unwrap_or(inf.gamma);
    inf.validate()?;
    let mut manifest_cfg = cfg.clone();
    manifest_cfg.inference = inf.clone();
    let mut run = Run::new("predict", cli, &manifest_cfg);

    let state = EncoderState::load(model)?;
    let store = Datastore::load(store_path)?;
    let ds = load_jsonl(test)?;
    check_model_data(&state, &ds)?;
    run.input("model", model);
    run.input("datastore", store_path);
    run.input("test", test);

    let bundles = predict_all(&state, &store, &ds.samples, &inf)?;
    let records: Vec<PredictionRecord> = ds
        .samples
        .iter()
        .zip(&bundles)
        .map(|(s, b)| PredictionRecord::new(&s.id, b, inf.decision_threshold))
        .collect();
    write_predictions(&out, &PredictionsHeader::new(ds.num_classes, &inf), &records)?;
    run.artifact("predictions", &out);
    run.finish(&dir)?;
    let mean_lambda = bundles.iter().map(|b| b.lambda).sum::<f64>() / bundles.len().max(1) as f64;
    println!(
        "{} predictions ({} mode, k {}, mean lambda {mean_lambda:.4}) -> {}",
        records.len(),
        inf.mode,
        inf.k,
        out.display()
    );
    Ok(())
}

/// Predicted label sets and ids from a predictions file or a dataset file.
fn load_predicted(path: &Path) -> Result<(usize, Vec<(String, LabelVec)>)> {
    let first = fs::read_to_string(path)
        .map_err(|e| DennError::io(path, e))?
        .lines()
        .find(|l| !l.trim().is_empty())
        .map(str::to_string)
        .unwrap_or_default();
    let is_dataset = serde_json::from_str::<serde_json::Value>(&first)
        .ok()
        .and_then(|v| v.get("vocab_size").cloned())
        .is_some();
    if is_dataset {
        let ds = load_jsonl(path)?;
        let rows = ds.samples.into_iter().map(|s| (s.id, s.labels)).collect();
        return Ok((ds.num_classes, rows));
    }
    let (h, records) = read_predictions(path)?;
    let rows = records
        .into_iter()
        .map(|r| Ok((r.id, LabelVec::from_indices(h.num_classes, &r.labels)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((h.num_classes, rows))
}

fn eval_cmd(
    cli: &Cli,
    cfg: &DennConfig,
    predictions: &Path,
    gold_path: &Path,
    train: Option<&Path>,
    num_groups: Option<usize>,
    thresholds: &[usize],
) -> CmdResult {
    let mut run = Run::new("eval", cli, cfg);
    let (c, predicted) = load_predicted(predictions)?;
    let gold = load_jsonl(gold_path)?;
    run.input("predictions", predictions);
    run.input("gold", gold_path);
    if c != gold.num_classes || predicted.len() != gold.len() {
        return Err(DennError::dims(format!(
            "{} predictions over {c} classes vs {} gold samples over {} classes",
            predicted.len(),
            gold.len(),
            gold.num_classes
        ))
        .into());
    }
    if let Some((i, ((id, _), s))) = predicted
        .iter()
        .zip(&gold.samples)
        .enumerate()
        .find(|(_, ((id, _), s))| *id != s.id)
    {
        return Err(DennError::invalid(format!(
            "record {} has id {id:?}, gold has {:?}",
            i + 1,
            s.id
        ))
        .into());
    }

    let groups = if num_groups.is_some() || !thresholds.is_empty() {
        let freq_source = match train {
            Some(p) => {
                run.input("train", p);
                load_jsonl(p)?
            }
            None => gold.clone(),
        };
        if freq_source.num_classes != c {
            return Err(DennError::dims("frequency source has a different label count").into());
        }
        Some(match num_groups {
            Some(g) => frequency_groups(&freq_source.samples, c, g)?,
            None => groups_from_thresholds(&label_frequencies(&freq_source.samples, c), thresholds)?,
        })
    } else {
        None
    };

    let gold_labels: Vec<LabelVec> = gold.samples.iter().map(|s| s.labels.clone()).collect();
    let pred_labels: Vec<LabelVec> = predicted.into_iter().map(|(_, l)| l).collect();
    let report = MetricsReport::new(&confusion(&gold_labels, &pred_labels)?, groups.as_deref())?;
    print!("{}", report.to_table());
    if let Some(out) = &cli.out {
        let dir = parent_dir(out)?;
        write_json(out, &report)?;
        run.artifact("metrics", out);
        run.finish(&dir)?;
    }
    Ok(())
}

fn ablate_cmd(cli: &Cli, cfg: &DennConfig, data: &Path) -> CmdResult {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("ablation.json"));
    let dir = parent_dir(&out)?;
    let mut run = Run::new("ablate", cli, cfg);
    let splits = load_splits(data)?;
    run.input("data", data);
    let rows = ablate(&splits, cfg)?;
    print!("{}", ablation_table(&rows));
    write_json(&out, &rows)?;
    run.artifact("ablation", &out);
    run.finish(&dir)?;
    Ok(())
}

fn print_gradcheck(label: &str, cfg: &GradcheckConfig, r: &GradcheckReport) {
    println!(
        "{label}: {} ({} params, vocab {}, hidden {}, embed {}, classes {}, batch {}, {}) max rel err {:.3e}, max abs err {:.3e}, failed {}",
        if r.passed { "PASS" } else { "FAIL" },
        r.num_params,
        cfg.vocab_size,
        cfg.hidden,
        cfg.embed_dim,
        cfg.num_classes,
        cfg.batch_size,
        cfg.variant,
        r.max_rel_error,
        r.max_abs_error,
        r.num_failed
    );
}

fn gradcheck_cmd(cfg: &DennConfig, random: usize) -> CmdResult {
    let base = &cfg.gradcheck;
    let report = run_gradcheck(base)?;
    print_gradcheck("default", base, &report);
    let mut passed = report.passed;
    let mut rng = seeded_rng(base.seed);
    for i in 0..random {
        let rc = GradcheckConfig {
            step: base.step,
            rel_tol: base.rel_tol,
            abs_tol: base.abs_tol,
            ..GradcheckConfig::random(&mut rng)
        };
        let r = run_gradcheck(&rc)?;
        print_gradcheck(&format!("random {}", i + 1), &rc, &r);
        passed &= r.passed;
    }
    if passed {
        Ok(())
    } else {
        Err(CmdError::Failed)
    }
}

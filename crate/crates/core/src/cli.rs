//! Command-line front end: `train`, `eval`, `gradcheck` and `memsweep`
//! driven by one JSON run configuration.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapters::{self, merge};
use crate::data::{self, ByteTokenizer, ClassificationSpec, CLASSIFICATION_VOCAB};
use crate::error::{Error, Result};
use crate::matrix::Dtype;
use crate::memprofile::{self, SweepGrid};
use crate::tokentune::{mode_of, select_positions, InjectedBug, KSpec, Options};
use crate::train::{evaluate, Example, Regime, TrainConfig, Trainer};
use crate::transformer::checkpoint::{load_checkpoint, save_checkpoint};
use crate::transformer::{ModelConfig, TokenSequence, TransformerModel};
use crate::verify::{self, FdOptions, Property, SuiteOptions};

pub const SEED_ENV: &str = "TOKENTUNE_SEED";
pub const VERSION: &str = concat!("tokentune ", env!("CARGO_PKG_VERSION"));
pub const DEFAULT_RATIO: f64 = 0.25;

#[derive(Debug, Parser)]
#[command(name = "tokentune", version, about = "Token-selective fine-tuning of small transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write metrics, checkpoint and memory report.
    Train(Common),
    /// Evaluate a checkpoint on the configured test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fold adapters into the base weights before evaluating.
        #[arg(long)]
        merge: bool,
    },
    /// Equivalence properties plus finite differences on the configured model.
    Gradcheck(Common),
    /// Memory accounting over a grid of regimes, lengths, ratios and batch sizes.
    Memsweep {
        #[command(flatten)]
        common: Common,
        /// e.g. `regimes=full,tokentune;ns=64,128;ratios=0.25,0.5;batches=1,8`
        #[arg(long)]
        grid: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// `key=value` override; dotted paths or unambiguous field names.
    #[arg(long = "set", value_name = "K=V")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Deliberately break the selective pass (verification harness).
    #[arg(long, value_name = "NAME")]
    pub inject_bug: Option<InjectedBug>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Classification,
    Lm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_test: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub difficulty: f64,
    /// Byte corpus for LM; a synthetic one is generated when absent.
    pub corpus: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub stride: Option<usize>,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Classification,
            n_train: 256,
            n_test: 64,
            seq_len: 32,
            n_classes: 2,
            difficulty: 0.2,
            corpus: None,
            synthetic_bytes: 1 << 16,
            stride: None,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSpec {
    pub points: usize,
    pub max_n: usize,
    pub seed: u64,
    /// Sequence length and selection size of the finite-difference check.
    pub n: usize,
    pub k: usize,
    pub init_std: f64,
    pub fd_step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            points: 64,
            max_n: 16,
            seed: 0,
            n: 6,
            k: 2,
            init_std: 0.4,
            fd_step: 1e-5,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemsweepSpec {
    pub regimes: Option<Vec<Regime>>,
    pub ns: Option<Vec<usize>>,
    pub ratios: Option<Vec<f64>>,
    pub batches: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub gradcheck: GradcheckSpec,
    #[serde(default)]
    pub memsweep: MemsweepSpec,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/latest")
}

/// Failure of a command, carrying its exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] Error),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    /// 2: configuration or checkpoint problem, 3: non-finite values, 1: anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Check(_) => 1,
            CliError::Run(e) => match e {
                Error::InvalidConfig(_)
                | Error::Json(_)
                | Error::Checkpoint(_)
                | Error::Data(_)
                | Error::UnknownTarget(_)
                | Error::InvalidLabel { .. }
                | Error::EmptyDataset
                | Error::EmptySelection => 2,
                Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } => 3,
                _ => 1,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Applies `key=value` to a JSON tree. Dotted keys are paths; a bare key
/// resolves to the unique model, train or task field of that name, or
/// failing that to a gradcheck or memsweep field.
pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(str::to_string).collect()
    } else {
        resolve_short_key(root, key)?
    };
    let (last, parents) = path.split_last().expect("split yields one part");
    let mut node = &mut *root;
    for p in parents {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_err(format!("`{key}`: `{p}` is not a section")))?;
        node = obj.entry(p.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| config_err(format!("`{key}` does not name a field")))?;
    // the two selection sizes are exclusive, so setting one drops the other
    if parents.last().map(String::as_str) == Some("train") {
        match last.as_str() {
            "k" => {
                obj.remove("k_ratio");
            }
            "k_ratio" => {
                obj.remove("k");
            }
            "regime" if matches!(value.as_str(), Some("full" | "lora")) => {
                obj.remove("k");
                obj.remove("k_ratio");
            }
            _ => {}
        }
    }
    obj.insert(last.clone(), value);
    Ok(())
}

const PRIMARY: [&str; 3] = ["model", "train", "task"];
const SECONDARY: [&str; 2] = ["gradcheck", "memsweep"];

fn known_fields(section: &str) -> Vec<String> {
    let defaults = match section {
        "train" => serde_json::to_value(TrainConfig::default()),
        "task" => serde_json::to_value(TaskSpec::default()),
        "gradcheck" => serde_json::to_value(GradcheckSpec::default()),
        "memsweep" => serde_json::to_value(MemsweepSpec::default()),
        _ => Ok(Value::Null),
    };
    let mut keys: Vec<String> = match defaults {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    };
    if section == "model" {
        keys.extend(
            ["vocab_size", "max_positions", "d_model", "n_heads", "d_ff", "n_layers", "causal", "n_classes", "init_std"]
                .map(String::from),
        );
    }
    keys
}

fn resolve_short_key(root: &Value, key: &str) -> CliResult<Vec<String>> {
    if key == "out_dir" {
        return Ok(vec![key.to_string()]);
    }
    let has = |s: &str| root.get(s).and_then(|v| v.get(key)).is_some() || known_fields(s).iter().any(|f| f == key);
    let mut hits: Vec<&str> = PRIMARY.into_iter().filter(|s| has(s)).collect();
    if hits.is_empty() {
        hits = SECONDARY.into_iter().filter(|s| has(s)).collect();
    }
    match hits.as_slice() {
        [one] => Ok(vec![one.to_string(), key.to_string()]),
        [] => Err(config_err(format!("unknown config key `{key}`"))),
        many => Err(config_err(format!(
            "ambiguous key `{key}`: use one of {}",
            many.iter().map(|s| format!("{s}.{key}")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// Reads, overrides and validates a run configuration.
pub fn load_config(path: &Path, overrides: &[String]) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
    let mut root: Value = serde_json::from_str(&text)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    if let Ok(seed) = std::env::var(SEED_ENV) {
        let seed: u64 = seed
            .parse()
            .map_err(|_| config_err(format!("{SEED_ENV}=`{seed}` is not an unsigned integer")))?;
        apply_override(&mut root, &format!("train.seed={seed}"))?;
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(root)
        .map_err(|e| config_err(format!("{}: field `{}`: {}", path.display(), e.path(), e.inner())))?;
    if cfg.train.regime.selective() && cfg.train.k.is_none() && cfg.train.k_ratio.is_none() {
        cfg.train.k_ratio = Some(DEFAULT_RATIO);
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> CliResult<()> {
    cfg.model.validate().map_err(|e| config_err(format!("model: {e}")))?;
    cfg.train.validate().map_err(|e| config_err(format!("train: {e}")))?;
    let (m, t) = (&cfg.model, &cfg.task);
    let bad = |msg: String| Err(config_err(format!("task: {msg}")));
    if t.seq_len > m.max_positions {
        return bad(format!("seq_len {} exceeds model.max_positions {}", t.seq_len, m.max_positions));
    }
    match t.kind {
        TaskKind::Classification => {
            if m.causal {
                return bad("classification needs a bidirectional model (model.causal = false)".into());
            }
            if m.n_classes != t.n_classes {
                return bad(format!("n_classes {} differs from model.n_classes {}", t.n_classes, m.n_classes));
            }
            if m.vocab_size < CLASSIFICATION_VOCAB {
                return bad(format!("model.vocab_size must be >= {CLASSIFICATION_VOCAB}"));
            }
        }
        TaskKind::Lm => {
            if !m.causal {
                return bad("lm needs a causal model (model.causal = true)".into());
            }
            if m.vocab_size < ByteTokenizer::VOCAB {
                return bad(format!("model.vocab_size must be >= {}", ByteTokenizer::VOCAB));
            }
        }
    }
    if t.n_test == 0 {
        return bad("n_test must be >= 1".into());
    }
    Ok(())
}

/// Train and test splits of the configured task.
pub fn build_data(cfg: &RunConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    let t = &cfg.task;
    match t.kind {
        TaskKind::Classification => {
            let spec = ClassificationSpec {
                n_examples: t.n_train + t.n_test,
                seq_len: t.seq_len,
                n_classes: t.n_classes,
                difficulty: t.difficulty,
                seed: t.seed,
            };
            let mut all = data::gen_classification(&spec)?;
            let test = all.split_off(t.n_train);
            Ok((all, test))
        }
        TaskKind::Lm => {
            let stride = t.stride.unwrap_or(t.seq_len);
            let mut all = match &t.corpus {
                Some(p) => data::load_lm_corpus(p, t.seq_len, stride)?,
                None => data::lm_windows(&data::synthetic_text(t.synthetic_bytes, t.seed), t.seq_len, stride)?,
            };
            if all.len() <= t.n_test {
                return Err(Error::Data(format!(
                    "{} windows leave nothing to train on after {} test windows",
                    all.len(),
                    t.n_test
                )));
            }
            let test = all.split_off(all.len() - t.n_test);
            Ok((all, test))
        }
    }
}

fn out_dir(cfg: &RunConfig, common: &Common) -> CliResult<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&dir).map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn prepare(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = load_config(&common.config, &common.set)?;
    if common.inject_bug.is_some() {
        cfg.train.inject_bug = common.inject_bug;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn cmd_train(common: &Common) -> CliResult<()> {
    let cfg = prepare(common)?;
    let dir = out_dir(&cfg, common)?;
    write_json(&dir.join("config.json"), &cfg)?;
    fs::write(dir.join("version.txt"), format!("{VERSION}\n")).map_err(Error::from)?;
    let (train, test) = build_data(&cfg)?;
    let model = TransformerModel::new(cfg.model.clone(), cfg.train.dtype, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl")).map_err(Error::from)?);
    let history = trainer.fit(&train, &mut metrics);
    metrics.flush().map_err(Error::from)?;
    let history = history?;
    save_checkpoint(&trainer.model, &dir.join("checkpoint.bin"))?;
    let batch: Vec<Example> = train.iter().take(cfg.train.batch_size).cloned().collect();
    let base = TransformerModel::new(cfg.model.clone(), cfg.train.dtype, cfg.train.seed)?;
    let report = memprofile::profile_step(&base, &batch, &cfg.train)?;
    write_json(&dir.join("memory_report.json"), &report)?;
    let eval = evaluate(&trainer.model, &test, cfg.train.execution)?;
    write_json(&dir.join("eval.json"), &eval)?;
    let last = history.last().map_or(f64::NAN, |m| m.loss);
    println!("{} steps, final loss {last:.4}", history.len());
    print_eval(&eval);
    println!("peak {} bytes, activations {} bytes", report.peak_bytes, report.activations_bytes);
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn print_eval(m: &crate::train::EvalMetrics) {
    print!("eval loss {:.4}", m.loss);
    if let Some(a) = m.accuracy {
        print!(", accuracy {a:.4}");
    }
    if let Some(p) = m.perplexity {
        print!(", perplexity {p:.4}");
    }
    println!(" ({} examples)", m.examples);
}

pub fn cmd_eval(common: &Common, checkpoint: Option<&Path>, do_merge: bool) -> CliResult<crate::train::EvalMetrics> {
    let cfg = prepare(common)?;
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => common.out.clone().unwrap_or_else(|| cfg.out_dir.clone()).join("checkpoint.bin"),
    };
    let mut model = load_checkpoint(&path, Some(&cfg.model))?;
    if do_merge && model.adapters.is_some() {
        merge(&mut model)?;
    }
    let (_, test) = build_data(&cfg)?;
    let m = evaluate(&model, &test, cfg.train.execution)?;
    print_eval(&m);
    Ok(m)
}

/// Float64 model and example of the finite-difference check: the configured
/// architecture with `gradcheck.init_std` weights and a random sequence of
/// `gradcheck.n` tokens.
pub fn gradcheck_model(cfg: &RunConfig) -> Result<(TransformerModel, Example)> {
    let g = &cfg.gradcheck;
    let model_cfg = ModelConfig { init_std: g.init_std, max_positions: cfg.model.max_positions.max(g.n), ..cfg.model.clone() };
    let mut model = TransformerModel::new(model_cfg, Dtype::F64, cfg.train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x9c);
    if cfg.train.regime.lora() {
        adapters::attach(&mut model, &cfg.train.lora, cfg.train.seed)?;
        let normal = Normal::new(0.0, g.init_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for id in adapters::adapter_params(&model) {
            for v in model.params.get_mut(id).value.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
    }
    let ids: Vec<usize> = (0..g.n).map(|_| rng.gen_range(1..cfg.model.vocab_size)).collect();
    let seq = TokenSequence::new(ids);
    let ex = if cfg.model.causal {
        Example::lm(seq)
    } else {
        Example::classification(seq, rng.gen_range(0..cfg.model.n_classes))
    };
    Ok((model, ex))
}

pub fn cmd_gradcheck(common: &Common) -> CliResult<()> {
    let cfg = prepare(common)?;
    let dir = out_dir(&cfg, common)?;
    let g = &cfg.gradcheck;
    let opts = SuiteOptions {
        points: g.points,
        seed: g.seed,
        d_model: cfg.model.d_model,
        n_heads: cfg.model.n_heads,
        d_ff: cfg.model.d_ff,
        max_n: g.max_n,
        init_std: g.init_std,
        bug: cfg.train.inject_bug,
        execution: cfg.train.execution,
    };
    let suite = verify::equivalence_suite(&opts)?;
    let mut f = BufWriter::new(File::create(dir.join("gradcheck.jsonl")).map_err(Error::from)?);
    suite.write_jsonl(&mut f)?;
    f.flush().map_err(Error::from)?;
    println!("{suite}");
    if suite.max_err(Property::FullEquivalence) == 0.0 {
        println!("full_equivalence: exact");
    }

    let (model, ex) = gradcheck_model(&cfg)?;
    let part = select_positions(&ex.seq.real, KSpec::Count(g.k), mode_of(&ex.target), cfg.train.seed)?;
    let fd = FdOptions { step: g.fd_step, seed: g.seed, ..FdOptions::default() };
    let report = verify::gradcheck(&model, &ex.seq, &ex.target, &part, &Options { bug: cfg.train.inject_bug }, &fd, g.tolerance)?;
    write_json(&dir.join("gradcheck_report.json"), &report)?;
    println!("finite differences (n={}, k={}):\n{report}", ex.seq.len(), part.k);

    let mut failed: Vec<String> = Property::ALL
        .into_iter()
        .filter(|&p| suite.failed(p))
        .map(|p| p.name().to_string())
        .collect();
    if !report.pass {
        failed.push("finite_difference".into());
    }
    if failed.is_empty() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(CliError::Check(format!("gradcheck failed: {}", failed.join(", "))))
    }
}

/// Parses `regimes=a,b;ns=..;ratios=..;batches=..` over the defaults in `base`.
pub fn parse_grid(spec: &str, mut base: SweepGrid) -> CliResult<SweepGrid> {
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, list) = part
            .split_once('=')
            .ok_or_else(|| config_err(format!("grid entry `{part}` is not key=list")))?;
        let items: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        let nums = |what: &str| -> CliResult<Vec<usize>> {
            items.iter().map(|s| s.parse().map_err(|_| config_err(format!("bad {what} `{s}`")))).collect()
        };
        match key.trim() {
            "regimes" => {
                base.regimes = items.iter().map(|s| s.parse::<Regime>()).collect::<Result<_>>()?;
            }
            "ns" => base.ns = nums("length")?,
            "batches" => base.batches = nums("batch")?,
            "ratios" => {
                base.ratios = items
                    .iter()
                    .map(|s| s.parse().map_err(|_| config_err(format!("bad ratio `{s}`"))))
                    .collect::<CliResult<_>>()?;
            }
            other => return Err(config_err(format!("unknown grid key `{other}`"))),
        }
    }
    Ok(base)
}

pub fn cmd_memsweep(common: &Common, grid: Option<&str>) -> CliResult<Vec<memprofile::MemoryReport>> {
    let cfg = prepare(common)?;
    let dir = out_dir(&cfg, common)?;
    let s = &cfg.memsweep;
    let base = SweepGrid {
        regimes: s.regimes.clone().unwrap_or_else(|| Regime::ALL.to_vec()),
        ns: s.ns.clone().unwrap_or_else(|| vec![cfg.task.seq_len]),
        ratios: s.ratios.clone().unwrap_or_else(|| vec![0.125, 0.25, 0.5, 0.75, 1.0]),
        batches: s.batches.clone().unwrap_or_else(|| vec![cfg.train.batch_size]),
    };
    let grid = match grid {
        Some(g) => parse_grid(g, base)?,
        None => base,
    };
    for &r in &grid.ratios {
        KSpec::Ratio(r).validate().map_err(config_err)?;
    }
    let train = TrainConfig { k: None, k_ratio: None, ..cfg.train.clone() };
    let reports = memprofile::sweep_report(&cfg.model, &train, &grid)?;
    let path = dir.join("memsweep.csv");
    let mut f = BufWriter::new(File::create(&path).map_err(Error::from)?);
    memprofile::write_csv(&reports, &mut f)?;
    f.flush().map_err(Error::from)?;
    let mut ranked: Vec<_> = reports.iter().collect();
    ranked.sort_by_key(|r| r.peak_bytes);
    println!("{:<16} {:>6} {:>6} {:>6} {:>14}", "regime", "n", "k", "batch", "peak_bytes");
    for r in ranked {
        println!("{:<16} {:>6} {:>6} {:>6} {:>14}", r.regime.name(), r.n, r.k, r.batch, r.peak_bytes);
    }
    println!("table written to {}", path.display());
    Ok(reports)
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Eval { common, checkpoint, merge } => cmd_eval(common, checkpoint.as_deref(), *merge).map(|_| ()),
        Command::Gradcheck(c) => cmd_gradcheck(c),
        Command::Memsweep { common, grid } => cmd_memsweep(common, grid.as_deref()).map(|_| ()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn tree() -> Value {
        json!({
            "model": {"vocab_size": 64, "causal": false},
            "train": {"regime": "full", "k_ratio": 0.5},
            "task": {"kind": "classification"}
        })
    }

    #[test]
    fn dotted_and_short_overrides() {
        let mut v = tree();
        apply_override(&mut v, "train.lr=0.01").unwrap();
        apply_override(&mut v, "regime=tokentune").unwrap();
        apply_override(&mut v, "d_model=16").unwrap();
        apply_override(&mut v, "difficulty=0.3").unwrap();
        apply_override(&mut v, "points=8").unwrap();
        assert_eq!(v["train"]["lr"], json!(0.01));
        assert_eq!(v["train"]["regime"], json!("tokentune"));
        assert_eq!(v["model"]["d_model"], json!(16));
        assert_eq!(v["task"]["difficulty"], json!(0.3));
        assert_eq!(v["gradcheck"]["points"], json!(8));
    }

    #[test]
    fn selection_overrides_are_exclusive() {
        let mut v = tree();
        apply_override(&mut v, "k=16").unwrap();
        assert_eq!(v["train"]["k"], json!(16));
        assert!(v["train"].get("k_ratio").is_none());
        apply_override(&mut v, "k_ratio=0.25").unwrap();
        assert!(v["train"].get("k").is_none());
        apply_override(&mut v, "regime=lora").unwrap();
        assert!(v["train"].get("k_ratio").is_none());
    }

    #[test]
    fn bad_overrides() {
        let mut v = tree();
        assert!(apply_override(&mut v, "nonsense").is_err());
        assert!(apply_override(&mut v, "no_such_key=1").is_err());
        let err = apply_override(&mut v, "seed=3").unwrap_err().to_string();
        assert!(err.contains("train.seed") && err.contains("task.seed"), "{err}");
        assert!(apply_override(&mut v, "train.regime.x=1").is_err());
    }

    #[test]
    fn grid_spec_parsing() {
        let base = SweepGrid { regimes: vec![], ns: vec![8], ratios: vec![], batches: vec![1] };
        let g = parse_grid("regimes=full,tokentune+lora; ratios=0.25,0.5; batches=2,4", base.clone()).unwrap();
        assert_eq!(g.regimes, vec![Regime::Full, Regime::TokenTuneLora]);
        assert_eq!(g.ratios, vec![0.25, 0.5]);
        assert_eq!(g.batches, vec![2, 4]);
        assert_eq!(g.ns, vec![8]);
        assert_eq!(parse_grid("ns=", base.clone()).unwrap().ns, Vec::<usize>::new());
        assert!(parse_grid("regimes=half", base.clone()).is_err());
        assert!(parse_grid("sizes=1", base.clone()).is_err());
        assert!(parse_grid("ns=x", base).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Run(Error::Checkpoint("x".into())).exit_code(), 2);
        assert_eq!(CliError::Run(Error::NonFiniteLoss { example: 0 }).exit_code(), 3);
        assert_eq!(CliError::Run(Error::NonFiniteGradient { param: "w".into() }).exit_code(), 3);
        assert_eq!(CliError::Check("x".into()).exit_code(), 1);
    }
}

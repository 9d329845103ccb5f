//! Command implementations behind the `specast` binary.
//!
//! Exit codes: 0 success, 1 validation failure (bad flags, configs or
//! inputs, or a verification harness that did not pass), 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use specast::ablation::{run_ablation, AblationTable};
use specast::checkpoint::Checkpoint;
use specast::dataio::{generate_synthetic, Split};
use specast::metrics::{evaluate, EvalOptions};
use specast::spectral::prop1_sweep;
use specast::train::{
    config_hash, gradcheck, latitude_weights, make_samples, resume, short_digest, train, GradcheckOptions,
    LossVariant,
};
use specast::{Dataset, Error, Exec, Model, ModelConfig, SyntheticConfig, TrainConfig, TrainOptions};

pub mod config;
pub mod heatmap;

use config::{layered, require_file, run_dir, write_json, ConfigFile, Flags};
use heatmap::{write_map, MapInfo};

#[derive(Debug, Parser)]
#[command(name = "specast", version, about = "Spectral mixture-of-experts forecaster")]
pub struct Cli {
    /// Root for run directories when --out is not given.
    #[arg(long, global = true, env = "SPECAST_OUTPUT_ROOT", default_value = "runs")]
    pub output_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic advection-diffusion dataset.
    Synth(SynthArgs),
    /// Train a model (or resume from a checkpoint).
    Train(TrainArgs),
    /// Score a checkpoint against persistence and climatology, and draw maps.
    Eval(EvalArgs),
    /// Train and score the full model and its three ablations.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Check the spectral coefficient identities on random fields.
    Prop1(Prop1Args),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON config file (`synthetic` section).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for the manifest and payload [default: <output-root>/datasets].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub n_lat: Option<usize>,
    #[arg(long)]
    pub n_lon: Option<usize>,
    #[arg(long)]
    pub n_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace existing files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Default, Clone)]
pub struct ModelFlags {
    #[arg(long)]
    pub history_len: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub d_latent: Option<usize>,
    #[arg(long)]
    pub n_experts: Option<usize>,
    #[arg(long)]
    pub n_bands: Option<usize>,
    #[arg(long)]
    pub n_prompts: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// Feed grid values instead of spectra.
    #[arg(long)]
    pub no_fft: bool,
    #[arg(long)]
    pub no_prompt: bool,
    #[arg(long)]
    pub no_moe: bool,
}

impl ModelFlags {
    fn flags(&self) -> Flags {
        let mut f = Flags::default();
        f.set("history_len", self.history_len)
            .set("k_max", self.k_max)
            .set("d_latent", self.d_latent)
            .set("n_experts", self.n_experts)
            .set("n_bands", self.n_bands)
            .set("n_prompts", self.n_prompts)
            .set("d_model", self.d_model)
            .set("n_layers", self.n_layers)
            .set("n_heads", self.n_heads)
            .off("use_fft", self.no_fft)
            .off("use_prompt", self.no_prompt)
            .off("use_moe", self.no_moe);
        f
    }
}

#[derive(Debug, Args, Default, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// `unit_sum` or `weatherbench_normalized`.
    #[arg(long)]
    pub loss_variant: Option<String>,
}

impl TrainFlags {
    fn flags(&self) -> Flags {
        let mut f = Flags::default();
        f.set("epochs", self.epochs)
            .set("learning_rate", self.learning_rate)
            .set("batch_size", self.batch_size)
            .set("seed", self.seed)
            .set("grad_clip", self.grad_clip)
            .set("loss_variant", self.loss_variant.clone());
        f
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from this checkpoint; only the epoch budget may change.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// JSON config file (`model` and `train` sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Stop after the first epoch that ends past this many seconds.
    #[arg(long)]
    pub time_budget: Option<f64>,
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Lead times in hours.
    #[arg(long, value_delimiter = ',')]
    pub lead_hours: Option<Vec<f64>>,
    #[arg(long)]
    pub max_windows: Option<usize>,
    /// Offsets into the test split for which maps are drawn.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub case: Vec<usize>,
    /// Variable to draw [default: the first].
    #[arg(long)]
    pub variable: Option<String>,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Lead time in hours at which the table is scored.
    #[arg(long)]
    pub lead_hours: Option<f64>,
    #[arg(long)]
    pub max_windows: Option<usize>,
    #[arg(long)]
    pub time_budget: Option<f64>,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Dataset manifest [default: a small built-in synthetic series].
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long, default_value_t = 20)]
    pub samples_per_group: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Training windows summed into the checked loss.
    #[arg(long, default_value_t = 2)]
    pub windows: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test hook: corrupt the analytic gradient of this parameter.
    #[arg(long, hide = true)]
    pub corrupt_param: Option<String>,
}

#[derive(Debug, Args)]
pub struct Prop1Args {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    #[arg(long, value_delimiter = ',', default_value = "4,8")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// What a command did; `passed == false` maps to exit code 1.
#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub command: &'static str,
    pub config_hash: String,
    pub out: PathBuf,
    pub passed: bool,
    pub summary: Value,
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let root = &cli.output_root;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, root),
        Command::Train(a) => cmd_train(a, root),
        Command::Eval(a) => cmd_eval(a, root),
        Command::Ablate(a) => cmd_ablate(a, root).map(|(o, _)| o),
        Command::Gradcheck(a) => cmd_gradcheck(a, root),
        Command::Prop1(a) => cmd_prop1(a, root),
    }
}

/// 1 for problems with what the user asked for, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::InvalidInput(_)
            | Error::InvalidConfig(_)
            | Error::Shape(_)
            | Error::UndefinedAcc(_)
            | Error::SymmetryViolation { .. },
        ) => 1,
        _ => 2,
    }
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    require_file(path)?;
    Ok(Dataset::load(path)?)
}

fn resolve_configs(file: &ConfigFile, m: &ModelFlags, t: &TrainFlags) -> Result<(ModelConfig, TrainConfig)> {
    let model: ModelConfig = layered(
        &ModelConfig::default(),
        file.section("model"),
        m.flags().take(),
        "model",
    )?;
    let train: TrainConfig = layered(
        &TrainConfig::default(),
        file.section("train"),
        t.flags().take(),
        "train",
    )?;
    train.validate()?;
    Ok((model, train))
}

pub fn cmd_synth(a: &SynthArgs, root: &Path) -> Result<Outcome> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let mut flags = Flags::default();
    flags
        .set("name", a.name.clone())
        .set("n_lat", a.n_lat)
        .set("n_lon", a.n_lon)
        .set("n_steps", a.n_steps)
        .set("seed", a.seed);
    let cfg: SyntheticConfig = layered(
        &SyntheticConfig::default(),
        file.section("synthetic"),
        flags.take(),
        "synthetic",
    )?;
    cfg.validate()?;
    let dir = a.out.clone().unwrap_or_else(|| root.join("datasets"));
    let data = generate_synthetic(&cfg)?;
    let manifest = data.save(&dir, a.force)?;
    let hash = cfg.config_hash();
    Ok(Outcome {
        command: "synth",
        config_hash: hash,
        out: manifest,
        passed: true,
        summary: json!({ "name": data.name, "n_steps": data.n_steps(), "sha256": data.checksum() }),
    })
}

pub fn cmd_train(a: &TrainArgs, root: &Path) -> Result<Outcome> {
    let data = load_data(&a.data)?;
    let file = ConfigFile::load(a.config.as_deref())?;
    let time_budget = a.time_budget.map(Duration::from_secs_f64);

    let (out, model_cfg, train_cfg, ckpt) = if let Some(path) = &a.resume {
        require_file(path)?;
        let ckpt = Checkpoint::load(path)?;
        let model_cfg: ModelConfig = layered(
            &ckpt.model_config,
            file.section("model"),
            a.model.flags().take(),
            "model",
        )?;
        if model_cfg != ckpt.model_config {
            return Err(Error::InvalidConfig("model settings cannot change on resume".into()).into());
        }
        let train_cfg: TrainConfig = layered(
            &ckpt.train_config,
            file.section("train"),
            a.train.flags().take(),
            "train",
        )?;
        let dir = match &a.out {
            Some(d) => d.clone(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        (
            run_dir(Some(&dir), root, "train", "")?,
            model_cfg,
            train_cfg,
            Some(ckpt),
        )
    } else {
        let (m, t) = resolve_configs(&file, &a.model, &a.train)?;
        let hash = config_hash(&m, &t);
        (run_dir(a.out.as_deref(), root, "train", &hash)?, m, t, None)
    };
    let hash = config_hash(&model_cfg, &train_cfg);
    write_json(
        &out.join("config.json"),
        &json!({
            "config_hash": hash,
            "model": model_cfg,
            "train": train_cfg,
            "dataset": data.name,
            "dataset_checksum": data.checksum(),
        }),
    )?;
    let opts = TrainOptions {
        exec: exec(a.sequential),
        out_dir: Some(out.clone()),
        time_budget,
        verbose: !a.quiet,
    };
    let outcome = match ckpt {
        Some(c) => resume(&data, c, &train_cfg, &opts)?,
        None => train(&data, &model_cfg, &train_cfg, &opts)?,
    };
    let last = outcome.last.log.last();
    Ok(Outcome {
        command: "train",
        config_hash: outcome.config_hash.clone(),
        out,
        passed: true,
        summary: json!({
            "epochs": outcome.last.epoch,
            "best_epoch": outcome.last.best_epoch,
            "best_val_loss": outcome.last.best_val,
            "final_train_loss": last.map(|r| r.train_loss),
            "stopped_early": outcome.stopped_early,
        }),
    })
}

pub fn cmd_eval(a: &EvalArgs, root: &Path) -> Result<Outcome> {
    require_file(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    if *model.grid != *data.grid {
        return Err(Error::InvalidInput("dataset grid differs from the checkpoint's".into()).into());
    }
    let file = ConfigFile::load(a.config.as_deref())?;
    let mut flags = Flags::default();
    flags
        .set("lead_hours", a.lead_hours.clone())
        .set("max_windows", a.max_windows);
    let eval_cfg: EvalSection = layered(
        &EvalSection::default(),
        file.section("eval"),
        flags.take(),
        "eval",
    )?;
    let hash = ckpt.config_hash.clone();
    let out = run_dir(a.out.as_deref(), root, "eval", &hash)?;

    let opts = EvalOptions {
        lead_hours: eval_cfg.lead_hours.clone(),
        split: Split::Test,
        max_windows: eval_cfg.max_windows,
        exec: exec(a.sequential),
    };
    let report = evaluate(Some(&model), &data, &hash, &opts)?;
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("report.csv"), report.to_csv()).context("writing report.csv")?;

    let var = match &a.variable {
        Some(v) => data
            .grid
            .var_names
            .iter()
            .position(|n| n == v)
            .ok_or_else(|| Error::InvalidInput(format!("unknown variable {v}")))?,
        None => 0,
    };
    let maps = out.join("maps");
    fs::create_dir_all(&maps)?;
    let l = model.config.history_len;
    let test = data.range(Split::Test);
    for &case in &a.case {
        let s = test.start + case;
        if s + l >= test.end {
            return Err(
                Error::InvalidInput(format!("case {case} has no target inside the test split")).into(),
            );
        }
        let window = data.window(s, l)?;
        let pred = model.forecast(&window)?;
        let (t0, t1) = (data.frame(s + l - 1), data.frame(s + l));
        let (p, x0, x1) = (pred.var(var), t0.var(var), t1.var(var));
        let diff: Vec<f64> = x1.iter().zip(x0).map(|(b, a)| b - a).collect();
        let err: Vec<f64> = p.iter().zip(x1).map(|(p, t)| p - t).collect();
        for (kind, values) in [
            ("truth_t0", x0),
            ("truth_t1", x1),
            ("pred_t1", p),
            ("truth_diff", &diff[..]),
            ("pred_error", &err[..]),
        ] {
            let info = MapInfo {
                config_hash: hash.clone(),
                kind: kind.to_string(),
                variable: data.grid.var_names[var].clone(),
                case,
                width: data.grid.n_lon(),
                height: data.grid.n_lat(),
                min: 0.0,
                max: 0.0,
            };
            write_map(&maps, &format!("case{case}_{kind}"), values, &info)?;
        }
    }
    let accs_ok = report
        .entries
        .iter()
        .all(|e| e.acc.is_none_or(|x| (-1.0..=1.0).contains(&x)));
    Ok(Outcome {
        command: "eval",
        config_hash: hash,
        out,
        passed: true,
        summary: json!({ "entries": report.entries.len(), "acc_in_range": accs_ok, "cases": a.case }),
    })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSection {
    lead_hours: Vec<f64>,
    max_windows: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            lead_hours: vec![6.0],
            max_windows: None,
        }
    }
}

pub fn cmd_ablate(a: &AblateArgs, root: &Path) -> Result<(Outcome, AblationTable)> {
    let data = load_data(&a.data)?;
    let file = ConfigFile::load(a.config.as_deref())?;
    let (model_cfg, train_cfg) = resolve_configs(&file, &a.model, &a.train)?;
    let mut flags = Flags::default();
    flags
        .set("lead_hours", a.lead_hours.map(|h| vec![h]))
        .set("max_windows", a.max_windows);
    let eval_cfg: EvalSection = layered(
        &EvalSection::default(),
        file.section("eval"),
        flags.take(),
        "eval",
    )?;
    let hash = config_hash(&model_cfg, &train_cfg);
    let out = run_dir(a.out.as_deref(), root, "ablate", &hash)?;
    let eval = EvalOptions {
        lead_hours: eval_cfg.lead_hours,
        split: Split::Test,
        max_windows: eval_cfg.max_windows,
        exec: exec(a.sequential),
    };
    let opts = TrainOptions {
        exec: exec(a.sequential),
        out_dir: Some(out.clone()),
        time_budget: a.time_budget.map(Duration::from_secs_f64),
        verbose: false,
    };
    let table = run_ablation(&data, &model_cfg, &train_cfg, &eval, &opts)?;
    write_json(
        &out.join("ablation.json"),
        &json!({ "config_hash": hash, "table": table }),
    )?;
    fs::write(out.join("ablation.csv"), table.to_csv()).context("writing ablation.csv")?;
    let finite = table
        .rows
        .iter()
        .all(|r| r.rmse.iter().all(|x| x.is_finite()) && r.acc.iter().flatten().all(|x| x.is_finite()));
    let outcome = Outcome {
        command: "ablate",
        config_hash: hash,
        out,
        passed: finite,
        summary: json!({
            "mean_rmse": table.rows.iter().map(|r| (r.name.clone(), r.mean_rmse())).collect::<Vec<_>>(),
            "full_not_worse": table.full_not_worse,
            "fft_removal_most_harmful": table.fft_removal_most_harmful,
        }),
    };
    Ok((outcome, table))
}

/// The model gradient checks run on unless overridden; big enough that
/// every parameter group has at least 20 entries.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        history_len: 2,
        k_max: 2,
        d_latent: 8,
        n_experts: 4,
        n_bands: 3,
        n_prompts: 2,
        prompt_heads: 2,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

fn gradcheck_data() -> Result<Dataset> {
    Ok(generate_synthetic(&SyntheticConfig {
        n_lat: 8,
        n_lon: 16,
        n_steps: 40,
        seed: 1,
        ..SyntheticConfig::default()
    })?)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, root: &Path) -> Result<Outcome> {
    let data = match &a.data {
        Some(p) => load_data(p)?,
        None => gradcheck_data()?,
    };
    let file = ConfigFile::load(a.config.as_deref())?;
    let model_cfg: ModelConfig = layered(
        &gradcheck_model(),
        file.section("model"),
        a.model.flags().take(),
        "model",
    )?;
    let train_cfg = TrainConfig {
        seed: a.seed,
        ..TrainConfig::default()
    };
    let hash = config_hash(&model_cfg, &train_cfg);
    let model = Model::new(model_cfg, data.grid.clone(), a.seed)?;
    let mut samples = make_samples(&model, &data, Split::Train)?;
    samples.truncate(a.windows.max(1));
    let w = latitude_weights(&data.grid.lats)?;
    let opts = GradcheckOptions {
        samples_per_group: a.samples_per_group,
        step: a.step,
        tolerance: a.tolerance,
        seed: a.seed,
        corrupt_param: a.corrupt_param.clone(),
    };
    let report = gradcheck(&model, &samples, &w, LossVariant::default(), &opts)?;
    let out = run_dir(a.out.as_deref(), root, "gradcheck", &hash)?;
    write_json(
        &out.join("gradcheck.json"),
        &json!({ "config_hash": hash, "report": report }),
    )?;
    Ok(Outcome {
        command: "gradcheck",
        config_hash: hash,
        out,
        passed: report.passed,
        summary: json!({ "precision": report.precision, "groups": report.groups }),
    })
}

pub fn cmd_prop1(a: &Prop1Args, root: &Path) -> Result<Outcome> {
    if a.sizes.is_empty() || a.sizes.iter().any(|&n| n < 2) || a.count == 0 {
        return Err(Error::InvalidInput("need at least one field of size >= 2".into()).into());
    }
    let settings = json!({ "count": a.count, "sizes": a.sizes, "seed": a.seed });
    let hash = short_hash(&settings);
    let sweep = prop1_sweep(&a.sizes, a.count, a.seed)?;
    let out = run_dir(a.out.as_deref(), root, "prop1", &hash)?;
    write_json(
        &out.join("prop1.json"),
        &json!({ "config_hash": hash, "report": sweep }),
    )?;
    Ok(Outcome {
        command: "prop1",
        config_hash: hash,
        out,
        passed: sweep.passed,
        summary: json!({
            "max_roundtrip_error": sweep.max_roundtrip_error,
            "max_identity_error": sweep.max_identity_error,
            "note": sweep.note,
        }),
    })
}

fn short_hash(v: &Value) -> String {
    short_digest(v.to_string().as_bytes())
}

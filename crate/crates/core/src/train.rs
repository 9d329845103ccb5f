//! Latitude-weighted objective, Adam, batch gradients, the training loop and
//! finite-difference gradient verification.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Var;
use crate::checkpoint::Checkpoint;
use crate::dataio::{Dataset, Split};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::GridField;
use crate::model::{Model, ModelConfig, Prepared};
use crate::params::{Graph, ParamStore};
use crate::tensor::Mat;

/// Per-latitude-row weights proportional to `cos(lat)`, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LatWeights {
    pub alpha: Vec<f64>,
}

impl LatWeights {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// The same weights rescaled to mean one.
    pub fn mean_one(&self) -> Vec<f64> {
        let m = self.alpha.len() as f64;
        self.alpha.iter().map(|a| a * m).collect()
    }
}

pub fn latitude_weights(lats: &[f64]) -> Result<LatWeights> {
    if lats.is_empty() {
        return Err(Error::invalid("no latitudes"));
    }
    if lats.iter().any(|l| !l.is_finite() || l.abs() > 90.0) {
        return Err(Error::invalid("latitudes must lie in [-90, 90]"));
    }
    let cos: Vec<f64> = lats
        .iter()
        .map(|l| {
            if l.abs() == 90.0 {
                0.0
            } else {
                l.to_radians().cos()
            }
        })
        .collect();
    let total: f64 = cos.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("all latitudes are polar; weights undefined"));
    }
    Ok(LatWeights {
        alpha: cos.iter().map(|c| c / total).collect(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// `sqrt((1/MN) Σ α(m) e²)` with `Σ α = 1`.
    #[default]
    UnitSum,
    /// Same with `α` rescaled to mean one (the usual area-weighted RMSE).
    WeatherbenchNormalized,
}

impl LossVariant {
    /// Multiplier applied to `α(m)` inside the square root, including the
    /// `1/(MN)` prefactor.
    fn row_weights(self, w: &LatWeights, n_lon: usize) -> Vec<f64> {
        let m = w.len();
        let alpha = match self {
            LossVariant::UnitSum => w.alpha.clone(),
            LossVariant::WeatherbenchNormalized => w.mean_one(),
        };
        let norm = 1.0 / (m * n_lon) as f64;
        alpha.iter().map(|a| a * norm).collect()
    }
}

/// Per-variable weighted RMSE.
pub fn weighted_rmse_with(
    pred: &GridField,
    truth: &GridField,
    w: &LatWeights,
    variant: LossVariant,
) -> Result<Vec<f64>> {
    pred.check_same_shape(truth)?;
    if w.len() != pred.n_lat() {
        return Err(Error::shape(format!(
            "{} latitude weights for {} rows",
            w.len(),
            pred.n_lat()
        )));
    }
    let (m, n) = (pred.n_lat(), pred.n_lon());
    let rows = variant.row_weights(w, n);
    Ok((0..pred.n_vars())
        .map(|v| {
            let (p, t) = (pred.var(v), truth.var(v));
            let s: f64 = (0..m)
                .map(|i| {
                    let e: f64 = (0..n).map(|j| (p[i * n + j] - t[i * n + j]).powi(2)).sum();
                    rows[i] * e
                })
                .sum();
            s.sqrt()
        })
        .collect())
}

/// Literal form (`Σ α = 1` and the `1/(MN)` prefactor).
pub fn weighted_rmse(pred: &GridField, truth: &GridField, w: &LatWeights) -> Result<Vec<f64>> {
    weighted_rmse_with(pred, truth, w, LossVariant::UnitSum)
}

/// Mean over variables of the per-variable weighted RMSE, on the tape.
/// `pred` is `[C·M x N]`.
pub fn loss_graph(
    g: &mut Graph,
    pred: Var,
    truth: &GridField,
    w: &LatWeights,
    variant: LossVariant,
) -> Result<Var> {
    let (c, m, n) = (truth.n_vars(), truth.n_lat(), truth.n_lon());
    if g.tape.shape(pred) != (c * m, n) {
        return Err(Error::shape(format!(
            "prediction {:?} does not match truth {c}x{m}x{n}",
            g.tape.shape(pred)
        )));
    }
    if w.len() != m {
        return Err(Error::shape("latitude weights do not match grid"));
    }
    let rows = g.constant(Mat::from_vec(m, 1, variant.row_weights(w, n)));
    let mut total: Option<Var> = None;
    for v in 0..c {
        let p = g.tape.slice_rows(pred, v * m, m);
        let t = g.constant(Mat::from_vec(m, n, truth.var(v).to_vec()));
        let e = g.tape.sub(p, t);
        let sq = g.tape.mul(e, e);
        let wsq = g.tape.mul_col(sq, rows);
        let s = g.tape.sum(wsq);
        let r = g.tape.sqrt(s);
        total = Some(match total {
            None => r,
            Some(a) => g.tape.add(a, r),
        });
    }
    let total = total.ok_or_else(|| Error::invalid("no variables"))?;
    Ok(g.tape.scale(total, 1.0 / c as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub loss_variant: LossVariant,
    /// Keep parameters and optimizer moments at `f32` precision between
    /// steps. Checkpoints store `f32`, so this makes resumption exact.
    pub f32_storage: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            grad_clip: None,
            loss_variant: LossVariant::UnitSum,
            f32_storage: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::InvalidConfig("adam_epsilon must be > 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig("grad_clip must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Short hex digest of the canonical JSON of both configs. The epoch budget
/// is left out so that extending a run on resume keeps its identity.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut train = serde_json::to_value(train).expect("configs serialize");
    if let Some(obj) = train.as_object_mut() {
        obj.remove("epochs");
    }
    let json = serde_json::to_string(&serde_json::json!({ "model": model, "train": train }))
        .expect("configs serialize");
    short_digest(json.as_bytes())
}

/// First 8 bytes of the SHA-256, as 16 hex digits.
pub fn short_digest(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    fn round_to_f32(&mut self) {
        for x in self.m.iter_mut().chain(self.v.iter_mut()) {
            for e in &mut x.data {
                *e = *e as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.adam_epsilon,
        }
    }
}

/// Adam with bias correction.
pub fn adam_step(params: &mut [Mat], grads: &[Mat], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape("optimizer state does not match parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::shape("gradient shape does not match parameter"));
        }
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m.data[i] / c1;
            let vh = v.data[i] / c2;
            p.data[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// One training or evaluation example: prepared inputs and the target.
#[derive(Debug, Clone)]
pub struct Sample {
    pub prep: Prepared,
    pub target: GridField,
}

/// Windows `[t, t+L)` with target `t+L`, stride one, inside `split`.
pub fn make_samples(model: &Model, data: &Dataset, split: Split) -> Result<Vec<Sample>> {
    let l = model.config.history_len;
    data.window_starts(split, l, 1)
        .map(|t| {
            let (w, target) = data.sample(t, l)?;
            Ok(Sample {
                prep: model.prepare(&w)?,
                target,
            })
        })
        .collect()
}

/// Loss of a single sample, evaluated against an arbitrary store with the
/// model's layout.
pub fn sample_loss(
    model: &Model,
    store: &ParamStore,
    s: &Sample,
    w: &LatWeights,
    variant: LossVariant,
) -> Result<f64> {
    let mut g = Graph::new(store);
    let out = model.forward(&mut g, &s.prep)?;
    let loss = loss_graph(&mut g, out.prediction, &s.target, w, variant)?;
    Ok(g.value(loss).data[0])
}

/// Loss and parameter gradients of one sample.
pub fn sample_grads(
    model: &Model,
    store: &ParamStore,
    s: &Sample,
    w: &LatWeights,
    variant: LossVariant,
) -> Result<(f64, Vec<Mat>)> {
    let mut g = Graph::new(store);
    let out = model.forward(&mut g, &s.prep)?;
    let loss = loss_graph(&mut g, out.prediction, &s.target, w, variant)?;
    let grads = g.tape.backward(loss, 1.0);
    Ok((g.value(loss).data[0], g.param_grads(&grads)))
}

/// Mean loss and mean gradient over a batch. Per-sample work runs through
/// `exec`; the reduction is sequential in sample order, so the result does
/// not depend on the execution mode.
pub fn batch_grads(
    model: &Model,
    samples: &[&Sample],
    w: &LatWeights,
    variant: LossVariant,
    exec: Exec,
) -> Result<(f64, Vec<Mat>)> {
    if samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let parts = exec.map(samples, |s| sample_grads(model, &model.store, s, w, variant));
    let mut loss = 0.0;
    let mut total = model.store.zeros_like();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (t, gi) in total.iter_mut().zip(&g) {
            t.add_assign(gi);
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for t in &mut total {
        t.scale_assign(inv);
    }
    Ok((loss * inv, total))
}

/// Mean loss over samples.
pub fn mean_loss(
    model: &Model,
    samples: &[Sample],
    w: &LatWeights,
    variant: LossVariant,
    exec: Exec,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let losses = exec.map(samples, |s| sample_loss(model, &model.store, s, w, variant));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

fn check_grads(store: &ParamStore, grads: &[Mat]) -> Result<()> {
    for (id, g) in store.ids().zip(grads) {
        if !g.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite gradient for parameter {}",
                store.name(id)
            )));
        }
    }
    Ok(())
}

/// Numerical failures inside a training step mean the run diverged.
fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Stage { .. } | Error::InvalidInput(_) => {
            let at = if batch == usize::MAX {
                "validation".to_string()
            } else {
                format!("batch {batch}")
            };
            Error::Divergence(format!("epoch {epoch}, {at}: {e}"))
        }
        other => other,
    }
}

fn clip(grads: &mut [Mat], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.scale_assign(s);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
    pub config_hash: String,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub exec: Exec,
    /// Receives `train_log.jsonl`, `last.ckpt` and `best.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Stop after the epoch during which this budget ran out.
    pub time_budget: Option<Duration>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the final epoch.
    pub last: TrainState,
    /// Parameters of the best validation epoch.
    pub best: Model,
    pub config_hash: String,
    pub stopped_early: bool,
}

/// Trains a fresh model.
pub fn train(
    data: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(model_cfg.clone(), data.grid.clone(), cfg.seed)?;
    let mut state = TrainState {
        adam: AdamState::new(&model.store),
        model,
        epoch: 0,
        best_val: f64::INFINITY,
        best_epoch: 0,
        log: Vec::new(),
    };
    if cfg.f32_storage {
        state.model.store.round_to_f32();
    }
    let best = state.model.clone();
    run(data, cfg, state, best, opts)
}

/// Continues from a checkpoint up to `cfg.epochs` total epochs. The
/// checkpoint's configs must hash identically to `cfg`.
pub fn resume(
    data: &Dataset,
    ckpt: Checkpoint,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ckpt.epoch > cfg.epochs {
        return Err(Error::InvalidConfig(format!(
            "checkpoint already ran to epoch {}",
            ckpt.epoch
        )));
    }
    let mut recorded = ckpt.train_config.clone();
    recorded.epochs = cfg.epochs;
    if &recorded != cfg {
        return Err(Error::InvalidConfig(
            "training config differs from the checkpoint's".into(),
        ));
    }
    let model = Model::with_store(ckpt.model_config.clone(), data.grid.clone(), ckpt.store)?;
    let state = TrainState {
        model: model.clone(),
        adam: ckpt.adam,
        epoch: ckpt.epoch,
        best_val: ckpt.best_val,
        best_epoch: ckpt.best_epoch,
        log: ckpt.log,
    };
    run(data, cfg, state, model, opts)
}

fn run(
    data: &Dataset,
    cfg: &TrainConfig,
    mut state: TrainState,
    mut best: Model,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let hash = config_hash(&state.model.config, cfg);
    let w = latitude_weights(&data.grid.lats)?;
    let train_set = make_samples(&state.model, data, Split::Train)?;
    let val_set = make_samples(&state.model, data, Split::Val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid(
            "train and val splits must each hold at least one full window",
        ));
    }
    let adam_cfg = AdamConfig::from(cfg);
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("train_log.jsonl");
            // rewrite so that a resumed run's log equals an uninterrupted one
            let mut f = File::create(&path)?;
            for r in &state.log {
                writeln!(f, "{}", serde_json::to_string(r)?)?;
            }
            Some(OpenOptions::new().append(true).open(path)?)
        }
        None => None,
    };
    let started = Instant::now();
    let mut stopped_early = false;
    while state.epoch < cfg.epochs {
        let t0 = Instant::now();
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = batch_grads(&state.model, &batch, &w, cfg.loss_variant, opts.exec)
                .map_err(|e| diverged(e, epoch, b))?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss {loss} at epoch {epoch}, batch {b} (adam step {})",
                    state.adam.step
                )));
            }
            check_grads(&state.model.store, &grads)?;
            if let Some(c) = cfg.grad_clip {
                clip(&mut grads, c);
            }
            adam_step(state.model.store.values_mut(), &grads, &mut state.adam, &adam_cfg)?;
            if cfg.f32_storage {
                state.model.store.round_to_f32();
                state.adam.round_to_f32();
            }
            epoch_loss += loss * batch.len() as f64;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = mean_loss(&state.model, &val_set, &w, cfg.loss_variant, opts.exec)
            .map_err(|e| diverged(e, epoch, usize::MAX))?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "validation loss {val_loss} at epoch {epoch}"
            )));
        }
        state.epoch = epoch;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_seconds: t0.elapsed().as_secs_f64(),
            config_hash: hash.clone(),
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch:>4}  train {train_loss:.6}  val {val_loss:.6}  ({:.2}s)",
                record.wall_seconds
            );
        }
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        state.log.push(record);
        let improved = val_loss < state.best_val;
        if improved {
            state.best_val = val_loss;
            state.best_epoch = epoch;
            best = state.model.clone();
        }
        if let Some(dir) = &opts.out_dir {
            let ckpt = Checkpoint::from_state(&state, cfg, &data.grid);
            ckpt.save(&dir.join("last.ckpt"))?;
            if improved {
                ckpt.save(&dir.join("best.ckpt"))?;
            }
        }
        if let Some(budget) = opts.time_budget {
            if started.elapsed() >= budget && state.epoch < cfg.epochs {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        last: state,
        best,
        config_hash: hash,
        stopped_early,
    })
}

/// Parameter groups whose gradients are verified.
pub const GRADCHECK_GROUPS: [&str; 6] = ["lift", "experts", "gate", "prompt", "attention", "head"];

/// Group of a parameter name, if it belongs to one of the verified groups.
pub fn param_group(name: &str) -> Option<&'static str> {
    if name.starts_with("fmoe.lift.") {
        Some("lift")
    } else if name.starts_with("fmoe.expert") {
        Some("experts")
    } else if name.starts_with("fmoe.gate.") {
        Some("gate")
    } else if name.starts_with("prompt.") {
        Some("prompt")
    } else if name.starts_with("backbone.block") && name.contains(".attn.") {
        Some("attention")
    } else if name.starts_with("head.") {
        Some("head")
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub samples_per_group: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Test hook: perturb the analytic gradient of this parameter's first
    /// sampled entry before comparison.
    pub corrupt_param: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            samples_per_group: 20,
            step: 1e-4,
            tolerance: 1e-4,
            seed: 0,
            corrupt_param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub group: String,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub precision: String,
    pub step: f64,
    pub tolerance: f64,
    /// Smallest denominator of the relative error; see [`gradcheck`].
    pub denominator_floor: f64,
    pub groups: Vec<GroupSummary>,
    pub entries: Vec<GradcheckEntry>,
    pub passed: bool,
}

/// Compares analytic gradients of the summed loss over `samples` with
/// central differences, sampling entries uniformly inside each group.
/// Runs entirely in `f64`; parameters are never rounded.
///
/// The relative error is `|a - n| / max(|a|, |n|, floor)`. Central
/// differences carry rounding noise of about `ε·|L|/h`, so entries much
/// smaller than that divided by the tolerance cannot be resolved; the floor
/// is ten times that level (and never below 1e-8).
pub fn gradcheck(
    model: &Model,
    samples: &[Sample],
    w: &LatWeights,
    variant: LossVariant,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    if samples.is_empty() {
        return Err(Error::invalid("gradcheck needs at least one sample"));
    }
    let total_loss = |store: &ParamStore| -> Result<f64> {
        samples
            .iter()
            .map(|s| sample_loss(model, store, s, w, variant))
            .sum()
    };
    let mut analytic = model.store.zeros_like();
    for s in samples {
        let (_, g) = sample_grads(model, &model.store, s, w, variant)?;
        for (a, gi) in analytic.iter_mut().zip(&g) {
            a.add_assign(gi);
        }
    }
    let floor =
        (10.0 * f64::EPSILON * total_loss(&model.store)?.abs() / (opts.step * opts.tolerance)).max(1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::new();
    let mut groups = Vec::new();
    let mut corrupted = false;
    for group in GRADCHECK_GROUPS {
        // every (param, index) pair in the group, weighted uniformly
        let members: Vec<(usize, usize)> = model
            .store
            .iter()
            .filter(|(_, name, _)| param_group(name) == Some(group))
            .flat_map(|(id, _, m)| (0..m.len()).map(move |i| (id.0, i)))
            .collect();
        if members.is_empty() {
            return Err(Error::invalid(format!("no parameters in group {group}")));
        }
        let n = opts.samples_per_group.min(members.len());
        let picks: Vec<(usize, usize)> = if n == members.len() {
            members.clone()
        } else {
            rand::seq::index::sample(&mut rng, members.len(), n)
                .into_iter()
                .map(|i| members[i])
                .collect()
        };
        let mut max_rel: f64 = 0.0;
        for (pid, idx) in picks {
            let id = crate::params::ParamId(pid);
            let name = model.store.name(id).to_string();
            let mut a = analytic[pid].data[idx];
            if !corrupted && opts.corrupt_param.as_deref() == Some(name.as_str()) {
                a = a * 1.5 + 1e-3 * rng.random_range(1.0..2.0);
                corrupted = true;
            }
            let mut store = model.store.clone();
            let x0 = store.get(id).data[idx];
            store.get_mut(id).data[idx] = x0 + opts.step;
            let up = total_loss(&store)?;
            store.get_mut(id).data[idx] = x0 - opts.step;
            let down = total_loss(&store)?;
            let numeric = (up - down) / (2.0 * opts.step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            max_rel = max_rel.max(rel);
            entries.push(GradcheckEntry {
                group: group.to_string(),
                param: name,
                index: idx,
                analytic: a,
                numeric,
                rel_error: rel,
                passed: rel <= opts.tolerance,
            });
        }
        groups.push(GroupSummary {
            group: group.to_string(),
            checked: n,
            max_rel_error: max_rel,
            passed: max_rel <= opts.tolerance,
        });
    }
    if let Some(p) = &opts.corrupt_param {
        if !corrupted {
            return Err(Error::invalid(format!(
                "corrupt hook target {p} was never sampled"
            )));
        }
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradcheckReport {
        precision: "f64".into(),
        step: opts.step,
        tolerance: opts.tolerance,
        denominator_floor: floor,
        groups,
        entries,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use std::sync::Arc;

    fn field(lats: Vec<f64>, n: usize, vals: Vec<f64>) -> GridField {
        let lons = (0..n).map(|i| i as f64 * 360.0 / n as f64).collect();
        let g = Arc::new(GridSpec::new(vec!["a".into()], lats, lons).unwrap());
        GridField::new(g, vals).unwrap()
    }

    #[test]
    fn latitude_weight_cases() {
        assert_eq!(latitude_weights(&[0.0]).unwrap().alpha, vec![1.0]);
        assert_eq!(latitude_weights(&[-45.0, 45.0]).unwrap().alpha, vec![0.5, 0.5]);
        let w = latitude_weights(&[0.0, 60.0]).unwrap().alpha;
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!(latitude_weights(&[90.0, -90.0]).is_err());
        assert!(latitude_weights(&[91.0]).is_err());
    }

    #[test]
    fn rmse_hand_cases() {
        // one-column case, with the column duplicated since grids need N >= 2
        let t = field(vec![-45.0, 45.0], 2, vec![0.0; 4]);
        let p = field(vec![-45.0, 45.0], 2, vec![1.0, 1.0, -1.0, -1.0]);
        let w = latitude_weights(&[-45.0, 45.0]).unwrap();
        let r = weighted_rmse(&p, &t, &w).unwrap()[0];
        assert!((r - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(weighted_rmse(&t, &t, &w).unwrap(), vec![0.0]);

        // constant error c on M rows gives |c|/sqrt(M)
        let lats = vec![60.0, 20.0, -10.0, -50.0];
        let w = latitude_weights(&lats).unwrap();
        let t = field(lats.clone(), 3, vec![0.0; 12]);
        let p = field(lats, 3, vec![-2.5; 12]);
        let r = weighted_rmse(&p, &t, &w).unwrap()[0];
        assert!((r - 2.5 / 2.0).abs() < 1e-12);
        let r = weighted_rmse_with(&p, &t, &w, LossVariant::WeatherbenchNormalized).unwrap()[0];
        assert!((r - 2.5).abs() < 1e-12);
    }

    #[test]
    fn loss_graph_matches_value_level() {
        let lats = vec![50.0, 10.0, -30.0];
        let names = vec!["a".to_string(), "b".to_string()];
        let lons = vec![0.0, 90.0, 180.0, 270.0];
        let g = Arc::new(GridSpec::new(names, lats.clone(), lons).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mk = |rng: &mut ChaCha8Rng| {
            GridField::new(g.clone(), (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (p, t) = (mk(&mut rng), mk(&mut rng));
        let w = latitude_weights(&lats).unwrap();
        for variant in [LossVariant::UnitSum, LossVariant::WeatherbenchNormalized] {
            let per_var = weighted_rmse_with(&p, &t, &w, variant).unwrap();
            let store = ParamStore::new();
            let mut graph = Graph::new(&store);
            let pv = graph.constant(Mat::from_vec(6, 4, p.values.clone()));
            let l = loss_graph(&mut graph, pv, &t, &w, variant).unwrap();
            let expected = (per_var[0] + per_var[1]) / 2.0;
            assert!((graph.value(l).data[0] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_first_step_by_hand() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut p = vec![Mat::scalar(1.0)];
        let mut st = AdamState {
            step: 0,
            m: vec![Mat::scalar(0.0)],
            v: vec![Mat::scalar(0.0)],
        };
        adam_step(&mut p, &[Mat::scalar(0.5)], &mut st, &cfg).unwrap();
        // m̂ = 0.5, v̂ = 0.25 → Δ = 0.1 · 0.5 / (0.5 + 1e-8)
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0].data[0] - expected).abs() < 1e-15);

        let before = p.clone();
        let mut st2 = st.clone();
        adam_step(&mut p, &[Mat::scalar(0.0)], &mut st2, &cfg).unwrap();
        // momentum keeps moving a parameter even with zero gradient, but a
        // fresh state with zero gradient leaves it untouched
        let mut q = before.clone();
        let mut fresh = AdamState {
            step: 0,
            m: vec![Mat::scalar(0.0)],
            v: vec![Mat::scalar(0.0)],
        };
        adam_step(&mut q, &[Mat::scalar(0.0)], &mut fresh, &cfg).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn adam_replay_is_deterministic() {
        let cfg = AdamConfig {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let g = vec![Mat::from_vec(1, 3, vec![0.3, -1.0, 2.0])];
        let mut a = vec![Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0])];
        let mut sa = AdamState {
            step: 0,
            m: vec![Mat::zeros(1, 3)],
            v: vec![Mat::zeros(1, 3)],
        };
        adam_step(&mut a, &g, &mut sa, &cfg).unwrap();
        let (mut b, mut sb) = (a.clone(), sa.clone());
        adam_step(&mut a, &g, &mut sa, &cfg).unwrap();
        adam_step(&mut b, &g, &mut sb, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn param_groups() {
        assert_eq!(param_group("fmoe.lift.w"), Some("lift"));
        assert_eq!(param_group("fmoe.expert3.w1"), Some("experts"));
        assert_eq!(param_group("backbone.block0.attn.wq"), Some("attention"));
        assert_eq!(param_group("backbone.block0.mlp.w1"), None);
        assert_eq!(param_group("head.ln.gamma"), Some("head"));
    }

    #[test]
    fn config_hash_tracks_flags() {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let base = config_hash(&m, &t);
        assert_eq!(base, config_hash(&m, &t));
        let no_fft = ModelConfig {
            use_fft: false,
            ..m.clone()
        };
        assert_ne!(base, config_hash(&no_fft, &t));
        assert_eq!(base.len(), 16);
        let longer = TrainConfig {
            epochs: t.epochs + 5,
            ..t.clone()
        };
        assert_eq!(base, config_hash(&m, &longer));
    }
}

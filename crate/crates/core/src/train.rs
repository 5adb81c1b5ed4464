//! Epoch/batch driver for standalone predictors and both mixture schemes,
//! training logs and checkpoints.
//!
//! Every scheme shuffles with the same `shuffle` stream and draws dropout
//! from the per-kind `dropout/<KIND>` streams, so runs that share a seed
//! see identical batches.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Instance, PanelDataset, Split};
use crate::mixture::{DropoutStreams, MixtureError, MixtureModel, MixtureSpec, Objective, DEFAULT_TAU};
use crate::nn::{DenseLayer, Mode, NnError, OptimizerConfig, OptimizerKind, OptimizerState, Parameterized};
use crate::predictors::{Predictor, PredictorKind, PredictorSpec};
use crate::rng::stream;

/// Batches between log records (epoch ends are always logged).
pub const LOG_EVERY: u64 = 50;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("scheme {scheme} does not fit a {model} model")]
    SchemeMismatch { scheme: Scheme, model: &'static str },
    #[error("training split is empty")]
    EmptyTrain,
    #[error("dataset dimensions (d_f={d_f}, d_n={d_n}) do not match the model (d_f={model_d_f}, d_n={model_d_n})")]
    DimMismatch { d_f: usize, d_n: usize, model_d_f: usize, model_d_n: usize },
    /// Training stopped at `step`; `model` holds the parameters after the
    /// last successful update.
    #[error("diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String, model: Box<Model>, log: TrainLog },
    #[error("component curves need a mixture run, got {0}")]
    WrongScheme(Scheme),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Standalone,
    MixtureConventional,
    MixtureDecoupled,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Standalone => "standalone",
            Scheme::MixtureConventional => "mixture_conventional",
            Scheme::MixtureDecoupled => "mixture_decoupled",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Overrides the dropout rate of the model spec.
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub scheme: Scheme,
    /// Overrides the temperature of a mixture spec.
    pub tau: f64,
    pub lambda_match: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 10,
            base_lr: 1e-4,
            weight_decay: 1e-4,
            dropout: 0.3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            scheme: Scheme::Standalone,
            tau: DEFAULT_TAU,
            lambda_match: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if n_train > 0 && self.batch_size > n_train {
            return bad(format!("batch_size {} exceeds {} training instances", self.batch_size, n_train));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda_match >= 0.0 && self.lambda_match.is_finite()) {
            return bad(format!("lambda_match must be nonnegative, got {}", self.lambda_match));
        }
        Ok(())
    }

    pub fn total_steps(&self, n_train: usize) -> u64 {
        (self.epochs * n_train.div_ceil(self.batch_size)) as u64
    }

    fn optimizer_config(&self, total_steps: u64) -> OptimizerConfig {
        OptimizerConfig { kind: self.optimizer, ..OptimizerConfig::adam(self.base_lr, self.weight_decay, total_steps) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelSpec {
    Predictor(PredictorSpec),
    Mixture(MixtureSpec),
}

impl ModelSpec {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            ModelSpec::Predictor(s) => (s.d_f, s.d_n),
            ModelSpec::Mixture(s) => (s.d_f, s.d_n),
        }
    }

    pub fn build(&self, seed: u64) -> Result<Model> {
        Ok(match self {
            ModelSpec::Predictor(s) => Model::Single(Predictor::build_seeded(s.clone(), seed)?),
            ModelSpec::Mixture(s) => Model::Mixture(MixtureModel::build(s, seed)?),
        })
    }

    fn zeroed(&self) -> Result<Model> {
        Ok(match self {
            ModelSpec::Predictor(s) => Model::Single(Predictor::zeroed(s.clone())?),
            ModelSpec::Mixture(s) => Model::Mixture(MixtureModel::from_parts(
                Predictor::zeroed(s.factors_spec())?,
                Predictor::zeroed(s.fusion_spec())?,
                DenseLayer::zeros("gate", s.d_f + s.d_n, 2, true, crate::nn::Activation::Identity),
                s.tau,
            )?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Single(Predictor),
    Mixture(MixtureModel),
}

impl Model {
    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Single(p) => ModelSpec::Predictor(p.spec().clone()),
            Model::Mixture(m) => ModelSpec::Mixture(m.spec()),
        }
    }

    pub fn predict(&self, x_f: &[f64], x_n: &[f64]) -> Result<f64> {
        Ok(match self {
            Model::Single(p) => p.predict(x_f, x_n)?,
            Model::Mixture(m) => m.predict(x_f, x_n, None)?,
        })
    }

    pub fn as_predictor(&self) -> Option<&Predictor> {
        match self {
            Model::Single(p) => Some(p),
            Model::Mixture(_) => None,
        }
    }

    pub fn as_mixture(&self) -> Option<&MixtureModel> {
        match self {
            Model::Mixture(m) => Some(m),
            Model::Single(_) => None,
        }
    }

    fn check_dims(&self, ds: &PanelDataset) -> Result<()> {
        let (d_f, d_n) = self.spec().dims();
        if ds.d_f() != d_f || ds.d_n() != d_n {
            return Err(TrainError::DimMismatch { d_f: ds.d_f(), d_n: ds.d_n(), model_d_f: d_f, model_d_n: d_n });
        }
        Ok(())
    }
}

impl Parameterized for Model {
    fn layers(&self) -> Vec<&DenseLayer> {
        match self {
            Model::Single(p) => p.layers(),
            Model::Mixture(m) => m.layers(),
        }
    }

    fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        match self {
            Model::Single(p) => p.layers_mut(),
            Model::Mixture(m) => m.layers_mut(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComponentId {
    #[serde(rename = "f")]
    Factors,
    #[serde(rename = "u")]
    Fusion,
    #[serde(rename = "single")]
    Single,
}

impl ComponentId {
    pub fn as_str(self) -> &'static str {
        match self {
            ComponentId::Factors => "f",
            ComponentId::Fusion => "u",
            ComponentId::Single => "single",
        }
    }
}

/// One log line. `mse` and `kl` are means over the batches since the
/// previous record; `lr` is the rate the schedule gives after this step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub component: ComponentId,
    pub mse: f64,
    pub kl: Option<f64>,
    pub lr: f64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub scheme: Scheme,
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    /// `step,component,mse,kl,lr`; `kl` is empty when absent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,component,mse,kl,lr\n");
        for r in &self.records {
            let kl = r.kl.map(|k| k.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", r.step, r.component.as_str(), r.mse, kl, r.lr));
        }
        out
    }

    /// Records without the wall-clock column, for determinism checks.
    pub fn loss_sequence(&self) -> Vec<(u64, ComponentId, f64, Option<f64>, f64)> {
        self.records.iter().map(|r| (r.step, r.component, r.mse, r.kl, r.lr)).collect()
    }

    pub fn last(&self, component: ComponentId) -> Option<&LogRecord> {
        self.records.iter().rev().find(|r| r.component == component)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCurves {
    pub steps: Vec<u64>,
    pub factors: Vec<f64>,
    pub fusion: Vec<f64>,
}

/// Aligned per-component training-error series of a mixture run.
pub fn component_curves(log: &TrainLog) -> Result<ComponentCurves> {
    if log.scheme == Scheme::Standalone {
        return Err(TrainError::WrongScheme(log.scheme));
    }
    let mut curves = ComponentCurves { steps: Vec::new(), factors: Vec::new(), fusion: Vec::new() };
    for r in &log.records {
        match r.component {
            ComponentId::Factors => {
                curves.steps.push(r.step);
                curves.factors.push(r.mse);
            }
            ComponentId::Fusion => curves.fusion.push(r.mse),
            ComponentId::Single => {}
        }
    }
    Ok(curves)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub total_steps: u64,
}

#[derive(Default)]
struct Window {
    batches: usize,
    mse: [f64; 2],
    kl: f64,
}

/// Builds the model from `spec` with the config's seed, dropout and
/// temperature, then trains it.
pub fn train(ds: &PanelDataset, spec: &ModelSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate(ds.split_len(Split::Train))?;
    let spec = match spec {
        ModelSpec::Predictor(s) => ModelSpec::Predictor(s.clone().with_dropout(config.dropout)),
        ModelSpec::Mixture(s) => ModelSpec::Mixture(MixtureSpec { dropout_rate: config.dropout, tau: config.tau, ..s.clone() }),
    };
    let model = spec.build(config.seed)?;
    fit(ds, model, config)
}

/// Trains an existing model on the train split.
pub fn fit(ds: &PanelDataset, mut model: Model, config: &TrainConfig) -> Result<TrainOutcome> {
    model.check_dims(ds)?;
    let scheme = config.scheme;
    match (&model, scheme) {
        (Model::Single(_), Scheme::Standalone) => {}
        (Model::Mixture(_), Scheme::MixtureConventional | Scheme::MixtureDecoupled) => {}
        (Model::Single(_), s) => return Err(TrainError::SchemeMismatch { scheme: s, model: "single-predictor" }),
        (Model::Mixture(_), s) => return Err(TrainError::SchemeMismatch { scheme: s, model: "mixture" }),
    }
    let train: Vec<&Instance> = ds.split(Split::Train).collect();
    if train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    config.validate(train.len())?;

    let total_steps = config.total_steps(train.len());
    let mut opt = OptimizerState::new(config.optimizer_config(total_steps));
    let mut shuffle = stream(config.seed, "shuffle");
    let mut single_dropout = match &model {
        Model::Single(p) => Some(stream(config.seed, &format!("dropout/{}", p.kind()))),
        Model::Mixture(_) => None,
    };
    let mut mix_dropout = DropoutStreams::seeded(config.seed);
    let mut log = TrainLog { scheme, records: Vec::new() };
    let started = Instant::now();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut window = Window::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let n_batches = order.len().div_ceil(config.batch_size);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Instance> = idx.iter().map(|&i| train[i]).collect();
            let step = opt.step_count();
            let outcome = match &mut model {
                Model::Single(p) => single_step(p, &batch, single_dropout.as_mut().expect("single stream")),
                Model::Mixture(m) => {
                    let objective = if scheme == Scheme::MixtureDecoupled {
                        Objective::Decoupled
                    } else {
                        Objective::Conventional
                    };
                    match objective {
                        Objective::Conventional => m.conventional_loss_step(&batch, Some(&mut mix_dropout)),
                        Objective::Decoupled => m.decoupled_loss_step(&batch, Some(&mut mix_dropout), config.lambda_match),
                    }
                    .map_err(TrainError::from)
                    .map(|l| ([l.mse_factors, l.mse_fusion], l.kl))
                }
            };
            let backup = model.flat_params();
            let stepped = outcome.and_then(|o| {
                opt.step(&mut model.layers_mut())?;
                if let Some(bad) = model.layers().iter().find(|l| !l.weight.iter().chain(&l.bias).all(|v| v.is_finite())) {
                    return Err(TrainError::Nn(NnError::NonFiniteGradient(format!("{} after update", bad.name()))));
                }
                Ok(o)
            });
            let (mse, kl) = match stepped {
                Ok(v) => v,
                Err(e @ (TrainError::Mixture(MixtureError::NonFiniteLoss(_)) | TrainError::Nn(NnError::NonFiniteGradient(_)))) => {
                    model.zero_grad();
                    model.set_flat_params(&backup)?;
                    return Err(TrainError::Diverged { step, reason: e.to_string(), model: Box::new(model), log });
                }
                Err(e) => return Err(e),
            };
            window.batches += 1;
            window.mse[0] += mse[0];
            window.mse[1] += mse[1];
            window.kl += kl.unwrap_or(0.0);
            let done = opt.step_count();
            if done % LOG_EVERY == 0 || b + 1 == n_batches {
                let lr = opt.current_lr()?;
                let secs = started.elapsed().as_secs_f64();
                let n = window.batches as f64;
                let kl = kl.map(|_| window.kl / n);
                let mut push = |component, mse: f64| {
                    log.records.push(LogRecord { step: done, epoch, component, mse: mse / n, kl, lr, wall_clock_secs: secs })
                };
                match model {
                    Model::Single(_) => push(ComponentId::Single, window.mse[0]),
                    Model::Mixture(_) => {
                        push(ComponentId::Factors, window.mse[0]);
                        push(ComponentId::Fusion, window.mse[1]);
                    }
                }
                window = Window::default();
            }
        }
    }
    Ok(TrainOutcome { model, log, total_steps })
}

fn single_step(p: &mut Predictor, batch: &[&Instance], rng: &mut crate::rng::Rng) -> Result<([f64; 2], Option<f64>)> {
    let n = batch.len() as f64;
    let mut sse = 0.0;
    for inst in batch {
        let (y, tape) = p.forward(&inst.factors, &inst.news_embedding, &mut Mode::Train(rng))?;
        let resid = inst.target_return - y;
        sse += resid * resid;
        p.backward(tape, -2.0 * resid / n);
    }
    let mse = sse / n;
    if !mse.is_finite() {
        return Err(TrainError::Mixture(MixtureError::NonFiniteLoss(mse)));
    }
    Ok(([mse, mse], None))
}

/// Eval-mode predictions for `split`, in dataset order.
pub fn evaluate(model: &Model, ds: &PanelDataset, split: Split) -> Result<Vec<f64>> {
    model.check_dims(ds)?;
    ds.split(split).map(|i| model.predict(&i.factors, &i.news_embedding)).collect()
}

/// Mean squared error of `model` on `split` in eval mode.
pub fn split_mse(model: &Model, ds: &PanelDataset, split: Split) -> Result<f64> {
    let preds = evaluate(model, ds, split)?;
    let n = preds.len().max(1) as f64;
    Ok(ds.split(split).zip(&preds).map(|(i, p)| (i.target_return - p).powi(2)).sum::<f64>() / n)
}

pub const CHECKPOINT_FORMAT: &str = "newsfusion-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

/// Checkpoint manifest. Parameters live in `params.bin` as little-endian
/// `f32`, layer by layer, weight (row-major, out × in) then bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelSpec,
    pub layers: Vec<LayerEntry>,
    pub num_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Writes `manifest.json` and `params.bin` into `dir` (created if needed).
pub fn save_checkpoint(model: &Model, dir: impl AsRef<Path>, config: Option<serde_json::Value>) -> Result<()> {
    let dir = dir.as_ref();
    let err = |message: String| TrainError::Checkpoint { path: dir.display().to_string(), message };
    fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: model.spec(),
        layers: model
            .layers()
            .iter()
            .map(|l| LayerEntry { name: l.name().into(), in_dim: l.in_dim(), out_dim: l.out_dim(), bias: l.has_bias() })
            .collect(),
        num_params: model.num_params(),
        config,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| err(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text).map_err(|e| err(e.to_string()))?;
    let bytes: Vec<u8> = model.flat_params().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    fs::write(dir.join(PARAMS_FILE), bytes).map_err(|e| err(e.to_string()))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let err = |message: String| TrainError::Checkpoint { path: dir.display().to_string(), message };
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| err(e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(err(format!("unsupported format {} v{}", manifest.format, manifest.version)));
    }
    let mut model = manifest.model.zeroed()?;
    let expected: Vec<LayerEntry> = model
        .layers()
        .iter()
        .map(|l| LayerEntry { name: l.name().into(), in_dim: l.in_dim(), out_dim: l.out_dim(), bias: l.has_bias() })
        .collect();
    if expected != manifest.layers || model.num_params() != manifest.num_params {
        return Err(err("layer table does not match the model spec".into()));
    }
    let bytes = fs::read(dir.join(PARAMS_FILE)).map_err(|e| err(e.to_string()))?;
    if bytes.len() != 4 * manifest.num_params {
        return Err(err(format!("expected {} parameter bytes, found {}", 4 * manifest.num_params, bytes.len())));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if !flat.iter().all(|v| v.is_finite()) {
        return Err(err("non-finite parameter".into()));
    }
    model.set_flat_params(&flat)?;
    Ok(model)
}

/// Convenience spec for a standalone predictor of `kind` on `ds`.
pub fn predictor_spec(kind: PredictorKind, ds: &PanelDataset) -> ModelSpec {
    ModelSpec::Predictor(PredictorSpec::new(kind, ds.d_f(), ds.d_n()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Regime, SynthConfig};

    fn small_synth(seed: u64) -> PanelDataset {
        generate(&SynthConfig { n_stocks: 20, n_months: 12, d_f: 5, d_n: 8, seed, ..SynthConfig::default() })
            .unwrap()
            .dataset
    }

    fn cfg(scheme: Scheme) -> TrainConfig {
        TrainConfig { epochs: 2, batch_size: 16, scheme, seed: 5, ..TrainConfig::default() }
    }

    #[test]
    fn epochs_zero_returns_initial_parameters() {
        let ds = small_synth(1);
        let spec = predictor_spec(PredictorKind::FusionAttention, &ds);
        let out = train(&ds, &spec, &TrainConfig { epochs: 0, seed: 5, ..TrainConfig::default() }).unwrap();
        assert!(out.log.records.is_empty());
        assert_eq!(out.total_steps, 0);
        let init = spec.build(5).unwrap();
        assert_eq!(out.model.flat_params(), init.flat_params());
    }

    #[test]
    fn same_seed_gives_identical_logs() {
        let ds = small_synth(2);
        let spec = ModelSpec::Mixture(MixtureSpec::new(5, 8));
        for scheme in [Scheme::MixtureConventional, Scheme::MixtureDecoupled] {
            let a = train(&ds, &spec, &cfg(scheme)).unwrap();
            let b = train(&ds, &spec, &cfg(scheme)).unwrap();
            assert_eq!(a.log.loss_sequence(), b.log.loss_sequence());
            assert_eq!(a.log.to_csv(), b.log.to_csv());
            assert_eq!(a.model, b.model);
        }
    }

    #[test]
    fn step_count_and_final_lr() {
        let ds = small_synth(3);
        let n_train = ds.split_len(Split::Train);
        let c = TrainConfig { epochs: 3, batch_size: 17, ..cfg(Scheme::Standalone) };
        let out = train(&ds, &predictor_spec(PredictorKind::NewsAlone, &ds), &c).unwrap();
        assert_eq!(out.total_steps, 3 * n_train.div_ceil(17) as u64);
        let last = out.log.records.last().unwrap();
        assert_eq!(last.step, out.total_steps);
        assert_eq!(last.lr, 0.0);
        assert!(out.log.records.windows(2).all(|w| w[0].step < w[1].step));
        // 160 training instances → 10 batches per epoch, so only epoch ends are logged.
        assert_eq!(out.log.records.len(), 3);
    }

    #[test]
    fn logging_cadence_every_fifty_batches() {
        let ds = generate(&SynthConfig { n_stocks: 50, n_months: 12, d_f: 5, d_n: 8, ..SynthConfig::default() })
            .unwrap()
            .dataset;
        // 400 train instances / 4 = 100 batches per epoch.
        let c = TrainConfig { epochs: 1, batch_size: 4, ..cfg(Scheme::MixtureDecoupled) };
        let out = train(&ds, &ModelSpec::Mixture(MixtureSpec::new(5, 8)), &c).unwrap();
        let curves = component_curves(&out.log).unwrap();
        assert_eq!(curves.steps, vec![50, 100]);
        assert_eq!(curves.factors.len(), curves.fusion.len());
        assert!(out.log.records.iter().all(|r| r.kl.is_some()));
    }

    #[test]
    fn component_curves_rejects_standalone_log() {
        let log = TrainLog { scheme: Scheme::Standalone, records: vec![] };
        assert!(matches!(component_curves(&log), Err(TrainError::WrongScheme(_))));
    }

    #[test]
    fn noiseless_linear_data_is_fit_by_factors_alone() {
        let synth = SynthConfig {
            n_stocks: 100,
            n_months: 12,
            d_f: 5,
            d_n: 8,
            noise_std_factors: 0.0,
            noise_std_return: 0.0,
            regime_schedule: Some(vec![Regime::FactorsOnly; 12]),
            ..SynthConfig::default()
        };
        let ds = generate(&synth).unwrap().dataset;
        let c = TrainConfig {
            epochs: 60,
            base_lr: 3e-3,
            weight_decay: 0.0,
            dropout: 0.0,
            ..cfg(Scheme::Standalone)
        };
        let out = train(&ds, &predictor_spec(PredictorKind::FactorsAlone, &ds), &c).unwrap();
        let mse = split_mse(&out.model, &ds, Split::Train).unwrap();
        assert!(mse < 1e-4, "train mse {mse}");
    }

    #[test]
    fn decoupled_components_match_standalone_training() {
        let ds = small_synth(4);
        let mix = train(&ds, &ModelSpec::Mixture(MixtureSpec::new(5, 8)), &cfg(Scheme::MixtureDecoupled)).unwrap();
        let fa = train(&ds, &predictor_spec(PredictorKind::FactorsAlone, &ds), &cfg(Scheme::Standalone)).unwrap();
        let m = mix.model.as_mixture().unwrap();
        assert_eq!(m.factors.flat_params(), fa.model.flat_params());
        let fa_last = fa.log.last(ComponentId::Single).unwrap().mse;
        assert_eq!(mix.log.last(ComponentId::Factors).unwrap().mse, fa_last);
    }

    #[test]
    fn evaluate_is_deterministic_and_recombines() {
        let ds = small_synth(5);
        let out = train(&ds, &ModelSpec::Mixture(MixtureSpec::new(5, 8)), &cfg(Scheme::MixtureConventional)).unwrap();
        let a = evaluate(&out.model, &ds, Split::Test).unwrap();
        assert_eq!(a, evaluate(&out.model, &ds, Split::Test).unwrap());
        assert_eq!(a.len(), ds.split_len(Split::Test));
        let m = out.model.as_mixture().unwrap();
        for (inst, y) in ds.split(Split::Test).zip(&a) {
            let (pf, pu) = m.gate_probs(&inst.factors, &inst.news_embedding).unwrap();
            let (gf, gu) = m.component_predictions(&inst.factors, &inst.news_embedding).unwrap();
            assert!((pf * gf + pu * gu - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = small_synth(6);
        let dir = tempfile::tempdir().unwrap();
        for spec in [ModelSpec::Mixture(MixtureSpec::new(5, 8)), predictor_spec(PredictorKind::Finin, &ds)] {
            let scheme = if matches!(spec, ModelSpec::Mixture(_)) { Scheme::MixtureDecoupled } else { Scheme::Standalone };
            let out = train(&ds, &spec, &cfg(scheme)).unwrap();
            let path = dir.path().join(format!("{scheme}"));
            save_checkpoint(&out.model, &path, None).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            let a = evaluate(&out.model, &ds, Split::Test).unwrap();
            let b = evaluate(&loaded, &ds, Split::Test).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-7));
        }
        fs::write(dir.path().join("standalone").join(PARAMS_FILE), [0u8; 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path().join("standalone")), Err(TrainError::Checkpoint { .. })));
    }

    #[test]
    fn rejects_mismatches_and_bad_configs() {
        let ds = small_synth(7);
        let single = predictor_spec(PredictorKind::NewsAlone, &ds);
        assert!(matches!(train(&ds, &single, &cfg(Scheme::MixtureDecoupled)), Err(TrainError::SchemeMismatch { .. })));
        let wrong = ModelSpec::Predictor(PredictorSpec::new(PredictorKind::NewsAlone, 5, 9));
        assert!(matches!(train(&ds, &wrong, &cfg(Scheme::Standalone)), Err(TrainError::DimMismatch { .. })));
        for c in [
            TrainConfig { batch_size: 0, ..cfg(Scheme::Standalone) },
            TrainConfig { batch_size: 10_000, ..cfg(Scheme::Standalone) },
            TrainConfig { base_lr: 0.0, ..cfg(Scheme::Standalone) },
            TrainConfig { dropout: 1.0, ..cfg(Scheme::Standalone) },
        ] {
            assert!(matches!(train(&ds, &single, &c), Err(TrainError::Config(_))));
        }
    }

    #[test]
    fn divergence_returns_last_good_model() {
        let ds = small_synth(8);
        let spec = predictor_spec(PredictorKind::NewsAlone, &ds);
        let c = TrainConfig { base_lr: 1e300, optimizer: OptimizerKind::Sgd, epochs: 50, ..cfg(Scheme::Standalone) };
        match train(&ds, &spec, &c) {
            Err(TrainError::Diverged { model, .. }) => {
                assert!(model.flat_params().iter().all(|v| v.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}

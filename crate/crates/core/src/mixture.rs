//! Gated two-component mixture: a factors-only component, a
//! representation-combination fusion component and a dense gate on
//! `x_f ⊕ x_n`.
//!
//! Two objectives are provided. The conventional one fits the mixture
//! prediction directly, so every parameter group sees the shared residual.
//! The decoupled one fits each component on its own squared error and
//! trains the gate separately by matching a detached, error-based target
//! distribution under KL.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Instance;
use crate::nn::{
    check_len, kl_discrete, softmax, softmax_backward, Activation, DenseLayer, DenseTape, Mode, NnError,
    OptimizerState, Parameterized,
};
use crate::predictors::{Predictor, PredictorKind, PredictorSpec, PredictorTape, DEFAULT_HIDDEN_DIM};
use crate::rng::{stream, Rng};

pub const DEFAULT_TAU: f64 = 0.01;

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("no instances with distinct component errors")]
    NoComparableInstances,
}

pub type Result<T> = std::result::Result<T, MixtureError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub d_f: usize,
    pub d_n: usize,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub tau: f64,
}

impl MixtureSpec {
    pub fn new(d_f: usize, d_n: usize) -> Self {
        Self { d_f, d_n, hidden_dim: DEFAULT_HIDDEN_DIM, dropout_rate: 0.3, tau: DEFAULT_TAU }
    }

    pub fn factors_spec(&self) -> PredictorSpec {
        PredictorSpec::new(PredictorKind::FactorsAlone, self.d_f, self.d_n)
            .with_hidden(self.hidden_dim)
            .with_dropout(self.dropout_rate)
    }

    pub fn fusion_spec(&self) -> PredictorSpec {
        PredictorSpec::new(PredictorKind::FusionCombination, self.d_f, self.d_n)
            .with_hidden(self.hidden_dim)
            .with_dropout(self.dropout_rate)
    }
}

/// Which mixture component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "f")]
    Factors,
    #[serde(rename = "u")]
    Fusion,
}

impl Component {
    pub fn id(self) -> &'static str {
        match self {
            Component::Factors => "f",
            Component::Fusion => "u",
        }
    }
}

/// Dropout streams for the two components during training.
#[derive(Debug, Clone)]
pub struct DropoutStreams {
    pub factors: Rng,
    pub fusion: Rng,
}

impl DropoutStreams {
    /// The same per-kind streams a standalone run with `seed` uses.
    pub fn seeded(seed: u64) -> Self {
        Self {
            factors: stream(seed, &format!("dropout/{}", PredictorKind::FactorsAlone)),
            fusion: stream(seed, &format!("dropout/{}", PredictorKind::FusionCombination)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub factors: Predictor,
    pub fusion: Predictor,
    /// Logits layer on `x_f ⊕ x_n` → 2 scores `(f, u)`.
    pub gate: DenseLayer,
    tau: f64,
}

/// One recorded mixture forward pass.
#[derive(Debug)]
pub struct MixtureForward {
    pub pred_factors: f64,
    pub pred_fusion: f64,
    pub probs: [f64; 2],
    pub prediction: f64,
    factors_tape: PredictorTape,
    fusion_tape: PredictorTape,
    gate_tape: DenseTape,
}

/// Losses of one batch step. Component MSEs always come from each
/// component's own predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    /// Value of the minimized objective (without the matching term for
    /// decoupled steps).
    pub loss: f64,
    pub mse_factors: f64,
    pub mse_fusion: f64,
    pub mse_mixture: f64,
    pub kl: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Conventional,
    Decoupled,
}

/// Error-based target over `(f, u)`: `softmax(−e_f²/τ, −e_u²/τ)`.
pub fn target_distribution(r: f64, pred_factors: f64, pred_fusion: f64, tau: f64) -> (f64, f64) {
    let ef = r - pred_factors;
    let eu = r - pred_fusion;
    let q = softmax(&[-(ef * ef) / tau, -(eu * eu) / tau]);
    (q[0], q[1])
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(MixtureError::NonFiniteLoss(v))
    }
}

impl MixtureModel {
    /// Components come from the per-kind init streams of `seed` (see
    /// [`Predictor::build_seeded`]); the gate from `init/gate`.
    pub fn build(spec: &MixtureSpec, seed: u64) -> Result<Self> {
        if !(spec.tau > 0.0) {
            return Err(MixtureError::Temperature(spec.tau));
        }
        let factors = Predictor::build_seeded(spec.factors_spec(), seed)?;
        let fusion = Predictor::build_seeded(spec.fusion_spec(), seed)?;
        let gate = DenseLayer::xavier(
            "gate",
            spec.d_f + spec.d_n,
            2,
            true,
            Activation::Identity,
            &mut stream(seed, "init/gate"),
        );
        Ok(Self { factors, fusion, gate, tau: spec.tau })
    }

    pub fn from_parts(factors: Predictor, fusion: Predictor, gate: DenseLayer, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(MixtureError::Temperature(tau));
        }
        Ok(Self { factors, fusion, gate, tau })
    }

    pub fn spec(&self) -> MixtureSpec {
        let f = self.factors.spec();
        MixtureSpec {
            d_f: f.d_f,
            d_n: f.d_n,
            hidden_dim: f.hidden_dim,
            dropout_rate: f.dropout_rate,
            tau: self.tau,
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0) {
            return Err(MixtureError::Temperature(tau));
        }
        self.tau = tau;
        Ok(())
    }

    pub fn component(&self, c: Component) -> &Predictor {
        match c {
            Component::Factors => &self.factors,
            Component::Fusion => &self.fusion,
        }
    }

    pub fn component_mut(&mut self, c: Component) -> &mut Predictor {
        match c {
            Component::Factors => &mut self.factors,
            Component::Fusion => &mut self.fusion,
        }
    }

    fn gate_input(&self, x_f: &[f64], x_n: &[f64]) -> Result<Vec<f64>> {
        let spec = self.factors.spec();
        check_len("gate x_f", spec.d_f, x_f.len())?;
        check_len("gate x_n", spec.d_n, x_n.len())?;
        Ok(x_f.iter().chain(x_n).copied().collect())
    }

    pub fn gate_logits(&self, x_f: &[f64], x_n: &[f64]) -> Result<[f64; 2]> {
        let z = self.gate.apply(&self.gate_input(x_f, x_n)?)?;
        Ok([z[0], z[1]])
    }

    /// `(p_f, p_u)`.
    pub fn gate_probs(&self, x_f: &[f64], x_n: &[f64]) -> Result<(f64, f64)> {
        let p = softmax(&self.gate_logits(x_f, x_n)?);
        Ok((p[0], p[1]))
    }

    /// Eval-mode component outputs `(g_f, g_u)`.
    pub fn component_predictions(&self, x_f: &[f64], x_n: &[f64]) -> Result<(f64, f64)> {
        Ok((self.factors.predict(x_f, x_n)?, self.fusion.predict(x_f, x_n)?))
    }

    /// `p_f·g_f + p_u·g_u`; `streams = None` is eval mode.
    pub fn predict(&self, x_f: &[f64], x_n: &[f64], streams: Option<&mut DropoutStreams>) -> Result<f64> {
        Ok(self.forward(x_f, x_n, streams)?.prediction)
    }

    pub fn forward(&self, x_f: &[f64], x_n: &[f64], streams: Option<&mut DropoutStreams>) -> Result<MixtureForward> {
        let input = self.gate_input(x_f, x_n)?;
        let ((pred_factors, factors_tape), (pred_fusion, fusion_tape)) = match streams {
            Some(s) => (
                self.factors.forward(x_f, x_n, &mut Mode::Train(&mut s.factors))?,
                self.fusion.forward(x_f, x_n, &mut Mode::Train(&mut s.fusion))?,
            ),
            None => (
                self.factors.forward(x_f, x_n, &mut Mode::Eval)?,
                self.fusion.forward(x_f, x_n, &mut Mode::Eval)?,
            ),
        };
        let (logits, gate_tape) = self.gate.forward(&input)?;
        let p = softmax(&logits);
        let probs = [p[0], p[1]];
        let prediction = probs[0] * pred_factors + probs[1] * pred_fusion;
        Ok(MixtureForward { pred_factors, pred_fusion, probs, prediction, factors_tape, fusion_tape, gate_tape })
    }

    /// Squared error of the mixture prediction, batch mean. Accumulates
    /// gradients into all three parameter groups; does not step.
    pub fn conventional_loss_step(
        &mut self,
        batch: &[&Instance],
        mut streams: Option<&mut DropoutStreams>,
    ) -> Result<StepLoss> {
        if batch.is_empty() {
            return Err(MixtureError::EmptyBatch);
        }
        let n = batch.len() as f64;
        let (mut loss, mut sf, mut su) = (0.0, 0.0, 0.0);
        for inst in batch {
            let fwd = self.forward(&inst.factors, &inst.news_embedding, streams.as_deref_mut())?;
            let resid = inst.target_return - fwd.prediction;
            loss += resid * resid;
            sf += (inst.target_return - fwd.pred_factors).powi(2);
            su += (inst.target_return - fwd.pred_fusion).powi(2);
            let g_pred = -2.0 * resid / n;
            let [pf, pu] = fwd.probs;
            self.factors.backward(fwd.factors_tape, pf * g_pred);
            self.fusion.backward(fwd.fusion_tape, pu * g_pred);
            let g_probs = [fwd.pred_factors * g_pred, fwd.pred_fusion * g_pred];
            let g_logits = softmax_backward(&fwd.probs, &g_probs);
            self.gate.backward(fwd.gate_tape, &g_logits);
        }
        let loss = check_finite(loss / n)?;
        Ok(StepLoss { loss, mse_factors: sf / n, mse_fusion: su / n, mse_mixture: loss, kl: None })
    }

    /// Independent squared errors for the components plus `λ`-weighted
    /// batch-mean KL(p_φ ‖ q) for the gate, with `q` computed from detached
    /// eval-mode component predictions taken before any update. Accumulates
    /// gradients; does not step.
    pub fn decoupled_loss_step(
        &mut self,
        batch: &[&Instance],
        mut streams: Option<&mut DropoutStreams>,
        lambda_match: f64,
    ) -> Result<StepLoss> {
        if batch.is_empty() {
            return Err(MixtureError::EmptyBatch);
        }
        let n = batch.len() as f64;
        let (mut sf, mut su, mut kl_sum, mut mix) = (0.0, 0.0, 0.0, 0.0);
        for inst in batch {
            let (x_f, x_n, r) = (&inst.factors, &inst.news_embedding, inst.target_return);
            // Targets from the current (pre-update) parameters; plain values,
            // so nothing flows back through them.
            let (tf, tu) = self.component_predictions(x_f, x_n)?;
            let q = target_distribution(r, tf, tu, self.tau);

            let fwd = self.forward(x_f, x_n, streams.as_deref_mut())?;
            let ef = r - fwd.pred_factors;
            let eu = r - fwd.pred_fusion;
            sf += ef * ef;
            su += eu * eu;
            mix += (r - fwd.prediction).powi(2);
            self.factors.backward(fwd.factors_tape, -2.0 * ef / n);
            self.fusion.backward(fwd.fusion_tape, -2.0 * eu / n);

            let p = fwd.probs;
            let qv = [q.0, q.1];
            let kl = kl_discrete(&p, &qv)?;
            kl_sum += kl;
            // ∂KL/∂z_i = p_i (ln(p_i/q_i) − KL)
            let g_logits: Vec<f64> = p
                .iter()
                .zip(&qv)
                .map(|(pi, qi)| {
                    if *pi > 0.0 {
                        lambda_match / n * pi * ((pi / qi.max(crate::nn::KL_FLOOR)).ln() - kl)
                    } else {
                        0.0
                    }
                })
                .collect();
            self.gate.backward(fwd.gate_tape, &g_logits);
        }
        let loss = check_finite((sf + su) / n)?;
        let kl = check_finite(kl_sum / n)?;
        Ok(StepLoss {
            loss,
            mse_factors: sf / n,
            mse_fusion: su / n,
            mse_mixture: mix / n,
            kl: Some(kl),
        })
    }

    /// Loss + one optimizer update over all three groups.
    pub fn train_step(
        &mut self,
        batch: &[&Instance],
        objective: Objective,
        lambda_match: f64,
        optimizer: &mut OptimizerState,
        streams: Option<&mut DropoutStreams>,
    ) -> Result<StepLoss> {
        let loss = match objective {
            Objective::Conventional => self.conventional_loss_step(batch, streams)?,
            Objective::Decoupled => self.decoupled_loss_step(batch, streams, lambda_match)?,
        };
        optimizer.step(&mut self.layers_mut())?;
        Ok(loss)
    }

    /// Fraction of instances on which the component with strictly lower
    /// squared error gets gate probability above 0.5. Exact ties are skipped.
    pub fn gate_error_alignment<'a>(&self, instances: impl IntoIterator<Item = &'a Instance>) -> Result<Alignment> {
        let (mut aligned, mut counted, mut ties) = (0usize, 0usize, 0usize);
        for inst in instances {
            let (gf, gu) = self.component_predictions(&inst.factors, &inst.news_embedding)?;
            let (pf, pu) = self.gate_probs(&inst.factors, &inst.news_embedding)?;
            let ef = (inst.target_return - gf).powi(2);
            let eu = (inst.target_return - gu).powi(2);
            if ef == eu {
                ties += 1;
                continue;
            }
            counted += 1;
            let p_better = if ef < eu { pf } else { pu };
            if p_better > 0.5 {
                aligned += 1;
            }
        }
        if counted == 0 {
            return Err(MixtureError::NoComparableInstances);
        }
        Ok(Alignment { fraction: aligned as f64 / counted as f64, counted, ties })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub fraction: f64,
    pub counted: usize,
    pub ties: usize,
}

impl Parameterized for MixtureModel {
    /// factors layers, fusion layers, gate.
    fn layers(&self) -> Vec<&DenseLayer> {
        let mut v = self.factors.layers();
        v.extend(self.fusion.layers());
        v.push(&self.gate);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        let mut v = self.factors.layers_mut();
        v.extend(self.fusion.layers_mut());
        v.push(&mut self.gate);
        v
    }
}

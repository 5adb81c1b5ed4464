//! Gradient-variance laboratory.
//!
//! For a component `i` with output `g_i` define `ζ = (r − r̂)·∇_θ g_i` and the
//! per-instance gradient `δ = −2·p·ζ`, where `r̂` is the mixture prediction
//! and `p` the gate probability (mixture scheme) or `r̂ = g_i`, `p = 1`
//! (standalone scheme). Variances of vectors use the trace convention
//! `Var(v) = E‖v − Ev‖²`. For independent `p` and `ζ`:
//!
//! `Var(δ) = 4·E²[p]·Var(ζ) + 4·E‖ζ‖²·Var(p)`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Instance, PanelDataset, Split};
use crate::mixture::{Component, MixtureError, MixtureModel};
use crate::nn::{Mode, NnError, Parameterized};
use crate::predictors::Predictor;
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum VarError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("non-finite gradient for component {0}")]
    NonFinite(&'static str),
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("samples have inconsistent dimensions")]
    Ragged,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
}

pub type Result<T> = std::result::Result<T, VarError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradScheme {
    Mixture,
    Standalone,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub zeta: Vec<f64>,
    pub p: f64,
    pub delta: Vec<f64>,
}

/// Per-instance samples for the factors and fusion components.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSamples {
    pub factors: Vec<GradSample>,
    pub fusion: Vec<GradSample>,
}

impl ComponentSamples {
    pub fn get(&self, c: Component) -> &[GradSample] {
        match c {
            Component::Factors => &self.factors,
            Component::Fusion => &self.fusion,
        }
    }
}

fn output_gradient(work: &mut Predictor, x_f: &[f64], x_n: &[f64]) -> Result<(f64, Vec<f64>)> {
    work.zero_grad();
    let (g, tape) = work.forward(x_f, x_n, &mut Mode::Eval)?;
    work.backward(tape, 1.0);
    Ok((g, work.flat_grads()))
}

/// Eval-mode per-instance `(ζ, p, δ)` for both components of a frozen model.
pub fn sample_gradients<'a>(
    model: &MixtureModel,
    instances: impl IntoIterator<Item = &'a Instance>,
    scheme: GradScheme,
) -> Result<ComponentSamples> {
    let mut work = [model.factors.clone(), model.fusion.clone()];
    let mut out = ComponentSamples { factors: Vec::new(), fusion: Vec::new() };
    for inst in instances {
        let (x_f, x_n, r) = (&inst.factors, &inst.news_embedding, inst.target_return);
        let (gf, grad_f) = output_gradient(&mut work[0], x_f, x_n)?;
        let (gu, grad_u) = output_gradient(&mut work[1], x_f, x_n)?;
        let (pf, pu) = model.gate_probs(x_f, x_n)?;
        let mixed = pf * gf + pu * gu;
        for (name, g, grad, p, sink) in [
            ("f", gf, grad_f, pf, &mut out.factors),
            ("u", gu, grad_u, pu, &mut out.fusion),
        ] {
            let (resid, p) = match scheme {
                GradScheme::Mixture => (r - mixed, p),
                GradScheme::Standalone => (r - g, 1.0),
            };
            let zeta: Vec<f64> = grad.iter().map(|d| resid * d).collect();
            let delta: Vec<f64> = zeta.iter().map(|z| -2.0 * p * z).collect();
            if !delta.iter().all(|v| v.is_finite()) {
                return Err(VarError::NonFinite(name));
            }
            sink.push(GradSample { zeta, p, delta });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub n: usize,
    pub mean_delta: Vec<f64>,
    /// Unbiased trace variance of δ.
    pub var_delta: f64,
    pub mean_p: f64,
    pub var_p: f64,
    pub var_zeta: f64,
    pub mean_sq_norm_zeta: f64,
    /// `4·E²[p]·Var(ζ)`.
    pub signal_term: f64,
    /// `4·E‖ζ‖²·Var(p)`.
    pub gate_term: f64,
}

impl VarianceEstimate {
    pub fn closed_form(&self) -> f64 {
        self.signal_term + self.gate_term
    }
}

fn trace_variance<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, n: usize) -> Result<(Vec<f64>, f64)> {
    let dim = rows.clone().next().map_or(0, |r| r.len());
    let mut mean = vec![0.0; dim];
    for row in rows.clone() {
        if row.len() != dim {
            return Err(VarError::Ragged);
        }
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let ss: f64 = rows.map(|row| row.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>()).sum();
    Ok((mean, ss / (n - 1) as f64))
}

pub fn empirical_variance(samples: &[GradSample]) -> Result<VarianceEstimate> {
    let n = samples.len();
    if n < 2 {
        return Err(VarError::TooFewSamples(n));
    }
    let (mean_delta, var_delta) = trace_variance(samples.iter().map(|s| s.delta.as_slice()), n)?;
    let (_, var_zeta) = trace_variance(samples.iter().map(|s| s.zeta.as_slice()), n)?;
    let mean_p = samples.iter().map(|s| s.p).sum::<f64>() / n as f64;
    let var_p = samples.iter().map(|s| (s.p - mean_p).powi(2)).sum::<f64>() / (n - 1) as f64;
    let mean_sq_norm_zeta = samples.iter().map(|s| s.zeta.iter().map(|z| z * z).sum::<f64>()).sum::<f64>() / n as f64;
    Ok(VarianceEstimate {
        n,
        mean_delta,
        var_delta,
        mean_p,
        var_p,
        var_zeta,
        mean_sq_norm_zeta,
        signal_term: 4.0 * mean_p * mean_p * var_zeta,
        gate_term: 4.0 * mean_sq_norm_zeta * var_p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum ProbDist {
    Uniform { lo: f64, hi: f64 },
    Constant { value: f64 },
}

impl ProbDist {
    fn moments(&self) -> (f64, f64) {
        match *self {
            ProbDist::Uniform { lo, hi } => ((lo + hi) / 2.0, (hi - lo).powi(2) / 12.0),
            ProbDist::Constant { value } => (value, 0.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ProbDist::Uniform { lo, hi } => (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo < hi,
            ProbDist::Constant { value } => (0.0..=1.0).contains(&value),
        };
        if ok {
            Ok(())
        } else {
            Err(VarError::Distribution(format!("{self:?} is not a distribution on [0, 1]")))
        }
    }
}

/// Independent Gaussian coordinates; `std = 0` everywhere makes ζ constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalDist {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SignalDist {
    /// `(Var(ζ), E‖ζ‖²)`.
    fn moments(&self) -> (f64, f64) {
        let var: f64 = self.std.iter().map(|s| s * s).sum();
        (var, var + self.mean.iter().map(|m| m * m).sum::<f64>())
    }

    fn validate(&self) -> Result<()> {
        if self.mean.is_empty() || self.mean.len() != self.std.len() || self.std.iter().any(|s| !(*s >= 0.0)) {
            return Err(VarError::Distribution("signal needs equal-length mean/std with std ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub n: usize,
    pub empirical: f64,
    pub closed_form: f64,
    pub relative_gap: f64,
    pub mean_p: f64,
    pub var_p: f64,
    pub var_zeta: f64,
    pub mean_sq_norm_zeta: f64,
}

/// Monte-Carlo `Var(δ)` for `δ = −2pζ` with `p` and `ζ` drawn independently,
/// against the closed form from the distributions' exact moments.
pub fn verify_identity(p: &ProbDist, zeta: &SignalDist, n: usize, seed: u64) -> Result<IdentityCheck> {
    p.validate()?;
    zeta.validate()?;
    if n < 2 {
        return Err(VarError::TooFewSamples(n));
    }
    let mut rng = stream(seed, "varlab/identity");
    let normals: Vec<Normal<f64>> = zeta
        .mean
        .iter()
        .zip(&zeta.std)
        .map(|(m, s)| Normal::new(*m, *s).map_err(|e| VarError::Distribution(e.to_string())))
        .collect::<Result<_>>()?;
    let dim = normals.len();
    // Welford accumulators per coordinate of δ.
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut delta = vec![0.0; dim];
    for k in 1..=n {
        let pk = match *p {
            ProbDist::Uniform { lo, hi } => rng.random_range(lo..hi),
            ProbDist::Constant { value } => value,
        };
        for (d, dist) in delta.iter_mut().zip(&normals) {
            *d = -2.0 * pk * dist.sample(&mut rng);
        }
        for j in 0..dim {
            let diff = delta[j] - mean[j];
            mean[j] += diff / k as f64;
            m2[j] += diff * (delta[j] - mean[j]);
        }
    }
    let empirical = m2.iter().sum::<f64>() / (n - 1) as f64;
    let (mean_p, var_p) = p.moments();
    let (var_zeta, mean_sq_norm_zeta) = zeta.moments();
    let closed_form = 4.0 * mean_p * mean_p * var_zeta + 4.0 * mean_sq_norm_zeta * var_p;
    let relative_gap = if closed_form == 0.0 { empirical.abs() } else { (empirical - closed_form).abs() / closed_form };
    Ok(IdentityCheck { n, empirical, closed_form, relative_gap, mean_p, var_p, var_zeta, mean_sq_norm_zeta })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentProbe {
    pub component: Component,
    pub estimate: VarianceEstimate,
}

/// Both entanglement terms per component on a frozen model. In trained
/// models `p` and `ζ` are dependent, so the terms are a diagnostic
/// decomposition and need not sum to `var_delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntanglementReport {
    pub n_instances: usize,
    pub note: String,
    pub components: Vec<ComponentProbe>,
}

pub fn training_entanglement_probe(
    model: &MixtureModel,
    ds: &PanelDataset,
    split: Split,
    n_instances: usize,
) -> Result<EntanglementReport> {
    let samples = sample_gradients(model, ds.split(split).take(n_instances), GradScheme::Mixture)?;
    let components = [Component::Factors, Component::Fusion]
        .into_iter()
        .map(|c| Ok(ComponentProbe { component: c, estimate: empirical_variance(samples.get(c))? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(EntanglementReport {
        n_instances: samples.factors.len(),
        note: "diagnostic decomposition: p and zeta are not independent in a trained model".into(),
        components,
    })
}

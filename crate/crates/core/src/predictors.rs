//! Single-head return predictors over `(x_f, x_n)`.
//!
//! Layer stacks, in parameter order:
//!
//! | kind | layers |
//! |------|--------|
//! | `FACTORS_ALONE` | `hidden1` (d_f→H, ReLU), `skip1` (d_f→H, bias-free, only if d_f≠H), `hidden2` (H→H, ReLU), `output` |
//! | `NEWS_ALONE` | `output` (d_n→1) |
//! | `FININ` | `proj_f` (d_f→H), `proj_n` (d_n→H), `output` |
//! | `FUSION_COMBINATION` | `bottleneck` (d_n→⌈d_n/2⌉, ReLU), `fusion` (d_f+⌈d_n/2⌉→H, ReLU), `output` |
//! | `FUSION_SUMMATION` | `proj_f` (d_f→H), `proj_n` (d_n→H), `output` |
//! | `FUSION_ATTENTION` | `proj_f`, `proj_n`, `logits` (d_f+d_n→2), `output` |
//!
//! `output` is always a linear H→1 layer (d_n→1 for `NEWS_ALONE`) and dropout
//! is applied to its input only. Projections are linear.

use serde::{Deserialize, Serialize};

use crate::nn::{
    check_len, dropout, softmax, softmax_backward, Activation, DenseLayer, DenseTape, DropoutMask, Mode,
    NnError, Parameterized, Result,
};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PredictorKind {
    FactorsAlone,
    NewsAlone,
    Finin,
    FusionCombination,
    FusionSummation,
    FusionAttention,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 6] = [
        PredictorKind::FactorsAlone,
        PredictorKind::NewsAlone,
        PredictorKind::Finin,
        PredictorKind::FusionCombination,
        PredictorKind::FusionSummation,
        PredictorKind::FusionAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PredictorKind::FactorsAlone => "FACTORS_ALONE",
            PredictorKind::NewsAlone => "NEWS_ALONE",
            PredictorKind::Finin => "FININ",
            PredictorKind::FusionCombination => "FUSION_COMBINATION",
            PredictorKind::FusionSummation => "FUSION_SUMMATION",
            PredictorKind::FusionAttention => "FUSION_ATTENTION",
        }
    }
}

impl std::fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_HIDDEN_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub kind: PredictorKind,
    pub d_f: usize,
    pub d_n: usize,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
}

impl PredictorSpec {
    pub fn new(kind: PredictorKind, d_f: usize, d_n: usize) -> Self {
        Self { kind, d_f, d_n, hidden_dim: DEFAULT_HIDDEN_DIM, dropout_rate: 0.3 }
    }

    pub fn with_hidden(mut self, hidden_dim: usize) -> Self {
        self.hidden_dim = hidden_dim;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    /// Width of the news bottleneck, rounded up for odd `d_n`.
    pub fn bottleneck_dim(&self) -> usize {
        self.d_n.div_ceil(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.d_f == 0 || self.d_n == 0 {
            return Err(NnError::Shape {
                what: format!("{} spec dimensions", self.kind),
                expected: 1,
                found: 0,
            });
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::DropoutRate(self.dropout_rate));
        }
        Ok(())
    }
}

/// Parameters of one predictor: its spec and layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    spec: PredictorSpec,
    layers: Vec<DenseLayer>,
}

/// Recorded forward pass of a [`Predictor`].
#[derive(Debug)]
pub struct PredictorTape {
    layers: Vec<Option<DenseTape>>,
    mask: DropoutMask,
    /// Intermediates needed by the multiplicative fusions.
    proj_f: Vec<f64>,
    proj_n: Vec<f64>,
    weights: Vec<f64>,
    scale: f64,
}

// Layer slots per kind.
const FA_H1: usize = 0;
const FA_SKIP: usize = 1;
const FA_H2: usize = 2;

impl Predictor {
    pub fn build(spec: PredictorSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let (d_f, d_n, h) = (spec.d_f, spec.d_n, spec.hidden_dim);
        let mut dense = |name: &str, i, o, bias, act| DenseLayer::xavier(name, i, o, bias, act, rng);
        use Activation::{Identity, Relu};
        let layers = match spec.kind {
            PredictorKind::FactorsAlone => {
                let h1 = dense("hidden1", d_f, h, true, Relu);
                let skip = if d_f == h {
                    // Placeholder slot with no parameters; the skip is the identity.
                    DenseLayer::zeros("skip1", 0, 0, false, Identity)
                } else {
                    dense("skip1", d_f, h, false, Identity)
                };
                let h2 = dense("hidden2", h, h, true, Relu);
                let out = dense("output", h, 1, true, Identity);
                vec![h1, skip, h2, out]
            }
            PredictorKind::NewsAlone => vec![dense("output", d_n, 1, true, Identity)],
            PredictorKind::Finin | PredictorKind::FusionSummation => vec![
                dense("proj_f", d_f, h, true, Identity),
                dense("proj_n", d_n, h, true, Identity),
                dense("output", h, 1, true, Identity),
            ],
            PredictorKind::FusionAttention => vec![
                dense("proj_f", d_f, h, true, Identity),
                dense("proj_n", d_n, h, true, Identity),
                dense("logits", d_f + d_n, 2, true, Identity),
                dense("output", h, 1, true, Identity),
            ],
            PredictorKind::FusionCombination => {
                let b = spec.bottleneck_dim();
                vec![
                    dense("bottleneck", d_n, b, true, Relu),
                    dense("fusion", d_f + b, h, true, Relu),
                    dense("output", h, 1, true, Identity),
                ]
            }
        };
        Ok(Self { spec, layers })
    }

    /// Builds from the initialization stream `init/<KIND>` of `seed`, so a
    /// component inside a mixture starts from the same parameters as the
    /// standalone predictor trained with the same seed.
    pub fn build_seeded(spec: PredictorSpec, seed: u64) -> Result<Self> {
        let label = format!("init/{}", spec.kind);
        Self::build(spec, &mut crate::rng::stream(seed, &label))
    }

    /// Same stack with every parameter set to zero.
    pub fn zeroed(spec: PredictorSpec) -> Result<Self> {
        let mut p = Self::build(spec, &mut crate::rng::stream(0, "zeroed"))?;
        for l in &mut p.layers {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        Ok(p)
    }

    pub fn spec(&self) -> &PredictorSpec {
        &self.spec
    }

    pub fn kind(&self) -> PredictorKind {
        self.spec.kind
    }

    /// Named layer lookup, e.g. `"output"` or `"proj_f"`.
    pub fn layer(&self, name: &str) -> Option<&DenseLayer> {
        self.layers.iter().find(|l| l.name() == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut DenseLayer> {
        self.layers.iter_mut().find(|l| l.name() == name)
    }

    fn check_inputs(&self, x_f: &[f64], x_n: &[f64]) -> Result<()> {
        check_len(&format!("{} x_f", self.spec.kind), self.spec.d_f, x_f.len())?;
        check_len(&format!("{} x_n", self.spec.kind), self.spec.d_n, x_n.len())
    }

    /// Deterministic prediction (no dropout, no tape).
    pub fn predict(&self, x_f: &[f64], x_n: &[f64]) -> Result<f64> {
        self.forward(x_f, x_n, &mut Mode::Eval).map(|(y, _)| y)
    }

    pub fn forward(&self, x_f: &[f64], x_n: &[f64], mode: &mut Mode<'_>) -> Result<(f64, PredictorTape)> {
        self.check_inputs(x_f, x_n)?;
        let n_layers = self.layers.len();
        let mut tapes: Vec<Option<DenseTape>> = (0..n_layers).map(|_| None).collect();
        let mut proj_f = Vec::new();
        let mut proj_n = Vec::new();
        let mut weights = Vec::new();
        let mut scale = 0.0;
        let rep = match self.spec.kind {
            PredictorKind::FactorsAlone => {
                let (a1, t1) = self.layers[FA_H1].forward(x_f)?;
                tapes[FA_H1] = Some(t1);
                let skip = if self.layers[FA_SKIP].in_dim() == 0 {
                    x_f.to_vec()
                } else {
                    let (s, ts) = self.layers[FA_SKIP].forward(x_f)?;
                    tapes[FA_SKIP] = Some(ts);
                    s
                };
                let h1: Vec<f64> = a1.iter().zip(&skip).map(|(a, s)| a + s).collect();
                let (a2, t2) = self.layers[FA_H2].forward(&h1)?;
                tapes[FA_H2] = Some(t2);
                a2.iter().zip(&h1).map(|(a, s)| a + s).collect()
            }
            PredictorKind::NewsAlone => x_n.to_vec(),
            PredictorKind::FusionCombination => {
                let (b, tb) = self.layers[0].forward(x_n)?;
                tapes[0] = Some(tb);
                let concat: Vec<f64> = x_f.iter().chain(&b).copied().collect();
                let (u, tu) = self.layers[1].forward(&concat)?;
                tapes[1] = Some(tu);
                u
            }
            PredictorKind::FusionSummation | PredictorKind::Finin | PredictorKind::FusionAttention => {
                let (hf, tf) = self.layers[0].forward(x_f)?;
                let (hn, tn) = self.layers[1].forward(x_n)?;
                tapes[0] = Some(tf);
                tapes[1] = Some(tn);
                let u: Vec<f64> = match self.spec.kind {
                    PredictorKind::FusionSummation => hf.iter().zip(&hn).map(|(a, b)| a + b).collect(),
                    PredictorKind::Finin => {
                        let inv = 1.0 / (self.spec.hidden_dim as f64).sqrt();
                        scale = hf.iter().zip(&hn).map(|(a, b)| a * b).sum::<f64>() * inv;
                        hf.iter().zip(&hn).map(|(a, b)| a + scale * b).collect()
                    }
                    _ => {
                        let concat: Vec<f64> = x_f.iter().chain(x_n).copied().collect();
                        let (z, tz) = self.layers[2].forward(&concat)?;
                        tapes[2] = Some(tz);
                        weights = softmax(&z);
                        hf.iter().zip(&hn).map(|(a, b)| weights[0] * a + weights[1] * b).collect()
                    }
                };
                proj_f = hf;
                proj_n = hn;
                u
            }
        };
        let (dropped, mask) = dropout(&rep, self.spec.dropout_rate, mode)?;
        let (y, t_out) = self.layers[n_layers - 1].forward(&dropped)?;
        tapes[n_layers - 1] = Some(t_out);
        Ok((y[0], PredictorTape { layers: tapes, mask, proj_f, proj_n, weights, scale }))
    }

    /// Accumulates `upstream · ∂ŷ/∂θ` into the layer gradients.
    pub fn backward(&mut self, mut tape: PredictorTape, upstream: f64) {
        let n_layers = self.layers.len();
        let out_tape = tape.layers[n_layers - 1].take().expect("output tape");
        let g_drop = self.layers[n_layers - 1].backward(out_tape, &[upstream]);
        let g_rep = tape.mask.apply(&g_drop);
        let mut tapes = std::mem::take(&mut tape.layers);
        let mut take = |i: usize| tapes[i].take().expect("layer tape");
        match self.spec.kind {
            PredictorKind::FactorsAlone => {
                // h2 = relu(W2 h1 + b2) + h1
                let g_h1_inner = self.layers[FA_H2].backward(take(FA_H2), &g_rep);
                let g_h1: Vec<f64> = g_rep.iter().zip(&g_h1_inner).map(|(a, b)| a + b).collect();
                self.layers[FA_H1].backward(take(FA_H1), &g_h1);
                if self.layers[FA_SKIP].in_dim() != 0 {
                    self.layers[FA_SKIP].backward(take(FA_SKIP), &g_h1);
                }
            }
            PredictorKind::NewsAlone => {}
            PredictorKind::FusionCombination => {
                let g_concat = self.layers[1].backward(take(1), &g_rep);
                let d_f = self.spec.d_f;
                self.layers[0].backward(take(0), &g_concat[d_f..]);
            }
            PredictorKind::FusionSummation => {
                self.layers[0].backward(take(0), &g_rep);
                self.layers[1].backward(take(1), &g_rep);
            }
            PredictorKind::Finin => {
                // u = hf + s·hn, s = ⟨hf, hn⟩/√H
                let inv = 1.0 / (self.spec.hidden_dim as f64).sqrt();
                let g_s: f64 = g_rep.iter().zip(&tape.proj_n).map(|(g, b)| g * b).sum();
                let g_hf: Vec<f64> = g_rep
                    .iter()
                    .zip(&tape.proj_n)
                    .map(|(g, b)| g + g_s * inv * b)
                    .collect();
                let g_hn: Vec<f64> = g_rep
                    .iter()
                    .zip(&tape.proj_f)
                    .map(|(g, a)| tape.scale * g + g_s * inv * a)
                    .collect();
                self.layers[0].backward(take(0), &g_hf);
                self.layers[1].backward(take(1), &g_hn);
            }
            PredictorKind::FusionAttention => {
                let a = &tape.weights;
                let g_a = [
                    g_rep.iter().zip(&tape.proj_f).map(|(g, v)| g * v).sum::<f64>(),
                    g_rep.iter().zip(&tape.proj_n).map(|(g, v)| g * v).sum::<f64>(),
                ];
                let g_logits = softmax_backward(a, &g_a);
                let g_hf: Vec<f64> = g_rep.iter().map(|g| a[0] * g).collect();
                let g_hn: Vec<f64> = g_rep.iter().map(|g| a[1] * g).collect();
                self.layers[2].backward(take(2), &g_logits);
                self.layers[0].backward(take(0), &g_hf);
                self.layers[1].backward(take(1), &g_hn);
            }
        }
    }

    /// `(a_f, a_n)` of an attention-fusion predictor.
    pub fn attention_weights(&self, x_f: &[f64], x_n: &[f64]) -> Result<(f64, f64)> {
        if self.spec.kind != PredictorKind::FusionAttention {
            return Err(NnError::WrongKind {
                expected: PredictorKind::FusionAttention.to_string(),
                found: self.spec.kind.to_string(),
            });
        }
        self.check_inputs(x_f, x_n)?;
        let concat: Vec<f64> = x_f.iter().chain(x_n).copied().collect();
        let p = softmax(&self.layers[2].apply(&concat)?);
        Ok((p[0], p[1]))
    }
}

impl Parameterized for Predictor {
    fn layers(&self) -> Vec<&DenseLayer> {
        self.layers.iter().collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        self.layers.iter_mut().collect()
    }
}

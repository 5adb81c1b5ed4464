//! Synthetic panels whose factor and news relevance switches by regime.
//!
//! Draw order is fixed. A structure stream (`synth/structure`) draws the
//! mixing matrices `A` (d_f × k_f) and `B` (d_n × k_n), the unit weight
//! vectors `w_f`, `w_n` and the unit regime-marker direction `m`, in that
//! order. A separate latent stream (`synth/latents`) then draws, per
//! instance in (month, stock) order: `s_f`, `s_n`, `ε_f`, `ε_n`, `ε_r`.
//! The structure therefore depends only on the seed and the dimensions.
//!
//! `x_n` additionally carries `±κ·m` (+ in `BOTH` months, − otherwise) so
//! that the regime is observable from the inputs; `κ = 0` turns this off.
//! All emitted values are rounded to `f32`, the storage precision.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Instance, PanelDataset, Split};
use crate::rng::{stream, Rng};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("no latents for stock {stock_id} at {timestamp}")]
    LatentsUnavailable { stock_id: u32, timestamp: i64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("latents file {path}: {message}")]
    Latents { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Regime {
    FactorsOnly,
    Both,
}

/// Spacing of consecutive months on the timestamp axis.
pub const MONTH_STRIDE: i64 = 30;

/// Alternating blocks of `block` months, starting with `FACTORS_ONLY`.
pub fn alternating_schedule(n_months: usize, block: usize) -> Vec<Regime> {
    let block = block.max(1);
    (0..n_months)
        .map(|m| if (m / block) % 2 == 0 { Regime::FactorsOnly } else { Regime::Both })
        .collect()
}

fn default_kappa() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_stocks: usize,
    pub n_months: usize,
    pub d_f: usize,
    pub d_n: usize,
    pub factor_signal_dim: usize,
    pub news_signal_dim: usize,
    pub noise_std_factors: f64,
    pub noise_std_news: f64,
    pub noise_std_return: f64,
    /// Defaults to alternating 3-month blocks.
    #[serde(default)]
    pub regime_schedule: Option<Vec<Regime>>,
    pub beta_news: f64,
    /// Magnitude `κ` of the regime marker in `x_n`.
    #[serde(default = "default_kappa")]
    pub regime_marker: f64,
    /// Months tagged train and val; the remainder is test. Defaults to
    /// 2/3 and 1/12 of the horizon.
    #[serde(default)]
    pub train_months: Option<usize>,
    #[serde(default)]
    pub val_months: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// 100 stocks × 36 months, d_f = 20, d_n = 32, k = 4, noise
    /// (0.1, 0.1, 0.03), alternating 3-month regimes, β = 1.
    fn default() -> Self {
        Self {
            n_stocks: 100,
            n_months: 36,
            d_f: 20,
            d_n: 32,
            factor_signal_dim: 4,
            news_signal_dim: 4,
            noise_std_factors: 0.1,
            noise_std_news: 0.1,
            noise_std_return: 0.03,
            regime_schedule: None,
            beta_news: 1.0,
            regime_marker: default_kappa(),
            train_months: None,
            val_months: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn schedule(&self) -> Vec<Regime> {
        self.regime_schedule.clone().unwrap_or_else(|| alternating_schedule(self.n_months, 3))
    }

    /// `(train, val)` month counts.
    pub fn split_months(&self) -> (usize, usize) {
        let train = self.train_months.unwrap_or((self.n_months * 2).div_ceil(3));
        let val = self.val_months.unwrap_or(self.n_months / 12);
        (train, val)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_stocks == 0 || self.n_months == 0 || self.d_f == 0 || self.d_n == 0 {
            return bad("n_stocks, n_months, d_f and d_n must be positive".into());
        }
        if self.factor_signal_dim == 0 || self.factor_signal_dim > self.d_f {
            return bad(format!("factor_signal_dim must be in 1..={}", self.d_f));
        }
        if self.news_signal_dim == 0 || self.news_signal_dim > self.d_n {
            return bad(format!("news_signal_dim must be in 1..={}", self.d_n));
        }
        for (name, v) in [
            ("noise_std_factors", self.noise_std_factors),
            ("noise_std_news", self.noise_std_news),
            ("noise_std_return", self.noise_std_return),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !self.beta_news.is_finite() || !self.regime_marker.is_finite() {
            return bad("beta_news and regime_marker must be finite".into());
        }
        if let Some(s) = &self.regime_schedule {
            if s.len() != self.n_months {
                return bad(format!("regime_schedule has {} entries for {} months", s.len(), self.n_months));
            }
        }
        let (train, val) = self.split_months();
        if train == 0 || train + val >= self.n_months {
            return bad(format!("split of {train} train + {val} val months leaves no train or test months"));
        }
        Ok(())
    }
}

/// The seed-fixed structure shared by every instance.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    /// Row-major d_f × k_f.
    pub a: Vec<f64>,
    /// Row-major d_n × k_n.
    pub b: Vec<f64>,
    pub w_f: Vec<f64>,
    pub w_n: Vec<f64>,
    pub marker: Vec<f64>,
}

fn gaussian_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    m.chunks(v.len()).map(|row| dot(row, v)).collect()
}

fn f32r(v: f64) -> f64 {
    f64::from(v as f32)
}

impl World {
    /// Entries of `A` and `B` are `N(0, 1/k)` so that noiseless inputs have
    /// roughly unit variance per coordinate.
    pub fn from_config(config: &SynthConfig) -> Self {
        let (kf, kn) = (config.factor_signal_dim, config.news_signal_dim);
        let mut rng = stream(config.seed, "synth/structure");
        let a = gaussian_vec(&mut rng, config.d_f * kf, 1.0 / (kf as f64).sqrt());
        let b = gaussian_vec(&mut rng, config.d_n * kn, 1.0 / (kn as f64).sqrt());
        let w_f = unit_vec(&mut rng, kf);
        let w_n = unit_vec(&mut rng, kn);
        let marker = unit_vec(&mut rng, config.d_n);
        Self { a, b, w_f, w_n, marker }
    }

    /// Noiseless return given the latents and regime, at storage precision.
    pub fn conditional_mean(&self, beta_news: f64, latent: &Latent) -> f64 {
        let mut r = dot(&self.w_f, &latent.s_f);
        if latent.regime == Regime::Both {
            r += beta_news * dot(&self.w_n, &latent.s_n);
        }
        f32r(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub stock_id: u32,
    pub timestamp: i64,
    pub regime: Regime,
    pub s_f: Vec<f64>,
    pub s_n: Vec<f64>,
}

/// Retained latent state keyed by `(stock_id, timestamp)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Latents {
    records: Vec<Latent>,
    index: HashMap<(u32, i64), usize>,
}

impl Latents {
    pub fn from_records(records: Vec<Latent>) -> Self {
        let index = records.iter().enumerate().map(|(i, l)| ((l.stock_id, l.timestamp), i)).collect();
        Self { records, index }
    }

    pub fn records(&self) -> &[Latent] {
        &self.records
    }

    pub fn get(&self, stock_id: u32, timestamp: i64) -> Result<&Latent> {
        self.index
            .get(&(stock_id, timestamp))
            .map(|&i| &self.records[i])
            .ok_or(SynthError::LatentsUnavailable { stock_id, timestamp })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let err = |message: String| SynthError::Latents { path: path.display().to_string(), message };
        let text = serde_json::to_string(&self.records).map_err(|e| err(e.to_string()))?;
        fs::write(path, text).map_err(|e| err(e.to_string()))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |message: String| SynthError::Latents { path: path.display().to_string(), message };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let records = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Ok(Self::from_records(records))
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: PanelDataset,
    pub latents: Latents,
    pub world: World,
}

pub fn generate(config: &SynthConfig) -> Result<Synthetic> {
    config.validate()?;
    let world = World::from_config(config);
    let schedule = config.schedule();
    let (train_months, val_months) = config.split_months();
    let (kf, kn) = (config.factor_signal_dim, config.news_signal_dim);
    let mut rng = stream(config.seed, "synth/latents");
    let normal = |std: f64| Normal::new(0.0, std).expect("validated std");
    let (eps_f, eps_n, eps_r) =
        (normal(config.noise_std_factors), normal(config.noise_std_news), normal(config.noise_std_return));

    let n = config.n_stocks * config.n_months;
    let mut instances = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for (month, &regime) in schedule.iter().enumerate() {
        let timestamp = month as i64 * MONTH_STRIDE;
        let split = if month < train_months {
            Split::Train
        } else if month < train_months + val_months {
            Split::Val
        } else {
            Split::Test
        };
        let sign = match regime {
            Regime::Both => 1.0,
            Regime::FactorsOnly => -1.0,
        };
        for stock in 0..config.n_stocks {
            let s_f = gaussian_vec(&mut rng, kf, 1.0);
            let s_n = gaussian_vec(&mut rng, kn, 1.0);
            let factors: Vec<f64> = matvec(&world.a, &s_f)
                .into_iter()
                .map(|v| f32r(v + eps_f.sample(&mut rng)))
                .collect();
            let news_embedding: Vec<f64> = matvec(&world.b, &s_n)
                .into_iter()
                .zip(&world.marker)
                .map(|(v, m)| f32r(v + sign * config.regime_marker * m + eps_n.sample(&mut rng)))
                .collect();
            let latent = Latent { stock_id: stock as u32, timestamp, regime, s_f, s_n };
            let mean = world.conditional_mean(config.beta_news, &latent);
            let target_return = f32r(mean + eps_r.sample(&mut rng));
            instances.push(Instance { stock_id: stock as u32, timestamp, split, factors, news_embedding, target_return });
            latents.push(latent);
        }
    }
    let dataset = PanelDataset::new(config.d_f, config.d_n, 1, instances)?;
    Ok(Synthetic { dataset, latents: Latents::from_records(latents), world })
}

/// Conditional mean of `r` for `instance`, from the retained latents.
pub fn oracle_predict(config: &SynthConfig, latents: &Latents, instance: &Instance) -> Result<f64> {
    let latent = latents.get(instance.stock_id, instance.timestamp)?;
    Ok(World::from_config(config).conditional_mean(config.beta_news, latent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::to_mfnr_bytes;

    fn small() -> SynthConfig {
        SynthConfig { n_stocks: 50, n_months: 24, seed: 3, ..SynthConfig::default() }
    }

    #[test]
    fn instance_count_and_schedule() {
        let s = generate(&small()).unwrap();
        assert_eq!(s.dataset.len(), 1200);
        let sched = alternating_schedule(8, 3);
        use Regime::*;
        assert_eq!(sched, vec![FactorsOnly, FactorsOnly, FactorsOnly, Both, Both, Both, FactorsOnly, FactorsOnly]);
        assert_eq!(small().split_months(), (16, 2));
        assert_eq!(SynthConfig::default().split_months(), (24, 3));
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = to_mfnr_bytes(&generate(&small()).unwrap().dataset);
        let b = to_mfnr_bytes(&generate(&small()).unwrap().dataset);
        assert_eq!(a, b);
        let c = to_mfnr_bytes(&generate(&small().with_seed(4)).unwrap().dataset);
        assert_ne!(a, c);
    }

    #[test]
    fn structure_ignores_panel_shape() {
        let a = World::from_config(&small());
        let b = World::from_config(&SynthConfig { n_stocks: 7, n_months: 5, ..small() });
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_factors_only_returns_are_linear_in_latents() {
        let cfg = SynthConfig {
            noise_std_return: 0.0,
            regime_schedule: Some(vec![Regime::FactorsOnly; 24]),
            ..small()
        };
        let s = generate(&cfg).unwrap();
        for inst in s.dataset.instances() {
            let l = s.latents.get(inst.stock_id, inst.timestamp).unwrap();
            let lin = dot(&s.world.w_f, &l.s_f);
            assert!((inst.target_return - lin).abs() < 1e-6);
            assert_eq!(oracle_predict(&cfg, &s.latents, inst).unwrap(), inst.target_return);
        }
    }

    #[test]
    fn oracle_ignores_news_latents_in_factors_only_months() {
        let cfg = small();
        let s = generate(&cfg).unwrap();
        let mut l = s.latents.records().iter().find(|l| l.regime == Regime::FactorsOnly).unwrap().clone();
        let base = s.world.conditional_mean(cfg.beta_news, &l);
        l.s_n.iter_mut().for_each(|v| *v += 3.0);
        assert_eq!(s.world.conditional_mean(cfg.beta_news, &l), base);
    }

    #[test]
    fn oracle_residual_matches_noise_variance() {
        let cfg = SynthConfig { n_stocks: 500, n_months: 24, noise_std_return: 0.05, ..small() };
        let s = generate(&cfg).unwrap();
        let n = s.dataset.len() as f64;
        let mse: f64 = s
            .dataset
            .instances()
            .iter()
            .map(|i| (i.target_return - oracle_predict(&cfg, &s.latents, i).unwrap()).powi(2))
            .sum::<f64>()
            / n;
        assert!((mse - 0.0025).abs() < 0.05 * 0.0025, "mse {mse}");
    }

    #[test]
    fn both_months_have_higher_return_variance() {
        let cfg = SynthConfig { n_stocks: 500, ..small() };
        let s = generate(&cfg).unwrap();
        let var = |regime: Regime| {
            let v: Vec<f64> = s
                .dataset
                .instances()
                .iter()
                .filter(|i| s.latents.get(i.stock_id, i.timestamp).unwrap().regime == regime)
                .map(|i| i.target_return)
                .collect();
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            (var, n)
        };
        let (vb, nb) = var(Regime::Both);
        let (vf, nf) = var(Regime::FactorsOnly);
        // Standard error of a sample variance ≈ σ²·√(2/(n−1)).
        let se = (vb * vb * 2.0 / (nb - 1.0) + vf * vf * 2.0 / (nf - 1.0)).sqrt();
        assert!(vb - vf > 3.0 * se, "{vb} vs {vf}");
        assert!(s.dataset.instances().iter().all(|i| i.target_return.is_finite()
            && i.factors.iter().chain(&i.news_embedding).all(|v| v.is_finite())));
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            SynthConfig { regime_schedule: Some(vec![Regime::Both; 3]), ..small() },
            SynthConfig { factor_signal_dim: 21, ..small() },
            SynthConfig { noise_std_news: -0.1, ..small() },
            SynthConfig { n_stocks: 0, ..small() },
            SynthConfig { train_months: Some(24), ..small() },
        ];
        for cfg in bad {
            assert!(matches!(generate(&cfg), Err(SynthError::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn latents_sidecar_round_trip() {
        let s = generate(&SynthConfig { n_stocks: 3, n_months: 12, ..small() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("latents.json");
        s.latents.save_json(&p).unwrap();
        assert_eq!(Latents::load_json(&p).unwrap(), s.latents);
        assert!(matches!(s.latents.get(99, 0), Err(SynthError::LatentsUnavailable { .. })));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let mut v = serde_json::to_value(small()).unwrap();
        v["bogus"] = 1.into();
        assert!(serde_json::from_value::<SynthConfig>(v).is_err());
    }
}

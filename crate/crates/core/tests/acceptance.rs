//! Acceptance gate. Runs every criterion, prints one line each and exits
//! non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::Rng as _;
use serde::Deserialize;

use newsfusion::data::{from_mfnr_bytes, to_mfnr_bytes, CrossSection, Instance, PanelDataset, Split};
use newsfusion::eval::{
    annualized_return, cumulative_curve, decile_assign, decile_returns, information_coefficient, mape,
    portfolio_series, section_decile_means, sharpe_ratio, PortfolioMode,
};
use newsfusion::mixture::{target_distribution, MixtureModel, MixtureSpec};
use newsfusion::nn::{kl_discrete, softmax, Mode, Parameterized};
use newsfusion::predictors::{Predictor, PredictorKind, PredictorSpec};
use newsfusion::rng::stream;
use newsfusion::synth::{generate, SynthConfig};
use newsfusion::train::{
    evaluate, load_checkpoint, predictor_spec, save_checkpoint, split_mse, train, ComponentId, ModelSpec, Scheme,
    TrainConfig, TrainOutcome,
};
use newsfusion::varlab::{verify_identity, ProbDist, SignalDist};

type Check = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness against central differences.

const FD_EPS: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero gradients.
const REL_FLOOR: f64 = 1e-7;

fn random_instances(n: usize, d_f: usize, d_n: usize, seed: u64) -> Vec<Instance> {
    let mut r = stream(seed, "acceptance/instances");
    (0..n)
        .map(|i| Instance {
            stock_id: i as u32,
            timestamp: 0,
            split: Split::Train,
            factors: (0..d_f).map(|_| r.random_range(-1.0..1.0)).collect(),
            news_embedding: (0..d_n).map(|_| r.random_range(-1.0..1.0)).collect(),
            target_return: r.random_range(-0.5..0.5),
        })
        .collect()
}

fn max_rel_error<M: Parameterized>(model: &mut M, analytic: &[f64], loss: impl Fn(&M) -> f64) -> f64 {
    let base = model.flat_params();
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[k] = base[k] + FD_EPS;
        model.set_flat_params(&p).unwrap();
        let up = loss(model);
        p[k] = base[k] - FD_EPS;
        model.set_flat_params(&p).unwrap();
        let down = loss(model);
        let numeric = (up - down) / (2.0 * FD_EPS);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(rel);
    }
    model.set_flat_params(&base).unwrap();
    worst
}

fn predictor_mse(p: &Predictor, data: &[Instance]) -> f64 {
    data.iter()
        .map(|i| (i.target_return - p.predict(&i.factors, &i.news_embedding).unwrap()).powi(2))
        .sum::<f64>()
        / data.len() as f64
}

fn criterion_gradients() -> Check {
    let (d_f, d_n, h) = (5, 8, 16);
    let data = random_instances(20, d_f, d_n, 1);
    let mut lines = Vec::new();
    let mut all_ok = true;
    for kind in PredictorKind::ALL {
        let spec = PredictorSpec::new(kind, d_f, d_n).with_hidden(h).with_dropout(0.0);
        let mut p = Predictor::build_seeded(spec, 11).unwrap();
        p.zero_grad();
        let n = data.len() as f64;
        for i in &data {
            let (y, tape) = p.forward(&i.factors, &i.news_embedding, &mut Mode::Eval).unwrap();
            p.backward(tape, -2.0 * (i.target_return - y) / n);
        }
        let analytic = p.flat_grads();
        let err = max_rel_error(&mut p, &analytic, |m| predictor_mse(m, &data));
        all_ok &= err <= GRAD_TOL;
        lines.push(format!("{kind}={err:.1e}"));
    }

    let spec = MixtureSpec { hidden_dim: h, dropout_rate: 0.0, ..MixtureSpec::new(d_f, d_n) };
    let refs: Vec<&Instance> = data.iter().collect();
    let mut m = MixtureModel::build(&spec, 12).unwrap();
    // Non-trivial gate.
    m.gate.weight.iter_mut().enumerate().for_each(|(k, w)| *w += 0.05 * ((k % 7) as f64 - 3.0));
    m.zero_grad();
    m.conventional_loss_step(&refs, None).unwrap();
    let analytic = m.flat_grads();
    let conv_loss = |m: &MixtureModel| {
        data.iter()
            .map(|i| (i.target_return - m.predict(&i.factors, &i.news_embedding, None).unwrap()).powi(2))
            .sum::<f64>()
            / data.len() as f64
    };
    let err = max_rel_error(&mut m, &analytic, conv_loss);
    all_ok &= err <= GRAD_TOL;
    lines.push(format!("mixture/conventional={err:.1e}"));

    // Decoupled: targets frozen at the base parameters.
    let lambda = 1.0;
    m.zero_grad();
    m.decoupled_loss_step(&refs, None, lambda).unwrap();
    let analytic = m.flat_grads();
    let targets: Vec<[f64; 2]> = data
        .iter()
        .map(|i| {
            let (gf, gu) = m.component_predictions(&i.factors, &i.news_embedding).unwrap();
            let q = target_distribution(i.target_return, gf, gu, m.tau());
            [q.0, q.1]
        })
        .collect();
    let dec_loss = |m: &MixtureModel| {
        let mut total = 0.0;
        for (i, q) in data.iter().zip(&targets) {
            let (gf, gu) = m.component_predictions(&i.factors, &i.news_embedding).unwrap();
            let (pf, pu) = m.gate_probs(&i.factors, &i.news_embedding).unwrap();
            total += (i.target_return - gf).powi(2) + (i.target_return - gu).powi(2);
            total += lambda * kl_discrete(&[pf, pu], q).unwrap();
        }
        total / data.len() as f64
    };
    let err = max_rel_error(&mut m, &analytic, dec_loss);
    all_ok &= err <= GRAD_TOL;
    lines.push(format!("mixture/decoupled={err:.1e}"));
    verdict(all_ok, format!("max rel err ≤ {GRAD_TOL:e}: {}", lines.join(" ")))
}

// ---------------------------------------------------------------------------
// 2. Variance identity.

fn criterion_identity() -> Check {
    let n = 1_000_000;
    let zeta = SignalDist { mean: vec![1.0], std: vec![1.0] };
    let mixed = verify_identity(&ProbDist::Uniform { lo: 0.2, hi: 0.8 }, &zeta, n, 7).unwrap();
    let standalone = verify_identity(&ProbDist::Constant { value: 1.0 }, &zeta, n, 8).unwrap();
    let closed_ok = (mixed.closed_form - 1.24).abs() < 1e-12 && (standalone.closed_form - 4.0).abs() < 1e-12;
    let ok = closed_ok && mixed.relative_gap <= 0.02 && standalone.relative_gap <= 0.02;
    verdict(
        ok,
        format!(
            "closed 1.24 empirical {:.4} gap {:.2}%; degenerate closed 4·Var(ζ)={:.4} empirical {:.4} gap {:.2}%",
            mixed.empirical,
            100.0 * mixed.relative_gap,
            standalone.closed_form,
            standalone.empirical,
            100.0 * standalone.relative_gap
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Decoupling contracts.

fn criterion_decoupling() -> Check {
    let data = random_instances(16, 5, 8, 3);
    let refs: Vec<&Instance> = data.iter().collect();
    let spec = MixtureSpec { hidden_dim: 16, dropout_rate: 0.0, ..MixtureSpec::new(5, 8) };
    let mut a = MixtureModel::build(&spec, 4).unwrap();
    let mut b = a.clone();
    let mut r = stream(5, "acceptance/phi");
    b.gate.weight.iter_mut().for_each(|w| *w += r.random_range(-1.0..1.0));
    b.gate.bias.iter_mut().for_each(|w| *w += r.random_range(-1.0..1.0));
    a.zero_grad();
    b.zero_grad();
    let la = a.decoupled_loss_step(&refs, None, 1.0).unwrap();
    let lb = b.decoupled_loss_step(&refs, None, 1.0).unwrap();
    let theta_invariant = la.loss == lb.loss
        && a.factors.flat_grads() == b.factors.flat_grads()
        && a.fusion.flat_grads() == b.fusion.flat_grads();

    let mut worst_posterior: f64 = 0.0;
    for _ in 0..10_000 {
        let rr: f64 = r.random_range(-0.2..0.2);
        let gf: f64 = r.random_range(-0.2..0.2);
        let gu: f64 = r.random_range(-0.2..0.2);
        let tau: f64 = r.random_range(0.005..0.1);
        let (qf, qu) = target_distribution(rr, gf, gu, tau);
        let lf = (-(rr - gf).powi(2) / tau).exp();
        let lu = (-(rr - gu).powi(2) / tau).exp();
        worst_posterior = worst_posterior.max((qf - lf / (lf + lu)).abs()).max((qu - lu / (lf + lu)).abs());
    }

    let mut kl_self: f64 = 0.0;
    let mut kl_min = f64::INFINITY;
    for _ in 0..10_000 {
        let p = softmax(&[r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)]);
        let q = softmax(&[r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)]);
        kl_self = kl_self.max(kl_discrete(&p, &p).unwrap().abs());
        kl_min = kl_min.min(kl_discrete(&p, &q).unwrap());
    }
    let ok = theta_invariant && worst_posterior <= 1e-15 && kl_self == 0.0 && kl_min >= -1e-12;
    verdict(
        ok,
        format!(
            "θ-grads invariant to φ: {theta_invariant}; posterior gap {worst_posterior:.1e}; max |KL(p‖p)| {kl_self:.1e}; min KL {kl_min:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4–6. Synthetic regime experiments.

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn experiment_config(seed: u64, scheme: Scheme) -> TrainConfig {
    TrainConfig { base_lr: 1e-3, epochs: 30, seed, scheme, ..TrainConfig::default() }
}

struct SeedRun {
    seed: u64,
    fa: TrainOutcome,
    fc: TrainOutcome,
    conventional: TrainOutcome,
    decoupled: TrainOutcome,
    ds: PanelDataset,
}

fn run_seed(seed: u64) -> SeedRun {
    let ds = generate(&SynthConfig::default().with_seed(seed)).unwrap().dataset;
    let standalone = experiment_config(seed, Scheme::Standalone);
    let fa = train(&ds, &predictor_spec(PredictorKind::FactorsAlone, &ds), &standalone).unwrap();
    let fc = train(&ds, &predictor_spec(PredictorKind::FusionCombination, &ds), &standalone).unwrap();
    let mix = ModelSpec::Mixture(MixtureSpec::new(ds.d_f(), ds.d_n()));
    let conventional = train(&ds, &mix, &experiment_config(seed, Scheme::MixtureConventional)).unwrap();
    let decoupled = train(&ds, &mix, &experiment_config(seed, Scheme::MixtureDecoupled)).unwrap();
    SeedRun { seed, fa, fc, conventional, decoupled, ds }
}

fn final_mse(o: &TrainOutcome, c: ComponentId) -> f64 {
    o.log.last(c).expect("logged component").mse
}

fn criterion_training_curves(runs: &[SeedRun], elapsed: f64) -> Check {
    let mut dec_ok = 0;
    let mut conv_ok = 0;
    let mut detail = Vec::new();
    for r in runs {
        let (sf, su) = (final_mse(&r.fa, ComponentId::Single), final_mse(&r.fc, ComponentId::Single));
        let dec = [
            final_mse(&r.decoupled, ComponentId::Factors) / sf,
            final_mse(&r.decoupled, ComponentId::Fusion) / su,
        ];
        let conv = [
            final_mse(&r.conventional, ComponentId::Factors) / sf,
            final_mse(&r.conventional, ComponentId::Fusion) / su,
        ];
        dec_ok += usize::from(dec.iter().all(|x| *x <= 1.1));
        conv_ok += usize::from(conv.iter().any(|x| *x > 1.1));
        detail.push(format!(
            "s{}: dec {:.2}/{:.2} conv {:.2}/{:.2}",
            r.seed, dec[0], dec[1], conv[0], conv[1]
        ));
    }
    verdict(
        dec_ok >= 4 && conv_ok >= 3 && elapsed < 900.0,
        format!(
            "decoupled ≤1.1× standalone {dec_ok}/5 (need 4), conventional >1.1× {conv_ok}/5 (need 3), {elapsed:.0}s; ratios f/u {}",
            detail.join(", ")
        ),
    )
}

fn criterion_adaptivity(runs: &[SeedRun]) -> Check {
    let mut wins = 0;
    let mut detail = Vec::new();
    for r in runs {
        let fa = split_mse(&r.fa.model, &r.ds, Split::Test).unwrap();
        let fc = split_mse(&r.fc.model, &r.ds, Split::Test).unwrap();
        let dec = split_mse(&r.decoupled.model, &r.ds, Split::Test).unwrap();
        wins += usize::from(dec < fa.min(fc));
        detail.push(format!("s{}: {dec:.4} vs min({fa:.4}, {fc:.4})", r.seed));
    }
    verdict(wins >= 4, format!("decoupled test MSE below both baselines {wins}/5 (need 4); {}", detail.join(", ")))
}

fn criterion_alignment(runs: &[SeedRun]) -> Check {
    let mut hits = 0;
    let mut detail = Vec::new();
    for r in runs {
        let m = r.decoupled.model.as_mixture().unwrap();
        let a = m.gate_error_alignment(r.ds.split(Split::Test)).unwrap();
        hits += usize::from(a.fraction > 0.55);
        detail.push(format!("{:.3}", a.fraction));
    }
    verdict(hits >= 4, format!("alignment > 0.55 on {hits}/5 seeds (need 4): [{}]", detail.join(", ")))
}

// ---------------------------------------------------------------------------
// 7. Backtest hand oracle.

#[derive(Deserialize)]
struct OracleSection {
    timestamp: i64,
    stock_ids: Vec<u32>,
    predicted: Vec<f64>,
    realized: Vec<f64>,
}

#[derive(Deserialize)]
struct OracleExpected {
    labels: Vec<Vec<usize>>,
    section_means: Vec<Vec<f64>>,
    decile_returns: Vec<f64>,
    long_only: Vec<f64>,
    long_short: Vec<f64>,
    long_only_annualized: f64,
    long_short_annualized: f64,
    long_only_sharpe: f64,
    long_short_sharpe: f64,
    long_only_cumulative: Vec<f64>,
    long_short_cumulative: Vec<f64>,
}

#[derive(Deserialize)]
struct Oracle {
    sections: Vec<OracleSection>,
    expected: OracleExpected,
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_backtest_oracle() -> Check {
    let oracle: Oracle = serde_json::from_str(include_str!("fixtures/backtest_oracle.json")).unwrap();
    let sections: Vec<CrossSection> = oracle
        .sections
        .into_iter()
        .map(|s| CrossSection::new(s.timestamp, s.stock_ids, s.predicted, s.realized).unwrap())
        .collect();
    let e = &oracle.expected;
    let labels_ok = sections.iter().zip(&e.labels).all(|(s, l)| decile_assign(s).unwrap() == *l);
    let mut gap: f64 = 0.0;
    for (s, m) in sections.iter().zip(&e.section_means) {
        gap = gap.max(max_gap(&section_decile_means(s).unwrap(), m));
    }
    gap = gap.max(max_gap(&decile_returns(&sections).unwrap(), &e.decile_returns));
    let lo = portfolio_series(&sections, PortfolioMode::LongOnly).unwrap();
    let ls = portfolio_series(&sections, PortfolioMode::LongShort).unwrap();
    gap = gap.max(max_gap(&lo, &e.long_only)).max(max_gap(&ls, &e.long_short));
    gap = gap.max((annualized_return(&lo).unwrap() - e.long_only_annualized).abs());
    gap = gap.max((annualized_return(&ls).unwrap() - e.long_short_annualized).abs());
    gap = gap.max((sharpe_ratio(&lo).unwrap() - e.long_only_sharpe).abs());
    gap = gap.max((sharpe_ratio(&ls).unwrap() - e.long_short_sharpe).abs());
    gap = gap.max(max_gap(&cumulative_curve(&lo).unwrap(), &e.long_only_cumulative));
    gap = gap.max(max_gap(&cumulative_curve(&ls).unwrap(), &e.long_short_cumulative));
    verdict(labels_ok && gap <= 1e-12, format!("decile labels match: {labels_ok}; max abs gap {gap:.1e} (≤ 1e-12)"))
}

// ---------------------------------------------------------------------------
// 8. Metric oracles.

fn criterion_metrics() -> Check {
    let sec = |p: &[f64], r: &[f64]| CrossSection::new(0, (0..p.len() as u32).collect(), p.to_vec(), r.to_vec()).unwrap();
    let ic = information_coefficient(&[sec(&[1.0, 2.0, 4.0, 3.0], &[1.0, 2.0, 3.0, 4.0])], false).unwrap().ic;
    let rev = information_coefficient(&[sec(&[4.0, 3.0, 2.0, 1.0], &[1.0, 2.0, 3.0, 4.0])], false).unwrap().ic;
    let m = mape(&[0.2, -0.1], &[0.1, -0.2], 1e-4).unwrap();
    let p23: Vec<f64> = (0..23).map(|i| i as f64 * 0.01).collect();
    let mut sizes = vec![0usize; 10];
    decile_assign(&sec(&p23, &p23)).unwrap().iter().for_each(|d| sizes[*d] += 1);
    let ok = (ic - 0.8).abs() < 1e-12
        && (rev + 1.0).abs() < 1e-12
        && (m - 0.75).abs() < 1e-12
        && sizes == [3, 2, 2, 3, 2, 2, 3, 2, 2, 2];
    verdict(ok, format!("IC {ic:.6}, reversed {rev:.6}, MAPE {m:.6}, n=23 sizes {sizes:?}"))
}

// ---------------------------------------------------------------------------
// 9. Rank invariance.

fn criterion_rank_invariance() -> Check {
    let mut r = stream(9, "acceptance/rank");
    let sections: Vec<CrossSection> = (0..6)
        .map(|t| {
            let n = 37;
            let p: Vec<f64> = (0..n).map(|_| r.random_range(-0.05..0.05)).collect();
            let y: Vec<f64> = (0..n).map(|_| r.random_range(-0.1..0.1)).collect();
            CrossSection::new(t, (0..n as u32).collect(), p, y).unwrap()
        })
        .collect();
    let moved: Vec<CrossSection> = sections
        .iter()
        .map(|s| {
            let p = s.predicted.iter().map(|x| 2.0 * x + 0.01).collect();
            CrossSection::new(s.timestamp, s.stock_ids.clone(), p, s.realized.clone()).unwrap()
        })
        .collect();
    let labels = |ss: &[CrossSection]| ss.iter().map(|s| decile_assign(s).unwrap()).collect::<Vec<_>>();
    let ic = |ss: &[CrossSection]| information_coefficient(ss, false).unwrap().ic.to_bits();
    let dec = |ss: &[CrossSection]| decile_returns(ss).unwrap().map(f64::to_bits);
    let port = |ss: &[CrossSection], m| portfolio_series(ss, m).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let checks = [
        ("deciles", labels(&sections) == labels(&moved)),
        ("IC", ic(&sections) == ic(&moved)),
        ("decile returns", dec(&sections) == dec(&moved)),
        ("long-only", port(&sections, PortfolioMode::LongOnly) == port(&moved, PortfolioMode::LongOnly)),
        ("long-short", port(&sections, PortfolioMode::LongShort) == port(&moved, PortfolioMode::LongShort)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(failed.is_empty(), if failed.is_empty() { "all outputs bit-identical under x ↦ 2x + 0.01".into() } else { format!("changed: {failed:?}") })
}

// ---------------------------------------------------------------------------
// 10. Determinism and persistence.

fn criterion_persistence() -> Check {
    let synth = SynthConfig { n_stocks: 40, n_months: 12, seed: 10, ..SynthConfig::default() };
    let ds = generate(&synth).unwrap().dataset;
    let mix = ModelSpec::Mixture(MixtureSpec::new(ds.d_f(), ds.d_n()));
    let cfg = TrainConfig { epochs: 3, seed: 10, scheme: Scheme::MixtureDecoupled, ..TrainConfig::default() };
    let a = train(&ds, &mix, &cfg).unwrap();
    let b = train(&ds, &mix, &cfg).unwrap();
    let logs_equal = a.log.loss_sequence() == b.log.loss_sequence() && !a.log.records.is_empty();

    let bytes = to_mfnr_bytes(&ds);
    let back = from_mfnr_bytes(&bytes).unwrap();
    let mfnr_exact = back == ds && to_mfnr_bytes(&back) == bytes;

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&a.model, dir.path(), None).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    let before = evaluate(&a.model, &ds, Split::Test).unwrap();
    let after = evaluate(&loaded, &ds, Split::Test).unwrap();
    let gap = max_gap(&before, &after);
    verdict(
        logs_equal && mfnr_exact && gap <= 1e-7,
        format!("identical logs: {logs_equal}; MFNR bit-exact: {mfnr_exact}; checkpoint max gap {gap:.1e} (≤ 1e-7)"),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, &str, Check)> = Vec::new();
    let timed = |id: &'static str, name: &'static str, f: &dyn Fn() -> Check, results: &mut Vec<_>| {
        let t = Instant::now();
        let r = f().map(|d| format!("{d} [{:.1}s]", t.elapsed().as_secs_f64()));
        results.push((id, name, r));
    };
    timed("1", "gradient correctness", &criterion_gradients, &mut results);
    timed("2", "variance identity", &criterion_identity, &mut results);
    timed("3", "decoupling contracts", &criterion_decoupling, &mut results);

    let t = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let elapsed = t.elapsed().as_secs_f64();
    results.push(("4", "component training curves", criterion_training_curves(&runs, elapsed)));
    results.push(("5", "mixture adaptivity", criterion_adaptivity(&runs)));
    results.push(("6", "gate-error alignment", criterion_alignment(&runs)));

    timed("7", "backtest oracle", &criterion_backtest_oracle, &mut results);
    timed("8", "metric oracles", &criterion_metrics, &mut results);
    timed("9", "rank invariance", &criterion_rank_invariance, &mut results);
    timed("10", "determinism and persistence", &criterion_persistence, &mut results);

    let mut failed = 0;
    for (id, name, r) in &results {
        match r {
            Ok(d) => println!("acceptance {id:>2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("acceptance {id:>2} FAIL  {name}: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

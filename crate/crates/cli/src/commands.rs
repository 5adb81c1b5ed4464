use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use newsfusion::data::{load_dataset, save_dataset, PanelDataset, Split};
use newsfusion::eval::{full_report, write_report, BacktestReport};
use newsfusion::synth::{generate, Regime, SynthConfig, Synthetic};
use newsfusion::train::{evaluate, load_checkpoint, save_checkpoint, split_mse, train, Model, TrainOutcome};
use newsfusion::varlab::{training_entanglement_probe, verify_identity, EntanglementReport, IdentityCheck};

use crate::config::RunConfig;
use crate::CliError;

pub const CONFIG_ECHO: &str = "config.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const VARLAB_FILE: &str = "varlab.json";

fn runtime(context: &str) -> impl Fn(&dyn std::fmt::Display) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    write(&dir.join(CONFIG_ECHO), cfg.to_json())
}

/// `<stem>.<suffix>` next to `path`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn synth_config(cfg: &RunConfig) -> SynthConfig {
    cfg.synth.clone().unwrap_or_default().with_seed(cfg.seed())
}

fn generate_checked(cfg: &SynthConfig) -> Result<Synthetic, CliError> {
    generate(cfg).map_err(|e| CliError::Validation(format!("`synth`: {e}")))
}

/// Dataset from `--data`, then `data.path`, then the `synth` section.
fn dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<PanelDataset, CliError> {
    let path = data.map(Path::to_path_buf).or_else(|| cfg.data.as_ref().map(|d| d.path.clone()));
    match path {
        Some(p) => load_dataset(&p).map_err(|e| CliError::Validation(format!("data file {}: {e}", p.display()))),
        None if cfg.synth.is_some() => Ok(generate_checked(&synth_config(cfg))?.dataset),
        None => Err(CliError::Validation("no dataset: pass --data or add a `data` or `synth` section".into())),
    }
}

fn load_model(dir: &Path) -> Result<Model, CliError> {
    load_checkpoint(dir).map_err(|e| CliError::Validation(e.to_string()))
}

fn check_dims(model: &Model, ds: &PanelDataset) -> Result<(), CliError> {
    let (d_f, d_n) = model.spec().dims();
    if (d_f, d_n) != (ds.d_f(), ds.d_n()) {
        return Err(CliError::Validation(format!(
            "checkpoint expects d_f={d_f}, d_n={d_n} but the dataset has d_f={}, d_n={}",
            ds.d_f(),
            ds.d_n()
        )));
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let sc = synth_config(cfg);
    let generated = generate_checked(&sc)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_dataset(&generated.dataset, out).map_err(|e| runtime("saving dataset")(&e))?;
    let latents = sidecar(out, "latents.json");
    generated.latents.save_json(&latents).map_err(|e| runtime("saving latents")(&e))?;
    write(&sidecar(out, CONFIG_ECHO), cfg.to_json())?;

    let schedule = sc.schedule();
    let both = schedule.iter().filter(|r| **r == Regime::Both).count();
    let ds = &generated.dataset;
    println!(
        "wrote {}: {} instances, d_f={}, d_n={}, {} months ({} FACTORS_ONLY, {both} BOTH), train/val/test {}/{}/{}",
        out.display(),
        ds.len(),
        ds.d_f(),
        ds.d_n(),
        schedule.len(),
        schedule.len() - both,
        ds.split_len(Split::Train),
        ds.split_len(Split::Val),
        ds.split_len(Split::Test),
    );
    println!("latents: {}", latents.display());
    Ok(())
}

fn train_into(cfg: &RunConfig, ds: &PanelDataset, out: &Path) -> Result<TrainOutcome, CliError> {
    create_dir(out)?;
    echo_config(cfg, out)?;
    let spec = cfg.model_spec(ds.d_f(), ds.d_n());
    let outcome = match train(ds, &spec, &cfg.train) {
        Ok(o) => o,
        Err(newsfusion::train::TrainError::Diverged { step, reason, log, .. }) => {
            write(&out.join(CURVES_FILE), log.to_csv())?;
            return Err(CliError::Runtime(format!("training diverged at step {step}: {reason}")));
        }
        Err(e @ newsfusion::train::TrainError::Config(_)) => return Err(CliError::Validation(format!("`train`: {e}"))),
        Err(e) => return Err(runtime("training")(&e)),
    };
    write(&out.join(CURVES_FILE), outcome.log.to_csv())?;
    let echo = serde_json::to_value(cfg).expect("config serializes");
    save_checkpoint(&outcome.model, out.join(CHECKPOINT_DIR), Some(echo)).map_err(|e| runtime("checkpoint")(&e))?;

    print!("trained {} ({} steps); final MSE", cfg.train.scheme, outcome.total_steps);
    for split in [Split::Train, Split::Val, Split::Test] {
        if ds.split_len(split) > 0 {
            let mse = split_mse(&outcome.model, ds, split).map_err(|e| runtime("evaluation")(&e))?;
            print!(" {split}={mse:.6}");
        }
    }
    println!();
    Ok(outcome)
}

pub fn train_cmd(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let ds = dataset(cfg, data)?;
    train_into(cfg, &ds, out)?;
    println!("artifacts in {}", out.display());
    Ok(())
}

fn backtest_into(cfg: &RunConfig, model: &Model, ds: &PanelDataset, out: &Path) -> Result<BacktestReport, CliError> {
    check_dims(model, ds)?;
    let split = cfg.eval.split;
    let preds = evaluate(model, ds, split).map_err(|e| runtime("prediction")(&e))?;
    let report = full_report(&preds, ds, split, cfg.eval.report_options()).map_err(|e| runtime("backtest")(&e))?;
    create_dir(out)?;
    write_report(&report, out).map_err(|e| runtime("writing report")(&e))?;
    echo_config(cfg, out)?;
    println!(
        "backtest on {split}: {} months, IC {:.4}, MAPE {:.4}, long-only ann. {:.4} (Sharpe {:.3}), long-short ann. {:.4} (Sharpe {:.3})",
        report.timestamps.len(),
        report.ic,
        report.mape,
        report.long_only.annualized_return,
        report.long_only.sharpe_ratio,
        report.long_short.annualized_return,
        report.long_short.sharpe_ratio,
    );
    Ok(report)
}

pub fn backtest(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let model = load_model(checkpoint)?;
    let ds = dataset(cfg, data)?;
    backtest_into(cfg, &model, &ds, out)?;
    Ok(())
}

#[derive(Serialize)]
struct VarlabReport {
    identity: IdentityCheck,
    #[serde(skip_serializing_if = "Option::is_none")]
    probe: Option<EntanglementReport>,
}

fn varlab_into(cfg: &RunConfig, trained: Option<(&Model, &PanelDataset)>, out: &Path) -> Result<(), CliError> {
    let v = &cfg.varlab;
    let identity = verify_identity(&v.p, &v.zeta, v.samples, cfg.seed())
        .map_err(|e| CliError::Validation(format!("`varlab`: {e}")))?;
    let probe = match trained {
        Some((model, ds)) => {
            let mixture = model
                .as_mixture()
                .ok_or_else(|| CliError::Validation("the entanglement probe needs a mixture checkpoint".into()))?;
            check_dims(model, ds)?;
            Some(
                training_entanglement_probe(mixture, ds, v.probe_split, v.probe_instances)
                    .map_err(|e| runtime("probe")(&e))?,
            )
        }
        None => None,
    };
    println!(
        "variance identity: N={}, closed form {:.6}, empirical {:.6}, gap {:.3}%",
        identity.n,
        identity.closed_form,
        identity.empirical,
        100.0 * identity.relative_gap
    );
    create_dir(out)?;
    let text = serde_json::to_string_pretty(&VarlabReport { identity, probe }).expect("report serializes");
    write(&out.join(VARLAB_FILE), text)?;
    echo_config(cfg, out)
}

pub fn varlab(cfg: &RunConfig, checkpoint: Option<&Path>, data: Option<&Path>, out: &Path) -> Result<(), CliError> {
    match checkpoint {
        Some(dir) => {
            let model = load_model(dir)?;
            let ds = dataset(cfg, data)?;
            varlab_into(cfg, Some((&model, &ds)), out)
        }
        None => varlab_into(cfg, None, out),
    }
}

/// Dataset, training, backtest and variance report in one directory.
pub fn report(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let ds = dataset(cfg, data)?;
    create_dir(out)?;
    if data.is_none() && cfg.data.is_none() {
        save_dataset(&ds, out.join("data.mfnr")).map_err(|e| runtime("saving dataset")(&e))?;
    }
    let outcome = train_into(cfg, &ds, out)?;
    backtest_into(cfg, &outcome.model, &ds, out)?;
    let trained = outcome.model.as_mixture().map(|_| (&outcome.model, &ds));
    varlab_into(cfg, trained, out)?;
    println!("report in {}", out.display());
    Ok(())
}

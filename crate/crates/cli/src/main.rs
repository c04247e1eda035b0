//! `calibra`: command-line driver for the calibration study.
//!
//! Every stage reads the same run config, so stages can be run one by one or
//! all at once with `run`. `CALIBRA_WORKERS` sets the worker thread count.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use calibra::blp::{blp_predict_rows, select_prior_precision};
use calibra::calibrators::{
    ensemble_predict, ensemble_train, load_ensemble, mc_dropout_predict, platt_apply, platt_fit, save_ensemble,
};
use calibra::data::{self, PredictionSet};
use calibra::harness::{
    self, format_metrics_csv, parse_metrics_csv, prepare_data, repeat_results, Method, MetricRow, RunConfig,
};
use calibra::metrics::summarize_predictions;
use calibra::mlp::{self, MlpHyperparams, MlpModel};
use calibra::seed::{derive_seed, tag};
use calibra::stats::{build_table, render_csv, render_markdown, TABLE_METRICS};
use calibra::synth::{make_synthetic, SynthSpec};
use calibra::tuning::grid_search;

const WORKERS_ENV: &str = "CALIBRA_WORKERS";

#[derive(Parser)]
#[command(name = "calibra", version, about = "Calibration benchmarking for MLP classifiers on sparse binary features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known Bayes-optimal probabilities.
    Synth {
        /// TOML file with generator parameters; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sparse dataset output; Bayes probabilities go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster the dataset and write the fold assignment.
    Split {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search the baseline hyperparameters.
    Tune {
        #[arg(long)]
        config: PathBuf,
        /// Directory for `tuning.csv` and `best.toml`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a baseline network, or a deep ensemble with `--ensemble-size`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Hyperparameter file from `tune`; defaults to `[baseline]` in the config.
        #[arg(long)]
        hp: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ensemble_size: Option<usize>,
        /// Model file, or directory for an ensemble.
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce test predictions of one method from a trained model.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Model file, or ensemble directory for MLP-E and MLP-E+P.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the metric summary of a prediction file.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = calibra::metrics::DEFAULT_BINS)]
        bins: usize,
        /// Method name written to the metrics row.
        #[arg(long, default_value = "MLP")]
        method: Method,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        /// Metrics CSV to write; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the annotated table from metrics CSVs of one or more runs.
    Report {
        /// `TARGET=PATH` pairs; PATH is a metrics CSV or a run directory.
        #[arg(long = "metrics", required = true, value_parser = parse_target)]
        metrics: Vec<(String, PathBuf)>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Directory for `table.csv` and `table.md`; markdown is printed either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline from a config, or repeat a run from its manifest.
    Run {
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory; overrides the config or manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_target(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((t, p)) if !t.is_empty() && !p.is_empty() => Ok((t.to_string(), PathBuf::from(p))),
        _ => Err(format!("expected TARGET=PATH, got {s:?}")),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(n) = std::env::var(WORKERS_ENV) {
        let n: usize = n.parse().with_context(|| format!("{WORKERS_ENV} must be a positive integer"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match Cli::parse().command {
        Command::Synth { spec, seed, out } => synth(spec.as_deref(), seed, &out),
        Command::Split { config, out } => split(&config, &out),
        Command::Tune { config, out } => tune(&config, &out),
        Command::Train {
            config,
            hp,
            seed,
            ensemble_size,
            out,
        } => train(&config, hp.as_deref(), seed, ensemble_size, &out),
        Command::Calibrate {
            config,
            model,
            method,
            seed,
            out,
        } => calibrate(&config, &model, method, seed, &out),
        Command::Evaluate {
            predictions,
            bins,
            method,
            repeat,
            out,
        } => evaluate(&predictions, bins, method, repeat, out.as_deref()),
        Command::Report { metrics, alpha, out } => report(&metrics, alpha, out.as_deref()),
        Command::Run { config, manifest, out } => run(config.as_deref(), manifest.as_deref(), out),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(cfg)
}

fn synth(spec: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let spec: SynthSpec = match spec {
        Some(p) => toml::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynthSpec::default(),
    };
    let s = make_synthetic(&spec, seed)?;
    write(out, &data::format_sparse_dataset(&s.dataset))?;
    let mut bayes = String::from("id,bayes_prob\n");
    for (id, p) in s.dataset.ids().iter().zip(&s.bayes_probs) {
        bayes.push_str(&format!("{id},{p:?}\n"));
    }
    write(&out.with_extension("bayes.csv"), &bayes)?;
    log::info!(
        "{} samples, dim {}, active ratio {:.4}",
        s.dataset.len(),
        s.dataset.dim(),
        s.dataset.active_ratio()
    );
    Ok(())
}

fn split(config: &Path, out: &Path) -> Result<()> {
    let prepared = prepare_data(&load_config(config)?)?;
    let ds = &prepared.dataset;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    data::save_folds(ds.ids(), ds.folds().expect("folds attached"), out)?;
    log::info!(
        "train {} / validation {} / test {}",
        prepared.split.train.len(),
        prepared.split.validation.len(),
        prepared.split.test.len()
    );
    Ok(())
}

fn tune(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let prepared = prepare_data(&cfg)?;
    let seed = derive_seed(cfg.seed, &[tag("tuning")]);
    let r = grid_search::<f64>(&prepared.dataset, &prepared.split, &cfg.grid, seed)?;
    write(&out.join("tuning.csv"), &r.table.to_csv())?;
    write(&out.join("best.toml"), &toml::to_string(&r.best)?)?;
    println!("{}", toml::to_string(&r.best)?);
    Ok(())
}

fn baseline_hp(cfg: &RunConfig, hp: Option<&Path>) -> Result<MlpHyperparams> {
    match (hp, &cfg.baseline) {
        (Some(p), _) => Ok(toml::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?),
        (None, Some(hp)) => Ok(hp.clone()),
        (None, None) => bail!("no --hp file and no [baseline] section in the config"),
    }
}

fn train(config: &Path, hp: Option<&Path>, seed: Option<u64>, ensemble_size: Option<usize>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let mut hp = baseline_hp(&cfg, hp)?;
    if let Some(s) = seed {
        hp.seed = s;
    }
    let prepared = prepare_data(&cfg)?;
    let (ds, split) = (&prepared.dataset, &prepared.split);
    match ensemble_size {
        Some(m) => {
            let e = ensemble_train::<f64>(ds, split, &hp, m, hp.seed)?;
            save_ensemble(&e, out)?;
            log::info!("trained {m} ensemble members");
        }
        None => {
            let (model, trace) = mlp::train::<f64>(ds, split, &hp)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            mlp::save_model(&model, out)?;
            log::info!(
                "{} epochs, best epoch {}, validation BCE {:.5}",
                trace.epochs_run,
                trace.best_epoch,
                trace.val_loss[trace.best_epoch]
            );
        }
    }
    Ok(())
}

fn calibrate(config: &Path, model: &Path, method: Method, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let prepared = prepare_data(&cfg)?;
    let (ds, split) = (&prepared.dataset, &prepared.split);
    let preds: PredictionSet<f64> = if method.is_ensemble() {
        let e = load_ensemble::<f64>(model)?;
        let test = ensemble_predict(&e, ds, &split.test)?;
        match method {
            Method::MlpEnsemble => test,
            _ => platt_apply(platt_fit(&ensemble_predict(&e, ds, &split.validation)?)?, &test)?,
        }
    } else {
        let m: MlpModel<f64> = mlp::load_model(model)?;
        match method {
            Method::Mlp => m.predict(ds, &split.test)?,
            Method::MlpPlatt => platt_apply(platt_fit(&m.predict(ds, &split.validation)?)?, &m.predict(ds, &split.test)?)?,
            Method::MlpDropout => {
                mc_dropout_predict(&m, ds, &split.test, cfg.mc_passes, derive_seed(seed, &[tag("mc-dropout")]))?
            }
            _ => {
                let sel = select_prior_precision(&m, ds, split, &cfg.blp.taus, &cfg.blp.hmc, derive_seed(seed, &[tag("blp")]))?;
                log::info!(
                    "prior precision {}, acceptance {:.3}, step size {:.4}",
                    sel.tau,
                    sel.posterior.accept_rate,
                    sel.posterior.epsilon
                );
                let test = blp_predict_rows(&sel.posterior, &m, ds, &split.test)?;
                if method == Method::MlpBlp {
                    test
                } else {
                    platt_apply(platt_fit(&blp_predict_rows(&sel.posterior, &m, ds, &split.validation)?)?, &test)?
                }
            }
        }
    };
    write(out, &data::format_predictions(&preds))
}

fn evaluate(predictions: &Path, bins: usize, method: Method, repeat: usize, out: Option<&Path>) -> Result<()> {
    let p = data::load_predictions::<f64>(predictions)?;
    let row = MetricRow {
        method,
        repeat,
        summary: summarize_predictions(&p, bins)?,
    };
    let text = format_metrics_csv(&[row]);
    match out {
        Some(path) => write(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn report(metrics: &[(String, PathBuf)], alpha: f64, out: Option<&Path>) -> Result<()> {
    let mut results = Vec::new();
    for (target, path) in metrics {
        let path = if path.is_dir() { path.join("metrics.csv") } else { path.clone() };
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let rows = parse_metrics_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
        results.extend(repeat_results(&rows, target));
    }
    let table = build_table(&results, &TABLE_METRICS, alpha);
    let md = render_markdown(&table);
    if let Some(dir) = out {
        write(&dir.join("table.csv"), &render_csv(&table))?;
        write(&dir.join("table.md"), &md)?;
    }
    print!("{md}");
    Ok(())
}

fn run(config: Option<&Path>, manifest: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let outcome = match (config, manifest) {
        (_, Some(m)) => harness::rerun_manifest(m, out)?,
        (Some(c), None) => {
            let mut cfg = load_config(c)?;
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            harness::run_experiment(&cfg)?
        }
        (None, None) => bail!("either --config or --manifest is required"),
    };
    print!("{}", render_markdown(&outcome.table));
    if !outcome.manifest.failures.is_empty() {
        eprintln!("{} method repeats failed; see manifest.toml", outcome.manifest.failures.len());
    }
    log::info!("artifacts in {}", outcome.dir.display());
    Ok(())
}

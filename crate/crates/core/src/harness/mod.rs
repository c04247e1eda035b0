//! End-to-end study runner: folds, tuning, training, calibration, evaluation
//! and report, driven by a [`RunConfig`]. Every run directory holds a
//! `manifest.toml` from which the run can be repeated exactly.

mod config;

pub use config::{BlpConfig, FoldConfig, Method, RunConfig, SyntheticSource};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blp::{blp_predict_rows, select_prior_precision};
use crate::calibrators::{ensemble_predict, ensemble_train, mc_dropout_predict, platt_apply, platt_fit};
use crate::data::{self, LabeledDataset, PredictionSet, Split};
use crate::error::{Error, Result};
use crate::folds::{assign_folds, leader_cluster, make_split};
use crate::metrics::{bin_predictions, summarize_predictions, BinScheme, MetricSummary};
use crate::mlp::{self, MlpHyperparams, MlpModel};
use crate::seed::{derive_seed, tag};
use crate::stats::{build_table, render_csv, render_markdown, ReportTable, RepeatResults, TABLE_METRICS};
use crate::synth::make_synthetic;
use crate::tuning::grid_search;

pub const MANIFEST_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "model,repeat,ECE,ACE,BS,BCE,AUC,ACC";

/// Dataset with folds attached and the split used by the run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: LabeledDataset,
    pub split: Split,
    pub fold_seed: u64,
    /// Bayes-optimal probabilities when the data is synthetic.
    pub bayes_probs: Option<Vec<f64>>,
}

/// Loads or generates the dataset, assigns folds (from the fold file or by
/// clustering) and builds the split.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (ds, bayes) = match (&cfg.dataset, &cfg.synthetic) {
        (Some(path), _) => (data::load_sparse_dataset(path)?, None),
        (None, Some(src)) => {
            let s = make_synthetic(&src.spec, src.seed)?;
            (s.dataset, Some(s.bayes_probs))
        }
        (None, None) => return Err(Error::Config("no dataset or [synthetic] source".into())),
    };
    let fold_seed = cfg.folds.seed.unwrap_or_else(|| derive_seed(cfg.seed, &[tag("folds")]));
    let ds = match &cfg.folds_file {
        Some(path) => data::attach_folds(ds, path)?,
        None => {
            let clusters = leader_cluster(&ds, cfg.folds.threshold, fold_seed)?;
            let folds = assign_folds(&clusters, cfg.folds.k, fold_seed)?;
            ds.with_folds(folds)?
        }
    };
    let split = make_split(&ds, cfg.folds.test, cfg.folds.validation)?;
    Ok(PreparedData {
        dataset: ds,
        split,
        fold_seed,
        bayes_probs: bayes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub group: String,
    pub repeat: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRecord {
    pub repeat: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub method: String,
    pub repeat: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub software_version: String,
    pub config_sha256: String,
    pub master_seed: u64,
    pub fold_seed: u64,
    pub tuning_seed: Option<u64>,
    pub baseline: MlpHyperparams,
    pub seeds: Vec<SeedRecord>,
    pub blp_taus: Vec<TauRecord>,
    pub failures: Vec<FailureRecord>,
    /// The resolved configuration, verbatim.
    pub config: String,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: Method,
    pub repeat: usize,
    pub summary: MetricSummary,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub metrics: Vec<MetricRow>,
    pub table: ReportTable,
}

pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Test predictions of every method derived from one repeat.
type RepeatOutput = Vec<(Method, Result<PredictionSet<f64>>)>;

struct BaselineRepeat {
    outputs: RepeatOutput,
    tau: Option<f64>,
}

fn platt_on<T: crate::Scalar>(val: &PredictionSet<T>, test: &PredictionSet<T>) -> Result<PredictionSet<T>> {
    platt_apply(platt_fit(val)?, test)
}

fn run_baseline_repeat(
    cfg: &RunConfig,
    data: &PreparedData,
    methods: &[Method],
    hp: &MlpHyperparams,
    seed: u64,
) -> BaselineRepeat {
    let wanted: Vec<Method> = methods.iter().copied().filter(|m| !m.is_ensemble()).collect();
    let (ds, split) = (&data.dataset, &data.split);
    let hp = MlpHyperparams { seed, ..hp.clone() };
    let model: MlpModel<f64> = match mlp::train(ds, split, &hp) {
        Ok((m, _)) => m,
        Err(e) => {
            let msg = e.to_string();
            return BaselineRepeat {
                outputs: wanted
                    .into_iter()
                    .map(|m| (m, Err(Error::InvalidData(format!("training failed: {msg}")))))
                    .collect(),
                tau: None,
            };
        }
    };
    let test = model.predict(ds, &split.test);
    let val = model.predict(ds, &split.validation);
    let blp = if wanted.iter().any(|m| matches!(m, Method::MlpBlp | Method::MlpBlpPlatt)) {
        Some(
            select_prior_precision(&model, ds, split, &cfg.blp.taus, &cfg.blp.hmc, derive_seed(seed, &[tag("blp")]))
                .and_then(|sel| {
                    let t = blp_predict_rows(&sel.posterior, &model, ds, &split.test)?;
                    let v = blp_predict_rows(&sel.posterior, &model, ds, &split.validation)?;
                    Ok((sel.tau, t, v))
                }),
        )
    } else {
        None
    };
    let cloned = |r: &Result<PredictionSet<f64>>| match r {
        Ok(p) => Ok(p.clone()),
        Err(e) => Err(Error::InvalidData(e.to_string())),
    };
    let blp_err = |e: &Error| Error::InvalidData(format!("BLP failed: {e}"));
    let outputs = wanted
        .into_iter()
        .map(|m| {
            let out = match m {
                Method::Mlp => cloned(&test),
                Method::MlpPlatt => match (&val, &test) {
                    (Ok(v), Ok(t)) => platt_on(v, t),
                    (Err(e), _) | (_, Err(e)) => Err(Error::InvalidData(e.to_string())),
                },
                Method::MlpDropout => mc_dropout_predict(
                    &model,
                    ds,
                    &split.test,
                    cfg.mc_passes,
                    derive_seed(seed, &[tag("mc-dropout")]),
                ),
                Method::MlpBlp => match blp.as_ref().expect("computed when requested") {
                    Ok((_, t, _)) => Ok(t.clone()),
                    Err(e) => Err(blp_err(e)),
                },
                Method::MlpBlpPlatt => match blp.as_ref().expect("computed when requested") {
                    Ok((_, t, v)) => platt_on(v, t),
                    Err(e) => Err(blp_err(e)),
                },
                Method::MlpEnsemble | Method::MlpEnsemblePlatt => unreachable!("filtered above"),
            };
            (m, out)
        })
        .collect();
    BaselineRepeat {
        outputs,
        tau: blp.and_then(|r| r.ok()).map(|(tau, ..)| tau),
    }
}

fn run_ensemble_repeat(
    cfg: &RunConfig,
    data: &PreparedData,
    methods: &[Method],
    hp: &MlpHyperparams,
    seed: u64,
) -> RepeatOutput {
    let wanted: Vec<Method> = methods.iter().copied().filter(|m| m.is_ensemble()).collect();
    let (ds, split) = (&data.dataset, &data.split);
    let preds = ensemble_train::<f64>(ds, split, hp, cfg.ensemble_size, seed).and_then(|e| {
        Ok((ensemble_predict(&e, ds, &split.test)?, ensemble_predict(&e, ds, &split.validation)?))
    });
    wanted
        .into_iter()
        .map(|m| {
            let out = match &preds {
                Err(e) => Err(Error::InvalidData(format!("ensemble failed: {e}"))),
                Ok((t, _)) if m == Method::MlpEnsemble => Ok(t.clone()),
                Ok((t, v)) => platt_on(v, t),
            };
            (m, out)
        })
        .collect()
}

pub fn format_metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.method.name(),
            r.repeat,
            s.ece,
            s.ace,
            s.brier,
            s.bce,
            s.auc,
            s.accuracy
        );
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let err = |line: usize, msg: &str| Error::Parse {
        path: "metrics.csv".into(),
        line,
        msg: msg.into(),
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(err(1, "unexpected header"));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(err(k + 2, "expected 8 fields"));
        }
        let v = f[2..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| err(k + 2, "bad number"))?;
        rows.push(MetricRow {
            method: f[0].parse()?,
            repeat: f[1].parse().map_err(|_| err(k + 2, "bad repeat"))?,
            summary: MetricSummary {
                ece: v[0],
                ace: v[1],
                brier: v[2],
                bce: v[3],
                auc: v[4],
                accuracy: v[5],
            },
        });
    }
    Ok(rows)
}

/// Annotated table over the repeats in `rows`.
pub fn report_from_metrics(rows: &[MetricRow], target: &str, alpha: f64) -> ReportTable {
    build_table(&repeat_results(rows, target), &TABLE_METRICS, alpha)
}

/// Per-method repeat values of the table metrics, ready for [`build_table`].
pub fn repeat_results(rows: &[MetricRow], target: &str) -> Vec<RepeatResults> {
    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let mut results = Vec::new();
    for m in methods {
        let mut mine: Vec<&MetricRow> = rows.iter().filter(|r| r.method == m).collect();
        mine.sort_by_key(|r| r.repeat);
        let col = |f: fn(&MetricSummary) -> f64| mine.iter().map(|r| f(&r.summary)).collect::<Vec<f64>>();
        for (metric, values) in [
            ("ECE", col(|s| s.ece)),
            ("ACE", col(|s| s.ace)),
            ("BS", col(|s| s.brier)),
            ("AUC", col(|s| s.auc)),
        ] {
            results.push(RepeatResults::new(target, m.name(), metric, values).paired(m.pairing_group()));
        }
    }
    results
}

fn format_reliability(rows: &[(Method, usize, PredictionSet<f64>)], bins: usize) -> Result<String> {
    let mut out = String::from("model,repeat,scheme,bin,lo,hi,count,confidence,accuracy\n");
    for (m, r, p) in rows {
        for (scheme, name) in [(BinScheme::EqualWidth, "equal-width"), (BinScheme::EqualCount, "equal-count")] {
            for (k, b) in bin_predictions(p, scheme, bins)?.bins.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:?},{:?},{},{:?},{:?}",
                    m.name(),
                    r,
                    name,
                    k,
                    b.lo,
                    b.hi,
                    b.count,
                    b.confidence,
                    b.accuracy
                );
            }
        }
    }
    Ok(out)
}

/// Runs the study described by `cfg` and writes all artifacts into
/// `cfg.output_dir`. Failures of individual method repeats are recorded in
/// the manifest and do not stop the run.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let config_text = cfg.to_toml()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(dir.join("predictions")).map_err(|e| Error::io(&dir, e))?;

    let data = prepare_data(cfg)?;
    let ds = &data.dataset;
    data::save_folds(ds.ids(), ds.folds().expect("attached"), dir.join("folds.txt"))?;
    if let Some(bayes) = &data.bayes_probs {
        let mut out = String::from("id,bayes_prob\n");
        for (id, p) in ds.ids().iter().zip(bayes) {
            let _ = writeln!(out, "{id},{p:?}");
        }
        write(&dir.join("bayes.csv"), &out)?;
    }

    let (baseline, tuning_seed) = match &cfg.baseline {
        Some(hp) => (hp.clone(), None),
        None => {
            let s = derive_seed(cfg.seed, &[tag("tuning")]);
            let r = grid_search::<f64>(ds, &data.split, &cfg.grid, s)?;
            write(&dir.join("tuning.csv"), &r.table.to_csv())?;
            (r.best, Some(s))
        }
    };
    log::info!("baseline hyperparameters: {baseline:?}");

    let methods = cfg.method_list();
    let mut seeds = Vec::new();
    let base_needed = methods.iter().any(|m| !m.is_ensemble());
    let ens_needed = methods.iter().any(|m| m.is_ensemble());
    let mut tasks: Vec<(&'static str, usize, u64)> = Vec::new();
    if base_needed {
        tasks.extend((0..cfg.repeats).map(|k| ("baseline", k, derive_seed(cfg.seed, &[tag("baseline"), k as u64]))));
    }
    if ens_needed {
        tasks.extend(
            (0..cfg.ensemble_repeats).map(|k| ("ensemble", k, derive_seed(cfg.seed, &[tag("ensemble"), k as u64]))),
        );
    }
    for &(group, repeat, seed) in &tasks {
        seeds.push(SeedRecord {
            group: group.into(),
            repeat,
            seed,
        });
    }

    let results: Vec<(usize, RepeatOutput, Option<f64>)> = tasks
        .par_iter()
        .map(|&(group, k, seed)| {
            if group == "baseline" {
                let r = run_baseline_repeat(cfg, &data, &methods, &baseline, seed);
                (k, r.outputs, r.tau)
            } else {
                (k, run_ensemble_repeat(cfg, &data, &methods, &baseline, seed), None)
            }
        })
        .collect();

    let mut blp_taus = Vec::new();
    let mut failures = Vec::new();
    let mut ok: Vec<(Method, usize, PredictionSet<f64>)> = Vec::new();
    for (k, outputs, tau) in results {
        if let Some(tau) = tau {
            blp_taus.push(TauRecord { repeat: k, tau });
        }
        for (m, out) in outputs {
            match out {
                Ok(p) => ok.push((m, k, p)),
                Err(e) => {
                    log::warn!("{m} repeat {k} failed: {e}");
                    failures.push(FailureRecord {
                        method: m.name().into(),
                        repeat: k,
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    ok.sort_by_key(|(m, k, _)| (*m, *k));
    failures.sort_by(|a, b| (a.method.as_str(), a.repeat).cmp(&(b.method.as_str(), b.repeat)));

    let mut metrics = Vec::new();
    for (m, k, p) in &ok {
        data::save_predictions(p, dir.join("predictions").join(format!("{}_r{k}.csv", m.slug())))?;
        match summarize_predictions(p, cfg.bins) {
            Ok(summary) => metrics.push(MetricRow {
                method: *m,
                repeat: *k,
                summary,
            }),
            Err(e) => failures.push(FailureRecord {
                method: m.name().into(),
                repeat: *k,
                error: format!("evaluation failed: {e}"),
            }),
        }
    }
    write(&dir.join("metrics.csv"), &format_metrics_csv(&metrics))?;
    write(&dir.join("reliability.csv"), &format_reliability(&ok, cfg.bins)?)?;

    let table = report_from_metrics(&metrics, &cfg.target, cfg.alpha);
    write(&dir.join("table.csv"), &render_csv(&table))?;
    write(&dir.join("table.md"), &render_markdown(&table))?;

    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        software_version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: sha256_hex(&config_text),
        master_seed: cfg.seed,
        fold_seed: data.fold_seed,
        tuning_seed,
        baseline,
        seeds,
        blp_taus,
        failures,
        config: config_text,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write(&dir.join("manifest.toml"), &text)?;
    if !manifest.failures.is_empty() {
        log::warn!("{} method repeats failed; see manifest.toml", manifest.failures.len());
    }
    Ok(RunOutcome {
        dir,
        manifest,
        metrics,
        table,
    })
}

/// Repeats the run recorded in a manifest, writing into `output_dir` (or the
/// original directory when `None`).
pub fn rerun_manifest(manifest_path: impl AsRef<Path>, output_dir: Option<PathBuf>) -> Result<RunOutcome> {
    let manifest = Manifest::load(manifest_path)?;
    if sha256_hex(&manifest.config) != manifest.config_sha256 {
        return Err(Error::Config("embedded config does not match its recorded hash".into()));
    }
    if manifest.software_version != env!("CARGO_PKG_VERSION") {
        log::warn!(
            "manifest written by version {}, running {}",
            manifest.software_version,
            env!("CARGO_PKG_VERSION")
        );
    }
    let mut cfg = RunConfig::from_toml(&manifest.config)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    run_experiment(&cfg)
}

//! Exhaustive grid search over hidden size, dropout rate, learning rate and
//! weight decay, scored on the validation fold by an HP metric averaged over
//! repeats.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, PredictionSet, Split};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, ace, auc, bce_loss, DEFAULT_BINS};
use crate::mlp::{self, MlpHyperparams};
use crate::scalar::Scalar;
use crate::seed;
use crate::stats::Direction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HpMetric {
    Acc,
    Auc,
    Bce,
    Ace,
}

impl HpMetric {
    pub const ALL: [HpMetric; 4] = [HpMetric::Acc, HpMetric::Auc, HpMetric::Bce, HpMetric::Ace];

    pub fn direction(self) -> Direction {
        match self {
            HpMetric::Acc | HpMetric::Auc => Direction::Maximize,
            HpMetric::Bce | HpMetric::Ace => Direction::Minimize,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HpMetric::Acc => "ACC",
            HpMetric::Auc => "AUC",
            HpMetric::Bce => "BCE",
            HpMetric::Ace => "ACE",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for HpMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HpMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "acc" | "accuracy" => Ok(HpMetric::Acc),
            "auc" => Ok(HpMetric::Auc),
            "bce" => Ok(HpMetric::Bce),
            "ace" => Ok(HpMetric::Ace),
            _ => Err(Error::InvalidParameter(format!("unknown HP metric {s:?}"))),
        }
    }
}

/// Value of `metric` on `p` and whether it is maximized or minimized. ACE
/// uses `bins` equal-count bins; accuracy thresholds at 0.5.
pub fn evaluate_hp_metric<T: Scalar>(p: &PredictionSet<T>, metric: HpMetric, bins: usize) -> Result<(f64, Direction)> {
    let v = match metric {
        HpMetric::Acc => accuracy(p, T::of(0.5)).f64(),
        HpMetric::Auc => auc(p)?.f64(),
        HpMetric::Bce => bce_loss(p).f64(),
        HpMetric::Ace => ace(p, bins)?.f64(),
    };
    Ok((v, metric.direction()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub hidden_sizes: Vec<usize>,
    pub dropout_rates: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub repeats: usize,
    pub hp_metric: HpMetric,
    pub bins: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        let hp = MlpHyperparams::default();
        Self {
            hidden_sizes: vec![64, 256, 1024],
            dropout_rates: vec![0.2, 0.4, 0.6],
            learning_rates: vec![1e-4, 1e-3],
            weight_decays: vec![1e-6, 1e-4, 1e-2],
            repeats: 10,
            hp_metric: HpMetric::Acc,
            bins: DEFAULT_BINS,
            max_epochs: hp.max_epochs,
            patience: hp.patience,
            batch_size: hp.batch_size,
        }
    }
}

/// One point of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub hidden_size: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl GridCell {
    /// Preference order among cells with equal scores: smaller hidden size,
    /// then larger weight decay, then ascending dropout and learning rate.
    fn preference(&self, other: &Self) -> Ordering {
        self.hidden_size
            .cmp(&other.hidden_size)
            .then(other.weight_decay.total_cmp(&self.weight_decay))
            .then(self.dropout_rate.total_cmp(&other.dropout_rate))
            .then(self.learning_rate.total_cmp(&other.learning_rate))
    }

    /// Seed of one repeat; depends only on the cell values, not on their
    /// position in the grid.
    pub fn repeat_seed(&self, master: u64, repeat: usize) -> u64 {
        seed::derive_seed(
            master,
            &[
                seed::tag("grid"),
                self.hidden_size as u64,
                self.dropout_rate.to_bits(),
                self.learning_rate.to_bits(),
                self.weight_decay.to_bits(),
                repeat as u64,
            ],
        )
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty()
            || self.dropout_rates.is_empty()
            || self.learning_rates.is_empty()
            || self.weight_decays.is_empty()
        {
            return Err(Error::InvalidParameter("every grid axis needs at least one value".into()));
        }
        if self.repeats == 0 || self.bins == 0 {
            return Err(Error::InvalidParameter("repeats and bins must be positive".into()));
        }
        Ok(())
    }

    /// Cells in canonical preference order.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut cells = Vec::new();
        for &hidden_size in &self.hidden_sizes {
            for &dropout_rate in &self.dropout_rates {
                for &learning_rate in &self.learning_rates {
                    for &weight_decay in &self.weight_decays {
                        cells.push(GridCell {
                            hidden_size,
                            dropout_rate,
                            learning_rate,
                            weight_decay,
                        });
                    }
                }
            }
        }
        cells.sort_by(GridCell::preference);
        cells.dedup();
        cells
    }

    pub fn hyperparams(&self, cell: &GridCell, seed: u64) -> MlpHyperparams {
        MlpHyperparams {
            hidden_size: cell.hidden_size,
            dropout_rate: cell.dropout_rate,
            learning_rate: cell.learning_rate,
            weight_decay: cell.weight_decay,
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            seed,
        }
    }
}

/// One trained repeat of one cell: all four HP metrics on the validation
/// fold, or the failure message.
#[derive(Debug, Clone, PartialEq)]
pub struct CellScore {
    pub cell: GridCell,
    pub repeat: usize,
    pub seed: u64,
    /// Indexed in [`HpMetric::ALL`] order.
    pub outcome: std::result::Result<[f64; 4], String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<CellScore>,
}

impl ScoreTable {
    /// Mean of `metric` over repeats for every cell without failed repeats,
    /// in canonical cell order.
    pub fn cell_means(&self, metric: HpMetric) -> Vec<(GridCell, f64)> {
        let mut out: Vec<(GridCell, f64, usize, bool)> = Vec::new();
        for row in &self.rows {
            let k = match out.iter().position(|(c, ..)| *c == row.cell) {
                Some(k) => k,
                None => {
                    out.push((row.cell, 0.0, 0, true));
                    out.len() - 1
                }
            };
            match &row.outcome {
                Ok(scores) => {
                    out[k].1 += scores[metric.index()];
                    out[k].2 += 1;
                }
                Err(_) => out[k].3 = false,
            }
        }
        let mut means: Vec<(GridCell, f64)> = out
            .into_iter()
            .filter(|&(_, _, n, ok)| ok && n > 0)
            .map(|(c, s, n, _)| (c, s / n as f64))
            .collect();
        means.sort_by(|a, b| a.0.preference(&b.0));
        means
    }

    /// Best cell under `metric`; ties keep the preferred cell.
    pub fn best(&self, metric: HpMetric) -> Result<GridCell> {
        let dir = metric.direction();
        let mut best: Option<(GridCell, f64)> = None;
        for (cell, mean) in self.cell_means(metric) {
            if !mean.is_finite() {
                continue;
            }
            if best.is_none_or(|(_, b)| dir.better(mean, b)) {
                best = Some((cell, mean));
            }
        }
        best.map(|(c, _)| c).ok_or(Error::AllCellsFailed)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.is_err()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("hidden_size,dropout_rate,learning_rate,weight_decay,repeat,seed,ACC,AUC,BCE,ACE,error\n");
        for r in &self.rows {
            let c = &r.cell;
            let _ = write!(
                out,
                "{},{:?},{:?},{:?},{},{},",
                c.hidden_size, c.dropout_rate, c.learning_rate, c.weight_decay, r.repeat, r.seed
            );
            match &r.outcome {
                Ok(s) => {
                    let _ = writeln!(out, "{:?},{:?},{:?},{:?},", s[0], s[1], s[2], s[3]);
                }
                Err(e) => {
                    let _ = writeln!(out, ",,,,{}", e.replace([',', '\n'], ";"));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best_cell: GridCell,
    pub best: MlpHyperparams,
    pub table: ScoreTable,
}

fn score_repeat<T: Scalar>(ds: &LabeledDataset, split: &Split, hp: &MlpHyperparams, bins: usize) -> Result<[f64; 4]> {
    let (model, _) = mlp::train::<T>(ds, split, hp)?;
    let p = model.predict(ds, &split.validation)?;
    let mut out = [0.0; 4];
    for m in HpMetric::ALL {
        out[m.index()] = evaluate_hp_metric(&p, m, bins)?.0;
    }
    Ok(out)
}

/// Trains `grid.repeats` models per cell with seeds derived from `seed` and
/// the cell values, scores each on the validation fold and returns the best
/// cell under `grid.hp_metric`. The returned hyperparameters carry seed 0.
pub fn grid_search<T: Scalar>(ds: &LabeledDataset, split: &Split, grid: &GridSpec, seed: u64) -> Result<GridSearchResult> {
    grid.validate()?;
    split.validate(ds)?;
    let tasks: Vec<(GridCell, usize)> = grid
        .cells()
        .into_iter()
        .flat_map(|c| (0..grid.repeats).map(move |r| (c, r)))
        .collect();
    let rows: Vec<CellScore> = tasks
        .par_iter()
        .map(|&(cell, repeat)| {
            let s = cell.repeat_seed(seed, repeat);
            let outcome = score_repeat::<T>(ds, split, &grid.hyperparams(&cell, s), grid.bins).map_err(|e| {
                log::warn!("grid cell {cell:?} repeat {repeat} failed: {e}");
                e.to_string()
            });
            CellScore {
                cell,
                repeat,
                seed: s,
                outcome,
            }
        })
        .collect();
    let table = ScoreTable { rows };
    let best_cell = table.best(grid.hp_metric)?;
    Ok(GridSearchResult {
        best: grid.hyperparams(&best_cell, 0),
        best_cell,
        table,
    })
}

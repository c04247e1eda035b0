//! Significance tests over repeat-level results and the annotated
//! `mean ± sd` result tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (k, &c) in C.iter().enumerate().skip(1) {
        acc += c / (x + k as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=1000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// CDF of Student's t distribution with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = 0.5 * beta_inc(0.5 * df, 0.5, df / (df + t * t));
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided p-value `P(|T| ≥ |t|)`.
pub fn t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return 1.0;
    }
    beta_inc(0.5 * df, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); 0 for fewer than two values.
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidData("non-finite value in test sample".into()))
    }
}

/// Two-sided paired t-test on `a - b`. Differences with zero variance give
/// `p = 1` for a zero mean and `p = 0` otherwise.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: a.len(),
        });
    }
    check_finite(a)?;
    check_finite(b)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (m, sd) = (mean(&d), sample_sd(&d));
    if sd == 0.0 {
        return Ok(if m == 0.0 { 1.0 } else { 0.0 });
    }
    let n = d.len() as f64;
    Ok(t_two_sided(m / (sd / n.sqrt()), n - 1.0))
}

/// Welch's two-sided t-test with Welch-Satterthwaite degrees of freedom.
/// Two zero-variance groups give `p = 1` for equal means and `p = 0`
/// otherwise.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<f64> {
    let short = a.len().min(b.len());
    if short < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: short });
    }
    check_finite(a)?;
    check_finite(b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_sd(a).powi(2) / na, sample_sd(b).powi(2) / nb);
    let diff = mean(a) - mean(b);
    let se2 = va + vb;
    if se2 == 0.0 {
        return Ok(if diff == 0.0 { 1.0 } else { 0.0 });
    }
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    Ok(t_two_sided(diff / se2.sqrt(), df))
}

/// Two-sided exact binomial sign test on `wins` against `losses` (ties
/// excluded by the caller).
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    let ln_half_n = n as f64 * 0.5f64.ln();
    let ln_choose = |i: usize| {
        ln_gamma(n as f64 + 1.0) - ln_gamma(i as f64 + 1.0) - ln_gamma((n - i) as f64 + 1.0)
    };
    let tail: f64 = (0..=k).map(|i| (ln_choose(i) + ln_half_n).exp()).sum();
    (2.0 * tail).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// AUC and accuracy are maximized; every other metric is minimized.
    pub fn for_metric(name: &str) -> Self {
        match name.to_ascii_uppercase().as_str() {
            "AUC" | "ACC" | "ACCURACY" => Direction::Maximize,
            _ => Direction::Minimize,
        }
    }

    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Maximize => a > b,
            Direction::Minimize => a < b,
        }
    }
}

/// Per-repeat values of one metric for one model on one target.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatResults {
    pub target: String,
    pub model: String,
    pub metric: String,
    pub values: Vec<f64>,
    pub direction: Direction,
    /// Models sharing a pairing group were derived from the same repeats and
    /// are compared with the paired test.
    pub pairing: Option<String>,
}

impl RepeatResults {
    pub fn new(target: &str, model: &str, metric: &str, values: Vec<f64>) -> Self {
        Self {
            target: target.into(),
            model: model.into(),
            metric: metric.into(),
            values,
            direction: Direction::for_metric(metric),
            pairing: None,
        }
    }

    pub fn paired(mut self, group: &str) -> Self {
        self.pairing = Some(group.into());
        self
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }

    pub fn sd(&self) -> f64 {
        sample_sd(&self.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Best,
    Indistinguishable,
    Plain,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::Best => "best",
            Flag::Indistinguishable => "indistinguishable",
            Flag::Plain => "plain",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "best" => Some(Flag::Best),
            "indistinguishable" => Some(Flag::Indistinguishable),
            "plain" => Some(Flag::Plain),
            _ => None,
        }
    }
}

/// Marks the model with the best mean, then tests every other model against
/// it: paired when both share a pairing group and have equally many repeats,
/// Welch otherwise. `p ≥ alpha` marks a model as indistinguishable. Models
/// with a single repeat cannot be tested and stay plain. Ties on the mean go
/// to the earlier model.
pub fn mark_best(models: &[RepeatResults], alpha: f64) -> Vec<Flag> {
    let Some(first) = models.first() else {
        return Vec::new();
    };
    let dir = first.direction;
    let mut best = 0;
    for (k, m) in models.iter().enumerate().skip(1) {
        if dir.better(m.mean(), models[best].mean()) {
            best = k;
        }
    }
    let b = &models[best];
    models
        .iter()
        .enumerate()
        .map(|(k, m)| {
            if k == best {
                return Flag::Best;
            }
            let same_group = m.pairing.is_some() && m.pairing == b.pairing;
            let p = if same_group && m.values.len() == b.values.len() {
                paired_ttest(&m.values, &b.values)
            } else {
                welch_ttest(&m.values, &b.values)
            };
            match p {
                Ok(p) if p >= alpha => Flag::Indistinguishable,
                _ => Flag::Plain,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
    pub flag: Flag,
}

impl Cell {
    /// `mean ± sd` at four decimals.
    pub fn text(&self) -> String {
        format!("{:.4} ± {:.4}", self.mean, self.sd)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub target: String,
    pub model: String,
    pub cells: Vec<Option<Cell>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub metrics: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// Default table columns.
pub const TABLE_METRICS: [&str; 4] = ["ECE", "ACE", "BS", "AUC"];

/// Groups results into rows of target × model (first-seen order) and flags
/// each column within each target.
pub fn build_table(results: &[RepeatResults], metrics: &[&str], alpha: f64) -> ReportTable {
    let mut rows: Vec<ReportRow> = Vec::new();
    for r in results {
        if !rows.iter().any(|row| row.target == r.target && row.model == r.model) {
            rows.push(ReportRow {
                target: r.target.clone(),
                model: r.model.clone(),
                cells: vec![None; metrics.len()],
            });
        }
    }
    let mut targets: Vec<&str> = Vec::new();
    for row in &rows {
        if !targets.contains(&row.target.as_str()) {
            targets.push(&row.target);
        }
    }
    let mut flagged: Vec<(String, String, usize, Cell)> = Vec::new();
    for &target in &targets {
        for (c, &metric) in metrics.iter().enumerate() {
            let group: Vec<RepeatResults> = results
                .iter()
                .filter(|r| r.target == target && r.metric.eq_ignore_ascii_case(metric) && !r.values.is_empty())
                .cloned()
                .collect();
            for (r, flag) in group.iter().zip(mark_best(&group, alpha)) {
                let cell = Cell {
                    mean: r.mean(),
                    sd: r.sd(),
                    n: r.values.len(),
                    flag,
                };
                flagged.push((r.target.clone(), r.model.clone(), c, cell));
            }
        }
    }
    for (target, model, c, cell) in flagged {
        if let Some(row) = rows.iter_mut().find(|row| row.target == target && row.model == model) {
            row.cells[c] = Some(cell);
        }
    }
    ReportTable {
        metrics: metrics.iter().map(|m| m.to_string()).collect(),
        rows,
    }
}

/// Markdown table; the best entry per column is `__**…**__`, entries
/// indistinguishable from it are `**…**`.
pub fn render_markdown(table: &ReportTable) -> String {
    let mut out = String::from("| Target | Model |");
    for m in &table.metrics {
        let _ = write!(out, " {m} |");
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(table.metrics.len()));
    out.push('\n');
    for row in &table.rows {
        let _ = write!(out, "| {} | {} |", row.target, row.model);
        for cell in &row.cells {
            let text = match cell {
                None => "n/a".to_string(),
                Some(c) => match c.flag {
                    Flag::Best => format!("__**{}**__", c.text()),
                    Flag::Indistinguishable => format!("**{}**", c.text()),
                    Flag::Plain => c.text(),
                },
            };
            let _ = write!(out, " {text} |");
        }
        out.push('\n');
    }
    out
}

const CSV_HEADER: &str = "target,model,metric,mean,sd,n,flag";

/// Long-format CSV, one line per filled cell, with full-precision numbers.
pub fn render_csv(table: &ReportTable) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for row in &table.rows {
        for (metric, cell) in table.metrics.iter().zip(&row.cells) {
            if let Some(c) = cell {
                let _ = writeln!(
                    out,
                    "{},{},{},{:?},{:?},{},{}",
                    row.target,
                    row.model,
                    metric,
                    c.mean,
                    c.sd,
                    c.n,
                    c.flag.as_str()
                );
            }
        }
    }
    out
}

/// Inverse of [`render_csv`].
pub fn parse_csv(text: &str) -> Result<ReportTable> {
    let err = |line: usize, msg: &str| Error::Parse {
        path: "<table>".into(),
        line,
        msg: msg.into(),
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(err(1, "unexpected header"));
    }
    let mut table = ReportTable {
        metrics: Vec::new(),
        rows: Vec::new(),
    };
    let mut entries = Vec::new();
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(err(k + 2, "expected 7 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(k + 2, "bad number"));
        let cell = Cell {
            mean: num(f[3])?,
            sd: num(f[4])?,
            n: f[5].parse().map_err(|_| err(k + 2, "bad count"))?,
            flag: Flag::parse(f[6]).ok_or_else(|| err(k + 2, "bad flag"))?,
        };
        if !table.metrics.iter().any(|m| m == f[2]) {
            table.metrics.push(f[2].to_string());
        }
        if !table.rows.iter().any(|r| r.target == f[0] && r.model == f[1]) {
            table.rows.push(ReportRow {
                target: f[0].into(),
                model: f[1].into(),
                cells: Vec::new(),
            });
        }
        entries.push((f[0].to_string(), f[1].to_string(), f[2].to_string(), cell));
    }
    let width = table.metrics.len();
    for row in &mut table.rows {
        row.cells = vec![None; width];
    }
    for (target, model, metric, cell) in entries {
        let c = table.metrics.iter().position(|m| *m == metric).expect("collected above");
        let row = table
            .rows
            .iter_mut()
            .find(|r| r.target == target && r.model == model)
            .expect("collected above");
        row.cells[c] = Some(cell);
    }
    Ok(table)
}

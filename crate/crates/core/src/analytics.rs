//! Per-attempt influence, exponential decay fits and run summaries.
//!
//! Counts are exact rationals so fractional inputs (averaged percentages)
//! are analyzed without rounding; values become `f64` only on output.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::orchestrator::SolveOutcome;

pub type Rational = Ratio<i128>;

pub const INFLUENCE_CSV_HEADER: &str = "i,S_i,N_i,I_i";

pub fn to_f64(r: &Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalyticsError {
    #[error("decay fit needs at least 2 distinct attempts with I_i > 0, found {usable}")]
    InsufficientPoints { usable: usize },
    #[error("invalid number '{0}'")]
    BadNumber(String),
    #[error("{0}")]
    Invalid(String),
}

/// Parses a non-negative decimal such as `92`, `3.8` or `0.25%` exactly.
pub fn parse_decimal(text: &str) -> Result<Rational, AnalyticsError> {
    let bad = || AnalyticsError::BadNumber(text.to_string());
    let t = text.trim().trim_end_matches('%').trim();
    let (int, frac) = t.split_once('.').unwrap_or((t, ""));
    if (int.is_empty() && frac.is_empty()) || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 18 {
        return Err(bad());
    }
    let digits = format!("{int}{frac}");
    let numer: i128 = if digits.is_empty() { 0 } else { digits.parse().map_err(|_| bad())? };
    Ok(Rational::new(numer, 10i128.pow(frac.len() as u32)))
}

/// Per-attempt solve counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttemptCounts {
    pub n: Rational,
    /// `s[i]`: problems solved exactly at attempt `i`.
    pub s: Vec<Rational>,
    pub unsolved: Rational,
}

impl AttemptCounts {
    pub fn solved(&self) -> Rational {
        self.s.iter().sum()
    }

    /// Whether `n == unsolved + sum(s)` and nothing is negative.
    pub fn conserved(&self) -> bool {
        let zero = Rational::from_integer(0);
        self.n == self.unsolved + self.solved() && self.unsolved >= zero && self.s.iter().all(|x| *x >= zero)
    }
}

/// Counts outcomes by the index of their passing attempt.
pub fn tally(outcomes: &[SolveOutcome], max_attempts: usize) -> AttemptCounts {
    let top = outcomes.iter().filter_map(SolveOutcome::solved_at).max().unwrap_or(0).max(max_attempts);
    let mut s = vec![0i128; top + 1];
    let mut unsolved = 0i128;
    for o in outcomes {
        match o.solved_at() {
            Some(i) => s[i] += 1,
            None => unsolved += 1,
        }
    }
    AttemptCounts {
        n: Rational::from_integer(outcomes.len() as i128),
        s: s.into_iter().map(Rational::from_integer).collect(),
        unsolved: Rational::from_integer(unsolved),
    }
}

/// Counts from a table row of per-attempt values (e.g. percentages) over `n`.
pub fn from_table(values: &[Rational], n: Rational) -> Result<AttemptCounts, AnalyticsError> {
    if n <= Rational::from_integer(0) {
        return Err(AnalyticsError::Invalid("n must be positive".into()));
    }
    if values.is_empty() {
        return Err(AnalyticsError::Invalid("table row is empty".into()));
    }
    let total: Rational = values.iter().sum();
    let unsolved = if total > n {
        log::warn!("table row sums to {} which exceeds n = {}; unsolved set to 0", to_f64(&total), to_f64(&n));
        Rational::from_integer(0)
    } else {
        n - total
    };
    Ok(AttemptCounts { n, s: values.to_vec(), unsolved })
}

pub fn parse_table(row: &str) -> Result<Vec<Rational>, AnalyticsError> {
    row.split(',').map(parse_decimal).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfluencePoint {
    pub i: usize,
    pub s_i: Rational,
    /// Problems still unsolved entering attempt `i`.
    pub n_i: Rational,
    pub value: Rational,
}

impl InfluencePoint {
    pub fn value_f64(&self) -> f64 {
        to_f64(&self.value)
    }
}

/// `I_i = S_i / N_i` with `N_0 = N` and `N_{i+1} = N_i - S_i`. Attempts
/// with no survivors are omitted.
pub fn influence(counts: &AttemptCounts) -> Vec<InfluencePoint> {
    let zero = Rational::from_integer(0);
    let mut n_i = counts.n;
    let mut out = Vec::new();
    for (i, s_i) in counts.s.iter().enumerate() {
        if n_i > zero {
            let value = s_i / n_i;
            if value > Rational::from_integer(1) {
                log::warn!("I_{i} = {} exceeds 1: the counts are inconsistent", to_f64(&value));
            }
            out.push(InfluencePoint { i, s_i: *s_i, n_i, value });
        }
        n_i -= s_i;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub a: f64,
    pub b: f64,
    /// Coefficient of determination of the ln-scale regression.
    pub r_squared: f64,
    pub points_used: usize,
}

impl DecayFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.a * (-self.b * x).exp()
    }
}

/// Least-squares fit of `y = a * exp(-b x)` via `ln y = ln a - b x`.
/// Points with `y <= 0` are skipped.
pub fn fit_xy(points: &[(f64, f64)]) -> Result<DecayFit, AnalyticsError> {
    let used: Vec<(f64, f64)> = points.iter().filter(|(_, y)| *y > 0.0).map(|&(x, y)| (x, y.ln())).collect();
    let mut xs: Vec<f64> = used.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 2 {
        return Err(AnalyticsError::InsufficientPoints { usable: xs.len() });
    }
    let m = used.len() as f64;
    let mx = used.iter().map(|p| p.0).sum::<f64>() / m;
    let my = used.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = used.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = used.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = used.iter().map(|p| (p.1 - (intercept + slope * p.0)).powi(2)).sum();
    let ss_tot: f64 = used.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(DecayFit { a: intercept.exp(), b: -slope, r_squared, points_used: used.len() })
}

pub fn fit_decay(points: &[InfluencePoint]) -> Result<DecayFit, AnalyticsError> {
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.i as f64, p.value_f64())).collect();
    fit_xy(&xy)
}

/// How influence series from several runs become fit points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Average `I_i` per attempt across series, then fit.
    #[default]
    Mean,
    /// Fit every series' points together.
    Pool,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "pool" => Ok(Aggregation::Pool),
            other => Err(format!("unknown aggregation '{other}' (expected mean or pool)")),
        }
    }
}

pub fn aggregate(series: &[Vec<InfluencePoint>], how: Aggregation) -> Vec<(f64, f64)> {
    match how {
        Aggregation::Pool => series.iter().flatten().map(|p| (p.i as f64, p.value_f64())).collect(),
        Aggregation::Mean => {
            let top = series.iter().flatten().map(|p| p.i).max();
            let Some(top) = top else { return Vec::new() };
            (0..=top)
                .filter_map(|i| {
                    let vals: Vec<f64> = series.iter().flatten().filter(|p| p.i == i).map(InfluencePoint::value_f64).collect();
                    (!vals.is_empty()).then(|| (i as f64, vals.iter().sum::<f64>() / vals.len() as f64))
                })
                .collect()
        }
    }
}

/// Mean and sample standard deviation of each attempt's solve share (in
/// percent) across repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepeatRow {
    pub i: usize,
    pub mean_pct: f64,
    pub sd_pct: f64,
}

pub fn repeat_stats(runs: &[AttemptCounts]) -> Vec<RepeatRow> {
    let top = runs.iter().map(|c| c.s.len()).max().unwrap_or(0);
    (0..top)
        .map(|i| {
            let pcts: Vec<f64> = runs
                .iter()
                .map(|c| c.s.get(i).map(|s| 100.0 * to_f64(&(s / c.n))).unwrap_or(0.0))
                .collect();
            let k = pcts.len() as f64;
            let mean = pcts.iter().sum::<f64>() / k;
            let sd = if pcts.len() > 1 { (pcts.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() } else { 0.0 };
            RepeatRow { i, mean_pct: mean, sd_pct: sd }
        })
        .collect()
}

pub fn repeat_csv(rows: &[RepeatRow]) -> String {
    let mut s = String::from("i,S_i_pct_mean,S_i_pct_sd\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.4},{:.4}", r.i, r.mean_pct, r.sd_pct);
    }
    s
}

/// Shortest decimal for a rational (exact when it terminates within 12
/// places).
pub fn format_rational(r: &Rational) -> String {
    if r.is_integer() {
        return r.to_integer().to_string();
    }
    let scaled = r * Rational::from_integer(10i128.pow(12));
    if scaled.is_integer() {
        let v = scaled.to_integer();
        let sign = if v < 0 { "-" } else { "" };
        let v = v.abs();
        let frac = format!("{:012}", v % 10i128.pow(12));
        return format!("{sign}{}.{}", v / 10i128.pow(12), frac.trim_end_matches('0'));
    }
    format!("{:.12}", to_f64(r))
}

pub fn influence_csv(points: &[InfluencePoint]) -> String {
    let mut s = format!("{INFLUENCE_CSV_HEADER}\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{:.6}", p.i, format_rational(&p.s_i), format_rational(&p.n_i), p.value_f64());
    }
    s
}

pub fn fit_json(fit: &DecayFit) -> Value {
    json!({"a": fit.a, "b": fit.b, "r_squared": fit.r_squared, "points_used": fit.points_used})
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub problems: usize,
    pub solved: usize,
    pub success_rate: f64,
    /// Percentage with one decimal, e.g. `"90.0%"`.
    pub success_rate_pct: String,
    pub setup_errors: usize,
    pub total_prompt_tokens: u64,
    pub total_completion_tokens: u64,
    pub total_tokens: u64,
    pub avg_tokens_per_problem: f64,
    pub avg_llm_calls_per_problem: f64,
    /// Fix attempts per problem: `llm_calls - 1` for problems that made a call.
    pub avg_debug_attempts_per_problem: f64,
    pub total_wall_time_secs: f64,
}

pub fn summarize(outcomes: &[SolveOutcome]) -> Summary {
    let n = outcomes.len();
    let solved = outcomes.iter().filter(|o| o.solved).count();
    let prompt: u64 = outcomes.iter().flat_map(|o| &o.attempts).map(|a| a.prompt_tokens).sum();
    let completion: u64 = outcomes.iter().flat_map(|o| &o.attempts).map(|a| a.completion_tokens).sum();
    let calls: usize = outcomes.iter().map(|o| o.llm_calls).sum();
    let debug: usize = outcomes.iter().map(|o| o.llm_calls.saturating_sub(1)).sum();
    let div = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    let rate = div(solved as f64);
    Summary {
        problems: n,
        solved,
        success_rate: rate,
        success_rate_pct: format!("{:.1}%", rate * 100.0),
        setup_errors: outcomes.iter().filter(|o| o.setup_error.is_some()).count(),
        total_prompt_tokens: prompt,
        total_completion_tokens: completion,
        total_tokens: prompt + completion,
        avg_tokens_per_problem: div((prompt + completion) as f64),
        avg_llm_calls_per_problem: div(calls as f64),
        avg_debug_attempts_per_problem: div(debug as f64),
        total_wall_time_secs: outcomes.iter().map(|o| o.wall_time).sum(),
    }
}

/// Summary plus influence and fit, as written by `analyze`.
pub fn report_json(summary: Option<&Summary>, points: &[InfluencePoint], fit: Option<&Result<DecayFit, AnalyticsError>>) -> Value {
    let mut v = json!({
        "influence": points.iter().map(|p| json!({"i": p.i, "S_i": to_f64(&p.s_i), "N_i": to_f64(&p.n_i), "I_i": p.value_f64()})).collect::<Vec<_>>(),
        "fit_scale": "ln",
        "fit_excludes_zero_points": points.iter().filter(|p| p.value == Rational::from_integer(0)).map(|p| p.i).collect::<Vec<_>>(),
    });
    if let Some(s) = summary {
        v["summary"] = serde_json::to_value(s).expect("summary serializes");
    }
    match fit {
        Some(Ok(f)) => v["fit"] = fit_json(f),
        Some(Err(e)) => v["fit_error"] = Value::String(e.to_string()),
        None => {}
    }
    v
}

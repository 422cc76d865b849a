//! Top-K evaluation under the temporal holdout.
//!
//! Every catalog item the user has not seen in train or validation is a
//! candidate; candidates are ranked by descending score with ties broken by
//! item id. Relevance is binary and NDCG uses the `1/log2(rank + 1)` discount.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::dataset::IndexedSplit;
use crate::error::{Error, Result};

/// Orders `(score, index)` pairs: higher score first, then lower index.
fn rank_cmp(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `k` best-scoring items not marked in `excluded`.
pub fn top_k_indices(scores: &[f64], excluded: &[bool], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| !excluded[i]).collect();
    if candidates.is_empty() {
        return Err(Error::data("empty candidate set"));
    }
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(scores, a, b));
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(|&a, &b| rank_cmp(scores, a, b));
    Ok(candidates)
}

/// Id-keyed ranking: every scored item outside `exclude`, best first, ties
/// by id ascending, truncated to `k`.
pub fn rank_items(
    scores: &BTreeMap<String, f64>,
    exclude: &BTreeSet<String>,
    k: usize,
) -> Result<Vec<String>> {
    // BTreeMap iteration is id-ascending, so index order is id order
    let ids: Vec<&String> = scores.keys().collect();
    let values: Vec<f64> = scores.values().copied().collect();
    let excluded: Vec<bool> = ids.iter().map(|id| exclude.contains(*id)).collect();
    Ok(top_k_indices(&values, &excluded, k)?
        .into_iter()
        .map(|i| ids[i].clone())
        .collect())
}

pub fn recall_at_k<T: Eq + Hash>(top_k: &[T], test_items: &HashSet<T>) -> f64 {
    if test_items.is_empty() {
        return 0.0;
    }
    let hits = top_k.iter().filter(|i| test_items.contains(i)).count();
    hits as f64 / test_items.len() as f64
}

pub fn ndcg_at_k<T: Eq + Hash>(top_k: &[T], test_items: &HashSet<T>, k: usize) -> f64 {
    if test_items.is_empty() {
        return 0.0;
    }
    let dcg: f64 = top_k
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, item)| test_items.contains(item))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(test_items.len()))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    dcg / idcg
}

// ---------------------------------------------------------------------------
// Student's t distribution via the regularized incomplete beta function.

/// ln Γ(x) for x > 0 (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
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
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 10_000;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
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
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
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

/// Two-sided p-value of a t statistic with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Two-sided paired t-test of `a - b`. `significant` additionally requires
/// the mean difference to favour `a`.
pub fn paired_significance(a: &[f64], b: &[f64], alpha: f64) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::data(format!(
            "paired test needs two equal-length samples of size >= 2 (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let (t, p) = if sd == 0.0 || sd <= 1e-15 * mean.abs() {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        }
    } else {
        let t = mean / (sd / (n as f64).sqrt());
        (t, t_two_sided_p(t, (n - 1) as f64))
    };
    Ok(PairedTest {
        n,
        mean_diff: mean,
        t,
        p_value: p,
        significant: p < alpha && mean > 0.0,
    })
}

// ---------------------------------------------------------------------------
// Reports.

/// Anything that can score the whole catalog for a user.
pub trait Recommender {
    fn method(&self) -> String;

    /// Writes one score per catalog item (index order) into `out`.
    fn score_all(&self, user: usize, out: &mut [f64]);

    /// `(alpha_short, alpha_long)` for attention-fused methods.
    fn attention(&self, _user: usize) -> Option<(f64, f64)> {
        None
    }
}

pub fn recall_key(k: usize) -> String {
    format!("recall@{k}")
}

pub fn ndcg_key(k: usize) -> String {
    format!("ndcg@{k}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user_id: String,
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha_short: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha_long: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceEntry {
    pub metric: String,
    pub baseline_method: String,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub ks: Vec<usize>,
    pub per_user: Vec<UserMetrics>,
    pub aggregate: BTreeMap<String, f64>,
    #[serde(default)]
    pub significance: Vec<SignificanceEntry>,
}

impl EvalReport {
    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.ks.iter().map(|&k| recall_key(k)).collect();
        names.extend(self.ks.iter().map(|&k| ndcg_key(k)));
        names
    }

    pub fn per_user_values(&self, metric: &str) -> Vec<f64> {
        self.per_user
            .iter()
            .map(|u| u.metrics.get(metric).copied().unwrap_or(0.0))
            .collect()
    }

    pub fn significance_for(&self, metric: &str) -> Option<&SignificanceEntry> {
        self.significance.iter().find(|s| s.metric == metric)
    }

    /// Merges reports of the same method from several runs (e.g. seeds) into
    /// one, prefixing each user id with its run label so that users stay
    /// distinct and pair up across methods.
    pub fn pooled(runs: &[(String, EvalReport)]) -> Result<EvalReport> {
        let (_, first) = runs.first().ok_or_else(|| Error::data("nothing to pool"))?;
        let mut per_user = Vec::new();
        for (label, r) in runs {
            if r.method != first.method || r.ks != first.ks {
                return Err(Error::data(format!(
                    "cannot pool {} (ks {:?}) with {} (ks {:?})",
                    r.method, r.ks, first.method, first.ks
                )));
            }
            per_user.extend(r.per_user.iter().map(|u| UserMetrics {
                user_id: format!("{label}/{}", u.user_id),
                ..u.clone()
            }));
        }
        Ok(EvalReport {
            method: first.method.clone(),
            ks: first.ks.clone(),
            aggregate: mean_metrics(&per_user, &first.ks),
            per_user,
            significance: Vec::new(),
        })
    }

    /// Runs a paired test against `baseline` for every metric, pairing users
    /// by id, and records the outcome.
    pub fn attach_significance(&mut self, baseline: &EvalReport, alpha: f64) -> Result<()> {
        let base: BTreeMap<&str, &UserMetrics> = baseline
            .per_user
            .iter()
            .map(|u| (u.user_id.as_str(), u))
            .collect();
        let mut entries = Vec::new();
        for metric in self.metric_names() {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for u in &self.per_user {
                let other = base.get(u.user_id.as_str()).ok_or_else(|| {
                    Error::data(format!("user {} missing from baseline report", u.user_id))
                })?;
                a.push(u.metrics[&metric]);
                b.push(other.metrics.get(&metric).copied().unwrap_or(0.0));
            }
            let test = paired_significance(&a, &b, alpha)?;
            entries.push(SignificanceEntry {
                metric,
                baseline_method: baseline.method.clone(),
                p_value: test.p_value,
                significant: test.significant,
            });
        }
        self.significance = entries;
        Ok(())
    }
}

/// Per-user test metrics for `rec`, excluding train and validation items
/// from the candidates.
pub fn evaluate(rec: &dyn Recommender, split: &IndexedSplit, ks: &[usize]) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::config("at least one K is required"));
    }
    let max_k = *ks.iter().max().expect("nonempty");
    let n_items = split.n_items();
    let mut scores = vec![0.0; n_items];
    let mut excluded = vec![false; n_items];
    let mut per_user = Vec::with_capacity(split.n_users());
    for (u, user) in split.users.iter().enumerate() {
        let user_id = &split.index.user_ids[u];
        if user.test.is_empty() {
            continue;
        }
        scores.iter_mut().for_each(|s| *s = f64::NAN);
        rec.score_all(u, &mut scores);
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::data(format!("missing scores for user {user_id}")));
        }
        excluded.iter_mut().for_each(|e| *e = false);
        for &i in user.train.iter().chain(&user.validation) {
            excluded[i] = true;
        }
        let top = top_k_indices(&scores, &excluded, max_k)?;
        let test: HashSet<usize> = user.test.iter().copied().collect();
        let mut metrics = BTreeMap::new();
        for &k in ks {
            let cut = &top[..k.min(top.len())];
            metrics.insert(recall_key(k), recall_at_k(cut, &test));
            metrics.insert(ndcg_key(k), ndcg_at_k(cut, &test, k));
        }
        let attention = rec.attention(u);
        per_user.push(UserMetrics {
            user_id: user_id.clone(),
            metrics,
            alpha_short: attention.map(|a| a.0),
            alpha_long: attention.map(|a| a.1),
        });
    }
    Ok(EvalReport {
        method: rec.method(),
        ks: ks.to_vec(),
        aggregate: mean_metrics(&per_user, ks),
        per_user,
        significance: Vec::new(),
    })
}

fn mean_metrics(per_user: &[UserMetrics], ks: &[usize]) -> BTreeMap<String, f64> {
    let n = per_user.len().max(1) as f64;
    let mut keys: Vec<String> = ks.iter().map(|&k| recall_key(k)).collect();
    keys.extend(ks.iter().map(|&k| ndcg_key(k)));
    keys.into_iter()
        .map(|key| {
            let sum: f64 = per_user.iter().map(|u| u.metrics.get(&key).copied().unwrap_or(0.0)).sum();
            (key, sum / n)
        })
        .collect()
}

/// Mean validation Recall@K: ranks everything except train items.
pub fn validation_recall(rec: &dyn Recommender, split: &IndexedSplit, k: usize) -> f64 {
    let n_items = split.n_items();
    let mut scores = vec![0.0; n_items];
    let mut excluded = vec![false; n_items];
    let mut total = 0.0;
    let mut counted = 0usize;
    for (u, user) in split.users.iter().enumerate() {
        if user.validation.is_empty() {
            continue;
        }
        rec.score_all(u, &mut scores);
        excluded.iter_mut().for_each(|e| *e = false);
        for &i in &user.train {
            excluded[i] = true;
        }
        let Ok(top) = top_k_indices(&scores, &excluded, k) else {
            continue;
        };
        let val: HashSet<usize> = user.validation.iter().copied().collect();
        total += recall_at_k(&top, &val);
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

// ---------------------------------------------------------------------------
// Table rendering.

fn pretty_metric(name: &str) -> String {
    match name.split_once('@') {
        Some(("recall", k)) => format!("Recall@{k}"),
        Some(("ndcg", k)) => format!("NDCG@{k}"),
        _ => name.to_owned(),
    }
}

pub fn pretty_method(name: &str) -> String {
    match name {
        "centric" => "Centric".into(),
        "popularity" => "Popularity".into(),
        "mf" => "MF".into(),
        "temp_fusion" => "Temp-Fusion".into(),
        "llm_tp" => "LLM-TP".into(),
        "full" => "Full Model (LLM-TP)".into(),
        "short_only" => "Short-Term Only (ST)".into(),
        "long_only" => "Long-Term Only (LT)".into(),
        "general_only" => "General Preferences (No TS)".into(),
        "dot_product" => "Dot-Product Scoring (DP)".into(),
        other => other.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
}

fn render_rows(header: &[String], rows: &[Vec<String>], format: TableFormat) -> String {
    match format {
        TableFormat::Csv => {
            let mut out = String::new();
            for row in std::iter::once(header.to_vec()).chain(rows.iter().cloned()) {
                let cells: Vec<String> = row
                    .iter()
                    .map(|c| {
                        if c.contains(',') || c.contains('"') {
                            format!("\"{}\"", c.replace('"', "\"\""))
                        } else {
                            c.clone()
                        }
                    })
                    .collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            out
        }
        TableFormat::Text => {
            let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
            for row in rows {
                for (w, c) in widths.iter_mut().zip(row) {
                    *w = (*w).max(c.chars().count());
                }
            }
            let fmt_row = |row: &[String]| -> String {
                row.iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, &w))| {
                        if i == 0 {
                            format!("{c:<w$}")
                        } else {
                            format!("{c:>w$}")
                        }
                    })
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_owned()
            };
            let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1));
            let mut out = format!("{}\n{rule}\n", fmt_row(header));
            for row in rows {
                out.push_str(&fmt_row(row));
                out.push('\n');
            }
            out
        }
    }
}

fn gain(value: f64, base: f64) -> String {
    if base == 0.0 {
        "n/a".into()
    } else {
        format!("{:.0}%", 100.0 * (value - base) / base)
    }
}

/// Method-comparison table: one row per report with `*` marking a
/// significant improvement over `baseline`, plus a row with the percentage
/// gain of `focus` over `baseline`.
pub fn render_comparison(
    reports: &[EvalReport],
    baseline: &str,
    focus: &str,
    format: TableFormat,
) -> Result<String> {
    let first = reports
        .first()
        .ok_or_else(|| Error::data("no reports to render"))?;
    let metrics = first.metric_names();
    let mut header = vec!["Method".to_owned()];
    header.extend(metrics.iter().map(|m| pretty_metric(m)));
    let mut rows = Vec::new();
    for r in reports {
        let mut row = vec![pretty_method(&r.method)];
        for m in &metrics {
            let v = r.aggregate.get(m).copied().unwrap_or(0.0);
            let star = match r.significance_for(m) {
                Some(s) if s.significant && s.baseline_method == baseline => "*",
                _ => "",
            };
            row.push(format!("{v:.4}{star}"));
        }
        rows.push(row);
    }
    let base = reports.iter().find(|r| r.method == baseline);
    let target = reports.iter().find(|r| r.method == focus);
    if let (Some(base), Some(target)) = (base, target) {
        let mut row = vec![format!(
            "Gain of {} vs. {}",
            pretty_method(focus),
            pretty_method(baseline)
        )];
        for m in &metrics {
            row.push(gain(
                target.aggregate.get(m).copied().unwrap_or(0.0),
                base.aggregate.get(m).copied().unwrap_or(0.0),
            ));
        }
        rows.push(row);
    }
    let mut out = render_rows(&header, &rows, format);
    if format == TableFormat::Text {
        out.push_str(&format!(
            "* significant improvement over {} (paired t-test, p < 0.05)\n",
            pretty_method(baseline)
        ));
    }
    Ok(out)
}

/// Ablation table over the largest K: one row per variant plus the relative
/// gain of the full model over each.
pub fn render_ablation(reports: &[EvalReport], full: &str, format: TableFormat) -> Result<String> {
    let first = reports
        .first()
        .ok_or_else(|| Error::data("no reports to render"))?;
    let k = *first.ks.iter().max().expect("ks nonempty");
    let metrics = [recall_key(k), ndcg_key(k)];
    let full_report = reports.iter().find(|r| r.method == full);
    let mut header = vec!["Ablation Variant".to_owned()];
    header.extend(metrics.iter().map(|m| pretty_metric(m)));
    if full_report.is_some() {
        header.extend(metrics.iter().map(|m| format!("Full gain {}", pretty_metric(m))));
    }
    let mut rows = Vec::new();
    // full model last, as the reference row
    let mut ordered: Vec<&EvalReport> = reports.iter().filter(|r| r.method != full).collect();
    ordered.extend(full_report);
    for r in ordered {
        let mut row = vec![pretty_method(&r.method)];
        for m in &metrics {
            row.push(format!("{:.4}", r.aggregate.get(m).copied().unwrap_or(0.0)));
        }
        if let Some(f) = full_report {
            for m in &metrics {
                row.push(if r.method == full {
                    "-".into()
                } else {
                    gain(
                        f.aggregate.get(m).copied().unwrap_or(0.0),
                        r.aggregate.get(m).copied().unwrap_or(0.0),
                    )
                });
            }
        }
        rows.push(row);
    }
    Ok(render_rows(&header, &rows, format))
}

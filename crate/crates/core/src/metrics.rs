//! Classification, regression and ranking metrics.

use crate::error::{GastonError, Result};

/// Candidates for one user in descending score order, plus the set of
/// ground-truth candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub candidates: Vec<usize>,
    pub relevant: Vec<usize>,
}

impl RankedList {
    /// Orders `(candidate, score)` pairs by descending score; ties go to the
    /// smaller candidate index.
    pub fn from_scores(mut scored: Vec<(usize, f64)>, relevant: Vec<usize>) -> Self {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        RankedList {
            candidates: scored.into_iter().map(|(c, _)| c).collect(),
            relevant,
        }
    }

    fn is_relevant(&self, c: usize) -> bool {
        self.relevant.contains(&c)
    }

    /// 1-based position of the best-ranked relevant candidate.
    pub fn best_rank(&self) -> Option<usize> {
        self.candidates.iter().position(|&c| self.is_relevant(c)).map(|p| p + 1)
    }
}

fn check_pair(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(GastonError::arg(format!("{what}: length mismatch {a} vs {b}")));
    }
    if a == 0 {
        return Err(GastonError::arg(format!("{what}: empty input")));
    }
    Ok(())
}

/// Accuracy and the unweighted mean of per-class F1 over every class seen
/// in either predictions or labels.
pub fn accuracy_and_macro_f1(predictions: &[usize], labels: &[usize]) -> Result<(f64, f64)> {
    check_pair(predictions.len(), labels.len(), "accuracy")?;
    let n_classes = predictions.iter().chain(labels).max().copied().unwrap_or(0) + 1;
    let (mut tp, mut fp, mut fneg) = (vec![0usize; n_classes], vec![0usize; n_classes], vec![0usize; n_classes]);
    let mut present = vec![false; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        present[p] = true;
        present[y] = true;
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[y] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let mut f1_sum = 0.0;
    let mut classes = 0usize;
    for c in (0..n_classes).filter(|&c| present[c]) {
        classes += 1;
        let prec = if tp[c] + fp[c] == 0 { 0.0 } else { tp[c] as f64 / (tp[c] + fp[c]) as f64 };
        let rec = if tp[c] + fneg[c] == 0 { 0.0 } else { tp[c] as f64 / (tp[c] + fneg[c]) as f64 };
        if prec + rec > 0.0 {
            f1_sum += 2.0 * prec * rec / (prec + rec);
        }
    }
    Ok((correct as f64 / labels.len() as f64, f1_sum / classes as f64))
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds.len(), targets.len(), "rmse")?;
    let sse: f64 = preds.iter().zip(targets).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

/// Sample Pearson correlation. Zero variance in either input is an error.
pub fn pearson_r(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds.len(), targets.len(), "pearson")?;
    if preds.len() < 2 {
        return Err(GastonError::arg("pearson needs at least 2 points"));
    }
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let mt = targets.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(GastonError::Numeric("pearson: input has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn check_lists(lists: &[RankedList], what: &str) -> Result<()> {
    if lists.is_empty() {
        return Err(GastonError::arg(format!("{what}: no ranked lists")));
    }
    for (i, l) in lists.iter().enumerate() {
        if l.candidates.is_empty() {
            return Err(GastonError::arg(format!("{what}: list {i} has no candidates")));
        }
        if l.relevant.is_empty() {
            return Err(GastonError::arg(format!("{what}: list {i} has no ground truth")));
        }
    }
    Ok(())
}

/// Mean reciprocal rank of the best-ranked relevant item, counting 0 for
/// users whose best rank is beyond `k`.
pub fn mrr_at_k(lists: &[RankedList], k: usize) -> Result<f64> {
    check_lists(lists, "mrr")?;
    let total: f64 = lists
        .iter()
        .map(|l| match l.best_rank() {
            Some(r) if r <= k => 1.0 / r as f64,
            _ => 0.0,
        })
        .sum();
    Ok(total / lists.len() as f64)
}

/// Binary-relevance NDCG truncated at `k`, averaged over users.
pub fn ndcg_at_k(lists: &[RankedList], k: usize) -> Result<f64> {
    check_lists(lists, "ndcg")?;
    let discount = |pos: usize| 1.0 / ((pos + 1) as f64).log2();
    let total: f64 = lists
        .iter()
        .map(|l| {
            let dcg: f64 = l
                .candidates
                .iter()
                .take(k)
                .enumerate()
                .filter(|(_, &c)| l.is_relevant(c))
                .map(|(i, _)| discount(i + 1))
                .sum();
            let ideal: f64 = (1..=l.relevant.len().min(k)).map(discount).sum();
            if ideal == 0.0 {
                0.0
            } else {
                dcg / ideal
            }
        })
        .sum();
    Ok(total / lists.len() as f64)
}

/// Named metric values, written one `name=value` pair per line in
/// insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    entries: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(n, v)| format!("{n}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = MetricReport::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (name, value) = line
                .split_once('=')
                .ok_or_else(|| GastonError::Format(format!("report line {}: expected name=value", i + 1)))?;
            let value = value
                .trim()
                .parse()
                .map_err(|_| GastonError::Format(format!("report line {}: bad number {value:?}", i + 1)))?;
            r.push(name.trim(), value);
        }
        Ok(r)
    }
}

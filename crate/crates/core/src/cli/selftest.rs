//! Built-in checks run by `gaston selftest`: a finite-difference check of the
//! full pretraining objective and brute-force oracles for every metric.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fixtures::random_graph;
use crate::hgt::{HgtConfig, HgtParams};
use crate::metrics::{accuracy_and_macro_f1, mrr_at_k, ndcg_at_k, pearson_r, rmse, RankedList};
use crate::numerics::Tensor2;
use crate::pretrain::{check_objective_gradients, PretrainConfig};
use crate::textenc::EmbeddingTable;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn run_all(seed: u64, cases: usize) -> Result<Vec<CheckResult>> {
    Ok(vec![gradient_check(seed)?, metric_oracles(seed, cases)?])
}

/// Gradient check on a random 10-node graph. Draws that put a ReLU input
/// within 1e-3 of its kink are redrawn.
pub fn gradient_check(seed: u64) -> Result<CheckResult> {
    let counts = [3, 4, 3];
    for attempt in 0..50u64 {
        let s = seed.wrapping_mul(1000).wrapping_add(attempt);
        let g = random_graph(s, counts, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let texts = EmbeddingTable::from_tensor(&Tensor2::random_normal(counts[1], 6, 1.0, &mut rng))?;
        let communities = Tensor2::random_normal(counts[2], 4, 1.0, &mut rng);
        let mut params = HgtParams::new(
            HgtConfig {
                d: 8,
                layers: 2,
                heads: 2,
                d_in: [4, 6, 4],
            },
            s,
        )?;
        params.weights.mask = Tensor2::random_normal(1, 6, 1.0, &mut rng);
        let cfg = PretrainConfig {
            mask_rate: 0.5,
            negatives: 2,
            rng_seed: s,
            ..PretrainConfig::default()
        };
        let (report, margin) = check_objective_gradients(&g, &texts, &communities, &params, &cfg, 1e-5)?;
        if margin < 1e-3 {
            continue;
        }
        return Ok(CheckResult {
            name: "gradient check",
            passed: report.max_rel_error < 1e-4,
            detail: format!(
                "max relative error {:.3e} over {} entries",
                report.max_rel_error, report.entries_checked
            ),
        });
    }
    Ok(CheckResult {
        name: "gradient check",
        passed: false,
        detail: "no draw kept every ReLU input away from zero".into(),
    })
}

fn oracle_accuracy_f1(pred: &[usize], truth: &[usize]) -> (f64, f64) {
    let n = pred.len() as f64;
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64;
    let mut classes: Vec<usize> = pred.iter().chain(truth).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let mut sum = 0.0;
    for &c in &classes {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let fp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t != c).count() as f64;
        let fneg = pred.iter().zip(truth).filter(|&(&p, &t)| p != c && t == c).count() as f64;
        sum += 2.0 * tp / (2.0 * tp + fp + fneg);
    }
    (correct / n, sum / classes.len() as f64)
}

/// 1-based rank of `c` under descending score with ties to the smaller index.
fn oracle_rank(scores: &[(usize, f64)], c: usize) -> usize {
    let sc = scores.iter().find(|x| x.0 == c).expect("candidate is scored").1;
    1 + scores.iter().filter(|&&(o, s)| s > sc || (s == sc && o < c)).count()
}

/// Scored candidates and relevant candidates for one user.
type Case = (Vec<(usize, f64)>, Vec<usize>);

fn oracle_mrr_ndcg(cases: &[Case], k: usize) -> (f64, f64) {
    let (mut mrr, mut ndcg) = (0.0, 0.0);
    for (scores, rel) in cases {
        let best = rel.iter().map(|&c| oracle_rank(scores, c)).min().expect("non-empty");
        if best <= k {
            mrr += 1.0 / best as f64;
        }
        let dcg: f64 = rel
            .iter()
            .map(|&c| oracle_rank(scores, c))
            .filter(|&r| r <= k)
            .map(|r| 1.0 / (r as f64 + 1.0).log2())
            .sum();
        let idcg: f64 = (1..=rel.len().min(k)).map(|r| 1.0 / (r as f64 + 1.0).log2()).sum();
        ndcg += dcg / idcg;
    }
    (mrr / cases.len() as f64, ndcg / cases.len() as f64)
}

/// Compares each metric with a direct implementation on `cases` random
/// inputs and checks a few hand-computed values.
pub fn metric_oracles(seed: u64, cases: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.random_range(1..40);
        let c = rng.random_range(1..5);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (a, f) = accuracy_and_macro_f1(&pred, &truth)?;
        let (oa, of) = oracle_accuracy_f1(&pred, &truth);
        worst = worst.max((a - oa).abs()).max((f - of).abs());

        let n = rng.random_range(2..40);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sq: f64 = p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum();
        worst = worst.max((rmse(&p, &t)? - (sq / n as f64).sqrt()).abs());
        let (mp, mt) = (p.iter().sum::<f64>() / n as f64, t.iter().sum::<f64>() / n as f64);
        let cov: f64 = p.iter().zip(&t).map(|(a, b)| (a - mp) * (b - mt)).sum();
        let vp: f64 = p.iter().map(|a| (a - mp).powi(2)).sum();
        let vt: f64 = t.iter().map(|b| (b - mt).powi(2)).sum();
        worst = worst.max((pearson_r(&p, &t)? - cov / (vp * vt).sqrt()).abs());

        let users = rng.random_range(1..6);
        let mut raw = Vec::new();
        for _ in 0..users {
            let m = rng.random_range(1..25);
            // coarse scores so that ties occur
            let scores: Vec<(usize, f64)> = (0..m).map(|i| (i, f64::from(rng.random_range(0..6u8)))).collect();
            let mut rel: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.2)).collect();
            if rel.is_empty() {
                rel.push(rng.random_range(0..m));
            }
            raw.push((scores, rel));
        }
        let lists: Vec<RankedList> = raw.iter().map(|(s, r)| RankedList::from_scores(s.clone(), r.clone())).collect();
        let (om, on) = oracle_mrr_ndcg(&raw, 10);
        worst = worst.max((mrr_at_k(&lists, 10)? - om).abs());
        worst = worst.max((ndcg_at_k(&lists, 10)? - on).abs());
    }

    let list = |c: &[usize], r: &[usize]| RankedList {
        candidates: c.to_vec(),
        relevant: r.to_vec(),
    };
    let ranks = [list(&[5, 0, 1], &[5]), list(&[0, 5, 1], &[5]), list(&[0, 1, 2, 5], &[5])];
    let anchors = [
        (accuracy_and_macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1])?.1, 1.0 / 3.0, 1e-12),
        (mrr_at_k(&ranks, 10)?, 7.0 / 12.0, 1e-12),
        (ndcg_at_k(&[list(&[2, 1, 3], &[1])], 10)?, 0.63093, 5e-6),
        (ndcg_at_k(&[list(&[1, 2, 3], &[1, 3])], 10)?, 0.91972, 5e-6),
    ];
    let anchors_ok = anchors.iter().all(|(got, want, tol)| (got - want).abs() < *tol);
    Ok(CheckResult {
        name: "metric oracles",
        passed: worst < 1e-12 && anchors_ok,
        detail: format!("{cases} random cases per metric, max deviation {worst:.3e}, anchors {}", if anchors_ok { "ok" } else { "wrong" }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_all(7, 200).unwrap() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn oracle_rank_breaks_ties_by_index() {
        let s = vec![(0, 1.0), (1, 2.0), (2, 2.0)];
        assert_eq!([0, 1, 2].map(|c| oracle_rank(&s, c)), [3, 1, 2]);
    }
}

//! Sampled-negative ranking metrics and binary classification metrics.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::data::{extract_zero_shot, Target};
use crate::encoder::ITEM_EMB;
use crate::error::{Error, Result};
use crate::model::{Model, UserFeatures};
use crate::seed;
use crate::tensor::Tape;

pub const CUTOFFS: [usize; 4] = [5, 10, 20, 50];
pub const EVAL_NEGATIVES: usize = 99;

/// 1-based rank of the ground truth among `negatives`, counting every tied
/// negative as ranked above it.
pub fn rank_case(truth: f64, negatives: &[f64]) -> Result<usize> {
    if !truth.is_finite() || negatives.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    Ok(1 + negatives.iter().filter(|&&s| s >= truth).count())
}

/// Share of negatives scored below the ground truth, ties counting half.
pub fn case_auc(truth: f64, negatives: &[f64]) -> f64 {
    let mut s = 0.0;
    for &n in negatives {
        if n < truth {
            s += 1.0;
        } else if n == truth {
            s += 0.5;
        }
    }
    s / negatives.len() as f64
}

pub fn hit_at(ranks: &[usize], n: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64
}

pub fn ndcg_at(ranks: &[usize], n: usize) -> f64 {
    ranks
        .iter()
        .map(|&r| if r <= n { 1.0 / ((r + 1) as f64).log2() } else { 0.0 })
        .sum::<f64>()
        / ranks.len() as f64
}

/// `EVAL_NEGATIVES` distinct items outside `clicks`, uniformly without
/// replacement.
pub fn sample_eval_negatives<R: Rng + ?Sized>(clicks: &HashSet<usize>, num_items: usize, rng: &mut R) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..num_items).filter(|i| !clicks.contains(i)).collect();
    if pool.len() < EVAL_NEGATIVES {
        return Err(Error::data(format!(
            "only {} unclicked items, {EVAL_NEGATIVES} negatives needed",
            pool.len()
        )));
    }
    Ok(pool.choose_multiple(rng, EVAL_NEGATIVES).copied().collect())
}

/// Negatives for one case, fixed by (seed, user, prefix).
pub fn case_negatives(seed_base: u64, target: &Target, clicks: &HashSet<usize>, num_items: usize) -> Result<Vec<usize>> {
    let mut rng = seed::rng(seed_base, &[0xe7a1, target.user as u64, target.prefix as u64]);
    sample_eval_negatives(clicks, num_items, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub cases: usize,
    pub auc: f64,
    /// HIT@N for N in [`CUTOFFS`].
    pub hit: [f64; 4],
    pub ndcg: [f64; 4],
}

impl MetricsReport {
    /// `(rank, case AUC)` per case.
    pub fn from_cases(cases: &[(usize, f64)]) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::contract("no evaluation cases"));
        }
        let ranks: Vec<usize> = cases.iter().map(|c| c.0).collect();
        Ok(Self {
            cases: cases.len(),
            auc: cases.iter().map(|c| c.1).sum::<f64>() / cases.len() as f64,
            hit: CUTOFFS.map(|n| hit_at(&ranks, n)),
            ndcg: CUTOFFS.map(|n| ndcg_at(&ranks, n)),
        })
    }

    pub fn hit_at(&self, n: usize) -> Option<f64> {
        CUTOFFS.iter().position(|&c| c == n).map(|i| self.hit[i])
    }

    pub fn ndcg_at(&self, n: usize) -> Option<f64> {
        CUTOFFS.iter().position(|&c| c == n).map(|i| self.ndcg[i])
    }

    /// Named values in a fixed order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = vec![("auc".to_string(), self.auc)];
        for (i, n) in CUTOFFS.iter().enumerate() {
            out.push((format!("hit@{n}"), self.hit[i]));
        }
        for (i, n) in CUTOFFS.iter().enumerate() {
            out.push((format!("ndcg@{n}"), self.ndcg[i]));
        }
        out
    }

    /// One `metric=value` per line.
    pub fn to_lines(&self) -> String {
        let mut s = format!("cases={}\n", self.cases);
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v:.6}");
        }
        s
    }

    /// Header and one row in the column layout of a results table.
    pub fn table(&self, label: &str) -> String {
        let entries = self.entries();
        let mut head = format!("{:<16}", "model");
        let mut row = format!("{label:<16}");
        for (k, v) in &entries {
            let _ = write!(head, "{k:>10}");
            let _ = write!(row, "{v:>10.4}");
        }
        format!("{head}\n{row}\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn classification_metrics(predictions: &[bool], labels: &[bool]) -> Result<ClassificationReport> {
    if predictions.is_empty() {
        return Err(Error::contract("no predictions"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Dimension {
            op: "classification_metrics",
            lhs: vec![predictions.len()],
            rhs: vec![labels.len()],
        });
    }
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
        correct += usize::from(p == y);
    }
    let ratio = |num: usize, den: usize, name: &str| {
        if den == 0 {
            log::warn!("{name} is 0/0; reporting 0");
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp, "precision");
    let recall = ratio(tp, tp + fneg, "recall");
    Ok(ClassificationReport {
        acc: correct as f64 / predictions.len() as f64,
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    FewShot,
    ZeroShot,
    Joint,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fewshot" => Ok(Split::FewShot),
            "zeroshot" => Ok(Split::ZeroShot),
            "joint" => Ok(Split::Joint),
            other => Err(Error::config(format!("unknown split {other:?} (fewshot|zeroshot|joint)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::FewShot => "fewshot",
            Split::ZeroShot => "zeroshot",
            Split::Joint => "joint",
        }
    }
}

/// The targets of `users` that belong to `split`.
pub fn split_targets(sequences: &[Vec<usize>], users: &[usize], split: Split) -> Vec<Target> {
    let (zero, few) = extract_zero_shot(sequences, users);
    match split {
        Split::ZeroShot => zero,
        Split::FewShot => few,
        Split::Joint => {
            let mut all = zero;
            all.extend(few);
            all.sort();
            all
        }
    }
}

/// Representation rows of `model` for the requested prefixes of one user.
/// `None` marks a prefix the model cannot represent (an empty input with
/// no prompt or profile); such cases score every candidate 0.
pub fn user_vectors(model: &Model, seq: &[usize], prefixes: &[usize], features: Option<UserFeatures<'_>>) -> Result<Vec<Option<Vec<f64>>>> {
    let cap = model.config.item_capacity();
    let d = model.config.encoder.model_dim;
    let mut out = vec![None; prefixes.len()];
    let max_shared = prefixes.iter().copied().filter(|&p| p <= cap).max();
    if let Some(m) = max_shared {
        let mut tape = Tape::new();
        let binds = model.params.bind(&mut tape);
        let input: Vec<Option<usize>> = seq[..m].iter().map(|&i| Some(i)).collect();
        let pass = model.user_pass(&mut tape, &binds, &input, features, None)?;
        if let Some(reps) = pass.reps {
            let vals = tape.value(reps);
            for (k, &p) in prefixes.iter().enumerate() {
                if p <= cap && p >= pass.first_prefix {
                    let r = p - pass.first_prefix;
                    out[k] = Some(vals[r * d..(r + 1) * d].to_vec());
                }
            }
        }
    }
    for (k, &p) in prefixes.iter().enumerate() {
        if p > cap {
            let mut tape = Tape::new();
            let binds = model.params.bind(&mut tape);
            let input: Vec<Option<usize>> = seq[p - cap..p].iter().map(|&i| Some(i)).collect();
            let pass = model.user_pass(&mut tape, &binds, &input, features, None)?;
            let reps = pass.reps.ok_or_else(|| Error::contract("no representation for a non-empty input"))?;
            let vals = tape.value(reps);
            out[k] = Some(vals[vals.len() - d..].to_vec());
        }
    }
    Ok(out)
}

/// Per-case (rank, AUC) for `targets`, grouped into one pass per user.
pub fn score_targets<'f>(
    model: &Model,
    sequences: &[Vec<usize>],
    targets: &[Target],
    features: &dyn Fn(usize) -> Option<UserFeatures<'f>>,
    seed_base: u64,
) -> Result<Vec<(usize, f64)>> {
    let table = model.params.get(ITEM_EMB)?.data();
    let d = model.config.encoder.model_dim;
    let num_items = model.config.num_items;
    let mut out = Vec::with_capacity(targets.len());
    let mut start = 0;
    while start < targets.len() {
        let user = targets[start].user;
        let mut end = start;
        while end < targets.len() && targets[end].user == user {
            end += 1;
        }
        let group = &targets[start..end];
        start = end;
        let seq = &sequences[user];
        let clicks: HashSet<usize> = seq.iter().copied().collect();
        let prefixes: Vec<usize> = group.iter().map(|t| t.prefix).collect();
        let vecs = user_vectors(model, seq, &prefixes, features(user))?;
        for (t, v) in group.iter().zip(vecs) {
            if t.item >= num_items {
                return Err(Error::Index { id: t.item, bound: num_items });
            }
            let negatives = case_negatives(seed_base, t, &clicks, num_items)?;
            let score = |item: usize| -> f64 {
                match &v {
                    Some(u) => u.iter().zip(&table[item * d..(item + 1) * d]).map(|(a, b)| a * b).sum(),
                    None => 0.0,
                }
            };
            let truth = score(t.item);
            let negs: Vec<f64> = negatives.iter().map(|&i| score(i)).collect();
            out.push((rank_case(truth, &negs)?, case_auc(truth, &negs)));
        }
    }
    Ok(out)
}

/// Evaluates `users` on `split` with the sampled-negative protocol.
pub fn evaluate<'f>(
    model: &Model,
    sequences: &[Vec<usize>],
    users: &[usize],
    split: Split,
    features: &dyn Fn(usize) -> Option<UserFeatures<'f>>,
    seed_base: u64,
) -> Result<MetricsReport> {
    let mut sorted = users.to_vec();
    sorted.sort_unstable();
    let targets = split_targets(sequences, &sorted, split);
    let cases = score_targets(model, sequences, &targets, features, seed_base)?;
    MetricsReport::from_cases(&cases)
}

/// [`evaluate`] with targets scored on `threads` workers. Work is split
/// at user boundaries, so results match the sequential path exactly.
pub fn evaluate_parallel<'f>(
    model: &Model,
    sequences: &[Vec<usize>],
    users: &[usize],
    split: Split,
    features: &(dyn Fn(usize) -> Option<UserFeatures<'f>> + Sync),
    seed_base: u64,
    threads: usize,
) -> Result<MetricsReport> {
    if threads <= 1 {
        return evaluate(model, sequences, users, split, features, seed_base);
    }
    let mut sorted = users.to_vec();
    sorted.sort_unstable();
    let chunk = sorted.len().div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<(usize, f64)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = sorted
            .chunks(chunk)
            .map(|us| {
                s.spawn(move || {
                    let targets = split_targets(sequences, us, split);
                    score_targets(model, sequences, &targets, features, seed_base)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut cases = Vec::new();
    for p in parts {
        cases.extend(p?);
    }
    MetricsReport::from_cases(&cases)
}

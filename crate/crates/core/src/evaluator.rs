//! Full-ranking retrieval metrics over held-out interactions.

use serde::Serialize;

use crate::config::ScoreKind;
use crate::error::{Error, Result};
use crate::parallel;
use crate::sparse::SparseCsr;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Val,
    Test,
}

/// Per-user ranked candidate lists. `truncated` flags users whose candidate
/// pool was smaller than the requested depth.
#[derive(Clone, Debug)]
pub struct RankedLists {
    pub lists: Vec<Vec<u32>>,
    pub truncated: bool,
}

/// Scores every non-excluded item for every user and keeps the `k_max`
/// best, ties broken toward the lower item index. Excluded interactions
/// never appear in a list.
pub fn rank_items(
    e_users: &Tensor<f32>,
    e_items: &Tensor<f32>,
    exclude: &[&SparseCsr<f32>],
    k_max: usize,
    score: ScoreKind,
) -> Result<RankedLists> {
    if e_users.cols() != e_items.cols() {
        return Err(Error::dim(
            "rank_items",
            format!("user width {} vs item width {}", e_users.cols(), e_items.cols()),
        ));
    }
    for ex in exclude {
        if ex.rows() != e_users.rows() || ex.cols() != e_items.rows() {
            return Err(Error::dim(
                "rank_items",
                format!(
                    "exclusion {}x{} vs {} users, {} items",
                    ex.rows(),
                    ex.cols(),
                    e_users.rows(),
                    e_items.rows()
                ),
            ));
        }
    }
    let n_users = e_users.rows();
    let n_items = e_items.rows();

    let items = match score {
        ScoreKind::Dot => e_items.clone(),
        ScoreKind::Cosine => normalize_rows(e_items),
    };
    let users = match score {
        ScoreKind::Dot => e_users.clone(),
        ScoreKind::Cosine => normalize_rows(e_users),
    };

    let per_user: Vec<(Vec<u32>, bool)> = parallel::map_ranges(n_users, 64, |range| {
        let mut out = Vec::with_capacity(range.len());
        let mut excluded = vec![false; n_items];
        let mut scored: Vec<(usize, f32)> = Vec::with_capacity(n_items);
        for u in range {
            excluded.iter_mut().for_each(|e| *e = false);
            for ex in exclude {
                for &i in ex.row_cols(u) {
                    excluded[i] = true;
                }
            }
            scored.clear();
            let urow = users.row(u);
            for i in 0..n_items {
                if excluded[i] {
                    continue;
                }
                let mut s = 0.0f32;
                for (&a, &b) in urow.iter().zip(items.row(i)) {
                    s += a * b;
                }
                scored.push((i, s));
            }
            let keep = k_max.min(scored.len());
            let truncated = keep < k_max;
            if keep > 0 {
                scored.select_nth_unstable_by(keep - 1, |a, b| {
                    b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0))
                });
                scored.truncate(keep);
                scored.sort_unstable_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            }
            out.push((scored.iter().map(|&(i, _)| i as u32).collect(), truncated));
        }
        out
    });

    let truncated = per_user.iter().any(|(_, t)| *t);
    Ok(RankedLists {
        lists: per_user.into_iter().map(|(l, _)| l).collect(),
        truncated,
    })
}

fn normalize_rows(t: &Tensor<f32>) -> Tensor<f32> {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let sq: f32 = row.iter().map(|v| v * v).sum();
        if sq > 0.0 {
            let inv = sq.sqrt().recip();
            for v in row {
                *v *= inv;
            }
        }
    }
    out
}

/// Mean over users (with nonempty ground truth) of |top-k hits| / |truth|.
pub fn recall_at_k(ranked: &[Vec<u32>], truth: &SparseCsr<f32>, k: usize) -> f64 {
    let mut total = 0.0f64;
    let mut counted = 0usize;
    for (u, list) in ranked.iter().enumerate() {
        let relevant = truth.row_cols(u);
        if relevant.is_empty() {
            continue;
        }
        let hits = list
            .iter()
            .take(k)
            .filter(|&&i| relevant.binary_search(&(i as usize)).is_ok())
            .count();
        total += hits as f64 / relevant.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Binary-relevance NDCG: hits at rank r (1-based) earn 1/log2(r+1),
/// normalized by the ideal prefix of min(k, |truth|) hits.
pub fn ndcg_at_k(ranked: &[Vec<u32>], truth: &SparseCsr<f32>, k: usize) -> f64 {
    let mut total = 0.0f64;
    let mut counted = 0usize;
    for (u, list) in ranked.iter().enumerate() {
        let relevant = truth.row_cols(u);
        if relevant.is_empty() {
            continue;
        }
        let mut dcg = 0.0f64;
        for (pos, &i) in list.iter().take(k).enumerate() {
            if relevant.binary_search(&(i as usize)).is_ok() {
                dcg += 1.0 / ((pos + 2) as f64).log2();
            }
        }
        let ideal_hits = k.min(relevant.len());
        let idcg: f64 = (0..ideal_hits).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
        total += dcg / idcg;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub n_evaluated_users: usize,
    pub truncated: bool,
}

impl EvalReport {
    pub fn metric(&self, k: usize) -> Option<(f64, f64)> {
        self.ks
            .iter()
            .position(|&x| x == k)
            .map(|p| (self.recall[p], self.ndcg[p]))
    }

    pub fn recall_at(&self, k: usize) -> f64 {
        self.metric(k).map(|(r, _)| r).unwrap_or(0.0)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.metric(k).map(|(_, n)| n).unwrap_or(0.0)
    }
}

/// Ranks with the split's exclusion rule (train for validation, train plus
/// validation for test) and scores every requested depth.
pub fn score_embeddings(
    e_users: &Tensor<f32>,
    e_items: &Tensor<f32>,
    train: &SparseCsr<f32>,
    val: &SparseCsr<f32>,
    test: &SparseCsr<f32>,
    split: Split,
    ks: &[usize],
    score: ScoreKind,
) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::Config("need at least one k".into()));
    }
    let k_max = *ks.iter().max().expect("nonempty");
    let (exclude, truth): (Vec<&SparseCsr<f32>>, &SparseCsr<f32>) = match split {
        Split::Val => (vec![train], val),
        Split::Test => (vec![train, val], test),
    };
    let ranked = rank_items(e_users, e_items, &exclude, k_max, score)?;
    let n_evaluated_users = (0..truth.rows()).filter(|&u| truth.row_nnz(u) > 0).count();
    let recall = ks.iter().map(|&k| recall_at_k(&ranked.lists, truth, k)).collect();
    let ndcg = ks.iter().map(|&k| ndcg_at_k(&ranked.lists, truth, k)).collect();
    Ok(EvalReport {
        split,
        ks: ks.to_vec(),
        recall,
        ndcg,
        n_evaluated_users,
        truncated: ranked.truncated,
    })
}

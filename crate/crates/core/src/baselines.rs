//! Reference selection strategies and retrieval scoring.
//!
//! `diversity` is a greedy farthest-first (max-min cosine distance) stand-in
//! for DivPrune-style pruning.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, squared_norm};
use crate::segmentation::relevance_heatmap;
use crate::selector::rank_order;
use crate::wsi_data::{EmbeddingBundle, QuestionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyId {
    Random,
    Diversity,
    Similarity,
    Learned,
}

impl StrategyId {
    pub const ALL: [StrategyId; 4] = [
        StrategyId::Random,
        StrategyId::Diversity,
        StrategyId::Similarity,
        StrategyId::Learned,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::Random => "random",
            StrategyId::Diversity => "diversity",
            StrategyId::Similarity => "similarity",
            StrategyId::Learned => "learned",
        }
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown strategy {s:?}")))
    }
}

/// Uniform `k`-subset of `0..n` from a seeded Fisher-Yates prefix, sorted.
pub fn random_select(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::validation(format!("cannot pick {k} of {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Greedy farthest-first in cosine distance, seeded at patch 0.
pub fn diversity_select(bundle: &EmbeddingBundle, k: usize) -> Result<Vec<usize>> {
    let n = bundle.n_patches();
    if n == 0 {
        return Err(Error::validation("diversity selection needs at least one patch"));
    }
    if k > n {
        return Err(Error::validation(format!("cannot pick {k} of {n}")));
    }
    if let Some(i) = (0..n).find(|&i| squared_norm(bundle.feature(i)) == 0.0) {
        return Err(Error::Degenerate {
            what: "patch feature",
            index: i,
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = vec![0usize];
    let mut taken = vec![false; n];
    taken[0] = true;
    let mut min_dist = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let last = bundle.feature(*chosen.last().unwrap());
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = 1.0 - cosine_similarity(bundle.feature(i), last)?;
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if best.is_none_or(|b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k <= n leaves a candidate");
        taken[b] = true;
        chosen.push(b);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Top-`k` patches by cosine similarity to the question, ties to lower index.
pub fn similarity_select(
    bundle: &EmbeddingBundle,
    question: &QuestionRecord,
    k: usize,
) -> Result<Vec<usize>> {
    let n = bundle.n_patches();
    if k > n {
        return Err(Error::validation(format!("cannot pick {k} of {n}")));
    }
    let sims = relevance_heatmap(bundle, question)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rank_order(&sims, a, b));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of `selected` against the relevant mask.
/// Empty selections have precision 0; no relevant patches gives recall 0.
pub fn retrieval_f1(selected: &[usize], relevant_mask: &[bool]) -> Result<RetrievalScore> {
    let n = relevant_mask.len();
    let mut seen = vec![false; n];
    let mut tp = 0usize;
    for &i in selected {
        if i >= n {
            return Err(Error::validation(format!("index {i} out of range for N={n}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::validation(format!("index {i} selected twice")));
        }
        if relevant_mask[i] {
            tp += 1;
        }
    }
    let relevant = relevant_mask.iter().filter(|&&r| r).count();
    let precision = if selected.is_empty() {
        0.0
    } else {
        tp as f64 / selected.len() as f64
    };
    let recall = if relevant == 0 {
        0.0
    } else {
        tp as f64 / relevant as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(RetrievalScore {
        precision,
        recall,
        f1,
    })
}

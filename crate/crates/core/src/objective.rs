//! Hierarchical information-bottleneck loss pieces.
//!
//! Rates and scores are Bernoulli parameters; each is pulled towards a
//! pseudo-prior derived from cosine similarity to the question,
//! `p = clamp((cos + 1) / 2, eps, 1 - eps)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cosine_similarity;
use crate::segmentation::TissuePartition;
use crate::wsi_data::{EmbeddingBundle, QuestionRecord};

/// Clamp applied to every Bernoulli parameter before evaluating a KL.
pub const KL_EPS: f64 = 1e-6;

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(KL_EPS, 1.0 - KL_EPS)
}

/// `KL(Bern(pi) || Bern(p))` in nats, with both arguments clamped to
/// `[eps, 1 - eps]`.
pub fn bernoulli_kl(pi: f64, p: f64) -> Result<f64> {
    if !pi.is_finite() || !p.is_finite() {
        return Err(Error::validation(format!(
            "bernoulli_kl arguments must be finite, got ({pi}, {p})"
        )));
    }
    let pi = clamp_prob(pi);
    let p = clamp_prob(p);
    if pi == p {
        return Ok(0.0);
    }
    let kl = pi * (pi / p).ln() + (1.0 - pi) * ((1.0 - pi) / (1.0 - p)).ln();
    Ok(kl.max(0.0))
}

/// `d KL(pi || p) / d pi`. Zero where the clamp on `pi` is active.
pub fn bernoulli_kl_grad(pi: f64, p: f64) -> f64 {
    if pi <= KL_EPS || pi >= 1.0 - KL_EPS {
        return 0.0;
    }
    let p = clamp_prob(p);
    (pi / p).ln() - ((1.0 - pi) / (1.0 - p)).ln()
}

fn prior_from_cosine(c: f64) -> f64 {
    clamp_prob((c + 1.0) / 2.0)
}

/// Group pseudo-priors from prototype/question cosine; `None` for empty groups.
pub fn group_prior(partition: &TissuePartition, question: &QuestionRecord) -> Result<Vec<Option<f64>>> {
    if partition.dim() != question.dim() {
        return Err(Error::validation("partition and question dims differ"));
    }
    (0..partition.n_groups())
        .map(|j| match partition.prototype(j) {
            None => Ok(None),
            Some(g) => cosine_similarity(g, question.embedding())
                .map(|c| Some(prior_from_cosine(c)))
                .map_err(|e| match e {
                    Error::Degenerate { .. } => Error::Degenerate {
                        what: "group prototype",
                        index: j,
                    },
                    other => other,
                }),
        })
        .collect()
}

/// Patch pseudo-priors from feature/question cosine.
pub fn patch_prior(bundle: &EmbeddingBundle, question: &QuestionRecord) -> Result<Vec<f64>> {
    Ok(crate::segmentation::relevance_heatmap(bundle, question)?
        .into_iter()
        .map(prior_from_cosine)
        .collect())
}

/// Mean Bernoulli KL over nonempty groups (entries where both are present).
pub fn group_loss(rates: &[Option<f64>], priors: &[Option<f64>]) -> Result<f64> {
    if rates.len() != priors.len() {
        return Err(Error::validation("rates and priors differ in length"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (j, (r, p)) in rates.iter().zip(priors).enumerate() {
        match (r, p) {
            (Some(r), Some(p)) => {
                sum += bernoulli_kl(*r, *p)?;
                count += 1;
            }
            (None, None) => {}
            _ => {
                return Err(Error::validation(format!(
                    "group {j} has a rate/prior validity mismatch"
                )))
            }
        }
    }
    if count == 0 {
        return Err(Error::validation("group loss needs at least one nonempty group"));
    }
    Ok(sum / count as f64)
}

/// Mean Bernoulli KL over patches.
pub fn patch_loss(scores: &[f64], priors: &[f64]) -> Result<f64> {
    if scores.len() != priors.len() {
        return Err(Error::validation("scores and priors differ in length"));
    }
    if scores.is_empty() {
        return Err(Error::validation("patch loss needs at least one patch"));
    }
    let mut sum = 0.0;
    for (s, p) in scores.iter().zip(priors) {
        sum += bernoulli_kl(*s, *p)?;
    }
    Ok(sum / scores.len() as f64)
}

/// Linear warmup of the two compression weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub warmup_iters: u64,
    pub beta_g_final: f64,
    pub beta_p_final: f64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            warmup_iters: 5000,
            beta_g_final: 0.2,
            beta_p_final: 0.1,
        }
    }
}

impl BetaSchedule {
    /// Alternate targets: group weight 0.1, patch weight 0.2.
    pub fn swapped_targets() -> Self {
        Self {
            beta_g_final: 0.1,
            beta_p_final: 0.2,
            ..Self::default()
        }
    }

    /// Constant zero weights (no compression).
    pub fn disabled() -> Self {
        Self {
            warmup_iters: 0,
            beta_g_final: 0.0,
            beta_p_final: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_g_final >= 0.0 && self.beta_p_final >= 0.0)
            || !self.beta_g_final.is_finite()
            || !self.beta_p_final.is_finite()
        {
            return Err(Error::validation("beta finals must be finite and >= 0"));
        }
        Ok(())
    }
}

/// `(beta_g, beta_p)` at iteration `iter`.
pub fn beta_at(iter: u64, schedule: &BetaSchedule) -> (f64, f64) {
    if schedule.warmup_iters == 0 || iter >= schedule.warmup_iters {
        return (schedule.beta_g_final, schedule.beta_p_final);
    }
    let frac = iter as f64 / schedule.warmup_iters as f64;
    (schedule.beta_g_final * frac, schedule.beta_p_final * frac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_vqa: f64,
    pub l_group: f64,
    pub l_patch: f64,
    pub beta_g: f64,
    pub beta_p: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "iter,l_vqa,l_group,l_patch,beta_g,beta_p,total";

    /// One history row. Values print in shortest round-trip form.
    pub fn csv_row(&self, iter: u64) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            iter, self.l_vqa, self.l_group, self.l_patch, self.beta_g, self.beta_p, self.total
        )
    }

    /// Recomputes `total` from the stored components.
    pub fn recomputed_total(&self) -> f64 {
        combine(self.l_vqa, self.l_group, self.l_patch, self.beta_g, self.beta_p)
    }
}

#[inline]
fn combine(l_vqa: f64, l_group: f64, l_patch: f64, beta_g: f64, beta_p: f64) -> f64 {
    l_vqa + beta_g * l_group + beta_p * l_patch
}

pub fn total_loss(l_vqa: f64, l_group: f64, l_patch: f64, betas: (f64, f64)) -> LossBreakdown {
    let (beta_g, beta_p) = betas;
    LossBreakdown {
        l_vqa,
        l_group,
        l_patch,
        beta_g,
        beta_p,
        total: combine(l_vqa, l_group, l_patch, beta_g, beta_p),
    }
}

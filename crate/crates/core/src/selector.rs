//! Hierarchical selector: group sampler, patch selector, budgets, top-k and
//! the straight-through gate.
//!
//! Both scorers are two linear layers with a ReLU in between, applied to the
//! concatenation `[feature; question]`:
//! `sigmoid(W2 relu(W1 [x; q] + b1) + b2)`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{affine, all_finite, dot, sigmoid};
use crate::segmentation::TissuePartition;
use crate::wsi_data::{EmbeddingBundle, QuestionRecord};

pub const DEFAULT_HIDDEN: usize = 256;

/// Weights of one two-layer scorer. `w1` is `hidden x 2d`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    /// Forward pass keeping the hidden pre-activations.
    pub fn forward(&self, input: &[f64], pre: &mut [f64]) -> f64 {
        affine(&self.w1, &self.b1, input, pre);
        let mut out = self.b2;
        for (z, w) in pre.iter().zip(&self.w2) {
            if *z > 0.0 {
                out += w * z;
            }
        }
        out
    }

    /// Accumulates parameter gradients for one input given `d out`.
    pub fn backward(&self, input: &[f64], pre: &[f64], d_out: f64, grad: &mut MlpParams) {
        let cols = input.len();
        grad.b2 += d_out;
        for (h, &z) in pre.iter().enumerate() {
            if z > 0.0 {
                grad.w2[h] += d_out * z;
                let dz = d_out * self.w2[h];
                grad.b1[h] += dz;
                for (g, x) in grad.w1[h * cols..(h + 1) * cols].iter_mut().zip(input) {
                    *g += dz * x;
                }
            }
        }
    }

    fn blocks(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, std::slice::from_ref(&self.b2)]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            std::slice::from_mut(&mut self.b2),
        ]
    }
}

/// Linear proxy answer head over `[pooled; q]`. `w` is `C x 2d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(input: usize, classes: usize) -> Self {
        Self {
            w: vec![0.0; classes * input],
            b: vec![0.0; classes],
        }
    }
}

/// Names of the ten parameter blocks, in [`SelectorParams::blocks`] order.
pub const BLOCK_NAMES: [&str; 10] = [
    "group_net.w1",
    "group_net.b1",
    "group_net.w2",
    "group_net.b2",
    "patch_net.w1",
    "patch_net.b1",
    "patch_net.w2",
    "patch_net.b2",
    "proxy_head.w",
    "proxy_head.b",
];

/// Learnable weights of the group sampler, patch selector and proxy head.
///
/// The same layout doubles as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorParams {
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub seed: u64,
    pub group_net: MlpParams,
    pub patch_net: MlpParams,
    pub proxy_head: HeadParams,
}

pub type ParamGradients = SelectorParams;

impl SelectorParams {
    pub fn zeros(dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            dim,
            hidden,
            classes,
            seed: 0,
            group_net: MlpParams::zeros(2 * dim, hidden),
            patch_net: MlpParams::zeros(2 * dim, hidden),
            proxy_head: HeadParams::zeros(2 * dim, classes),
        }
    }

    /// Zeroed container with the same shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            seed: self.seed,
            ..Self::zeros(self.dim, self.hidden, self.classes)
        }
    }

    pub fn blocks(&self) -> [&[f64]; 10] {
        let [a, b, c, d] = self.group_net.blocks();
        let [e, f, g, h] = self.patch_net.blocks();
        [a, b, c, d, e, f, g, h, &self.proxy_head.w, &self.proxy_head.b]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 10] {
        let [a, b, c, d] = self.group_net.blocks_mut();
        let [e, f, g, h] = self.patch_net.blocks_mut();
        [
            a,
            b,
            c,
            d,
            e,
            f,
            g,
            h,
            &mut self.proxy_head.w,
            &mut self.proxy_head.b,
        ]
    }

    pub fn n_coordinates(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let (d2, h, c) = (2 * self.dim, self.hidden, self.classes);
        if self.dim == 0 || h == 0 || c == 0 {
            return Err(Error::validation("dim, hidden and classes must be >= 1"));
        }
        let expected = [d2 * h, h, h, 1, d2 * h, h, h, 1, c * d2, c];
        for ((block, want), name) in self.blocks().iter().zip(expected).zip(BLOCK_NAMES) {
            if block.len() != want {
                return Err(Error::validation(format!(
                    "{name} has {} entries, expected {want}",
                    block.len()
                )));
            }
            if !all_finite(block) {
                return Err(Error::validation(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Fails with a numeric error naming the first non-finite block.
    pub fn check_finite(&self) -> Result<()> {
        for (block, name) in self.blocks().iter().zip(BLOCK_NAMES) {
            if !all_finite(block) {
                return Err(Error::Numeric {
                    block: name.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let params: Self = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }
}

pub(crate) fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

fn check_dims(dim: usize, question: &QuestionRecord, params: &SelectorParams) -> Result<()> {
    if dim != question.dim() || dim != params.dim {
        return Err(Error::validation(format!(
            "dimension mismatch: features {dim}, question {}, params {}",
            question.dim(),
            params.dim
        )));
    }
    Ok(())
}

/// Sampling rate of every nonempty group; `None` for empty groups.
pub fn group_rates(
    partition: &TissuePartition,
    question: &QuestionRecord,
    params: &SelectorParams,
) -> Result<Vec<Option<f64>>> {
    check_dims(partition.dim(), question, params)?;
    let mut pre = vec![0.0; params.hidden];
    Ok((0..partition.n_groups())
        .map(|j| {
            partition.prototype(j).map(|g| {
                let input = concat(g, question.embedding());
                sigmoid(params.group_net.forward(&input, &mut pre))
            })
        })
        .collect())
}

/// Selection probability of every patch.
pub fn patch_scores(
    bundle: &EmbeddingBundle,
    question: &QuestionRecord,
    params: &SelectorParams,
) -> Result<Vec<f64>> {
    check_dims(bundle.dim(), question, params)?;
    let mut pre = vec![0.0; params.hidden];
    Ok((0..bundle.n_patches())
        .map(|i| {
            let input = concat(bundle.feature(i), question.embedding());
            sigmoid(params.patch_net.forward(&input, &mut pre))
        })
        .collect())
}

/// `k_j = ceil(r_j * N_j)`, kept inside `[1, N_j]` for nonempty groups.
///
/// The clamp only matters when a saturated sigmoid returns exactly 0.
pub fn group_budgets(rates: &[Option<f64>], group_sizes: &[usize]) -> Result<Vec<usize>> {
    if rates.len() != group_sizes.len() {
        return Err(Error::validation("rates and group sizes differ in length"));
    }
    rates
        .iter()
        .zip(group_sizes)
        .enumerate()
        .map(|(j, (r, &n))| match (r, n) {
            (_, 0) => Ok(0),
            (Some(r), n) if r.is_finite() && (0.0..=1.0).contains(r) => {
                Ok(((r * n as f64).ceil() as usize).clamp(1, n))
            }
            (Some(r), _) => Err(Error::validation(format!("rate {r} of group {j} outside [0, 1]"))),
            (None, _) => Err(Error::validation(format!("nonempty group {j} has no rate"))),
        })
        .collect()
}

/// Outcome of one hierarchical selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub rates: Vec<Option<f64>>,
    pub scores: Vec<f64>,
    pub budgets: Vec<usize>,
    pub hard_mask: Vec<bool>,
    /// Selected patch indices, ascending.
    pub selected: Vec<usize>,
}

impl SelectionResult {
    pub fn count(&self) -> usize {
        self.selected.len()
    }
}

/// Higher score first, then lower index.
#[inline]
pub(crate) fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Per-group top-`k_j` by score (ties to the lower index), then an optional
/// global cap keeping the `cap` best-scored patches of the union.
pub fn select(
    partition: &TissuePartition,
    rates: &[Option<f64>],
    scores: &[f64],
    budgets: &[usize],
    cap: Option<usize>,
) -> Result<SelectionResult> {
    let n = partition.n_patches();
    let m = partition.n_groups();
    if scores.len() != n || budgets.len() != m || rates.len() != m {
        return Err(Error::validation(format!(
            "select got {} scores, {} budgets, {} rates for N={n}, M={m}",
            scores.len(),
            budgets.len(),
            rates.len()
        )));
    }
    if !all_finite(scores) {
        return Err(Error::validation("scores must be finite"));
    }
    let mut chosen = Vec::new();
    for (j, members) in partition.group_indices().iter().enumerate() {
        let k = budgets[j];
        if k > members.len() {
            return Err(Error::validation(format!(
                "budget {k} exceeds size {} of group {j}",
                members.len()
            )));
        }
        let mut order = members.clone();
        order.sort_by(|&a, &b| rank_order(scores, a, b));
        chosen.extend_from_slice(&order[..k]);
    }
    if let Some(cap) = cap {
        if cap == 0 && !chosen.is_empty() {
            return Err(Error::validation("cap of 0 with a nonempty selection demand"));
        }
        if chosen.len() > cap {
            chosen.sort_by(|&a, &b| rank_order(scores, a, b));
            chosen.truncate(cap);
        }
    }
    chosen.sort_unstable();
    let mut hard_mask = vec![false; n];
    for &i in &chosen {
        hard_mask[i] = true;
    }
    Ok(SelectionResult {
        rates: rates.to_vec(),
        scores: scores.to_vec(),
        budgets: budgets.to_vec(),
        hard_mask,
        selected: chosen,
    })
}

/// Masked features and their mean over the selected patches.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedFeatures {
    /// `N x d`; rows of unselected patches are zero.
    pub gated: Vec<f64>,
    pub pooled: Vec<f64>,
    /// `max(1, |selected|)`.
    pub denominator: f64,
}

/// Applies the hard mask and mean-pools. An empty selection pools to zero.
pub fn gated_features(bundle: &EmbeddingBundle, result: &SelectionResult) -> GatedFeatures {
    let d = bundle.dim();
    let mut gated = vec![0.0; bundle.n_patches() * d];
    let mut pooled = vec![0.0; d];
    for &i in &result.selected {
        let x = bundle.feature(i);
        gated[i * d..(i + 1) * d].copy_from_slice(x);
        for (p, v) in pooled.iter_mut().zip(x) {
            *p += v;
        }
    }
    let denominator = result.selected.len().max(1) as f64;
    for p in pooled.iter_mut() {
        *p /= denominator;
    }
    GatedFeatures {
        gated,
        pooled,
        denominator,
    }
}

/// Straight-through gradients of the pooled vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GateGradients {
    pub d_scores: Vec<f64>,
    pub d_rates: Vec<f64>,
}

/// Pulls `d loss / d pooled` back to scores and rates.
///
/// Each selected gate behaves, in the backward pass only, like
/// `s_i * r_j(i)`; its forward value stays the hard mask. Unselected patches
/// and the pooling denominator carry no gradient.
pub fn gate_backward(
    bundle: &EmbeddingBundle,
    result: &SelectionResult,
    partition: &TissuePartition,
    d_pooled: &[f64],
) -> Result<GateGradients> {
    let denominator = result.selected.len().max(1) as f64;
    let mut d_scores = vec![0.0; bundle.n_patches()];
    let mut d_rates = vec![0.0; partition.n_groups()];
    for &i in &result.selected {
        let j = partition.labels()[i];
        let r = result.rates[j].ok_or_else(|| {
            Error::validation(format!("selected patch {i} belongs to empty group {j}"))
        })?;
        let d_gate = dot(d_pooled, bundle.feature(i)) / denominator;
        d_scores[i] = r * d_gate;
        d_rates[j] += result.scores[i] * d_gate;
    }
    Ok(GateGradients { d_scores, d_rates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::TissuePartition;
    use crate::wsi_data::GridCoord;
    use proptest::prelude::*;

    fn line_bundle(n: usize, d: usize, f: impl Fn(usize, usize) -> f64) -> EmbeddingBundle {
        EmbeddingBundle::new(
            "t",
            d,
            (0..n * d).map(|k| f(k / d, k % d)).collect(),
            (0..n as u32).map(|i| GridCoord::new(0, i)).collect(),
        )
        .unwrap()
    }

    fn one_group(n: usize) -> (EmbeddingBundle, TissuePartition) {
        let b = line_bundle(n, 2, |i, c| 1.0 + (i * 2 + c) as f64);
        let p = TissuePartition::from_labels(&b, vec![0; n], 1).unwrap();
        (b, p)
    }

    fn question(d: usize) -> QuestionRecord {
        QuestionRecord::new((0..d).map(|c| 0.5 + c as f64).collect(), 0, 3, None).unwrap()
    }

    #[test]
    fn zero_params_give_half() {
        let (b, p) = one_group(4);
        let params = SelectorParams::zeros(2, 3, 3);
        let q = question(2);
        assert_eq!(group_rates(&p, &q, &params).unwrap(), vec![Some(0.5)]);
        assert!(patch_scores(&b, &q, &params).unwrap().iter().all(|&s| s == 0.5));
    }

    #[test]
    fn saturated_biases() {
        let (b, p) = one_group(3);
        let q = question(2);
        let mut params = SelectorParams::zeros(2, 3, 3);
        params.group_net.b2 = 20.0;
        params.patch_net.b2 = -20.0;
        let r = group_rates(&p, &q, &params).unwrap()[0].unwrap();
        assert!((r - 0.999_999_997_938_846_4).abs() < 1e-15);
        let s = patch_scores(&b, &q, &params).unwrap();
        assert!(s.iter().all(|&v| (v - 2.061_153_618_190_204e-9).abs() < 1e-20));
    }

    #[test]
    fn duplicate_patches_score_identically() {
        let b = line_bundle(3, 2, |i, c| if i == 2 { c as f64 + 1.0 } else { (i + c) as f64 + 1.0 });
        let q = question(2);
        let mut params = SelectorParams::zeros(2, 2, 3);
        params.patch_net.w1 = vec![0.3, -0.2, 0.1, 0.4, -0.5, 0.25, 0.6, -0.1];
        params.patch_net.w2 = vec![1.0, -0.7];
        let s = patch_scores(&b, &q, &params).unwrap();
        assert_eq!(s[0], s[2]);
    }

    #[test]
    fn dimension_mismatch_is_validation_error() {
        let (b, p) = one_group(2);
        let params = SelectorParams::zeros(3, 2, 2);
        assert!(matches!(group_rates(&p, &question(2), &params), Err(Error::Validation(_))));
        assert!(matches!(patch_scores(&b, &question(2), &params), Err(Error::Validation(_))));
    }

    #[test]
    fn budget_examples() {
        assert_eq!(group_budgets(&[Some(0.30)], &[10]).unwrap(), vec![3]);
        assert_eq!(group_budgets(&[Some(0.25)], &[10]).unwrap(), vec![3]);
        assert_eq!(group_budgets(&[Some(0.001)], &[5]).unwrap(), vec![1]);
        assert_eq!(group_budgets(&[None, Some(1.0)], &[0, 7]).unwrap(), vec![0, 7]);
        assert_eq!(group_budgets(&[Some(0.0)], &[4]).unwrap(), vec![1]);
        assert!(group_budgets(&[None], &[3]).is_err());
        assert!(group_budgets(&[Some(1.5)], &[3]).is_err());
    }

    #[test]
    fn select_examples() {
        let (_, p) = one_group(3);
        let r = select(&p, &[Some(0.5)], &[0.9, 0.1, 0.5], &[2], None).unwrap();
        assert_eq!(r.selected, vec![0, 2]);
        assert_eq!(r.hard_mask, vec![true, false, true]);
        let r = select(&p, &[Some(0.5)], &[0.4, 0.4, 0.4], &[2], None).unwrap();
        assert_eq!(r.selected, vec![0, 1]);
    }

    #[test]
    fn cap_keeps_global_best_and_zero_cap_errors() {
        let b = line_bundle(4, 1, |i, _| i as f64 + 1.0);
        let p = TissuePartition::from_labels(&b, vec![0, 0, 1, 1], 2).unwrap();
        let rates = [Some(0.9), Some(0.9)];
        let scores = [0.2, 0.3, 0.8, 0.7];
        let r = select(&p, &rates, &scores, &[2, 2], Some(2)).unwrap();
        assert_eq!(r.selected, vec![2, 3]);
        assert!(select(&p, &rates, &scores, &[2, 2], Some(0)).is_err());
        assert!(select(&p, &rates, &scores, &[3, 1], None).is_err());
    }

    #[test]
    fn gated_single_and_empty() {
        let (b, p) = one_group(3);
        let r = select(&p, &[Some(0.1)], &[0.1, 0.9, 0.3], &[1], None).unwrap();
        let g = gated_features(&b, &r);
        assert_eq!(g.pooled, b.feature(1));
        assert_eq!(&g.gated[0..2], &[0.0, 0.0]);
        let empty = SelectionResult {
            rates: vec![Some(0.1)],
            scores: vec![0.1, 0.9, 0.3],
            budgets: vec![0],
            hard_mask: vec![false; 3],
            selected: vec![],
        };
        let g = gated_features(&b, &empty);
        assert_eq!(g.pooled, vec![0.0, 0.0]);
        assert_eq!(g.denominator, 1.0);
    }

    /// Finite differences of the soft surrogate `sum_i s_i r_j x_i / count`
    /// over the selected patches, with the count held fixed.
    #[test]
    fn gate_gradient_matches_soft_surrogate() {
        let b = line_bundle(5, 3, |i, c| ((i * 7 + c * 3) % 5) as f64 - 1.5);
        let p = TissuePartition::from_labels(&b, vec![0, 1, 0, 1, 1], 2).unwrap();
        let rates = vec![Some(0.6), Some(0.35)];
        let scores = vec![0.7, 0.2, 0.4, 0.9, 0.55];
        let res = select(&p, &rates, &scores, &[1, 2], None).unwrap();
        assert_eq!(res.selected, vec![0, 3, 4]);
        let count = res.selected.len() as f64;
        let surrogate = |s: &[f64], r: &[f64], c: usize| -> f64 {
            res.selected
                .iter()
                .map(|&i| s[i] * r[p.labels()[i]] * b.feature(i)[c])
                .sum::<f64>()
                / count
        };
        let r0: Vec<f64> = rates.iter().map(|r| r.unwrap()).collect();
        let h = 1e-6;
        for c in 0..3 {
            let mut e = vec![0.0; 3];
            e[c] = 1.0;
            let g = gate_backward(&b, &res, &p, &e).unwrap();
            for i in 0..5 {
                let mut up = scores.clone();
                let mut dn = scores.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (surrogate(&up, &r0, c) - surrogate(&dn, &r0, c)) / (2.0 * h);
                assert!((fd - g.d_scores[i]).abs() < 1e-8, "s{i} c{c}");
            }
            for j in 0..2 {
                let mut up = r0.clone();
                let mut dn = r0.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (surrogate(&scores, &up, c) - surrogate(&scores, &dn, c)) / (2.0 * h);
                assert!((fd - g.d_rates[j]).abs() < 1e-8, "r{j} c{c}");
            }
        }
    }

    #[test]
    fn params_json_round_trip_is_exact() {
        let mut p = SelectorParams::zeros(2, 2, 2);
        p.group_net.w1[3] = 0.1 + 0.2;
        p.proxy_head.b[1] = -1.0 / 3.0;
        let back = SelectorParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        let mut bad = p.clone();
        bad.patch_net.b1.pop();
        assert!(SelectorParams::from_json(&bad.to_json().unwrap()).is_err());
    }

    fn arb_selection() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, Vec<f64>, usize)> {
        (1usize..5, 1usize..40).prop_flat_map(|(m, n)| {
            (
                proptest::collection::vec(0..m, n),
                proptest::collection::vec(prop_oneof![0.0f64..1.0, Just(0.5)], n),
                proptest::collection::vec(0.0f64..1.0, m),
                Just(m),
            )
        })
    }

    fn setup(labels: &[usize], m: usize) -> TissuePartition {
        let b = line_bundle(labels.len(), 1, |i, _| i as f64 + 1.0);
        TissuePartition::from_labels(&b, labels.to_vec(), m).unwrap()
    }

    proptest! {
        #[test]
        fn budgets_within_bounds(r in 0.0f64..=1.0, n in 1usize..10_000) {
            let k = group_budgets(&[Some(r)], &[n]).unwrap()[0];
            prop_assert!(k >= 1 && k <= n);
            if r > 0.0 {
                prop_assert_eq!(k, (r * n as f64).ceil() as usize);
            }
        }

        #[test]
        fn selection_invariants((labels, scores, rates, m) in arb_selection(), cap in 0usize..50) {
            let part = setup(&labels, m);
            let rates: Vec<Option<f64>> = (0..m)
                .map(|j| if part.group(j).is_empty() { None } else { Some(rates[j]) })
                .collect();
            let budgets = group_budgets(&rates, &part.group_sizes()).unwrap();
            let demand: usize = budgets.iter().sum();
            let uncapped = select(&part, &rates, &scores, &budgets, None).unwrap();
            prop_assert_eq!(uncapped.selected.len(), demand);
            prop_assert_eq!(uncapped.hard_mask.iter().filter(|&&b| b).count(), demand);
            for j in 0..m {
                let sel = part.group(j).iter().filter(|&&i| uncapped.hard_mask[i]).count();
                prop_assert_eq!(sel, budgets[j]);
            }
            if cap == 0 {
                prop_assert!(select(&part, &rates, &scores, &budgets, Some(0)).is_err());
            } else {
                let capped = select(&part, &rates, &scores, &budgets, Some(cap)).unwrap();
                prop_assert_eq!(capped.selected.len(), demand.min(cap));
                prop_assert!(capped.selected.iter().all(|i| uncapped.hard_mask[*i]));
                let wider = select(&part, &rates, &scores, &budgets, Some(cap + 3)).unwrap();
                prop_assert!(capped.selected.iter().all(|i| wider.hard_mask[*i]));
            }
        }

        #[test]
        fn raising_unselected_score_swaps_boundary(
            scores in proptest::collection::hash_set(0u32..10_000, 3..30),
            pick in any::<prop::sample::Index>(),
            kfrac in 0.05f64..0.95,
        ) {
            let scores: Vec<f64> = scores.into_iter().map(|v| v as f64 / 10_000.0).collect();
            let n = scores.len();
            let part = setup(&vec![0; n], 1);
            let rates = [Some(kfrac)];
            let budgets = group_budgets(&rates, &[n]).unwrap();
            let base = select(&part, &rates, &scores, &budgets, None).unwrap();
            let unselected: Vec<usize> = (0..n).filter(|&i| !base.hard_mask[i]).collect();
            prop_assume!(!unselected.is_empty());
            let target = unselected[pick.index(unselected.len())];
            let boundary = *base
                .selected
                .iter()
                .min_by(|&&a, &&b| scores[a].total_cmp(&scores[b]))
                .unwrap();
            let mut raised = scores.clone();
            raised[target] = scores[boundary] + 0.5;
            let after = select(&part, &rates, &raised, &budgets, None).unwrap();
            let mut expected: Vec<usize> = base.selected.iter().copied().filter(|&i| i != boundary).collect();
            expected.push(target);
            expected.sort_unstable();
            prop_assert_eq!(after.selected, expected);
        }

        #[test]
        fn permutation_maps_selection(
            raw in proptest::collection::hash_set(0u32..100_000, 2..40),
            seed in any::<u64>(),
            m in 1usize..4,
        ) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let scores: Vec<f64> = raw.into_iter().map(|v| v as f64 / 100_000.0).collect();
            let n = scores.len();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
            let part = setup(&labels, m);
            let rates: Vec<Option<f64>> = (0..m)
                .map(|j| if part.group(j).is_empty() { None } else { Some(rng.random_range(0.0..1.0)) })
                .collect();
            let budgets = group_budgets(&rates, &part.group_sizes()).unwrap();
            let cap = Some(rng.random_range(1..=n));
            let base = select(&part, &rates, &scores, &budgets, cap).unwrap();
            // new index new_i holds old patch order[new_i]
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let labels2: Vec<usize> = order.iter().map(|&o| labels[o]).collect();
            let scores2: Vec<f64> = order.iter().map(|&o| scores[o]).collect();
            let part2 = setup(&labels2, m);
            let moved = select(&part2, &rates, &scores2, &budgets, cap).unwrap();
            let mut mapped: Vec<usize> = moved.selected.iter().map(|&i| order[i]).collect();
            mapped.sort_unstable();
            prop_assert_eq!(mapped, base.selected);
        }
    }
}

//! Prompt-driven tissue segmentation and group prototypes.

use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, dot, squared_norm};
use crate::wsi_data::{EmbeddingBundle, PromptBank, QuestionRecord};

/// Partition of a slide's patches into `M` tissue groups (0-based labels).
#[derive(Debug, Clone, PartialEq)]
pub struct TissuePartition {
    labels: Vec<usize>,
    group_indices: Vec<Vec<usize>>,
    dim: usize,
    /// `M x d`; rows of empty groups are all zeros and never handed out.
    prototypes: Vec<f64>,
}

impl TissuePartition {
    /// Builds a partition from per-patch labels, computing prototypes.
    pub fn from_labels(bundle: &EmbeddingBundle, labels: Vec<usize>, m: usize) -> Result<Self> {
        if labels.len() != bundle.n_patches() {
            return Err(Error::validation(format!(
                "{} labels for {} patches",
                labels.len(),
                bundle.n_patches()
            )));
        }
        let mut group_indices = vec![Vec::new(); m];
        for (i, &l) in labels.iter().enumerate() {
            if l >= m {
                return Err(Error::validation(format!(
                    "label {l} at patch {i} out of range for {m} groups"
                )));
            }
            group_indices[l].push(i);
        }
        let d = bundle.dim();
        let mut prototypes = vec![0.0; m * d];
        let mut column = Vec::new();
        for (j, members) in group_indices.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let row = &mut prototypes[j * d..(j + 1) * d];
            for (c, out) in row.iter_mut().enumerate() {
                // Sorted summation makes the mean independent of patch order.
                column.clear();
                column.extend(members.iter().map(|&i| bundle.feature(i)[c]));
                column.sort_by(f64::total_cmp);
                let mean = column.iter().sum::<f64>() / members.len() as f64;
                *out = mean.clamp(column[0], column[column.len() - 1]);
            }
        }
        Ok(Self {
            labels,
            group_indices,
            dim: d,
            prototypes,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_groups(&self) -> usize {
        self.group_indices.len()
    }

    pub fn n_patches(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn group_indices(&self) -> &[Vec<usize>] {
        &self.group_indices
    }

    pub fn group(&self, j: usize) -> &[usize] {
        &self.group_indices[j]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.group_indices.iter().map(Vec::len).collect()
    }

    pub fn nonempty_groups(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_groups()).filter(|&j| !self.group_indices[j].is_empty())
    }

    /// Mean feature of group `j`, or `None` for an empty group.
    pub fn prototype(&self, j: usize) -> Option<&[f64]> {
        if self.group_indices[j].is_empty() {
            None
        } else {
            Some(&self.prototypes[j * self.dim..(j + 1) * self.dim])
        }
    }
}

/// Assigns each patch to the prompt with the highest cosine similarity.
/// Exact ties go to the lowest prompt index.
pub fn segment(bundle: &EmbeddingBundle, prompts: &PromptBank) -> Result<TissuePartition> {
    if bundle.dim() != prompts.dim() {
        return Err(Error::validation(format!(
            "bundle dim {} differs from prompt dim {}",
            bundle.dim(),
            prompts.dim()
        )));
    }
    let prompt_norms: Vec<f64> = (0..prompts.len())
        .map(|j| squared_norm(prompts.embedding(j)))
        .collect();
    let mut labels = Vec::with_capacity(bundle.n_patches());
    for i in 0..bundle.n_patches() {
        let x = bundle.feature(i);
        let nx = squared_norm(x);
        if nx == 0.0 {
            return Err(Error::Degenerate {
                what: "patch feature",
                index: i,
            });
        }
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (j, &nt) in prompt_norms.iter().enumerate() {
            let sim = (dot(x, prompts.embedding(j)) / (nx * nt).sqrt()).clamp(-1.0, 1.0);
            if sim > best_sim {
                best = j;
                best_sim = sim;
            }
        }
        labels.push(best);
    }
    TissuePartition::from_labels(bundle, labels, prompts.len())
}

/// Cosine similarity of every patch to the question.
pub fn relevance_heatmap(bundle: &EmbeddingBundle, question: &QuestionRecord) -> Result<Vec<f64>> {
    if bundle.dim() != question.dim() {
        return Err(Error::validation(format!(
            "bundle dim {} differs from question dim {}",
            bundle.dim(),
            question.dim()
        )));
    }
    (0..bundle.n_patches())
        .map(|i| {
            cosine_similarity(bundle.feature(i), question.embedding()).map_err(|e| match e {
                Error::Degenerate { .. } => Error::Degenerate {
                    what: "patch feature",
                    index: i,
                },
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wsi_data::GridCoord;
    use proptest::prelude::*;

    fn bundle(rows: &[&[f64]]) -> EmbeddingBundle {
        let d = rows[0].len();
        EmbeddingBundle::new(
            "t",
            d,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
            (0..rows.len() as u32).map(|i| GridCoord::new(0, i)).collect(),
        )
        .unwrap()
    }

    fn axes2() -> PromptBank {
        PromptBank::new(vec!["a".into(), "b".into()], 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn exact_match_and_tie_break() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let b = bundle(&[&[1.0, 0.0], &[h, h], &[0.0, 3.0]]);
        let p = segment(&b, &axes2()).unwrap();
        assert_eq!(p.labels(), &[0, 0, 1]);
        assert_eq!(p.group_indices(), &[vec![0, 1], vec![2]]);
        assert_eq!(p.prototype(1).unwrap(), &[0.0, 3.0]);
    }

    #[test]
    fn empty_group_has_no_prototype() {
        let b = bundle(&[&[1.0, 0.1], &[2.0, 0.0]]);
        let p = segment(&b, &axes2()).unwrap();
        assert_eq!(p.group_sizes(), vec![2, 0]);
        assert!(p.prototype(1).is_none());
        assert_eq!(p.nonempty_groups().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn zero_patch_is_degenerate_with_index() {
        let b = bundle(&[&[1.0, 0.0], &[0.0, 0.0]]);
        match segment(&b, &axes2()) {
            Err(Error::Degenerate { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        let q = QuestionRecord::new(vec![1.0, 0.0], 0, 1, None).unwrap();
        match relevance_heatmap(&b, &q) {
            Err(Error::Degenerate { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch() {
        let b = bundle(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(segment(&b, &axes2()), Err(Error::Validation(_))));
    }

    #[test]
    fn heatmap_self_and_orthogonal() {
        let b = bundle(&[&[0.3, 0.4], &[0.0, 2.0]]);
        let q = QuestionRecord::new(vec![0.3, 0.4], 0, 1, None).unwrap();
        let h = relevance_heatmap(&b, &q).unwrap();
        assert_eq!(h[0], 1.0);
        let q = QuestionRecord::new(vec![1.0, 0.0], 0, 1, None).unwrap();
        let b = bundle(&[&[0.0, 1.0], &[0.0, -5.0]]);
        assert_eq!(relevance_heatmap(&b, &q).unwrap(), vec![0.0, 0.0]);
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        (1usize..4, 2usize..5, 1usize..30).prop_flat_map(|(m, d, n)| {
            let row = proptest::collection::vec(
                prop_oneof![-2.0..2.0f64, Just(0.5f64)],
                d,
            )
            .prop_filter("nonzero", |r| r.iter().any(|v| *v != 0.0));
            (
                proptest::collection::vec(row.clone(), n),
                proptest::collection::vec(row, m),
            )
        })
    }

    fn build(rows: &[Vec<f64>], prompts: &[Vec<f64>]) -> (EmbeddingBundle, PromptBank) {
        let d = rows[0].len();
        let b = EmbeddingBundle::new(
            "p",
            d,
            rows.concat(),
            (0..rows.len() as u32).map(|i| GridCoord::new(i, 0)).collect(),
        )
        .unwrap();
        let p = PromptBank::new(
            (0..prompts.len()).map(|j| format!("t{j}")).collect(),
            d,
            prompts.concat(),
        )
        .unwrap();
        (b, p)
    }

    proptest! {
        #[test]
        fn partition_is_complete_and_sorted((rows, prompts) in arb_instance()) {
            let (b, p) = build(&rows, &prompts);
            let part = segment(&b, &p).unwrap();
            let total: usize = part.group_sizes().iter().sum();
            prop_assert_eq!(total, rows.len());
            for (j, g) in part.group_indices().iter().enumerate() {
                prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
                for &i in g {
                    prop_assert_eq!(part.labels()[i], j);
                }
            }
        }

        #[test]
        fn positive_scaling_keeps_labels((rows, prompts) in arb_instance(), alpha in 0.01f64..100.0) {
            let (b, p) = build(&rows, &prompts);
            let a = segment(&b, &p).unwrap();
            let s = segment(&b.scaled(alpha).unwrap(), &p).unwrap();
            prop_assert_eq!(a.labels(), s.labels());
        }

        #[test]
        fn permutation_equivariance((rows, prompts) in arb_instance(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let (b, p) = build(&rows, &prompts);
            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = segment(&b, &p).unwrap();
            let pb = segment(&b.permuted(&order).unwrap(), &p).unwrap();
            for (new, &old) in order.iter().enumerate() {
                prop_assert_eq!(pb.labels()[new], a.labels()[old]);
            }
            prop_assert_eq!(a.group_sizes(), pb.group_sizes());
            for j in 0..p.len() {
                prop_assert_eq!(a.prototype(j), pb.prototype(j));
            }
        }

        #[test]
        fn prototypes_stay_in_coordinate_hull((rows, prompts) in arb_instance()) {
            let (b, p) = build(&rows, &prompts);
            let part = segment(&b, &p).unwrap();
            for j in part.nonempty_groups() {
                let g = part.prototype(j).unwrap();
                for c in 0..b.dim() {
                    let vals = part.group(j).iter().map(|&i| b.feature(i)[c]);
                    let lo = vals.clone().fold(f64::INFINITY, f64::min);
                    let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(lo <= g[c] && g[c] <= hi);
                }
            }
        }

        #[test]
        fn deterministic((rows, prompts) in arb_instance()) {
            let (b, p) = build(&rows, &prompts);
            prop_assert_eq!(segment(&b, &p).unwrap(), segment(&b, &p).unwrap());
        }
    }
}

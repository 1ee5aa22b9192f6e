//! Planted-signal synthetic slides.
//!
//! Tissue prototypes and class directions are signed coordinate axes, so the
//! noiseless construction is exactly orthonormal in floating point.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EmbeddingBundle, GridCoord, GroundTruth, PromptBank, QuestionRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub m_tissues: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub noise_sigma: f64,
    pub blob_count: usize,
    pub class_signal_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            grid_rows: 16,
            grid_cols: 16,
            m_tissues: 4,
            dim: 512,
            n_classes: 4,
            noise_sigma: 0.3,
            blob_count: 2,
            class_signal_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::validation("grid must have at least one cell"));
        }
        if self.m_tissues == 0 || self.n_classes == 0 {
            return Err(Error::validation("need at least one tissue and one class"));
        }
        if self.dim < self.m_tissues + self.n_classes {
            return Err(Error::validation(format!(
                "dim {} too small for {} tissue and {} class directions",
                self.dim, self.m_tissues, self.n_classes
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::validation("noise_sigma must be finite and >= 0"));
        }
        if !(self.class_signal_scale.is_finite() && self.class_signal_scale > 0.0) {
            return Err(Error::validation("class_signal_scale must be finite and > 0"));
        }
        Ok(())
    }

    /// Same spec with another seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub bundle: EmbeddingBundle,
    pub prompts: PromptBank,
    pub question: QuestionRecord,
    pub truth: GroundTruth,
}

/// Signed unit axis: `sign * e_axis`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Axis {
    index: usize,
    sign: f64,
}

/// Tissue prototypes and class directions of one embedding space.
///
/// `generate_synthetic` draws a fresh basis from each slide's seed. A suite
/// of slides that a model must generalise across shares one basis through
/// [`generate_with_basis`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBasis {
    dim: usize,
    tissues: Vec<Axis>,
    classes: Vec<Axis>,
}

impl SyntheticBasis {
    pub fn draw(dim: usize, m_tissues: usize, n_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::draw_from(dim, m_tissues, n_classes, &mut rng)
    }

    fn draw_from(dim: usize, m: usize, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dim < m + c {
            return Err(Error::validation(format!(
                "dim {dim} too small for {m} tissue and {c} class directions"
            )));
        }
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        let mut axes: Vec<Axis> = perm[..m + c]
            .iter()
            .map(|&index| Axis {
                index,
                sign: if rng.random::<bool>() { 1.0 } else { -1.0 },
            })
            .collect();
        let classes = axes.split_off(m);
        Ok(Self {
            dim,
            tissues: axes,
            classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tissue_prototype(&self, j: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.tissues[j].add_to(&mut v, 1.0);
        v
    }

    pub fn class_direction(&self, c: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.classes[c].add_to(&mut v, 1.0);
        v
    }
}

impl Axis {
    fn add_to(self, v: &mut [f64], scale: f64) {
        v[self.index] += self.sign * scale;
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Builds one synthetic slide. Pure in `spec` (seed included).
///
/// Draw order from the seeded generator: axis permutation and signs, blob
/// rectangles (tissue-major, blob-minor; later stamps overwrite earlier ones),
/// per-patch noise in row-major order, target tissue (uniform over tissues
/// present on the grid), answer label, question noise. Feature values are
/// rounded through f32 so that the HSB1 round trip is exact.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSlide> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let basis = SyntheticBasis::draw_from(spec.dim, spec.m_tissues, spec.n_classes, &mut rng)?;
    build(spec, &basis, &mut rng)
}

/// Like [`generate_synthetic`] but in a given basis; the seed drives only the
/// layout, noise, target and answer draws.
pub fn generate_with_basis(spec: &SyntheticSpec, basis: &SyntheticBasis) -> Result<SyntheticSlide> {
    spec.validate()?;
    if basis.dim != spec.dim
        || basis.tissues.len() != spec.m_tissues
        || basis.classes.len() != spec.n_classes
    {
        return Err(Error::validation("basis shape differs from spec"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    build(spec, basis, &mut rng)
}

fn build(spec: &SyntheticSpec, basis: &SyntheticBasis, rng: &mut ChaCha8Rng) -> Result<SyntheticSlide> {
    let d = spec.dim;
    let m = spec.m_tissues;
    let tissue_axes = &basis.tissues;
    let class_axes = &basis.classes;

    let rows = spec.grid_rows;
    let cols = spec.grid_cols;
    let mut layout = vec![0usize; rows * cols];
    let max_h = (rows / 4).max(1);
    let max_w = (cols / 4).max(1);
    for tissue in 0..m {
        for _ in 0..spec.blob_count {
            let h = rng.random_range(1..=max_h);
            let w = rng.random_range(1..=max_w);
            let r0 = rng.random_range(0..=rows - h);
            let c0 = rng.random_range(0..=cols - w);
            for r in r0..r0 + h {
                layout[r * cols + c0..r * cols + c0 + w].fill(tissue);
            }
        }
    }

    let n = rows * cols;
    let mut features = vec![0.0; n * d];
    for (i, row) in features.chunks_mut(d).enumerate() {
        tissue_axes[layout[i]].add_to(row, 1.0);
        if spec.noise_sigma > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = rng.sample::<f64, _>(StandardNormal);
                *v += spec.noise_sigma * z;
            }
        }
    }

    let mut present = vec![false; m];
    for &t in &layout {
        present[t] = true;
    }
    let present: Vec<usize> = (0..m).filter(|&t| present[t]).collect();
    let target_tissue = present[rng.random_range(0..present.len())];
    let answer_label = rng.random_range(0..spec.n_classes);
    for (i, row) in features.chunks_mut(d).enumerate() {
        if layout[i] == target_tissue {
            class_axes[answer_label].add_to(row, spec.class_signal_scale);
        }
    }
    for v in features.iter_mut() {
        *v = round_f32(*v);
    }

    let coords = (0..n)
        .map(|i| GridCoord::new((i / cols) as u32, (i % cols) as u32))
        .collect();
    let bundle = EmbeddingBundle::new(format!("synthetic-{}", spec.seed), d, features, coords)?;

    let mut prompt_rows = vec![0.0; m * d];
    for (j, row) in prompt_rows.chunks_mut(d).enumerate() {
        tissue_axes[j].add_to(row, 1.0);
    }
    let names = (0..m).map(|j| format!("tissue_{j}")).collect();
    let prompts = PromptBank::new(names, d, prompt_rows)?;

    let mut q = vec![0.0; d];
    tissue_axes[target_tissue].add_to(&mut q, 1.0);
    if spec.noise_sigma > 0.0 {
        for v in q.iter_mut() {
            let z: f64 = rng.sample::<f64, _>(StandardNormal);
            *v += 0.5 * spec.noise_sigma * z;
        }
    }
    for v in q.iter_mut() {
        *v = round_f32(*v);
    }
    let question = QuestionRecord::new(
        q,
        answer_label,
        spec.n_classes,
        Some(format!("which class is planted in tissue_{target_tissue}?")),
    )?;

    let relevant_mask = layout.iter().map(|&t| t == target_tissue).collect();
    Ok(SyntheticSlide {
        bundle,
        prompts,
        question,
        truth: GroundTruth {
            true_labels: layout,
            relevant_mask,
            target_tissue,
            answer_label,
        },
    })
}

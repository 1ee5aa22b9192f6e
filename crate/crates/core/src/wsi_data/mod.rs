//! Slide data model: patch bundles, prompt banks, questions and ground truth.

mod hsb;
mod synthetic;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, squared_norm};

pub use hsb::{
    decode_bundle, encode_bundle, load_bundle, load_prompts, load_question, save_bundle, save_prompts, save_question,
    KIND_BUNDLE, KIND_PROMPTS, KIND_QUESTION, MAGIC, VERSION,
};
pub use synthetic::{
    generate_synthetic, generate_with_basis, SyntheticBasis, SyntheticSlide, SyntheticSpec,
};

/// Integer grid position of a patch on the slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCoord {
    pub row: u32,
    pub col: u32,
}

impl GridCoord {
    pub fn new(row: u32, col: u32) -> Self {
        Self { row, col }
    }
}

/// One slide's patch features (`N x d`, row-major) and grid coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    slide_id: String,
    dim: usize,
    features: Vec<f64>,
    coords: Vec<GridCoord>,
}

impl EmbeddingBundle {
    pub fn new(
        slide_id: impl Into<String>,
        dim: usize,
        features: Vec<f64>,
        coords: Vec<GridCoord>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("bundle dimension must be at least 1"));
        }
        if features.len() != coords.len() * dim {
            return Err(Error::validation(format!(
                "bundle has {} coordinates but {} feature values (dim {})",
                coords.len(),
                features.len(),
                dim
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite feature value in patch {}",
                pos / dim
            )));
        }
        let mut seen = HashSet::with_capacity(coords.len());
        for (i, c) in coords.iter().enumerate() {
            if !seen.insert(*c) {
                return Err(Error::validation(format!(
                    "duplicate coordinate ({}, {}) at patch {}",
                    c.row, c.col, i
                )));
            }
        }
        Ok(Self {
            slide_id: slide_id.into(),
            dim,
            features,
            coords,
        })
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_patches(&self) -> usize {
        self.coords.len()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[GridCoord] {
        &self.coords
    }

    /// Returns a copy with rows (and coordinates) reordered so that new row
    /// `i` is old row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n_patches() {
            return Err(Error::validation("permutation length differs from N"));
        }
        let mut features = Vec::with_capacity(self.features.len());
        let mut coords = Vec::with_capacity(self.coords.len());
        for &o in order {
            features.extend_from_slice(self.feature(o));
            coords.push(self.coords[o]);
        }
        Self::new(self.slide_id.clone(), self.dim, features, coords)
    }

    /// Returns a copy with every feature multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.slide_id.clone(),
            self.dim,
            self.features.iter().map(|v| v * factor).collect(),
            self.coords.clone(),
        )
    }
}

/// `M` named tissue prompts embedded in the patch feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    names: Vec<String>,
    dim: usize,
    embeddings: Vec<f64>,
}

impl PromptBank {
    pub fn new(names: Vec<String>, dim: usize, embeddings: Vec<f64>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::validation("prompt bank needs at least one prompt"));
        }
        if dim == 0 {
            return Err(Error::validation("prompt dimension must be at least 1"));
        }
        if embeddings.len() != names.len() * dim {
            return Err(Error::validation(format!(
                "{} prompt names but {} embedding values (dim {})",
                names.len(),
                embeddings.len(),
                dim
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::validation(format!("duplicate prompt name {n:?}")));
            }
        }
        for (j, row) in embeddings.chunks(dim).enumerate() {
            if !all_finite(row) {
                return Err(Error::validation(format!("prompt {j} is not finite")));
            }
            if squared_norm(row) == 0.0 {
                return Err(Error::Degenerate {
                    what: "prompt embedding",
                    index: j,
                });
            }
        }
        Ok(Self {
            names,
            dim,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn embedding(&self, j: usize) -> &[f64] {
        &self.embeddings[j * self.dim..(j + 1) * self.dim]
    }
}

/// A question embedding with a single-token answer label out of `n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionRecord {
    embedding: Vec<f64>,
    answer_label: usize,
    n_classes: usize,
    text: Option<String>,
}

impl QuestionRecord {
    pub fn new(
        embedding: Vec<f64>,
        answer_label: usize,
        n_classes: usize,
        text: Option<String>,
    ) -> Result<Self> {
        if embedding.is_empty() {
            return Err(Error::validation("question embedding is empty"));
        }
        if !all_finite(&embedding) {
            return Err(Error::validation("question embedding is not finite"));
        }
        if squared_norm(&embedding) == 0.0 {
            return Err(Error::Degenerate {
                what: "question embedding",
                index: 0,
            });
        }
        if answer_label >= n_classes {
            return Err(Error::validation(format!(
                "answer label {answer_label} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            embedding,
            answer_label,
            n_classes,
            text,
        })
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn dim(&self) -> usize {
        self.embedding.len()
    }

    pub fn answer_label(&self) -> usize {
        self.answer_label
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn text(&self) -> Option<&str> {
        self.text.as_deref()
    }

    /// Same question with a different embedding.
    pub fn with_embedding(&self, embedding: Vec<f64>) -> Result<Self> {
        Self::new(embedding, self.answer_label, self.n_classes, self.text.clone())
    }
}

/// Planted truth for a synthetic slide. Tissue indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_labels: Vec<usize>,
    pub relevant_mask: Vec<bool>,
    pub target_tissue: usize,
    pub answer_label: usize,
}

impl GroundTruth {
    pub fn relevant_count(&self) -> usize {
        self.relevant_mask.iter().filter(|&&m| m).count()
    }
}

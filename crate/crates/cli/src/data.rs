//! On-disk slide directories.
//!
//! A slide directory holds `bundle.hsb`, `prompts.hsb`, `question.hsb` and,
//! for synthetic data, `truth.json`. A dataset directory is either a single
//! slide directory or a directory of slide directories (read in name order).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use histoselect::wsi_data::{
    load_bundle, load_prompts, load_question, EmbeddingBundle, GroundTruth, PromptBank,
    QuestionRecord,
};

pub const BUNDLE_FILE: &str = "bundle.hsb";
pub const PROMPTS_FILE: &str = "prompts.hsb";
pub const QUESTION_FILE: &str = "question.hsb";
pub const TRUTH_FILE: &str = "truth.json";

pub struct SlideDir {
    pub name: String,
    pub bundle: EmbeddingBundle,
    pub prompts: Option<PromptBank>,
    pub question: QuestionRecord,
    pub truth: Option<GroundTruth>,
}

fn load_slide(dir: &Path) -> Result<SlideDir> {
    let bundle = load_bundle(dir.join(BUNDLE_FILE))?;
    let question = load_question(dir.join(QUESTION_FILE))?;
    let prompts_path = dir.join(PROMPTS_FILE);
    let prompts = if prompts_path.exists() {
        Some(load_prompts(&prompts_path)?)
    } else {
        None
    };
    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() {
        let text = fs::read_to_string(&truth_path)
            .with_context(|| format!("reading {}", truth_path.display()))?;
        let truth: GroundTruth = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", truth_path.display()))?;
        if truth.relevant_mask.len() != bundle.n_patches() {
            bail!(
                "{}: relevant_mask has {} entries for {} patches",
                truth_path.display(),
                truth.relevant_mask.len(),
                bundle.n_patches()
            );
        }
        Some(truth)
    } else {
        None
    };
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SlideDir {
        name,
        bundle,
        prompts,
        question,
        truth,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SlideDir>> {
    if dir.join(BUNDLE_FILE).exists() {
        return Ok(vec![load_slide(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading dataset directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(BUNDLE_FILE).exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        bail!("{} holds no slide directories", dir.display());
    }
    subdirs.iter().map(|p| load_slide(p)).collect()
}

pub fn require_prompts(slide: &SlideDir) -> Result<&PromptBank> {
    slide
        .prompts
        .as_ref()
        .with_context(|| format!("slide {} has no {PROMPTS_FILE}", slide.name))
}

pub fn require_truth(slide: &SlideDir) -> Result<&GroundTruth> {
    slide
        .truth
        .as_ref()
        .with_context(|| format!("slide {} has no {TRUTH_FILE}", slide.name))
}

pub fn write(path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn out_dir(path: &Path) -> Result<&Path> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(path)
}

//! Writers for CSV tables, PGM/PPM images over the patch grid and JSON
//! selection summaries. Images are uncompressed binary netpbm (P5/P6);
//! grid cells without a patch are black.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::TissuePartition;
use crate::selector::SelectionResult;
use crate::wsi_data::{EmbeddingBundle, GridCoord};

/// Colours for tissue labels `0..13`; label `l` uses entry `l % 13`.
pub const PALETTE: [[u8; 3]; 13] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
];

/// `(rows, cols)` of the smallest grid holding every coordinate.
pub fn grid_shape(coords: &[GridCoord]) -> (usize, usize) {
    coords.iter().fold((0, 0), |(r, c), g| {
        (r.max(g.row as usize + 1), c.max(g.col as usize + 1))
    })
}

fn netpbm(magic: &str, coords: &[GridCoord], channels: usize, pixel: impl Fn(usize) -> Vec<u8>) -> Vec<u8> {
    let (rows, cols) = grid_shape(coords);
    let mut out = format!("{magic}\n{cols} {rows}\n255\n").into_bytes();
    let start = out.len();
    out.resize(start + rows * cols * channels, 0);
    for (i, c) in coords.iter().enumerate() {
        let at = start + (c.row as usize * cols + c.col as usize) * channels;
        out[at..at + channels].copy_from_slice(&pixel(i));
    }
    out
}

/// Maps a value in `[-1, 1]` to `round(255 (v + 1) / 2)`.
pub fn heat_level(v: f64) -> u8 {
    (255.0 * (v.clamp(-1.0, 1.0) + 1.0) / 2.0).round() as u8
}

pub fn heatmap_pgm(coords: &[GridCoord], values: &[f64]) -> Result<Vec<u8>> {
    if coords.len() != values.len() {
        return Err(Error::validation("heatmap length differs from patch count"));
    }
    Ok(netpbm("P5", coords, 1, |i| vec![heat_level(values[i])]))
}

pub fn mask_pgm(coords: &[GridCoord], mask: &[bool]) -> Result<Vec<u8>> {
    if coords.len() != mask.len() {
        return Err(Error::validation("mask length differs from patch count"));
    }
    Ok(netpbm("P5", coords, 1, |i| vec![if mask[i] { 255 } else { 0 }]))
}

pub fn labels_ppm(coords: &[GridCoord], labels: &[usize]) -> Result<Vec<u8>> {
    if coords.len() != labels.len() {
        return Err(Error::validation("label count differs from patch count"));
    }
    Ok(netpbm("P6", coords, 3, |i| PALETTE[labels[i] % PALETTE.len()].to_vec()))
}

/// `patch_index,row,col,label` with a header row.
pub fn labels_csv(coords: &[GridCoord], labels: &[usize]) -> Result<String> {
    if coords.len() != labels.len() {
        return Err(Error::validation("label count differs from patch count"));
    }
    let mut out = String::from("patch_index,row,col,label\n");
    for (i, (c, l)) in coords.iter().zip(labels).enumerate() {
        out.push_str(&format!("{i},{},{},{l}\n", c.row, c.col));
    }
    Ok(out)
}

pub fn partition_csv(bundle: &EmbeddingBundle, partition: &TissuePartition) -> Result<String> {
    labels_csv(bundle.coords(), partition.labels())
}

/// JSON view of a selection: rates (null for empty groups), budgets and the
/// selected indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub n_patches: usize,
    pub cap: Option<usize>,
    pub rates: Vec<Option<f64>>,
    pub budgets: Vec<usize>,
    pub selected: Vec<usize>,
}

impl SelectionSummary {
    pub fn new(result: &SelectionResult, cap: Option<usize>) -> Self {
        Self {
            n_patches: result.scores.len(),
            cap,
            rates: result.rates.clone(),
            budgets: result.budgets.clone(),
            selected: result.selected.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

//! Box-guided refinement of the segmentation probability map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementMode {
    None,
    RoiCrop,
    SoftNls,
    Asnls,
}

impl RefinementMode {
    pub const ALL: [RefinementMode; 4] = [
        RefinementMode::None,
        RefinementMode::RoiCrop,
        RefinementMode::SoftNls,
        RefinementMode::Asnls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RefinementMode::None => "none",
            RefinementMode::RoiCrop => "roi_crop",
            RefinementMode::SoftNls => "soft_nls",
            RefinementMode::Asnls => "asnls",
        }
    }
}

impl std::str::FromStr for RefinementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RefinementMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown refinement mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub mode: RefinementMode,
    /// Fixed enhancement factor for `SoftNls`.
    pub alpha_up: f64,
    /// Fixed decay factor for `SoftNls`.
    pub alpha_dec: f64,
    pub lambda_au: f64,
    pub lambda_ad: f64,
    pub lambda_bu: f64,
    pub lambda_bd: f64,
    pub bin_threshold: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            mode: RefinementMode::Asnls,
            alpha_up: 1.5,
            alpha_dec: 0.5,
            lambda_au: -1.0,
            lambda_ad: 1.0,
            lambda_bu: 2.0,
            lambda_bd: 0.0,
            bin_threshold: 0.35,
        }
    }
}

impl RefinementConfig {
    pub fn with_mode(mode: RefinementMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bin_threshold > 0.0 && self.bin_threshold < 1.0) {
            return Err(Error::Config(format!(
                "binarization threshold must be in (0, 1), got {}",
                self.bin_threshold
            )));
        }
        if self.mode == RefinementMode::SoftNls && !(self.alpha_up > 1.0 && self.alpha_dec > 0.0 && self.alpha_dec < 1.0) {
            return Err(Error::Config(format!(
                "soft_nls needs alpha_up > 1 and 0 < alpha_dec < 1, got ({}, {})",
                self.alpha_up, self.alpha_dec
            )));
        }
        Ok(())
    }
}

/// Confidence-dependent `(alpha_up, alpha_dec)`.
pub fn asnls_factors(p: f64, cfg: &RefinementConfig) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!("confidence {p} outside [0, 1]")));
    }
    Ok((cfg.lambda_au * p + cfg.lambda_bu, cfg.lambda_ad * p + cfg.lambda_bd))
}

/// Result of scaling a probability map; `empty_box` flags a zero-area box.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub values: Vec<f64>,
    pub empty_box: bool,
}

/// Whether mask cell `(row, col)` has its center inside the corner box.
pub fn cell_in_box(row: usize, col: usize, bbox: [f64; 4], stride: usize) -> bool {
    let s = stride as f64;
    let (x, y) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
    x >= bbox[0] && x <= bbox[2] && y >= bbox[1] && y <= bbox[3]
}

/// Scales cells whose center lies inside `bbox` (pixel corners) by `alpha_up`
/// and every other cell by `alpha_dec`. Values are not clamped.
pub fn apply_nls(prob: &[f64], grid: (usize, usize), bbox: [f64; 4], factors: (f64, f64), stride: usize) -> Refined {
    assert_eq!(prob.len(), grid.0 * grid.1, "probability map does not match grid");
    let (up, dec) = factors;
    let empty_box = !(bbox[2] > bbox[0] && bbox[3] > bbox[1]);
    let values = prob
        .iter()
        .enumerate()
        .map(|(i, &o)| {
            let inside = !empty_box && cell_in_box(i / grid.1, i % grid.1, bbox, stride);
            if inside {
                up * o
            } else {
                dec * o
            }
        })
        .collect();
    Refined { values, empty_box }
}

/// Hard crop: keep probabilities inside the box, zero elsewhere.
pub fn roi_crop(prob: &[f64], grid: (usize, usize), bbox: [f64; 4], stride: usize) -> Refined {
    apply_nls(prob, grid, bbox, (1.0, 0.0), stride)
}

/// `true` where `refined > threshold`.
pub fn binarize(refined: &[f64], threshold: f64) -> Vec<bool> {
    refined.iter().map(|&x| x > threshold).collect()
}

/// Runs the configured refinement and binarization.
pub fn refine(
    prob: &[f64],
    grid: (usize, usize),
    bbox: [f64; 4],
    confidence: f64,
    stride: usize,
    cfg: &RefinementConfig,
) -> Result<(Refined, Vec<bool>)> {
    let refined = match cfg.mode {
        RefinementMode::None => Refined {
            values: prob.to_vec(),
            empty_box: false,
        },
        RefinementMode::RoiCrop => roi_crop(prob, grid, bbox, stride),
        RefinementMode::SoftNls => apply_nls(prob, grid, bbox, (cfg.alpha_up, cfg.alpha_dec), stride),
        RefinementMode::Asnls => {
            let f = asnls_factors(confidence.clamp(0.0, 1.0), cfg)?;
            apply_nls(prob, grid, bbox, f, stride)
        }
    };
    let mask = binarize(&refined.values, cfg.bin_threshold);
    Ok((refined, mask))
}

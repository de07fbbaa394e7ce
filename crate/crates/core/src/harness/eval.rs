use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::heads;
use crate::metrics::{box_iou, mask_iou, MetricsReport, SampleOutcomes};
use crate::model::Model;
use crate::postprocess::{refine, RefinementConfig, RefinementMode};
use crate::synth::{Dataset, Sample};
use crate::tensor::Graph;

/// Model output for one expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Top-1 box `(x_min, y_min, x_max, y_max)` clipped to the image.
    pub bbox: Option<[f64; 4]>,
    pub confidence: Option<f64>,
    /// Segmentation probabilities on the `mask_grid`.
    pub prob_mask: Option<Vec<f64>>,
    pub refined_mask: Option<Vec<bool>>,
    pub mask_grid: (usize, usize),
    pub mask_stride: usize,
    /// Spatial attention per branch (`"rec"`, `"res"`) and word attention (`"words"`).
    pub attention: BTreeMap<String, Vec<f64>>,
}

fn clip_box(b: [f64; 4], width: f64, height: f64) -> [f64; 4] {
    let x0 = b[0].clamp(0.0, width);
    let y0 = b[1].clamp(0.0, height);
    [x0, y0, b[2].clamp(x0, width), b[3].clamp(y0, height)]
}

/// Runs the model on one sample and applies the configured refinement.
/// Without a comprehension branch there is no box to guide refinement, so the
/// raw map is binarized.
pub fn predict(model: &Model, sample: &Sample, post: &RefinementConfig) -> Result<Prediction> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let out = model.forward(&mut g, &bound, &sample.image, &sample.tokens)?;
    let (h, w) = (sample.height() as f64, sample.width() as f64);

    let mut attention = BTreeMap::new();
    attention.insert("words".to_string(), g.value(out.text.attn_weights).to_vec());
    if let Some(b) = out.branch_c.filter(|_| model.cfg.structure.has_rec()) {
        attention.insert("rec".to_string(), g.value(b.spatial_attn).to_vec());
    }
    if let Some(b) = out.branch_s.filter(|_| model.cfg.structure.has_res()) {
        attention.insert("res".to_string(), g.value(b.spatial_attn).to_vec());
    }

    let top = out.rec.map(|r| {
        let raw = g.value(r.raw);
        heads::decode_boxes(raw, &model.cfg.anchors, model.rec_stride(), out.coarse_grid)[0]
    });
    let bbox = top.map(|d| clip_box(d.bbox.to_corners(), w, h));
    let confidence = top.map(|d| d.confidence);

    let (prob_mask, refined_mask) = match out.res {
        Some(r) => {
            let prob = g.value(r.prob).to_vec();
            let cfg = match bbox {
                Some(_) => *post,
                None => RefinementConfig {
                    mode: RefinementMode::None,
                    ..*post
                },
            };
            let (_, mask) = refine(
                &prob,
                out.fine_grid,
                bbox.unwrap_or([0.0; 4]),
                confidence.unwrap_or(1.0),
                model.res_stride(),
                &cfg,
            )?;
            (Some(prob), Some(mask))
        }
        None => (None, None),
    };
    Ok(Prediction {
        bbox,
        confidence,
        prob_mask,
        refined_mask,
        mask_grid: out.fine_grid,
        mask_stride: model.res_stride(),
        attention,
    })
}

/// Nearest-neighbor upsampling of a grid mask to full resolution.
pub fn upsample_mask(mask: &[bool], grid: (usize, usize), stride: usize) -> Vec<bool> {
    let (h, w) = (grid.0 * stride, grid.1 * stride);
    (0..h * w)
        .map(|i| mask[(i / w / stride) * grid.1 + (i % w) / stride])
        .collect()
}

/// Box IoU and mask IoU on the segmentation grid against the downsampled
/// ground truth.
pub fn score(pred: &Prediction, sample: &Sample) -> Result<(Option<f64>, Option<f64>)> {
    let box_score = pred.bbox.map(|b| box_iou(b, sample.gt_box)).transpose()?;
    let mask_score = pred
        .refined_mask
        .as_ref()
        .map(|m| mask_iou(m, &sample.mask_coarse.bits))
        .transpose()?;
    Ok((box_score, mask_score))
}

pub fn evaluate_model(model: &Model, samples: &[Sample], split: &str, post: &RefinementConfig) -> Result<MetricsReport> {
    post.validate()?;
    if samples.is_empty() {
        return Err(Error::Config(format!("split `{split}` is empty")));
    }
    let mut outcomes = SampleOutcomes::default();
    for s in samples {
        let pred = predict(model, s, post)?;
        let (b, m) = score(&pred, s)?;
        outcomes.box_ious.extend(b);
        outcomes.mask_ious.extend(m);
    }
    outcomes.report(split)
}

/// Evaluates a checkpoint on a dataset split (`"train"` or `"val"`).
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, split: &str, post: &RefinementConfig) -> Result<MetricsReport> {
    if ckpt.config_hash != ckpt.config.training_hash() {
        log::warn!("checkpoint config hash does not match its stored config");
    }
    if ckpt.dataset_hash.as_deref() != Some(data.manifest.config_hash.as_str()) {
        log::warn!("evaluating on a dataset that differs from the one the checkpoint was trained on");
    }
    let samples = match split {
        "train" => &data.train,
        "val" => &data.val,
        other => return Err(Error::Config(format!("unknown split `{other}`"))),
    };
    evaluate_model(&ckpt.model(), samples, split, post)
}

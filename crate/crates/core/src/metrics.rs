//! Box and mask overlap, Acc@X, and the inconsistency error between tasks.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IoU above which a box or mask counts as correct.
pub const CORRECT_IOU: f64 = 0.5;

pub const ACC_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Overlap of two `(x_min, y_min, x_max, y_max)` boxes.
pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    for bx in [a, b] {
        if bx[2] < bx[0] || bx[3] < bx[1] {
            return Err(Error::Contract(format!("inverted box {bx:?}")));
        }
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// Pixel IoU; two empty masks agree perfectly.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("mask_iou", &[a.len()], &[b.len()]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of IoUs strictly above `x`.
pub fn acc_at_x(ious: &[f64], x: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Contract("acc_at_x over zero samples".into()));
    }
    Ok(ious.iter().filter(|&&v| v > x).count() as f64 / ious.len() as f64)
}

/// Fraction of samples where exactly one task is correct.
pub fn inconsistency_error(rec_correct: &[bool], res_correct: &[bool]) -> Result<f64> {
    if rec_correct.len() != res_correct.len() {
        return Err(Error::shape("inconsistency_error", &[rec_correct.len()], &[res_correct.len()]));
    }
    if rec_correct.is_empty() {
        return Err(Error::Contract("inconsistency error over zero samples".into()));
    }
    let n = rec_correct.iter().zip(res_correct).filter(|(a, b)| a != b).count();
    Ok(n as f64 / rec_correct.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub n_samples: usize,
    /// Fraction of samples whose top box has IoU > 0.5.
    pub rec_prec_at_05: Option<f64>,
    pub res_mean_iou: Option<f64>,
    /// Acc@X keyed by threshold formatted with one decimal ("0.5", ...).
    pub acc_at: Option<BTreeMap<String, f64>>,
    pub ie: Option<f64>,
}

/// Per-sample outcomes an evaluation run collects.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleOutcomes {
    pub box_ious: Vec<f64>,
    pub mask_ious: Vec<f64>,
}

impl SampleOutcomes {
    pub fn merge(&mut self, other: SampleOutcomes) {
        self.box_ious.extend(other.box_ious);
        self.mask_ious.extend(other.mask_ious);
    }

    pub fn report(&self, split: &str) -> Result<MetricsReport> {
        let has_rec = !self.box_ious.is_empty();
        let has_res = !self.mask_ious.is_empty();
        if has_rec && has_res && self.box_ious.len() != self.mask_ious.len() {
            return Err(Error::shape("outcomes", &[self.box_ious.len()], &[self.mask_ious.len()]));
        }
        let n = self.box_ious.len().max(self.mask_ious.len());
        let rec_prec_at_05 = if has_rec { Some(acc_at_x(&self.box_ious, CORRECT_IOU)?) } else { None };
        let (res_mean_iou, acc_at) = if has_res {
            let mean = self.mask_ious.iter().sum::<f64>() / n as f64;
            let acc = ACC_THRESHOLDS
                .iter()
                .map(|&x| Ok((format!("{x:.1}"), acc_at_x(&self.mask_ious, x)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            (Some(mean), Some(acc))
        } else {
            (None, None)
        };
        let ie = if has_rec && has_res {
            let rc: Vec<bool> = self.box_ious.iter().map(|&v| v > CORRECT_IOU).collect();
            let sc: Vec<bool> = self.mask_ious.iter().map(|&v| v > CORRECT_IOU).collect();
            Some(inconsistency_error(&rc, &sc)?)
        } else {
            None
        };
        Ok(MetricsReport {
            split: split.to_string(),
            n_samples: n,
            rec_prec_at_05,
            res_mean_iou,
            acc_at,
            ie,
        })
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub const CSV_HEADER: [&'static str; 10] = [
        "split", "n_samples", "rec_prec_at_05", "res_mean_iou", "acc_0.5", "acc_0.6", "acc_0.7", "acc_0.8", "acc_0.9", "ie",
    ];

    fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut row = vec![
            self.split.clone(),
            self.n_samples.to_string(),
            opt(self.rec_prec_at_05),
            opt(self.res_mean_iou),
        ];
        for x in ACC_THRESHOLDS {
            row.push(opt(self.acc_at.as_ref().and_then(|m| m.get(&format!("{x:.1}")).copied())));
        }
        row.push(opt(self.ie));
        row
    }

    /// Writes a header and one row per report.
    pub fn write_csv<W: Write>(reports: &[MetricsReport], w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::CSV_HEADER)?;
        for r in reports {
            out.write_record(r.csv_fields())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let pct = |v: Option<f64>| v.map(|x| format!("{:.2}%", 100.0 * x)).unwrap_or_else(|| "-".into());
        let mut s = format!(
            "[{}] n={}  REC prec@0.5 {}  RES mIoU {}  IE {}",
            self.split,
            self.n_samples,
            pct(self.rec_prec_at_05),
            pct(self.res_mean_iou),
            pct(self.ie)
        );
        if let Some(acc) = &self.acc_at {
            let parts: Vec<String> = acc.iter().map(|(k, v)| format!("Acc@{k} {:.2}%", 100.0 * v)).collect();
            s.push_str("\n  ");
            s.push_str(&parts.join("  "));
        }
        s
    }
}

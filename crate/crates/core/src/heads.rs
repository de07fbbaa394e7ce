//! Box regression head, mask decoder, and every training loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{features_to_map, AttendedBranch};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Values per anchor per cell: `t_x, t_y, t_w, t_h, p_logit`.
pub const BOX_FIELDS: usize = 5;

/// Probability clip used by every binary cross-entropy term.
pub const BCE_EPS: f64 = 1e-7;

pub const COSINE_EPS: f64 = 1e-8;
pub const CORRELATION_FLOOR: f64 = 1e-6;
/// Fixed affine map of cosine similarity into `(0, 1]`.
pub const CORRELATION_SCALE: f64 = 0.5;
pub const CORRELATION_SHIFT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    /// `(width, height)` priors in pixels.
    pub priors: Vec<(f64, f64)>,
}

impl AnchorSet {
    pub fn new(priors: Vec<(f64, f64)>) -> Result<Self> {
        if priors.is_empty() || priors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(Error::Contract(format!("anchor priors must be positive, got {priors:?}")));
        }
        Ok(Self { priors })
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }
}

impl Default for AnchorSet {
    fn default() -> Self {
        Self {
            priors: vec![(8.0, 8.0), (16.0, 16.0), (24.0, 24.0)],
        }
    }
}

/// Raw regression output `[N*5 x h1 x w1]`.
#[derive(Debug, Clone, Copy)]
pub struct RecOutput {
    pub raw: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ResOutput {
    pub mask_logits: Var,
    pub prob: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxTarget {
    pub row: usize,
    pub col: usize,
    pub anchor_index: usize,
    /// `(tx*, ty*, tw*, th*)`
    pub t_star: [f64; 4],
    /// `[N x h1 x w1]` one-hot confidence target.
    pub p_star: Vec<f64>,
    pub grid: (usize, usize),
}

/// Center-size box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl CenterBox {
    pub fn to_corners(self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn from_corners(b: [f64; 4]) -> Self {
        Self {
            cx: (b[0] + b[2]) / 2.0,
            cy: (b[1] + b[3]) / 2.0,
            w: b[2] - b[0],
            h: b[3] - b[1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: CenterBox,
    pub confidence: f64,
    pub anchor: usize,
    pub row: usize,
    pub col: usize,
}

fn raw_index(anchor: usize, field: usize, row: usize, col: usize, grid: (usize, usize)) -> usize {
    ((anchor * BOX_FIELDS + field) * grid.0 + row) * grid.1 + col
}

pub fn init_rec_head<R: Rng>(p: &mut ParamStore, d: usize, anchors: usize, rng: &mut R) {
    p.init_weight("rec.w", &[anchors * BOX_FIELDS, d, 1, 1], d, rng);
    p.init_zeros("rec.b", &[anchors * BOX_FIELDS]);
}

/// 1x1 regression layer over the attended coarse map.
pub fn rec_head(g: &mut Graph, branch: &AttendedBranch, grid: (usize, usize), p: &BoundParams) -> Result<RecOutput> {
    let map = features_to_map(g, branch, grid.0, grid.1)?;
    let raw = g.conv2d(map, p.get("rec.w"), Some(p.get("rec.b")), 1, 0)?;
    Ok(RecOutput { raw })
}

pub fn init_res_decoder<R: Rng>(p: &mut ParamStore, d: usize, d_dec: usize, rng: &mut R) {
    p.init_weight("res.c1.w", &[d_dec, d, 3, 3], d * 9, rng);
    p.init_zeros("res.c1.b", &[d_dec]);
    p.init_weight("res.c2.w", &[d_dec, d_dec, 3, 3], d_dec * 9, rng);
    p.init_zeros("res.c2.b", &[d_dec]);
    p.init_weight("res.out.w", &[1, d_dec, 1, 1], d_dec, rng);
    p.init_zeros("res.out.b", &[1]);
}

/// Two 3x3 convolutions and a 1x1 projection to one mask channel.
pub fn res_decode(g: &mut Graph, branch: &AttendedBranch, grid: (usize, usize), p: &BoundParams) -> Result<ResOutput> {
    let map = features_to_map(g, branch, grid.0, grid.1)?;
    let x = g.conv2d(map, p.get("res.c1.w"), Some(p.get("res.c1.b")), 1, 1)?;
    let x = g.leaky_relu(x);
    let x = g.conv2d(x, p.get("res.c2.w"), Some(p.get("res.c2.b")), 1, 1)?;
    let x = g.leaky_relu(x);
    let x = g.conv2d(x, p.get("res.out.w"), Some(p.get("res.out.b")), 1, 0)?;
    let mask_logits = g.reshape(x, &[grid.0, grid.1])?;
    let prob = g.sigmoid(mask_logits);
    Ok(ResOutput { mask_logits, prob })
}

/// Summed binary cross-entropy between probabilities and constant targets,
/// with probabilities clipped to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_sum(g: &mut Graph, prob: Var, target: &[f64]) -> Result<Var> {
    if g.value(prob).len() != target.len() {
        return Err(Error::shape("bce", g.shape(prob), &[target.len()]));
    }
    let shape = g.shape(prob).to_vec();
    let o = g.clamp(prob, BCE_EPS, 1.0 - BCE_EPS);
    let log_o = g.log(o)?;
    let one_minus = g.affine(o, -1.0, 1.0);
    let log_1mo = g.log(one_minus)?;
    let t = g.constant(Tensor::new(shape.clone(), target.to_vec())?);
    let t_neg = g.constant(Tensor::new(shape, target.iter().map(|x| 1.0 - x).collect())?);
    let pos = g.mul(t, log_o)?;
    let neg = g.mul(t_neg, log_1mo)?;
    let both = g.add(pos, neg)?;
    let s = g.sum(both);
    Ok(g.affine(s, -1.0, 0.0))
}

/// Mask loss: summed (not averaged) per-cell binary cross-entropy.
pub fn res_loss(g: &mut Graph, prob: Var, g_prime: &[f64]) -> Result<Var> {
    bce_sum(g, prob, g_prime)
}

fn shape_iou(w: f64, h: f64, pw: f64, ph: f64) -> f64 {
    let inter = w.min(pw) * h.min(ph);
    inter / (w * h + pw * ph - inter)
}

/// Assigns a ground-truth box to the best-matching anchor of its cell.
pub fn build_rec_target(gt: CenterBox, anchors: &AnchorSet, stride: usize, grid: (usize, usize)) -> Result<BoxTarget> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::Contract(format!("degenerate box {gt:?}")));
    }
    let s = stride as f64;
    let col = ((gt.cx / s).floor().max(0.0) as usize).min(grid.1 - 1);
    let row = ((gt.cy / s).floor().max(0.0) as usize).min(grid.0 - 1);
    let mut anchor_index = 0;
    let mut best = f64::NEG_INFINITY;
    for (a, &(pw, ph)) in anchors.priors.iter().enumerate() {
        let iou = shape_iou(gt.w, gt.h, pw, ph);
        if iou > best {
            best = iou;
            anchor_index = a;
        }
    }
    let (pw, ph) = anchors.priors[anchor_index];
    let t_star = [
        gt.cx / s - col as f64,
        gt.cy / s - row as f64,
        (gt.w / pw).ln(),
        (gt.h / ph).ln(),
    ];
    let mut p_star = vec![0.0; anchors.len() * grid.0 * grid.1];
    p_star[(anchor_index * grid.0 + row) * grid.1 + col] = 1.0;
    Ok(BoxTarget {
        row,
        col,
        anchor_index,
        t_star,
        p_star,
        grid,
    })
}

/// Box loss at the matched slot plus confidence BCE over every slot.
pub fn rec_loss(g: &mut Graph, out: &RecOutput, target: &BoxTarget) -> Result<Var> {
    let grid = target.grid;
    let n_anchors = target.p_star.len() / (grid.0 * grid.1);
    let expected = n_anchors * BOX_FIELDS * grid.0 * grid.1;
    if g.value(out.raw).len() != expected {
        return Err(Error::shape("rec_loss", g.shape(out.raw), &[n_anchors * BOX_FIELDS, grid.0, grid.1]));
    }
    let at = |field| raw_index(target.anchor_index, field, target.row, target.col, grid);
    let txy = g.gather(out.raw, vec![at(0), at(1)], &[2])?;
    let sxy = g.sigmoid(txy);
    let center = bce_sum(g, sxy, &target.t_star[..2])?;

    let twh = g.gather(out.raw, vec![at(2), at(3)], &[2])?;
    let twh_star = g.constant(Tensor::vector(target.t_star[2..].to_vec()));
    let diff = g.sub(twh, twh_star)?;
    let sl1 = g.smooth_l1(diff);
    let size = g.sum(sl1);

    let conf_idx: Vec<usize> = (0..n_anchors)
        .flat_map(|a| (0..grid.0).flat_map(move |r| (0..grid.1).map(move |c| raw_index(a, 4, r, c, grid))))
        .collect();
    let logits = g.gather(out.raw, conf_idx, &[n_anchors, grid.0, grid.1])?;
    let conf_p = g.sigmoid(logits);
    let conf = bce_sum(g, conf_p, &target.p_star)?;

    let s = g.add(center, size)?;
    g.add(s, conf)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes every anchor/cell slot, sorted by confidence (highest first).
pub fn decode_boxes(raw: &[f64], anchors: &AnchorSet, stride: usize, grid: (usize, usize)) -> Vec<Detection> {
    let s = stride as f64;
    let mut out = Vec::with_capacity(anchors.len() * grid.0 * grid.1);
    for (a, &(pw, ph)) in anchors.priors.iter().enumerate() {
        for row in 0..grid.0 {
            for col in 0..grid.1 {
                let v = |f| raw[raw_index(a, f, row, col, grid)];
                out.push(Detection {
                    bbox: CenterBox {
                        cx: (col as f64 + sigmoid(v(0))) * s,
                        cy: (row as f64 + sigmoid(v(1))) * s,
                        w: pw * v(2).exp(),
                        h: ph * v(3).exp(),
                    },
                    confidence: sigmoid(v(4)),
                    anchor: a,
                    row,
                    col,
                });
            }
        }
    }
    out.sort_by(|x, y| y.confidence.total_cmp(&x.confidence));
    out
}

pub fn init_cem<R: Rng>(p: &mut ParamStore, d: usize, rng: &mut R) {
    p.init_weight("cem.w_s", &[d, 1], d, rng);
    p.init_weight("cem.w_c", &[d, 1], d, rng);
}

/// Negative summed co-energy between the segmentation branch `s` and the
/// comprehension branch `c`, with energies `E = F W`.
pub fn cem_loss(g: &mut Graph, feat_s: Var, feat_c: Var, w_s: Var, w_c: Var) -> Result<Var> {
    let (ss, sc) = (g.shape(feat_s).to_vec(), g.shape(feat_c).to_vec());
    if ss.len() != 2 || sc.len() != 2 || ss[1] != sc[1] {
        return Err(Error::shape("cem_loss", &ss, &sc));
    }
    let e_s = g.matmul(feat_s, w_s)?;
    let e_c = g.matmul(feat_c, w_c)?;
    co_energy_loss(g, e_s, e_c, feat_s, feat_c)
}

/// `-sum_ij C(i,j)` for given energies and features.
///
/// With `T(i,j) = 0.5 cos(f_i^s, f_j^c) + 0.5` and
/// `C(i,j) = E_s(i) + E_c(j) + log T(i,j) - log sum exp E_s - log sum exp E_c`,
/// the double sum is evaluated in closed form:
/// `-(n_c sum E_s + n_s sum E_c + sum log T - n_s n_c (lse_s + lse_c))`.
pub fn co_energy_loss(g: &mut Graph, e_s: Var, e_c: Var, feat_s: Var, feat_c: Var) -> Result<Var> {
    let (n_s, n_c) = (g.shape(feat_s)[0], g.shape(feat_c)[0]);
    if g.value(e_s).len() != n_s || g.value(e_c).len() != n_c {
        return Err(Error::shape("co_energy_loss", g.shape(e_s), g.shape(e_c)));
    }
    let (n_s, n_c) = (n_s as f64, n_c as f64);
    let lse_s = g.logsumexp(e_s);
    let lse_c = g.logsumexp(e_c);
    let sum_s = g.sum(e_s);
    let sum_c = g.sum(e_c);

    let unit_s = g.normalize_rows(feat_s, COSINE_EPS)?;
    let unit_c = g.normalize_rows(feat_c, COSINE_EPS)?;
    let unit_c_t = g.transpose(unit_c)?;
    let cos = g.matmul(unit_s, unit_c_t)?;
    let corr = g.affine(cos, CORRELATION_SCALE, CORRELATION_SHIFT);
    let corr = g.clamp(corr, CORRELATION_FLOOR, f64::INFINITY);
    let log_corr = g.log(corr)?;
    let sum_log_corr = g.sum(log_corr);

    let a = g.affine(sum_s, n_c, 0.0);
    let b = g.affine(sum_c, n_s, 0.0);
    let lse = g.add(lse_s, lse_c)?;
    let norm = g.affine(lse, -n_s * n_c, 0.0);
    let t1 = g.add(a, b)?;
    let t2 = g.add(t1, sum_log_corr)?;
    let co = g.add(t2, norm)?;
    Ok(g.affine(co, -1.0, 0.0))
}

/// CEM over two attended branches with the learned projections bound in `p`.
pub fn cem_loss_branches(g: &mut Graph, s: &AttendedBranch, c: &AttendedBranch, p: &BoundParams) -> Result<Var> {
    cem_loss(g, s.features, c.features, p.get("cem.w_s"), p.get("cem.w_c"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub res: f64,
    pub rec: f64,
    pub cem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            res: 0.1,
            rec: 1.0,
            cem: 1.0,
        }
    }
}

/// Weighted sum of whichever loss terms the active structure produces.
pub fn total_loss(
    g: &mut Graph,
    res: Option<Var>,
    rec: Option<Var>,
    cem: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let terms = [(res, w.res, "res"), (rec, w.rec, "rec"), (cem, w.cem, "cem")];
    let mut acc: Option<Var> = None;
    for (term, weight, name) in terms {
        let Some(v) = term else { continue };
        let x = g.scalar(v);
        if !x.is_finite() {
            return Err(Error::TrainingFault {
                epoch: 0,
                step: 0,
                reason: format!("{name} loss is {x}"),
                last_good: None,
            });
        }
        let scaled = g.affine(v, weight, 0.0);
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant_scalar(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn res_decode_zero_weights_give_half() {
        let mut store = ParamStore::new();
        let mut rng = rand::thread_rng();
        init_res_decoder(&mut store, 4, 4, &mut rng);
        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let feats = g.constant(Tensor::full(&[6, 4], 0.3));
        let attn = g.constant(Tensor::full(&[2, 3], 1.0 / 6.0));
        let br = AttendedBranch {
            features: feats,
            spatial_attn: attn,
        };
        let out = res_decode(&mut g, &br, (2, 3), &p).unwrap();
        assert_eq!(g.shape(out.prob), &[2, 3]);
        assert!(g.value(out.prob).iter().all(|&x| x == 0.5));
    }

    #[test]
    fn res_loss_hand_values() {
        let mut g = Graph::new();
        let prob = g.param(&Tensor::full(&[2, 2], 0.5));
        let l = res_loss(&mut g, prob, &[1.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(close(g.scalar(l), 4.0 * 2f64.ln(), 1e-12));

        let mut g = Graph::new();
        let prob = g.param(&Tensor::full(&[2, 2], 0.5));
        let l = res_loss(&mut g, prob, &[1.0; 4]).unwrap();
        g.backward(l).unwrap();
        for &d in g.grad(prob).unwrap() {
            assert!(close(d, -2.0, 1e-12));
        }

        let mut g = Graph::new();
        let prob = g.param(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let l = res_loss(&mut g, prob, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(g.scalar(l) < 1e-5);

        let prob = g.param(&Tensor::full(&[3], 0.5));
        assert!(matches!(res_loss(&mut g, prob, &[1.0; 4]), Err(Error::Shape { .. })));
    }

    #[test]
    fn target_at_cell_center_with_matching_prior() {
        let anchors = AnchorSet::default();
        let gt = CenterBox {
            cx: 16.0 + 8.0,
            cy: 32.0 + 8.0,
            w: 16.0,
            h: 16.0,
        };
        let t = build_rec_target(gt, &anchors, 16, (4, 4)).unwrap();
        assert_eq!((t.row, t.col, t.anchor_index), (2, 1, 1));
        assert_eq!(t.t_star, [0.5, 0.5, 0.0, 0.0]);
        assert_eq!(t.p_star.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(t.p_star.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn target_picks_shape_matched_prior() {
        let anchors = AnchorSet::new(vec![(5.0, 7.0), (10.0, 14.0)]).unwrap();
        let gt = CenterBox {
            cx: 20.0,
            cy: 20.0,
            w: 10.0,
            h: 14.0,
        };
        assert_eq!(build_rec_target(gt, &anchors, 16, (4, 4)).unwrap().anchor_index, 1);
        let flat = CenterBox { w: 0.0, ..gt };
        assert!(build_rec_target(flat, &anchors, 16, (4, 4)).is_err());
    }

    #[test]
    fn smooth_l1_branches() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0 - 1.0, 0.0 - 2.0]));
        let y = g.smooth_l1(x);
        assert_eq!(g.value(y), &[0.5, 1.5]);
    }

    #[test]
    fn decode_default_slot() {
        let anchors = AnchorSet::new(vec![(8.0, 8.0)]).unwrap();
        let mut raw = vec![0.0; BOX_FIELDS * 4 * 4];
        // push every other slot's confidence down so (0,0) is first
        for r in 0..4 {
            for c in 0..4 {
                if (r, c) != (0, 0) {
                    raw[raw_index(0, 4, r, c, (4, 4))] = -5.0;
                }
            }
        }
        let dets = decode_boxes(&raw, &anchors, 16, (4, 4));
        let top = dets[0];
        assert_eq!((top.row, top.col), (0, 0));
        assert_eq!(top.bbox, CenterBox { cx: 8.0, cy: 8.0, w: 8.0, h: 8.0 });
        assert!(dets.iter().all(|d| d.confidence > 0.0 && d.confidence < 1.0));
        assert!(dets.windows(2).all(|w| w[0].confidence >= w[1].confidence));
    }

    #[test]
    fn decode_inverts_target() {
        let anchors = AnchorSet::default();
        let gt = CenterBox {
            cx: 37.3,
            cy: 12.9,
            w: 19.0,
            h: 11.5,
        };
        let grid = (4, 4);
        let t = build_rec_target(gt, &anchors, 16, grid).unwrap();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let mut raw = vec![-10.0; anchors.len() * BOX_FIELDS * 16];
        let at = |f| raw_index(t.anchor_index, f, t.row, t.col, grid);
        raw[at(0)] = logit(t.t_star[0]);
        raw[at(1)] = logit(t.t_star[1]);
        raw[at(2)] = t.t_star[2];
        raw[at(3)] = t.t_star[3];
        raw[at(4)] = 10.0;
        let d = decode_boxes(&raw, &anchors, 16, grid)[0];
        assert!(close(d.bbox.cx, gt.cx, 1e-9) && close(d.bbox.cy, gt.cy, 1e-9));
        assert!(close(d.bbox.w, gt.w, 1e-9) && close(d.bbox.h, gt.h, 1e-9));
    }

    #[test]
    fn rec_loss_vanishes_for_perfect_logits() {
        let anchors = AnchorSet::default();
        let grid = (4, 4);
        let gt = CenterBox {
            cx: 40.0,
            cy: 24.0,
            w: 16.0,
            h: 16.0,
        };
        let t = build_rec_target(gt, &anchors, 16, grid).unwrap();
        let mut raw = vec![-40.0; anchors.len() * BOX_FIELDS * 16];
        let at = |f| raw_index(t.anchor_index, f, t.row, t.col, grid);
        raw[at(0)] = 0.0;
        raw[at(1)] = 0.0;
        raw[at(2)] = 0.0;
        raw[at(3)] = 0.0;
        raw[at(4)] = 40.0;
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![anchors.len() * BOX_FIELDS, 4, 4], raw).unwrap());
        let l = rec_loss(&mut g, &RecOutput { raw: v }, &t).unwrap();
        // The center BCE keeps its entropy floor 2 ln 2 at t* = 0.5.
        assert!(close(g.scalar(l), 2.0 * 2f64.ln(), 1e-4));
    }

    #[test]
    fn cem_hand_value() {
        let mut g = Graph::new();
        let fs = g.constant(Tensor::full(&[4, 3], 0.7));
        let fc = g.constant(Tensor::full(&[1, 3], 0.7));
        let w = g.constant(Tensor::zeros(&[3, 1]));
        let l = cem_loss(&mut g, fs, fc, w, w).unwrap();
        assert!(close(g.scalar(l), 4.0 * 4f64.ln(), 1e-6));
    }

    #[test]
    fn cem_orthogonal_features_add_ln2_per_pair() {
        let mut g = Graph::new();
        let fs = g.constant(Tensor::new(vec![4, 2], vec![1., 0., 1., 0., 1., 0., 1., 0.]).unwrap());
        let fc = g.constant(Tensor::new(vec![2, 2], vec![0., 1., 0., 1.]).unwrap());
        let fc_aligned = g.constant(Tensor::new(vec![2, 2], vec![1., 0., 1., 0.]).unwrap());
        let w = g.constant(Tensor::zeros(&[2, 1]));
        let ortho = cem_loss(&mut g, fs, fc, w, w).unwrap();
        let aligned = cem_loss(&mut g, fs, fc_aligned, w, w).unwrap();
        let gap = g.scalar(ortho) - g.scalar(aligned);
        assert!(close(gap, 8.0 * 2f64.ln(), 1e-6), "{gap}");
    }

    #[test]
    fn total_loss_weights() {
        let mut g = Graph::new();
        let (a, b, c) = (g.constant_scalar(10.0), g.constant_scalar(1.0), g.constant_scalar(1.0));
        let t = total_loss(&mut g, Some(a), Some(b), Some(c), &LossWeights::default()).unwrap();
        assert!(close(g.scalar(t), 3.0, 1e-12));

        let z = g.constant_scalar(0.0);
        let t = total_loss(&mut g, Some(z), Some(z), Some(z), &LossWeights::default()).unwrap();
        assert_eq!(g.scalar(t), 0.0);

        let w = LossWeights {
            res: 1.0,
            rec: 2.0,
            cem: 0.0,
        };
        let t = total_loss(&mut g, Some(a), Some(b), Some(c), &w).unwrap();
        assert!(close(g.scalar(t), 12.0, 1e-12));

        let nan = g.constant_scalar(f64::NAN);
        assert!(matches!(
            total_loss(&mut g, Some(nan), Some(b), None, &w),
            Err(Error::TrainingFault { .. })
        ));
    }
}

//! Language-gated multi-scale fusion, the fine-to-coarse path, and the
//! query-guided spatial attention that produces each branch's attended features.

use rand::Rng;

use crate::encoders::linear;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy)]
pub struct MultimodalPyramid {
    pub f_m1: Var,
    pub f_m2: Var,
    pub f_m3: Var,
    pub f_m1_prime: Var,
    pub f_m3_prime: Var,
}

/// Attended features of one branch.
#[derive(Debug, Clone, Copy)]
pub struct AttendedBranch {
    /// `[(h*w) x d]`, one row per spatial location.
    pub features: Var,
    /// `[h x w]`, softmax over locations.
    pub spatial_attn: Var,
}

/// Per-location projection `[d_out x d_in] * [d_in x h x w]`.
pub fn pointwise(g: &mut Graph, w: Var, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("expected [c x h x w], got {s:?}")));
    }
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    let y = g.matmul(w, flat)?;
    let d_out = g.shape(y)[0];
    g.reshape(y, &[d_out, s[1], s[2]])
}

fn spatial(g: &Graph, x: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Dimension(format!("expected [c x h x w], got {s:?}"))),
    }
}

/// `sigma(f_v W_v) * sigma(f_t W_t)` at every location, with the textual gate
/// shared across locations.
pub fn gated_fuse(g: &mut Graph, f_v: Var, f_t: Var, w_v: Var, w_t: Var) -> Result<Var> {
    let proj = pointwise(g, w_v, f_v)?;
    let proj = g.leaky_relu(proj);
    let gate = linear(g, w_t, f_t)?;
    let gate = g.leaky_relu(gate);
    let (d, h, w) = spatial(g, proj)?;
    let flat = g.reshape(proj, &[d, h * w])?;
    let gated = g.scale_rows(flat, gate)?;
    g.reshape(gated, &[d, h, w])
}

/// Weights of one concatenate-and-project step.
#[derive(Debug, Clone, Copy)]
pub struct MergeParams {
    pub w_prev: Var,
    pub w_vis: Var,
    pub w_out: Var,
}

impl MergeParams {
    pub fn bind(p: &BoundParams, prefix: &str) -> Self {
        Self {
            w_prev: p.get(&format!("{prefix}.prev")),
            w_vis: p.get(&format!("{prefix}.vis")),
            w_out: p.get(&format!("{prefix}.out")),
        }
    }

    pub fn init<R: Rng>(p: &mut ParamStore, prefix: &str, d: usize, d_vis: usize, rng: &mut R) {
        p.init_weight(&format!("{prefix}.prev"), &[d, d], d, rng);
        p.init_weight(&format!("{prefix}.vis"), &[d, d_vis], d_vis, rng);
        p.init_weight(&format!("{prefix}.out"), &[d, 2 * d], 2 * d, rng);
    }
}

fn concat_project(g: &mut Graph, prev: Var, other: Var, p: &MergeParams) -> Result<Var> {
    let (_, h, w) = spatial(g, prev)?;
    let (_, ho, wo) = spatial(g, other)?;
    if (h, w) != (ho, wo) {
        return Err(Error::shape("merge", g.shape(prev), g.shape(other)));
    }
    let a = pointwise(g, p.w_prev, prev)?;
    let a = g.leaky_relu(a);
    let b = pointwise(g, p.w_vis, other)?;
    let b = g.leaky_relu(b);
    let cat = g.concat(&[a, b])?;
    let out = pointwise(g, p.w_out, cat)?;
    Ok(g.leaky_relu(out))
}

/// Upsample `prev` by 2, then concatenate with the finer visual map and project back to `d`.
pub fn scale_merge(g: &mut Graph, prev: Var, f_vi: Var, p: &MergeParams) -> Result<Var> {
    let (_, h, w) = spatial(g, prev)?;
    let (_, hv, wv) = spatial(g, f_vi)?;
    if (hv, wv) != (2 * h, 2 * w) {
        return Err(Error::shape("scale_merge", g.shape(prev), g.shape(f_vi)));
    }
    let up = g.up2(prev)?;
    concat_project(g, up, f_vi, p)
}

/// Fine-to-coarse path: two rounds of (downsample, concatenate, project).
pub fn bottom_up_merge(
    g: &mut Graph,
    f_m3: Var,
    f_m2: Var,
    f_m1: Var,
    first: &MergeParams,
    second: &MergeParams,
) -> Result<Var> {
    let d3 = g.down2(f_m3)?;
    let m2 = concat_project(g, d3, f_m2, first)?;
    let d2 = g.down2(m2)?;
    concat_project(g, d2, f_m1, second)
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

impl AttentionParams {
    pub fn bind(p: &BoundParams, prefix: &str) -> Self {
        Self {
            w_q: p.get(&format!("{prefix}.q")),
            w_k: p.get(&format!("{prefix}.k")),
            w_v: p.get(&format!("{prefix}.v")),
        }
    }

    pub fn init<R: Rng>(p: &mut ParamStore, prefix: &str, d: usize, d_text: usize, rng: &mut R) {
        p.init_weight(&format!("{prefix}.q"), &[d, d_text], d_text, rng);
        p.init_weight(&format!("{prefix}.k"), &[d, d], d, rng);
        p.init_weight(&format!("{prefix}.v"), &[d, d], d, rng);
    }
}

/// Single-head attention with the expression as the query and locations as keys.
///
/// Values are amplified by `1 + attn * h * w`, so a uniform attention map
/// doubles every location and a peaked one singles out the attended cell
/// while each row still carries its own location's features.
pub fn guided_attention(g: &mut Graph, f_m: Var, f_t: Var, p: &AttentionParams) -> Result<AttendedBranch> {
    let (d, h, w) = spatial(g, f_m)?;
    let n = h * w;
    let x = g.reshape(f_m, &[d, n])?;
    let q = linear(g, p.w_q, f_t)?;
    let d_a = g.value(q).len();
    let q = g.reshape(q, &[1, d_a])?;
    let k = g.matmul(p.w_k, x)?;
    let scores = g.matmul(q, k)?;
    let scores = g.affine(scores, 1.0 / (d_a as f64).sqrt(), 0.0);
    let attn = g.softmax(scores);
    let spatial_attn = g.reshape(attn, &[h, w])?;
    let v = g.matmul(p.w_v, x)?;
    let rows = g.transpose(v)?;
    let amp = g.affine(attn, n as f64, 1.0);
    let features = g.scale_rows(rows, amp)?;
    Ok(AttendedBranch {
        features,
        spatial_attn,
    })
}

/// Reshapes branch features `[(h*w) x d]` back into a `[d x h x w]` map.
pub fn features_to_map(g: &mut Graph, branch: &AttendedBranch, h: usize, w: usize) -> Result<Var> {
    let t = g.transpose(branch.features)?;
    let d = g.shape(t)[0];
    g.reshape(t, &[d, h, w])
}

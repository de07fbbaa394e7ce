//! Visual feature pyramid and attended bi-GRU expression encoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Graph, Var};

/// Stride of the coarsest visual tap relative to the input image.
pub const COARSEST_STRIDE: usize = 16;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Feature maps at strides 16, 8 and 4 (coarsest first).
#[derive(Debug, Clone, Copy)]
pub struct VisualPyramid {
    pub f_v1: Var,
    pub f_v2: Var,
    pub f_v3: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct TextFeature {
    /// `[d_t]`
    pub f_t: Var,
    /// `[L x d_t]`, forward and backward hiddens concatenated per token.
    pub token_hiddens: Var,
    /// `[L]`
    pub attn_weights: Var,
}

// stem, then three stages of (stride-2 conv, stride-1 conv)
const CONV_LAYERS: [(&str, usize); 7] = [
    ("enc.stem", 2),
    ("enc.s1a", 2),
    ("enc.s1b", 1),
    ("enc.s2a", 2),
    ("enc.s2b", 1),
    ("enc.s3a", 2),
    ("enc.s3b", 1),
];

fn conv_channels(cfg: &ModelConfig) -> [(usize, usize); 7] {
    [
        (3, cfg.stem_channels),
        (cfg.stem_channels, cfg.d3),
        (cfg.d3, cfg.d3),
        (cfg.d3, cfg.d2),
        (cfg.d2, cfg.d2),
        (cfg.d2, cfg.d1),
        (cfg.d1, cfg.d1),
    ]
}

pub fn init_visual<R: Rng>(p: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    for ((name, _), (c_in, c_out)) in CONV_LAYERS.iter().zip(conv_channels(cfg)) {
        p.init_weight(&format!("{name}.w"), &[c_out, c_in, 3, 3], c_in * 9, rng);
        p.init_zeros(&format!("{name}.b"), &[c_out]);
    }
}

/// Runs the backbone on a `[3 x H x W]` image.
pub fn encode_image(g: &mut Graph, image: Var, p: &BoundParams) -> Result<VisualPyramid> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("image must be [3 x H x W], got {s:?}")));
    }
    if s[1] % COARSEST_STRIDE != 0 || s[2] % COARSEST_STRIDE != 0 {
        return Err(Error::Dimension(format!(
            "image extents {}x{} not divisible by {COARSEST_STRIDE}",
            s[1], s[2]
        )));
    }
    let mut x = image;
    let mut taps = Vec::with_capacity(3);
    for (name, stride) in CONV_LAYERS {
        let w = p.get(&format!("{name}.w"));
        let b = p.get(&format!("{name}.b"));
        let y = g.conv2d(x, w, Some(b), stride, 1)?;
        x = g.leaky_relu(y);
        if name.ends_with('b') {
            taps.push(x);
        }
    }
    Ok(VisualPyramid {
        f_v3: taps[0],
        f_v2: taps[1],
        f_v1: taps[2],
    })
}

/// Weights of one GRU direction.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

impl GruParams {
    pub fn bind(p: &BoundParams, prefix: &str) -> Self {
        let v = |n: &str| p.get(&format!("{prefix}.{n}"));
        Self {
            w_z: v("w_z"),
            u_z: v("u_z"),
            b_z: v("b_z"),
            w_r: v("w_r"),
            u_r: v("u_r"),
            b_r: v("b_r"),
            w_h: v("w_h"),
            u_h: v("u_h"),
            b_h: v("b_h"),
        }
    }

    pub fn init<R: Rng>(p: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize, rng: &mut R) {
        for gate in ["z", "r", "h"] {
            p.init_weight(&format!("{prefix}.w_{gate}"), &[d_h, d_in], d_in, rng);
            p.init_weight(&format!("{prefix}.u_{gate}"), &[d_h, d_h], d_h, rng);
            p.init_zeros(&format!("{prefix}.b_{gate}"), &[d_h]);
        }
    }
}

/// `W x` for a `[d_out x d_in]` matrix and a `[d_in]` vector.
pub fn linear(g: &mut Graph, w: Var, x: Var) -> Result<Var> {
    let d_in = g.value(x).len();
    let col = g.reshape(x, &[d_in, 1])?;
    let y = g.matmul(w, col)?;
    let d_out = g.shape(y)[0];
    g.reshape(y, &[d_out])
}

/// One GRU step.
pub fn gru_cell(g: &mut Graph, x: Var, h: Var, p: &GruParams) -> Result<Var> {
    let gate = |g: &mut Graph, w: Var, u: Var, b: Var, h_in: Var| -> Result<Var> {
        let wx = linear(g, w, x)?;
        let uh = linear(g, u, h_in)?;
        let s = g.add(wx, uh)?;
        g.add(s, b)
    };
    let z_pre = gate(g, p.w_z, p.u_z, p.b_z, h)?;
    let z = g.sigmoid(z_pre);
    let r_pre = gate(g, p.w_r, p.u_r, p.b_r, h)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h)?;
    let cand_pre = gate(g, p.w_h, p.u_h, p.b_h, rh)?;
    let cand = g.tanh(cand_pre);
    // h' = (1 - z) h + z cand = h + z (cand - h)
    let delta = g.sub(cand, h)?;
    let step = g.mul(z, delta)?;
    g.add(h, step)
}

pub fn init_text<R: Rng>(p: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let d_dir = cfg.d_text / 2;
    p.init_weight("txt.embed", &[cfg.vocab_size, cfg.embed_dim], cfg.embed_dim, rng);
    GruParams::init(p, "txt.fwd", cfg.embed_dim, d_dir, rng);
    GruParams::init(p, "txt.bwd", cfg.embed_dim, d_dir, rng);
    p.init_weight("txt.score", &[cfg.d_text, 1], cfg.d_text, rng);
}

/// Bi-GRU over the token sequence, pooled by a learned softmax over positions.
pub fn encode_expression(
    g: &mut Graph,
    tokens: &[usize],
    p: &BoundParams,
    max_len: usize,
) -> Result<TextFeature> {
    if tokens.is_empty() {
        return Err(Error::Dimension("empty token sequence".into()));
    }
    if tokens.len() > max_len {
        return Err(Error::Dimension(format!(
            "expression of {} tokens exceeds max_len {max_len}",
            tokens.len()
        )));
    }
    let embed = p.get("txt.embed");
    let vocab = g.shape(embed)[0];
    let ids: Vec<usize> = tokens.iter().map(|&t| if t < vocab { t } else { UNK_ID }).collect();
    let fwd = GruParams::bind(p, "txt.fwd");
    let bwd = GruParams::bind(p, "txt.bwd");
    let d_dir = g.shape(fwd.u_z)[0];
    let l = ids.len();

    let xs = ids
        .iter()
        .map(|&id| {
            let row = g.rows(embed, &[id])?;
            let e = g.shape(row)[1];
            g.reshape(row, &[e])
        })
        .collect::<Result<Vec<_>>>()?;

    let zero = g.constant(crate::tensor::Tensor::zeros(&[d_dir]));
    let mut h_fwd = Vec::with_capacity(l);
    let mut h = zero;
    for &x in &xs {
        h = gru_cell(g, x, h, &fwd)?;
        h_fwd.push(h);
    }
    let mut h_bwd = vec![zero; l];
    let mut h = zero;
    for t in (0..l).rev() {
        h = gru_cell(g, xs[t], h, &bwd)?;
        h_bwd[t] = h;
    }
    let rows = (0..l)
        .map(|t| {
            let cat = g.concat(&[h_fwd[t], h_bwd[t]])?;
            g.reshape(cat, &[1, 2 * d_dir])
        })
        .collect::<Result<Vec<_>>>()?;
    let hiddens = g.concat(&rows)?;

    let scores = g.matmul(hiddens, p.get("txt.score"))?;
    let scores = g.reshape(scores, &[l])?;
    let attn = g.softmax(scores);
    let attn_row = g.reshape(attn, &[1, l])?;
    let pooled = g.matmul(attn_row, hiddens)?;
    let f_t = g.reshape(pooled, &[2 * d_dir])?;
    Ok(TextFeature {
        f_t,
        token_hiddens: hiddens,
        attn_weights: attn,
    })
}

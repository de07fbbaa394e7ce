//! Central finite-difference oracle and the gradient cases it checks.

#![allow(dead_code)]

use mcn::encoders::{self, GruParams};
use mcn::fusion::{self, AttentionParams, MergeParams};
use mcn::heads::{self, AnchorSet, CenterBox, LossWeights, RecOutput};
use mcn::model::{Model, ModelConfig, Structure, Targets};
use mcn::params::ParamStore;
use mcn::tensor::{Graph, Tensor, Var};
use mcn::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

/// A built graph: the scalar loss and the leaves whose gradients are checked.
pub struct Built {
    pub graph: Graph,
    pub loss: Var,
    pub leaves: Vec<Var>,
}

pub type Builder = Box<dyn Fn(&[Tensor]) -> Result<Built>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Builder,
    /// Coordinates checked per input; `None` checks all of them.
    pub coords_per_input: Option<usize>,
    pub floor: Floor,
}

/// Smallest relative-error denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Floor {
    Fixed(f64),
    /// Derived from the rounding noise of the loss value: a few ulps of the
    /// loss divided by the step, scaled so that noise alone stays under tolerance.
    Roundoff,
}

impl Floor {
    fn resolve(self, loss: f64) -> f64 {
        match self {
            Floor::Fixed(f) => f,
            Floor::Roundoff => DENOM_FLOOR.max(8.0 * f64::EPSILON * loss.abs().max(1.0) / FD_STEP / REL_TOL),
        }
    }
}

pub const DENOM_FLOOR: f64 = 1e-8;

pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, DENOM_FLOOR)
}

pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between autodiff and central differences.
pub fn max_rel_error(case: &Case, seed: u64) -> Result<f64> {
    let mut built = (case.build)(&case.inputs)?;
    built.graph.backward(built.loss)?;
    let grads: Vec<Vec<f64>> = built
        .leaves
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| built.graph.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let b = (case.build)(inputs)?;
        Ok(b.graph.scalar(b.loss))
    };
    let floor = case.floor.resolve(built.graph.scalar(built.loss));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut worst: f64 = 0.0;
    for (k, t) in case.inputs.iter().enumerate() {
        let coords: Vec<usize> = match case.coords_per_input {
            Some(n) if n < t.len() => (0..n).map(|_| rng.gen_range(0..t.len())).collect(),
            _ => (0..t.len()).collect(),
        };
        for i in coords {
            let mut inputs = case.inputs.clone();
            inputs[k].data_mut()[i] += FD_STEP;
            let up = eval(&inputs)?;
            inputs[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&inputs)?;
            let ad = grads[k][i];
            let mut err = rel_err_floor(ad, (up - down) / (2.0 * FD_STEP), floor);
            if err >= REL_TOL {
                // A kink inside [x - h, x + h] makes the central difference
                // meaningless; autodiff must then match one of the one-sided slopes.
                let mid = eval(&case.inputs)?;
                let fwd = (up - mid) / FD_STEP;
                let bwd = (mid - down) / FD_STEP;
                if rel_err_floor(fwd, bwd, floor) > 1e-3 {
                    err = rel_err_floor(ad, fwd, floor).min(rel_err_floor(ad, bwd, floor));
                }
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar through a fixed random weighting, so every
/// output element contributes a distinct adjoint.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn op_case(
    name: &'static str,
    seed: u64,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs,
        build: Box::new(move |ts| {
            let mut g = Graph::new();
            let leaves: Vec<Var> = ts.iter().map(|t| g.param(t)).collect();
            let out = f(&mut g, &leaves)?;
            let loss = project(&mut g, out, seed)?;
            Ok(Built { graph: g, loss, leaves })
        }),
        coords_per_input: None,
        floor: Floor::Fixed(DENOM_FLOOR),
    }
}

/// Every differentiable primitive of the graph.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize]| uniform(&mut r, shape, -2.0, 2.0);
    let (a, b, c) = (u(&[3, 4]), u(&[4, 2]), u(&[3, 4]));
    let (v4, row, mat34) = (u(&[4]), u(&[3]), u(&[3, 4]));
    let img = u(&[2, 5, 5]);
    let k3 = u(&[3, 2, 3, 3]);
    let k1 = u(&[3, 2, 1, 1]);
    let bias = u(&[3]);
    let sq = u(&[2, 4, 4]);
    let small = u(&[2, 2, 3]);
    let v6 = u(&[6]);
    let m35 = u(&[3, 5]);
    let clampee = u(&[10]);
    let pos = uniform(&mut ChaCha8Rng::seed_from_u64(seed + 1000), &[5], 0.2, 2.0);
    vec![
        op_case("matmul", seed, vec![a.clone(), b.clone()], |g, x| g.matmul(x[0], x[1])),
        op_case("transpose", seed, vec![a.clone()], |g, x| g.transpose(x[0])),
        op_case("add", seed, vec![a.clone(), c.clone()], |g, x| g.add(x[0], x[1])),
        op_case("add_broadcast", seed, vec![a.clone(), v4.clone()], |g, x| g.add(x[0], x[1])),
        op_case("sub", seed, vec![a.clone(), c.clone()], |g, x| g.sub(x[0], x[1])),
        op_case("mul", seed, vec![a.clone(), c.clone()], |g, x| g.mul(x[0], x[1])),
        op_case("mul_broadcast", seed, vec![a.clone(), v4.clone()], |g, x| g.mul(x[0], x[1])),
        op_case("scale_rows", seed, vec![mat34.clone(), row.clone()], |g, x| g.scale_rows(x[0], x[1])),
        op_case("affine", seed, vec![a.clone()], |g, x| Ok(g.affine(x[0], -1.7, 0.3))),
        op_case("leaky_relu", seed, vec![a.clone()], |g, x| Ok(g.leaky_relu(x[0]))),
        op_case("sigmoid", seed, vec![a.clone()], |g, x| Ok(g.sigmoid(x[0]))),
        op_case("tanh", seed, vec![a.clone()], |g, x| Ok(g.tanh(x[0]))),
        op_case("exp", seed, vec![a.clone()], |g, x| Ok(g.exp(x[0]))),
        op_case("log", seed, vec![pos], |g, x| g.log(x[0])),
        op_case("clamp", seed, vec![clampee], |g, x| Ok(g.clamp(x[0], -1.0, 1.0))),
        op_case("smooth_l1", seed, vec![v6.clone()], |g, x| Ok(g.smooth_l1(x[0]))),
        op_case("sum", seed, vec![a.clone()], |g, x| Ok(g.sum(x[0]))),
        op_case("softmax", seed, vec![v6.clone()], |g, x| Ok(g.softmax(x[0]))),
        op_case("logsumexp", seed, vec![v6], |g, x| Ok(g.logsumexp(x[0]))),
        op_case("conv2d_3x3_pad1", seed, vec![img.clone(), k3.clone(), bias.clone()], |g, x| {
            g.conv2d(x[0], x[1], Some(x[2]), 1, 1)
        }),
        op_case("conv2d_3x3_stride2", seed, vec![img.clone(), k3], |g, x| g.conv2d(x[0], x[1], None, 2, 1)),
        op_case("conv2d_1x1", seed, vec![img, k1, bias], |g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, 0)),
        op_case("up2", seed, vec![small.clone()], |g, x| g.up2(x[0])),
        op_case("down2", seed, vec![sq.clone()], |g, x| g.down2(x[0])),
        op_case("concat", seed, vec![sq, u(&[1, 4, 4])], |g, x| g.concat(&[x[0], x[1]])),
        op_case("reshape", seed, vec![small], |g, x| g.reshape(x[0], &[4, 3])),
        op_case("gather", seed, vec![m35.clone()], |g, x| g.gather(x[0], vec![0, 4, 4, 7, 14], &[5])),
        op_case("rows", seed, vec![m35.clone()], |g, x| g.rows(x[0], &[2, 0, 2])),
        op_case("normalize_rows", seed, vec![m35], |g, x| g.normalize_rows(x[0], 1e-8)),
    ]
}

fn bound_case(name: &'static str, store: ParamStore, seed: u64, f: impl Fn(&mut Graph, &mcn::params::BoundParams) -> Result<Var> + 'static) -> Case {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    Case {
        name,
        inputs,
        build: Box::new(move |ts| {
            let mut p = ParamStore::new();
            for (n, t) in names.iter().zip(ts) {
                p.insert(n, t.clone());
            }
            let mut g = Graph::new();
            let bound = p.bind(&mut g);
            let leaves = names.iter().map(|n| bound.get(n)).collect();
            let out = f(&mut g, &bound)?;
            let loss = if g.value(out).len() == 1 { out } else { project(&mut g, out, seed)? };
            Ok(Built { graph: g, loss, leaves })
        }),
        coords_per_input: None,
        floor: Floor::Fixed(DENOM_FLOOR),
    }
}

fn rand_store(seed: u64, shapes: &[(&str, &[usize])]) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for (n, s) in shapes {
        p.insert(n, uniform(&mut rng, s, -2.0, 2.0));
    }
    p
}

fn rand_box(rng: &mut ChaCha8Rng, grid: usize, stride: usize) -> CenterBox {
    let extent = (grid * stride) as f64;
    let w = rng.gen_range(4.0..24.0);
    let h = rng.gen_range(4.0..24.0);
    CenterBox {
        cx: rng.gen_range(w / 2.0..extent - w / 2.0),
        cy: rng.gen_range(h / 2.0..extent - h / 2.0),
        w,
        h,
    }
}

/// Every loss term and the composite blocks the model is assembled from.
pub fn loss_and_block_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let target: Vec<f64> = (0..16).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let anchors = AnchorSet::default();
    let gt = rand_box(&mut rng, 4, 16);
    let rec_target = heads::build_rec_target(gt, &anchors, 16, (4, 4)).unwrap();
    let mut out = vec![];

    let t = target.clone();
    out.push(bound_case("res_loss", rand_store(seed, &[("logits", &[4, 4])]), seed, move |g, p| {
        let prob = g.sigmoid(p.get("logits"));
        heads::res_loss(g, prob, &t)
    }));
    let rt = rec_target.clone();
    out.push(bound_case("rec_loss", rand_store(seed, &[("raw", &[anchors.len() * 5, 4, 4])]), seed, move |g, p| {
        heads::rec_loss(g, &RecOutput { raw: p.get("raw") }, &rt)
    }));
    out.push(bound_case(
        "cem_loss",
        rand_store(seed, &[("fs", &[16, 5]), ("fc", &[4, 5]), ("ws", &[5, 1]), ("wc", &[5, 1])]),
        seed,
        |g, p| heads::cem_loss(g, p.get("fs"), p.get("fc"), p.get("ws"), p.get("wc")),
    ));
    let (t2, rt2) = (target, rec_target);
    out.push(bound_case(
        "total_loss",
        rand_store(
            seed,
            &[("logits", &[4, 4]), ("raw", &[anchors.len() * 5, 4, 4]), ("fs", &[16, 5]), ("fc", &[4, 5]), ("ws", &[5, 1]), ("wc", &[5, 1])],
        ),
        seed,
        move |g, p| {
            let prob = g.sigmoid(p.get("logits"));
            let res = heads::res_loss(g, prob, &t2)?;
            let rec = heads::rec_loss(g, &RecOutput { raw: p.get("raw") }, &rt2)?;
            let cem = heads::cem_loss(g, p.get("fs"), p.get("fc"), p.get("ws"), p.get("wc"))?;
            heads::total_loss(g, Some(res), Some(rec), Some(cem), &LossWeights::default())
        },
    ));

    let mut gru_store = rand_store(seed, &[("x", &[3]), ("h", &[4])]);
    GruParams::init(&mut gru_store, "gru", 3, 4, &mut ChaCha8Rng::seed_from_u64(seed));
    out.push(bound_case("gru_cell", gru_store, seed, |g, p| {
        encoders::gru_cell(g, p.get("x"), p.get("h"), &GruParams::bind(p, "gru"))
    }));
    out.push(bound_case(
        "gated_fuse",
        rand_store(seed, &[("fv", &[3, 2, 2]), ("ft", &[4]), ("wv", &[5, 3]), ("wt", &[5, 4])]),
        seed,
        |g, p| fusion::gated_fuse(g, p.get("fv"), p.get("ft"), p.get("wv"), p.get("wt")),
    ));
    let mut merge_store = rand_store(seed, &[("prev", &[4, 2, 2]), ("fv", &[3, 4, 4])]);
    MergeParams::init(&mut merge_store, "m", 4, 3, &mut ChaCha8Rng::seed_from_u64(seed));
    out.push(bound_case("scale_merge", merge_store, seed, |g, p| {
        fusion::scale_merge(g, p.get("prev"), p.get("fv"), &MergeParams::bind(p, "m"))
    }));
    let mut bu_store = rand_store(seed, &[("m3", &[3, 8, 8]), ("m2", &[3, 4, 4]), ("m1", &[3, 2, 2])]);
    MergeParams::init(&mut bu_store, "a", 3, 3, &mut ChaCha8Rng::seed_from_u64(seed));
    MergeParams::init(&mut bu_store, "b", 3, 3, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    out.push(bound_case("bottom_up_merge", bu_store, seed, |g, p| {
        fusion::bottom_up_merge(g, p.get("m3"), p.get("m2"), p.get("m1"), &MergeParams::bind(p, "a"), &MergeParams::bind(p, "b"))
    }));
    let mut att_store = rand_store(seed, &[("fm", &[4, 3, 3]), ("ft", &[5])]);
    AttentionParams::init(&mut att_store, "att", 4, 5, &mut ChaCha8Rng::seed_from_u64(seed));
    out.push(bound_case("guided_attention", att_store, seed, |g, p| {
        let b = fusion::guided_attention(g, p.get("fm"), p.get("ft"), &AttentionParams::bind(p, "att"))?;
        let f = project(g, b.features, 11)?;
        let a = project(g, b.spatial_attn, 12)?;
        g.add(f, a)
    }));
    let mut dec_store = rand_store(seed, &[("feat", &[16, 3])]);
    heads::init_res_decoder(&mut dec_store, 3, 4, &mut ChaCha8Rng::seed_from_u64(seed));
    out.push(bound_case("res_decode", dec_store, seed, |g, p| {
        let branch = fusion::AttendedBranch {
            features: p.get("feat"),
            spatial_attn: p.get("feat"),
        };
        Ok(heads::res_decode(g, &branch, (4, 4), p)?.mask_logits)
    }));
    let cfg = ModelConfig {
        vocab_size: 6,
        embed_dim: 3,
        d_text: 4,
        ..ModelConfig::default()
    };
    let mut txt_store = ParamStore::new();
    encoders::init_text(&mut txt_store, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    out.push(bound_case("encode_expression", txt_store, seed, |g, p| {
        let t = encoders::encode_expression(g, &[2, 5, 3, 2], p, 8)?;
        let f = project(g, t.f_t, 21)?;
        let a = project(g, t.attn_weights, 22)?;
        g.add(f, a)
    }));
    // Composite blocks chain many ops and produce gradients near 1e-8.
    for c in out.iter_mut().filter(|c| !c.name.ends_with("_loss")) {
        c.floor = Floor::Roundoff;
    }
    out
}

/// Reduced-width configuration for whole-model checks.
pub fn tiny_model_config(structure: Structure) -> ModelConfig {
    ModelConfig {
        structure,
        stem_channels: 4,
        d1: 6,
        d2: 5,
        d3: 4,
        d_model: 6,
        d_text: 4,
        embed_dim: 3,
        decoder_channels: 4,
        ..ModelConfig::default()
    }
}

/// Full forward and total loss on a 32x32 image, sampling a few coordinates
/// of every parameter tensor.
pub fn model_case(structure: Structure, seed: u64) -> Case {
    let model = Model::init(tiny_model_config(structure), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xab);
    let image = uniform(&mut rng, &[3, 32, 32], 0.0, 1.0);
    let mask: Vec<f64> = (0..64).map(|i| if (i % 8) > 2 && (i / 8) < 5 { 1.0 } else { 0.0 }).collect();
    let gt = rand_box(&mut rng, 2, 16);
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let cfg = model.cfg.clone();
    Case {
        name: structure.name(),
        inputs,
        build: Box::new(move |ts| {
            let mut p = ParamStore::new();
            for (n, t) in names.iter().zip(ts) {
                p.insert(n, t.clone());
            }
            let m = Model {
                cfg: cfg.clone(),
                params: p,
            };
            let mut g = Graph::new();
            let bound = m.params.bind(&mut g);
            let leaves = names.iter().map(|n| bound.get(n)).collect();
            let out = m.forward(&mut g, &bound, &image, &[2, 6, 3])?;
            let terms = m.losses(
                &mut g,
                &bound,
                &out,
                &Targets {
                    gt_box: gt,
                    gt_mask_coarse: &mask,
                },
            )?;
            Ok(Built {
                graph: g,
                loss: terms.total,
                leaves,
            })
        }),
        coords_per_input: Some(3),
        floor: Floor::Roundoff,
    }
}

/// Runs every case over `seeds` seeds; returns `(name, worst error)` per case.
pub fn gradient_suite(seeds: u64) -> Vec<(String, f64)> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, e: f64| match worst.iter_mut().find(|(n, _)| n == name) {
        Some((_, w)) => *w = w.max(e),
        None => worst.push((name.to_string(), e)),
    };
    for seed in 0..seeds {
        for case in op_cases(seed).into_iter().chain(loss_and_block_cases(seed)) {
            let e = max_rel_error(&case, seed).unwrap_or(f64::INFINITY);
            record(case.name, e);
        }
    }
    for s in Structure::ALL {
        for seed in 0..2 {
            let case = model_case(s, seed);
            let e = max_rel_error(&case, seed).unwrap_or(f64::INFINITY);
            record(&format!("model/{}", case.name), e);
        }
    }
    worst
}

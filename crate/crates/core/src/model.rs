//! Network assembly: which encoders, fusion links and heads exist for each
//! experimental structure, and the per-sample forward pass and losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{self, TextFeature, VisualPyramid, COARSEST_STRIDE};
use crate::error::{Error, Result};
use crate::fusion::{self, AttendedBranch, AttentionParams, MergeParams, MultimodalPyramid};
use crate::heads::{self, AnchorSet, LossWeights, RecOutput, ResOutput};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Network layouts compared in the structure ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Shared encoders, top-down fusion, fine-to-coarse link, separate branches.
    Mcn,
    /// Comprehension only, on the coarse fused map.
    SingleRec,
    /// Segmentation only, on the fine fused map.
    SingleRes,
    /// One shared attended trunk at the fine scale; only the heads differ.
    OnlyHeadDifferent,
    /// Only the encoders are shared; each branch fuses language on its own.
    OnlyBackboneShared,
}

impl Structure {
    pub const ALL: [Structure; 5] = [
        Structure::Mcn,
        Structure::SingleRec,
        Structure::SingleRes,
        Structure::OnlyHeadDifferent,
        Structure::OnlyBackboneShared,
    ];

    pub fn has_rec(self) -> bool {
        self != Structure::SingleRes
    }

    pub fn has_res(self) -> bool {
        self != Structure::SingleRec
    }

    pub fn name(self) -> &'static str {
        match self {
            Structure::Mcn => "mcn",
            Structure::SingleRec => "single_rec",
            Structure::SingleRes => "single_res",
            Structure::OnlyHeadDifferent => "only_head_different",
            Structure::OnlyBackboneShared => "only_backbone_shared",
        }
    }
}

impl std::str::FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Structure::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown structure `{s}`")))
    }
}

/// Turns the `sqrt(1 / fan_in)` bound into He-uniform for leaky ReLU with
/// slope 0.1: `sqrt(6 / (1 + 0.1^2))`.
pub const LEAKY_HE_GAIN: f64 = 2.437_333_391_107_162;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub structure: Structure,
    pub use_cem: bool,
    pub stem_channels: usize,
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    /// Width of every fused multimodal map.
    pub d_model: usize,
    /// Bi-GRU output width (both directions together).
    pub d_text: usize,
    pub embed_dim: usize,
    pub decoder_channels: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub anchors: AnchorSet,
    pub loss_weights: LossWeights,
    /// Multiplier on the `sqrt(1 / fan_in)` uniform weight bound.
    pub init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            structure: Structure::Mcn,
            use_cem: true,
            stem_channels: 32,
            d1: 64,
            d2: 64,
            d3: 64,
            d_model: 64,
            d_text: 64,
            embed_dim: 32,
            decoder_channels: 64,
            vocab_size: crate::synth::Vocabulary::standard().len(),
            max_len: 8,
            anchors: AnchorSet::default(),
            loss_weights: LossWeights::default(),
            init_gain: LEAKY_HE_GAIN,
        }
    }
}

impl ModelConfig {
    /// CEM needs both branches.
    pub fn cem_active(&self) -> bool {
        self.use_cem && self.structure.has_rec() && self.structure.has_res()
    }

    pub fn effective_loss_weights(&self) -> LossWeights {
        LossWeights {
            cem: if self.cem_active() { self.loss_weights.cem } else { 0.0 },
            ..self.loss_weights
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_text % 2 != 0 {
            return Err(Error::Config(format!("d_text must be even, got {}", self.d_text)));
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return Err(Error::Config(format!("init_gain must be positive, got {}", self.init_gain)));
        }
        if self.anchors.is_empty() {
            return Err(Error::Config("at least one anchor prior is required".into()));
        }
        Ok(())
    }
}

/// Per-sample forward pass results.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub visual: VisualPyramid,
    pub text: TextFeature,
    pub pyramid: Option<MultimodalPyramid>,
    pub branch_c: Option<AttendedBranch>,
    pub branch_s: Option<AttendedBranch>,
    pub rec: Option<RecOutput>,
    pub res: Option<ResOutput>,
    /// Coarse (comprehension) and fine (segmentation) grid extents.
    pub coarse_grid: (usize, usize),
    pub fine_grid: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub res: Option<Var>,
    pub rec: Option<Var>,
    pub cem: Option<Var>,
    pub total: Var,
}

/// Ground truth consumed by the losses.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub gt_box: heads::CenterBox,
    /// Coarse mask at the fine grid, row-major, values in {0, 1}.
    pub gt_mask_coarse: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = cfg.d_model;
        encoders::init_visual(&mut p, &cfg, &mut rng);
        encoders::init_text(&mut p, &cfg, &mut rng);

        let s = cfg.structure;
        p.init_weight("fuse.v1", &[d, cfg.d1], cfg.d1, &mut rng);
        p.init_weight("fuse.t1", &[d, cfg.d_text], cfg.d_text, &mut rng);
        match s {
            Structure::Mcn | Structure::SingleRes | Structure::OnlyHeadDifferent => {
                MergeParams::init(&mut p, "fuse.m2", d, cfg.d2, &mut rng);
                MergeParams::init(&mut p, "fuse.m3", d, cfg.d3, &mut rng);
            }
            Structure::OnlyBackboneShared => {
                p.init_weight("fuse.v3", &[d, cfg.d3], cfg.d3, &mut rng);
                p.init_weight("fuse.t3", &[d, cfg.d_text], cfg.d_text, &mut rng);
            }
            Structure::SingleRec => {}
        }
        if s == Structure::Mcn {
            MergeParams::init(&mut p, "fuse.bu2", d, d, &mut rng);
            MergeParams::init(&mut p, "fuse.bu1", d, d, &mut rng);
        }
        match s {
            Structure::OnlyHeadDifferent => AttentionParams::init(&mut p, "att.shared", d, cfg.d_text, &mut rng),
            _ => {
                if s.has_rec() {
                    AttentionParams::init(&mut p, "att.c", d, cfg.d_text, &mut rng);
                }
                if s.has_res() {
                    AttentionParams::init(&mut p, "att.s", d, cfg.d_text, &mut rng);
                }
            }
        }
        if s.has_rec() {
            heads::init_rec_head(&mut p, d, cfg.anchors.len(), &mut rng);
        }
        if s.has_res() {
            heads::init_res_decoder(&mut p, d, cfg.decoder_channels, &mut rng);
        }
        if cfg.cem_active() {
            heads::init_cem(&mut p, d, &mut rng);
        }
        if cfg.init_gain != 1.0 {
            // biases start at zero, so only weights change
            for (_, t) in p.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= cfg.init_gain);
            }
        }
        Ok(Self { cfg, params: p })
    }

    /// Stride of the comprehension grid in pixels.
    pub fn rec_stride(&self) -> usize {
        COARSEST_STRIDE
    }

    /// Stride of the segmentation grid in pixels.
    pub fn res_stride(&self) -> usize {
        COARSEST_STRIDE / 4
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, image: &Tensor, tokens: &[usize]) -> Result<ForwardOutput> {
        let img = g.constant(image.clone());
        let visual = encoders::encode_image(g, img, p)?;
        let text = encoders::encode_expression(g, tokens, p, self.cfg.max_len)?;
        let f_t = text.f_t;
        let coarse = (g.shape(visual.f_v1)[1], g.shape(visual.f_v1)[2]);
        let fine = (g.shape(visual.f_v3)[1], g.shape(visual.f_v3)[2]);

        let f_m1 = fusion::gated_fuse(g, visual.f_v1, f_t, p.get("fuse.v1"), p.get("fuse.t1"))?;
        let s = self.cfg.structure;
        let (mut pyramid, mut branch_c, mut branch_s) = (None, None, None);
        let mut rec_grid_source = None;
        match s {
            Structure::Mcn => {
                let f_m2 = fusion::scale_merge(g, f_m1, visual.f_v2, &MergeParams::bind(p, "fuse.m2"))?;
                let f_m3 = fusion::scale_merge(g, f_m2, visual.f_v3, &MergeParams::bind(p, "fuse.m3"))?;
                let f_m1_prime = fusion::bottom_up_merge(
                    g,
                    f_m3,
                    f_m2,
                    f_m1,
                    &MergeParams::bind(p, "fuse.bu2"),
                    &MergeParams::bind(p, "fuse.bu1"),
                )?;
                let f_m3_prime = f_m3;
                pyramid = Some(MultimodalPyramid {
                    f_m1,
                    f_m2,
                    f_m3,
                    f_m1_prime,
                    f_m3_prime,
                });
                branch_c = Some(fusion::guided_attention(g, f_m1_prime, f_t, &AttentionParams::bind(p, "att.c"))?);
                branch_s = Some(fusion::guided_attention(g, f_m3_prime, f_t, &AttentionParams::bind(p, "att.s"))?);
            }
            Structure::SingleRec => {
                branch_c = Some(fusion::guided_attention(g, f_m1, f_t, &AttentionParams::bind(p, "att.c"))?);
            }
            Structure::SingleRes => {
                let f_m2 = fusion::scale_merge(g, f_m1, visual.f_v2, &MergeParams::bind(p, "fuse.m2"))?;
                let f_m3 = fusion::scale_merge(g, f_m2, visual.f_v3, &MergeParams::bind(p, "fuse.m3"))?;
                branch_s = Some(fusion::guided_attention(g, f_m3, f_t, &AttentionParams::bind(p, "att.s"))?);
            }
            Structure::OnlyHeadDifferent => {
                let f_m2 = fusion::scale_merge(g, f_m1, visual.f_v2, &MergeParams::bind(p, "fuse.m2"))?;
                let f_m3 = fusion::scale_merge(g, f_m2, visual.f_v3, &MergeParams::bind(p, "fuse.m3"))?;
                let shared = fusion::guided_attention(g, f_m3, f_t, &AttentionParams::bind(p, "att.shared"))?;
                let map = fusion::features_to_map(g, &shared, fine.0, fine.1)?;
                let half = g.down2(map)?;
                let quarter = g.down2(half)?;
                rec_grid_source = Some(quarter);
                branch_s = Some(shared);
            }
            Structure::OnlyBackboneShared => {
                let f_m3 = fusion::gated_fuse(g, visual.f_v3, f_t, p.get("fuse.v3"), p.get("fuse.t3"))?;
                branch_c = Some(fusion::guided_attention(g, f_m1, f_t, &AttentionParams::bind(p, "att.c"))?);
                branch_s = Some(fusion::guided_attention(g, f_m3, f_t, &AttentionParams::bind(p, "att.s"))?);
            }
        }

        if let Some(map) = rec_grid_source {
            // Shared trunk: the comprehension head reads the pooled fine map.
            let d = g.shape(map)[0];
            let flat = g.reshape(map, &[d, coarse.0 * coarse.1])?;
            let features = g.transpose(flat)?;
            let attn_src = branch_s.expect("shared trunk").spatial_attn;
            let attn_map = g.reshape(attn_src, &[1, fine.0, fine.1])?;
            let attn_half = g.down2(attn_map)?;
            let attn_q = g.down2(attn_half)?;
            // average pooling divides the mass by 16; restore a distribution
            let spatial_attn = g.affine(attn_q, 16.0, 0.0);
            let spatial_attn = g.reshape(spatial_attn, &[coarse.0, coarse.1])?;
            branch_c = Some(AttendedBranch {
                features,
                spatial_attn,
            });
        }

        let rec = match branch_c {
            Some(b) if s.has_rec() => Some(heads::rec_head(g, &b, coarse, p)?),
            _ => None,
        };
        let res = match branch_s {
            Some(b) if s.has_res() => Some(heads::res_decode(g, &b, fine, p)?),
            _ => None,
        };
        Ok(ForwardOutput {
            visual,
            text,
            pyramid,
            branch_c,
            branch_s,
            rec,
            res,
            coarse_grid: coarse,
            fine_grid: fine,
        })
    }

    pub fn losses(&self, g: &mut Graph, p: &BoundParams, out: &ForwardOutput, t: &Targets<'_>) -> Result<LossTerms> {
        let res = match out.res {
            Some(r) => Some(heads::res_loss(g, r.prob, t.gt_mask_coarse)?),
            None => None,
        };
        let rec = match out.rec {
            Some(r) => {
                let target = heads::build_rec_target(t.gt_box, &self.cfg.anchors, self.rec_stride(), out.coarse_grid)?;
                Some(heads::rec_loss(g, &r, &target)?)
            }
            None => None,
        };
        let cem = match (self.cfg.cem_active(), out.branch_s, out.branch_c) {
            (true, Some(s), Some(c)) => Some(heads::cem_loss_branches(g, &s, &c, p)?),
            _ => None,
        };
        let total = heads::total_loss(g, res, rec, cem, &self.cfg.effective_loss_weights())?;
        Ok(LossTerms { res, rec, cem, total })
    }
}

//! Deterministic referring-expression scenes of flat-colored shapes.
//!
//! Every scene contains a referent and at least one distractor sharing its
//! color or its shape, so the expression has to be read to pick the right
//! object.

mod dataset;
mod expression;

pub use dataset::{emit_dataset, Dataset, Manifest, Sample, SplitManifest};
pub use expression::{describe, generate_expression, resolve, Vocabulary, POSITION_MARGIN, SIZE_MARGIN};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether the point `(x, y)` lies inside a shape of extent `size` centered at `c`.
    pub fn contains(self, c: (f64, f64), size: f64, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - c.0, y - c.1);
        let half = size / 2.0;
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= half * half,
            ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
            // apex at the top, base of width `size` at the bottom
            ShapeKind::Triangle => dy >= -half && dy <= half && dx.abs() <= (dy + half) / 2.0,
        }
    }

    pub fn area(self, size: f64) -> f64 {
        match self {
            ShapeKind::Circle => std::f64::consts::PI * size * size / 4.0,
            ShapeKind::Square => size * size,
            ShapeKind::Triangle => size * size / 2.0,
        }
    }

    pub fn perimeter(self, size: f64) -> f64 {
        match self {
            ShapeKind::Circle => std::f64::consts::PI * size,
            ShapeKind::Square => 4.0 * size,
            ShapeKind::Triangle => size + 2.0 * (size * size + size * size / 4.0).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.15],
            Color::Green => [0.15, 0.8, 0.2],
            Color::Blue => [0.2, 0.3, 0.95],
            Color::Yellow => [0.95, 0.9, 0.15],
        }
    }
}

/// Row-major binary raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    /// Tight box `(x_min, y_min, x_max, y_max)` in pixel edges; `None` when empty.
    pub fn tight_box(&self) -> Option<[f64; 4]> {
        let mut b: Option<[usize; 4]> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    let e = b.get_or_insert([c, r, c, r]);
                    e[0] = e[0].min(c);
                    e[1] = e[1].min(r);
                    e[2] = e[2].max(c);
                    e[3] = e[3].max(r);
                }
            }
        }
        b.map(|[x0, y0, x1, y1]| [x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64])
    }

    /// Block downsampling: a cell is set when at least half of its
    /// `stride x stride` block is set.
    pub fn downsample(&self, stride: usize) -> Self {
        let (h, w) = (self.height / stride, self.width / stride);
        let mut out = Self::empty(h, w);
        let need = stride * stride;
        for r in 0..h {
            for c in 0..w {
                let mut n = 0;
                for y in r * stride..(r + 1) * stride {
                    for x in c * stride..(c + 1) * stride {
                        n += self.get(y, x) as usize;
                    }
                }
                out.bits[r * w + c] = 2 * n >= need;
            }
        }
        out
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Largest allowed pairwise overlap as a fraction of the smaller object.
    pub max_overlap: f64,
    /// Stride of the coarse ground-truth mask.
    pub mask_stride: usize,
    /// Amplitude of uniform per-pixel color noise.
    pub noise: f64,
    pub max_rejections: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 2,
            max_objects: 4,
            min_size: 10,
            max_size: 24,
            max_overlap: 0.2,
            mask_stride: 4,
            noise: 0.03,
            max_rejections: 1000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_objects >= 2
            && self.max_objects <= 5
            && self.min_objects <= self.max_objects
            && self.min_size >= 2
            && self.min_size <= self.max_size
            && self.max_size + 2 < self.image_size
            && self.mask_stride > 0
            && self.image_size % self.mask_stride == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic scene config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Object {
    pub shape: ShapeKind,
    pub color: Color,
    pub center: (f64, f64),
    pub size: f64,
    pub mask: BinaryMask,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    /// `[3 x H x W]` in `[0, 1]`.
    pub image: Tensor,
    pub objects: Vec<Object>,
    pub referent_index: usize,
}

fn rasterize(shape: ShapeKind, center: (f64, f64), size: f64, n: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(n, n);
    for r in 0..n {
        for c in 0..n {
            m.bits[r * n + c] = shape.contains(center, size, c as f64 + 0.5, r as f64 + 0.5);
        }
    }
    m
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> usize {
    a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count()
}

/// Whether another object shares the color or the shape of `objects[i]`.
pub fn has_confusable_distractor(objects: &[Object], i: usize) -> bool {
    objects
        .iter()
        .enumerate()
        .any(|(j, o)| j != i && (o.color == objects[i].color || o.shape == objects[i].shape))
}

fn place_objects(rng: &mut ChaCha8Rng, cfg: &SynthConfig, rejections: &mut usize) -> Result<Vec<Object>> {
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let size_px = cfg.image_size as f64;
    let mut objects: Vec<Object> = Vec::with_capacity(n);
    while objects.len() < n {
        let shape = *ShapeKind::ALL.choose(rng).expect("non-empty");
        let color = *Color::ALL.choose(rng).expect("non-empty");
        let size = rng.gen_range(cfg.min_size..=cfg.max_size) as f64;
        let half = size / 2.0;
        let center = (
            rng.gen_range(half + 1.0..=size_px - half - 1.0),
            rng.gen_range(half + 1.0..=size_px - half - 1.0),
        );
        let mask = rasterize(shape, center, size, cfg.image_size);
        let area = mask.count();
        let fits = area > 0
            && objects.iter().all(|o| {
                let smaller = area.min(o.mask.count()) as f64;
                (overlap(&mask, &o.mask) as f64) < cfg.max_overlap * smaller
            });
        if !fits {
            *rejections += 1;
            if *rejections >= cfg.max_rejections {
                return Err(Error::Generation(format!(
                    "{} rejected placements; config too dense",
                    cfg.max_rejections
                )));
            }
            continue;
        }
        let bbox = mask.tight_box().expect("non-empty mask");
        objects.push(Object {
            shape,
            color,
            center,
            size,
            mask,
            bbox,
        });
    }
    Ok(objects)
}

fn render(objects: &[Object], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let n = cfg.image_size;
    let mut img = Tensor::full(&[3, n, n], 0.15);
    for o in objects {
        let rgb = o.color.rgb();
        for (i, _) in o.mask.bits.iter().enumerate().filter(|(_, &b)| b) {
            for (ch, v) in rgb.iter().enumerate() {
                img.data_mut()[ch * n * n + i] = *v;
            }
        }
    }
    for v in img.data_mut() {
        *v = (*v + rng.gen_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0);
    }
    img
}

/// Builds one scene; identical seeds give bit-identical scenes.
pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejections = 0;
    loop {
        let objects = place_objects(&mut rng, cfg, &mut rejections)?;
        let eligible: Vec<usize> = (0..objects.len())
            .filter(|&i| has_confusable_distractor(&objects, i) && describe(&objects, i).is_some())
            .collect();
        if let Some(&referent_index) = eligible.choose(&mut rng) {
            let image = render(&objects, cfg, &mut rng);
            return Ok(Scene {
                seed,
                image,
                objects,
                referent_index,
            });
        }
        rejections += 1;
        if rejections >= cfg.max_rejections {
            return Err(Error::Generation("no scene with an ambiguous yet describable referent".into()));
        }
    }
}

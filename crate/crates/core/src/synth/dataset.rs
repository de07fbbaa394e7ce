//! Samples, their binary container, and on-disk datasets.
//!
//! Sample container layout (little endian):
//!
//! ```text
//! magic   b"MCNSAMPL"
//! version u32
//! header  u32 len + JSON {seed, expression, tokens, gt_box, height, width, mask_stride}
//! image   f64[3 * height * width], channel-major
//! full    bit-packed mask, ceil(height * width / 8) bytes, LSB first
//! coarse  bit-packed mask at `mask_stride`
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_expression, generate_scene, BinaryMask, SynthConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_MAGIC: &[u8; 8] = b"MCNSAMPL";
pub const SAMPLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Bit set in validation seeds so they never collide with training seeds.
const VAL_SEED_BIT: u64 = 1 << 31;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub expression: String,
    pub tokens: Vec<usize>,
    /// `[3 x H x W]`.
    pub image: Tensor,
    /// `(x_min, y_min, x_max, y_max)` in pixels.
    pub gt_box: [f64; 4],
    pub mask_full: BinaryMask,
    pub mask_coarse: BinaryMask,
}

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    seed: u64,
    expression: String,
    tokens: Vec<usize>,
    gt_box: [f64; 4],
    height: usize,
    width: usize,
    mask_stride: usize,
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "sample container",
        reason: reason.into(),
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

impl Sample {
    /// Generates the scene for `seed` and its referring expression.
    pub fn generate(seed: u64, cfg: &SynthConfig, vocab: &Vocabulary) -> Result<Self> {
        let scene = generate_scene(seed, cfg)?;
        let tokens = generate_expression(&scene, vocab)?;
        let referent = &scene.objects[scene.referent_index];
        Ok(Self {
            seed,
            expression: vocab.decode(&tokens),
            tokens,
            image: scene.image,
            gt_box: referent.bbox,
            mask_coarse: referent.mask.downsample(cfg.mask_stride),
            mask_full: referent.mask.clone(),
        })
    }

    pub fn height(&self) -> usize {
        self.mask_full.height
    }

    pub fn width(&self) -> usize {
        self.mask_full.width
    }

    pub fn mask_stride(&self) -> usize {
        self.mask_full.height / self.mask_coarse.height
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = SampleHeader {
            seed: self.seed,
            expression: self.expression.clone(),
            tokens: self.tokens.clone(),
            gt_box: self.gt_box,
            height: self.height(),
            width: self.width(),
            mask_stride: self.mask_stride(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        w.write_all(SAMPLE_MAGIC)?;
        w.write_u32::<LittleEndian>(SAMPLE_VERSION)?;
        w.write_u32::<LittleEndian>(json.len() as u32)?;
        w.write_all(&json)?;
        for &v in self.image.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_all(&pack_bits(&self.mask_full.bits))?;
        w.write_all(&pack_bits(&self.mask_coarse.bits))?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| format_err(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != SAMPLE_MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != SAMPLE_VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io)?;
        let h: SampleHeader = serde_json::from_slice(&json).map_err(|e| format_err(e.to_string()))?;
        if h.height == 0 || h.width == 0 || h.mask_stride == 0 || h.height % h.mask_stride != 0 || h.width % h.mask_stride != 0 {
            return Err(format_err("inconsistent geometry"));
        }
        let mut image = vec![0.0; 3 * h.height * h.width];
        r.read_f64_into::<LittleEndian>(&mut image).map_err(io)?;
        let mut read_mask = |height: usize, width: usize| -> Result<BinaryMask> {
            let mut bytes = vec![0u8; (height * width).div_ceil(8)];
            r.read_exact(&mut bytes).map_err(io)?;
            Ok(BinaryMask {
                height,
                width,
                bits: unpack_bits(&bytes, height * width),
            })
        };
        let mask_full = read_mask(h.height, h.width)?;
        let mask_coarse = read_mask(h.height / h.mask_stride, h.width / h.mask_stride)?;
        Ok(Self {
            seed: h.seed,
            expression: h.expression,
            tokens: h.tokens,
            image: Tensor::new(vec![3, h.height, h.width], image)?,
            gt_box: h.gt_box,
            mask_full,
            mask_coarse,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub first_seed: u64,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub config: SynthConfig,
    /// SHA-256 of the generator config, seed, split sizes and vocabulary.
    pub config_hash: String,
    pub vocabulary: String,
    pub train: SplitManifest,
    pub val: SplitManifest,
}

fn train_seed(seed: u64, k: usize) -> u64 {
    (seed << 32) | k as u64
}

fn val_seed(seed: u64, k: usize) -> u64 {
    (seed << 32) | VAL_SEED_BIT | k as u64
}

pub fn dataset_hash(cfg: &SynthConfig, seed: u64, n_train: usize, n_val: usize, vocab: &Vocabulary) -> String {
    let doc = serde_json::json!({
        "config": cfg,
        "seed": seed,
        "n_train": n_train,
        "n_val": n_val,
        "vocabulary": vocab.tokens(),
    });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub vocab: Vocabulary,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    /// Generates both splits in memory; the samples equal what
    /// [`emit_dataset`] writes for the same arguments.
    pub fn generate(n_train: usize, n_val: usize, seed: u64, cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        if n_train as u64 >= VAL_SEED_BIT || n_val as u64 >= VAL_SEED_BIT || seed >= 1 << 32 {
            return Err(Error::Config("dataset too large for the seed layout".into()));
        }
        let vocab = Vocabulary::standard();
        let train = (0..n_train)
            .map(|k| Sample::generate(train_seed(seed, k), cfg, &vocab))
            .collect::<Result<Vec<_>>>()?;
        let val = (0..n_val)
            .map(|k| Sample::generate(val_seed(seed, k), cfg, &vocab))
            .collect::<Result<Vec<_>>>()?;
        let names = |prefix: &str, n: usize| (0..n).map(|k| format!("{prefix}/{k:06}.mcns")).collect();
        let manifest = Manifest {
            format_version: SAMPLE_VERSION,
            seed,
            n_train,
            n_val,
            config: cfg.clone(),
            config_hash: dataset_hash(cfg, seed, n_train, n_val, &vocab),
            vocabulary: VOCAB_FILE.into(),
            train: SplitManifest {
                first_seed: train_seed(seed, 0),
                files: names("train", n_train),
            },
            val: SplitManifest {
                first_seed: val_seed(seed, 0),
                files: names("val", n_val),
            },
        };
        Ok(Self {
            manifest,
            vocab,
            train,
            val,
        })
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        for split in ["train", "val"] {
            let d = out_dir.join(split);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let write = |p: PathBuf, bytes: &[u8]| fs::write(&p, bytes).map_err(|e| Error::io(&p, e));
        for (sample, name) in self.train.iter().zip(&self.manifest.train.files) {
            sample.save(&out_dir.join(name))?;
        }
        for (sample, name) in self.val.iter().zip(&self.manifest.val.files) {
            sample.save(&out_dir.join(name))?;
        }
        write(out_dir.join(VOCAB_FILE), self.vocab.to_file_contents().as_bytes())?;
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write(out_dir.join(MANIFEST_FILE), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "dataset manifest",
            reason: e.to_string(),
        })?;
        let vocab = Vocabulary::load(&dir.join(&manifest.vocabulary))?;
        let load_split = |files: &[String]| files.iter().map(|f| Sample::load(&dir.join(f))).collect::<Result<Vec<_>>>();
        let train = load_split(&manifest.train.files)?;
        let val = load_split(&manifest.val.files)?;
        if train.len() != manifest.n_train || val.len() != manifest.n_val {
            return Err(Error::Format {
                what: "dataset manifest",
                reason: "split sizes disagree with file lists".into(),
            });
        }
        Ok(Self {
            manifest,
            vocab,
            train,
            val,
        })
    }
}

/// Writes `n_train + n_val` samples, the vocabulary and a manifest to `out_dir`.
pub fn emit_dataset(n_train: usize, n_val: usize, seed: u64, cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    let ds = Dataset::generate(n_train, n_val, seed, cfg)?;
    ds.save(out_dir)?;
    Ok(ds.manifest)
}

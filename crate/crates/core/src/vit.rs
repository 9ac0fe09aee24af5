//! A small vision transformer whose blocks expose their attention matrices
//! and the gradient of a chosen class score with respect to them.
//!
//! Layout: patch embedding with a learned `[class]` token in row 0 and a
//! learned positional embedding, `depth` pre-norm blocks (multi-head
//! attention, GELU MLP of width `4·dim`), a final layer norm and a linear
//! classifier on the `[class]` token. Two auxiliary heads share the trunk:
//! a per-token segmentation head (`C+1` channels, bilinearly upsampled to the
//! image) and two GAP classifiers used for conventional CAMs.
//!
//! Attention taps: every block adds a zero-valued probe leaf to each head's
//! post-softmax attention before it multiplies the values. The probe's
//! gradient is the derivative of the root with respect to a perturbation
//! shared by all heads, i.e. with respect to the head-averaged attention map
//! while per-head deviations from the mean stay fixed. Passing non-zero
//! offsets through [`ForwardOptions::tap_offsets`] substitutes a perturbed
//! averaged map, which is how the tap gradients are checked numerically.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::interp::bilinear_matrix;
use crate::kv::KeyValues;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
/// Pixels in `[0, 1]` are mapped to `[-1, 1]` before patch embedding.
pub const PIXEL_CENTER: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Foreground classes `C`; class ids are `1..=C`.
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            dim: 32,
            depth: 3,
            heads: 4,
            num_classes: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The 2-block, `d = 8`, 2-head model used for gradient checks.
    pub fn gradcheck_toy(seed: u64) -> Self {
        Self {
            dim: 8,
            depth: 2,
            heads: 2,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::invalid("depth must be at least 1"));
        }
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(Error::invalid("num_classes must be in 1..=254"));
        }
        Ok(())
    }

    /// Side length of the token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("image_size", self.image_size);
        kv.set("patch_size", self.patch_size);
        kv.set("d", self.dim);
        kv.set("L", self.depth);
        kv.set("heads", self.heads);
        kv.set("C", self.num_classes);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let cfg = Self {
            image_size: kv.require("image_size")?,
            patch_size: kv.require("patch_size")?,
            dim: kv.require("d")?,
            depth: kv.require("L")?,
            heads: kv.require("heads")?,
            num_classes: kv.require("C")?,
            seed: kv.require("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named parameters in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Hash of every parameter bit pattern; changes iff any parameter does.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in &self.entries {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamVariant {
    /// `O_CLS` is added to every patch token before pooling.
    Add,
    /// `O_CLS` is dropped; only patch tokens are pooled.
    Ignore,
}

impl std::str::FromStr for CamVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Self::Add),
            "ignore" => Ok(Self::Ignore),
            other => Err(Error::invalid(format!("unknown CAM variant `{other}`"))),
        }
    }
}

impl CamVariant {
    fn prefix(self) -> &'static str {
        match self {
            Self::Add => "cam_add",
            Self::Ignore => "cam_ignore",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitModel {
    cfg: ModelConfig,
    params: ParamStore,
}

fn trunc_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

impl VitModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        Self::with_init_std(cfg, INIT_STD)
    }

    /// Truncated-normal weights (cut at two standard deviations), zero
    /// biases, unit layer-norm gains.
    pub fn with_init_std(cfg: ModelConfig, std: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.dim;
        let c = cfg.num_classes;
        let patch_len = 3 * cfg.patch_size * cfg.patch_size;
        let mut entries = Vec::new();
        let mut weight = |name: String, shape: &[usize], rng: &mut ChaCha8Rng| {
            entries.push((name, trunc_normal(shape, std, rng)));
        };
        weight("cls_token".into(), &[1, d], &mut rng);
        weight("pos_embed".into(), &[cfg.num_patches() + 1, d], &mut rng);
        weight("patch_embed.w".into(), &[patch_len, d], &mut rng);
        for b in 0..cfg.depth {
            for proj in ["wq", "wk", "wv", "proj.w"] {
                weight(format!("blocks.{b}.attn.{proj}"), &[d, d], &mut rng);
            }
            weight(format!("blocks.{b}.mlp.fc1.w"), &[d, 4 * d], &mut rng);
            weight(format!("blocks.{b}.mlp.fc2.w"), &[4 * d, d], &mut rng);
        }
        weight("head.w".into(), &[d, c], &mut rng);
        weight("seg_head.w".into(), &[d, c + 1], &mut rng);
        weight("cam_ignore.w".into(), &[d, c], &mut rng);
        weight("cam_add.w".into(), &[d, c], &mut rng);

        let mut fixed = vec![("patch_embed.b".to_string(), Tensor::zeros(&[d]))];
        for b in 0..cfg.depth {
            for ln in ["ln1", "ln2"] {
                fixed.push((format!("blocks.{b}.{ln}.gamma"), Tensor::ones(&[d])));
                fixed.push((format!("blocks.{b}.{ln}.beta"), Tensor::zeros(&[d])));
            }
            for bias in ["bq", "bk", "bv", "proj.b"] {
                fixed.push((format!("blocks.{b}.attn.{bias}"), Tensor::zeros(&[d])));
            }
            fixed.push((format!("blocks.{b}.mlp.fc1.b"), Tensor::zeros(&[4 * d])));
            fixed.push((format!("blocks.{b}.mlp.fc2.b"), Tensor::zeros(&[d])));
        }
        fixed.push(("norm.gamma".into(), Tensor::ones(&[d])));
        fixed.push(("norm.beta".into(), Tensor::zeros(&[d])));
        fixed.push(("head.b".into(), Tensor::zeros(&[c])));
        fixed.push(("seg_head.b".into(), Tensor::zeros(&[c + 1])));
        fixed.push(("cam_ignore.b".into(), Tensor::zeros(&[c])));
        fixed.push(("cam_add.b".into(), Tensor::zeros(&[c])));
        entries.extend(fixed);
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self {
            cfg,
            params: ParamStore { entries },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    /// Writes `manifest.txt` plus one GTT1 file per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fsutil::create_dir_all(dir)?;
        for (name, t) in self.params.iter() {
            t.write_gtt(&dir.join(format!("{name}.gtt")))?;
        }
        self.cfg.to_kv().save(&dir.join("manifest.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = ModelConfig::from_kv(&KeyValues::load(&dir.join("manifest.txt"))?)?;
        let mut model = Self::new(cfg)?;
        for (name, t) in model.params.iter_mut() {
            let path = dir.join(format!("{name}.gtt"));
            let loaded = Tensor::read_gtt(&path)?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{}: shape {:?}, expected {:?}",
                    path.display(),
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(model)
    }

    /// Checks that `image` is `3×S×S` with `S = image_size`.
    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.cfg.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::Shape {
                op: "patch_embed",
                left: image.shape().to_vec(),
                right: vec![3, s, s],
            });
        }
        Ok(())
    }

    /// Gather index turning a `3×S×S` image into `n × 3p²` patch rows
    /// (patches row-major over the grid, features ordered channel, y, x).
    fn patch_index(&self) -> Arc<[usize]> {
        let (s, p, g) = (self.cfg.image_size, self.cfg.patch_size, self.cfg.grid());
        let mut idx = Vec::with_capacity(3 * s * s);
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            idx.push(ch * s * s + (gy * p + dy) * s + gx * p + dx);
                        }
                    }
                }
            }
        }
        idx.into()
    }

    pub fn forward(&self, image: &Tensor, opts: &ForwardOptions) -> Result<ForwardPass> {
        self.check_image(image)?;
        let cfg = self.cfg;
        let n = cfg.num_patches();
        let tokens_len = n + 1;
        if let Some(offsets) = &opts.tap_offsets {
            if offsets.len() != cfg.depth
                || offsets.iter().any(|o| o.shape() != [tokens_len, tokens_len])
            {
                return Err(Error::invalid(format!(
                    "tap offsets must be {} tensors of shape [{tokens_len}, {tokens_len}]",
                    cfg.depth
                )));
            }
        }

        let mut tape = Tape::new();
        let mut param_vars = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            param_vars.push((name.to_string(), tape.leaf(t.clone(), opts.param_grads)));
        }
        let p = |name: &str| -> Result<Var> {
            param_vars
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
        };

        let image_var = tape.leaf(image.clone(), opts.image_grad);
        let patch_len = 3 * cfg.patch_size * cfg.patch_size;
        let shifted = tape.add_scalar(image_var, -PIXEL_CENTER)?;
        let centered = tape.scale(shifted, 1.0 / PIXEL_CENTER)?;
        let patches = tape.gather(centered, self.patch_index(), &[n, patch_len])?;
        let embedded = tape.linear(patches, p("patch_embed.w")?, p("patch_embed.b")?)?;
        let with_cls = tape.concat_rows(p("cls_token")?, embedded)?;
        let mut x = tape.add(with_cls, p("pos_embed")?)?;

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probes = Vec::with_capacity(cfg.depth);
        let mut attention = Vec::with_capacity(cfg.depth);
        let mut block_in = x;
        for b in 0..cfg.depth {
            let name = |s: &str| format!("blocks.{b}.{s}");
            if b + 1 == cfg.depth {
                // Patch rows of the last block's output never reach the
                // head, so token-level attribution reads this block's input.
                block_in = x;
                tape.retain(block_in)?;
            }
            let h = tape.layer_norm(x, p(&name("ln1.gamma"))?, p(&name("ln1.beta"))?)?;
            let q = tape.linear(h, p(&name("attn.wq"))?, p(&name("attn.bq"))?)?;
            let k = tape.linear(h, p(&name("attn.wk"))?, p(&name("attn.bk"))?)?;
            let v = tape.linear(h, p(&name("attn.wv"))?, p(&name("attn.bv"))?)?;
            let offset = opts
                .tap_offsets
                .as_ref()
                .map(|o| o[b].clone())
                .unwrap_or_else(|| Tensor::zeros(&[tokens_len, tokens_len]));
            let probe = tape.leaf(offset.clone(), true);
            let mut avg = vec![0.0; tokens_len * tokens_len];
            let mut head_outs = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let qh = tape.slice_cols(q, hd * dh, (hd + 1) * dh)?;
                let kh = tape.slice_cols(k, hd * dh, (hd + 1) * dh)?;
                let vh = tape.slice_cols(v, hd * dh, (hd + 1) * dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale)?;
                let attn = tape.softmax_rows(scores)?;
                for (a, &s) in avg.iter_mut().zip(tape.value(attn)?.data()) {
                    *a += s / cfg.heads as f64;
                }
                let perturbed = tape.add(attn, probe)?;
                head_outs.push(tape.matmul(perturbed, vh)?);
            }
            for (a, &o) in avg.iter_mut().zip(offset.data()) {
                *a += o;
            }
            attention.push(Tensor::new(vec![tokens_len, tokens_len], avg)?);
            probes.push(probe);
            let merged = tape.concat_cols(&head_outs)?;
            let attn_out = tape.linear(merged, p(&name("attn.proj.w"))?, p(&name("attn.proj.b"))?)?;
            x = tape.add(x, attn_out)?;
            let h2 = tape.layer_norm(x, p(&name("ln2.gamma"))?, p(&name("ln2.beta"))?)?;
            let m = tape.linear(h2, p(&name("mlp.fc1.w"))?, p(&name("mlp.fc1.b"))?)?;
            let m = tape.gelu(m)?;
            let m = tape.linear(m, p(&name("mlp.fc2.w"))?, p(&name("mlp.fc2.b"))?)?;
            x = tape.add(x, m)?;
        }
        let tokens = tape.layer_norm(x, p("norm.gamma")?, p("norm.beta")?)?;
        let cls = tape.slice_rows(tokens, 0, 1)?;
        let logits = tape.linear(cls, p("head.w")?, p("head.b")?)?;
        let scores = (0..cfg.num_classes)
            .map(|c| tape.gather(logits, Arc::from([c]), &[]))
            .collect::<Result<Vec<_>>>()?;

        let seg_logits = if opts.segmentation {
            let patch_tokens = tape.slice_rows(tokens, 1, tokens_len)?;
            let per_token = tape.linear(patch_tokens, p("seg_head.w")?, p("seg_head.b")?)?;
            let g = cfg.grid();
            let s = cfg.image_size;
            let up = tape.constant(bilinear_matrix(g, g, s, s));
            let pixels = tape.matmul(up, per_token)?;
            let channels = tape.transpose(pixels)?;
            Some(tape.reshape(channels, &[cfg.num_classes + 1, s, s])?)
        } else {
            None
        };

        // GAP classifiers see detached features so they never move the trunk.
        let frozen = tape.detach(tokens)?;
        let frozen_patches = tape.slice_rows(frozen, 1, tokens_len)?;
        let frozen_cls = tape.slice_rows(frozen, 0, 1)?;
        let pooled = tape.mean_rows(frozen_patches)?;
        let cam_ignore_logits = tape.linear(pooled, p("cam_ignore.w")?, p("cam_ignore.b")?)?;
        let pooled_add = tape.add(pooled, frozen_cls)?;
        let cam_add_logits = tape.linear(pooled_add, p("cam_add.w")?, p("cam_add.b")?)?;

        Ok(ForwardPass {
            tape,
            cfg,
            param_vars,
            image: image_var,
            logits,
            scores,
            tokens,
            block_in,
            probes,
            attention,
            seg_logits,
            cam_ignore_logits,
            cam_add_logits,
        })
    }

    /// Forward pass for attribution: taps only, no parameter gradients.
    pub fn forward_with_taps(&self, image: &Tensor) -> Result<ForwardPass> {
        self.forward(image, &ForwardOptions::default())
    }

    /// Conventional CAM on ViT tokens: `θ^c · f(x, y)` for every patch token,
    /// with `O_CLS` added to each token (`Add`) or dropped (`Ignore`).
    /// Returns `C × g × g`, unclamped.
    pub fn cam_head_variants(&self, features: &TokenFeatures, variant: CamVariant) -> Result<Tensor> {
        let w = self.param(&format!("{}.w", variant.prefix()))?;
        let (d, c) = w.dims2()?;
        let patches = features.patches()?;
        let (n, d2) = patches.dims2()?;
        if d != d2 {
            return Err(Error::Shape {
                op: "cam_head_variants",
                left: patches.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let cls = features.cls();
        let g = self.cfg.grid();
        let mut out = vec![0.0; c * n];
        for t in 0..n {
            let row = &patches.data()[t * d..(t + 1) * d];
            for k in 0..c {
                let mut s = 0.0;
                for j in 0..d {
                    let f = match variant {
                        CamVariant::Add => row[j] + cls[j],
                        CamVariant::Ignore => row[j],
                    };
                    s += w.data()[j * c + k] * f;
                }
                out[k * n + t] = s;
            }
        }
        Tensor::new(vec![c, g, g], out)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Record parameters as gradient-requiring leaves.
    pub param_grads: bool,
    /// Record the image as a gradient-requiring leaf.
    pub image_grad: bool,
    /// Build the segmentation head.
    pub segmentation: bool,
    /// Per-block additive substitution of the head-averaged attention.
    pub tap_offsets: Option<Vec<Tensor>>,
}

impl ForwardOptions {
    pub fn training() -> Self {
        Self {
            param_grads: true,
            segmentation: true,
            ..Self::default()
        }
    }
}

/// Per-block attention record.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTap {
    pub block_index: usize,
    /// Head-averaged post-softmax attention, `(n+1)×(n+1)`.
    pub attention: Tensor,
    /// `∂y^c/∂A` for `class_id`, once a class score has been back-propagated.
    pub grad: Option<Tensor>,
    pub class_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
}

impl Prediction {
    /// Raw logit `y^c` of class `class_id` (1-based).
    pub fn score(&self, class_id: usize) -> Result<f64> {
        if class_id == 0 || class_id > self.logits.len() {
            return Err(Error::invalid(format!(
                "class {class_id} out of range 1..={}",
                self.logits.len()
            )));
        }
        Ok(self.logits.data()[class_id - 1])
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }
}

/// Final (layer-normed) tokens `O`, `(n+1)×d`; row 0 is `O_CLS`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub tokens: Tensor,
}

impl TokenFeatures {
    pub fn cls(&self) -> &[f64] {
        let d = self.tokens.shape()[1];
        &self.tokens.data()[..d]
    }

    pub fn patches(&self) -> Result<Tensor> {
        let (m, d) = self.tokens.dims2()?;
        Tensor::new(vec![m - 1, d], self.tokens.data()[d..].to_vec())
    }
}

/// Everything recovered from one class-score backward.
#[derive(Debug, Clone)]
pub struct ClassBackward {
    pub class_id: usize,
    pub taps: Vec<AttentionTap>,
    /// Tokens entering the last block.
    pub block_tokens: Tensor,
    /// `∂y^c` with respect to `block_tokens`.
    pub block_tokens_grad: Tensor,
}

/// A recorded forward pass with handles into its tape.
#[derive(Debug)]
pub struct ForwardPass {
    tape: Tape,
    cfg: ModelConfig,
    param_vars: Vec<(String, Var)>,
    image: Var,
    logits: Var,
    scores: Vec<Var>,
    tokens: Var,
    block_in: Var,
    probes: Vec<Var>,
    attention: Vec<Tensor>,
    seg_logits: Option<Var>,
    cam_ignore_logits: Var,
    cam_add_logits: Var,
}

impl ForwardPass {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn logits_var(&self) -> Var {
        self.logits
    }

    pub fn score_var(&self, class_id: usize) -> Result<Var> {
        if class_id == 0 || class_id > self.scores.len() {
            return Err(Error::invalid(format!(
                "class {class_id} out of range 1..={}",
                self.scores.len()
            )));
        }
        Ok(self.scores[class_id - 1])
    }

    pub fn seg_logits_var(&self) -> Option<Var> {
        self.seg_logits
    }

    pub fn cam_logits_var(&self, variant: CamVariant) -> Var {
        match variant {
            CamVariant::Add => self.cam_add_logits,
            CamVariant::Ignore => self.cam_ignore_logits,
        }
    }

    pub fn image_var(&self) -> Var {
        self.image
    }

    pub fn prediction(&self) -> Result<Prediction> {
        let logits = self.tape.value(self.logits)?.clone();
        let c = logits.len();
        Ok(Prediction {
            logits: logits.reshape(&[c])?,
        })
    }

    pub fn features(&self) -> Result<TokenFeatures> {
        Ok(TokenFeatures {
            tokens: self.tape.value(self.tokens)?.clone(),
        })
    }

    /// Taps ordered by block index, without gradients.
    pub fn taps(&self) -> Vec<AttentionTap> {
        self.attention
            .iter()
            .enumerate()
            .map(|(i, a)| AttentionTap {
                block_index: i,
                attention: a.clone(),
                grad: None,
                class_id: None,
            })
            .collect()
    }

    /// Back-propagates the logit `y^c` and harvests the tap gradients and the
    /// gradient of the tokens entering the last block. Gradients are cleared before and after,
    /// so successive calls are independent.
    pub fn class_backward(&mut self, class_id: usize) -> Result<ClassBackward> {
        let root = self.score_var(class_id)?;
        self.tape.clear_gradients();
        self.tape.backward(root)?;
        let mut taps = self.taps();
        for (tap, &probe) in taps.iter_mut().zip(&self.probes) {
            let g = self
                .tape
                .grad(probe)?
                .ok_or_else(|| Error::MissingGradient(format!("tap {}", tap.block_index)))?;
            tap.grad = Some(g.clone());
            tap.class_id = Some(class_id);
        }
        let block_tokens = self.tape.value(self.block_in)?.clone();
        let block_tokens_grad = self
            .tape
            .grad(self.block_in)?
            .ok_or_else(|| Error::MissingGradient("last block input tokens".into()))?
            .clone();
        self.tape.clear_gradients();
        Ok(ClassBackward {
            class_id,
            taps,
            block_tokens,
            block_tokens_grad,
        })
    }

    /// Taps carrying `∂y^c/∂A^i` for every block.
    pub fn backprop_class_score(&mut self, class_id: usize) -> Result<Vec<AttentionTap>> {
        Ok(self.class_backward(class_id)?.taps)
    }

    /// Backward from an arbitrary scalar built on this pass's tape, then
    /// collect parameter gradients in store order.
    pub fn parameter_gradients(&mut self, root: Var) -> Result<Vec<(String, Tensor)>> {
        self.tape.clear_gradients();
        self.tape.backward(root)?;
        let mut out = Vec::with_capacity(self.param_vars.len());
        for (name, var) in &self.param_vars {
            let g = self
                .tape
                .grad(*var)?
                .ok_or_else(|| Error::MissingGradient(format!("parameter `{name}`")))?;
            out.push((name.clone(), g.clone()));
        }
        self.tape.clear_gradients();
        Ok(out)
    }

    /// Gradient of the stored image leaf after the last backward (requires
    /// `image_grad`).
    pub fn image_gradient(&mut self, root: Var) -> Result<Tensor> {
        self.tape.clear_gradients();
        self.tape.backward(root)?;
        let g = self
            .tape
            .grad(self.image)?
            .ok_or_else(|| Error::MissingGradient("image (forward without image_grad?)".into()))?
            .clone();
        self.tape.clear_gradients();
        Ok(g)
    }
}

/// Reorders a `(C+1)×H×W` tensor read from a tape into per-channel maps.
pub fn channel(t: &Tensor, c: usize) -> Result<Tensor> {
    match t.shape() {
        [k, h, w] if c < *k => {
            let len = h * w;
            Tensor::new(vec![*h, *w], t.data()[c * len..(c + 1) * len].to_vec())
        }
        _ => Err(Error::invalid(format!(
            "channel {c} unavailable in tensor of shape {:?}",
            t.shape()
        ))),
    }
}

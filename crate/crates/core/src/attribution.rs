//! Class-wise attention maps from attention taps.
//!
//! For block `i` and class `c` the map is
//! `ReLU(∇A_cls ⊙ A_cls) ⊙ ReLU(∇A_cls)`, computed on the `[class]` row of
//! the head-averaged attention (columns `1..=n`) and its gradient. Block maps
//! are summed over the depth without intermediate normalization; the
//! aggregate is max-normalized. Element-wise product and matrix-product
//! fusion are kept for distribution comparisons only.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{AttentionTap, CamVariant, ClassBackward, VitModel};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAttentionMap {
    pub class_id: usize,
    /// `h×w`, non-negative.
    pub map: Tensor,
    pub normalized: bool,
}

/// Row 0, columns `1..=n` of a tap's attention and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsAttentionRow {
    pub block_index: usize,
    pub class_id: usize,
    pub a_cls: Vec<f64>,
    pub grad_cls: Vec<f64>,
}

pub fn extract_cls_row(tap: &AttentionTap, class_id: usize) -> Result<ClsAttentionRow> {
    let grad = tap.grad.as_ref().ok_or_else(|| {
        Error::MissingGradient(format!("tap {} has no attention gradient", tap.block_index))
    })?;
    if tap.class_id != Some(class_id) {
        return Err(Error::MissingGradient(format!(
            "tap {} holds the gradient of class {:?}, not {class_id}",
            tap.block_index, tap.class_id
        )));
    }
    let (rows, cols) = tap.attention.dims2()?;
    if rows == 0 || grad.shape() != tap.attention.shape() {
        return Err(Error::Shape {
            op: "extract_cls_row",
            left: tap.attention.shape().to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    Ok(ClsAttentionRow {
        block_index: tap.block_index,
        class_id,
        a_cls: tap.attention.data()[1..cols].to_vec(),
        grad_cls: grad.data()[1..cols].to_vec(),
    })
}

/// Element-wise `ReLU(g·a)·ReLU(g)`.
pub fn getam_values(a: &[f64], g: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(g)
        .map(|(&a, &g)| {
            let coupled = g * a;
            let coupled = if coupled > 0.0 { coupled } else { 0.0 };
            let gate = if g > 0.0 { g } else { 0.0 };
            coupled * gate
        })
        .collect()
}

/// Block-level map reshaped to `h×w`; never normalized.
pub fn getam_block(row: &ClsAttentionRow, h: usize, w: usize) -> Result<ClassAttentionMap> {
    if row.a_cls.len() != h * w || row.grad_cls.len() != h * w {
        return Err(Error::Shape {
            op: "getam_block",
            left: vec![row.a_cls.len(), row.grad_cls.len()],
            right: vec![h, w],
        });
    }
    Ok(ClassAttentionMap {
        class_id: row.class_id,
        map: Tensor::new(vec![h, w], getam_values(&row.a_cls, &row.grad_cls))?,
        normalized: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Sum,
    /// Element-wise product across blocks.
    Ewmul,
    /// Maps multiplied as `h×w` matrices in block order, renormalized after
    /// each product.
    Matmul,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Sum, FusionMode::Ewmul, FusionMode::Matmul];
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "ewmul" => Ok(Self::Ewmul),
            "matmul" => Ok(Self::Matmul),
            other => Err(Error::invalid(format!("unknown fusion mode `{other}`"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Ewmul => "ewmul",
            Self::Matmul => "matmul",
        })
    }
}

/// Divides by the maximum; an all-zero map is left as is.
pub fn max_normalize(t: &Tensor) -> Tensor {
    let mx = t.max();
    if mx > 0.0 {
        t.map(|v| v / mx)
    } else {
        t.clone()
    }
}

fn square_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, w) = a.dims2()?;
    let (h2, w2) = b.dims2()?;
    if h != w || (h, w) != (h2, w2) {
        return Err(Error::Shape {
            op: "matmul fusion",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for k in 0..h {
            let x = a.data()[i * h + k];
            for j in 0..h {
                out[i * h + j] += x * b.data()[k * h + j];
            }
        }
    }
    Tensor::new(vec![h, w], out)
}

pub fn aggregate(blocks: &[ClassAttentionMap], mode: FusionMode) -> Result<ClassAttentionMap> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::invalid("aggregate needs at least one block map"))?;
    if let Some(bad) = blocks.iter().find(|b| b.map.shape() != first.map.shape()) {
        return Err(Error::Shape {
            op: "aggregate",
            left: first.map.shape().to_vec(),
            right: bad.map.shape().to_vec(),
        });
    }
    let mut acc = first.map.clone();
    for b in &blocks[1..] {
        acc = match mode {
            FusionMode::Sum => {
                for (a, &v) in acc.data_mut().iter_mut().zip(b.map.data()) {
                    *a += v;
                }
                acc
            }
            FusionMode::Ewmul => {
                for (a, &v) in acc.data_mut().iter_mut().zip(b.map.data()) {
                    *a *= v;
                }
                acc
            }
            FusionMode::Matmul => max_normalize(&square_matmul(&acc, &b.map)?),
        };
    }
    Ok(ClassAttentionMap {
        class_id: first.class_id,
        map: max_normalize(&acc),
        normalized: true,
    })
}

/// Per-block GETAM maps of every tap (taps must carry class `class_id`).
pub fn getam_block_maps(taps: &[AttentionTap], class_id: usize, grid: usize) -> Result<Vec<ClassAttentionMap>> {
    taps.iter()
        .map(|tap| getam_block(&extract_cls_row(tap, class_id)?, grid, grid))
        .collect()
}

/// Grad-CAM over tokens: channel weights are the patch-averaged gradients,
/// the map is `ReLU(Σ_k w_k·O[t, k])` over patch tokens `t`. `tokens` and
/// `grad` are `(n+1)×d` with the `[class]` token in row 0.
pub fn gradcam_from_tokens(
    tokens: &Tensor,
    grad: &Tensor,
    class_id: usize,
    h: usize,
    w: usize,
) -> Result<ClassAttentionMap> {
    let (m, d) = tokens.dims2()?;
    if grad.shape() != tokens.shape() || m != h * w + 1 {
        return Err(Error::Shape {
            op: "gradcam",
            left: tokens.shape().to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    let n = m - 1;
    let mut weights = vec![0.0; d];
    for t in 1..m {
        for (k, wk) in weights.iter_mut().enumerate() {
            *wk += grad.data()[t * d + k] / n as f64;
        }
    }
    let map = (1..m)
        .map(|t| {
            let s: f64 = (0..d).map(|k| weights[k] * tokens.data()[t * d + k]).sum();
            s.max(0.0)
        })
        .collect();
    Ok(ClassAttentionMap {
        class_id,
        map: Tensor::new(vec![h, w], map)?,
        normalized: false,
    })
}

pub fn gradcam_baseline(backward: &ClassBackward, grid: usize) -> Result<ClassAttentionMap> {
    gradcam_from_tokens(
        &backward.block_tokens,
        &backward.block_tokens_grad,
        backward.class_id,
        grid,
        grid,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Getam,
    GradCam,
    CamAdd,
    CamIgnore,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Getam, Method::GradCam, Method::CamAdd, Method::CamIgnore];
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "getam" => Ok(Self::Getam),
            "gradcam" => Ok(Self::GradCam),
            "cam-add" => Ok(Self::CamAdd),
            "cam-ignore" => Ok(Self::CamIgnore),
            other => Err(Error::invalid(format!("unknown attribution method `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Getam => "getam",
            Self::GradCam => "gradcam",
            Self::CamAdd => "cam-add",
            Self::CamIgnore => "cam-ignore",
        })
    }
}

/// Maps of one image for one class, plus the per-block GETAM maps when the
/// method is GETAM.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub map: ClassAttentionMap,
    pub blocks: Vec<ClassAttentionMap>,
}

/// Standalone attribution of `image` for each class in `class_ids`.
///
/// GETAM and Grad-CAM back-propagate each class score in turn on one forward
/// pass; the CAM variants read the GAP classifiers. Parameters are never
/// touched.
pub fn attribute(
    model: &VitModel,
    image: &Tensor,
    class_ids: &[usize],
    method: Method,
    fusion: FusionMode,
) -> Result<Vec<Attribution>> {
    let grid = model.config().grid();
    let mut pass = model.forward_with_taps(image)?;
    let mut out = Vec::with_capacity(class_ids.len());
    for &c in class_ids {
        let attribution = match method {
            Method::Getam => {
                let taps = pass.backprop_class_score(c)?;
                let blocks = getam_block_maps(&taps, c, grid)?;
                Attribution {
                    map: aggregate(&blocks, fusion)?,
                    blocks,
                }
            }
            Method::GradCam => {
                let bw = pass.class_backward(c)?;
                Attribution {
                    map: gradcam_baseline(&bw, grid)?,
                    blocks: Vec::new(),
                }
            }
            Method::CamAdd | Method::CamIgnore => {
                let variant = if method == Method::CamAdd {
                    CamVariant::Add
                } else {
                    CamVariant::Ignore
                };
                pass.score_var(c)?;
                let cams = model.cam_head_variants(&pass.features()?, variant)?;
                let len = grid * grid;
                let map = cams.data()[(c - 1) * len..c * len]
                    .iter()
                    .map(|&v| v.max(0.0))
                    .collect();
                Attribution {
                    map: ClassAttentionMap {
                        class_id: c,
                        map: Tensor::new(vec![grid, grid], map)?,
                        normalized: false,
                    },
                    blocks: Vec::new(),
                }
            }
        };
        out.push(attribution);
    }
    Ok(out)
}

pub const HISTOGRAM_BINS: usize = 20;
pub const SUPPRESSED_BELOW: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionStats {
    pub mode: FusionMode,
    /// Counts over `[0, 1]` in 20 equal bins (1.0 lands in the last bin).
    pub histogram: Vec<usize>,
    /// Fraction of normalized fused values below 0.1.
    pub suppressed_mass: f64,
    pub mean: f64,
    pub std: f64,
}

pub const MIN_STATS_IMAGES: usize = 10;

/// Distribution of fused, normalized values over an image set; each entry of
/// `per_image_blocks` holds one image's block maps.
pub fn fusion_distribution_stats(
    per_image_blocks: &[Vec<ClassAttentionMap>],
    mode: FusionMode,
) -> Result<FusionStats> {
    if per_image_blocks.len() < MIN_STATS_IMAGES {
        return Err(Error::invalid(format!(
            "fusion statistics need at least {MIN_STATS_IMAGES} images, got {}",
            per_image_blocks.len()
        )));
    }
    let mut values = Vec::new();
    for blocks in per_image_blocks {
        values.extend_from_slice(aggregate(blocks, mode)?.map.data());
    }
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    for &v in &values {
        let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(FusionStats {
        mode,
        histogram,
        suppressed_mass: values.iter().filter(|&&v| v < SUPPRESSED_BELOW).count() as f64 / n,
        mean,
        std: var.sqrt(),
    })
}

/// Seeded stand-in for per-block GETAM maps: each image has one object, and
/// every block responds to a different part of it over a weak positive
/// floor, the way successive blocks highlight different object parts.
pub fn synthetic_block_ensemble(
    seed: u64,
    images: usize,
    depth: usize,
    grid: usize,
) -> Vec<Vec<ClassAttentionMap>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = grid as f64;
    (0..images)
        .map(|_| {
            let cy = rng.random_range(0.3 * g..0.7 * g);
            let cx = rng.random_range(0.3 * g..0.7 * g);
            let radius = rng.random_range(0.2 * g..0.35 * g);
            (0..depth)
                .map(|_| {
                    let py = cy + rng.random_range(-radius..radius);
                    let px = cx + rng.random_range(-radius..radius);
                    let spread = rng.random_range(0.5 * radius..radius);
                    let peak = rng.random_range(0.5..1.5);
                    let map = Tensor::from_fn(&[grid, grid], |i| {
                        let (y, x) = ((i / grid) as f64 + 0.5, (i % grid) as f64 + 0.5);
                        let d2 = (y - py).powi(2) + (x - px).powi(2);
                        peak * (-d2 / (2.0 * spread * spread)).exp() + rng.random_range(0.0..0.05)
                    });
                    ClassAttentionMap {
                        class_id: 1,
                        map,
                        normalized: false,
                    }
                })
                .collect()
        })
        .collect()
}

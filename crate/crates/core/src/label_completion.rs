//! Pseudo labels from class attention maps and a binary saliency map.
//!
//! Pipeline per image: optional PAMR refinement, per-class max
//! normalization, background synthesis, saliency-constrained masking and
//! high-activation mining of non-salient objects.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};

use crate::attribution::{max_normalize, ClassAttentionMap};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::interp::upsample_bilinear;
use crate::tensor::Tensor;

pub const IGNORE_LABEL: u8 = 255;
pub const BACKGROUND_LABEL: u8 = 0;
pub const DEFAULT_ALPHA: f64 = 0.9;
pub const DEFAULT_GAMMA: f64 = 4.0;
pub const DEFAULT_PAMR_ITERS: usize = 10;
pub const PAMR_DILATIONS: [usize; 4] = [1, 2, 4, 8];
/// Saliency PNG values at or above this are salient.
pub const SALIENCY_THRESHOLD: u8 = 128;

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !self.gamma.is_finite() || self.gamma <= 1.0 {
            return Err(Error::invalid(format!("gamma must be > 1, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletionConfig {
    pub mining: MiningConfig,
    pub pamr: bool,
    pub pamr_iters: usize,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            mining: MiningConfig::default(),
            pamr: true,
            pamr_iters: DEFAULT_PAMR_ITERS,
        }
    }
}

/// Binary `h×w` saliency.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    s: Tensor,
}

impl SaliencyMap {
    pub fn new(s: Tensor) -> Result<Self> {
        s.dims2()?;
        if s.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("saliency map must be binary"));
        }
        Ok(Self { s })
    }

    pub fn from_mask(h: usize, w: usize, salient: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            s: Tensor::from_fn(&[h, w], |i| if salient(i / w, i % w) { 1.0 } else { 0.0 }),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.s
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.s.shape()[0], self.s.shape()[1])
    }

    pub fn is_salient(&self, i: usize) -> bool {
        self.s.data()[i] == 1.0
    }

    /// 8-bit grayscale PNG thresholded at 128.
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::from_mask(h, w, |y, x| {
            img.get_pixel(x as u32, y as u32)[0] >= SALIENCY_THRESHOLD
        }))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.dims();
        let bytes: Vec<u8> = self.s.data().iter().map(|&v| if v == 1.0 { 255 } else { 0 }).collect();
        write_gray_png(path, w, h, bytes)
    }
}

pub(crate) fn write_gray_png(path: &Path, w: usize, h: usize, bytes: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::invalid("pixel buffer does not match image size"))?;
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    fsutil::write_atomic(path, buf.get_ref())
}

/// Integer label map over `{0} ∪ {1..C} ∪ {255}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PseudoLabel {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl PseudoLabel {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Foreground classes that occur at least once, ascending.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..IGNORE_LABEL).filter(|&c| seen[c as usize]).collect()
    }

    pub fn count(&self, value: u8) -> usize {
        self.data.iter().filter(|&&v| v == value).count()
    }

    /// Raw values as an 8-bit single-channel PNG.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_gray_png(path, self.width, self.height, self.data.clone())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        Ok(Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.pixels().map(|&Luma([v])| v).collect(),
        })
    }
}

/// Per-pixel count of classes above their high-activation threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictMask {
    pub height: usize,
    pub width: usize,
    pub count: Vec<u8>,
}

/// Foreground maps, background channel and the exponent that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    /// `C×h×w`; channel `c−1` holds class `c`, absent classes are zero.
    pub fg: Tensor,
    /// `h×w`.
    pub bg: Tensor,
    pub gamma: f64,
}

impl ActivationStack {
    /// Channels of `fg` must already be normalized to `[0, 1]`.
    pub fn new(fg: Tensor, gamma: f64) -> Result<Self> {
        let bg = background_channel(&fg, gamma)?;
        Ok(Self { fg, bg, gamma })
    }

    /// Places each map at its class channel after max-normalization.
    pub fn from_maps(maps: &[ClassAttentionMap], num_classes: usize, h: usize, w: usize, gamma: f64) -> Result<Self> {
        let mut fg = Tensor::zeros(&[num_classes, h, w]);
        for m in maps {
            if m.class_id == 0 || m.class_id > num_classes {
                return Err(Error::invalid(format!(
                    "class id {} outside 1..={num_classes}",
                    m.class_id
                )));
            }
            if m.map.shape() != [h, w] {
                return Err(Error::Shape {
                    op: "activation stack",
                    left: m.map.shape().to_vec(),
                    right: vec![h, w],
                });
            }
            let norm = max_normalize(&m.map);
            let off = (m.class_id - 1) * h * w;
            fg.data_mut()[off..off + h * w].copy_from_slice(norm.data());
        }
        Self::new(fg, gamma)
    }

    pub fn num_classes(&self) -> usize {
        self.fg.shape()[0]
    }

    /// `(C+1)×h×w` with the background at channel 0.
    pub fn stacked(&self) -> Tensor {
        let mut data = self.bg.data().to_vec();
        data.extend_from_slice(self.fg.data());
        let s = self.fg.shape();
        Tensor::new(vec![s[0] + 1, s[1], s[2]], data).expect("stack sizes agree")
    }
}

/// `(1 − max_c M_fg^c)^γ` per pixel.
pub fn background_channel(fg: &Tensor, gamma: f64) -> Result<Tensor> {
    if !gamma.is_finite() || gamma <= 1.0 {
        return Err(Error::invalid(format!("gamma must be > 1, got {gamma}")));
    }
    let (c, h, w) = dims3(fg, "background_channel")?;
    let n = h * w;
    Ok(Tensor::from_fn(&[h, w], |i| {
        let mx = (0..c).map(|k| fg.data()[k * n + i]).fold(0.0, f64::max);
        (1.0 - mx).powf(gamma)
    }))
}

/// Salient pixels take the argmax channel (255 when the background wins,
/// ties go to the background); non-salient pixels are background.
pub fn saliency_constrained_masking(stack: &ActivationStack, saliency: &SaliencyMap) -> Result<PseudoLabel> {
    let (c, h, w) = dims3(&stack.fg, "saliency_constrained_masking")?;
    if saliency.dims() != (h, w) || stack.bg.shape() != [h, w] {
        return Err(Error::Shape {
            op: "saliency_constrained_masking",
            left: stack.fg.shape().to_vec(),
            right: saliency.tensor().shape().to_vec(),
        });
    }
    let n = h * w;
    let mut out = PseudoLabel::filled(h, w, BACKGROUND_LABEL);
    for i in 0..n {
        if !saliency.is_salient(i) {
            continue;
        }
        let mut best = stack.bg.data()[i];
        let mut label = IGNORE_LABEL;
        for k in 0..c {
            let v = stack.fg.data()[k * n + i];
            if v > best {
                best = v;
                label = (k + 1) as u8;
            }
        }
        out.data[i] = label;
    }
    Ok(out)
}

/// Linear-interpolation quantile of `values` at level `q ∈ [0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Per-class thresholds `t_c` and the count of classes exceeding them.
pub fn conflict_mask(fg: &Tensor, alpha: f64) -> Result<(Vec<f64>, ConflictMask)> {
    let (c, h, w) = dims3(fg, "conflict_mask")?;
    let n = h * w;
    let thresholds: Vec<f64> = (0..c).map(|k| quantile(&fg.data()[k * n..(k + 1) * n], alpha)).collect();
    let count = (0..n)
        .map(|i| (0..c).filter(|&k| fg.data()[k * n + i] > thresholds[k]).count() as u8)
        .collect();
    Ok((thresholds, ConflictMask { height: h, width: w, count }))
}

/// Relabels non-salient pixels whose activation exceeds the per-class
/// α-quantile: one class wins outright, several mark the pixel unknown.
pub fn high_activation_mining(
    labels: &PseudoLabel,
    fg: &Tensor,
    saliency: &SaliencyMap,
    cfg: &MiningConfig,
) -> Result<PseudoLabel> {
    cfg.validate()?;
    let (c, h, w) = dims3(fg, "high_activation_mining")?;
    if saliency.dims() != (h, w) || (labels.height, labels.width) != (h, w) {
        return Err(Error::Shape {
            op: "high_activation_mining",
            left: fg.shape().to_vec(),
            right: vec![labels.height, labels.width],
        });
    }
    let (thresholds, conflicts) = conflict_mask(fg, cfg.alpha)?;
    let n = h * w;
    let mut out = labels.clone();
    for i in 0..n {
        if saliency.is_salient(i) {
            continue;
        }
        match conflicts.count[i] {
            0 => {}
            1 => {
                let k = (0..c)
                    .find(|&k| fg.data()[k * n + i] > thresholds[k])
                    .expect("count is one");
                out.data[i] = (k + 1) as u8;
            }
            _ => out.data[i] = IGNORE_LABEL,
        }
    }
    Ok(out)
}

/// Neighbor offsets: 8 directions at each dilation.
fn pamr_offsets() -> Vec<(isize, isize)> {
    let mut out = Vec::with_capacity(8 * PAMR_DILATIONS.len());
    for &d in &PAMR_DILATIONS {
        let d = d as isize;
        for (dy, dx) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
            out.push((dy * d, dx * d));
        }
    }
    out
}

/// Row-normalized neighbor affinities from colour similarity, `n × K`.
fn pamr_affinity(image: &Tensor, h: usize, w: usize) -> (Vec<usize>, Vec<f64>) {
    let offsets = pamr_offsets();
    let k = offsets.len();
    let n = h * w;
    let mut nbr = vec![0usize; n * k];
    let mut dist2 = vec![0.0; n * k];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for (j, &(dy, dx)) in offsets.iter().enumerate() {
                let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let nx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let q = ny * w + nx;
                nbr[i * k + j] = q;
                dist2[i * k + j] = (0..3)
                    .map(|ch| {
                        let diff = image.data()[ch * n + i] - image.data()[ch * n + q];
                        diff * diff
                    })
                    .sum();
            }
        }
    }
    let count = dist2.len() as f64;
    let mean = dist2.iter().map(|d| d.sqrt()).sum::<f64>() / count;
    let var = dist2.iter().map(|d| (d.sqrt() - mean).powi(2)).sum::<f64>() / count;
    let sigma = var.sqrt();
    let mut aff = vec![0.0; n * k];
    for i in 0..n {
        let row = &mut aff[i * k..(i + 1) * k];
        if sigma > 1e-12 {
            let logits: Vec<f64> = dist2[i * k..(i + 1) * k]
                .iter()
                .map(|d| -d / (2.0 * sigma * sigma))
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (a, l) in row.iter_mut().zip(&logits) {
                *a = (l - mx).exp();
                z += *a;
            }
            row.iter_mut().for_each(|a| *a /= z);
        } else {
            row.iter_mut().for_each(|a| *a = 1.0 / k as f64);
        }
    }
    (nbr, aff)
}

/// Affinity propagation of class scores over a dilated neighborhood guided
/// by the image colours; channels are max-normalized afterwards.
pub fn pamr_refine(fg: &Tensor, image: &Tensor, iterations: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(fg, "pamr_refine")?;
    if image.shape() != [3, h, w] {
        return Err(Error::Shape {
            op: "pamr_refine",
            left: fg.shape().to_vec(),
            right: image.shape().to_vec(),
        });
    }
    if iterations == 0 {
        return Ok(fg.clone());
    }
    let (nbr, aff) = pamr_affinity(image, h, w);
    let k = nbr.len() / (h * w);
    let n = h * w;
    let mut cur = fg.data().to_vec();
    let mut next = vec![0.0; cur.len()];
    for _ in 0..iterations {
        for ch in 0..c {
            let src = &cur[ch * n..(ch + 1) * n];
            for i in 0..n {
                next[ch * n + i] = (0..k).map(|j| aff[i * k + j] * src[nbr[i * k + j]]).sum();
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    for ch in 0..c {
        let chan = &mut cur[ch * n..(ch + 1) * n];
        let mx = chan.iter().copied().fold(0.0, f64::max);
        if mx > 0.0 {
            chan.iter_mut().for_each(|v| *v /= mx);
        }
    }
    Tensor::new(vec![c, h, w], cur)
}

/// Full completion for one image. `maps` hold the image-level classes;
/// they are resized to the saliency resolution when needed. `image` is
/// `3×h×w` at that resolution.
pub fn complete_labels(
    maps: &[ClassAttentionMap],
    num_classes: usize,
    saliency: &SaliencyMap,
    image: &Tensor,
    cfg: &CompletionConfig,
) -> Result<PseudoLabel> {
    Ok(complete_labels_staged(maps, num_classes, saliency, image, cfg)?.labels)
}

/// Intermediate products of [`complete_labels`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionStages {
    /// Foreground stack after normalization and optional refinement.
    pub stack: ActivationStack,
    /// Labels after saliency-constrained masking, before mining.
    pub pre_mining: PseudoLabel,
    pub labels: PseudoLabel,
}

/// [`complete_labels`] keeping every stage.
pub fn complete_labels_staged(
    maps: &[ClassAttentionMap],
    num_classes: usize,
    saliency: &SaliencyMap,
    image: &Tensor,
    cfg: &CompletionConfig,
) -> Result<CompletionStages> {
    cfg.mining.validate()?;
    let (h, w) = saliency.dims();
    let resized: Vec<ClassAttentionMap> = maps
        .iter()
        .map(|m| {
            Ok(ClassAttentionMap {
                class_id: m.class_id,
                map: upsample_bilinear(&m.map, h, w)?,
                normalized: m.normalized,
            })
        })
        .collect::<Result<_>>()?;
    let mut stack = ActivationStack::from_maps(&resized, num_classes, h, w, cfg.mining.gamma)?;
    if cfg.pamr {
        let refined = pamr_refine(&stack.fg, image, cfg.pamr_iters)?;
        // Refinement re-normalizes; zero channels stay zero.
        stack = ActivationStack::new(refined, cfg.mining.gamma)?;
    }
    let pre_mining = saliency_constrained_masking(&stack, saliency)?;
    let labels = high_activation_mining(&pre_mining, &stack.fg, saliency, &cfg.mining)?;
    Ok(CompletionStages {
        stack,
        pre_mining,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fg(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn background_examples() {
        let b = background_channel(&fg(1, 1, 3, vec![1.0, 0.0, 0.5]), 2.0).unwrap();
        assert_eq!(b.data(), &[0.0, 1.0, 0.25]);
        let b4 = background_channel(&fg(1, 1, 1, vec![0.0]), 4.0).unwrap();
        assert_eq!(b4.data(), &[1.0]);
        assert!(background_channel(&fg(1, 1, 1, vec![0.0]), 1.0).is_err());
        assert!(background_channel(&fg(1, 1, 1, vec![0.0]), 0.5).is_err());
    }

    #[test]
    fn masking_examples() {
        let all_bg = SaliencyMap::from_mask(2, 2, |_, _| false);
        let stack = ActivationStack::new(fg(1, 2, 2, vec![1.0; 4]), 4.0).unwrap();
        assert_eq!(saliency_constrained_masking(&stack, &all_bg).unwrap().data, vec![0; 4]);

        let s = SaliencyMap::from_mask(1, 2, |_, _| true);
        let stack = ActivationStack {
            fg: fg(1, 1, 2, vec![0.9, 0.1]),
            bg: Tensor::new(vec![1, 2], vec![0.1, 0.9]).unwrap(),
            gamma: 4.0,
        };
        assert_eq!(saliency_constrained_masking(&stack, &s).unwrap().data, vec![1, 255]);

        let tie = ActivationStack {
            fg: fg(1, 1, 1, vec![0.5]),
            bg: Tensor::new(vec![1, 1], vec![0.5]).unwrap(),
            gamma: 4.0,
        };
        let s1 = SaliencyMap::from_mask(1, 1, |_, _| true);
        assert_eq!(saliency_constrained_masking(&tie, &s1).unwrap().data, vec![255]);
        let wrong = SaliencyMap::from_mask(3, 3, |_, _| true);
        assert!(saliency_constrained_masking(&tie, &wrong).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[0.0, 10.0], 0.9), 9.0);
        assert_eq!(quantile(&[4.0, 7.0, 1.0], 1.0), 7.0);
        assert_eq!(quantile(&[4.0, 7.0, 1.0], 0.0), 1.0);
    }

    #[test]
    fn mining_examples() {
        // 1×4 image, classes 1..3; pixel 0 salient.
        let s = SaliencyMap::from_mask(1, 4, |_, x| x == 0);
        let p = PseudoLabel {
            height: 1,
            width: 4,
            data: vec![1, 0, 0, 0],
        };
        let cfg = MiningConfig::default();
        let flat = fg(3, 1, 4, vec![0.0; 12]);
        assert_eq!(high_activation_mining(&p, &flat, &s, &cfg).unwrap(), p);

        #[rustfmt::skip]
        let maps = fg(3, 1, 4, vec![
            0.2, 0.0, 1.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
        ]);
        let out = high_activation_mining(&p, &maps, &s, &cfg).unwrap();
        // Pixel 1 is class 2 only; pixel 2 exceeds class 1 and class 3.
        assert_eq!(out.data, vec![1, 2, 255, 0]);

        let off = MiningConfig { alpha: 1.0, ..cfg };
        assert_eq!(high_activation_mining(&p, &maps, &s, &off).unwrap(), p);
        assert!(high_activation_mining(&p, &maps, &s, &MiningConfig { alpha: 0.0, ..cfg }).is_err());
    }

    #[test]
    fn pamr_identity_and_fixed_point() {
        let image = Tensor::full(&[3, 6, 6], 0.4);
        let maps = Tensor::from_fn(&[2, 6, 6], |i| (i % 7) as f64 / 6.0);
        assert_eq!(pamr_refine(&maps, &image, 0).unwrap(), maps);
        let constant = Tensor::full(&[1, 6, 6], 1.0);
        let out = pamr_refine(&constant, &image, 5).unwrap();
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn pamr_snaps_misaligned_map_to_colour_edge() {
        // Left half red, right half blue; the map spills one column past
        // the colour edge between columns 15 and 16.
        let (h, w) = (32, 32);
        let image = Tensor::from_fn(&[3, h, w], |i| {
            let ch = i / (h * w);
            let x = i % w;
            match (ch, x < 16) {
                (0, true) | (2, false) => 0.9,
                _ => 0.1,
            }
        });
        let maps = Tensor::from_fn(&[1, h, w], |i| if i % w <= 16 { 1.0 } else { 0.0 });
        let out = pamr_refine(&maps, &image, 10).unwrap();
        let column_mean = |x: usize| (0..h).map(|y| out.data()[y * w + x]).sum::<f64>() / h as f64;
        let crossing = (0..w).find(|&x| column_mean(x) < 0.5).unwrap();
        assert_eq!(crossing, 16, "{:?}", (0..w).map(column_mean).collect::<Vec<_>>());
    }

    #[test]
    fn empty_class_set_marks_salient_unknown() {
        let s = SaliencyMap::from_mask(4, 4, |y, _| y < 2);
        let image = Tensor::zeros(&[3, 4, 4]);
        let cfg = CompletionConfig::default();
        let p = complete_labels(&[], 2, &s, &image, &cfg).unwrap();
        for i in 0..16 {
            assert_eq!(p.data[i], if i < 8 { 255 } else { 0 });
        }
    }

    #[test]
    fn single_class_on_blob() {
        let s = SaliencyMap::from_mask(4, 4, |y, x| (1..3).contains(&y) && (1..3).contains(&x));
        let map = ClassAttentionMap {
            class_id: 2,
            map: s.tensor().clone(),
            normalized: true,
        };
        let cfg = CompletionConfig {
            pamr: false,
            ..Default::default()
        };
        let p = complete_labels(&[map], 2, &s, &Tensor::zeros(&[3, 4, 4]), &cfg).unwrap();
        for i in 0..16 {
            assert_eq!(p.data[i], if s.is_salient(i) { 2 } else { 0 });
        }
    }

    #[test]
    fn png_roundtrip_keeps_raw_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = PseudoLabel {
            height: 2,
            width: 3,
            data: vec![0, 1, 2, 255, 3, 0],
        };
        let path = dir.path().join("p.png");
        p.write_png(&path).unwrap();
        assert_eq!(PseudoLabel::read_png(&path).unwrap(), p);
        let s = SaliencyMap::from_mask(2, 3, |y, x| y == x);
        s.write_png(&dir.path().join("s.png")).unwrap();
        assert_eq!(SaliencyMap::read_png(&dir.path().join("s.png")).unwrap(), s);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (
            proptest::collection::vec(0.0f64..1.0, 2 * 16),
            proptest::collection::vec(any::<bool>(), 16),
        )
    }

    fn run(maps: &[f64], sal: &[bool], alpha: f64) -> PseudoLabel {
        let fg = fg(2, 4, 4, maps.to_vec());
        let s = SaliencyMap::from_mask(4, 4, |y, x| sal[y * 4 + x]);
        let stack = ActivationStack::new(fg.clone(), 4.0).unwrap();
        let p = saliency_constrained_masking(&stack, &s).unwrap();
        high_activation_mining(&p, &fg, &s, &MiningConfig { alpha, gamma: 4.0 }).unwrap()
    }

    proptest! {
        #[test]
        fn mining_never_touches_salient_pixels((maps, sal) in instance(), alpha in 0.05f64..1.0) {
            let fg = fg(2, 4, 4, maps.clone());
            let s = SaliencyMap::from_mask(4, 4, |y, x| sal[y * 4 + x]);
            let stack = ActivationStack::new(fg.clone(), 4.0).unwrap();
            let p = saliency_constrained_masking(&stack, &s).unwrap();
            let mined = high_activation_mining(&p, &fg, &s, &MiningConfig { alpha, gamma: 4.0 }).unwrap();
            for i in 0..16 {
                if sal[i] { prop_assert_eq!(mined.data[i], p.data[i]); }
                prop_assert!(matches!(mined.data[i], 0 | 1 | 2 | 255));
            }
        }

        #[test]
        fn raising_alpha_never_adds_mined_foreground((maps, sal) in instance(), a in 0.05f64..1.0, b in 0.05f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let low = run(&maps, &sal, lo);
            let high = run(&maps, &sal, hi);
            for i in 0..16 {
                if !sal[i] && matches!(high.data[i], 1 | 2) {
                    prop_assert!(low.data[i] != 0);
                }
            }
        }

        #[test]
        fn background_is_nonincreasing(maps in proptest::collection::vec(0.0f64..1.0, 3), bump in 0.0f64..1.0, gamma in 1.01f64..8.0) {
            let base = background_channel(&fg(3, 1, 1, maps.clone()), gamma).unwrap().data()[0];
            for k in 0..3 {
                let mut up = maps.clone();
                up[k] = (up[k] + bump).min(1.0);
                let raised = background_channel(&fg(3, 1, 1, up), gamma).unwrap().data()[0];
                prop_assert!(raised <= base);
            }
        }
    }
}

//! Synthetic shapes dataset and segmentation metrics.
//!
//! Each class has a fixed geometry and hue: 1 is a red disk, 2 a green
//! square, 3 a blue triangle. Images sit on a textured gray background.
//! Pixel values are quantized to multiples of 1/255 so a dataset read back
//! from PNG is identical to the generated one.

use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::label_completion::{write_gray_png, PseudoLabel, SaliencyMap, IGNORE_LABEL};
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 3;
pub const DEFAULT_IMAGE_SIZE: usize = 32;
/// Chance of a second salient object in an image.
const SECOND_SALIENT_PROB: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    Disk,
    Square,
    Triangle,
}

impl Geometry {
    pub fn for_class(class_id: usize) -> Geometry {
        match class_id {
            1 => Geometry::Disk,
            2 => Geometry::Square,
            _ => Geometry::Triangle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeInstance {
    pub class_id: usize,
    pub geometry: Geometry,
    pub color: [f64; 3],
    /// Center `(y, x)` in pixels.
    pub center: (f64, f64),
    /// Radius, half side or half base.
    pub scale: f64,
    pub salient: bool,
}

impl ShapeInstance {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (cy, cx) = self.center;
        let (dy, dx) = (y - cy, x - cx);
        let s = self.scale;
        match self.geometry {
            Geometry::Disk => dy * dy + dx * dx <= s * s,
            Geometry::Square => dy.abs() <= s && dx.abs() <= s,
            // Apex up, base at cy + s, apex at cy − s.
            Geometry::Triangle => dy >= -s && dy <= s && dx.abs() <= (dy + s) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub shapes: Vec<ShapeInstance>,
    pub texture_seed: u64,
}

impl SceneSpec {
    /// Rasterizes at pixel centers; later shapes overwrite earlier ones.
    pub fn render(&self, id: String) -> Sample {
        let n = self.size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.texture_seed);
        let base: f64 = rng.random_range(0.4..0.6);
        let mut image = vec![0.0; 3 * n * n];
        let mut mask = vec![0u8; n * n];
        let mut sal = vec![false; n * n];
        for i in 0..n * n {
            let noise: f64 = rng.random_range(-0.08..0.08);
            for ch in 0..3 {
                image[ch * n * n + i] = base + noise;
            }
        }
        for shape in &self.shapes {
            for i in 0..n * n {
                let (y, x) = ((i / n) as f64 + 0.5, (i % n) as f64 + 0.5);
                if shape.contains(y, x) {
                    mask[i] = shape.class_id as u8;
                    sal[i] = shape.salient;
                    for ch in 0..3 {
                        image[ch * n * n + i] = shape.color[ch];
                    }
                }
            }
        }
        let image = Tensor::new(vec![3, n, n], image.into_iter().map(quantize).collect())
            .expect("image buffer matches shape");
        let labels = mask.iter().filter(|&&v| v > 0).map(|&v| v as usize).collect();
        Sample {
            id,
            image,
            labels,
            gt_mask: PseudoLabel {
                height: n,
                width: n,
                data: mask,
            },
            saliency: SaliencyMap::from_mask(n, n, |y, x| sal[y * n + x]),
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `3×H×W` in `[0, 1]`.
    pub image: Tensor,
    /// Classes present in `gt_mask`, ascending.
    pub labels: BTreeSet<usize>,
    /// Values in `0..=C`.
    pub gt_mask: PseudoLabel,
    pub saliency: SaliencyMap,
}

impl Sample {
    pub fn label_vec(&self) -> Vec<usize> {
        self.labels.iter().copied().collect()
    }
}

fn class_color(rng: &mut ChaCha8Rng, class_id: usize) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (ch, v) in c.iter_mut().enumerate() {
        *v = if ch + 1 == class_id {
            rng.random_range(0.75..0.95)
        } else {
            rng.random_range(0.05..0.25)
        };
    }
    c
}

fn mask_of(shape: &ShapeInstance, n: usize) -> Vec<bool> {
    (0..n * n)
        .map(|i| shape.contains((i / n) as f64 + 0.5, (i % n) as f64 + 0.5))
        .collect()
}

/// Places a shape of `class_id` that does not touch any existing shape.
fn place(rng: &mut ChaCha8Rng, n: usize, class_id: usize, salient: bool, taken: &[ShapeInstance]) -> Option<ShapeInstance> {
    let size = n as f64;
    let occupied: Vec<Vec<bool>> = taken.iter().map(|s| mask_of(s, n)).collect();
    for attempt in 0..200 {
        let shrink = 1.0 - 0.4 * (attempt as f64 / 200.0);
        let scale = rng.random_range(0.17 * size..0.26 * size) * shrink;
        let lo = scale + 1.0;
        let hi = size - scale - 1.0;
        let shape = ShapeInstance {
            class_id,
            geometry: Geometry::for_class(class_id),
            color: class_color(rng, class_id),
            center: (rng.random_range(lo..hi), rng.random_range(lo..hi)),
            scale,
            salient,
        };
        // One pixel of clearance around the new shape.
        let grown = ShapeInstance {
            scale: scale + 1.5,
            ..shape.clone()
        };
        let m = mask_of(&grown, n);
        if occupied.iter().all(|o| o.iter().zip(&m).all(|(a, b)| !(*a && *b))) {
            return Some(shape);
        }
    }
    None
}

/// `n_images` seeded scenes over `num_classes ≤ 3` classes.
///
/// Image `i` always has a salient object of class `(i mod C) + 1`, which
/// keeps classes balanced; some images get a second salient object. A
/// `nonsalient_fraction` share of images (rounded) additionally contains an
/// object of an unused class whose saliency is withheld.
pub fn generate_dataset(
    n_images: usize,
    num_classes: usize,
    seed: u64,
    nonsalient_fraction: f64,
) -> Result<Vec<Sample>> {
    generate_dataset_sized(n_images, num_classes, seed, nonsalient_fraction, DEFAULT_IMAGE_SIZE)
}

pub fn generate_dataset_sized(
    n_images: usize,
    num_classes: usize,
    seed: u64,
    nonsalient_fraction: f64,
    size: usize,
) -> Result<Vec<Sample>> {
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(Error::invalid(format!(
            "the shapes generator supports 1..={MAX_CLASSES} classes, got {num_classes}"
        )));
    }
    if n_images == 0 {
        return Err(Error::invalid("n_images must be at least 1"));
    }
    if !(0.0..=1.0).contains(&nonsalient_fraction) {
        return Err(Error::invalid(format!(
            "nonsalient_fraction must be in [0, 1], got {nonsalient_fraction}"
        )));
    }
    if size < 16 {
        return Err(Error::invalid(format!("image size {size} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_nonsalient = (nonsalient_fraction * n_images as f64).round() as usize;
    let n_nonsalient = if num_classes < 2 { 0 } else { n_nonsalient };
    let mut order: Vec<usize> = (0..n_images).collect();
    order.shuffle(&mut rng);
    let mut withheld = vec![false; n_images];
    for &i in &order[..n_nonsalient] {
        withheld[i] = true;
    }
    let mut out = Vec::with_capacity(n_images);
    for (i, &hide) in withheld.iter().enumerate() {
        let primary = i % num_classes + 1;
        let mut shapes = vec![place(&mut rng, size, primary, true, &[]).expect("empty canvas fits one shape")];
        let mut unused: Vec<usize> = (1..=num_classes).filter(|&c| c != primary).collect();
        unused.shuffle(&mut rng);
        if hide {
            let c = unused.pop().expect("at least two classes");
            if let Some(s) = place(&mut rng, size, c, false, &shapes) {
                shapes.push(s);
            }
        }
        if !unused.is_empty() && rng.random_bool(SECOND_SALIENT_PROB) {
            let c = unused.pop().expect("non-empty");
            if let Some(s) = place(&mut rng, size, c, true, &shapes) {
                shapes.push(s);
            }
        }
        let scene = SceneSpec {
            size,
            shapes,
            texture_seed: rng.random(),
        };
        out.push(scene.render(format!("img_{i:04}")));
    }
    Ok(out)
}

fn png_bytes_rgb(image: &Tensor, path: &Path) -> Result<Vec<u8>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let n = h * w;
    let mut raw = Vec::with_capacity(3 * n);
    for i in 0..n {
        for ch in 0..3 {
            raw.push((image.data()[ch * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("rgb buffer matches size");
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(buf.into_inner())
}

pub fn write_rgb_png(image: &Tensor, path: &Path) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::Shape {
            op: "write_rgb_png",
            left: image.shape().to_vec(),
            right: vec![3],
        });
    }
    fsutil::write_atomic(path, &png_bytes_rgb(image, path)?)
}

/// `3×H×W` tensor in `[0, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * n + i] = px[ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `images/`, `masks/`, `saliency/` and `labels.csv` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "masks", "saliency"] {
        fsutil::create_dir_all(&dir.join(sub))?;
    }
    let labels_path = dir.join("labels.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "labels"]).map_err(csv_err(&labels_path))?;
    for s in samples {
        write_rgb_png(&s.image, &dir.join("images").join(format!("{}.png", s.id)))?;
        s.gt_mask.write_png(&dir.join("masks").join(format!("{}.png", s.id)))?;
        s.saliency.write_png(&dir.join("saliency").join(format!("{}.png", s.id)))?;
        let joined = s.label_vec().iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        w.write_record([s.id.as_str(), joined.as_str()]).map_err(csv_err(&labels_path))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(&labels_path, e.into_error()))?;
    fsutil::write_atomic(&labels_path, &bytes)
}

/// `(image_id, labels)` rows of `labels.csv` in file order.
pub fn read_labels(dir: &Path) -> Result<Vec<(String, BTreeSet<usize>)>> {
    let path = dir.join("labels.csv");
    let bytes = fsutil::read(&path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(&path))?;
        let id = rec
            .get(0)
            .ok_or_else(|| Error::Format(format!("{}: missing image_id", path.display())))?;
        let labels = rec
            .get(1)
            .unwrap_or("")
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Format(format!("{}: bad class id {s:?}", path.display())))
            })
            .collect::<Result<_>>()?;
        out.push((id.to_string(), labels));
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    read_labels(dir)?
        .into_iter()
        .map(|(id, labels)| {
            let file = format!("{id}.png");
            Ok(Sample {
                image: read_rgb_png(&dir.join("images").join(&file))?,
                gt_mask: PseudoLabel::read_png(&dir.join("masks").join(&file))?,
                saliency: SaliencyMap::read_png(&dir.join("saliency").join(&file))?,
                labels,
                id,
            })
        })
        .collect()
}

/// Confusion counts over classes `0..k`, accumulated across images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    k: usize,
    /// `counts[gt * k + pred]`.
    counts: Vec<u64>,
    /// Pixels predicted 255, per ground-truth class.
    unknown: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
            unknown: vec![0; k],
        }
    }

    pub fn add(&mut self, pred: &PseudoLabel, gt: &PseudoLabel) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Shape {
                op: "confusion",
                left: vec![pred.height, pred.width],
                right: vec![gt.height, gt.width],
            });
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            let g = g as usize;
            if g >= self.k {
                return Err(Error::invalid(format!("ground-truth class {g} outside 0..{}", self.k)));
            }
            if p == IGNORE_LABEL {
                self.unknown[g] += 1;
            } else if (p as usize) < self.k {
                self.counts[g * self.k + p as usize] += 1;
            } else {
                return Err(Error::invalid(format!("predicted class {p} outside 0..{}", self.k)));
            }
        }
        Ok(())
    }

    pub fn intersection(&self, c: usize) -> u64 {
        self.counts[c * self.k + c]
    }

    pub fn gt_total(&self, c: usize) -> u64 {
        (0..self.k).map(|p| self.counts[c * self.k + p]).sum::<u64>() + self.unknown[c]
    }

    pub fn pred_total(&self, c: usize) -> u64 {
        (0..self.k).map(|g| self.counts[g * self.k + c]).sum()
    }

    pub fn unknown_total(&self) -> u64 {
        self.unknown.iter().sum()
    }

    pub fn pixel_total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unknown_total()
    }

    pub fn miou(&self, count_unknown_as_error: bool) -> MiouReport {
        let per_class: Vec<Option<f64>> = (0..self.k)
            .map(|c| {
                let tp = self.intersection(c);
                let fn_known = (0..self.k)
                    .filter(|&p| p != c)
                    .map(|p| self.counts[c * self.k + p])
                    .sum::<u64>();
                let fp = self.pred_total(c) - tp;
                let missed = if count_unknown_as_error { self.unknown[c] } else { 0 };
                let union = tp + fp + fn_known + missed;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
        let defined = !valid.is_empty();
        MiouReport {
            mean: if defined {
                valid.iter().sum::<f64>() / valid.len() as f64
            } else {
                0.0
            },
            per_class,
            defined,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// IoU per class including background; `None` when the class is absent
    /// from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over defined classes; 0 when none is defined.
    pub mean: f64,
    pub defined: bool,
}

/// mIoU over `n_classes` labels (background included). Pixels predicted
/// 255 are ignored unless `count_unknown_as_error`.
pub fn miou(pred: &PseudoLabel, gt: &PseudoLabel, n_classes: usize, count_unknown_as_error: bool) -> Result<MiouReport> {
    let mut c = Confusion::new(n_classes);
    c.add(pred, gt)?;
    Ok(c.miou(count_unknown_as_error))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub miou: MiouReport,
    /// `tp / predicted pixels` per class.
    pub precision: Vec<Option<f64>>,
    /// `tp / ground-truth pixels` per class; unknown pixels count as misses.
    pub recall: Vec<Option<f64>>,
    pub unknown_fraction: f64,
}

impl QualityReport {
    pub fn from_confusion(c: &Confusion, count_unknown_as_error: bool) -> Self {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        Self {
            miou: c.miou(count_unknown_as_error),
            precision: (0..c.k).map(|k| ratio(c.intersection(k), c.pred_total(k))).collect(),
            recall: (0..c.k).map(|k| ratio(c.intersection(k), c.gt_total(k))).collect(),
            unknown_fraction: ratio(c.unknown_total(), c.pixel_total()).unwrap_or(0.0),
        }
    }
}

pub fn pseudo_quality_report(pseudo: &PseudoLabel, gt: &PseudoLabel, n_classes: usize) -> Result<QualityReport> {
    let mut c = Confusion::new(n_classes);
    c.add(pseudo, gt)?;
    Ok(QualityReport::from_confusion(&c, false))
}

pub fn write_mask_png(mask: &PseudoLabel, path: &Path) -> Result<()> {
    write_gray_png(path, mask.width, mask.height, mask.data.clone())
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>, Vec<bool>)> {
        (
            proptest::collection::vec(0u8..3, 16),
            proptest::collection::vec(0u8..3, 16),
            proptest::collection::vec(any::<bool>(), 16),
        )
    }

    proptest! {
        #[test]
        fn unknown_pixels_never_change_intersections((p, g, g2) in pair()) {
            let gt = PseudoLabel { height: 4, width: 4, data: g };
            let pred = PseudoLabel { height: 4, width: 4, data: p };
            let mut a = Confusion::new(3);
            a.add(&pred, &gt).unwrap();
            let mut b = a.clone();
            let extra_gt = PseudoLabel {
                height: 4,
                width: 4,
                data: g2.iter().map(|&v| v as u8 * 2).collect(),
            };
            b.add(&PseudoLabel::filled(4, 4, 255), &extra_gt).unwrap();
            for c in 0..3 {
                prop_assert_eq!(a.intersection(c), b.intersection(c));
            }
            prop_assert_eq!(a.miou(false), b.miou(false));
            for v in b.miou(false).per_class.into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}

//! Two-phase training: classification only, then per-image steps that mint
//! pseudo labels from GETAM and supervise the segmentation head with them.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attribution::{aggregate, getam_block_maps, ClassAttentionMap, FusionMode};
use crate::autodiff::{Tape, Var};
use crate::data::{Confusion, Sample};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::kv::KeyValues;
use crate::label_completion::{complete_labels, CompletionConfig, PseudoLabel, SaliencyMap, IGNORE_LABEL};
use crate::tensor::Tensor;
use crate::vit::{CamVariant, ForwardOptions, ForwardPass, VitModel};

pub const DEFAULT_SAL_WEIGHT: f64 = 0.1;
pub const METRICS_HEADER: &str = "epoch,iter,l_cls,l_seg,l_sal,total,pseudo_miou";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub phase1_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight of the saliency loss; unrelated to the mining quantile.
    pub sal_weight: f64,
    /// Images per phase-1 update.
    pub batch_size: usize,
    pub seed: u64,
    pub completion: CompletionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 10,
            phase1_epochs: 5,
            lr: 0.005,
            momentum: 0.9,
            sal_weight: DEFAULT_SAL_WEIGHT,
            batch_size: 1,
            seed: 0,
            completion: CompletionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phase1_epochs > self.total_epochs {
            return Err(Error::invalid(format!(
                "phase1_epochs ({}) exceeds total epochs ({})",
                self.phase1_epochs, self.total_epochs
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid(format!("learning rate must be finite and ≥ 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.sal_weight.is_nan() || self.sal_weight < 0.0 {
            return Err(Error::invalid(format!("sal_weight must be ≥ 0, got {}", self.sal_weight)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        self.completion.mining.validate()
    }

    /// Overrides fields present in `kv`; other keys are ignored.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(v) = kv.get_parsed("epochs")? {
            self.total_epochs = v;
        }
        if let Some(v) = kv.get_parsed("phase1_epochs")? {
            self.phase1_epochs = v;
        }
        if let Some(v) = kv.get_parsed("lr")? {
            self.lr = v;
        }
        if let Some(v) = kv.get_parsed("momentum")? {
            self.momentum = v;
        }
        if let Some(v) = kv.get_parsed("sal_weight")? {
            self.sal_weight = v;
        }
        if let Some(v) = kv.get_parsed("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = kv.get_parsed("seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.get_parsed("alpha")? {
            self.completion.mining.alpha = v;
        }
        if let Some(v) = kv.get_parsed("gamma")? {
            self.completion.mining.gamma = v;
        }
        if let Some(v) = kv.get_parsed("pamr")? {
            self.completion.pamr = v;
        }
        if let Some(v) = kv.get_parsed("pamr_iters")? {
            self.completion.pamr_iters = v;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("epochs", self.total_epochs);
        kv.set("phase1_epochs", self.phase1_epochs);
        kv.set("lr", self.lr);
        kv.set("momentum", self.momentum);
        kv.set("sal_weight", self.sal_weight);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        kv.set("alpha", self.completion.mining.alpha);
        kv.set("gamma", self.completion.mining.gamma);
        kv.set("pamr", self.completion.pamr);
        kv.set("pamr_iters", self.completion.pamr_iters);
        kv
    }
}

fn label_targets(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let mut t = vec![0.0; num_classes];
    for &c in labels {
        if c == 0 || c > num_classes {
            return Err(Error::invalid(format!("label {c} outside 1..={num_classes}")));
        }
        t[c - 1] = 1.0;
    }
    Ok(t)
}

/// Multi-label BCE over the `1×C` logits, mean over classes.
pub fn l_cls(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let c = tape.shape(logits)?.iter().product();
    let targets = label_targets(labels, c)?;
    tape.bce_with_logits(logits, &targets)
}

/// Softmax cross-entropy over `(C+1)×H×W` logits; 255 pixels are ignored
/// and an all-ignored label gives 0.
pub fn l_seg(tape: &mut Tape, seg_logits: Var, pseudo: &PseudoLabel) -> Result<Var> {
    let labels: Vec<Option<usize>> = pseudo
        .data
        .iter()
        .map(|&v| (v != IGNORE_LABEL).then_some(v as usize))
        .collect();
    if labels.iter().all(Option::is_none) {
        log::warn!("pseudo label is entirely unknown; segmentation loss is 0");
    }
    tape.softmax_cross_entropy(seg_logits, &labels)
}

/// Unweighted BCE between `sigmoid` of the background logit and `1 − S`.
pub fn l_sal(tape: &mut Tape, seg_logits: Var, saliency: &SaliencyMap) -> Result<Var> {
    let shape = tape.shape(seg_logits)?.to_vec();
    let (h, w) = saliency.dims();
    if shape.len() != 3 || shape[1..] != [h, w] {
        return Err(Error::Shape {
            op: "l_sal",
            left: shape,
            right: vec![h, w],
        });
    }
    let flat = tape.reshape(seg_logits, &[shape[0], h * w])?;
    let bg = tape.slice_rows(flat, 0, 1)?;
    let targets: Vec<f64> = saliency.tensor().data().iter().map(|s| 1.0 - s).collect();
    tape.bce_with_logits(bg, &targets)
}

/// Losses of one iteration. `l_sal` is unweighted; `total` applies the
/// weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub epoch: usize,
    pub iter: usize,
    pub l_cls: f64,
    pub l_seg: f64,
    pub l_sal: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_seg, self.l_sal, self.total].iter().all(|v| v.is_finite())
    }
}

/// SGD with heavy-ball momentum over the whole parameter store.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `v ← μ·v + g`, `θ ← θ − lr·v`. Gradients come in store order.
    pub fn step(&mut self, model: &mut VitModel, grads: &[(String, Tensor)]) -> Result<()> {
        let params = model.params_mut();
        if grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|(_, g)| Tensor::zeros(g.shape())).collect();
        }
        for (((name, p), (gname, g)), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if name != gname || p.shape() != g.shape() {
                return Err(Error::invalid(format!("gradient `{gname}` does not match parameter `{name}`")));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// Linear-probe loss of both GAP classifiers; they see detached features,
/// so this only trains their own weights.
fn cam_probe_loss(pass: &mut ForwardPass, labels: &[usize]) -> Result<Var> {
    let ignore = pass.cam_logits_var(CamVariant::Ignore);
    let add = pass.cam_logits_var(CamVariant::Add);
    let tape = pass.tape_mut();
    let a = l_cls(tape, ignore, labels)?;
    let b = l_cls(tape, add, labels)?;
    tape.add(a, b)
}

/// GETAM maps of `classes` from an existing forward pass, one class-score
/// backward each.
pub fn getam_maps_from_pass(pass: &mut ForwardPass, classes: &[usize], fusion: FusionMode) -> Result<Vec<ClassAttentionMap>> {
    let grid = pass.config().grid();
    classes
        .iter()
        .map(|&c| {
            let taps = pass.backprop_class_score(c)?;
            aggregate(&getam_block_maps(&taps, c, grid)?, fusion)
        })
        .collect()
}

/// Everything observable about one double-backward iteration.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub report: LossReport,
    /// `None` when the image has no labels.
    pub pseudo: Option<PseudoLabel>,
    pub maps: Vec<ClassAttentionMap>,
    /// Parameter checksums at entry, after attribution and after the update.
    pub checksum_before: u64,
    pub checksum_after_attribution: u64,
    pub checksum_after: u64,
    /// Number of class-score backwards in the attribution phase.
    pub attribution_backwards: usize,
}

/// One iteration: attribution backwards on a forward pass, label
/// completion, then a fresh forward with `L_cls + L_seg + w·L_sal`, a single
/// backward and a single update.
pub fn double_backward_step(
    model: &mut VitModel,
    opt: &mut Sgd,
    sample: &Sample,
    cfg: &TrainConfig,
) -> Result<StepOutput> {
    let labels = sample.label_vec();
    let checksum_before = model.params().checksum();

    let mut maps = Vec::new();
    let mut pseudo = None;
    if labels.is_empty() {
        log::warn!("{}: empty label set, classification-only step", sample.id);
    } else {
        let mut probe = model.forward_with_taps(&sample.image)?;
        maps = getam_maps_from_pass(&mut probe, &labels, FusionMode::Sum)?;
        pseudo = Some(complete_labels(
            &maps,
            model.config().num_classes,
            &sample.saliency,
            &sample.image,
            &cfg.completion,
        )?);
    }
    let checksum_after_attribution = model.params().checksum();

    let mut pass = model.forward(&sample.image, &ForwardOptions::training())?;
    let logits = pass.logits_var();
    let seg = pass
        .seg_logits_var()
        .ok_or_else(|| Error::invalid("training forward without segmentation head"))?;
    let probe_loss = cam_probe_loss(&mut pass, &labels)?;
    let tape = pass.tape_mut();
    let cls = l_cls(tape, logits, &labels)?;
    let (seg_loss, sal_loss) = match &pseudo {
        Some(p) => (l_seg(tape, seg, p)?, l_sal(tape, seg, &sample.saliency)?),
        None => {
            let zero = tape.constant(Tensor::scalar(0.0));
            (zero, zero)
        }
    };
    let weighted_sal = tape.scale(sal_loss, cfg.sal_weight)?;
    let total = tape.add(cls, seg_loss)?;
    let total = tape.add(total, weighted_sal)?;
    let root = tape.add(total, probe_loss)?;
    let value = |tape: &Tape, v: Var| -> Result<f64> { Ok(tape.value(v)?.data()[0]) };
    let report = LossReport {
        epoch: 0,
        iter: 0,
        l_cls: value(tape, cls)?,
        l_seg: value(tape, seg_loss)?,
        l_sal: value(tape, sal_loss)?,
        total: value(tape, total)?,
    };
    let grads = pass.parameter_gradients(root)?;
    opt.step(model, &grads)?;
    Ok(StepOutput {
        report,
        pseudo,
        attribution_backwards: maps.len(),
        maps,
        checksum_before,
        checksum_after_attribution,
        checksum_after: model.params().checksum(),
    })
}

/// Classification-only update averaged over `batch`.
pub fn classification_step(model: &mut VitModel, opt: &mut Sgd, batch: &[&Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let opts = ForwardOptions {
        param_grads: true,
        ..Default::default()
    };
    let mut summed: Option<Vec<(String, Tensor)>> = None;
    let mut loss_sum = 0.0;
    for sample in batch {
        let labels = sample.label_vec();
        let mut pass = model.forward(&sample.image, &opts)?;
        let logits = pass.logits_var();
        let probe = cam_probe_loss(&mut pass, &labels)?;
        let tape = pass.tape_mut();
        let cls = l_cls(tape, logits, &labels)?;
        loss_sum += tape.value(cls)?.data()[0];
        let root = tape.add(cls, probe)?;
        let grads = pass.parameter_gradients(root)?;
        match &mut summed {
            None => summed = Some(grads),
            Some(acc) => {
                for ((_, a), (_, g)) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = summed.expect("non-empty batch");
    for (_, g) in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    opt.step(model, &grads)?;
    Ok(loss_sum * scale)
}

/// Per-epoch means written to the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Cumulative update count at the end of the epoch.
    pub iter: usize,
    pub l_cls: f64,
    pub l_seg: f64,
    pub l_sal: f64,
    pub total: f64,
    /// Dataset-level mIoU of this epoch's pseudo labels; phase 2 only.
    pub pseudo_miou: Option<f64>,
}

impl EpochSummary {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.iter,
            self.l_cls,
            self.l_seg,
            self.l_sal,
            self.total,
            self.pseudo_miou.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

pub fn render_metrics_csv(epochs: &[EpochSummary]) -> String {
    let mut out = String::new();
    writeln!(out, "{METRICS_HEADER}").expect("string write");
    for e in epochs {
        writeln!(out, "{}", e.csv_row()).expect("string write");
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub epochs: Vec<EpochSummary>,
    pub iterations: Vec<LossReport>,
    /// How many pseudo labels were produced.
    pub pseudo_labels: usize,
}

/// Runs the schedule in place on `model`. Epochs are 1-based in reports.
pub fn run_training(model: &mut VitModel, dataset: &[Sample], cfg: &TrainConfig) -> Result<TrainingRun> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut run = TrainingRun {
        epochs: Vec::new(),
        iterations: Vec::new(),
        pseudo_labels: 0,
    };
    let k = model.config().num_classes + 1;
    let mut iter = 0;
    for epoch in 1..=cfg.total_epochs {
        order.shuffle(&mut rng);
        let mut reports = Vec::new();
        let mut confusion = None;
        if epoch <= cfg.phase1_epochs {
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
                let l = classification_step(model, &mut opt, &batch)?;
                iter += 1;
                reports.push(LossReport {
                    epoch,
                    iter,
                    l_cls: l,
                    l_seg: 0.0,
                    l_sal: 0.0,
                    total: l,
                });
            }
        } else {
            let conf = confusion.get_or_insert_with(|| Confusion::new(k));
            for &i in &order {
                let out = double_backward_step(model, &mut opt, &dataset[i], cfg)?;
                iter += 1;
                if let Some(p) = &out.pseudo {
                    conf.add(p, &dataset[i].gt_mask)?;
                    run.pseudo_labels += 1;
                }
                reports.push(LossReport {
                    epoch,
                    iter,
                    ..out.report
                });
            }
        }
        let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
        let summary = EpochSummary {
            epoch,
            iter,
            l_cls: mean(|r| r.l_cls),
            l_seg: mean(|r| r.l_seg),
            l_sal: mean(|r| r.l_sal),
            total: mean(|r| r.total),
            pseudo_miou: confusion.map(|c| c.miou(false).mean),
        };
        log::info!("{}", summary.csv_row());
        if !summary.total.is_finite() {
            return Err(Error::invalid(format!("loss diverged in epoch {epoch}")));
        }
        run.epochs.push(summary);
        run.iterations.extend(reports);
    }
    Ok(run)
}

/// Writes `metrics.csv` and the checkpoint under `out`.
pub fn save_run(model: &VitModel, run: &TrainingRun, out: &Path) -> Result<()> {
    fsutil::create_dir_all(out)?;
    fsutil::write_atomic(&out.join("metrics.csv"), render_metrics_csv(&run.epochs).as_bytes())?;
    model.save(&out.join("checkpoint"))
}

/// Exact-match and per-decision accuracy of `logit > 0` predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultilabelAccuracy {
    pub exact_match: f64,
    pub per_label: f64,
}

pub fn multilabel_accuracy(model: &VitModel, samples: &[Sample]) -> Result<MultilabelAccuracy> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let c = model.config().num_classes;
    let mut exact = 0usize;
    let mut correct = 0usize;
    for s in samples {
        let pred = model.forward_with_taps(&s.image)?.prediction()?;
        let mut all = true;
        for class in 1..=c {
            let ok = (pred.score(class)? > 0.0) == s.labels.contains(&class);
            correct += ok as usize;
            all &= ok;
        }
        exact += all as usize;
    }
    Ok(MultilabelAccuracy {
        exact_match: exact as f64 / samples.len() as f64,
        per_label: correct as f64 / (samples.len() * c) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::gradcheck::compare_with_central_differences;
    use crate::vit::ModelConfig;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).unwrap().data()[0]
    }

    #[test]
    fn l_cls_examples() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 3]), true);
        let l = l_cls(&mut tape, z, &[2]).unwrap();
        assert!((scalar(&tape, l) - std::f64::consts::LN_2).abs() < 1e-15);
        let sat = tape.leaf(Tensor::new(vec![1, 3], vec![30.0, -30.0, 30.0]).unwrap(), true);
        let l = l_cls(&mut tape, sat, &[1, 3]).unwrap();
        assert!(scalar(&tape, l) < 1e-12);
        assert!(l_cls(&mut tape, sat, &[4]).is_err());
    }

    #[test]
    fn l_cls_gradient_matches_differences() {
        let x = Tensor::new(vec![1, 3], vec![0.3, -1.2, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let l = l_cls(&mut tape, v, &[1, 3]).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(v).unwrap().unwrap().clone();
        let r = compare_with_central_differences(g.data(), &x, 1e-5, None, |t| {
            let mut tape = Tape::new();
            let v = tape.leaf(t.clone(), false);
            let l = l_cls(&mut tape, v, &[1, 3])?;
            Ok(scalar(&tape, l))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn l_seg_examples() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[4, 2, 2]), true);
        let all_unknown = PseudoLabel::filled(2, 2, 255);
        let l = l_seg(&mut tape, logits, &all_unknown).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
        let some = PseudoLabel {
            height: 2,
            width: 2,
            data: vec![0, 255, 3, 1],
        };
        let l = l_seg(&mut tape, logits, &some).unwrap();
        assert!((scalar(&tape, l) - 4f64.ln()).abs() < 1e-15);
        let one_hot = Tensor::from_fn(&[4, 2, 2], |i| {
            let (ch, p) = (i / 4, i % 4);
            if some.data[p] as usize == ch { 30.0 } else { -30.0 }
        });
        let perfect = tape.leaf(one_hot, true);
        let l = l_seg(&mut tape, perfect, &some).unwrap();
        assert!(scalar(&tape, l) < 1e-20);
    }

    #[test]
    fn l_sal_examples_and_gradient() {
        let s = SaliencyMap::from_mask(2, 2, |_, _| true);
        let mut tape = Tape::new();
        let neg = tape.leaf(Tensor::full(&[3, 2, 2], -30.0), true);
        let l = l_sal(&mut tape, neg, &s).unwrap();
        assert!(scalar(&tape, l) < 1e-12);
        let zero = tape.leaf(Tensor::zeros(&[3, 2, 2]), true);
        let l = l_sal(&mut tape, zero, &s).unwrap();
        let w = tape.scale(l, DEFAULT_SAL_WEIGHT).unwrap();
        assert!((scalar(&tape, w) - DEFAULT_SAL_WEIGHT * std::f64::consts::LN_2).abs() < 1e-15);

        let mixed = SaliencyMap::from_mask(2, 2, |y, x| y == x);
        let x = Tensor::from_fn(&[3, 2, 2], |i| (i as f64 * 0.37).sin());
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let l = l_sal(&mut tape, v, &mixed).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(v).unwrap().unwrap().clone();
        assert!(g.data()[4..].iter().all(|&v| v == 0.0));
        let r = compare_with_central_differences(g.data(), &x, 1e-5, None, |t| {
            let mut tape = Tape::new();
            let v = tape.leaf(t.clone(), false);
            let l = l_sal(&mut tape, v, &mixed)?;
            Ok(scalar(&tape, l))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn sgd_applies_momentum() {
        let mut model = VitModel::new(ModelConfig::gradcheck_toy(0)).unwrap();
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        let grads: Vec<(String, Tensor)> = model
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::ones(t.shape())))
            .collect();
        let first = model.params().get(&names[0]).unwrap().data()[0];
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut model, &grads).unwrap();
        opt.step(&mut model, &grads).unwrap();
        let after = model.params().get(&names[0]).unwrap().data()[0];
        // Steps of 0.1·1 and 0.1·1.9.
        assert!((first - after - 0.29).abs() < 1e-12);
    }

    fn toy() -> (VitModel, Vec<Sample>) {
        let cfg = ModelConfig {
            dim: 16,
            depth: 2,
            heads: 2,
            ..ModelConfig::default()
        };
        (VitModel::new(cfg).unwrap(), generate_dataset(4, 3, 1, 0.5).unwrap())
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (mut model, data) = toy();
        let cfg = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        let mut opt = Sgd::new(0.0, 0.9);
        let out = double_backward_step(&mut model, &mut opt, &data[0], &cfg).unwrap();
        assert_eq!(out.checksum_before, out.checksum_after);
        assert!(out.report.is_finite());
        assert!(out.report.l_cls > 0.0);
    }

    #[test]
    fn step_updates_once_and_counts_backwards() {
        let (mut model, data) = toy();
        let cfg = TrainConfig::default();
        let mut opt = Sgd::new(cfg.lr, cfg.momentum);
        for s in &data {
            let out = double_backward_step(&mut model, &mut opt, s, &cfg).unwrap();
            assert_eq!(out.checksum_before, out.checksum_after_attribution);
            assert_ne!(out.checksum_after, out.checksum_before);
            assert_eq!(out.attribution_backwards, s.labels.len());
            let r = out.report;
            assert!((r.total - (r.l_cls + r.l_seg + cfg.sal_weight * r.l_sal)).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_labels_fall_back_to_classification() {
        let (mut model, data) = toy();
        let mut s = data[0].clone();
        s.labels.clear();
        let cfg = TrainConfig::default();
        let mut opt = Sgd::new(cfg.lr, cfg.momentum);
        let out = double_backward_step(&mut model, &mut opt, &s, &cfg).unwrap();
        assert!(out.pseudo.is_none());
        assert_eq!(out.report.l_seg, 0.0);
        assert_eq!(out.attribution_backwards, 0);
    }

    #[test]
    fn phase_one_only_never_makes_pseudo_labels() {
        let (mut model, data) = toy();
        let cfg = TrainConfig {
            total_epochs: 2,
            phase1_epochs: 2,
            ..Default::default()
        };
        let run = run_training(&mut model, &data, &cfg).unwrap();
        assert_eq!(run.pseudo_labels, 0);
        assert!(run.epochs.iter().all(|e| e.pseudo_miou.is_none()));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let cfg = TrainConfig {
            total_epochs: 2,
            phase1_epochs: 1,
            ..Default::default()
        };
        let csv = || {
            let (mut model, data) = toy();
            render_metrics_csv(&run_training(&mut model, &data, &cfg).unwrap().epochs)
        };
        let a = csv();
        assert_eq!(a, csv());
        assert!(a.starts_with(METRICS_HEADER));
        assert_eq!(a.lines().count(), 3);
    }

    #[test]
    fn config_roundtrips_and_validates() {
        let cfg = TrainConfig {
            lr: 0.02,
            total_epochs: 7,
            ..Default::default()
        };
        let mut back = TrainConfig::default();
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        let bad = TrainConfig {
            phase1_epochs: 9,
            total_epochs: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor for the relative error.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares `analytic` against central differences of `f` around `x`,
/// visiting only `coords` (all coordinates when `None`).
pub fn compare_with_central_differences(
    analytic: &[f64],
    x: &Tensor,
    eps: f64,
    coords: Option<&[usize]>,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<GradCheckReport> {
    if analytic.len() != x.len() {
        return Err(Error::Shape {
            op: "gradcheck",
            left: vec![analytic.len()],
            right: x.shape().to_vec(),
        });
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Gradient check of a scalar function built on a fresh tape from a single
/// leaf input.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let root = f(&mut tape, leaf)?;
    tape.backward(root)?;
    let analytic = tape
        .grad(leaf)?
        .ok_or_else(|| Error::MissingGradient("input leaf".into()))?
        .data()
        .to_vec();
    compare_with_central_differences(&analytic, x, eps, None, |probe| {
        let mut t = Tape::new();
        let leaf = t.constant(probe.clone());
        let root = f(&mut t, leaf)?;
        Ok(t.value(root)?.data()[0])
    })
}

/// Outcome of one named check in [`run_model_suite`].
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

/// Tolerance for checks through the composed model.
pub const MODEL_TOL: f64 = 1e-4;

/// Checks `∂y^c` of the gradcheck toy model with respect to the input
/// pixels, every parameter tensor, and every block's attention tap (via tap
/// substitution), cycling the class through `1..=C`.
pub fn run_model_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    use crate::vit::{ForwardOptions, ModelConfig, VitModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let cfg = ModelConfig::gradcheck_toy(seed);
    let model = VitModel::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let s = cfg.image_size;
    let image = Tensor::from_fn(&[3, s, s], |_| rng.random_range(0.0..1.0));
    let classes = cfg.num_classes;
    let mut outcomes = Vec::new();

    // input pixels
    let class_id = 1;
    let opts = ForwardOptions {
        image_grad: true,
        ..Default::default()
    };
    let mut pass = model.forward(&image, &opts)?;
    let root = pass.score_var(class_id)?;
    let analytic = pass.image_gradient(root)?;
    let report = compare_with_central_differences(analytic.data(), &image, DEFAULT_EPS, None, |x| {
        model.forward_with_taps(x)?.prediction()?.score(class_id)
    })?;
    outcomes.push(CheckOutcome {
        name: format!("d y^{class_id} / d image"),
        report,
        tolerance: MODEL_TOL,
    });

    // parameters
    let opts = ForwardOptions {
        param_grads: true,
        ..Default::default()
    };
    let mut pass = model.forward(&image, &opts)?;
    let mut grads = Vec::new();
    for c in 1..=classes {
        let root = pass.score_var(c)?;
        grads.push(pass.parameter_gradients(root)?);
    }
    for (k, (name, value)) in model.params().iter().enumerate() {
        let class_id = 1 + k % classes;
        let analytic = &grads[class_id - 1][k].1;
        let mut probe_model = model.clone();
        let report = compare_with_central_differences(analytic.data(), value, DEFAULT_EPS, None, |x| {
            *probe_model.params_mut().get_mut(name).expect("parameter exists") = x.clone();
            probe_model.forward_with_taps(&image)?.prediction()?.score(class_id)
        })?;
        outcomes.push(CheckOutcome {
            name: format!("d y^{class_id} / d {name}"),
            report,
            tolerance: MODEL_TOL,
        });
    }

    // attention taps, holding everything else fixed by substitution
    let tokens = cfg.num_patches() + 1;
    let zero = Tensor::zeros(&[tokens, tokens]);
    let mut pass = model.forward_with_taps(&image)?;
    for c in 1..=classes {
        let taps = pass.backprop_class_score(c)?;
        for tap in taps {
            let block = tap.block_index;
            let analytic = tap
                .grad
                .ok_or_else(|| Error::MissingGradient(format!("tap {block}")))?;
            let report = compare_with_central_differences(analytic.data(), &zero, DEFAULT_EPS, None, |x| {
                let mut offsets = vec![zero.clone(); cfg.depth];
                offsets[block] = x.clone();
                let opts = ForwardOptions {
                    tap_offsets: Some(offsets),
                    ..Default::default()
                };
                model.forward(&image, &opts)?.prediction()?.score(c)
            })?;
            outcomes.push(CheckOutcome {
                name: format!("d y^{c} / d A^{block}"),
                report,
                tolerance: MODEL_TOL,
            });
        }
    }
    Ok(outcomes)
}

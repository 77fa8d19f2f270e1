//! Pure evaluations of the metric-learning hinge loss and the
//! teacher/student distillation loss, plus a central-difference gradient
//! checker. No training loop lives here.

use std::collections::BTreeMap;

use crate::encoder::softmax;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Two embeddings and whether they share an intent label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub same_label: bool,
}

fn cos(u: &[f64], v: &[f64]) -> Result<f64> {
    let d = norm(u) * norm(v);
    if d == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot(u, v) / d)
}

fn check_margin(margin: f64) -> Result<()> {
    if margin > 0.0 && margin < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("margin must be in (0,1), got {margin}")))
    }
}

/// Hinge argument of one pair: `1 - s` for same-label pairs, `s - m` for
/// different-label pairs. The pair contributes `max(arg, 0)`.
fn hinge_arg(s: f64, same: bool, margin: f64) -> f64 {
    if same {
        1.0 - s
    } else {
        s - margin
    }
}

pub fn metric_loss(pairs: &[LabeledPair], margin: f64) -> Result<f64> {
    check_margin(margin)?;
    let mut total = 0.0;
    for p in pairs {
        if p.u.len() != p.v.len() {
            return Err(Error::InvalidInput("pair embeddings differ in dimension".into()));
        }
        total += hinge_arg(cos(&p.u, &p.v)?, p.same_label, margin).max(0.0);
    }
    Ok(total)
}

fn check_label_sets(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<()> {
    if a.is_empty() || !a.keys().eq(b.keys()) {
        return Err(Error::InvalidInput("teacher and student label sets differ".into()));
    }
    Ok(())
}

/// Teacher target distribution `softmax(score / tau_c)`, in label order.
pub fn teacher_distribution(teacher: &BTreeMap<String, f64>, tau_c: f64) -> Result<Vec<f64>> {
    if !(tau_c > 0.0 && tau_c.is_finite()) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau_c}")));
    }
    let scaled: Vec<f64> = teacher.values().map(|s| s / tau_c).collect();
    Ok(softmax(&scaled))
}

/// Cross-entropy of `softmax(student)` against the tempered teacher.
pub fn distill_loss(
    teacher_logodds: &BTreeMap<String, f64>,
    tau_c: f64,
    student_logits: &BTreeMap<String, f64>,
) -> Result<f64> {
    check_label_sets(teacher_logodds, student_logits)?;
    let p = teacher_distribution(teacher_logodds, tau_c)?;
    let z: Vec<f64> = student_logits.values().copied().collect();
    Ok(cross_entropy(&p, &z))
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

fn cross_entropy(p: &[f64], logits: &[f64]) -> f64 {
    -p.iter().zip(log_softmax(logits)).map(|(pi, lq)| pi * lq).sum::<f64>()
}

/// A loss over a flat parameter vector with an analytic gradient.
pub trait DifferentiableLoss {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Arguments of every hinge in the loss. The loss is smooth around `x`
    /// only while none of them changes sign.
    fn hinge_args(&self, _x: &[f64]) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }
}

/// Metric loss as a function of the concatenated pair embeddings
/// `[u_1, v_1, u_2, v_2, ...]`.
#[derive(Debug, Clone)]
pub struct MetricObjective {
    pub dim: usize,
    pub same_label: Vec<bool>,
    pub margin: f64,
}

impl MetricObjective {
    pub fn flatten(pairs: &[LabeledPair]) -> Vec<f64> {
        pairs
            .iter()
            .flat_map(|p| p.u.iter().chain(p.v.iter()).copied())
            .collect()
    }

    fn unflatten(&self, x: &[f64]) -> Result<Vec<LabeledPair>> {
        let stride = 2 * self.dim;
        if x.len() != stride * self.same_label.len() {
            return Err(Error::InvalidInput("parameter vector has wrong length".into()));
        }
        Ok(x.chunks(stride)
            .zip(&self.same_label)
            .map(|(c, &same_label)| LabeledPair {
                u: c[..self.dim].to_vec(),
                v: c[self.dim..].to_vec(),
                same_label,
            })
            .collect())
    }
}

impl DifferentiableLoss for MetricObjective {
    fn value(&self, x: &[f64]) -> Result<f64> {
        metric_loss(&self.unflatten(x)?, self.margin)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_margin(self.margin)?;
        let pairs = self.unflatten(x)?;
        let mut grad = Vec::with_capacity(x.len());
        for p in &pairs {
            let s = cos(&p.u, &p.v)?;
            let sign = match (p.same_label, hinge_arg(s, p.same_label, self.margin) > 0.0) {
                (_, false) => 0.0,
                (true, true) => -1.0,
                (false, true) => 1.0,
            };
            let (nu, nv) = (norm(&p.u), norm(&p.v));
            // d cos / du = v / (|u||v|) - cos * u / |u|^2
            grad.extend(p.u.iter().zip(&p.v).map(|(ui, vi)| sign * (vi / (nu * nv) - s * ui / (nu * nu))));
            grad.extend(p.v.iter().zip(&p.u).map(|(vi, ui)| sign * (ui / (nu * nv) - s * vi / (nv * nv))));
        }
        Ok(grad)
    }

    fn hinge_args(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.unflatten(x)?
            .iter()
            .map(|p| Ok(hinge_arg(cos(&p.u, &p.v)?, p.same_label, self.margin)))
            .collect()
    }
}

/// Distillation loss as a function of the student logits, in label order.
#[derive(Debug, Clone)]
pub struct DistillObjective {
    target: Vec<f64>,
}

impl DistillObjective {
    pub fn new(teacher_logodds: &BTreeMap<String, f64>, tau_c: f64) -> Result<Self> {
        Ok(Self {
            target: teacher_distribution(teacher_logodds, tau_c)?,
        })
    }
}

impl DifferentiableLoss for DistillObjective {
    fn value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.target.len() {
            return Err(Error::InvalidInput("logit count differs from label count".into()));
        }
        Ok(cross_entropy(&self.target, x))
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.target.len() {
            return Err(Error::InvalidInput("logit count differs from label count".into()));
        }
        Ok(softmax(x).iter().zip(&self.target).map(|(q, p)| q - p).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
}

/// Gradients smaller than this are compared on an absolute scale.
const RELATIVE_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient with central differences of step `h`.
pub fn finite_difference_check(
    loss: &dyn DifferentiableLoss,
    point: &[f64],
    h: f64,
) -> Result<GradientCheck> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::InvalidInput(format!("step {h} outside [1e-6, 1e-3]")));
    }
    let base_hinges = loss.hinge_args(point)?;
    if let Some(i) = base_hinges.iter().position(|&a| a == 0.0) {
        return Err(Error::NonSmooth(format!("hinge {i} sits exactly at its kink")));
    }
    let analytic = loss.gradient(point)?;
    let mut x = point.to_vec();
    let mut worst = GradientCheck {
        max_relative_error: 0.0,
        worst_coordinate: 0,
    };
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = loss.value(&x)?;
        let hinges_plus = loss.hinge_args(&x)?;
        x[i] = orig - h;
        let minus = loss.value(&x)?;
        let hinges_minus = loss.hinge_args(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i} perturbation")));
        }
        let crosses = |hs: &[f64]| hs.iter().zip(&base_hinges).any(|(a, b)| (*a > 0.0) != (*b > 0.0));
        if crosses(&hinges_plus) || crosses(&hinges_minus) {
            return Err(Error::NonSmooth(format!("perturbing coordinate {i} crosses a hinge")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        if rel > worst.max_relative_error {
            worst = GradientCheck {
                max_relative_error: rel,
                worst_coordinate: i,
            };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn pair_with_cos(s: f64, same: bool) -> LabeledPair {
        LabeledPair {
            u: vec![1.0, 0.0],
            v: vec![s, (1.0 - s * s).sqrt()],
            same_label: same,
        }
    }

    #[test]
    fn metric_hinges() {
        let same = pair_with_cos(1.0, true);
        assert_eq!(metric_loss(&[same], 0.2).unwrap(), 0.0);
        let diff = pair_with_cos(0.5, false);
        assert!((metric_loss(&[diff], 0.2).unwrap() - 0.3).abs() < 1e-12);
        let below = pair_with_cos(0.1, false);
        assert_eq!(metric_loss(&[below], 0.2).unwrap(), 0.0);
    }

    #[test]
    fn metric_rejects_bad_margin() {
        for m in [0.0, 1.0, -0.5, 1.5] {
            assert!(metric_loss(&[], m).is_err());
        }
    }

    #[test]
    fn distill_uniform_is_ln2() {
        let t = labels(&[("a", 0.3), ("b", 0.3)]);
        let loss = distill_loss(&t, 1.0, &t).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn distill_self_is_teacher_entropy() {
        let t = labels(&[("a", 6.0), ("b", -1.0), ("c", -2.0)]);
        let p = teacher_distribution(&t, 1.0).unwrap();
        let entropy: f64 = -p.iter().map(|x| x * x.ln()).sum::<f64>();
        let loss = distill_loss(&t, 1.0, &t).unwrap();
        assert!((loss - entropy).abs() < 1e-12);
    }

    #[test]
    fn distill_increases_when_wrong_label_is_boosted() {
        let t = labels(&[("a", 3.0), ("b", -1.0)]);
        let base = distill_loss(&t, 1.0, &t).unwrap();
        let bumped = distill_loss(&t, 1.0, &labels(&[("a", 3.0), ("b", -0.9)])).unwrap();
        assert!(bumped > base, "{bumped} <= {base}");
    }

    #[test]
    fn distill_rejects_mismatched_labels() {
        let t = labels(&[("a", 1.0), ("b", 0.0)]);
        let s = labels(&[("a", 1.0), ("c", 0.0)]);
        assert!(distill_loss(&t, 1.0, &s).is_err());
        assert!(distill_loss(&t, 0.0, &t).is_err());
    }

    #[test]
    fn exact_kink_is_flagged() {
        let obj = MetricObjective {
            dim: 2,
            same_label: vec![true],
            margin: 0.2,
        };
        let x = MetricObjective::flatten(&[LabeledPair {
            u: vec![1.0, 0.0],
            v: vec![2.0, 0.0],
            same_label: true,
        }]);
        assert!(matches!(finite_difference_check(&obj, &x, 1e-5), Err(Error::NonSmooth(_))));
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let obj = DistillObjective::new(&labels(&[("a", 1.0), ("b", 0.0)]), 1.0).unwrap();
        assert!(finite_difference_check(&obj, &[0.0, 0.0], 1e-2).is_err());
        assert!(finite_difference_check(&obj, &[0.0, 0.0], 1e-8).is_err());
    }

    #[test]
    fn metric_gradient_away_from_kink() {
        let pairs = vec![
            LabeledPair { u: vec![0.9, 0.3, -0.2], v: vec![0.1, 0.8, 0.4], same_label: true },
            LabeledPair { u: vec![0.5, 0.5, 0.1], v: vec![0.6, 0.3, 0.2], same_label: false },
        ];
        let obj = MetricObjective { dim: 3, same_label: vec![true, false], margin: 0.2 };
        let check = finite_difference_check(&obj, &MetricObjective::flatten(&pairs), 1e-5).unwrap();
        assert!(check.max_relative_error <= 1e-4, "{check:?}");
    }

    proptest! {
        #[test]
        fn metric_loss_is_nonnegative(
            u in prop::collection::vec(-1.0f64..1.0, 3),
            v in prop::collection::vec(-1.0f64..1.0, 3),
            same in any::<bool>(),
            m in 0.01f64..0.99,
        ) {
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            let l = metric_loss(&[LabeledPair { u, v, same_label: same }], m).unwrap();
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn distill_shift_invariant(
            t in prop::collection::vec(-5.0f64..5.0, 2..6),
            s in prop::collection::vec(-5.0f64..5.0, 6),
            c in -10.0f64..10.0,
        ) {
            let names: Vec<String> = (0..t.len()).map(|i| format!("l{i}")).collect();
            let teacher: BTreeMap<_, _> = names.iter().cloned().zip(t.iter().copied()).collect();
            let student: BTreeMap<_, _> = names.iter().cloned().zip(s.iter().copied()).collect();
            let shifted: BTreeMap<_, _> = student.iter().map(|(k, v)| (k.clone(), v + c)).collect();
            let a = distill_loss(&teacher, 1.1, &student).unwrap();
            let b = distill_loss(&teacher, 1.1, &shifted).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= 0.0);
        }
    }
}

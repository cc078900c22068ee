//! Loss kernels for distillation on dense anchor-class logits.
//!
//! Every kernel takes the student logit `z` (with `p = sigmoid(z)`) and works
//! in log-space through softplus, so values and gradients stay finite for any
//! logit in `[-40, 40]`. Teacher probabilities are clamped into
//! `[eps, 1 - eps]` before any log. Each kernel returns both the loss value
//! and the analytic `d(value)/dz`; the analytic gradients are cross-checked
//! against central finite differences in the gradcheck suite.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Hyperparameters shared by all loss kernels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossHyperparams {
    /// Focusing exponent of the focal term and of the distillation weight.
    pub gamma: f64,
    /// Weight of the hard-to-learn (teacher-entropy) term inside the
    /// adaptive distillation weight.
    pub beta: f64,
    /// Exponent of the per-image distillation normalizer.
    pub theta: f64,
    /// Class-balance factor; 1.0 disables balancing entirely.
    pub alpha: f64,
    /// Probability clamp applied to teacher probabilities.
    pub eps: f64,
    /// Treat the adaptive distillation weight as a constant during
    /// differentiation instead of flowing gradients through it.
    pub detach_weight: bool,
}

impl Default for LossHyperparams {
    fn default() -> Self {
        LossHyperparams {
            gamma: 2.0,
            beta: 1.5,
            theta: 1.8,
            alpha: 1.0,
            eps: 1e-6,
            detach_weight: false,
        }
    }
}

impl LossHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::config("gamma must be finite and >= 0"));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::config("beta must be finite and >= 0"));
        }
        if !self.theta.is_finite() || self.theta <= 0.0 {
            return Err(Error::config("theta must be finite and > 0"));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 || self.alpha > 1.0 {
            return Err(Error::config("alpha must be in (0, 1]"));
        }
        if !self.eps.is_finite() || self.eps <= 0.0 || self.eps > 1e-3 {
            return Err(Error::config("eps must be in (0, 1e-3]"));
        }
        Ok(())
    }

    pub fn clamp_prob(&self, q: f64) -> f64 {
        q.clamp(self.eps, 1.0 - self.eps)
    }
}

/// Ground-truth side of a sample, `y ∈ {+1, -1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HardLabel {
    Positive,
    Negative,
}

impl HardLabel {
    /// Sign flipping the logit so that `p_t = sigmoid(sign * z)`.
    fn sign(self) -> f64 {
        match self {
            HardLabel::Positive => 1.0,
            HardLabel::Negative => -1.0,
        }
    }
}

/// One anchor-class pair: student logit, teacher probability and an optional
/// hard label. The student probability is always derived from the logit.
#[derive(Debug, Clone, Copy)]
pub struct SampleTerm {
    logit: f64,
    teacher_prob: f64,
    hard_label: Option<HardLabel>,
}

impl SampleTerm {
    pub fn new(logit: f64, teacher_prob: f64, hard_label: Option<HardLabel>) -> Result<Self> {
        if !logit.is_finite() {
            return Err(Error::invalid(format!("non-finite logit {logit}")));
        }
        if !teacher_prob.is_finite() || !(0.0..=1.0).contains(&teacher_prob) {
            return Err(Error::invalid(format!(
                "teacher probability {teacher_prob} outside [0, 1]"
            )));
        }
        Ok(SampleTerm {
            logit,
            teacher_prob,
            hard_label,
        })
    }

    /// Term carrying only a soft target.
    pub fn soft(logit: f64, teacher_prob: f64) -> Result<Self> {
        Self::new(logit, teacher_prob, None)
    }

    /// Term carrying both a soft target and a hard label.
    pub fn labeled(logit: f64, teacher_prob: f64, label: HardLabel) -> Result<Self> {
        Self::new(logit, teacher_prob, Some(label))
    }

    pub fn logit(&self) -> f64 {
        self.logit
    }

    pub fn teacher_prob(&self) -> f64 {
        self.teacher_prob
    }

    pub fn hard_label(&self) -> Option<HardLabel> {
        self.hard_label
    }

    fn require_label(&self, op: &str) -> Result<HardLabel> {
        self.hard_label
            .ok_or_else(|| Error::usage(format!("{op} requires a hard label")))
    }
}

/// Loss value with its derivative with respect to the student logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_logit: f64,
}

impl LossResult {
    pub const ZERO: LossResult = LossResult {
        value: 0.0,
        grad_logit: 0.0,
    };
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `ln(1 + e^x)` without overflow on either side.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse sigmoid; valid for p strictly inside (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `x * ln(x)` extended continuously to x = 0.
fn x_ln_x(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

fn alpha_t(alpha: f64, label: HardLabel) -> f64 {
    // alpha = 1 disables balancing for both classes; with the textbook
    // alpha_t formula it would zero out every negative sample.
    if alpha >= 1.0 {
        1.0
    } else {
        match label {
            HardLabel::Positive => alpha,
            HardLabel::Negative => 1.0 - alpha,
        }
    }
}

/// Focal loss `alpha_t * (1 - p_t)^gamma * (-ln p_t)`.
pub fn focal_loss(term: &SampleTerm, hp: &LossHyperparams) -> Result<LossResult> {
    let label = term.require_label("focal_loss")?;
    let s = label.sign();
    let z = term.logit;
    let pt = sigmoid(s * z);
    let one_minus_pt = sigmoid(-s * z);
    let log_pt = -softplus(-s * z);
    let a = one_minus_pt.powf(hp.gamma);
    let at = alpha_t(hp.alpha, label);
    let value = at * a * (-log_pt);
    // d/dz = at * s * [gamma * pt * (1-pt)^gamma * ln(pt) - (1-pt)^(gamma+1)]
    let grad = at * s * (hp.gamma * pt * a * log_pt - a * one_minus_pt);
    Ok(LossResult {
        value,
        grad_logit: grad,
    })
}

/// Binary KL divergence `KL(q || p)` of the teacher distribution from the
/// student distribution, evaluated in log-space. The gradient is the closed
/// form `p - q`.
pub fn kl_binary(term: &SampleTerm, hp: &LossHyperparams) -> Result<LossResult> {
    let q = hp.clamp_prob(term.teacher_prob);
    let z = term.logit;
    let p = sigmoid(z);
    if p == q {
        // Bitwise-equal probabilities mean a true zero; skipping the
        // formula avoids a +-1 ulp residual.
        return Ok(LossResult::ZERO);
    }
    let log_p = -softplus(-z);
    let log_1mp = -softplus(z);
    let value = x_ln_x(q) + x_ln_x(1.0 - q) - q * log_p - (1.0 - q) * log_1mp;
    Ok(LossResult {
        value: value.max(0.0),
        grad_logit: p - q,
    })
}

/// Teacher entropy `T(q) = -(q ln q + (1-q) ln(1-q))`; maximal at q = 0.5.
/// Expects q already clamped.
pub fn teacher_entropy(q: f64) -> f64 {
    -(x_ln_x(q) + x_ln_x(1.0 - q))
}

/// Distillation weight `(1 - e^{-kl})^gamma`, monotone in the KL gap.
pub fn distill_weight(kl: f64, gamma: f64) -> Result<f64> {
    if !kl.is_finite() && kl != f64::INFINITY {
        return Err(Error::invalid(format!("non-finite kl {kl}")));
    }
    if kl < 0.0 {
        return Err(Error::invalid(format!("negative kl {kl}")));
    }
    Ok((-(-kl).exp_m1()).powf(gamma))
}

/// Adaptive distillation weight `(1 - e^{-(kl + beta T(q))})^gamma`; the
/// entropy term raises the weight of hard-to-learn samples. Reduces to
/// [`distill_weight`] when beta = 0.
pub fn adaptive_distill_weight(kl: f64, t_q: f64, hp: &LossHyperparams) -> Result<f64> {
    if !(kl >= 0.0) {
        return Err(Error::invalid(format!("kl must be >= 0, got {kl}")));
    }
    if !(t_q >= 0.0) {
        return Err(Error::invalid(format!(
            "teacher entropy must be >= 0, got {t_q}"
        )));
    }
    distill_weight(kl + hp.beta * t_q, hp.gamma)
}

/// Adaptive distillation loss `ADW * KL`, with gradients flowing through
/// both factors unless `hp.detach_weight` is set.
pub fn adl(term: &SampleTerm, hp: &LossHyperparams) -> Result<LossResult> {
    let q = hp.clamp_prob(term.teacher_prob);
    let kl = kl_binary(term, hp)?;
    let t_q = teacher_entropy(q);
    let expo = -(kl.value + hp.beta * t_q);
    let u = -expo.exp_m1(); // 1 - e^expo, exact near zero
    let w = if hp.gamma == 0.0 { 1.0 } else { u.powf(hp.gamma) };
    let value = w * kl.value;
    let dw_dkl = if hp.detach_weight || hp.gamma == 0.0 || u == 0.0 {
        // u == 0 forces kl == 0, where the k * dw/dk term vanishes in the
        // limit for any gamma > 0.
        0.0
    } else {
        hp.gamma * u.powf(hp.gamma - 1.0) * expo.exp()
    };
    let grad = kl.grad_logit * (w + kl.value * dw_dkl);
    Ok(LossResult {
        value,
        grad_logit: grad,
    })
}

/// Focal distillation loss `(1 - p_t)^gamma * KL`: KL modulated by the same
/// focal term as the classification loss. Baseline only.
pub fn fdl(term: &SampleTerm, hp: &LossHyperparams) -> Result<LossResult> {
    let label = term.require_label("fdl")?;
    let s = label.sign();
    let z = term.logit;
    let pt = sigmoid(s * z);
    let one_minus_pt = sigmoid(-s * z);
    let a = one_minus_pt.powf(hp.gamma);
    let kl = kl_binary(term, hp)?;
    let value = a * kl.value;
    let grad = a * (kl.grad_logit - hp.gamma * s * pt * kl.value);
    Ok(LossResult {
        value,
        grad_logit: grad,
    })
}

/// Joint classification+distillation loss sharing one focal term:
/// `(1 - p_t)^gamma * (-ln p_t + KL)`. Its gradient vanishes as `p_t -> 1`
/// for gamma > 1, regardless of the teacher gap.
pub fn focal_shared_joint(term: &SampleTerm, hp: &LossHyperparams) -> Result<LossResult> {
    let label = term.require_label("focal_shared_joint")?;
    let s = label.sign();
    let z = term.logit;
    let pt = sigmoid(s * z);
    let one_minus_pt = sigmoid(-s * z);
    let log_pt = -softplus(-s * z);
    let a = one_minus_pt.powf(hp.gamma);
    let kl = kl_binary(term, hp)?;
    let inner = -log_pt + kl.value;
    let value = a * inner;
    let grad = a * (kl.grad_logit - s * one_minus_pt - hp.gamma * s * pt * inner);
    Ok(LossResult {
        value,
        grad_logit: grad,
    })
}

/// Per-image distillation normalizer `N = sum_i q_i^theta` over per-anchor
/// teacher foreground probabilities. Expects q already clamped. The powered
/// terms are summed in sorted order, so the result is bitwise invariant
/// under permutation of the anchor list.
pub fn adl_normalizer(q_per_anchor: &[f64], theta: f64) -> Result<f64> {
    if q_per_anchor.is_empty() {
        return Err(Error::invalid("adl_normalizer needs at least one anchor"));
    }
    if !theta.is_finite() || theta <= 0.0 {
        return Err(Error::invalid(format!("theta must be > 0, got {theta}")));
    }
    let mut powered: Vec<f64> = q_per_anchor.iter().map(|q| q.powf(theta)).collect();
    powered.sort_by(|a, b| a.total_cmp(b));
    Ok(powered.iter().sum())
}

/// L2 logit mimic `0.5 * sum (z_s - z_t)^2` with per-element gradients.
#[derive(Debug, Clone)]
pub struct MimicLoss {
    pub value: f64,
    pub grads: Vec<f64>,
}

pub fn l2_mimic(student_logits: &[f64], teacher_logits: &[f64]) -> Result<MimicLoss> {
    if student_logits.len() != teacher_logits.len() {
        return Err(Error::invalid(format!(
            "l2_mimic length mismatch: {} vs {}",
            student_logits.len(),
            teacher_logits.len()
        )));
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(student_logits.len());
    for (&zs, &zt) in student_logits.iter().zip(teacher_logits) {
        let d = zs - zt;
        value += 0.5 * d * d;
        grads.push(d);
    }
    Ok(MimicLoss { value, grads })
}

/// Per-image loss decomposition. The focal and localization sums share the
/// positive-anchor normalizer; the distillation sum is divided by the
/// entropy-weighted normalizer instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageLossBreakdown {
    pub focal_sum: f64,
    pub adl_sum: f64,
    pub loc_sum: f64,
    pub normalizer_focal: usize,
    pub normalizer_adl: f64,
    pub total: f64,
}

impl ImageLossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.focal_sum.is_finite()
            && self.adl_sum.is_finite()
            && self.loc_sum.is_finite()
            && self.normalizer_adl.is_finite()
            && self.total.is_finite()
    }
}

/// Evaluation of an image's classification-side losses with per-term logit
/// gradients of the normalized total. Localization enters only through the
/// precomputed `loc_sum` (its gradients live on the box deltas).
pub(crate) struct ImageLossEval {
    pub breakdown: ImageLossBreakdown,
    pub dlogit: Vec<f64>,
}

pub(crate) fn image_loss_eval(
    terms: &[SampleTerm],
    classes_per_anchor: usize,
    loc_sum: f64,
    hp: &LossHyperparams,
    use_focal: bool,
    use_adl: bool,
) -> Result<ImageLossEval> {
    if classes_per_anchor == 0 {
        return Err(Error::invalid("classes_per_anchor must be positive"));
    }
    if terms.is_empty() || terms.len() % classes_per_anchor != 0 {
        return Err(Error::invalid(format!(
            "term count {} is not a positive multiple of {classes_per_anchor}",
            terms.len()
        )));
    }

    let mut focal_sum = 0.0;
    let mut adl_sum = 0.0;
    let mut positives = 0usize;
    let mut dlogit_focal = vec![0.0; terms.len()];
    let mut dlogit_adl = vec![0.0; terms.len()];
    let mut normalizer_adl = 1.0;

    if use_adl {
        let mut q_fg = Vec::with_capacity(terms.len() / classes_per_anchor);
        for anchor_terms in terms.chunks(classes_per_anchor) {
            let qmax = anchor_terms
                .iter()
                .map(|t| hp.clamp_prob(t.teacher_prob))
                .fold(f64::NEG_INFINITY, f64::max);
            q_fg.push(qmax);
        }
        normalizer_adl = adl_normalizer(&q_fg, hp.theta)?;
    }

    for (anchor_idx, anchor_terms) in terms.chunks(classes_per_anchor).enumerate() {
        let base = anchor_idx * classes_per_anchor;
        let mut anchor_positive = false;
        for (offset, term) in anchor_terms.iter().enumerate() {
            if use_focal {
                if let Some(label) = term.hard_label {
                    let r = focal_loss(term, hp)?;
                    focal_sum += r.value;
                    dlogit_focal[base + offset] = r.grad_logit;
                    if label == HardLabel::Positive {
                        anchor_positive = true;
                    }
                }
            }
            if use_adl {
                let r = adl(term, hp)?;
                adl_sum += r.value;
                dlogit_adl[base + offset] = r.grad_logit;
            }
        }
        if anchor_positive {
            positives += 1;
        }
    }

    let norm_focal = positives.max(1) as f64;
    let total = focal_sum / norm_focal + adl_sum / normalizer_adl + loc_sum / norm_focal;
    let dlogit = dlogit_focal
        .iter()
        .zip(&dlogit_adl)
        .map(|(f, a)| f / norm_focal + a / normalizer_adl)
        .collect();

    Ok(ImageLossEval {
        breakdown: ImageLossBreakdown {
            focal_sum,
            adl_sum,
            loc_sum,
            normalizer_focal: positives,
            normalizer_adl,
            total,
        },
        dlogit,
    })
}

/// Distillation loss of one image: ADL summed over every anchor-class term
/// (negatives included), divided by the entropy-weighted normalizer, plus
/// the focal and localization components on their own normalizer.
pub fn image_distill_loss(
    terms: &[SampleTerm],
    classes_per_anchor: usize,
    loc_sum: f64,
    hp: &LossHyperparams,
) -> Result<ImageLossBreakdown> {
    image_loss_eval(terms, classes_per_anchor, loc_sum, hp, true, true).map(|e| e.breakdown)
}

/// Smooth-L1 on one box-delta component with the transition at |d| = 1;
/// gradient taken with respect to the prediction.
pub fn smooth_l1(pred: f64, target: f64) -> LossResult {
    let d = pred - target;
    if d.abs() < 1.0 {
        LossResult {
            value: 0.5 * d * d,
            grad_logit: d,
        }
    } else {
        LossResult {
            value: d.abs() - 0.5,
            grad_logit: d.signum(),
        }
    }
}

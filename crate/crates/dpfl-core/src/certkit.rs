//! Certification engine: Monte-Carlo expectation estimates with Hoeffding
//! calibration, certified-prediction checks and the certified adversary
//! bound K, attack-cost functions, expected-cost bounds, and
//! minimum-attacker bounds.
//!
//! Every formula here is level-agnostic: the same expressions certify
//! user-level guarantees (k adversarial users) and instance-level
//! guarantees (k poisoned instances); the [`crate::privkit::PrivacyLevel`]
//! of the report being certified selects the interpretation of k.

use serde::{Deserialize, Serialize};

use crate::attackkit::{apply_backdoor, Pattern};
use crate::datakit::LabeledExample;
use crate::error::{DpflError, Result};
use crate::modelkit::{loss, ModelParams};

/// Per-test-sample Monte-Carlo class-confidence estimate over O runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEstimate {
    /// Component-wise mean confidence per class.
    pub mean: Vec<f64>,
    /// Top class A (ties toward the lower class index).
    pub top: usize,
    /// Runner-up class B.
    pub runner_up: usize,
    /// Number of Monte-Carlo samples O.
    pub samples: usize,
    /// Error tolerance used for calibration, when applied.
    pub psi: Option<f64>,
    /// Lower confidence bound on the top class (equals `mean[top]` until
    /// calibrated).
    pub top_lower: f64,
    /// Upper confidence bound on the runner-up class.
    pub runner_up_upper: f64,
}

/// Component-wise mean of O confidence vectors; argmax ties break toward
/// the lower class index.
pub fn estimate_expectation(confidence_samples: &[Vec<f64>]) -> Result<EnsembleEstimate> {
    let Some(first) = confidence_samples.first() else {
        return Err(DpflError::Usage("empty Monte-Carlo sample set".into()));
    };
    let classes = first.len();
    if classes < 2 {
        return Err(DpflError::Usage("need at least two classes".into()));
    }
    let mut mean = vec![0.0; classes];
    for sample in confidence_samples {
        if sample.len() != classes {
            return Err(DpflError::Shape(
                "confidence vectors have inconsistent lengths".into(),
            ));
        }
        for (acc, v) in mean.iter_mut().zip(sample) {
            *acc += v;
        }
    }
    let inv = 1.0 / confidence_samples.len() as f64;
    for acc in &mut mean {
        *acc *= inv;
    }
    let top = argmax_tie_low(&mean, None);
    let runner_up = argmax_tie_low(&mean, Some(top));
    Ok(EnsembleEstimate {
        top_lower: mean[top],
        runner_up_upper: mean[runner_up],
        mean,
        top,
        runner_up,
        samples: confidence_samples.len(),
        psi: None,
    })
}

fn argmax_tie_low(values: &[f64], skip: Option<usize>) -> usize {
    let mut best = usize::MAX;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Hoeffding margin `sqrt(log(1/psi) / (2 O))` for one-sided error
/// tolerance psi over O samples.
pub fn hoeffding_margin(psi: f64, samples: usize) -> Result<f64> {
    if !(0.0 < psi && psi <= 1.0) {
        return Err(DpflError::Domain(format!(
            "psi must lie in (0, 1], got {psi}"
        )));
    }
    Ok(((1.0 / psi).ln() / (2.0 * samples as f64)).sqrt())
}

/// Applies the Hoeffding margin: the top-class estimate is lowered and the
/// runner-up estimate raised by `sqrt(log(1/psi)/(2 O))`, both clamped to
/// `[0, 1]`.
pub fn hoeffding_calibrate(estimate: &EnsembleEstimate, psi: f64) -> Result<EnsembleEstimate> {
    let margin = hoeffding_margin(psi, estimate.samples)?;
    let mut out = estimate.clone();
    out.psi = Some(psi);
    out.top_lower = (estimate.mean[estimate.top] - margin).clamp(0.0, 1.0);
    out.runner_up_upper = (estimate.mean[estimate.runner_up] + margin).clamp(0.0, 1.0);
    Ok(out)
}

/// Prediction-consistency check under a single adversary:
/// true iff `F_A > e^{2 eps} F_B + (1 + e^{eps}) delta`.
pub fn check_one_adversary(f_a: f64, f_b: f64, epsilon: f64, delta: f64) -> bool {
    f_a > (2.0 * epsilon).exp() * f_b + (1.0 + epsilon.exp()) * delta
}

/// Certified adversary bound:
/// `K = (1/(2 eps)) log[(F_A (e^eps - 1) + delta) / (F_B (e^eps - 1) + delta)]`.
///
/// The prediction is guaranteed unchanged for every k strictly below K.
/// Returns infinity when the denominator vanishes (`F_B = 0`, `delta = 0`)
/// and clamps at zero when the margin is empty or inverted.
pub fn certified_k(f_a: f64, f_b: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(DpflError::Domain(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if delta < 0.0 {
        return Err(DpflError::Domain(format!(
            "delta must be nonnegative, got {delta}"
        )));
    }
    for (name, v) in [("F_A", f_a), ("F_B", f_b)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(DpflError::Domain(format!(
                "{name} must lie in [0, 1], got {v}"
            )));
        }
    }
    let growth = epsilon.exp_m1();
    let numerator = f_a * growth + delta;
    let denominator = f_b * growth + delta;
    if denominator == 0.0 {
        return Ok(if numerator > 0.0 { f64::INFINITY } else { 0.0 });
    }
    Ok(((numerator / denominator).ln() / (2.0 * epsilon)).max(0.0))
}

/// Largest integer k certified by a real-valued bound under the strict
/// `k < K` rule, or `None` when not even `k = 0` is certified.
pub fn largest_certified_k(k_bound: f64) -> Option<u64> {
    if !(k_bound > 0.0) {
        return None;
    }
    if k_bound.is_infinite() {
        return Some(u64::MAX);
    }
    let floor = k_bound.floor();
    Some(if floor == k_bound {
        k_bound as u64 - 1
    } else {
        floor as u64
    })
}

/// Certified prediction for one test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedPrediction {
    pub top: usize,
    pub runner_up: usize,
    /// Real-valued certified adversary bound K.
    pub k_bound: f64,
    pub used_calibration: bool,
}

/// Runs [`certified_k`] on an (optionally calibrated) ensemble estimate.
pub fn certify_estimate(
    estimate: &EnsembleEstimate,
    epsilon: f64,
    delta: f64,
) -> Result<CertifiedPrediction> {
    // An inverted calibrated margin clamps to K = 0 inside certified_k.
    let k_bound = certified_k(
        estimate.top_lower.clamp(0.0, 1.0),
        estimate.runner_up_upper.clamp(0.0, 1.0),
        epsilon,
        delta,
    )?;
    Ok(CertifiedPrediction {
        top: estimate.top,
        runner_up: estimate.runner_up,
        k_bound,
        used_calibration: estimate.psi.is_some(),
    })
}

/// Which attack goal a cost function encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    /// Mean loss toward the target label on trigger-stamped inputs.
    Backdoor,
    /// Mean loss toward the target label on source-class inputs.
    LabelFlip,
}

/// Evaluation of a bounded attack-cost function on one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEval {
    pub value: f64,
    /// Set when any per-example cost hit the `[0, c_bar]` clamp.
    pub clamped: bool,
}

/// Attack cost `C(theta)`: the mean cross-entropy of the model toward the
/// adversarial target over the poisoned evaluation set, with per-example
/// costs clamped into `[0, c_bar]` so that `|C| <= c_bar` holds by
/// construction (nonnegative sign regime).
pub fn attack_cost(
    cost_kind: CostKind,
    params: &ModelParams,
    eval_set: &[LabeledExample],
    pattern: &Pattern,
    target_label: usize,
    source_class: Option<usize>,
    c_bar: f64,
) -> Result<CostEval> {
    if eval_set.is_empty() {
        return Err(DpflError::Usage("empty attack-cost evaluation set".into()));
    }
    if !(c_bar > 0.0) {
        return Err(DpflError::Config(format!(
            "cost range bound must be positive, got {c_bar}"
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut clamped = false;
    for example in eval_set {
        let poisoned = match cost_kind {
            CostKind::Backdoor => apply_backdoor(example, pattern, target_label)?,
            CostKind::LabelFlip => {
                let source = source_class.ok_or_else(|| {
                    DpflError::Usage("label-flip cost needs a source class".into())
                })?;
                if example.label != source {
                    continue;
                }
                LabeledExample {
                    features: example.features.clone(),
                    label: target_label,
                }
            }
        };
        let raw = loss(params, &poisoned)?;
        let bounded = raw.clamp(0.0, c_bar);
        clamped |= bounded != raw;
        total += bounded;
        count += 1;
    }
    if count == 0 {
        return Err(DpflError::Usage(
            "no source-class examples in the evaluation set".into(),
        ));
    }
    Ok(CostEval {
        value: total / count as f64,
        clamped,
    })
}

/// Sign regime of the cost function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignRegime {
    /// `0 <= C <= c_bar`
    NonNegative,
    /// `-c_bar <= C <= 0`
    NonPositive,
}

/// Certified bounds on the expected attack cost under k adversaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBounds {
    pub j_clean: f64,
    pub k: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub c_bar: f64,
    pub sign_regime: SignRegime,
    pub lower: f64,
    pub upper: f64,
}

/// Bounds on `J(D')` when `D'` differs from `D` in k units, for an
/// (epsilon, delta)-DP mechanism with `|C| <= c_bar`:
///
/// nonnegative regime:
///   `max(e^{-k eps} J - ((1 - e^{-k eps})/(e^eps - 1)) delta c_bar, 0)
///    <= J(D') <= min(e^{k eps} J + ((e^{k eps} - 1)/(e^eps - 1)) delta c_bar, c_bar)`
///
/// nonpositive regime: the mirrored pair clamped into `[-c_bar, 0]`.
pub fn cost_bounds(
    j_clean: f64,
    epsilon: f64,
    delta: f64,
    k: f64,
    c_bar: f64,
    sign_regime: SignRegime,
) -> Result<CostBounds> {
    if !(epsilon > 0.0) {
        return Err(DpflError::Domain(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if delta < 0.0 || k < 0.0 || !(c_bar > 0.0) {
        return Err(DpflError::Domain(
            "delta and k must be nonnegative and c_bar positive".into(),
        ));
    }
    if j_clean.abs() > c_bar {
        return Err(DpflError::Config(format!(
            "|J_clean| = {} exceeds the cost range bound {c_bar}",
            j_clean.abs()
        )));
    }
    match sign_regime {
        SignRegime::NonNegative if j_clean < 0.0 => {
            return Err(DpflError::Config(
                "nonnegative regime with a negative clean cost".into(),
            ));
        }
        SignRegime::NonPositive if j_clean > 0.0 => {
            return Err(DpflError::Config(
                "nonpositive regime with a positive clean cost".into(),
            ));
        }
        _ => {}
    }
    let shrink = (-k * epsilon).exp();
    let grow = (k * epsilon).exp();
    let slack_denominator = epsilon.exp_m1();
    let (lower, upper) = match sign_regime {
        SignRegime::NonNegative => (
            (shrink * j_clean - (-(-k * epsilon).exp_m1()) / slack_denominator * delta * c_bar)
                .max(0.0),
            (grow * j_clean + (k * epsilon).exp_m1() / slack_denominator * delta * c_bar)
                .min(c_bar),
        ),
        SignRegime::NonPositive => (
            (grow * j_clean - (k * epsilon).exp_m1() / slack_denominator * delta * c_bar)
                .max(-c_bar),
            (shrink * j_clean + (-(-k * epsilon).exp_m1()) / slack_denominator * delta * c_bar)
                .min(0.0),
        ),
    };
    Ok(CostBounds {
        j_clean,
        k,
        epsilon,
        delta,
        c_bar,
        sign_regime,
        lower,
        upper,
    })
}

/// Minimum number of adversaries needed to drive the expected cost to
/// `J/tau` (nonnegative regime) or `tau J` (nonpositive regime):
///
/// nonnegative: `k >= (1/eps) log[((e^eps - 1) J tau + c_bar delta tau)
///                                / ((e^eps - 1) J + c_bar delta tau)]`
/// nonpositive: `k >= (1/eps) log[((e^eps - 1) J tau - c_bar delta)
///                                / ((e^eps - 1) J - c_bar delta)]`
pub fn min_attackers(
    j_clean: f64,
    epsilon: f64,
    delta: f64,
    tau: f64,
    c_bar: f64,
    sign_regime: SignRegime,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(DpflError::Domain(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if delta < 0.0 || !(c_bar > 0.0) {
        return Err(DpflError::Domain(
            "delta must be nonnegative and c_bar positive".into(),
        ));
    }
    let growth = epsilon.exp_m1();
    match sign_regime {
        SignRegime::NonNegative => {
            if tau < 1.0 {
                return Err(DpflError::Domain(format!(
                    "tau must be at least 1, got {tau}"
                )));
            }
            if j_clean < 0.0 {
                return Err(DpflError::Config(
                    "nonnegative regime with a negative clean cost".into(),
                ));
            }
            let numerator = growth * j_clean * tau + c_bar * delta * tau;
            let denominator = growth * j_clean + c_bar * delta * tau;
            if denominator <= 0.0 {
                return Err(DpflError::Domain(
                    "degenerate bound: clean cost and delta are both zero".into(),
                ));
            }
            Ok((numerator / denominator).ln() / epsilon)
        }
        SignRegime::NonPositive => {
            if j_clean > 0.0 {
                return Err(DpflError::Config(
                    "nonpositive regime with a positive clean cost".into(),
                ));
            }
            if j_clean == 0.0 {
                return Err(DpflError::Domain(
                    "nonpositive regime needs a strictly negative clean cost".into(),
                ));
            }
            if tau < 1.0 || tau > -c_bar / j_clean {
                return Err(DpflError::Domain(format!(
                    "tau must lie in [1, {}], got {tau}",
                    -c_bar / j_clean
                )));
            }
            if growth * j_clean - c_bar * delta >= 0.0 {
                return Err(DpflError::Domain(
                    "(e^eps - 1) J - c_bar delta must be negative".into(),
                ));
            }
            let numerator = growth * j_clean * tau - c_bar * delta;
            let denominator = growth * j_clean - c_bar * delta;
            Ok((numerator / denominator).ln() / epsilon)
        }
    }
}

/// Fraction of the test set that is both correctly predicted and certified
/// at k adversaries, under the strict `k < K_i` rule.
pub fn certified_accuracy(per_sample: &[(bool, f64)], k: f64) -> Result<f64> {
    if per_sample.is_empty() {
        return Err(DpflError::Usage("empty per-sample certification list".into()));
    }
    let qualified = per_sample
        .iter()
        .filter(|(correct, k_bound)| *correct && k < *k_bound)
        .count();
    Ok(qualified as f64 / per_sample.len() as f64)
}

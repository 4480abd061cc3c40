//! Differential-privacy primitives and the Rényi-DP accountant: update
//! clipping, Gaussian noising, per-order RDP of (subsampled) Gaussian
//! mechanisms, round composition, RDP-to-DP conversion, group DP, and
//! parallel composition for instance-level federated learning.
//!
//! Two subsampling bounds are provided:
//! - [`subsampled_rdp`]: the generic binomial-expansion upper bound for a
//!   mechanism subsampled without replacement, valid for any base mechanism
//!   with bounded higher-order RDP.
//! - [`sampled_gaussian_rdp`]: the tight integer-order curve of the sampled
//!   Gaussian mechanism. The training algorithms account with this one.
//!
//! All binomial sums run in log-space; at order 64 and small noise the raw
//! terms overflow 64-bit floats.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DpflError, Result};

/// Integer Rényi orders 2..=64.
pub fn default_orders() -> Vec<u32> {
    (2..=64).collect()
}

/// `delta / max(1, ||delta||_2 / s)`: norm at most `s`, direction preserved,
/// identity when already within the threshold.
pub fn clip(delta: &[f64], s: f64) -> Result<Vec<f64>> {
    if !(s > 0.0) {
        return Err(DpflError::Config(format!(
            "clipping threshold must be positive, got {s}"
        )));
    }
    let mut out = delta.to_vec();
    // Rescaling can land one ulp above s; repeat until the recomputed norm
    // passes the same test a second clip would apply, which makes clipping
    // exactly idempotent.
    for _ in 0..8 {
        let norm = l2_norm(&out);
        if norm <= s || !norm.is_finite() {
            return Ok(out);
        }
        let scale = s / norm;
        for v in &mut out {
            *v *= scale;
        }
    }
    Ok(out)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Draws from `N(0, sigma^2 S^2 I)`; deterministic given the seed, and the
/// zero vector when `sigma = 0`.
pub fn gaussian_noise(dimension: usize, sigma: f64, s: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_noise_with(&mut rng, dimension, sigma, s)
}

/// As [`gaussian_noise`] but drawing from a caller-owned stream.
pub fn gaussian_noise_with(
    rng: &mut impl rand::Rng,
    dimension: usize,
    sigma: f64,
    s: f64,
) -> Result<Vec<f64>> {
    if sigma < 0.0 {
        return Err(DpflError::Config(format!(
            "noise multiplier must be nonnegative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(vec![0.0; dimension]);
    }
    let normal = Normal::new(0.0, sigma * s)
        .map_err(|e| DpflError::Config(format!("bad noise parameters: {e}")))?;
    Ok((0..dimension).map(|_| normal.sample(rng)).collect())
}

/// RDP of the Gaussian mechanism at integer order `alpha`:
/// `alpha / (2 sigma'^2)`. Returns infinity when the effective noise is
/// zero (infinite privacy cost).
pub fn gaussian_rdp(order: u32, effective_noise: f64) -> f64 {
    if effective_noise <= 0.0 {
        return f64::INFINITY;
    }
    f64::from(order) / (2.0 * effective_noise * effective_noise)
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut lf = vec![0.0; n + 1];
    for i in 1..=n {
        lf[i] = lf[i - 1] + (i as f64).ln();
    }
    lf
}

fn ln_binomial(lf: &[f64], n: usize, k: usize) -> f64 {
    lf[n] - lf[k] - lf[n - k]
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

fn check_order_and_rate(order: u32, rate: f64, what: &str) -> Result<()> {
    if order < 2 {
        return Err(DpflError::Usage(format!(
            "{what} needs an integer order >= 2, got {order}"
        )));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(DpflError::Usage(format!(
            "sampling probability must be in [0, 1], got {rate}"
        )));
    }
    Ok(())
}

/// Generic upper bound on the RDP at integer order `alpha` of a Gaussian
/// mechanism subsampled at rate `gamma`:
///
/// `(1/(alpha-1)) * log(1 + gamma^2 C(alpha,2) min{4(e^{eps(2)}-1), 2e^{eps(2)}}
///   + sum_{j=3}^{alpha} gamma^j C(alpha,j) e^{(j-1) eps(j)} * 2)`
///
/// with `eps(j) = j / (2 sigma'^2)`. For the Gaussian base mechanism the
/// `min{., (e^{eps(inf)}-1)^j}` selectors all resolve to their constant
/// branch since `eps(inf)` is unbounded. The result is capped at
/// [`gaussian_rdp`]: subsampling never costs more than running the base
/// mechanism on everything, which also makes `gamma = 1` fall back to the
/// plain Gaussian curve exactly.
pub fn subsampled_rdp(order: u32, sampling_prob: f64, effective_noise: f64) -> Result<f64> {
    check_order_and_rate(order, sampling_prob, "subsampled_rdp")?;
    if sampling_prob == 0.0 {
        return Ok(0.0);
    }
    let base = gaussian_rdp(order, effective_noise);
    if sampling_prob == 1.0 || !base.is_finite() {
        return Ok(base);
    }
    let alpha = order as usize;
    let sigma2 = effective_noise * effective_noise;
    let eps = |j: f64| j / (2.0 * sigma2);
    let lf = ln_factorials(alpha);
    let ln_gamma = sampling_prob.ln();
    let mut terms = Vec::with_capacity(alpha);
    terms.push(0.0); // the leading 1
    let second = (4.0 * eps(2.0).exp_m1()).min(2.0 * eps(2.0).exp());
    terms.push(2.0 * ln_gamma + ln_binomial(&lf, alpha, 2) + second.ln());
    for j in 3..=alpha {
        terms.push(
            j as f64 * ln_gamma
                + ln_binomial(&lf, alpha, j)
                + (j as f64 - 1.0) * eps(j as f64)
                + std::f64::consts::LN_2,
        );
    }
    let bound = log_sum_exp(&terms) / (alpha as f64 - 1.0);
    Ok(bound.min(base))
}

/// Tight RDP at integer order `alpha` of the sampled Gaussian mechanism
/// (each unit participates independently with probability `q`):
///
/// `(1/(alpha-1)) * log( sum_{j=0}^{alpha} C(alpha,j) (1-q)^{alpha-j} q^j
///    e^{j(j-1)/(2 sigma'^2)} )`
pub fn sampled_gaussian_rdp(order: u32, q: f64, effective_noise: f64) -> Result<f64> {
    check_order_and_rate(order, q, "sampled_gaussian_rdp")?;
    if q == 0.0 {
        return Ok(0.0);
    }
    let base = gaussian_rdp(order, effective_noise);
    if q == 1.0 || !base.is_finite() {
        return Ok(base);
    }
    let alpha = order as usize;
    let sigma2 = effective_noise * effective_noise;
    let lf = ln_factorials(alpha);
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let terms: Vec<f64> = (0..=alpha)
        .map(|j| {
            ln_binomial(&lf, alpha, j)
                + (alpha - j) as f64 * ln_1mq
                + j as f64 * ln_q
                + (j * (j.saturating_sub(1))) as f64 / (2.0 * sigma2)
        })
        .collect();
    Ok(log_sum_exp(&terms) / (alpha as f64 - 1.0))
}

/// Whether an (epsilon, delta) guarantee counts users or instances as the
/// adjacent-dataset unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrivacyLevel {
    User,
    Instance,
}

/// Final (epsilon, delta) guarantee with the Rényi order that attained it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    #[serde(with = "possibly_infinite")]
    pub epsilon: f64,
    pub delta: f64,
    pub optimal_order: u32,
    pub level: PrivacyLevel,
    pub rounds: usize,
}

/// JSON has no literal for infinity; non-DP runs serialize epsilon as "inf".
mod possibly_infinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad epsilon: {t}"))),
        }
    }
}

/// Accumulated RDP per order over composition rounds. The target delta is
/// recorded here but only applied at conversion time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpLedger {
    orders: Vec<u32>,
    totals: Vec<f64>,
    rounds_applied: usize,
    target_delta: f64,
}

impl RdpLedger {
    pub fn new(target_delta: f64) -> Self {
        RdpLedger {
            orders: default_orders(),
            totals: vec![0.0; default_orders().len()],
            rounds_applied: 0,
            target_delta,
        }
    }

    pub fn with_orders(orders: Vec<u32>, target_delta: f64) -> Result<Self> {
        if orders.is_empty() {
            return Err(DpflError::Usage("order grid must be nonempty".into()));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) || orders[0] < 2 {
            return Err(DpflError::Usage(
                "orders must be ascending integers >= 2".into(),
            ));
        }
        let n = orders.len();
        Ok(RdpLedger {
            orders,
            totals: vec![0.0; n],
            rounds_applied: 0,
            target_delta,
        })
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn totals(&self) -> &[f64] {
        &self.totals
    }

    pub fn rounds_applied(&self) -> usize {
        self.rounds_applied
    }

    pub fn target_delta(&self) -> f64 {
        self.target_delta
    }

    /// Evaluates a per-order mechanism curve on this ledger's grid.
    pub fn curve(&self, f: impl Fn(u32) -> Result<f64>) -> Result<Vec<f64>> {
        self.orders.iter().map(|&a| f(a)).collect()
    }

    /// Adds one mechanism invocation: totals are incremented order-wise.
    pub fn accumulate(&mut self, per_round_rdp: &[f64]) -> Result<()> {
        if per_round_rdp.len() != self.orders.len() {
            return Err(DpflError::Usage(format!(
                "curve has {} entries, grid has {}",
                per_round_rdp.len(),
                self.orders.len()
            )));
        }
        if per_round_rdp.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(DpflError::Usage("rdp curve entries must be >= 0".into()));
        }
        for (total, inc) in self.totals.iter_mut().zip(per_round_rdp) {
            *total += inc;
        }
        self.rounds_applied += 1;
        Ok(())
    }
}

/// Converts accumulated RDP to an (epsilon, delta) guarantee:
/// `epsilon = max(0, min_alpha [ totals(alpha) + log(1/delta)/(alpha-1) ])`.
pub fn rdp_to_dp(ledger: &RdpLedger, delta: f64, level: PrivacyLevel) -> Result<PrivacyReport> {
    if ledger.orders.is_empty() {
        return Err(DpflError::Usage("empty ledger".into()));
    }
    if !(0.0 < delta && delta < 1.0) {
        return Err(DpflError::Usage(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    let mut best = f64::INFINITY;
    let mut best_order = ledger.orders[0];
    let ln_inv_delta = (1.0 / delta).ln();
    for (&order, &total) in ledger.orders.iter().zip(&ledger.totals) {
        let eps = total + ln_inv_delta / (f64::from(order) - 1.0);
        if eps < best {
            best = eps;
            best_order = order;
        }
    }
    Ok(PrivacyReport {
        epsilon: best.max(0.0),
        delta,
        optimal_order: best_order,
        level,
        rounds: ledger.rounds_applied,
    })
}

/// Group DP: an (epsilon, delta)-DP mechanism satisfies
/// `(k epsilon, (1 - e^{k epsilon}) / (1 - e^{epsilon}) * delta)`-DP for
/// groups of size k. `k = 0` is the zero-adversaries identity `(0, 0)`.
pub fn group_dp(epsilon: f64, delta: f64, k: u32) -> Result<(f64, f64)> {
    if epsilon < 0.0 {
        return Err(DpflError::Domain(format!(
            "epsilon must be nonnegative, got {epsilon}"
        )));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(DpflError::Domain(format!(
            "delta must lie in [0, 1], got {delta}"
        )));
    }
    if k == 0 {
        return Ok((0.0, 0.0));
    }
    let kf = f64::from(k);
    // (1 - e^{k eps}) / (1 - e^{eps}) written via expm1; exactly 1 at k = 1
    // and the geometric-sum limit k as epsilon -> 0.
    let factor = if epsilon == 0.0 {
        kf
    } else {
        (kf * epsilon).exp_m1() / epsilon.exp_m1()
    };
    Ok((kf * epsilon, factor * delta))
}

/// Parallel composition over disjoint sub-datasets: the global privacy cost
/// is the maximum per-user cost.
pub fn parallel_compose(per_user_epsilons: &[f64]) -> Result<f64> {
    if per_user_epsilons.is_empty() {
        return Err(DpflError::Usage(
            "parallel composition over an empty user set".into(),
        ));
    }
    Ok(per_user_epsilons
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// One local RDP ledger per user, plus the carried-forward per-user epsilons
/// used for parallel composition. A user's epsilon stays exactly 0 until the
/// first round it is selected.
#[derive(Debug, Clone)]
pub struct InstanceLedgerSet {
    ledgers: Vec<RdpLedger>,
    epsilons: Vec<f64>,
    optimal_orders: Vec<u32>,
}

impl InstanceLedgerSet {
    pub fn new(num_users: usize, target_delta: f64) -> Self {
        InstanceLedgerSet {
            ledgers: (0..num_users).map(|_| RdpLedger::new(target_delta)).collect(),
            epsilons: vec![0.0; num_users],
            optimal_orders: vec![default_orders()[0]; num_users],
        }
    }

    pub fn ledger_mut(&mut self, user: usize) -> &mut RdpLedger {
        &mut self.ledgers[user]
    }

    pub fn ledger(&self, user: usize) -> &RdpLedger {
        &self.ledgers[user]
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.epsilons
    }

    /// Recomputes the stored epsilon for a user that was selected this round.
    pub fn refresh(&mut self, user: usize) -> Result<()> {
        let delta = self.ledgers[user].target_delta();
        let report = rdp_to_dp(&self.ledgers[user], delta, PrivacyLevel::Instance)?;
        self.epsilons[user] = report.epsilon;
        self.optimal_orders[user] = report.optimal_order;
        Ok(())
    }

    /// `max_i epsilon_t^i`.
    pub fn global_epsilon(&self) -> Result<f64> {
        parallel_compose(&self.epsilons)
    }

    /// Report for the global mechanism after `rounds` federation rounds.
    pub fn global_report(&self, rounds: usize) -> Result<PrivacyReport> {
        let global = self.global_epsilon()?;
        let argmax = self
            .epsilons
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        Ok(PrivacyReport {
            epsilon: global,
            delta: self.ledgers[argmax].target_delta(),
            optimal_order: self.optimal_orders[argmax],
            level: PrivacyLevel::Instance,
            rounds,
        })
    }
}

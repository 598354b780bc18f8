//! Empirical risk estimation and numeric evaluation of the achievability
//! and converse bounds.
//!
//! Every unnamed absolute constant is carried in [`BoundConstants`] and
//! defaults to 1, so the bound values are shape curves rather than sharp
//! certificates.

use std::f64::consts::E;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::SpectralSummary;
use crate::tasks::{Pushforward, TargetSpec};
use crate::topology::{Coverage, SystemConfig};

/// Absolute constants plus the deviation and confidence parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConstants {
    #[serde(rename = "C1", default = "one")]
    pub c1: f64,
    #[serde(rename = "C2", default = "one")]
    pub c2: f64,
    #[serde(rename = "C3", default = "one")]
    pub c3: f64,
    #[serde(rename = "C1_prime", default = "one")]
    pub c1_prime: f64,
    #[serde(default = "one")]
    pub c: f64,
    #[serde(default = "one")]
    pub c_prime: f64,
    #[serde(rename = "C_star", default = "one")]
    pub c_star: f64,
    #[serde(rename = "C_mask", default = "one")]
    pub c_mask: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_delta_prime")]
    pub delta_prime: f64,
}

fn one() -> f64 {
    1.0
}

fn default_epsilon() -> f64 {
    0.1
}

fn default_delta_prime() -> f64 {
    0.05
}

impl Default for BoundConstants {
    fn default() -> Self {
        Self {
            c1: 1.0,
            c2: 1.0,
            c3: 1.0,
            c1_prime: 1.0,
            c: 1.0,
            c_prime: 1.0,
            c_star: 1.0,
            c_mask: 1.0,
            epsilon: default_epsilon(),
            delta_prime: default_delta_prime(),
        }
    }
}

impl BoundConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("constants.{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("epsilon", self.epsilon), ("delta_prime", self.delta_prime)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("constants.{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }

    /// Every constant with its config key, in header order.
    pub fn named(&self) -> [(&'static str, f64); 10] {
        [
            ("C1", self.c1),
            ("C2", self.c2),
            ("C3", self.c3),
            ("C1_prime", self.c1_prime),
            ("c", self.c),
            ("c_prime", self.c_prime),
            ("C_star", self.c_star),
            ("C_mask", self.c_mask),
            ("epsilon", self.epsilon),
            ("delta_prime", self.delta_prime),
        ]
    }
}

/// A bound value with its named additive terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

impl Breakdown {
    fn sum(terms: Vec<(&str, f64)>) -> Self {
        let total = terms.iter().map(|(_, v)| v).sum();
        Self {
            terms: terms.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            total,
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

/// Harmonic mean of the positive entries; `None` if all are zero.
pub fn harmonic_mean(ms: &[usize]) -> Option<f64> {
    let pos: Vec<f64> = ms.iter().filter(|&&m| m > 0).map(|&m| m as f64).collect();
    if pos.is_empty() {
        return None;
    }
    Some(pos.len() as f64 / pos.iter().map(|m| 1.0 / m).sum::<f64>())
}

fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1], got {v}")));
    }
    Ok(())
}

/// Quenched achievability bound with terms `kernel_approx`, `variance`, `bias`.
#[allow(clippy::too_many_arguments)]
pub fn quenched_upper_bound(
    k: &BoundConstants,
    b: f64,
    gamma: f64,
    m_harm: f64,
    sigma: f64,
    d_lambda: f64,
    m_train: usize,
    lambda: f64,
) -> Result<Breakdown> {
    if !(m_harm > 0.0) {
        return Err(Error::InvalidArgument("harmonic mean of received counts must be positive".into()));
    }
    check_unit_interval("gamma", gamma)?;
    if lambda < 0.0 || m_train == 0 {
        return Err(Error::InvalidArgument("need λ ≥ 0 and at least one training sample".into()));
    }
    let log_term = (2.0 / k.delta_prime).ln();
    Ok(Breakdown::sum(vec![
        ("kernel_approx", (2.0 / gamma + k.c1) * b * b / (gamma * m_harm) * log_term),
        ("variance", k.c2 * sigma * sigma * d_lambda / m_train as f64),
        ("bias", k.c3 * b * b * lambda),
    ]))
}

/// ε_cov = Δ★²/4 for an uncovered user, 0 otherwise. The separation is the
/// largest available over the missed coordinates.
pub fn coverage_floor(target: &TargetSpec, coverage: &Coverage) -> Result<f64> {
    if coverage.covered {
        return Ok(0.0);
    }
    let mut best: Option<f64> = None;
    for &l in &coverage.missed {
        if let Some(s) = target.separation_for(l) {
            best = Some(best.map_or(s, |b: f64| b.max(s)));
        }
    }
    match best {
        Some(s) => Ok(s * s / 4.0),
        None => Err(Error::Config(format!(
            "user {} misses essential coordinates {:?} but its target declares no separation; set tasks.separation",
            coverage.user + 1,
            coverage.missed.iter().map(|l| l + 1).collect::<Vec<_>>()
        ))),
    }
}

/// Per-user converse contributions max(Σ_{j>m_k} λ_j, ε_cov,k), unscaled.
pub fn converse_terms(spectral: &SpectralSummary, ms: &[usize], floors: &[f64]) -> Vec<(f64, f64)> {
    ms.iter()
        .zip(floors)
        .map(|(&m, &f)| (spectral.tail_sum(m), f))
        .collect()
}

/// Quenched converse (B²/K) Σ_k max(tail_k, ε_cov,k).
pub fn quenched_lower_bound(spectral: &SpectralSummary, ms: &[usize], b: f64, floors: &[f64]) -> Result<f64> {
    if ms.len() != floors.len() || ms.is_empty() {
        return Err(Error::InvalidArgument("need one coverage floor per user".into()));
    }
    let total: f64 = converse_terms(spectral, ms, floors).iter().map(|(t, f)| t.max(*f)).sum();
    Ok(b * b * total / ms.len() as f64)
}

/// Inputs of the annealed bounds that do not come from the system config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealedInputs {
    pub b: f64,
    pub sigma: f64,
    pub d_lambda: f64,
    pub m_train: usize,
    pub lambda: f64,
    pub r_avg: f64,
}

/// Annealed lower and upper bounds.
pub fn annealed_bounds(
    k: &BoundConstants,
    config: &SystemConfig,
    inputs: &AnnealedInputs,
    spectral: &SpectralSummary,
) -> Result<(Breakdown, Breakdown)> {
    let gamma = config.gamma();
    let delta = config.delta();
    check_unit_interval("gamma", gamma)?;
    check_unit_interval("delta", delta)?;
    let AnnealedInputs { b, sigma, d_lambda, m_train, lambda, r_avg } = *inputs;
    if m_train == 0 || lambda < 0.0 {
        return Err(Error::InvalidArgument("need λ ≥ 0 and at least one training sample".into()));
    }
    let n = config.servers as f64;
    let t = config.shots as f64;
    let exposure = gamma * n * delta;
    let m_avg = (t * n * delta).floor() as usize;

    let tail = b * b * spectral.tail_sum(m_avg);
    let indicator = if exposure <= r_avg.max(E).ln() { k.c_prime } else { 0.0 };
    let lower = Breakdown {
        terms: vec![("spectral_tail".into(), tail), ("coverage_indicator".into(), indicator)],
        total: tail.max(indicator),
    };

    let upper = Breakdown::sum(vec![
        ("kernel_approx", (2.0 / gamma + k.c1) * b * b / (gamma * t * (1.0 - k.epsilon) * n * delta)),
        ("variance", k.c2 * sigma * sigma * d_lambda / m_train as f64),
        ("bias", k.c3 * b * b * lambda),
        ("coverage", r_avg * (-exposure).exp()),
        ("degree_deviation", (-k.c * k.epsilon * k.epsilon * n * delta).exp() * k.c_star),
    ]);
    Ok((lower, upper))
}

/// Miss probability r_avg·e^{−γNδ} clamped to [0, 1] for display.
pub fn miss_probability_display(config: &SystemConfig, r_avg: f64) -> f64 {
    (r_avg * (-config.gamma() * config.servers as f64 * config.delta()).exp()).min(1.0)
}

/// Anything that predicts every output of user `k` from (x, w).
pub trait Predictor: Sync {
    fn predict_user(&self, user: usize, x: &[f64], w: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Predicts the true targets; risk is identically zero.
pub struct OraclePredictor<'a>(pub &'a [TargetSpec]);

impl Predictor for OraclePredictor<'_> {
    fn predict_user(&self, user: usize, _x: &[f64], w: &[f64], out: &mut [f64]) -> Result<()> {
        self.0[user].eval_into(w, out);
        Ok(())
    }
}

/// Predicts zero everywhere.
pub struct ZeroPredictor;

impl Predictor for ZeroPredictor {
    fn predict_user(&self, _user: usize, _x: &[f64], _w: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

/// Monte Carlo test risk: per-user mean squared error summed over output
/// components, with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalRisk {
    pub per_user: Vec<f64>,
    pub per_user_se: Vec<f64>,
    /// Mean of `per_user`.
    pub average: f64,
    /// Standard error of the user-averaged loss.
    pub average_se: f64,
    pub n_test: usize,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Draws `n_test` fresh inputs sequentially, scores them in parallel, and
/// reduces in sample order so the result does not depend on thread count.
pub fn quenched_risk<P: Predictor, R: Rng + ?Sized>(
    predictor: &P,
    targets: &[TargetSpec],
    law: &Pushforward<'_>,
    n_test: usize,
    rng: &mut R,
) -> Result<EmpiricalRisk> {
    if n_test == 0 {
        return Err(Error::InvalidArgument("need at least one test sample".into()));
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("need at least one user".into()));
    }
    let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..n_test).map(|_| law.sample_x_w(rng)).collect();
    let losses: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|(x, w)| {
            targets
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let d = t.output_dim();
                    let mut truth = vec![0.0; d];
                    let mut pred = vec![0.0; d];
                    t.eval_into(w, &mut truth);
                    predictor.predict_user(k, x, w, &mut pred)?;
                    Ok(truth.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum())
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let users = targets.len();
    let mut per_user = Vec::with_capacity(users);
    let mut per_user_se = Vec::with_capacity(users);
    for k in 0..users {
        let col: Vec<f64> = losses.iter().map(|l| l[k]).collect();
        let (m, s) = mean_se(&col);
        per_user.push(m);
        per_user_se.push(s);
    }
    let averaged: Vec<f64> = losses.iter().map(|l| l.iter().sum::<f64>() / users as f64).collect();
    let (_, average_se) = mean_se(&averaged);
    let average = per_user.iter().sum::<f64>() / users as f64;
    Ok(EmpiricalRisk {
        per_user,
        per_user_se,
        average,
        average_se,
        n_test,
    })
}

/// Full quenched report for one topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub risk: EmpiricalRisk,
    pub received: Vec<usize>,
    /// Harmonic mean over users with m_k > 0.
    pub m_harm: Option<f64>,
    pub m_arith: f64,
    /// Users (0-based) that received nothing.
    pub starved_users: Vec<usize>,
    pub spectral_tails: Vec<f64>,
    pub coverage_floors: Vec<f64>,
    pub d_lambda: f64,
    pub upper: Option<Breakdown>,
    pub lower: f64,
}

impl RiskReport {
    /// Per-user first term (2/γ + C1)B²/(γ m_k)·log(2/δ′); zero for starved users.
    pub fn per_user_first_term(&self, k: &BoundConstants, b: f64, gamma: f64) -> Vec<f64> {
        let log_term = (2.0 / k.delta_prime).ln();
        self.received
            .iter()
            .map(|&m| {
                if m == 0 {
                    0.0
                } else {
                    (2.0 / gamma + k.c1) * b * b / (gamma * m as f64) * log_term
                }
            })
            .collect()
    }
}

/// Aggregate over independent topology draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealedReport {
    pub draws: Vec<RiskReport>,
    pub miss_counts: Vec<usize>,
    pub average_risk: f64,
    pub average_risk_se: f64,
    pub average_m: f64,
    pub lower: Breakdown,
    pub upper: Breakdown,
}

impl AnnealedReport {
    pub fn aggregate(draws: Vec<RiskReport>, miss_counts: Vec<usize>, lower: Breakdown, upper: Breakdown) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::InvalidArgument("annealed run needs at least one draw".into()));
        }
        let risks: Vec<f64> = draws.iter().map(|d| d.risk.average).collect();
        let (average_risk, se_between) = mean_se(&risks);
        let average_risk_se = if draws.len() == 1 { draws[0].risk.average_se } else { se_between };
        let average_m = draws.iter().map(|d| d.m_arith).sum::<f64>() / draws.len() as f64;
        Ok(Self {
            draws,
            miss_counts,
            average_risk,
            average_risk_se,
            average_m,
            lower,
            upper,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::SpectrumSource;
    use crate::rng::seeded;
    use crate::tasks::{InputLaw, SubfunctionBank};
    use proptest::prelude::*;

    fn ones(n: usize) -> SpectralSummary {
        SpectralSummary::from_raw(vec![1.0; n], SpectrumSource::ClosedFormLinear, None)
    }

    #[test]
    fn quenched_upper_bound_examples() {
        let k = BoundConstants { delta_prime: 2.0 / E, ..Default::default() };
        let b = quenched_upper_bound(&k, 1.0, 1.0, 100.0, 0.0, 5.0, 10, 0.0).unwrap();
        assert!((b.total - 0.03).abs() < 1e-15);
        assert_eq!(b.term("variance"), Some(0.0));
        assert_eq!(b.term("bias"), Some(0.0));
        let half = quenched_upper_bound(&k, 1.0, 0.5, 200.0, 0.0, 5.0, 10, 0.0).unwrap();
        let full = quenched_upper_bound(&k, 1.0, 0.5, 100.0, 0.0, 5.0, 10, 0.0).unwrap();
        assert_eq!(half.total * 2.0, full.total);
        assert!(quenched_upper_bound(&k, 1.0, 1.0, 0.0, 0.0, 1.0, 10, 0.1).is_err());
    }

    #[test]
    fn quenched_lower_bound_examples() {
        let s = ones(100);
        assert_eq!(quenched_lower_bound(&s, &[100, 120], 1.0, &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(quenched_lower_bound(&s, &[60], 1.0, &[0.0]).unwrap(), 40.0);
        let tenth = SpectralSummary::from_raw(vec![1.0, 0.1], SpectrumSource::ClosedFormLinear, None);
        assert_eq!(quenched_lower_bound(&tenth, &[1], 1.0, &[0.25]).unwrap(), 0.25);
    }

    #[test]
    fn coverage_floor_examples() {
        let t = TargetSpec::sparse_linear(vec![1.0, 0.0]);
        let covered = Coverage { user: 0, covered: true, missed: vec![] };
        let missed = Coverage { user: 0, covered: false, missed: vec![0] };
        assert_eq!(coverage_floor(&t, &covered).unwrap(), 0.0);
        assert_eq!(coverage_floor(&t, &missed).unwrap(), 0.25);
        let two = TargetSpec { separation: Some(2.0), ..t.clone() };
        assert_eq!(coverage_floor(&two, &missed).unwrap(), 1.0);
        let rk = TargetSpec {
            function: crate::tasks::TargetFunction::RkhsExpansion {
                kernel: crate::kernels::KernelSpec::gaussian(1.0, 2),
                centers: vec![vec![0.0, 0.0]],
                alphas: vec![1.0],
            },
            norm_bound: 1.0,
            essential_set: vec![0],
            separation: None,
        };
        assert!(matches!(coverage_floor(&rk, &missed), Err(Error::Config(_))));
    }

    #[test]
    fn annealed_bound_examples() {
        // γ = 0.5, δ = 0.5, N = 20 gives γNδ = 5
        let cfg = SystemConfig::new(4, 20, 4, 2, 2, 1).unwrap();
        let inputs = AnnealedInputs { b: 1.0, sigma: 0.0, d_lambda: 0.0, m_train: 1, lambda: 0.0, r_avg: 2.0 };
        let (lower, upper) = annealed_bounds(&BoundConstants::default(), &cfg, &inputs, &ones(4)).unwrap();
        assert!((upper.term("coverage").unwrap() - 2.0 * (-5.0f64).exp()).abs() < 1e-15);
        assert!((upper.term("coverage").unwrap() - 0.01348).abs() < 1e-5);
        assert_eq!(lower.term("coverage_indicator"), Some(0.0));
        // m_avg = ⌊TNδ⌋ = 10 ≥ 4 eigenvalues
        assert_eq!(lower.total, 0.0);

        let none = AnnealedInputs { r_avg: 0.0, ..inputs };
        let (_, up0) = annealed_bounds(&BoundConstants::default(), &cfg, &none, &ones(4)).unwrap();
        assert_eq!(up0.term("coverage"), Some(0.0));

        let sparse = SystemConfig::new(4, 2, 4, 1, 2, 1).unwrap();
        let (low, _) = annealed_bounds(&BoundConstants::default(), &sparse, &inputs, &ones(4)).unwrap();
        assert_eq!(low.term("coverage_indicator"), Some(1.0));
        assert_eq!(low.term("spectral_tail"), Some(3.0));
    }

    #[test]
    fn annealed_upper_vanishes_with_servers() {
        // ε = N^{-1/4} sends ε → 0 while ε²N → ∞
        let inputs = AnnealedInputs { b: 1.0, sigma: 0.0, d_lambda: 0.0, m_train: 1, lambda: 0.0, r_avg: 1.0 };
        let mut prev = f64::INFINITY;
        for n in [10usize, 100, 1000, 10_000] {
            let k = BoundConstants { epsilon: (n as f64).powf(-0.25), ..Default::default() };
            let cfg = SystemConfig::new(2, n, 2, 2, 2, 1).unwrap();
            let (_, up) = annealed_bounds(&k, &cfg, &inputs, &ones(2)).unwrap();
            assert!(up.total < prev);
            prev = up.total;
        }
        assert!(prev < 1e-3, "{prev}");
    }

    #[test]
    fn constants_validation() {
        assert!(BoundConstants::default().validate().is_ok());
        let bad = BoundConstants { epsilon: 1.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("epsilon")));
        let neg = BoundConstants { c3: -1.0, ..Default::default() };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn oracle_and_zero_predictors() {
        let bank = SubfunctionBank::identity(3);
        let law = InputLaw::StandardNormal { dim: 3 };
        let push = Pushforward::new(&bank, &law).unwrap();
        let targets = vec![TargetSpec::sparse_linear(vec![1.0, 2.0, 0.0]), TargetSpec::sparse_linear(vec![0.0, 0.0, 1.0])];
        let oracle = quenched_risk(&OraclePredictor(&targets), &targets, &push, 100, &mut seeded(1)).unwrap();
        assert_eq!(oracle.average, 0.0);
        let zero = quenched_risk(&ZeroPredictor, &targets, &push, 40_000, &mut seeded(2)).unwrap();
        // E[F²] = ‖a‖² under isotropic inputs
        assert!((zero.per_user[0] - 5.0).abs() < 4.0 * zero.per_user_se[0]);
        assert!((zero.per_user[1] - 1.0).abs() < 4.0 * zero.per_user_se[1]);
        assert!((zero.average - (zero.per_user[0] + zero.per_user[1]) / 2.0).abs() < 1e-15);
        let double = quenched_risk(&ZeroPredictor, &targets, &push, 80_000, &mut seeded(3)).unwrap();
        let ratio = zero.per_user_se[0] / double.per_user_se[0];
        assert!((ratio - 2f64.sqrt()).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn harmonic_mean_examples() {
        assert_eq!(harmonic_mean(&[0, 0]), None);
        assert_eq!(harmonic_mean(&[2, 0, 2]), Some(2.0));
        assert!((harmonic_mean(&[1, 2]).unwrap() - 4.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn first_term_accounting_is_exact(ms in prop::collection::vec(1usize..500, 1..20), gamma in 0.05f64..1.0, b in 0.1f64..3.0) {
            let k = BoundConstants::default();
            let m_harm = harmonic_mean(&ms).unwrap();
            let first = quenched_upper_bound(&k, b, gamma, m_harm, 0.0, 0.0, 1, 0.0).unwrap().total;
            let report = RiskReport {
                risk: EmpiricalRisk { per_user: vec![], per_user_se: vec![], average: 0.0, average_se: 0.0, n_test: 1 },
                received: ms.clone(),
                m_harm: Some(m_harm),
                m_arith: 0.0,
                starved_users: vec![],
                spectral_tails: vec![],
                coverage_floors: vec![],
                d_lambda: 0.0,
                upper: None,
                lower: 0.0,
            };
            let per_user = report.per_user_first_term(&k, b, gamma);
            let avg = per_user.iter().sum::<f64>() / ms.len() as f64;
            prop_assert!((avg - first).abs() <= 1e-12 * first);
        }

        #[test]
        fn lower_bound_uses_max(tail_len in 0usize..10, floor in 0.0f64..5.0, m in 0usize..10) {
            let s = ones(tail_len);
            let v = quenched_lower_bound(&s, &[m], 1.0, &[floor]).unwrap();
            prop_assert_eq!(v, (tail_len.saturating_sub(m) as f64).max(floor));
        }
    }
}

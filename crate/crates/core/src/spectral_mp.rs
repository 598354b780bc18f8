//! Spectra of linear-scheme Gram operators compared against the
//! Marchenko–Pastur law.
//!
//! Eigenvalues are kept in descending order. The lower-tail quantile is
//! `Q(u) = ξ_(m − ⌊um⌋)`, so `∫_0^κ Q` is the energy carried by the
//! smallest κ-fraction of the spectrum.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::decoder::fit_rank_limited;
use crate::encoder::LinearBank;
use crate::error::{Error, Result};
use crate::kernels::sort_and_clamp;
use crate::quad::integrate;
use crate::tasks::{generate_dataset, InputLaw, SubfunctionBank, TargetFunction, TargetSpec};
use crate::topology::{ReceivedIndex, SystemConfig, Topology};

/// Quadrature tolerance for the MP integrals.
pub const QUAD_TOL: f64 = 1e-10;
/// CDF residual accepted by the threshold solver.
pub const THRESHOLD_TOL: f64 = 1e-8;

/// Empirical spectral distribution with descending eigenvalues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Esd {
    pub eigenvalues: Vec<f64>,
}

impl Esd {
    /// Sorts descending and clamps values below 1e-10 to zero.
    pub fn new(mut eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidArgument("spectral distribution needs at least one eigenvalue".into()));
        }
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite eigenvalue".into()));
        }
        sort_and_clamp(&mut eigenvalues);
        Ok(Self { eigenvalues })
    }

    pub fn from_matrix(g: &DMatrix<f64>) -> Result<Self> {
        Self::new(g.clone().symmetric_eigenvalues().iter().copied().collect())
    }

    pub fn m(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `j`-th smallest eigenvalue, 0-based.
    fn ascending(&self, j: usize) -> f64 {
        self.eigenvalues[self.m() - 1 - j]
    }

    /// Q(u) = ξ_(m − ⌊um⌋) with 1-based descending ξ; u = 1 maps to the largest.
    pub fn quantile(&self, u: f64) -> f64 {
        let j = ((u * self.m() as f64).floor() as usize).min(self.m() - 1);
        self.ascending(j)
    }

    pub fn mean(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.m() as f64
    }

    /// Sum of the `q` smallest eigenvalues.
    pub fn smallest_sum(&self, q: usize) -> f64 {
        self.eigenvalues.iter().rev().take(q).sum()
    }

    /// Fraction of eigenvalues at or below `t`.
    pub fn cdf(&self, t: f64) -> f64 {
        self.eigenvalues.iter().filter(|&&v| v <= t).count() as f64 / self.m() as f64
    }

    /// (1/m) Σ_{ξ ≤ t} ξ, computed directly on the atoms.
    pub fn truncated_mean(&self, t: f64) -> f64 {
        self.eigenvalues.iter().filter(|&&v| v <= t).sum::<f64>() / self.m() as f64
    }

    /// Kink locations of the quantile integral: the multiples of 1/m.
    pub fn breakpoints(&self) -> Vec<f64> {
        (0..=self.m()).map(|j| j as f64 / self.m() as f64).collect()
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::InvalidArgument(format!("kappa must lie in [0, 1], got {kappa}")));
    }
    Ok(())
}

/// ∫_0^κ Q(u) du, exact for the step quantile. At κ = q/m this is the
/// smallest-q sum divided by m.
pub fn quantile_integral(esd: &Esd, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    let m = esd.m();
    let scaled = kappa * m as f64;
    let full = (scaled.floor() as usize).min(m);
    let mut acc = esd.smallest_sum(full);
    if full < m {
        acc += (scaled - full as f64) * esd.ascending(full);
    }
    Ok(acc / m as f64)
}

/// m_eff = min(1, TγN/K).
pub fn kept_fraction(config: &SystemConfig) -> f64 {
    (config.shots as f64 * config.gamma() * config.servers as f64 / config.users as f64).min(1.0)
}

/// κ = 1 − m_eff.
pub fn discarded_fraction(config: &SystemConfig) -> f64 {
    1.0 - kept_fraction(config)
}

/// D = (1/L)·(sum of the ⌈κm⌉ smallest eigenvalues).
pub fn quenched_distortion(esd: &Esd, subfunctions: usize, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    Ok(esd.smallest_sum(discarded_count(esd.m(), kappa)) / subfunctions as f64)
}

/// ⌈κm⌉, guarding against κm landing a rounding error above an integer.
pub fn discarded_count(m: usize, kappa: f64) -> usize {
    let x = kappa * m as f64;
    let r = x.round();
    let q = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    (q as usize).min(m)
}

/// Marchenko–Pastur law with aspect ratio λ′.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpLaw {
    pub lambda_prime: f64,
    pub r: f64,
    pub b: f64,
    pub zero_atom: f64,
}

impl MpLaw {
    pub fn new(lambda_prime: f64) -> Result<Self> {
        if !(lambda_prime > 0.0 && lambda_prime.is_finite()) {
            return Err(Error::InvalidArgument(format!("aspect ratio must be positive, got {lambda_prime}")));
        }
        let s = lambda_prime.sqrt();
        Ok(Self {
            lambda_prime,
            r: (1.0 - s).powi(2),
            b: (1.0 + s).powi(2),
            zero_atom: (1.0 - 1.0 / lambda_prime).max(0.0),
        })
    }

    /// Absolutely continuous density on [r, b].
    pub fn pdf(&self, x: f64) -> f64 {
        if x <= self.r || x >= self.b || x <= 0.0 {
            return 0.0;
        }
        ((self.b - x) * (x - self.r)).sqrt() / (2.0 * std::f64::consts::PI * self.lambda_prime * x)
    }

    /// Angle θ with x = r + (b − r)·sin²θ.
    fn angle(&self, t: f64) -> f64 {
        ((t - self.r) / (self.b - self.r)).clamp(0.0, 1.0).sqrt().asin()
    }

    /// ∫_r^t x^p f(x) dx for p ∈ {0, 1} after the sin² substitution, which
    /// removes the square-root endpoint behavior.
    fn continuous_moment(&self, t: f64, power: i32) -> f64 {
        if t <= self.r {
            return 0.0;
        }
        let w = self.b - self.r;
        let c = w * w / (std::f64::consts::PI * self.lambda_prime);
        let r = self.r;
        let integrand = move |th: f64| {
            let (s, co) = th.sin_cos();
            let x = r + w * s * s;
            let core = c * s * s * co * co;
            if power == 0 {
                core / x
            } else {
                core
            }
        };
        integrate(integrand, 0.0, self.angle(t.min(self.b)), QUAD_TOL)
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        if t >= self.b {
            return 1.0;
        }
        self.zero_atom + self.continuous_moment(t, 0)
    }

    /// Total mass of the continuous part.
    pub fn continuous_mass(&self) -> f64 {
        self.continuous_moment(self.b, 0)
    }

    pub fn mean(&self) -> f64 {
        self.continuous_moment(self.b, 1)
    }

    /// t with F(t) = κ by bisection on [r, b]; κ at or below the zero atom gives 0.
    pub fn threshold(&self, kappa: f64) -> Result<f64> {
        check_kappa(kappa)?;
        if kappa <= self.zero_atom {
            return Ok(0.0);
        }
        if kappa >= 1.0 {
            return Ok(self.b);
        }
        let (mut lo, mut hi) = (self.r, self.b);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let f = self.cdf(mid);
            if (f - kappa).abs() <= 0.01 * THRESHOLD_TOL {
                return Ok(mid);
            }
            if f < kappa {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Φ(κ) = ∫_r^{t(κ)} x f(x) dx, the mean mass of the lowest κ-fraction.
    pub fn truncated_moment(&self, kappa: f64) -> Result<f64> {
        check_kappa(kappa)?;
        if kappa <= self.zero_atom {
            return Ok(0.0);
        }
        if kappa >= 1.0 {
            return Ok(self.mean());
        }
        let t = self.threshold(kappa)?;
        Ok(self.continuous_moment(t, 1))
    }

    /// Lower-tail quantile Q(u) = F⁻¹(u).
    pub fn quantile(&self, u: f64) -> Result<f64> {
        self.threshold(u)
    }
}

/// One row of the gap report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub kappa: f64,
    pub m_eff: f64,
    /// Empirical lower-tail energy ∫_0^κ Q_μ.
    pub d_q: f64,
    pub phi_mp: f64,
    pub gap: f64,
    pub envelope: f64,
}

/// G = Φ_MP(κ) − ∫_0^κ Q_μ, with envelope b·κ.
pub fn mp_gap(esd: &Esd, law: &MpLaw, kappa: f64) -> Result<GapReport> {
    let d_q = quantile_integral(esd, kappa)?;
    let phi_mp = law.truncated_moment(kappa)?;
    Ok(GapReport {
        kappa,
        m_eff: 1.0 - kappa,
        d_q,
        phi_mp,
        gap: phi_mp - d_q,
        envelope: law.b * kappa,
    })
}

/// Default κ grid: 64 evenly spaced points, the empirical breakpoints, and
/// any extra points, sorted and deduplicated.
pub fn kappa_grid(esd: &Esd, extra: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
    g.extend(esd.breakpoints());
    g.extend(extra.iter().copied().filter(|k| (0.0..=1.0).contains(k)));
    g.sort_by(f64::total_cmp);
    g.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    g
}

/// G_k = E_k E_kᵀ and its spectrum.
pub fn user_gram_linear(encode: &DMatrix<f64>) -> Result<(DMatrix<f64>, Esd)> {
    if encode.nrows() == 0 {
        return Err(Error::InvalidArgument("user receives no encoded rows".into()));
    }
    let g = encode * encode.transpose();
    let esd = Esd::from_matrix(&g)?;
    Ok((g, esd))
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Spectrum of the L × L operator (L / (m·Γ))·E_kᵀE_k, computed block by
/// block over coordinates linked through shared rows. The normalization
/// gives mean eigenvalue 1 when every row has squared norm Γ on average.
pub fn normalized_operator_spectrum(encode: &DMatrix<f64>, compute_budget: usize) -> Result<Esd> {
    let (m, l) = encode.shape();
    if m == 0 {
        return Err(Error::InvalidArgument("user receives no encoded rows".into()));
    }
    let mut parent: Vec<usize> = (0..l).collect();
    let supports: Vec<Vec<usize>> = (0..m)
        .map(|i| (0..l).filter(|&c| encode[(i, c)] != 0.0).collect())
        .collect();
    for s in &supports {
        for w in s.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            if a != b {
                parent[a] = b;
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for c in 0..l {
        let root = find(&mut parent, c);
        groups.entry(root).or_default().push(c);
    }
    let scale = l as f64 / (m as f64 * compute_budget as f64);
    let mut eig = Vec::with_capacity(l);
    for coords in groups.values() {
        let rows: Vec<usize> = (0..m)
            .filter(|&i| supports[i].first().is_some_and(|c| coords.binary_search(c).is_ok()))
            .collect();
        if rows.is_empty() {
            eig.extend(std::iter::repeat_n(0.0, coords.len()));
            continue;
        }
        let sub = DMatrix::from_fn(rows.len(), coords.len(), |i, j| encode[(rows[i], coords[j])]);
        let block = sub.tr_mul(&sub) * scale;
        eig.extend(block.symmetric_eigenvalues().iter().copied());
    }
    Esd::new(eig)
}

/// Disjoint balanced layout: coordinates split into L/Γ blocks and users
/// into K/Δ groups; server n computes block (n / groups) mod blocks and
/// links group n mod groups. Requires exact divisibility throughout.
pub fn disjoint_balanced_topology(config: &SystemConfig) -> Result<Topology> {
    let blocks = exact_ratio(config.subfunctions, config.compute_budget, "L / Gamma")?;
    let groups = exact_ratio(config.users, config.fanout_budget, "K / Delta")?;
    if !config.servers.is_multiple_of(blocks * groups) {
        return Err(Error::Config(format!(
            "disjoint balanced layout needs N divisible by (L/Gamma)(K/Delta) = {}",
            blocks * groups
        )));
    }
    layout(config, blocks, groups, |b| b)
}

/// Same budgets, but pairs of blocks share one support, so the odd blocks
/// are never computed and the even blocks carry twice the rows.
pub fn aliased_topology(config: &SystemConfig) -> Result<Topology> {
    let blocks = exact_ratio(config.subfunctions, config.compute_budget, "L / Gamma")?;
    let groups = exact_ratio(config.users, config.fanout_budget, "K / Delta")?;
    if blocks < 2 {
        return Err(Error::Config("aliasing needs at least two coordinate blocks".into()));
    }
    layout(config, blocks, groups, |b| b - b % 2)
}

fn exact_ratio(a: usize, b: usize, what: &str) -> Result<usize> {
    if b == 0 || !a.is_multiple_of(b) {
        return Err(Error::Config(format!("{what} must be an integer, got {a} / {b}")));
    }
    Ok(a / b)
}

fn layout(config: &SystemConfig, blocks: usize, groups: usize, support_of: impl Fn(usize) -> usize) -> Result<Topology> {
    let g = config.compute_budget;
    let d = config.fanout_budget;
    let mut assignment = Vec::with_capacity(config.servers);
    let mut links = Vec::with_capacity(config.servers);
    for n in 0..config.servers {
        let block = support_of((n / groups) % blocks);
        let group = n % groups;
        assignment.push((block * g..(block + 1) * g).collect());
        links.push((group * d..(group + 1) * d).collect());
    }
    Topology::from_sets(config, assignment, links)
}

/// Outcome of the end-to-end linear distortion run for one user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionCheck {
    pub m: usize,
    pub kappa: f64,
    pub retained_rank: usize,
    /// Population risk of the trained decoder summed over outputs, divided by L.
    pub pipeline: f64,
    /// (1/L)·(sum of the ⌈κm⌉ smallest eigenvalues of E_kE_kᵀ).
    pub eigen_sum: f64,
}

/// Trains a rank-limited ridge decoder for user `k` on isotropic inputs,
/// with the received features themselves as targets, and compares its
/// population risk with the discarded eigen-energy of the user Gram.
pub fn distortion_pipeline<R: rand::Rng + ?Sized>(
    bank: &LinearBank,
    received: &ReceivedIndex,
    kappa: f64,
    samples: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<DistortionCheck> {
    check_kappa(kappa)?;
    let e = bank.user_matrix(received);
    let (g, esd) = user_gram_linear(&e)?;
    let (m, l) = e.shape();
    let q = discarded_count(m, kappa);
    let rows: Vec<Vec<f64>> = (0..m).map(|i| e.row(i).iter().copied().collect()).collect();
    let norm = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max).sqrt();
    let target = TargetSpec::new(TargetFunction::LinearMap { rows }, norm.max(f64::MIN_POSITIVE), (0..l).collect(), None)?;
    let push_bank = SubfunctionBank::identity(l);
    let law = InputLaw::StandardNormal { dim: l };
    let data = generate_dataset(&push_bank, std::slice::from_ref(&target), &law, samples, 0.0, rng)?;
    let w = DMatrix::from_fn(samples, l, |i, j| data.ws[i][j]);
    let z = &w * e.transpose();
    let model = fit_rank_limited(&z, &data.labels[0], lambda, m - q)?;
    // isotropic inputs: E‖(C − I)ᵀΦ‖² = tr((C − I)ᵀ G (C − I))
    let resid = &model.coef - DMatrix::<f64>::identity(m, m);
    let risk = (resid.transpose() * &g * &resid).trace();
    Ok(DistortionCheck {
        m,
        kappa,
        retained_rank: m - q,
        pipeline: risk / l as f64,
        eigen_sum: quenched_distortion(&esd, l, kappa)?,
    })
}

/// Largest α such that Q_MP(u) − Q_μ(u) ≥ α for u on a grid over [0, η).
pub fn quantile_dominance(esd: &Esd, law: &MpLaw, eta: f64, grid: usize) -> Result<f64> {
    check_kappa(eta)?;
    let mut alpha = f64::INFINITY;
    for i in 0..grid {
        let u = eta * i as f64 / grid as f64;
        alpha = alpha.min(law.quantile(u)? - esd.quantile(u));
    }
    Ok(alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn esd(v: &[f64]) -> Esd {
        Esd::new(v.to_vec()).unwrap()
    }

    #[test]
    fn quantile_integral_examples() {
        let e = esd(&[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(quantile_integral(&e, 0.5).unwrap(), 0.75);
        assert_eq!(quantile_integral(&e, 0.0).unwrap(), 0.0);
        assert_eq!(quantile_integral(&e, 1.0).unwrap(), e.mean());
        assert_eq!(e.quantile(0.0), 1.0);
        assert_eq!(e.quantile(0.99), 4.0);
        assert!(quantile_integral(&e, 1.5).is_err());
    }

    #[test]
    fn distortion_examples() {
        let full = SystemConfig::new(4, 4, 8, 8, 4, 1).unwrap();
        assert_eq!(discarded_fraction(&full), 0.0);
        let id = esd(&[1.0; 10]);
        assert_eq!(quenched_distortion(&id, 10, 0.0).unwrap(), 0.0);
        assert!((quenched_distortion(&id, 10, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(discarded_count(10, 0.3), 3);
        assert_eq!(discarded_count(10, 0.31), 4);
    }

    #[test]
    fn gram_examples() {
        let (_, e) = user_gram_linear(&DMatrix::identity(5, 5)).unwrap();
        assert!(e.eigenvalues.iter().all(|&v| (v - 1.0).abs() < 1e-12));

        // orthogonal rows of squared norm Γ = 4 over L = 8
        let mut rows = DMatrix::zeros(2, 8);
        for c in 0..4 {
            rows[(0, c)] = 1.0;
            rows[(1, c + 4)] = 1.0;
        }
        let (_, e) = user_gram_linear(&rows).unwrap();
        assert!(e.eigenvalues.iter().all(|&v| (v - 4.0).abs() < 1e-12));

        let mut rng = seeded(3);
        let base = DMatrix::from_fn(3, 6, |_, _| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng));
        let dup = DMatrix::from_fn(4, 6, |i, j| base[(i.min(2), j)]);
        let (_, a) = user_gram_linear(&base).unwrap();
        let (_, b) = user_gram_linear(&dup).unwrap();
        let zeros = |e: &Esd| e.eigenvalues.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros(&b) > zeros(&a));
        assert!(user_gram_linear(&DMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn mp_mass_and_mean() {
        for lp in [0.25, 0.5, 1.0, 2.0] {
            let law = MpLaw::new(lp).unwrap();
            assert!((law.continuous_mass() - (1.0 - law.zero_atom)).abs() < 1e-8, "{lp}");
            assert!((law.mean() - 1.0).abs() < 1e-8, "{lp}");
            assert_eq!(law.cdf(law.b), 1.0);
            assert_eq!(law.cdf(law.b + 1.0), 1.0);
        }
        let one = MpLaw::new(1.0).unwrap();
        assert_eq!(one.r, 0.0);
        assert_eq!(one.b, 4.0);
        assert_eq!(one.cdf(0.0), 0.0);
    }

    #[test]
    fn mp_cdf_matches_direct_density_quadrature() {
        let law = MpLaw::new(0.5).unwrap();
        for t in [0.2, 0.7, 1.3, 2.5] {
            // independent check: plain integration of the density with no substitution
            let direct = integrate(|x| law.pdf(x), law.r, t, 1e-12);
            assert!((law.cdf(t) - direct).abs() < 1e-7, "{t}");
        }
    }

    #[test]
    fn truncated_moment_closed_form() {
        // x f(x) dx = c sin²θ cos²θ dθ, whose antiderivative is c(θ/8 − sin 4θ/32)
        let law = MpLaw::new(0.5).unwrap();
        let w = law.b - law.r;
        let c = w * w / (std::f64::consts::PI * law.lambda_prime);
        for kappa in [0.1, 0.3, 0.6, 0.9] {
            let t = law.threshold(kappa).unwrap();
            let th = ((t - law.r) / w).sqrt().asin();
            let exact = c * (th / 8.0 - (4.0 * th).sin() / 32.0);
            assert!((law.truncated_moment(kappa).unwrap() - exact).abs() < 1e-9, "{kappa}");
        }
    }

    #[test]
    fn threshold_examples() {
        let one = MpLaw::new(1.0).unwrap();
        assert_eq!(one.threshold(1.0).unwrap(), one.b);
        let t = one.threshold(0.5).unwrap();
        assert!((one.cdf(t) - 0.5).abs() <= THRESHOLD_TOL);
        let wide = MpLaw::new(2.0).unwrap();
        assert_eq!(wide.threshold(wide.zero_atom).unwrap(), 0.0);
        assert_eq!(wide.threshold(0.2).unwrap(), 0.0);
        assert!(one.threshold(-0.1).is_err());
    }

    #[test]
    fn truncated_moment_examples() {
        let law = MpLaw::new(0.5).unwrap();
        assert_eq!(law.truncated_moment(0.0).unwrap(), 0.0);
        assert!((law.truncated_moment(1.0).unwrap() - 1.0).abs() < 1e-8);
        let mut prev = 0.0;
        for i in 1..=20 {
            let v = law.truncated_moment(i as f64 / 20.0).unwrap();
            assert!(v >= prev);
            assert!(v <= law.b * i as f64 / 20.0 + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn gap_zero_at_zero_kappa() {
        let e = esd(&[0.5, 1.0, 1.5]);
        let g = mp_gap(&e, &MpLaw::new(0.5).unwrap(), 0.0).unwrap();
        assert_eq!((g.gap, g.d_q, g.phi_mp, g.envelope), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn layouts_have_expected_structure() {
        let cfg = SystemConfig::new(4, 8, 8, 2, 2, 3).unwrap();
        let balanced = disjoint_balanced_topology(&cfg).unwrap();
        assert_eq!(balanced.assignment[0], vec![0, 1]);
        assert_eq!(balanced.assignment[1], vec![0, 1]);
        assert_eq!(balanced.assignment[2], vec![2, 3]);
        assert_eq!(balanced.links[0], vec![0, 1]);
        assert_eq!(balanced.links[1], vec![2, 3]);
        let ali = aliased_topology(&cfg).unwrap();
        assert_eq!(ali.assignment[2], vec![0, 1]);
        assert_eq!(ali.assignment[4], vec![4, 5]);
        let bad = SystemConfig::new(4, 8, 9, 2, 2, 3).unwrap();
        assert!(matches!(disjoint_balanced_topology(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn blockwise_spectrum_matches_dense() {
        let cfg = SystemConfig::new(4, 8, 8, 2, 2, 3).unwrap();
        let topo = disjoint_balanced_topology(&cfg).unwrap();
        let bank = LinearBank::draw(&cfg, &topo, &mut seeded(4));
        let idx = topo.received_index(&cfg, 0).unwrap();
        let e = bank.user_matrix(&idx);
        let fast = normalized_operator_spectrum(&e, cfg.compute_budget).unwrap();
        let scale = cfg.subfunctions as f64 / (e.nrows() as f64 * cfg.compute_budget as f64);
        let dense = Esd::from_matrix(&(e.tr_mul(&e) * scale)).unwrap();
        for (a, b) in fast.eigenvalues.iter().zip(&dense.eigenvalues) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn distortion_pipeline_small() {
        let cfg = SystemConfig::new(2, 6, 12, 4, 1, 2).unwrap();
        let topo = Topology::sample(&cfg, &mut seeded(1), &mut seeded(2));
        let bank = LinearBank::draw(&cfg, &topo, &mut seeded(3));
        let idx = topo.received_index(&cfg, 0).unwrap();
        let out = distortion_pipeline(&bank, &idx, 0.5, 20_000, 1e-8, &mut seeded(4)).unwrap();
        assert!((out.pipeline - out.eigen_sum).abs() <= 0.05 * out.eigen_sum, "{out:?}");
    }

    proptest! {
        #[test]
        fn smallest_sum_equals_integral_on_grid(vals in prop::collection::vec(0.0f64..10.0, 1..30), q_frac in 0.0f64..=1.0) {
            let e = Esd::new(vals).unwrap();
            let q = (q_frac * e.m() as f64).floor() as usize;
            let kappa = q as f64 / e.m() as f64;
            let lhs = e.smallest_sum(q) / e.m() as f64;
            prop_assert!((lhs - quantile_integral(&e, kappa).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn hardy_littlewood_at_midpoints(vals in prop::collection::vec(0.0f64..10.0, 2..30)) {
            let e = Esd::new(vals).unwrap();
            for w in e.eigenvalues.windows(2) {
                if w[0] > w[1] {
                    let t = 0.5 * (w[0] + w[1]);
                    let direct = e.truncated_mean(t);
                    let via_quantile = quantile_integral(&e, e.cdf(t)).unwrap();
                    prop_assert!((direct - via_quantile).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn gap_piecewise_linear_between_breakpoints(vals in prop::collection::vec(0.1f64..4.0, 2..12), j in 0usize..11, s in 0.0f64..1.0) {
            let e = Esd::new(vals).unwrap();
            let m = e.m();
            let j = j % m;
            let (a, b) = (j as f64 / m as f64, (j + 1) as f64 / m as f64);
            let k = a + s * (b - a);
            let ia = quantile_integral(&e, a).unwrap();
            let ib = quantile_integral(&e, b).unwrap();
            let ik = quantile_integral(&e, k).unwrap();
            prop_assert!((ik - (ia + s * (ib - ia))).abs() <= 1e-12);
        }

        #[test]
        fn envelope_holds(lp in 0.1f64..3.0, kappa in 0.0f64..=1.0, vals in prop::collection::vec(0.0f64..5.0, 1..20)) {
            let law = MpLaw::new(lp).unwrap();
            let e = Esd::new(vals).unwrap();
            let g = mp_gap(&e, &law, kappa).unwrap();
            prop_assert!(g.phi_mp >= 0.0);
            prop_assert!(g.phi_mp <= law.b * kappa + 1e-8);
            prop_assert!(g.gap <= g.envelope + 1e-8);
            prop_assert_eq!(g.gap, g.phi_mp - g.d_q);
        }
    }
}

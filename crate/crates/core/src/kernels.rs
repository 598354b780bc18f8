//! Shift-invariant kernels, their Bochner spectral measures, and
//! kernel-operator eigenvalue estimation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::tasks::Pushforward;

/// Eigenvalues below this magnitude are treated as zero.
pub const EIGEN_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
    Laplacian,
    Linear,
}

impl KernelFamily {
    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Laplacian => "laplacian",
            KernelFamily::Linear => "linear",
        }
    }

    pub fn is_shift_invariant(self) -> bool {
        !matches!(self, KernelFamily::Linear)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Length scale; ignored by the linear kernel.
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    /// Input dimension L.
    #[serde(default)]
    pub dimension: usize,
}

fn default_bandwidth() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64, dimension: usize) -> Result<Self> {
        let spec = Self {
            family,
            bandwidth,
            dimension,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(bandwidth: f64, dimension: usize) -> Self {
        Self::new(KernelFamily::Gaussian, bandwidth, dimension).expect("valid gaussian kernel")
    }

    pub fn laplacian(bandwidth: f64, dimension: usize) -> Self {
        Self::new(KernelFamily::Laplacian, bandwidth, dimension).expect("valid laplacian kernel")
    }

    pub fn linear(dimension: usize) -> Self {
        Self::new(KernelFamily::Linear, 1.0, dimension).expect("valid linear kernel")
    }

    pub fn validate(&self) -> Result<()> {
        if self.family.is_shift_invariant() && !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Config(format!(
                "kernel.bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }

    /// K(u, v) without dimension checks.
    pub fn eval_unchecked(&self, u: &[f64], v: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * self.bandwidth * self.bandwidth)).exp()
            }
            KernelFamily::Laplacian => {
                let d1: f64 = u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum();
                (-d1 / self.bandwidth).exp()
            }
            KernelFamily::Linear => u.iter().zip(v).map(|(a, b)| a * b).sum(),
        }
    }

    pub fn eval(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        check_dim(u.len(), v.len())?;
        if self.dimension != 0 {
            check_dim(self.dimension, u.len())?;
        }
        Ok(self.eval_unchecked(u, v))
    }

    /// Draws one frequency of dimension `dim` from the Bochner measure of
    /// the `dim`-dimensional kernel of this family.
    pub fn sample_frequency<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Result<Vec<f64>> {
        match self.family {
            KernelFamily::Gaussian => {
                let scale = 1.0 / self.bandwidth;
                Ok((0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * scale
                    })
                    .collect())
            }
            KernelFamily::Laplacian => {
                let cauchy = Cauchy::new(0.0, 1.0 / self.bandwidth)
                    .map_err(|e| Error::Numeric(format!("cauchy law: {e}")))?;
                Ok((0..dim).map(|_| cauchy.sample(rng)).collect())
            }
            KernelFamily::Linear => Err(Error::NoSpectralMeasure("linear")),
        }
    }

    /// V_K(u,v) = K(u,u) + K(v,v) − 2K(u,v).
    pub fn variance_proxy(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        if !self.family.is_shift_invariant() {
            return Err(Error::NoSpectralMeasure(self.family.name()));
        }
        check_dim(u.len(), v.len())?;
        Ok(self.eval_unchecked(u, u) + self.eval_unchecked(v, v) - 2.0 * self.eval_unchecked(u, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumSource {
    ClosedFormLinear,
    NystromEstimate,
}

/// Nonincreasing, nonnegative eigenvalues of a kernel integral operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub eigenvalues: Vec<f64>,
    pub source: SpectrumSource,
    pub sample_size: Option<usize>,
    /// Set when every sampled point coincided.
    pub degenerate: bool,
}

impl SpectralSummary {
    /// Sorts descending and clamps tiny or negative values to zero.
    pub fn from_raw(mut eigenvalues: Vec<f64>, source: SpectrumSource, sample_size: Option<usize>) -> Self {
        sort_and_clamp(&mut eigenvalues);
        Self {
            eigenvalues,
            source,
            sample_size,
            degenerate: false,
        }
    }

    /// Σ_{j>m} λ_j over the available eigenvalues.
    pub fn tail_sum(&self, m: usize) -> f64 {
        self.eigenvalues.iter().skip(m).sum()
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }
}

pub(crate) fn sort_and_clamp(values: &mut [f64]) {
    for v in values.iter_mut() {
        if *v < EIGEN_CLAMP {
            *v = 0.0;
        }
    }
    values.sort_by(|a, b| b.total_cmp(a));
}

/// Eigenvalues of the kernel integral operator under the pushforward law of w(X).
///
/// Linear kernel with isotropic inputs uses the closed form (L ones); every
/// other case uses the Nyström estimate, the spectrum of (1/m)[K(w_i, w_j)].
pub fn operator_eigenvalues<R: Rng + ?Sized>(
    spec: &KernelSpec,
    law: &Pushforward<'_>,
    m_samples: usize,
    rng: &mut R,
) -> Result<SpectralSummary> {
    if spec.family == KernelFamily::Linear && law.is_isotropic() {
        return Ok(SpectralSummary::from_raw(
            vec![1.0; law.output_dim()],
            SpectrumSource::ClosedFormLinear,
            None,
        ));
    }
    if m_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "Nyström estimate needs at least 2 samples, got {m_samples}"
        )));
    }
    let points: Vec<Vec<f64>> = (0..m_samples).map(|_| law.sample_w(rng)).collect();
    Ok(nystrom_spectrum(spec, &points))
}

/// Spectrum of the normalized Gram (1/m)[K(w_i, w_j)] over given points.
pub fn nystrom_spectrum(spec: &KernelSpec, points: &[Vec<f64>]) -> SpectralSummary {
    let m = points.len();
    let gram = DMatrix::from_fn(m, m, |i, j| spec.eval_unchecked(&points[i], &points[j]) / m as f64);
    let degenerate = points.windows(2).all(|w| w[0] == w[1]);
    let eig = gram.symmetric_eigenvalues();
    let mut summary = SpectralSummary::from_raw(
        eig.iter().copied().collect(),
        SpectrumSource::NystromEstimate,
        Some(m),
    );
    summary.degenerate = degenerate;
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tasks::{InputLaw, SubfunctionBank};
    use proptest::prelude::*;

    #[test]
    fn evaluation_examples() {
        let g = KernelSpec::gaussian(1.0, 2);
        assert_eq!(g.eval(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 1.0);
        let lin = KernelSpec::linear(2);
        assert_eq!(lin.eval(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = g.eval(&[0.0, 0.0], &[2.0, 0.0]).unwrap();
        assert!((v - 0.135_335_283_236_612_7).abs() < 1e-15);
        assert!(matches!(g.eval(&[0.0], &[0.0, 1.0]), Err(Error::Dimension { .. })));
        let lap = KernelSpec::laplacian(2.0, 2);
        assert!((lap.eval(&[0.0, 0.0], &[1.0, -1.0]).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn variance_proxy_examples() {
        let g = KernelSpec::gaussian(1.0, 1);
        assert_eq!(g.variance_proxy(&[0.5], &[0.5]).unwrap(), 0.0);
        assert!((g.variance_proxy(&[0.0], &[1e3]).unwrap() - 2.0).abs() < 1e-12);
        let v = g.variance_proxy(&[0.0], &[1.0]).unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-15);
        assert!((v - 0.786_938_680_574_733).abs() < 1e-12);
        assert!(KernelSpec::linear(1).variance_proxy(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn linear_has_no_frequency_law() {
        let lin = KernelSpec::linear(3);
        assert!(matches!(
            lin.sample_frequency(3, &mut seeded(0)),
            Err(Error::NoSpectralMeasure(_))
        ));
    }

    #[test]
    fn gaussian_frequency_moments() {
        let g = KernelSpec::gaussian(1.0, 1);
        let mut rng = seeded(11);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| g.sample_frequency(1, &mut rng).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
        assert!((var - 1.0).abs() < 0.01, "variance {var}");
    }

    fn bochner_check(spec: KernelSpec, h: &[f64], expected: f64, seed: u64) {
        let mut rng = seeded(seed);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let w = spec.sample_frequency(h.len(), &mut rng).unwrap();
            let c = w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>().cos();
            sum += c;
            sq += c * c;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - expected).abs() <= 3.0 * se, "mean {mean} vs {expected} (se {se})");
    }

    #[test]
    fn bochner_identity_gaussian() {
        bochner_check(KernelSpec::gaussian(1.0, 2), &[0.6, 0.8], (-0.5f64).exp(), 21);
    }

    #[test]
    fn bochner_identity_laplacian() {
        // Cauchy(0, 1) characteristic function at unit displacement is e^{-1}
        bochner_check(KernelSpec::laplacian(1.0, 2), &[1.0, 0.0], (-1.0f64).exp(), 22);
    }

    #[test]
    fn linear_isotropic_closed_form() {
        let bank = SubfunctionBank::identity(5);
        let law = InputLaw::StandardNormal { dim: 5 };
        let push = Pushforward::new(&bank, &law).unwrap();
        let s = operator_eigenvalues(&KernelSpec::linear(5), &push, 10, &mut seeded(0)).unwrap();
        assert_eq!(s.eigenvalues, vec![1.0; 5]);
        assert_eq!(s.source, SpectrumSource::ClosedFormLinear);
    }

    #[test]
    fn nystrom_rejects_tiny_samples_and_flags_degenerate() {
        let bank = SubfunctionBank::identity(1);
        let law = InputLaw::StandardNormal { dim: 1 };
        let push = Pushforward::new(&bank, &law).unwrap();
        let g = KernelSpec::gaussian(1.0, 1);
        assert!(operator_eigenvalues(&g, &push, 1, &mut seeded(0)).is_err());
        let same = vec![vec![0.7]; 6];
        let s = nystrom_spectrum(&g, &same);
        assert!(s.degenerate);
        assert!((s.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!(s.eigenvalues[1..].iter().all(|&v| v == 0.0));
    }

    /// Mehler closed form for a unit gaussian kernel on N(0,1) inputs:
    /// λ_j ∝ (b/A)^j with a = 1/4, b = 1/2, A = a + b + sqrt(a² + 2ab).
    fn mehler_ratio() -> f64 {
        let (a, b) = (0.25f64, 0.5f64);
        let big_a = a + b + (a * a + 2.0 * a * b).sqrt();
        b / big_a
    }

    /// One 1000-point half has a ratio spread of about 4%, so the halves are
    /// compared after averaging over ten independent 2000-point draws.
    #[test]
    fn nystrom_ratio_is_stable_and_matches_mehler() {
        let g = KernelSpec::gaussian(1.0, 1);
        let mut rng = seeded(99);
        let reps = 10;
        let (mut r1, mut r2) = (0.0, 0.0);
        for _ in 0..reps {
            let pts: Vec<Vec<f64>> = (0..2000)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    vec![z]
                })
                .collect();
            let first = nystrom_spectrum(&g, &pts[..1000]);
            let second = nystrom_spectrum(&g, &pts[1000..]);
            r1 += first.eigenvalues[1] / first.eigenvalues[0] / reps as f64;
            r2 += second.eigenvalues[1] / second.eigenvalues[0] / reps as f64;
        }
        assert!((r1 - r2).abs() / r2 < 0.05, "{r1} vs {r2}");
        let mehler = mehler_ratio();
        let pooled = 0.5 * (r1 + r2);
        assert!((pooled - mehler).abs() / mehler < 0.05, "{pooled} vs Mehler {mehler}");
    }

    proptest! {
        #[test]
        fn nystrom_trace_identity_and_nonneg(seed in any::<u64>(), m in 2usize..40, bw in 0.2f64..3.0) {
            let mut rng = seeded(seed);
            let pts: Vec<Vec<f64>> = (0..m).map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                vec![a, b]
            }).collect();
            for spec in [KernelSpec::gaussian(bw, 2), KernelSpec::laplacian(bw, 2)] {
                let s = nystrom_spectrum(&spec, &pts);
                prop_assert!(s.eigenvalues.iter().all(|&v| v >= 0.0));
                prop_assert!(s.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
                // unit diagonal: trace of (1/m)K is exactly 1 up to clamping
                prop_assert!((s.trace() - 1.0).abs() < 1e-8 * m as f64);
            }
        }

        #[test]
        fn kernel_symmetry_and_bounds(u in prop::collection::vec(-5.0f64..5.0, 3), v in prop::collection::vec(-5.0f64..5.0, 3), bw in 0.1f64..4.0) {
            for spec in [KernelSpec::gaussian(bw, 3), KernelSpec::laplacian(bw, 3)] {
                let k = spec.eval(&u, &v).unwrap();
                prop_assert!((k - spec.eval(&v, &u).unwrap()).abs() <= 1e-15);
                prop_assert!(k.abs() <= 1.0);
                let vk = spec.variance_proxy(&u, &v).unwrap();
                prop_assert!((vk - spec.variance_proxy(&v, &u).unwrap()).abs() <= 1e-15);
                prop_assert!((0.0..=2.0).contains(&vk));
            }
        }
    }
}

//! Server-side encoders.
//!
//! A random-feature bank holds one frequency and phase per `(server, shot)`
//! slot. Frequencies are zero outside the server's coordinate set, and each
//! transmitted scalar is `sqrt(2/γ) cos(ω̃ᵀw + b)`. The linear-limit bank
//! replaces the cosine with a Gaussian linear form on the same support.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernels::KernelSpec;
use crate::topology::{ReceivedIndex, SystemConfig, Topology};

/// How masked frequencies are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Draw on ℝ^|S| from the |S|-dimensional spectral measure, then embed.
    #[default]
    MaskedBochner,
    /// Draw on ℝ^L from the full spectral measure, then zero off the mask.
    Truncated,
}

/// One frequency restricted to its support: `values[i]` sits at coordinate `support[i]`.
fn draw_masked<R: Rng + ?Sized>(
    kernel: &KernelSpec,
    mode: SamplingMode,
    support: &[usize],
    l: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    match mode {
        SamplingMode::MaskedBochner => kernel.sample_frequency(support.len(), rng),
        SamplingMode::Truncated => {
            let full = kernel.sample_frequency(l, rng)?;
            Ok(support.iter().map(|&c| full[c]).collect())
        }
    }
}

fn sparse_dot(support: &[usize], values: &[f64], w: &[f64]) -> f64 {
    support.iter().zip(values).map(|(&c, v)| v * w[c]).sum()
}

/// Random Fourier features for every `(server, shot)` slot.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub kernel: KernelSpec,
    pub mode: SamplingMode,
    pub gamma: f64,
    pub subfunctions: usize,
    pub servers: usize,
    pub shots: usize,
    /// Sorted coordinate set of each server.
    pub masks: Vec<Vec<usize>>,
    /// On-mask frequency entries, indexed `n * shots + t`.
    freqs: Vec<Vec<f64>>,
    phases: Vec<f64>,
}

impl FeatureBank {
    /// Draws frequencies then phases for each slot in `(n, t)` order.
    pub fn draw<R: Rng + ?Sized>(
        config: &SystemConfig,
        topology: &Topology,
        kernel: &KernelSpec,
        mode: SamplingMode,
        rng: &mut R,
    ) -> Result<Self> {
        if !kernel.family.is_shift_invariant() {
            return Err(Error::NoSpectralMeasure(kernel.family.name()));
        }
        let slots = config.servers * config.shots;
        let mut freqs = Vec::with_capacity(slots);
        let mut phases = Vec::with_capacity(slots);
        for mask in &topology.assignment {
            for _ in 0..config.shots {
                freqs.push(draw_masked(kernel, mode, mask, config.subfunctions, rng)?);
                phases.push(rng.random_range(0.0..TAU));
            }
        }
        Ok(Self {
            kernel: *kernel,
            mode,
            gamma: config.gamma(),
            subfunctions: config.subfunctions,
            servers: config.servers,
            shots: config.shots,
            masks: topology.assignment.clone(),
            freqs,
            phases,
        })
    }

    fn slot(&self, n: usize, t: usize) -> usize {
        n * self.shots + t
    }

    pub fn scale(&self) -> f64 {
        (2.0 / self.gamma).sqrt()
    }

    /// ω̃_{n,t} embedded in ℝ^L.
    pub fn masked_frequency(&self, n: usize, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.subfunctions];
        for (&c, &v) in self.masks[n].iter().zip(&self.freqs[self.slot(n, t)]) {
            out[c] = v;
        }
        out
    }

    pub fn phase(&self, n: usize, t: usize) -> f64 {
        self.phases[self.slot(n, t)]
    }

    /// Overrides one phase; used to build constructed examples.
    pub fn set_phase(&mut self, n: usize, t: usize, b: f64) {
        let s = self.slot(n, t);
        self.phases[s] = b;
    }

    fn feature_unchecked(&self, n: usize, t: usize, w: &[f64]) -> f64 {
        let s = self.slot(n, t);
        self.scale() * (sparse_dot(&self.masks[n], &self.freqs[s], w) + self.phases[s]).cos()
    }

    /// z_{n,t}(w).
    pub fn feature(&self, n: usize, t: usize, w: &[f64]) -> Result<f64> {
        check_dim(self.subfunctions, w.len())?;
        Ok(self.feature_unchecked(n, t, w))
    }

    /// All transmitted scalars for one sample, shape N × T.
    pub fn encode_sample(&self, w: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.subfunctions, w.len())?;
        Ok(DMatrix::from_fn(self.servers, self.shots, |n, t| self.feature_unchecked(n, t, w)))
    }

    /// Φ_k(w) in received-index order.
    pub fn user_features(&self, received: &ReceivedIndex, w: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.subfunctions, w.len())?;
        Ok(received
            .pairs
            .iter()
            .map(|&(n, t)| self.feature_unchecked(n, t, w))
            .collect())
    }

    /// K̃_k(w, w′) = Φ_k(w)ᵀΦ_k(w′) / m_k.
    pub fn mc_kernel(&self, received: &ReceivedIndex, w: &[f64], w2: &[f64]) -> Result<f64> {
        if received.m() == 0 {
            return Err(Error::InvalidArgument(format!(
                "user {} receives no features",
                received.user + 1
            )));
        }
        let a = self.user_features(received, w)?;
        let b = self.user_features(received, w2)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / received.m() as f64)
    }
}

/// Z = φ(u)φ(v) for one freshly drawn masked feature.
pub fn atom_product<R: Rng + ?Sized>(
    kernel: &KernelSpec,
    mode: SamplingMode,
    mask: &[usize],
    gamma: f64,
    u: &[f64],
    v: &[f64],
    rng: &mut R,
) -> Result<f64> {
    let omega = draw_masked(kernel, mode, mask, u.len(), rng)?;
    let b = rng.random_range(0.0..TAU);
    let zu = (sparse_dot(mask, &omega, u) + b).cos();
    let zv = (sparse_dot(mask, &omega, v) + b).cos();
    Ok(2.0 / gamma * zu * zv)
}

/// Kernel of the same family evaluated on the masked coordinates only.
pub fn masked_kernel(kernel: &KernelSpec, mask: &[usize], u: &[f64], v: &[f64]) -> f64 {
    let us: Vec<f64> = mask.iter().map(|&c| u[c]).collect();
    let vs: Vec<f64> = mask.iter().map(|&c| v[c]).collect();
    kernel.eval_unchecked(&us, &vs)
}

/// Linear-limit code: z_{n,t} = c_{n,t}ᵀ w with Gaussian c on S_n.
#[derive(Debug, Clone)]
pub struct LinearBank {
    pub subfunctions: usize,
    pub servers: usize,
    pub shots: usize,
    pub masks: Vec<Vec<usize>>,
    coeffs: Vec<Vec<f64>>,
}

impl LinearBank {
    pub fn draw<R: Rng + ?Sized>(config: &SystemConfig, topology: &Topology, rng: &mut R) -> Self {
        let mut coeffs = Vec::with_capacity(config.servers * config.shots);
        for mask in &topology.assignment {
            for _ in 0..config.shots {
                coeffs.push(mask.iter().map(|_| StandardNormal.sample(rng)).collect());
            }
        }
        Self {
            subfunctions: config.subfunctions,
            servers: config.servers,
            shots: config.shots,
            masks: topology.assignment.clone(),
            coeffs,
        }
    }

    /// Builds a bank from explicit on-mask coefficients indexed `n * shots + t`.
    pub fn from_coefficients(
        subfunctions: usize,
        shots: usize,
        masks: Vec<Vec<usize>>,
        coeffs: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_dim(masks.len() * shots, coeffs.len())?;
        for (s, c) in coeffs.iter().enumerate() {
            check_dim(masks[s / shots].len(), c.len())?;
        }
        Ok(Self {
            subfunctions,
            servers: masks.len(),
            shots,
            masks,
            coeffs,
        })
    }

    /// Row of the encoding matrix for slot `(n, t)`, embedded in ℝ^L.
    pub fn row(&self, n: usize, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.subfunctions];
        for (&c, &v) in self.masks[n].iter().zip(&self.coeffs[n * self.shots + t]) {
            out[c] = v;
        }
        out
    }

    /// E_k: one row per received slot.
    pub fn user_matrix(&self, received: &ReceivedIndex) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(received.m(), self.subfunctions);
        for (i, &(n, t)) in received.pairs.iter().enumerate() {
            for (&c, &v) in self.masks[n].iter().zip(&self.coeffs[n * self.shots + t]) {
                e[(i, c)] = v;
            }
        }
        e
    }

    pub fn user_features(&self, received: &ReceivedIndex, w: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.subfunctions, w.len())?;
        Ok(received
            .pairs
            .iter()
            .map(|&(n, t)| sparse_dot(&self.masks[n], &self.coeffs[n * self.shots + t], w))
            .collect())
    }
}

/// Either encoder family.
#[derive(Debug, Clone)]
pub enum Encoder {
    Fourier(FeatureBank),
    Linear(LinearBank),
}

impl Encoder {
    pub fn user_features(&self, received: &ReceivedIndex, w: &[f64]) -> Result<Vec<f64>> {
        match self {
            Encoder::Fourier(b) => b.user_features(received, w),
            Encoder::Linear(b) => b.user_features(received, w),
        }
    }

    /// Every transmitted scalar for one sample, indexed `n * shots + t`.
    pub fn slot_values(&self, w: &[f64]) -> Result<Vec<f64>> {
        match self {
            Encoder::Fourier(b) => {
                check_dim(b.subfunctions, w.len())?;
                Ok((0..b.servers)
                    .flat_map(|n| (0..b.shots).map(move |t| (n, t)))
                    .map(|(n, t)| b.feature_unchecked(n, t, w))
                    .collect())
            }
            Encoder::Linear(b) => {
                check_dim(b.subfunctions, w.len())?;
                Ok(b.coeffs
                    .iter()
                    .enumerate()
                    .map(|(s, c)| sparse_dot(&b.masks[s / b.shots], c, w))
                    .collect())
            }
        }
    }

    pub fn shots(&self) -> usize {
        match self {
            Encoder::Fourier(b) => b.shots,
            Encoder::Linear(b) => b.shots,
        }
    }
}

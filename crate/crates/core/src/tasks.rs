//! Subfunction banks, user targets, and dataset generation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};

/// Law of the raw input x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum InputLaw {
    StandardNormal { dim: usize },
    Uniform { dim: usize, low: f64, high: f64 },
}

impl InputLaw {
    pub fn dim(&self) -> usize {
        match self {
            InputLaw::StandardNormal { dim } | InputLaw::Uniform { dim, .. } => *dim,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            InputLaw::StandardNormal { dim } => (0..*dim).map(|_| StandardNormal.sample(rng)).collect(),
            InputLaw::Uniform { dim, low, high } => (0..*dim).map(|_| rng.random_range(*low..*high)).collect(),
        }
    }
}

/// One subfunction f_ℓ : ℝ^d → ℝ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Subfunction {
    CoordinateProjection { index: usize },
    LinearForm { coeffs: Vec<f64> },
    /// xᵀQx with Q stored row-major.
    QuadraticForm { matrix: Vec<f64> },
    /// sin(aᵀx + phase).
    Sinusoid { coeffs: Vec<f64>, phase: f64 },
}

impl Subfunction {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Subfunction::CoordinateProjection { index } => x[*index],
            Subfunction::LinearForm { coeffs } => dot(coeffs, x),
            Subfunction::QuadraticForm { matrix } => {
                let d = x.len();
                (0..d)
                    .map(|i| x[i] * (0..d).map(|j| matrix[i * d + j] * x[j]).sum::<f64>())
                    .sum()
            }
            Subfunction::Sinusoid { coeffs, phase } => (dot(coeffs, x) + phase).sin(),
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        match self {
            Subfunction::CoordinateProjection { index } if *index >= d => Err(Error::Config(format!(
                "coordinate projection index {index} outside input dimension {d}"
            ))),
            Subfunction::LinearForm { coeffs } | Subfunction::Sinusoid { coeffs, .. } => check_dim(d, coeffs.len()),
            Subfunction::QuadraticForm { matrix } => check_dim(d * d, matrix.len()),
            _ => Ok(()),
        }
    }
}

/// The L subfunctions computed from an input x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubfunctionBank {
    pub input_dim: usize,
    pub entries: Vec<Subfunction>,
}

impl SubfunctionBank {
    pub fn new(input_dim: usize, entries: Vec<Subfunction>) -> Result<Self> {
        for e in &entries {
            e.check(input_dim)?;
        }
        Ok(Self { input_dim, entries })
    }

    /// w(x) = x on ℝ^L.
    pub fn identity(l: usize) -> Self {
        Self {
            input_dim: l,
            entries: (0..l).map(|index| Subfunction::CoordinateProjection { index }).collect(),
        }
    }

    /// f_ℓ(x) = x_ℓ² for every coordinate.
    pub fn squares(l: usize) -> Self {
        let entries = (0..l)
            .map(|i| {
                let mut matrix = vec![0.0; l * l];
                matrix[i * l + i] = 1.0;
                Subfunction::QuadraticForm { matrix }
            })
            .collect();
        Self { input_dim: l, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.input_dim == self.entries.len()
            && self
                .entries
                .iter()
                .enumerate()
                .all(|(i, e)| matches!(e, Subfunction::CoordinateProjection { index } if *index == i))
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim, x.len())?;
        Ok(self.entries.iter().map(|f| f.eval(x)).collect())
    }
}

/// Law of w(X): an input law pushed through a subfunction bank.
#[derive(Debug, Clone, Copy)]
pub struct Pushforward<'a> {
    pub bank: &'a SubfunctionBank,
    pub law: &'a InputLaw,
}

impl<'a> Pushforward<'a> {
    pub fn new(bank: &'a SubfunctionBank, law: &'a InputLaw) -> Result<Self> {
        check_dim(bank.input_dim, law.dim())?;
        Ok(Self { bank, law })
    }

    /// Identity bank over standard normal inputs: E[w] = 0, E[wwᵀ] = I.
    pub fn is_isotropic(&self) -> bool {
        self.bank.is_identity() && matches!(self.law, InputLaw::StandardNormal { .. })
    }

    pub fn output_dim(&self) -> usize {
        self.bank.len()
    }

    pub fn sample_x_w<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let x = self.law.sample(rng);
        let w = self.bank.eval(&x).expect("dimension checked at construction");
        (x, w)
    }

    pub fn sample_w<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.sample_x_w(rng).1
    }
}

/// The map h_k from subfunction outputs to a target value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TargetFunction {
    /// h(w) = aᵀw.
    Linear { coeffs: Vec<f64> },
    /// h(w) = Σ_i α_i K(w, c_i).
    RkhsExpansion {
        kernel: KernelSpec,
        centers: Vec<Vec<f64>>,
        alphas: Vec<f64>,
    },
    /// Vector output h(w) = A w, one component per row.
    LinearMap { rows: Vec<Vec<f64>> },
}

/// One user's demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub function: TargetFunction,
    /// RKHS norm bound B (per output component).
    pub norm_bound: f64,
    /// Declared essential coordinates (0-based).
    pub essential_set: Vec<usize>,
    /// Two-point separation Δ★ used for the coverage floor.
    #[serde(default)]
    pub separation: Option<f64>,
}

/// Displacement used to build separating pairs for linear targets.
pub const PROBE_DISPLACEMENT: f64 = 1.0;

impl TargetSpec {
    /// Builds a target and checks the RKHS-norm certificate against B.
    pub fn new(
        function: TargetFunction,
        norm_bound: f64,
        essential_set: Vec<usize>,
        separation: Option<f64>,
    ) -> Result<Self> {
        let mut essential_set = essential_set;
        essential_set.sort_unstable();
        essential_set.dedup();
        let spec = Self {
            function,
            norm_bound,
            essential_set,
            separation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Sparse linear target Σ_{ℓ∈S} a_ℓ w_ℓ with B = ‖a‖₂ and S = support of a.
    pub fn sparse_linear(coeffs: Vec<f64>) -> Self {
        let essential: Vec<usize> = coeffs
            .iter()
            .enumerate()
            .filter(|(_, a)| **a != 0.0)
            .map(|(i, _)| i)
            .collect();
        let b = coeffs.iter().map(|a| a * a).sum::<f64>().sqrt();
        Self::new(TargetFunction::Linear { coeffs }, b.max(f64::MIN_POSITIVE), essential, None)
            .expect("norm equals bound")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.norm_bound > 0.0 && self.norm_bound.is_finite()) {
            return Err(Error::Config(format!("target norm bound B must be positive, got {}", self.norm_bound)));
        }
        if let TargetFunction::RkhsExpansion { centers, alphas, kernel } = &self.function {
            if centers.len() != alphas.len() {
                return Err(Error::Config(format!(
                    "rkhs expansion has {} centers but {} weights",
                    centers.len(),
                    alphas.len()
                )));
            }
            kernel.validate()?;
        }
        for (i, sq) in self.component_norms_sq().into_iter().enumerate() {
            if sq.sqrt() > self.norm_bound * (1.0 + 1e-12) {
                return Err(Error::Config(format!(
                    "target component {i} has RKHS norm {:.6} > B = {}",
                    sq.sqrt(),
                    self.norm_bound
                )));
            }
        }
        Ok(())
    }

    /// Squared RKHS norm per output. Linear forms use the linear-kernel norm ‖a‖².
    pub fn component_norms_sq(&self) -> Vec<f64> {
        match &self.function {
            TargetFunction::Linear { coeffs } => vec![coeffs.iter().map(|a| a * a).sum()],
            TargetFunction::LinearMap { rows } => rows.iter().map(|r| r.iter().map(|a| a * a).sum()).collect(),
            TargetFunction::RkhsExpansion { kernel, centers, alphas } => {
                let mut q = 0.0;
                for (i, ci) in centers.iter().enumerate() {
                    for (j, cj) in centers.iter().enumerate() {
                        q += alphas[i] * alphas[j] * kernel.eval_unchecked(ci, cj);
                    }
                }
                vec![q]
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.function {
            TargetFunction::LinearMap { rows } => rows.len(),
            _ => 1,
        }
    }

    /// r_k = |S_k★|.
    pub fn intrinsic_size(&self) -> usize {
        self.essential_set.len()
    }

    pub fn input_dim(&self) -> Option<usize> {
        match &self.function {
            TargetFunction::Linear { coeffs } => Some(coeffs.len()),
            TargetFunction::LinearMap { rows } => rows.first().map(Vec::len),
            TargetFunction::RkhsExpansion { centers, .. } => centers.first().map(Vec::len),
        }
    }

    pub fn eval_into(&self, w: &[f64], out: &mut [f64]) {
        match &self.function {
            TargetFunction::Linear { coeffs } => out[0] = dot(coeffs, w),
            TargetFunction::LinearMap { rows } => {
                for (o, r) in out.iter_mut().zip(rows) {
                    *o = dot(r, w);
                }
            }
            TargetFunction::RkhsExpansion { kernel, centers, alphas } => {
                out[0] = centers
                    .iter()
                    .zip(alphas)
                    .map(|(c, a)| a * kernel.eval_unchecked(w, c))
                    .sum();
            }
        }
    }

    pub fn eval(&self, w: &[f64]) -> Result<Vec<f64>> {
        if let Some(d) = self.input_dim() {
            check_dim(d, w.len())?;
        }
        let mut out = vec![0.0; self.output_dim()];
        self.eval_into(w, &mut out);
        Ok(out)
    }

    /// Scalar evaluation; multi-output targets are rejected.
    pub fn eval_scalar(&self, w: &[f64]) -> Result<f64> {
        if self.output_dim() != 1 {
            return Err(Error::InvalidArgument("target has vector output".into()));
        }
        Ok(self.eval(w)?[0])
    }

    /// Δ★ for a miss on coordinate `l`: declared value, or |a_ℓ|·|Δw| for
    /// linear targets (largest over output components).
    pub fn separation_for(&self, l: usize) -> Option<f64> {
        if let Some(s) = self.separation {
            return Some(s);
        }
        match &self.function {
            TargetFunction::Linear { coeffs } => coeffs.get(l).map(|a| a.abs() * PROBE_DISPLACEMENT),
            TargetFunction::LinearMap { rows } => rows
                .iter()
                .filter_map(|r| r.get(l))
                .map(|a| a.abs() * PROBE_DISPLACEMENT)
                .reduce(f64::max),
            TargetFunction::RkhsExpansion { .. } => None,
        }
    }

    /// Perturbation probe: for each declared essential coordinate, whether
    /// some sampled pair differing only there changes the target.
    pub fn probe_essential<R: Rng + ?Sized>(
        &self,
        law: &Pushforward<'_>,
        trials: usize,
        rng: &mut R,
    ) -> Vec<(usize, bool)> {
        let dim = self.output_dim();
        let mut a = vec![0.0; dim];
        let mut b = vec![0.0; dim];
        self.essential_set
            .iter()
            .map(|&l| {
                let found = (0..trials).any(|_| {
                    let w = law.sample_w(rng);
                    let mut w2 = w.clone();
                    let shift: f64 = StandardNormal.sample(rng);
                    w2[l] += shift + PROBE_DISPLACEMENT.copysign(shift);
                    self.eval_into(&w, &mut a);
                    self.eval_into(&w2, &mut b);
                    a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-12)
                });
                (l, found)
            })
            .collect()
    }
}

/// Training or test samples with per-user labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub xs: Vec<Vec<f64>>,
    pub ws: Vec<Vec<f64>>,
    /// Noiseless targets, one M × outputs matrix per user.
    pub targets: Vec<DMatrix<f64>>,
    /// Noisy labels, same shapes as `targets`.
    pub labels: Vec<DMatrix<f64>>,
    pub sigma: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// Draws M i.i.d. inputs and labels y = F_k(x) + ε with ε ~ N(0, σ²)
/// independent across samples, users, and output components.
pub fn generate_dataset<R: Rng + ?Sized>(
    bank: &SubfunctionBank,
    targets: &[TargetSpec],
    law: &InputLaw,
    m: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if m == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level must be nonnegative, got {sigma}")));
    }
    let push = Pushforward::new(bank, law)?;
    for t in targets {
        if let Some(d) = t.input_dim() {
            check_dim(bank.len(), d)?;
        }
    }
    let mut xs = Vec::with_capacity(m);
    let mut ws = Vec::with_capacity(m);
    let mut clean: Vec<DMatrix<f64>> = targets.iter().map(|t| DMatrix::zeros(m, t.output_dim())).collect();
    let mut noisy = clean.clone();
    let mut buf = Vec::new();
    for i in 0..m {
        let (x, w) = push.sample_x_w(rng);
        for (k, t) in targets.iter().enumerate() {
            buf.resize(t.output_dim(), 0.0);
            t.eval_into(&w, &mut buf);
            for (j, &v) in buf.iter().enumerate() {
                clean[k][(i, j)] = v;
                let eps: f64 = if sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    sigma * z
                } else {
                    0.0
                };
                noisy[k][(i, j)] = v + eps;
            }
        }
        xs.push(x);
        ws.push(w);
    }
    Ok(Dataset {
        xs,
        ws,
        targets: clean,
        labels: noisy,
        sigma,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// True when every target lies in a linear-kernel model.
pub fn all_linear(targets: &[TargetSpec]) -> bool {
    targets.iter().all(|t| match &t.function {
        TargetFunction::Linear { .. } | TargetFunction::LinearMap { .. } => true,
        TargetFunction::RkhsExpansion { kernel, .. } => kernel.family == KernelFamily::Linear,
    })
}

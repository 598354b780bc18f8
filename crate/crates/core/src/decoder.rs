//! Per-user ridge decoders and effective dimension.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

/// Relative eigenvalue cutoff for the minimum-norm path.
pub const PINV_CUTOFF: f64 = 1e-10;

/// Ridge coefficients, one column per output component.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub coef: DMatrix<f64>,
    pub lambda: f64,
    /// Number of retained principal directions when rank-limited.
    pub rank: Option<usize>,
    /// FNV-1a digest of the training features and labels.
    pub trained_on: u64,
}

/// Empirical second moments S = ZᵀZ/M and s = ZᵀY/M.
fn moments(z: &DMatrix<f64>, y: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let inv = 1.0 / z.nrows() as f64;
    let mut s = z.tr_mul(z) * inv;
    s = (&s + s.transpose()) * 0.5;
    (s, z.tr_mul(y) * inv)
}

fn check_inputs(z: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<()> {
    if z.nrows() == 0 {
        return Err(Error::InvalidArgument("ridge fit needs at least one sample".into()));
    }
    check_dim(z.nrows(), y.nrows())?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge parameter must be nonnegative, got {lambda}")));
    }
    Ok(())
}

fn zero_model(outputs: usize, lambda: f64, digest: u64) -> RidgeModel {
    warn!("ridge fit on zero received features; using the constant-zero predictor");
    RidgeModel {
        coef: DMatrix::zeros(0, outputs),
        lambda,
        rank: None,
        trained_on: digest,
    }
}

/// Solves (S + λI)β = s for every output column. λ = 0 gives the
/// minimum-norm solution through a thresholded pseudo-inverse.
pub fn fit_ridge_multi(z: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<RidgeModel> {
    check_inputs(z, y, lambda)?;
    let digest = digest(z, y);
    if z.ncols() == 0 {
        return Ok(zero_model(y.ncols(), lambda, digest));
    }
    let (s, sy) = moments(z, y);
    let coef = if lambda > 0.0 {
        let shifted = &s + DMatrix::identity(s.nrows(), s.ncols()) * lambda;
        match shifted.clone().cholesky() {
            Some(ch) => ch.solve(&sy),
            None => spectral_solve(&SymmetricEigen::new(shifted), &sy, 0.0, None),
        }
    } else {
        spectral_solve(&SymmetricEigen::new(s), &sy, 0.0, None)
    };
    Ok(RidgeModel {
        coef,
        lambda,
        rank: None,
        trained_on: digest,
    })
}

/// Ridge restricted to the top-`rank` eigen-directions of S.
pub fn fit_rank_limited(z: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64, rank: usize) -> Result<RidgeModel> {
    check_inputs(z, y, lambda)?;
    let digest = digest(z, y);
    if z.ncols() == 0 {
        return Ok(zero_model(y.ncols(), lambda, digest));
    }
    let (s, sy) = moments(z, y);
    let coef = spectral_solve(&SymmetricEigen::new(s), &sy, lambda, Some(rank));
    Ok(RidgeModel {
        coef,
        lambda,
        rank: Some(rank.min(z.ncols())),
        trained_on: digest,
    })
}

/// Σ_j v_j v_jᵀ rhs / (μ_j + λ) over retained directions. Directions with
/// μ_j + λ below the relative cutoff are dropped.
fn spectral_solve(eig: &SymmetricEigen<f64, nalgebra::Dyn>, rhs: &DMatrix<f64>, lambda: f64, rank: Option<usize>) -> DMatrix<f64> {
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let keep = rank.unwrap_or(order.len()).min(order.len());
    let top = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max) + lambda;
    let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
    for &j in &order[..keep] {
        let denom = eig.eigenvalues[j] + lambda;
        if denom <= PINV_CUTOFF * top {
            continue;
        }
        let v = eig.eigenvectors.column(j);
        let proj = v.transpose() * rhs;
        out += v * proj / denom;
    }
    out
}

/// Scalar-label convenience over [`fit_ridge_multi`].
pub fn fit_ridge(z: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<RidgeModel> {
    fit_ridge_multi(z, &DMatrix::from_column_slice(y.len(), 1, y), lambda)
}

impl RidgeModel {
    pub fn features(&self) -> usize {
        self.coef.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.coef.ncols()
    }

    pub fn beta(&self) -> DVector<f64> {
        self.coef.column(0).into_owned()
    }

    /// βᵀΦ for each output.
    pub fn predict_all(&self, phi: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.features(), phi.len())?;
        Ok((0..self.outputs())
            .map(|j| self.coef.column(j).iter().zip(phi).map(|(b, p)| b * p).sum())
            .collect())
    }

    pub fn predict(&self, phi: &[f64]) -> Result<f64> {
        if self.outputs() != 1 {
            return Err(Error::InvalidArgument("model has vector output".into()));
        }
        Ok(self.predict_all(phi)?[0])
    }

    /// Gradient of the ridge objective at the fitted coefficients.
    pub fn objective_gradient(&self, z: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
        let (s, sy) = moments(z, y);
        (&s * &self.coef - sy + &self.coef * self.lambda) * 2.0
    }
}

/// d_λ = Σ μ_j / (μ_j + λ).
pub fn effective_dimension_from_eigs(eigs: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("effective dimension needs λ > 0, got {lambda}")));
    }
    Ok(eigs.iter().map(|&mu| mu.max(0.0) / (mu.max(0.0) + lambda)).sum())
}

/// d_λ of a PSD matrix via its symmetric eigendecomposition.
pub fn effective_dimension(g: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    let eigs = g.clone().symmetric_eigenvalues();
    effective_dimension_from_eigs(eigs.as_slice(), lambda)
}

/// Feature second moment and its spectrum.
#[derive(Debug, Clone)]
pub struct GramStats {
    pub gram: DMatrix<f64>,
    /// Eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl GramStats {
    pub fn new(gram: DMatrix<f64>) -> Self {
        let mut eigenvalues: Vec<f64> = gram.clone().symmetric_eigenvalues().iter().copied().collect();
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        Self { gram, eigenvalues }
    }

    /// Empirical G = ZᵀZ/M.
    pub fn from_features(z: &DMatrix<f64>) -> Self {
        let m = z.nrows().max(1) as f64;
        let g = z.tr_mul(z) / m;
        Self::new((&g + g.transpose()) * 0.5)
    }

    pub fn d_lambda(&self, lambda: f64) -> Result<f64> {
        effective_dimension_from_eigs(&self.eigenvalues, lambda)
    }

    pub fn rank(&self) -> usize {
        let top = self.eigenvalues.first().copied().unwrap_or(0.0);
        self.eigenvalues.iter().filter(|&&v| v > PINV_CUTOFF * top.max(f64::MIN_POSITIVE)).count()
    }
}

/// FNV-1a over the shapes and bit patterns of the training data.
pub fn digest(z: &DMatrix<f64>, y: &DMatrix<f64>) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |bytes: [u8; 8]| {
        for b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    };
    for d in [z.nrows(), z.ncols(), y.ncols()] {
        eat((d as u64).to_le_bytes());
    }
    for v in z.iter().chain(y.iter()) {
        eat(v.to_bits().to_le_bytes());
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seeded(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn scalar_closed_forms() {
        let z = DMatrix::from_element(5, 1, 1.0);
        let y = vec![1.0; 5];
        let exact = fit_ridge(&z, &y, 0.0).unwrap();
        assert!((exact.beta()[0] - 1.0).abs() < 1e-15);
        for lambda in [0.1, 1.0, 3.0] {
            let m = fit_ridge(&z, &y, lambda).unwrap();
            assert!((m.beta()[0] - 1.0 / (1.0 + lambda)).abs() < 1e-14);
        }
        assert!(fit_ridge(&z, &y, -1.0).is_err());
        assert!(fit_ridge(&DMatrix::zeros(0, 1), &[], 1.0).is_err());
    }

    #[test]
    fn empty_features_give_zero_predictor() {
        let z = DMatrix::zeros(4, 0);
        let m = fit_ridge(&z, &[1.0, 2.0, 3.0, 4.0], 0.1).unwrap();
        assert_eq!(m.predict(&[]).unwrap(), 0.0);
    }

    #[test]
    fn pseudo_inverse_is_minimum_norm() {
        // duplicated column: the minimum-norm solution splits weight evenly
        let base = gaussian_matrix(50, 1, 3);
        let z = DMatrix::from_fn(50, 2, |i, _| base[(i, 0)]);
        let y: Vec<f64> = (0..50).map(|i| 2.0 * base[(i, 0)]).collect();
        let m = fit_ridge(&z, &y, 0.0).unwrap();
        assert!((m.beta()[0] - 1.0).abs() < 1e-10 && (m.beta()[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn in_span_noiseless_recovery() {
        let z = gaussian_matrix(10_000, 8, 4);
        let theta = DVector::from_vec(vec![1.0, -0.5, 0.25, 0.0, 2.0, -1.0, 0.3, 0.7]);
        let y = &z * &theta;
        let m = fit_ridge(&z, y.as_slice(), 1e-8).unwrap();
        // population G = I for standard normal features
        let err = (m.beta() - &theta).norm_squared();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn prediction_contract() {
        let zero = RidgeModel { coef: DMatrix::zeros(3, 1), lambda: 1.0, rank: None, trained_on: 0 };
        assert_eq!(zero.predict(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let e1 = RidgeModel { coef: DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]), ..zero.clone() };
        assert_eq!(e1.predict(&[4.0, 5.0, 6.0]).unwrap(), 4.0);
        assert!(e1.predict(&[1.0]).is_err());
    }

    #[test]
    fn effective_dimension_examples() {
        let g = DMatrix::<f64>::identity(6, 6);
        assert_eq!(effective_dimension(&g, 1.0).unwrap(), 3.0);
        let d = effective_dimension(&DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 0.0])), 1.0).unwrap();
        assert!((d - 7.0 / 6.0).abs() < 1e-14);
        assert!(effective_dimension(&g, 0.0).is_err());
        let mut prev = f64::INFINITY;
        for p in 0..12 {
            let d = effective_dimension(&g, 10f64.powi(p)).unwrap();
            assert!(d < prev);
            prev = d;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn rank_limited_keeps_top_directions() {
        let z = gaussian_matrix(20_000, 4, 5);
        let scale = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0, 0.5]));
        let z = z * scale;
        // target = the features themselves; a rank-2 decoder discards the two weakest
        let m = fit_rank_limited(&z, &z, 0.0, 2).unwrap();
        let pred = &z * &m.coef;
        let risk: f64 = (&pred - &z).iter().map(|v| v * v).sum::<f64>() / z.nrows() as f64;
        assert!((risk - (1.0 + 0.25)).abs() < 0.05, "{risk}");
        assert_eq!(m.rank, Some(2));
    }

    #[test]
    fn gram_stats_rank_and_psd() {
        let z = gaussian_matrix(30, 5, 6);
        let dup = DMatrix::from_fn(30, 6, |i, j| z[(i, j.min(4))]);
        let stats = GramStats::from_features(&dup);
        assert_eq!(stats.rank(), 5);
        assert!(stats.eigenvalues.iter().all(|&v| v > -1e-8));
        assert!((&stats.gram - stats.gram.transpose()).amax() == 0.0);
        assert!(stats.d_lambda(1e-3).unwrap() <= 5.0);
    }

    #[test]
    fn digest_tracks_data() {
        let z = gaussian_matrix(5, 2, 7);
        let y = gaussian_matrix(5, 1, 8);
        let a = fit_ridge_multi(&z, &y, 0.1).unwrap();
        let b = fit_ridge_multi(&z, &(y.clone() * 2.0), 0.1).unwrap();
        assert_ne!(a.trained_on, b.trained_on);
        assert_eq!(a.trained_on, digest(&z, &y));
    }

    proptest! {
        #[test]
        fn gradient_vanishes_at_solution(seed in any::<u64>(), m in 1usize..6, lambda in prop_oneof![Just(0.0), 1e-4f64..10.0]) {
            let z = gaussian_matrix(40, m, seed);
            let y = gaussian_matrix(40, 2, seed ^ 1);
            let model = fit_ridge_multi(&z, &y, lambda).unwrap();
            prop_assert!(model.objective_gradient(&z, &y).amax() < 1e-8);
        }

        #[test]
        fn shrinkage_is_monotone(seed in any::<u64>(), l1 in 1e-4f64..1.0, factor in 1.0f64..100.0) {
            let z = gaussian_matrix(30, 4, seed);
            let y = gaussian_matrix(30, 1, seed ^ 2);
            let n1 = fit_ridge_multi(&z, &y, l1).unwrap().coef.norm();
            let n2 = fit_ridge_multi(&z, &y, l1 * factor).unwrap().coef.norm();
            prop_assert!(n2 <= n1 + 1e-12);
        }

        #[test]
        fn effective_dimension_nonincreasing(eigs in prop::collection::vec(0.0f64..10.0, 1..12), l1 in 1e-6f64..10.0, factor in 1.0f64..10.0) {
            let d1 = effective_dimension_from_eigs(&eigs, l1).unwrap();
            let d2 = effective_dimension_from_eigs(&eigs, l1 * factor).unwrap();
            prop_assert!(d2 <= d1 + 1e-12);
            prop_assert!(d1 <= eigs.iter().filter(|&&v| v > 0.0).count() as f64 + 1e-12);
        }

        #[test]
        fn prediction_is_linear(seed in any::<u64>(), a in -5.0f64..5.0) {
            let z = gaussian_matrix(20, 3, seed);
            let y = gaussian_matrix(20, 1, seed ^ 3);
            let model = fit_ridge_multi(&z, &y, 0.5).unwrap();
            let phi = [0.3, -1.0, 2.0];
            let scaled: Vec<f64> = phi.iter().map(|v| v * a).collect();
            let lhs = model.predict(&scaled).unwrap();
            let rhs = a * model.predict(&phi).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + rhs.abs()));
        }
    }
}

//! End-to-end runs: topology, encoder, training data, per-user decoders,
//! and risk reports with both bound sides.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::decoder::{fit_ridge_multi, GramStats, RidgeModel};
use crate::encoder::{Encoder, FeatureBank, LinearBank, SamplingMode};
use crate::error::{Error, Result};
use crate::kernels::{operator_eigenvalues, KernelFamily, KernelSpec, SpectralSummary};
use crate::risk_bounds::{
    annealed_bounds, coverage_floor, harmonic_mean, quenched_lower_bound, quenched_risk, quenched_upper_bound,
    AnnealedInputs, AnnealedReport, BoundConstants, Predictor, RiskReport,
};
use crate::rng::{stream, Stage};
use crate::tasks::{generate_dataset, InputLaw, Pushforward, SubfunctionBank, TargetSpec};
use crate::topology::{check_coverage, ReceivedIndex, SystemConfig, Topology};

/// Everything a run needs, with every default already resolved.
#[derive(Debug, Clone)]
pub struct Problem {
    pub config: SystemConfig,
    pub kernel: KernelSpec,
    pub bank: SubfunctionBank,
    pub law: InputLaw,
    /// One target per user.
    pub targets: Vec<TargetSpec>,
    pub mode: SamplingMode,
    pub redraw_per_trial: bool,
    pub sigma: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub lambda: f64,
    pub spectral_samples: usize,
    pub constants: BoundConstants,
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.kernel.validate()?;
        self.constants.validate()?;
        if self.targets.len() != self.config.users {
            return Err(Error::Config(format!(
                "tasks: expected {} targets (one per user), got {}",
                self.config.users,
                self.targets.len()
            )));
        }
        if self.bank.len() != self.config.subfunctions {
            return Err(Error::Config(format!(
                "subfunctions: bank has {} entries but system.L = {}",
                self.bank.len(),
                self.config.subfunctions
            )));
        }
        Pushforward::new(&self.bank, &self.law)?;
        for t in &self.targets {
            t.validate()?;
            if let Some(d) = t.input_dim() {
                if d != self.bank.len() {
                    return Err(Error::Config(format!("tasks: target reads {d} coordinates, system.L = {}", self.bank.len())));
                }
            }
            if t.essential_set.iter().any(|&l| l >= self.bank.len()) {
                return Err(Error::Config("tasks.essential_set lists a coordinate outside 1..=L".into()));
            }
        }
        if self.train_samples == 0 {
            return Err(Error::Config("data.train_samples must be at least 1".into()));
        }
        if self.test_samples == 0 {
            return Err(Error::Config("test_samples must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("ridge.lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("data.sigma must be nonnegative, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn push(&self) -> Pushforward<'_> {
        Pushforward::new(&self.bank, &self.law).expect("validated")
    }

    /// Largest declared B over users.
    pub fn norm_bound(&self) -> f64 {
        self.targets.iter().map(|t| t.norm_bound).fold(0.0, f64::max)
    }

    pub fn r_avg(&self) -> f64 {
        self.targets.iter().map(|t| t.intrinsic_size() as f64).sum::<f64>() / self.targets.len() as f64
    }

    pub fn essential_sets(&self) -> Vec<Vec<usize>> {
        self.targets.iter().map(|t| t.essential_set.clone()).collect()
    }

    /// Kernel operator spectrum from the Nyström stream of `master`.
    pub fn spectrum(&self, master: u64) -> Result<SpectralSummary> {
        let mut rng = stream(master, 0, 0, Stage::Nystrom);
        operator_eigenvalues(&self.kernel, &self.push(), self.spectral_samples, &mut rng)
    }

    /// Random topology for `trial`, from independent assignment and link streams.
    pub fn sample_topology(&self, master: u64, trial: u64) -> Topology {
        let mut a = stream(master, trial, 0, Stage::Assignment);
        let mut l = stream(master, trial, 0, Stage::Links);
        Topology::sample(&self.config, &mut a, &mut l)
    }

    /// Shift-invariant kernels get masked random features; the linear
    /// kernel gets the linear-limit code.
    pub fn draw_encoder(&self, topology: &Topology, master: u64, trial: u64) -> Result<Encoder> {
        let bank_trial = if self.redraw_per_trial { trial } else { 0 };
        let mut rng = stream(master, bank_trial, 0, Stage::FeatureBank);
        match self.kernel.family {
            KernelFamily::Linear => {
                let mut rng = stream(master, bank_trial, 0, Stage::LinearCode);
                Ok(Encoder::Linear(LinearBank::draw(&self.config, topology, &mut rng)))
            }
            _ => Ok(Encoder::Fourier(FeatureBank::draw(&self.config, topology, &self.kernel, self.mode, &mut rng)?)),
        }
    }
}

/// Trained decoders for one topology.
#[derive(Debug, Clone)]
pub struct Trained {
    pub topology: Topology,
    pub encoder: Encoder,
    pub received: Vec<ReceivedIndex>,
    pub models: Vec<RidgeModel>,
    /// Per-user d_λ of the empirical feature second moment.
    pub d_lambda: Vec<f64>,
}

impl Predictor for Trained {
    fn predict_user(&self, user: usize, _x: &[f64], w: &[f64], out: &mut [f64]) -> Result<()> {
        let phi = self.encoder.user_features(&self.received[user], w)?;
        let pred = self.models[user].predict_all(&phi)?;
        out.copy_from_slice(&pred);
        Ok(())
    }
}

fn gather(slots: &DMatrix<f64>, received: &ReceivedIndex, shots: usize) -> DMatrix<f64> {
    let cols: Vec<usize> = received.pairs.iter().map(|&(n, t)| n * shots + t).collect();
    DMatrix::from_fn(slots.nrows(), cols.len(), |i, j| slots[(i, cols[j])])
}

/// Draws the encoder and the training set, then fits every user.
pub fn train(problem: &Problem, topology: Topology, master: u64, trial: u64) -> Result<Trained> {
    let encoder = problem.draw_encoder(&topology, master, trial)?;
    let mut rng = stream(master, trial, 0, Stage::TrainInputs);
    let data = generate_dataset(
        &problem.bank,
        &problem.targets,
        &problem.law,
        problem.train_samples,
        problem.sigma,
        &mut rng,
    )?;
    let rows: Vec<Vec<f64>> = data.ws.par_iter().map(|w| encoder.slot_values(w)).collect::<Result<_>>()?;
    let width = rows.first().map_or(0, Vec::len);
    let slots = DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]);
    let received: Vec<ReceivedIndex> = (0..problem.config.users)
        .map(|k| topology.received_index(&problem.config, k))
        .collect::<Result<_>>()?;
    let fits: Vec<(RidgeModel, f64)> = received
        .par_iter()
        .enumerate()
        .map(|(k, idx)| {
            let z = gather(&slots, idx, encoder.shots());
            let model = fit_ridge_multi(&z, &data.labels[k], problem.lambda)?;
            let d = if idx.m() == 0 {
                0.0
            } else {
                let stats = GramStats::from_features(&z);
                if problem.lambda > 0.0 {
                    stats.d_lambda(problem.lambda)?
                } else {
                    stats.rank() as f64
                }
            };
            Ok((model, d))
        })
        .collect::<Result<_>>()?;
    let (models, d_lambda) = fits.into_iter().unzip();
    Ok(Trained {
        topology,
        encoder,
        received,
        models,
        d_lambda,
    })
}

/// Trains on `topology`, measures fresh-sample risk, and evaluates both
/// quenched bound sides.
pub fn quenched_run(
    problem: &Problem,
    topology: Topology,
    spectral: &SpectralSummary,
    master: u64,
    trial: u64,
) -> Result<RiskReport> {
    let trained = train(problem, topology, master, trial)?;
    let mut rng = stream(master, trial, 0, Stage::TestInputs);
    let risk = quenched_risk(&trained, &problem.targets, &problem.push(), problem.test_samples, &mut rng)?;
    assemble_report(problem, &trained.topology, &trained.received, &trained.d_lambda, spectral, Some(risk))
}

/// Bound-side bookkeeping shared by trained runs and bounds-only runs.
pub fn assemble_report(
    problem: &Problem,
    topology: &Topology,
    received: &[ReceivedIndex],
    d_lambda: &[f64],
    spectral: &SpectralSummary,
    risk: Option<crate::risk_bounds::EmpiricalRisk>,
) -> Result<RiskReport> {
    let ms: Vec<usize> = received.iter().map(ReceivedIndex::m).collect();
    let coverage = check_coverage(topology, &problem.essential_sets());
    let floors: Vec<f64> = coverage
        .iter()
        .zip(&problem.targets)
        .map(|(c, t)| coverage_floor(t, c))
        .collect::<Result<_>>()?;
    let b = problem.norm_bound();
    let m_harm = harmonic_mean(&ms);
    let d_avg = d_lambda.iter().sum::<f64>() / d_lambda.len().max(1) as f64;
    let upper = match m_harm {
        Some(h) => Some(quenched_upper_bound(
            &problem.constants,
            b,
            problem.config.gamma(),
            h,
            problem.sigma,
            d_avg,
            problem.train_samples,
            problem.lambda,
        )?),
        None => None,
    };
    let lower = quenched_lower_bound(spectral, &ms, b, &floors)?;
    let risk = risk.unwrap_or_else(|| crate::risk_bounds::EmpiricalRisk {
        per_user: vec![f64::NAN; ms.len()],
        per_user_se: vec![f64::NAN; ms.len()],
        average: f64::NAN,
        average_se: f64::NAN,
        n_test: 0,
    });
    Ok(RiskReport {
        risk,
        m_arith: ms.iter().sum::<usize>() as f64 / ms.len() as f64,
        starved_users: ms.iter().enumerate().filter(|(_, &m)| m == 0).map(|(k, _)| k).collect(),
        spectral_tails: ms.iter().map(|&m| spectral.tail_sum(m)).collect(),
        coverage_floors: floors,
        d_lambda: d_avg,
        received: ms,
        m_harm,
        upper,
        lower,
    })
}

/// Per-user d_λ of the feature second moment on unlabeled inputs, for
/// bound evaluation without training.
pub fn feature_dimensions(problem: &Problem, encoder: &Encoder, received: &[ReceivedIndex], master: u64) -> Result<Vec<f64>> {
    let mut rng = stream(master, 0, 0, Stage::TrainInputs);
    let push = problem.push();
    let ws: Vec<Vec<f64>> = (0..problem.train_samples).map(|_| push.sample_w(&mut rng)).collect();
    let rows: Vec<Vec<f64>> = ws.par_iter().map(|w| encoder.slot_values(w)).collect::<Result<_>>()?;
    let width = rows.first().map_or(0, Vec::len);
    let slots = DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]);
    received
        .iter()
        .map(|idx| {
            if idx.m() == 0 {
                return Ok(0.0);
            }
            let stats = GramStats::from_features(&gather(&slots, idx, encoder.shots()));
            if problem.lambda > 0.0 {
                stats.d_lambda(problem.lambda)
            } else {
                Ok(stats.rank() as f64)
            }
        })
        .collect()
}

/// Annealed aggregate over `draws` independent topologies.
pub fn annealed_run(problem: &Problem, draws: usize, master: u64) -> Result<AnnealedReport> {
    if draws == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let spectral = problem.spectrum(master)?;
    let essential = problem.essential_sets();
    let results: Vec<(RiskReport, usize)> = (0..draws as u64)
        .into_par_iter()
        .map(|trial| {
            let topo = problem.sample_topology(master, trial);
            let misses = check_coverage(&topo, &essential).iter().filter(|c| !c.covered).count();
            let report = quenched_run(problem, topo, &spectral, master, trial)?;
            Ok((report, misses))
        })
        .collect::<Result<_>>()?;
    let (reports, misses): (Vec<RiskReport>, Vec<usize>) = results.into_iter().unzip();
    let d_avg = reports.iter().map(|r| r.d_lambda).sum::<f64>() / reports.len() as f64;
    let inputs = AnnealedInputs {
        b: problem.norm_bound(),
        sigma: problem.sigma,
        d_lambda: d_avg,
        m_train: problem.train_samples,
        lambda: problem.lambda,
        r_avg: problem.r_avg(),
    };
    let (lower, upper) = annealed_bounds(&problem.constants, &problem.config, &inputs, &spectral)?;
    AnnealedReport::aggregate(reports, misses, lower, upper)
}

//! Scenario files, experiment runners, and report emission.
//!
//! A scenario is a TOML document. [`Scenario::resolve`] fills every
//! default, and the resolved scenario is written into each report header
//! and JSON mirror so a run can be reproduced from its output alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::SamplingMode;
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::pipeline::{annealed_run, assemble_report, feature_dimensions, quenched_run, Problem};
use crate::risk_bounds::{annealed_bounds, AnnealedInputs, BoundConstants, RiskReport};
use crate::rng::{stream, Stage};
use crate::spectral_mp::{
    aliased_topology, discarded_fraction, disjoint_balanced_topology, kappa_grid, mp_gap, normalized_operator_spectrum,
    MpLaw,
};
use crate::tasks::{InputLaw, Subfunction, SubfunctionBank, TargetFunction, TargetSpec};
use crate::topology::{ReceivedIndex, SystemConfig, Topology};
use crate::encoder::{Encoder, LinearBank};

/// Default number of fresh test samples.
pub const DEFAULT_TEST_SAMPLES: usize = 10_000;
/// Upper limit on the default Nyström sample count.
pub const NYSTROM_CAP: usize = 4_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Quenched,
    Annealed,
    MpGap,
    BoundsOnly,
}

impl ExperimentKind {
    pub fn stem(self) -> &'static str {
        match self {
            ExperimentKind::Quenched => "quenched",
            ExperimentKind::Annealed => "annealed",
            ExperimentKind::MpGap => "mp_gap",
            ExperimentKind::BoundsOnly => "bounds",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankPreset {
    Identity,
    Squares,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubfunctionSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<BankPreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entries: Vec<Subfunction>,
}

/// One user's demand as written in a scenario. Coordinates are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Σ a_ℓ w_ℓ with B = ‖a‖ and essential set = support of a.
    SparseLinear { coeffs: Vec<f64> },
    Linear {
        coeffs: Vec<f64>,
        norm_bound: f64,
        essential_set: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        separation: Option<f64>,
    },
    RkhsExpansion {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kernel: Option<KernelSpec>,
        centers: Vec<Vec<f64>>,
        alphas: Vec<f64>,
        norm_bound: f64,
        essential_set: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        separation: Option<f64>,
    },
    /// Every coordinate as its own output, B = 1.
    IdentityMap,
    LinearMap {
        rows: Vec<Vec<f64>>,
        norm_bound: f64,
        essential_set: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        separation: Option<f64>,
    },
}

fn zero_based(set: &[usize]) -> Result<Vec<usize>> {
    set.iter()
        .map(|&l| {
            l.checked_sub(1)
                .ok_or_else(|| Error::Config("tasks.essential_set ids are 1-based".into()))
        })
        .collect()
}

impl TaskConfig {
    fn build(&self, kernel: &KernelSpec, l: usize) -> Result<TargetSpec> {
        let spec = match self {
            TaskConfig::SparseLinear { coeffs } => {
                if coeffs.iter().all(|a| *a == 0.0) {
                    return Err(Error::Config("tasks: sparse_linear needs a nonzero coefficient".into()));
                }
                TargetSpec::sparse_linear(coeffs.clone())
            }
            TaskConfig::Linear { coeffs, norm_bound, essential_set, separation } => TargetSpec::new(
                TargetFunction::Linear { coeffs: coeffs.clone() },
                *norm_bound,
                zero_based(essential_set)?,
                *separation,
            )?,
            TaskConfig::RkhsExpansion { kernel: k, centers, alphas, norm_bound, essential_set, separation } => TargetSpec::new(
                TargetFunction::RkhsExpansion {
                    kernel: k.unwrap_or(*kernel),
                    centers: centers.clone(),
                    alphas: alphas.clone(),
                },
                *norm_bound,
                zero_based(essential_set)?,
                *separation,
            )?,
            TaskConfig::IdentityMap => {
                let rows = (0..l)
                    .map(|i| (0..l).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect();
                TargetSpec::new(TargetFunction::LinearMap { rows }, 1.0, (0..l).collect(), None)?
            }
            TaskConfig::LinearMap { rows, norm_bound, essential_set, separation } => TargetSpec::new(
                TargetFunction::LinearMap { rows: rows.clone() },
                *norm_bound,
                zero_based(essential_set)?,
                *separation,
            )?,
        };
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSettings {
    #[serde(default)]
    pub mode: SamplingMode,
    #[serde(default = "yes")]
    pub redraw_per_trial: bool,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self { mode: SamplingMode::MaskedBochner, redraw_per_trial: true }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    /// λ = constant / √M.
    COverSqrtM,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_rule: Option<LambdaRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    #[serde(default = "default_train")]
    pub train_samples: usize,
    #[serde(default)]
    pub sigma: f64,
}

fn default_train() -> usize {
    1_000
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { train_samples: default_train(), sigma: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologySource {
    #[default]
    Random,
    File,
    DisjointBalanced,
    Aliased,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySettings {
    #[serde(default)]
    pub source: TopologySource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralSettings {
    /// Nyström sample count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Discarded fraction for the mp-gap run; defaults to 1 − min(1, TγN/K).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// 1-based user whose spectrum the mp-gap run reports.
    #[serde(default = "first_user")]
    pub user: usize,
    /// Use only the configured κ instead of the full grid.
    #[serde(default)]
    pub single_kappa: bool,
}

fn first_user() -> usize {
    1
}

impl Default for SpectralSettings {
    fn default() -> Self {
        Self { samples: None, kappa: None, user: 1, single_kappa: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    /// Server counts for the annealed budget sweep.
    #[serde(default)]
    pub servers: Vec<usize>,
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_samples: Option<usize>,
    pub system: SystemConfig,
    pub kernel: KernelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<InputLaw>,
    #[serde(default)]
    pub subfunctions: SubfunctionSettings,
    #[serde(default)]
    pub tasks: Vec<TaskConfig>,
    #[serde(default)]
    pub encoder: EncoderSettings,
    #[serde(default)]
    pub ridge: RidgeSettings,
    #[serde(default)]
    pub data: DataSettings,
    #[serde(default)]
    pub constants: BoundConstants,
    #[serde(default)]
    pub topology: TopologySettings,
    #[serde(default)]
    pub spectral: SpectralSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
}

fn one() -> usize {
    1
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a scenario; a relative topology file path is taken relative to
    /// the scenario's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut s = Self::from_toml(&text)?;
        if let Some(f) = &s.topology.file {
            if f.is_relative() {
                if let Some(dir) = path.parent() {
                    s.topology.file = Some(dir.join(f));
                }
            }
        }
        Ok(s)
    }

    /// Fills every default and validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        if self.topology.source == TopologySource::File {
            let file = self
                .topology
                .file
                .clone()
                .ok_or_else(|| Error::Config("topology.file is required when topology.source = \"file\"".into()))?;
            let text = fs::read_to_string(&file)
                .map_err(|e| Error::Config(format!("topology.file {}: {e}", file.display())))?;
            let (cfg, _) = Topology::parse(&text)?;
            if (cfg.users, cfg.servers, cfg.subfunctions, cfg.compute_budget, cfg.fanout_budget, cfg.shots)
                != (
                    self.system.users,
                    self.system.servers,
                    self.system.subfunctions,
                    self.system.compute_budget,
                    self.system.fanout_budget,
                    self.system.shots,
                )
            {
                return Err(Error::Config("system section disagrees with the topology file header".into()));
            }
        }
        self.system.validate()?;
        let l = self.system.subfunctions;
        if self.kernel.dimension != 0 && self.kernel.dimension != l {
            return Err(Error::Config(format!("kernel.dimension {} must equal system.L = {l}", self.kernel.dimension)));
        }
        self.kernel.dimension = l;
        self.kernel.validate()?;
        if self.subfunctions.entries.is_empty() && self.subfunctions.preset.is_none() {
            self.subfunctions.preset = Some(BankPreset::Identity);
        }
        if !self.subfunctions.entries.is_empty() && self.subfunctions.preset.is_some() {
            return Err(Error::Config("subfunctions: give either preset or entries, not both".into()));
        }
        let input_dim = if self.subfunctions.entries.is_empty() {
            l
        } else {
            self.subfunctions
                .input_dim
                .ok_or_else(|| Error::Config("subfunctions.input_dim is required with explicit entries".into()))?
        };
        self.subfunctions.input_dim = Some(input_dim);
        if self.inputs.is_none() {
            self.inputs = Some(InputLaw::StandardNormal { dim: input_dim });
        }
        if self.test_samples.is_none() {
            self.test_samples = Some(DEFAULT_TEST_SAMPLES);
        }
        match (self.ridge.lambda, self.ridge.lambda_rule) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("ridge: give either lambda or lambda_rule, not both".into()));
            }
            (Some(lam), None) => {
                if !(lam >= 0.0 && lam.is_finite()) {
                    return Err(Error::Config(format!("ridge.lambda must be nonnegative, got {lam}")));
                }
            }
            (None, rule) => {
                let rule = rule.unwrap_or(LambdaRule::COverSqrtM);
                let c = self.ridge.constant.unwrap_or(1.0);
                if !(c > 0.0) {
                    return Err(Error::Config("ridge.constant must be positive".into()));
                }
                self.ridge.lambda_rule = Some(rule);
                self.ridge.constant = Some(c);
                self.ridge.lambda = Some(c / (self.data.train_samples as f64).sqrt());
            }
        }
        if self.spectral.samples.is_none() {
            let max_m = self.system.shots * self.system.servers;
            self.spectral.samples = Some((10 * max_m).clamp(1_000, NYSTROM_CAP));
        }
        if self.spectral.kappa.is_none() {
            self.spectral.kappa = Some(discarded_fraction(&self.system));
        }
        if self.spectral.user == 0 || self.spectral.user > self.system.users {
            return Err(Error::Config(format!("spectral.user must lie in 1..={}", self.system.users)));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        self.constants.validate()?;
        if self.kind != ExperimentKind::MpGap {
            if self.tasks.is_empty() {
                return Err(Error::Config("tasks: at least one task is required".into()));
            }
            self.problem()?.validate()?;
        }
        Ok(self)
    }

    fn bank(&self) -> Result<SubfunctionBank> {
        let l = self.system.subfunctions;
        match self.subfunctions.preset {
            Some(BankPreset::Identity) => Ok(SubfunctionBank::identity(l)),
            Some(BankPreset::Squares) => Ok(SubfunctionBank::squares(l)),
            None => SubfunctionBank::new(self.subfunctions.input_dim.unwrap_or(l), self.subfunctions.entries.clone())
                .map_err(|e| Error::Config(format!("subfunctions: {e}"))),
        }
    }

    /// Builds the run description of a resolved scenario. A single task is
    /// shared by every user.
    pub fn problem(&self) -> Result<Problem> {
        let l = self.system.subfunctions;
        let built: Vec<TargetSpec> = self
            .tasks
            .iter()
            .map(|t| t.build(&self.kernel, l))
            .collect::<Result<_>>()
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(m),
                other => Error::Config(format!("tasks: {other}")),
            })?;
        let targets = match built.len() {
            1 => vec![built[0].clone(); self.system.users],
            n if n == self.system.users => built,
            n => {
                return Err(Error::Config(format!(
                    "tasks: give one task or one per user ({}), got {n}",
                    self.system.users
                )))
            }
        };
        Ok(Problem {
            config: self.system,
            kernel: self.kernel,
            bank: self.bank()?,
            law: self.inputs.clone().ok_or_else(|| Error::Config("scenario not resolved".into()))?,
            targets,
            mode: self.encoder.mode,
            redraw_per_trial: self.encoder.redraw_per_trial,
            sigma: self.data.sigma,
            train_samples: self.data.train_samples,
            test_samples: self.test_samples.unwrap_or(DEFAULT_TEST_SAMPLES),
            lambda: self.ridge.lambda.unwrap_or(0.0),
            spectral_samples: self.spectral.samples.unwrap_or(1_000),
            constants: self.constants,
        })
    }

    /// The fixed topology of a quenched or mp-gap run.
    pub fn fixed_topology(&self) -> Result<Topology> {
        match self.topology.source {
            TopologySource::Random => {
                let mut a = stream(self.seed, 0, 0, Stage::Assignment);
                let mut l = stream(self.seed, 0, 0, Stage::Links);
                Ok(Topology::sample(&self.system, &mut a, &mut l))
            }
            TopologySource::File => {
                let file = self.topology.file.as_ref().ok_or_else(|| Error::Config("topology.file missing".into()))?;
                let text = fs::read_to_string(file)?;
                Ok(Topology::parse(&text)?.1)
            }
            TopologySource::DisjointBalanced => disjoint_balanced_topology(&self.system),
            TopologySource::Aliased => aliased_topology(&self.system),
        }
    }
}

/// One CSV/JSON cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Int(u64),
    Float(f64),
    /// Value undefined for this row.
    Empty,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format!("{v:.16e}"),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Int(v) => Value::from(*v),
            Cell::Float(v) => serde_json::Number::from_f64(*v).map_or(Value::Null, Value::Number),
            Cell::Empty => Value::Null,
        }
    }

    fn opt(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Float)
    }
}

/// A table ready to be written.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(name: &str, columns: &[&'static str]) -> Self {
        Self { name: name.to_string(), columns: columns.to_vec(), rows: Vec::new() }
    }

    /// Index of a column by name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| *c == name)
    }

    pub fn floats(&self, name: &str) -> Vec<f64> {
        let Some(j) = self.column(name) else { return Vec::new() };
        self.rows
            .iter()
            .filter_map(|r| match r[j] {
                Cell::Float(v) => Some(v),
                Cell::Int(v) => Some(v as f64),
                Cell::Empty => None,
            })
            .collect()
    }
}

pub const QUENCHED_COLUMNS: [&str; 9] =
    ["seed", "trial", "user", "m_k", "risk", "se", "t1_upper", "spectral_tail", "coverage_floor"];
pub const ANNEALED_COLUMNS: [&str; 7] = ["seed", "trial", "avg_risk", "avg_m", "miss_count", "t2_lower", "t2_upper"];
pub const ANNEALED_SUMMARY_COLUMNS: [&str; 9] =
    ["seed", "servers", "m_avg", "avg_risk", "se", "avg_m", "miss_count", "t2_lower", "t2_upper"];
pub const MPGAP_COLUMNS: [&str; 5] = ["kappa", "D_q", "Phi_MP", "gap", "envelope"];
pub const BOUNDS_COLUMNS: [&str; 8] =
    ["seed", "user", "m_k", "t1_upper", "spectral_tail", "coverage_floor", "t2_lower", "t2_upper"];

/// Results of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub scenario: Scenario,
    pub tables: Vec<Table>,
}

fn quenched_rows(table: &mut Table, seed: u64, trial: u64, report: &RiskReport, problem: &Problem) {
    let gamma = problem.config.gamma();
    let b = problem.norm_bound();
    let first = report.per_user_first_term(&problem.constants, b, gamma);
    let rest = report
        .upper
        .as_ref()
        .map(|u| u.term("variance").unwrap_or(0.0) + u.term("bias").unwrap_or(0.0));
    for k in 0..report.received.len() {
        let m = report.received[k];
        let t1 = if m == 0 { None } else { rest.map(|r| first[k] + r) };
        table.rows.push(vec![
            Cell::Int(seed),
            Cell::Int(trial),
            Cell::Int(k as u64 + 1),
            Cell::Int(m as u64),
            Cell::Float(report.risk.per_user[k]),
            Cell::Float(report.risk.per_user_se[k]),
            Cell::opt(t1),
            Cell::Float(report.spectral_tails[k]),
            Cell::Float(report.coverage_floors[k]),
        ]);
    }
}

/// Trains and scores `trials` independent encoder and data draws on one
/// fixed topology.
pub fn run_quenched(scenario: &Scenario) -> Result<Outcome> {
    let problem = scenario.problem()?;
    let topology = scenario.fixed_topology()?;
    let spectral = problem.spectrum(scenario.seed)?;
    let mut table = Table::new("quenched", &QUENCHED_COLUMNS);
    for trial in 0..scenario.trials as u64 {
        let report = quenched_run(&problem, topology.clone(), &spectral, scenario.seed, trial)?;
        quenched_rows(&mut table, scenario.seed, trial, &report, &problem);
    }
    Ok(Outcome { scenario: scenario.clone(), tables: vec![table] })
}

/// Independent topology draws; with a server sweep, one summary row per point.
pub fn run_annealed(scenario: &Scenario) -> Result<Outcome> {
    let points: Vec<usize> = if scenario.sweep.servers.is_empty() {
        vec![scenario.system.servers]
    } else {
        scenario.sweep.servers.clone()
    };
    let mut per_trial = Table::new("annealed", &ANNEALED_COLUMNS);
    let mut summary = Table::new("annealed_summary", &ANNEALED_SUMMARY_COLUMNS);
    for &servers in &points {
        let mut s = scenario.clone();
        s.system.servers = servers;
        s.system.validate().map_err(|e| Error::Config(format!("sweep.servers: {e}")))?;
        let problem = s.problem()?;
        let report = annealed_run(&problem, scenario.trials, scenario.seed)?;
        for (trial, draw) in report.draws.iter().enumerate() {
            per_trial.rows.push(vec![
                Cell::Int(scenario.seed),
                Cell::Int(trial as u64),
                Cell::Float(draw.risk.average),
                Cell::Float(draw.m_arith),
                Cell::Int(report.miss_counts[trial] as u64),
                Cell::Float(report.lower.total),
                Cell::Float(report.upper.total),
            ]);
        }
        let m_avg = s.system.shots as f64 * servers as f64 * s.system.delta();
        summary.rows.push(vec![
            Cell::Int(scenario.seed),
            Cell::Int(servers as u64),
            Cell::Float(m_avg),
            Cell::Float(report.average_risk),
            Cell::Float(report.average_risk_se),
            Cell::Float(report.average_m),
            Cell::Int(report.miss_counts.iter().sum::<usize>() as u64),
            Cell::Float(report.lower.total),
            Cell::Float(report.upper.total),
        ]);
    }
    Ok(Outcome { scenario: scenario.clone(), tables: vec![per_trial, summary] })
}

/// Gap between the MP benchmark and the normalized operator spectrum of
/// one user under the linear-limit code.
pub fn run_mpgap(scenario: &Scenario) -> Result<Outcome> {
    if scenario.kernel.family != KernelFamily::Linear {
        return Err(Error::Config(format!(
            "mp-gap compares linear schemes on isotropic inputs; kernel.family must be \"linear\", got \"{}\"",
            scenario.kernel.family.name()
        )));
    }
    let l = scenario.system.subfunctions;
    let isotropic = matches!(scenario.inputs, Some(InputLaw::StandardNormal { dim }) if dim == l)
        && scenario.subfunctions.preset == Some(BankPreset::Identity);
    if !isotropic {
        return Err(Error::Config(
            "mp-gap requires standard normal inputs with the identity subfunction bank".into(),
        ));
    }
    let cfg = &scenario.system;
    let topology = scenario.fixed_topology()?;
    let mut rng = stream(scenario.seed, 0, 0, Stage::LinearCode);
    let bank = LinearBank::draw(cfg, &topology, &mut rng);
    let user = scenario.spectral.user - 1;
    let received = topology.received_index(cfg, user)?;
    let esd = normalized_operator_spectrum(&bank.user_matrix(&received), cfg.compute_budget)?;
    let law = MpLaw::new(cfg.fanout_budget as f64 / cfg.compute_budget as f64)?;
    let kappa = scenario.spectral.kappa.unwrap_or_else(|| discarded_fraction(cfg));
    let grid = if scenario.spectral.single_kappa { vec![kappa] } else { kappa_grid(&esd, &[kappa]) };
    let mut table = Table::new("mp_gap", &MPGAP_COLUMNS);
    for k in grid {
        let g = mp_gap(&esd, &law, k)?;
        table.rows.push(vec![
            Cell::Float(g.kappa),
            Cell::Float(g.d_q),
            Cell::Float(g.phi_mp),
            Cell::Float(g.gap),
            Cell::Float(g.envelope),
        ]);
    }
    Ok(Outcome { scenario: scenario.clone(), tables: vec![table] })
}

/// Both bound sides on the fixed topology without training decoders.
pub fn run_bounds(scenario: &Scenario) -> Result<Outcome> {
    let problem = scenario.problem()?;
    let topology = scenario.fixed_topology()?;
    let spectral = problem.spectrum(scenario.seed)?;
    let encoder: Encoder = problem.draw_encoder(&topology, scenario.seed, 0)?;
    let received: Vec<ReceivedIndex> = (0..problem.config.users)
        .map(|k| topology.received_index(&problem.config, k))
        .collect::<Result<_>>()?;
    let dims = feature_dimensions(&problem, &encoder, &received, scenario.seed)?;
    let report = assemble_report(&problem, &topology, &received, &dims, &spectral, None)?;
    let inputs = AnnealedInputs {
        b: problem.norm_bound(),
        sigma: problem.sigma,
        d_lambda: report.d_lambda,
        m_train: problem.train_samples,
        lambda: problem.lambda,
        r_avg: problem.r_avg(),
    };
    let (lower, upper) = annealed_bounds(&problem.constants, &problem.config, &inputs, &spectral)?;
    let first = report.per_user_first_term(&problem.constants, problem.norm_bound(), problem.config.gamma());
    let rest = report.upper.as_ref().map(|u| u.term("variance").unwrap_or(0.0) + u.term("bias").unwrap_or(0.0));
    let mut table = Table::new("bounds", &BOUNDS_COLUMNS);
    for k in 0..report.received.len() {
        let m = report.received[k];
        table.rows.push(vec![
            Cell::Int(scenario.seed),
            Cell::Int(k as u64 + 1),
            Cell::Int(m as u64),
            Cell::opt(if m == 0 { None } else { rest.map(|r| first[k] + r) }),
            Cell::Float(report.spectral_tails[k]),
            Cell::Float(report.coverage_floors[k]),
            Cell::Float(lower.total),
            Cell::Float(upper.total),
        ]);
    }
    Ok(Outcome { scenario: scenario.clone(), tables: vec![table] })
}

/// Runs the scenario's experiment kind on a pool of `threads` workers
/// (0 means the rayon default).
pub fn run(scenario: &Scenario, threads: usize) -> Result<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match scenario.kind {
        ExperimentKind::Quenched => run_quenched(scenario),
        ExperimentKind::Annealed => run_annealed(scenario),
        ExperimentKind::MpGap => run_mpgap(scenario),
        ExperimentKind::BoundsOnly => run_bounds(scenario),
    })
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// `# key = value` lines for the resolved scenario, every bound constant
/// included.
pub fn header(scenario: &Scenario) -> Result<String> {
    let value = serde_json::to_value(scenario).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut pairs = Vec::new();
    flatten("", &value, &mut pairs);
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "# {k} = {v}");
    }
    Ok(out)
}

/// CSV text with header comments.
pub fn render_csv(scenario: &Scenario, table: &Table) -> Result<String> {
    let mut out = header(scenario)?;
    out.push_str(&table.columns.join(","));
    out.push('\n');
    for row in &table.rows {
        let cells: Vec<String> = row.iter().map(Cell::csv).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// JSON mirror: resolved scenario, columns, and rows.
pub fn render_json(scenario: &Scenario, table: &Table) -> Result<String> {
    let rows: Vec<Value> = table.rows.iter().map(|r| Value::Array(r.iter().map(Cell::json).collect())).collect();
    let doc = serde_json::json!({
        "scenario": scenario,
        "table": table.name,
        "columns": table.columns,
        "rows": rows,
    });
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Numeric(e.to_string()))
}

/// Scenario embedded in a JSON mirror.
pub fn scenario_from_json(text: &str) -> Result<Scenario> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    serde_json::from_value(doc["scenario"].clone()).map_err(|e| Error::Config(e.to_string()))
}

fn check_finite(table: &Table) -> Result<()> {
    for (i, row) in table.rows.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            if let Cell::Float(v) = c {
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "{} row {} column {} is {v}",
                        table.name,
                        i + 1,
                        table.columns[j]
                    )));
                }
            }
        }
    }
    Ok(())
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Writes `<name>.csv` and `<name>.json` for every table. All content is
/// rendered and checked before anything touches the output directory.
pub fn emit_report(outcome: &Outcome, dir: &Path) -> Result<Vec<PathBuf>> {
    if outcome.tables.is_empty() || outcome.tables.iter().any(|t| t.rows.is_empty()) {
        return Err(Error::InvalidArgument("no result rows to write".into()));
    }
    let mut rendered = Vec::new();
    for t in &outcome.tables {
        check_finite(t)?;
        rendered.push((dir.join(format!("{}.csv", t.name)), render_csv(&outcome.scenario, t)?));
        rendered.push((dir.join(format!("{}.json", t.name)), render_json(&outcome.scenario, t)?));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (path, text) in rendered {
        write_atomic(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

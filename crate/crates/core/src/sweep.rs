//! Experiment sweeps over power, subframe count, RIS size, or scenario mix.
//!
//! A sweep row pairs one (axis value, method, seed) with its test NMSE,
//! average per-antenna SNR, and pilot-slot cost. Classical baselines draw
//! fresh random feasible scattering per sample; learned methods evaluate a
//! pre-trained bundle. LS rows whose budget is below the unique-solution
//! threshold carry an "underdetermined" status instead of a number.

use crate::channel::DatasetSplit;
use crate::cx::CMat;
use crate::estimators::{column_second_moment, lmmse_estimate, ls_estimate, EstimatorError};
use crate::models::ModelBundle;
use crate::physics::{random_training_set, CascadedChannelTensor, SystemConfig};
use crate::protocol::{build_pilot_book, run_phase, Phase};
use crate::rng::derive_seed;
use crate::train::{evaluate_bundle, nmse_sample, snr_report, EvalSummary};

const TAG_CLASSICAL_SCAT: u64 = 0x434c5343; // "CLSC"
const TAG_CLASSICAL_NOISE: u64 = 0x434c4e53; // "CLNS"

/// Sweep axis selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    PuDbm,
    Tau2,
    RisElements,
    MixRatio,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PuDbm => "pu_dbm",
            SweepAxis::Tau2 => "tau2",
            SweepAxis::RisElements => "m",
            SweepAxis::MixRatio => "mix_ratio",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pu_dbm" | "pu" => Ok(SweepAxis::PuDbm),
            "tau2" => Ok(SweepAxis::Tau2),
            "m" | "ris_elements" => Ok(SweepAxis::RisElements),
            "mix_ratio" | "rho" => Ok(SweepAxis::MixRatio),
            other => Err(format!("unknown sweep axis '{other}'")),
        }
    }
}

/// Methods a sweep can evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Jtsmlcef,
    Dacen,
    Ls,
    Lmmse,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Jtsmlcef => "jtsmlcef",
            Method::Dacen => "dacen",
            Method::Ls => "ls",
            Method::Lmmse => "lmmse",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Method::Jtsmlcef | Method::Dacen)
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jtsmlcef" => Ok(Method::Jtsmlcef),
            "dacen" => Ok(Method::Dacen),
            "ls" => Ok(Method::Ls),
            "lmmse" => Ok(Method::Lmmse),
            other => Err(format!("unknown method '{other}'")),
        }
    }
}

/// Sweep request: axis, grid, methods, seeds.
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Base seed for evaluation-time noise and scattering draws.
    pub eval_seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.grid.is_empty() {
            return Err("sweep grid must be nonempty".into());
        }
        if self.methods.is_empty() {
            return Err("sweep needs at least one method".into());
        }
        if self.seeds.is_empty() {
            return Err("sweep needs at least one seed".into());
        }
        Ok(())
    }
}

/// Everything needed to evaluate one grid point.
pub struct GridResources {
    pub value: f64,
    /// System configuration with the axis value applied (p_u, tau2, M, ...).
    pub cfg: SystemConfig,
    pub test: DatasetSplit,
    /// Training split for the LMMSE column prior.
    pub train: Option<DatasetSplit>,
    /// Subframe budget for the classical methods at this grid point.
    pub classical_tau: usize,
    /// Learned bundles keyed by (method, seed).
    pub bundles: Vec<(Method, u64, ModelBundle)>,
}

impl GridResources {
    fn bundle(&self, method: Method, seed: u64) -> Option<&ModelBundle> {
        self.bundles
            .iter()
            .find(|(m, s, _)| *m == method && *s == seed)
            .map(|(_, _, b)| b)
    }
}

/// One output row.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub method: Method,
    pub seed: u64,
    /// None when the estimator is undefined at this budget.
    pub nmse: Option<f64>,
    pub avg_snr_db: f64,
    pub pilot_slots: usize,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let nmse = match self.nmse {
            Some(x) => format!("{x}"),
            None => "underdetermined".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{}",
            self.axis.name(),
            self.value,
            self.method.name(),
            self.seed,
            nmse,
            self.avg_snr_db,
            self.pilot_slots
        )
    }
}

pub const CSV_HEADER: &str = "axis,value,method,seed,nmse,avg_snr_db,pilot_slots";

pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug)]
pub enum SweepError {
    Spec(String),
    /// A learned method has no bundle at a grid point.
    MissingBundle { method: Method, value: f64, seed: u64 },
    /// LMMSE needs a training split for its prior.
    MissingTrainSplit { value: f64 },
}

impl std::fmt::Display for SweepError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepError::Spec(s) => write!(f, "invalid sweep spec: {s}"),
            SweepError::MissingBundle { method, value, seed } => write!(
                f,
                "no trained bundle for method {} at grid value {value}, seed {seed}",
                method.name()
            ),
            SweepError::MissingTrainSplit { value } => {
                write!(f, "lmmse needs a training split at grid value {value}")
            }
        }
    }
}

impl std::error::Error for SweepError {}

/// Evaluates a classical method over a split with per-sample random feasible
/// scattering. Returns None NMSE when LS is underdetermined at this budget.
pub fn run_classical(
    method: Method,
    cfg: &SystemConfig,
    test: &DatasetSplit,
    train: Option<&DatasetSplit>,
    tau: usize,
    eval_seed: u64,
) -> Result<(Option<f64>, f64, usize), SweepError> {
    assert!(!method.is_learned());
    let book = build_pilot_book(cfg.users, cfg.user_antennas);
    let sigma_eff2 = cfg.noise_power / cfg.ku() as f64;
    let covs: Option<Vec<CMat>> = match method {
        Method::Lmmse => {
            let tr = train.ok_or(SweepError::MissingTrainSplit { value: f64::NAN })?;
            Some((0..cfg.users).map(|k| column_second_moment(tr, k)).collect())
        }
        _ => None,
    };
    let mut nmse_acc = 0.0;
    let mut snr_acc = 0.0;
    let mut underdetermined = false;
    for (i, sample) in test.samples.iter().enumerate() {
        let scat_seed = derive_seed(eval_seed, &[TAG_CLASSICAL_SCAT, i as u64]);
        let (_, scats) = random_training_set(cfg, tau, scat_seed);
        let noise_seed = derive_seed(eval_seed, &[TAG_CLASSICAL_NOISE, i as u64]);
        let obs = run_phase(&sample.channels, &scats, None, &book, cfg, noise_seed, Phase::One);
        let phi_t = obs.training_matrix();
        let mut users = Vec::with_capacity(cfg.users);
        for k in 0..cfg.users {
            let est = match method {
                Method::Ls => match ls_estimate(&obs.per_user[k], &phi_t, cfg.p_u) {
                    Ok(q) => q,
                    Err(EstimatorError::Underdetermined { .. })
                    | Err(EstimatorError::RankDeficient { .. }) => {
                        underdetermined = true;
                        CMat::zeros(cfg.nu(), cfg.total_half_len())
                    }
                },
                Method::Lmmse => lmmse_estimate(
                    &obs.per_user[k],
                    &phi_t,
                    cfg.p_u,
                    sigma_eff2,
                    &covs.as_ref().unwrap()[k],
                ),
                _ => unreachable!(),
            };
            users.push(est);
        }
        if !underdetermined {
            nmse_acc += nmse_sample(&CascadedChannelTensor { users }, &sample.cascaded);
        }
        let mut snr_sample = 0.0;
        for scat in &scats {
            let (_, avg) = snr_report(&sample.channels, scat, cfg.p_u, cfg.noise_power, cfg);
            snr_sample += avg;
        }
        snr_acc += snr_sample / scats.len() as f64;
        if underdetermined {
            break;
        }
    }
    let pilot_slots = cfg.ku() * tau;
    if underdetermined {
        return Ok((None, f64::NAN, pilot_slots));
    }
    let n = test.samples.len() as f64;
    Ok((Some(nmse_acc / n), snr_acc / n, pilot_slots))
}

/// Runs the full sweep; rows come out in (grid, method, seed) order, so the
/// CSV bytes are a pure function of the inputs.
pub fn run_sweep(spec: &SweepSpec, grid: &[GridResources]) -> Result<Vec<SweepRow>, SweepError> {
    spec.validate().map_err(SweepError::Spec)?;
    assert_eq!(spec.grid.len(), grid.len(), "one GridResources per grid value");
    let mut rows = Vec::new();
    for (gi, res) in grid.iter().enumerate() {
        for &method in &spec.methods {
            for &seed in &spec.seeds {
                let eval_seed =
                    derive_seed(spec.eval_seed, &[gi as u64, method as u64, seed]);
                let row = if method.is_learned() {
                    let bundle = res.bundle(method, seed).ok_or(SweepError::MissingBundle {
                        method,
                        value: res.value,
                        seed,
                    })?;
                    let p_u_dbm = match spec.axis {
                        SweepAxis::PuDbm => Some(res.value),
                        _ => None,
                    };
                    let summary: EvalSummary =
                        evaluate_bundle(bundle, &res.test, eval_seed, p_u_dbm);
                    SweepRow {
                        axis: spec.axis,
                        value: res.value,
                        method,
                        seed,
                        nmse: Some(summary.nmse),
                        avg_snr_db: summary.avg_snr_db,
                        pilot_slots: summary.pilot_slots,
                    }
                } else {
                    let (nmse, snr, slots) = run_classical(
                        method,
                        &res.cfg,
                        &res.test,
                        res.train.as_ref(),
                        res.classical_tau,
                        eval_seed,
                    )?;
                    SweepRow {
                        axis: spec.axis,
                        value: res.value,
                        method,
                        seed,
                        nmse,
                        avg_snr_db: snr,
                        pilot_slots: slots,
                    }
                };
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

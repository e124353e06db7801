//! Joint training, evaluation metrics, and the optimizer.
//!
//! A training step draws one transmit power for the batch, then per sample:
//! simulates Phase I with the frozen random scattering and fresh noise, runs
//! the optimizer network, converts its susceptances on the tape, simulates
//! Phase II in-graph with fresh noise, runs the estimator, and backpropagates
//! the normalized MSE through the whole chain. Gradients accumulate over the
//! batch sequentially, so a (config, seed) pair reproduces checkpoints
//! byte for byte.

use crate::autodiff::{NodeId, Tape};
use crate::channel::{compute_norm_stats, DatasetSplit, NormStats, Sample};
use crate::cx::CMat;
use crate::models::{
    dace_forward, decorrelate_noise, extract_scattering, observation_constant,
    phase2_observation_graph, ssc_graph, tsmo_forward, tsmo_input,
    DaceParams, MethodTag, ModelBundle, ModelHyper, ParamStore, PuStandardizer, TsmoParams,
};
use crate::physics::{
    build_mapping, dbm_to_watts, random_training_set, scattering_for_all_subframes,
    watts_to_dbm, CascadedChannelTensor, MappingP, ScatteringMatrix, SystemConfig,
};
use crate::protocol::{
    build_pilot_book, run_phase_with_noise, subframe_noise, total_training_slots, Phase,
    PhaseObservation, PilotBook,
};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

const TAG_PHASE1: u64 = 0x50483153; // "PH1S"
const TAG_PHASE2_FIXED: u64 = 0x50483246; // "PH2F"
const TAG_INIT: u64 = 0x494e4954; // "INIT"
const TAG_STATS: u64 = 0x53544154; // "STAT"
const TAG_SHUFFLE: u64 = 0x53485546; // "SHUF"
const TAG_STEP: u64 = 0x53544550; // "STEP"
const TAG_VAL: u64 = 0x56414c30; // "VAL0"

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Early-stop patience in epochs of non-improving validation NMSE.
    pub patience: usize,
    /// Minimum validation improvement that counts.
    pub min_delta: f64,
    pub seed: u64,
    /// Per-step transmit power is drawn uniformly from this dBm interval.
    pub p_u_lo_dbm: f64,
    pub p_u_hi_dbm: f64,
}

impl TrainConfig {
    pub fn desk_scale(seed: u64) -> Self {
        TrainConfig {
            batch_size: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 40,
            patience: 10,
            min_delta: 1e-4,
            seed,
            p_u_lo_dbm: -6.0,
            p_u_hi_dbm: 9.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err("learning_rate must be positive".into());
        }
        if self.max_epochs == 0 {
            return Err("max_epochs must be >= 1".into());
        }
        if self.p_u_hi_dbm < self.p_u_lo_dbm {
            return Err("transmit power interval is inverted".into());
        }
        Ok(())
    }

    pub fn center_p_u_dbm(&self) -> f64 {
        0.5 * (self.p_u_lo_dbm + self.p_u_hi_dbm)
    }
}

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    /// Loss became non-finite.
    Diverged { epoch: usize, step: usize },
    Stats(String),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Config(s) => write!(f, "invalid configuration: {s}"),
            TrainError::Diverged { epoch, step } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}, step {step}")
            }
            TrainError::Stats(s) => write!(f, "normalization statistics: {s}"),
        }
    }
}

impl std::error::Error for TrainError {}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Real [2, NU, K, H] tensor view of a cascaded channel, scaled by `scale`.
pub fn cascaded_to_tensor(q: &CascadedChannelTensor, scale: f64) -> Tensor {
    let nu = q.users[0].rows;
    let h = q.users[0].cols;
    let k = q.users.len();
    Tensor::from_fn(vec![2, nu, k, h], |ix| {
        let z = q.users[ix[2]].at(ix[1], ix[3]);
        scale * if ix[0] == 0 { z.re } else { z.im }
    })
}

/// Inverse of [`cascaded_to_tensor`].
pub fn tensor_to_cascaded(t: &Tensor, scale: f64) -> CascadedChannelTensor {
    let s = t.shape();
    let (nu, k, h) = (s[1], s[2], s[3]);
    let users = (0..k)
        .map(|kk| {
            CMat::from_fn(nu, h, |r, c| {
                let re = t.data()[((r * k) + kk) * h + c];
                let im = t.data()[(((nu + r) * k) + kk) * h + c];
                crate::cx::C64::new(re * scale, im * scale)
            })
        })
        .collect();
    CascadedChannelTensor { users }
}

/// Batch-mean MSE over gain-normalized labels:
/// mean_b (1/N_tot) || [Re,Im](Q)/sqrt(gain) - [Re,Im](Q-hat) ||_F^2.
pub fn mse_loss(estimates: &[Tensor], labels: &[CascadedChannelTensor], label_gain: f64) -> f64 {
    assert_eq!(estimates.len(), labels.len(), "batch sizes must match");
    assert!(!estimates.is_empty());
    let inv_sqrt_gain = 1.0 / label_gain.sqrt();
    let mut acc = 0.0;
    for (est, q) in estimates.iter().zip(labels) {
        let label = cascaded_to_tensor(q, inv_sqrt_gain);
        assert_eq!(est.shape(), label.shape(), "estimate/label shape mismatch");
        let n_tot = label.numel() as f64;
        let se: f64 = est
            .data()
            .iter()
            .zip(label.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        acc += se / n_tot;
    }
    acc / estimates.len() as f64
}

/// NMSE of one estimate: ||Q - Q-hat||_F^2 / ||Q||_F^2.
pub fn nmse_sample(q_hat: &CascadedChannelTensor, q: &CascadedChannelTensor) -> f64 {
    let denom = q.frob_norm2();
    assert!(denom > 0.0, "NMSE undefined for a zero-norm label");
    let mut num = 0.0;
    for (a, b) in q_hat.users.iter().zip(&q.users) {
        num += a.sub(b).frob_norm2();
    }
    num / denom
}

/// Per-user and average SNR in dB: SNR_k = P_u ||H_IT Phi H_RI,k||_F^2 / (NU sigma^2).
pub fn snr_report(
    ch: &crate::physics::ChannelPair,
    scat: &ScatteringMatrix,
    p_u: f64,
    noise_power: f64,
    cfg: &SystemConfig,
) -> (Vec<f64>, f64) {
    let nu = cfg.nu() as f64;
    let per_user: Vec<f64> = (0..cfg.users)
        .map(|k| {
            let h = crate::physics::effective_channel(ch, scat, cfg, k);
            let lin = p_u * h.frob_norm2() / (nu * noise_power);
            10.0 * lin.log10()
        })
        .collect();
    let avg = per_user.iter().sum::<f64>() / per_user.len() as f64;
    (per_user, avg)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with bias correction; state order follows the parameter store.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, tc: &TrainConfig) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            m,
            v,
            t: 0,
            lr: tc.learning_rate,
            beta1: tc.beta1,
            beta2: tc.beta2,
            epsilon: tc.epsilon,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, tensor)) in store.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pipeline graph
// ---------------------------------------------------------------------------

/// Immutable context shared by every sample session of a bundle.
pub struct Pipeline<'a> {
    pub cfg: &'a SystemConfig,
    pub book: &'a PilotBook,
    pub mapping: &'a MappingP,
    pub norm: NormStats,
    pub pu_std: PuStandardizer,
    pub phase1_scattering: &'a [ScatteringMatrix],
    pub tsmo: Option<&'a TsmoParams>,
    pub dace: &'a DaceParams,
    /// Fixed Phase-II scattering for the no-TSMO ablation.
    pub phase2_fixed: Option<&'a [ScatteringMatrix]>,
}

/// Per-sample stochastic inputs; frozen explicitly so gradient checks can
/// re-run the identical forward.
pub struct SessionDraws {
    pub p_u: f64,
    pub phase1_noise: Vec<CMat>,
    pub phase2_noise: Vec<CMat>,
}

impl SessionDraws {
    /// Deterministic draws for (seed, sample) at the given power.
    pub fn new(cfg: &SystemConfig, session_seed: u64, p_u: f64) -> Self {
        let phase1_noise =
            (0..cfg.tau1).map(|t| subframe_noise(cfg, session_seed, Phase::One, t)).collect();
        let phase2_noise =
            (0..cfg.tau2).map(|t| subframe_noise(cfg, session_seed, Phase::Two, t)).collect();
        SessionDraws { p_u, phase1_noise, phase2_noise }
    }
}

/// Forward products of one sample session.
pub struct SessionForward {
    pub estimate: NodeId,
    pub phase1: PhaseObservation,
    pub phase2_scattering: Vec<ScatteringMatrix>,
}

impl<'a> Pipeline<'a> {
    /// Builds the estimate graph for one sample. With a TSMO present the
    /// whole Phase-II chain lives on the tape; otherwise Phase II is
    /// simulated outside and enters as a constant.
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        sample: &Sample,
        draws: &SessionDraws,
    ) -> SessionForward {
        let cfg_pu = SystemConfig { p_u: draws.p_u, ..self.cfg.clone() };
        let p_u_dbm = watts_to_dbm(draws.p_u);
        let mut p1_iter = draws.phase1_noise.iter();
        let phase1 = run_phase_with_noise(
            &sample.channels,
            self.phase1_scattering,
            None,
            self.book,
            &cfg_pu,
            |_| p1_iter.next().expect("phase-I noise per subframe").clone(),
            Phase::One,
        );

        let (estimate, phase2_scattering) = match self.tsmo {
            Some(tsmo) => {
                let input = tsmo_input(&phase1, &cfg_pu, &self.norm, &self.pu_std, p_u_dbm);
                let raw = tsmo_forward(tape, tsmo, nodes, &cfg_pu, &input);
                let scats = ssc_graph(tape, raw, &cfg_pu, self.mapping);
                let dec = decorrelate_noise(&draws.phase2_noise, self.book, &cfg_pu);
                let obs2 = phase2_observation_graph(
                    tape,
                    &sample.channels,
                    &scats,
                    &dec,
                    &cfg_pu,
                    &self.norm,
                );
                let out = dace_forward(tape, self.dace, nodes, &cfg_pu, obs2);
                (out.estimate, extract_scattering(tape, &scats))
            }
            None => {
                let fixed = self.phase2_fixed.expect("ablation bundles carry fixed scattering");
                let mut p2_iter = draws.phase2_noise.iter();
                let phase2 = run_phase_with_noise(
                    &sample.channels,
                    fixed,
                    None,
                    self.book,
                    &cfg_pu,
                    |_| p2_iter.next().expect("phase-II noise per subframe").clone(),
                    Phase::Two,
                );
                let obs2 = observation_constant(tape, &phase2, &cfg_pu, &self.norm);
                let out = dace_forward(tape, self.dace, nodes, &cfg_pu, obs2);
                (out.estimate, fixed.to_vec())
            }
        };
        SessionForward { estimate, phase1, phase2_scattering }
    }

    /// Appends the normalized-MSE loss node for a sample estimate.
    pub fn loss(&self, tape: &mut Tape, estimate: NodeId, sample: &Sample) -> NodeId {
        let label = cascaded_to_tensor(&sample.cascaded, 1.0 / self.norm.label_gain.sqrt());
        let n_tot = label.numel() as f64;
        let label_node = tape.constant(label);
        let diff = tape.sub(estimate, label_node);
        let sq = tape.mul(diff, diff);
        let s = tape.sum(sq);
        tape.scale(s, 1.0 / n_tot)
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Progress of one epoch, reported through the observer callback.
#[derive(Clone, Copy, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    /// Mean over the last (up to) 10 batches; tracks where the loss ended.
    pub tail_loss: f64,
    pub val_nmse: f64,
    pub best_val_nmse: f64,
}

/// Trains the joint pipeline (or the no-TSMO ablation) and returns the
/// best-validation bundle. Deterministic in (configs, seed).
pub fn train_joint(
    train: &DatasetSplit,
    val: &DatasetSplit,
    cfg: &SystemConfig,
    hyper: &ModelHyper,
    tc: &TrainConfig,
    method: MethodTag,
    mut observer: impl FnMut(EpochReport),
) -> Result<ModelBundle, TrainError> {
    tc.validate().map_err(TrainError::Config)?;
    cfg.validate().map_err(TrainError::Config)?;
    hyper.validate(cfg).map_err(TrainError::Config)?;

    let book = build_pilot_book(cfg.users, cfg.user_antennas);
    let mapping = build_mapping(cfg.group_size());
    let phase1_seed = derive_seed(tc.seed, &[TAG_PHASE1]);
    let (phase1_susceptance, phase1_scattering) =
        random_training_set(cfg, cfg.tau1, phase1_seed);
    let phase2_fixed = match method {
        MethodTag::Jtsmlcef => None,
        MethodTag::Dacen => {
            let seed = derive_seed(tc.seed, &[TAG_PHASE2_FIXED]);
            Some(random_training_set(cfg, cfg.tau2, seed))
        }
    };

    // normalization statistics: Phase-I observations over the training split
    // at the interval-center power, with a dedicated noise stream
    let center_cfg = SystemConfig { p_u: dbm_to_watts(tc.center_p_u_dbm()), ..cfg.clone() };
    let stats_seed = derive_seed(tc.seed, &[TAG_STATS]);
    let stat_obs: Vec<PhaseObservation> = train
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            run_phase_with_noise(
                &s.channels,
                &phase1_scattering,
                None,
                &book,
                &center_cfg,
                |t| subframe_noise(&center_cfg, derive_seed(stats_seed, &[i as u64]), Phase::One, t),
                Phase::One,
            )
        })
        .collect();
    let norm = compute_norm_stats(train, &stat_obs).map_err(TrainError::Stats)?;
    drop(stat_obs);

    // parameters
    let mut store = ParamStore::new();
    let mut init_rng = Rng::new(derive_seed(tc.seed, &[TAG_INIT]));
    let tsmo = match method {
        MethodTag::Jtsmlcef => Some(TsmoParams::init(&mut store, cfg, hyper, &mut init_rng)),
        MethodTag::Dacen => None,
    };
    let dace = DaceParams::init(&mut store, cfg, hyper, &mut init_rng);
    let mut adam = Adam::new(&store, tc);

    let pu_std = PuStandardizer { lo_dbm: tc.p_u_lo_dbm, hi_dbm: tc.p_u_hi_dbm };
    let mut best_val = f64::INFINITY;
    let mut best_store = store.clone();
    let mut stall = 0usize;
    let mut global_step = 0u64;
    let mut tape = Tape::new();

    for epoch in 0..tc.max_epochs {
        let mut order: Vec<usize> = (0..train.samples.len()).collect();
        Rng::from_tags(tc.seed, &[TAG_SHUFFLE, epoch as u64]).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        let mut recent = std::collections::VecDeque::with_capacity(10);

        for batch in order.chunks(tc.batch_size) {
            let mut step_rng = Rng::from_tags(tc.seed, &[TAG_STEP, global_step]);
            let p_u_dbm = step_rng.uniform_in(tc.p_u_lo_dbm, tc.p_u_hi_dbm);
            let p_u = dbm_to_watts(p_u_dbm);
            let pipeline = Pipeline {
                cfg,
                book: &book,
                mapping: &mapping,
                norm,
                pu_std,
                phase1_scattering: &phase1_scattering,
                tsmo: tsmo.as_ref(),
                dace: &dace,
                phase2_fixed: phase2_fixed.as_ref().map(|(_, s)| s.as_slice()),
            };
            let mut grads: Vec<Vec<f64>> =
                store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let session_seed = derive_seed(tc.seed, &[TAG_STEP, global_step, idx as u64]);
                let draws = SessionDraws::new(cfg, session_seed, p_u);
                tape.reset();
                let nodes = store.mount(&mut tape);
                let fwd = pipeline.forward(&mut tape, &nodes, &train.samples[idx], &draws);
                let loss = pipeline.loss(&mut tape, fwd.estimate, &train.samples[idx]);
                batch_loss += tape.value(loss).data()[0];
                tape.backward(loss);
                for (i, node) in nodes.iter().enumerate() {
                    let g = tape.grad(*node);
                    for (a, b) in grads[i].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
            }
            let inv_b = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for x in g.iter_mut() {
                    *x *= inv_b;
                }
            }
            batch_loss *= inv_b;
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step: steps });
            }
            adam.step(&mut store, &grads);
            epoch_loss += batch_loss;
            if recent.len() == 10 {
                recent.pop_front();
            }
            recent.push_back(batch_loss);
            steps += 1;
            global_step += 1;
        }
        epoch_loss /= steps as f64;
        let tail_loss = recent.iter().sum::<f64>() / recent.len() as f64;

        // validation NMSE with frozen noise, at the interval center
        let val_nmse = {
            let pipeline = Pipeline {
                cfg,
                book: &book,
                mapping: &mapping,
                norm,
                pu_std,
                phase1_scattering: &phase1_scattering,
                tsmo: tsmo.as_ref(),
                dace: &dace,
                phase2_fixed: phase2_fixed.as_ref().map(|(_, s)| s.as_slice()),
            };
            let val_seed = derive_seed(tc.seed, &[TAG_VAL]);
            evaluate_pipeline(&pipeline, &store, val, val_seed, dbm_to_watts(tc.center_p_u_dbm()))
                .nmse
        };

        if val_nmse < best_val - tc.min_delta {
            best_val = val_nmse;
            best_store = store.clone();
            stall = 0;
        } else {
            stall += 1;
        }
        observer(EpochReport {
            epoch,
            train_loss: epoch_loss,
            tail_loss,
            val_nmse,
            best_val_nmse: best_val,
        });
        if stall >= tc.patience {
            break;
        }
    }

    let (tsmo, dace) = ModelBundle::rebuild_handles(&best_store, cfg, hyper, method)
        .expect("trained store matches its own architecture");
    Ok(ModelBundle {
        system: cfg.clone(),
        hyper: hyper.clone(),
        method,
        store: best_store,
        tsmo,
        dace,
        phase1_seed,
        phase1_susceptance,
        phase2_fixed: phase2_fixed.map(|(susc, _)| susc),
        norm,
        p_u_interval_dbm: (tc.p_u_lo_dbm, tc.p_u_hi_dbm),
        train_seed: tc.seed,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Aggregate evaluation result on a split.
#[derive(Clone, Copy, Debug)]
pub struct EvalSummary {
    pub nmse: f64,
    pub avg_snr_db: f64,
    pub pilot_slots: usize,
    pub samples: usize,
}

/// Forward-only evaluation of a pipeline over a split at a fixed power.
pub fn evaluate_pipeline(
    pipeline: &Pipeline<'_>,
    store: &ParamStore,
    split: &DatasetSplit,
    eval_seed: u64,
    p_u: f64,
) -> EvalSummary {
    let cfg = pipeline.cfg;
    let sqrt_gain = pipeline.norm.label_gain.sqrt();
    let mut nmse_acc = 0.0;
    let mut snr_acc = 0.0;
    let cfg_pu = SystemConfig { p_u, ..cfg.clone() };
    let mut tape = Tape::new();
    for (i, sample) in split.samples.iter().enumerate() {
        let session_seed = derive_seed(eval_seed, &[i as u64]);
        let draws = SessionDraws::new(cfg, session_seed, p_u);
        tape.reset();
        let nodes = store.mount(&mut tape);
        let fwd = pipeline.forward(&mut tape, &nodes, sample, &draws);
        let est = tensor_to_cascaded(tape.value(fwd.estimate), sqrt_gain);
        nmse_acc += nmse_sample(&est, &sample.cascaded);
        // SNR averaged over Phase-II subframes and users
        let mut snr_sample = 0.0;
        for scat in &fwd.phase2_scattering {
            let (_, avg) = snr_report(&sample.channels, scat, p_u, cfg.noise_power, &cfg_pu);
            snr_sample += avg;
        }
        snr_acc += snr_sample / fwd.phase2_scattering.len() as f64;
    }
    let n = split.samples.len();
    EvalSummary {
        nmse: nmse_acc / n as f64,
        avg_snr_db: snr_acc / n as f64,
        pilot_slots: total_training_slots(cfg),
        samples: n,
    }
}

/// Evaluates a trained bundle on a split at the given power (defaults to the
/// training-interval center when `None`).
pub fn evaluate_bundle(
    bundle: &ModelBundle,
    split: &DatasetSplit,
    eval_seed: u64,
    p_u_dbm: Option<f64>,
) -> EvalSummary {
    let cfg = &bundle.system;
    let book = build_pilot_book(cfg.users, cfg.user_antennas);
    let mapping = build_mapping(cfg.group_size());
    let phase1_scattering = scattering_for_all_subframes(&bundle.phase1_susceptance, cfg);
    let phase2_fixed = bundle
        .phase2_fixed
        .as_ref()
        .map(|susc| scattering_for_all_subframes(susc, cfg));
    let pipeline = Pipeline {
        cfg,
        book: &book,
        mapping: &mapping,
        norm: bundle.norm,
        pu_std: bundle.pu_standardizer(),
        phase1_scattering: &phase1_scattering,
        tsmo: bundle.tsmo.as_ref(),
        dace: &bundle.dace,
        phase2_fixed: phase2_fixed.as_deref(),
    };
    let dbm =
        p_u_dbm.unwrap_or_else(|| 0.5 * (bundle.p_u_interval_dbm.0 + bundle.p_u_interval_dbm.1));
    evaluate_pipeline(&pipeline, &bundle.store, split, eval_seed, dbm_to_watts(dbm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_dataset, ChannelModelConfig, Role};
    use crate::models::observation_constant;
    use crate::physics::random_feasible_scattering;

    fn tiny_dataset(cfg: &SystemConfig, count: usize, seed: u64) -> DatasetSplit {
        build_dataset(cfg, &ChannelModelConfig::default(), count, Role::Train, seed).unwrap()
    }

    #[test]
    fn mse_loss_perfect_and_zero() {
        let cfg = SystemConfig::micro();
        let split = tiny_dataset(&cfg, 3, 0);
        let gain: f64 = 0.7;
        let perfect: Vec<Tensor> = split
            .samples
            .iter()
            .map(|s| cascaded_to_tensor(&s.cascaded, 1.0 / gain.sqrt()))
            .collect();
        let labels: Vec<_> = split.samples.iter().map(|s| s.cascaded.clone()).collect();
        assert_eq!(mse_loss(&perfect, &labels, gain), 0.0);

        let zeros: Vec<Tensor> =
            perfect.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        let want: f64 = split
            .samples
            .iter()
            .map(|s| s.cascaded.frob_norm2() / (s.cascaded.total_real_coeffs() as f64 * gain))
            .sum::<f64>()
            / 3.0;
        let got = mse_loss(&zeros, &labels, gain);
        assert!((got - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn mse_loss_batch_of_identical_samples() {
        let cfg = SystemConfig::micro();
        let split = tiny_dataset(&cfg, 1, 5);
        let gain: f64 = 1.3;
        let est = cascaded_to_tensor(&split.samples[0].cascaded, 0.5);
        let one = mse_loss(
            &[est.clone()],
            &[split.samples[0].cascaded.clone()],
            gain,
        );
        let two = mse_loss(
            &[est.clone(), est],
            &[split.samples[0].cascaded.clone(), split.samples[0].cascaded.clone()],
            gain,
        );
        assert!((one - two).abs() < 1e-15);
    }

    #[test]
    fn nmse_identities() {
        let cfg = SystemConfig::micro();
        let split = tiny_dataset(&cfg, 1, 9);
        let q = &split.samples[0].cascaded;
        let zero = CascadedChannelTensor {
            users: q.users.iter().map(|m| CMat::zeros(m.rows, m.cols)).collect(),
        };
        assert!((nmse_sample(&zero, q) - 1.0).abs() < 1e-15);
        assert_eq!(nmse_sample(q, q), 0.0);
        let eps = 1e-3;
        let scaled = CascadedChannelTensor {
            users: q.users.iter().map(|m| m.scale_re(1.0 + eps)).collect(),
        };
        let got = nmse_sample(&scaled, q);
        assert!((got - eps * eps).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn snr_shifts_by_3db() {
        let cfg = SystemConfig::desk_scale();
        let split = tiny_dataset(&cfg, 1, 11);
        let ch = &split.samples[0].channels;
        let scat = random_feasible_scattering(&cfg, 1);
        let (_, base) = snr_report(ch, &scat, cfg.p_u, cfg.noise_power, &cfg);
        let (_, hot) = snr_report(ch, &scat, 2.0 * cfg.p_u, cfg.noise_power, &cfg);
        let (_, loud) = snr_report(ch, &scat, cfg.p_u, 2.0 * cfg.noise_power, &cfg);
        assert!((hot - base - 3.0103).abs() < 1e-3);
        assert!((loud - base + 3.0103).abs() < 1e-3);
    }

    #[test]
    fn snr_hand_value_on_scalar_channel() {
        let cfg = SystemConfig {
            bs_antennas: 1,
            ris_elements: 1,
            groups: 1,
            users: 1,
            user_antennas: 1,
            ..SystemConfig::desk_scale()
        };
        let ch = crate::physics::ChannelPair {
            h_it: CMat::identity(1),
            h_ri: CMat::identity(1),
        };
        let scat = crate::physics::ScatteringMatrix { blocks: vec![CMat::identity(1)] };
        // SNR = P_u * 1 / (1 * sigma^2) = 4 -> 6.0206 dB
        let (per_user, avg) = snr_report(&ch, &scat, 2.0, 0.5, &cfg);
        assert!((avg - 6.0206).abs() < 1e-3);
        assert_eq!(per_user.len(), 1);
    }

    #[test]
    fn graph_phase2_matches_protocol_simulation() {
        // the in-graph decorrelated path equals transmit-then-decorrelate
        let cfg = SystemConfig::desk_scale();
        let split = tiny_dataset(&cfg, 1, 21);
        let sample = &split.samples[0];
        let book = build_pilot_book(cfg.users, cfg.user_antennas);
        let mapping = build_mapping(cfg.group_size());
        let (susc, scats_plain) = random_training_set(&cfg, cfg.tau2, 33);
        let norm = NormStats { pilot_mean: 0.1, pilot_std: 1.7, label_gain: 1.0 };
        let noise: Vec<CMat> =
            (0..cfg.tau2).map(|t| subframe_noise(&cfg, 55, Phase::Two, t)).collect();

        // protocol path
        let mut it = noise.iter();
        let obs = run_phase_with_noise(
            &sample.channels,
            &scats_plain,
            None,
            &book,
            &cfg,
            |_| it.next().unwrap().clone(),
            Phase::Two,
        );
        let mut tape = Tape::new();
        let protocol_node = observation_constant(&mut tape, &obs, &cfg, &norm);

        // graph path from the susceptances (scaled by Z0 as the raw output)
        let raw_scaled: Vec<f64> = susc.values.data().iter().map(|b| b * cfg.z0).collect();
        let raw = tape.constant(Tensor::new(susc.values.shape().to_vec(), raw_scaled));
        let scats_graph = ssc_graph(&mut tape, raw, &cfg, &mapping);
        let dec = decorrelate_noise(&noise, &book, &cfg);
        let graph_node =
            phase2_observation_graph(&mut tape, &sample.channels, &scats_graph, &dec, &cfg, &norm);

        let a = tape.value(protocol_node);
        let b = tape.value(graph_node);
        assert_eq!(a.shape(), b.shape());
        let scale: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: f64 =
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-12, "rel {}", diff / scale);
    }

    #[test]
    fn protocol_session_matches_pipeline_path() {
        // running the trained optimizer as a two_phase_session callback gives
        // the same Phase-II scattering the in-graph path produces
        use crate::models::{tsmo_apply, DaceParams, TsmoParams};
        use crate::protocol::two_phase_session;
        let cfg = SystemConfig::micro();
        let hyper = ModelHyper::micro();
        let split = tiny_dataset(&cfg, 1, 61);
        let sample = &split.samples[0];
        let mut store = ParamStore::new();
        let mut rng = Rng::new(8);
        let tsmo = TsmoParams::init(&mut store, &cfg, &hyper, &mut rng);
        let dace = DaceParams::init(&mut store, &cfg, &hyper, &mut rng);
        let book = build_pilot_book(cfg.users, cfg.user_antennas);
        let mapping = build_mapping(cfg.group_size());
        let (p1_susc, p1_scats) = random_training_set(&cfg, cfg.tau1, 71);
        let norm = NormStats { pilot_mean: 0.02, pilot_std: 0.9, label_gain: 1.0 };
        let pu_std = PuStandardizer { lo_dbm: -12.0, hi_dbm: 3.0 };
        let session_seed = 303;

        let pipeline = Pipeline {
            cfg: &cfg,
            book: &book,
            mapping: &mapping,
            norm,
            pu_std,
            phase1_scattering: &p1_scats,
            tsmo: Some(&tsmo),
            dace: &dace,
            phase2_fixed: None,
        };
        let draws = SessionDraws::new(&cfg, session_seed, cfg.p_u);
        let mut tape = Tape::new();
        let nodes = store.mount(&mut tape);
        let fwd = pipeline.forward(&mut tape, &nodes, sample, &draws);

        let session = two_phase_session(
            &sample.channels,
            &p1_susc,
            &p1_scats,
            |obs, p_u| tsmo_apply(&store, &tsmo, &cfg, &norm, &pu_std, obs, p_u),
            &book,
            &cfg,
            session_seed,
        )
        .unwrap();
        assert_eq!(session.phase2.scattering.len(), fwd.phase2_scattering.len());
        for (a, b) in session.phase2.scattering.iter().zip(&fwd.phase2_scattering) {
            for (ba, bb) in a.blocks.iter().zip(&b.blocks) {
                assert!(ba.sub(bb).frob_norm() < 1e-10, "scattering paths diverge");
            }
        }
    }

    #[test]
    fn one_step_touches_every_parameter() {
        let cfg = SystemConfig::micro();
        let hyper = ModelHyper::micro();
        let train = tiny_dataset(&cfg, 2, 31);
        let val = build_dataset(&cfg, &ChannelModelConfig::default(), 2, Role::Validation, 900)
            .unwrap();
        let mut tc = TrainConfig::desk_scale(7);
        tc.batch_size = 2;
        tc.max_epochs = 1;
        tc.patience = 1;
        let bundle =
            train_joint(&train, &val, &cfg, &hyper, &tc, MethodTag::Jtsmlcef, |_| {}).unwrap();

        // fresh init with the same seed for comparison
        let mut store = ParamStore::new();
        let mut rng = Rng::new(derive_seed(tc.seed, &[TAG_INIT]));
        let _ = TsmoParams::init(&mut store, &cfg, &hyper, &mut rng);
        let _ = DaceParams::init(&mut store, &cfg, &hyper, &mut rng);
        for ((name, before), (_, after)) in store.iter().zip(bundle.store.iter()) {
            let changed = before
                .data()
                .iter()
                .zip(after.data())
                .any(|(a, b)| a != b);
            assert!(changed, "parameter {name} never received a gradient");
        }
    }

    #[test]
    fn same_seed_reproduces_identical_weights() {
        let cfg = SystemConfig::micro();
        let hyper = ModelHyper::micro();
        let train = tiny_dataset(&cfg, 4, 41);
        let val =
            build_dataset(&cfg, &ChannelModelConfig::default(), 2, Role::Validation, 990).unwrap();
        let mut tc = TrainConfig::desk_scale(13);
        tc.batch_size = 2;
        tc.max_epochs = 2;
        let run = || {
            train_joint(&train, &val, &cfg, &hyper, &tc, MethodTag::Jtsmlcef, |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        for ((name, ta), (_, tb)) in a.store.iter().zip(b.store.iter()) {
            let ba: Vec<u64> = ta.data().iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u64> = tb.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(ba, bb, "nondeterministic parameter {name}");
        }
    }

    #[test]
    fn first_epoch_beats_zero_estimator() {
        let cfg = SystemConfig::desk_scale();
        let hyper = ModelHyper::desk_scale();
        let train = tiny_dataset(&cfg, 440, 1000);
        let val = build_dataset(&cfg, &ChannelModelConfig::default(), 8, Role::Validation, 5_000_000)
            .unwrap();
        let mut tc = TrainConfig::desk_scale(3);
        tc.batch_size = 4; // 110 steps in the first epoch
        tc.max_epochs = 1;
        let mut reports = Vec::new();
        let bundle = train_joint(&train, &val, &cfg, &hyper, &tc, MethodTag::Jtsmlcef, |r| {
            reports.push(r)
        })
        .unwrap();
        // zero-estimator baseline: loss of the all-zero estimate
        let zeros: Vec<Tensor> = train.samples[..32]
            .iter()
            .map(|_| Tensor::zeros(vec![2, cfg.nu(), cfg.users, cfg.total_half_len()]))
            .collect();
        let labels: Vec<_> =
            train.samples[..32].iter().map(|s| s.cascaded.clone()).collect();
        let baseline = mse_loss(&zeros, &labels, bundle.norm.label_gain);
        assert_eq!(reports.len(), 1);
        assert!(
            reports[0].tail_loss < baseline,
            "loss after 100+ steps {} not below zero baseline {}",
            reports[0].tail_loss,
            baseline
        );
    }
}

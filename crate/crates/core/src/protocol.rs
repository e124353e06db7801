//! Uplink pilot transmission under the two-phase protocol.
//!
//! A subframe is KU slots in which all users transmit a DFT pilot book while
//! the RIS holds one scattering configuration. Reception, per-user
//! decorrelation, and stacking over subframes produce the observation tensors
//! the estimators consume. Phase I uses frozen random scattering; a callback
//! (the trained optimizer in deployment) maps its observation to the Phase-II
//! susceptances, which are converted to feasible scattering before Phase II
//! runs.
//!
//! Control latency between the phases is not simulated; it enters the slot
//! accounting as the constant [`T_CTRL_SLOTS`] only.

use crate::cx::{C64, CMat};
use crate::physics::{
    scattering_for_all_subframes, ChannelPair, SusceptanceParams, ScatteringMatrix, SystemConfig,
};
use crate::rng::Rng;

/// Slots consumed by BS processing and RIS control between the phases.
/// Assumed negligible next to the pilot slots; annotation only.
pub const T_CTRL_SLOTS: usize = 0;

const TAG_NOISE: u64 = 0x4e4f4953; // "NOIS"

/// Total training slots for the two-phase protocol: KU(tau1 + tau2) + T_ctrl.
pub fn total_training_slots(cfg: &SystemConfig) -> usize {
    cfg.ku() * (cfg.tau1 + cfg.tau2) + T_CTRL_SLOTS
}

/// Unit-modulus orthogonal pilot book: rows of the KU-point DFT matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotBook {
    /// KU x KU, entries exp(-j 2 pi m n / KU).
    pub x: CMat,
    users: usize,
    user_antennas: usize,
}

/// Builds the DFT pilot book for K users with U antennas each.
pub fn build_pilot_book(users: usize, user_antennas: usize) -> PilotBook {
    let ku = users * user_antennas;
    assert!(ku >= 1);
    let x = CMat::from_fn(ku, ku, |m, n| {
        C64::cis(-std::f64::consts::TAU * (m * n) as f64 / ku as f64)
    });
    PilotBook { x, users, user_antennas }
}

impl PilotBook {
    pub fn ku(&self) -> usize {
        self.x.rows
    }

    /// Pilot matrix of user k: rows k*U .. (k+1)*U.
    pub fn user_slice(&self, k: usize) -> CMat {
        assert!(k < self.users);
        self.x.block(k * self.user_antennas, 0, self.user_antennas, self.ku())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    fn code(self) -> u64 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

/// Decorrelated, stacked pilot observations for one phase.
#[derive(Clone, Debug)]
pub struct PhaseObservation {
    pub phase: Phase,
    /// Per user: NU x tau, column t = vec(Y_k^t).
    pub per_user: Vec<CMat>,
    /// Scattering applied per subframe.
    pub scattering: Vec<ScatteringMatrix>,
    /// Susceptances behind the scattering, when known.
    pub susceptance: Option<SusceptanceParams>,
}

impl PhaseObservation {
    pub fn tau(&self) -> usize {
        self.per_user[0].cols
    }

    /// Training matrix Phi-tilde: half-vector columns of the applied
    /// scattering, M(M-bar+1)/2 x tau.
    pub fn training_matrix(&self) -> CMat {
        training_matrix(&self.scattering)
    }
}

/// Stacks the per-subframe half-vectors into the training matrix.
pub fn training_matrix(scats: &[ScatteringMatrix]) -> CMat {
    let cols = scats.len();
    let half: Vec<Vec<C64>> = scats.iter().map(|s| s.half_vector()).collect();
    let rows = half[0].len();
    CMat::from_fn(rows, cols, |i, t| half[t][i])
}

/// Draws the N x KU noise matrix for one subframe: i.i.d. CN(0, sigma^2)
/// entries from the (session seed, phase, subframe) stream in row-major
/// order.
pub fn subframe_noise(
    cfg: &SystemConfig,
    session_seed: u64,
    phase: Phase,
    subframe: usize,
) -> CMat {
    let mut rng = Rng::from_tags(session_seed, &[TAG_NOISE, phase.code(), subframe as u64]);
    let s = (cfg.noise_power / 2.0).sqrt();
    CMat::from_fn(cfg.bs_antennas, cfg.ku(), |_, _| {
        let (a, b) = rng.normal_pair();
        C64::new(a * s, b * s)
    })
}

/// Received subframe: Y = sqrt(P_u) H_IT Phi H_RI X + N.
pub fn transmit_subframe(
    ch: &ChannelPair,
    scat: &ScatteringMatrix,
    book: &PilotBook,
    cfg: &SystemConfig,
    noise: Option<&CMat>,
) -> CMat {
    let phi = scat.full();
    let signal = ch.h_it.matmul(&phi).matmul(&ch.h_ri).matmul(&book.x).scale_re(cfg.p_u.sqrt());
    match noise {
        Some(n) => signal.add(n),
        None => signal,
    }
}

/// Projects one user's contribution out of a received subframe:
/// Y_k = (1/KU) Y X_k^H.
pub fn decorrelate(y: &CMat, book: &PilotBook, k: usize) -> CMat {
    let xk = book.user_slice(k);
    y.matmul(&xk.hermitian()).scale_re(1.0 / book.ku() as f64)
}

/// [`run_phase`] with caller-supplied per-subframe noise (frozen-noise
/// gradient checks and the training loop need control over the draws).
pub fn run_phase_with_noise(
    ch: &ChannelPair,
    scats: &[ScatteringMatrix],
    susceptance: Option<SusceptanceParams>,
    book: &PilotBook,
    cfg: &SystemConfig,
    mut noise: impl FnMut(usize) -> CMat,
    phase: Phase,
) -> PhaseObservation {
    assert!(!scats.is_empty(), "a phase needs at least one subframe");
    let tau = scats.len();
    let nu = cfg.nu();
    let mut per_user = vec![CMat::zeros(nu, tau); cfg.users];
    for (t, scat) in scats.iter().enumerate() {
        let n = noise(t);
        let y = transmit_subframe(ch, scat, book, cfg, Some(&n));
        for (k, stack) in per_user.iter_mut().enumerate() {
            let yk = decorrelate(&y, book, k);
            let v = yk.vec_col_major();
            for r in 0..nu {
                stack[(r, t)] = v.at(r, 0);
            }
        }
    }
    PhaseObservation { phase, per_user, scattering: scats.to_vec(), susceptance }
}

/// Runs one phase: simulates every subframe, decorrelates every user, and
/// stacks vec(Y_k^t) into the per-user observation matrices.
pub fn run_phase(
    ch: &ChannelPair,
    scats: &[ScatteringMatrix],
    susceptance: Option<SusceptanceParams>,
    book: &PilotBook,
    cfg: &SystemConfig,
    session_seed: u64,
    phase: Phase,
) -> PhaseObservation {
    run_phase_with_noise(
        ch,
        scats,
        susceptance,
        book,
        cfg,
        |t| subframe_noise(cfg, session_seed, phase, t),
        phase,
    )
}

#[derive(Debug)]
pub enum SessionError {
    /// Callback produced susceptances of the wrong width.
    CallbackWidth { expected: usize, got: usize },
}

impl std::fmt::Display for SessionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SessionError::CallbackWidth { expected, got } => {
                write!(f, "phase-II susceptance width {got} does not match tau2 = {expected}")
            }
        }
    }
}

impl std::error::Error for SessionError {}

/// Complete two-phase session over one coherence block.
pub struct TwoPhaseSession {
    pub phase1: PhaseObservation,
    pub phase2: PhaseObservation,
    pub t_ctrl_slots: usize,
}

/// Runs Phase I with the frozen scattering, maps its observation through the
/// callback to Phase-II susceptances, converts them to feasible scattering,
/// and runs Phase II.
pub fn two_phase_session<F>(
    ch: &ChannelPair,
    phase1_susceptance: &SusceptanceParams,
    phase1_scattering: &[ScatteringMatrix],
    mut tsmo_callback: F,
    book: &PilotBook,
    cfg: &SystemConfig,
    session_seed: u64,
) -> Result<TwoPhaseSession, SessionError>
where
    F: FnMut(&PhaseObservation, f64) -> SusceptanceParams,
{
    let phase1 = run_phase(
        ch,
        phase1_scattering,
        Some(phase1_susceptance.clone()),
        book,
        cfg,
        session_seed,
        Phase::One,
    );
    let susc2 = tsmo_callback(&phase1, cfg.p_u);
    if susc2.tau() != cfg.tau2 {
        return Err(SessionError::CallbackWidth { expected: cfg.tau2, got: susc2.tau() });
    }
    let scats2 = scattering_for_all_subframes(&susc2, cfg);
    let phase2 = run_phase(ch, &scats2, Some(susc2), book, cfg, session_seed, Phase::Two);
    Ok(TwoPhaseSession { phase1, phase2, t_ctrl_slots: T_CTRL_SLOTS })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{random_training_set, random_feasible_scattering};
    use crate::tensor::Tensor;

    fn random_channels(cfg: &SystemConfig, seed: u64) -> ChannelPair {
        let mut rng = Rng::new(seed);
        let h_it = CMat::from_fn(cfg.bs_antennas, cfg.ris_elements, |_, _| {
            let (a, b) = rng.normal_pair();
            C64::new(a, b)
        });
        let h_ri = CMat::from_fn(cfg.ris_elements, cfg.ku(), |_, _| {
            let (a, b) = rng.normal_pair();
            C64::new(a, b)
        });
        ChannelPair { h_it, h_ri }
    }

    #[test]
    fn pilot_book_ku1() {
        let b = build_pilot_book(1, 1);
        assert_eq!(b.x.rows, 1);
        assert!((b.x.at(0, 0) - C64::real(1.0)).abs() < 1e-15);
    }

    #[test]
    fn pilot_book_ku2() {
        let b = build_pilot_book(2, 1);
        let want = [
            C64::real(1.0),
            C64::real(1.0),
            C64::real(1.0),
            C64::real(-1.0),
        ];
        for (z, w) in b.x.data.iter().zip(&want) {
            assert!((*z - *w).abs() < 1e-12);
        }
        let g = b.x.matmul(&b.x.hermitian());
        assert!(g.sub(&CMat::identity(2).scale_re(2.0)).frob_norm() < 1e-12);
    }

    #[test]
    fn pilot_book_orthogonality_law() {
        let b = build_pilot_book(2, 2);
        let ku = 4.0;
        for k1 in 0..2 {
            for k2 in 0..2 {
                let prod = b.user_slice(k1).matmul(&b.user_slice(k2).hermitian());
                let want = if k1 == k2 {
                    CMat::identity(2).scale_re(ku)
                } else {
                    CMat::zeros(2, 2)
                };
                assert!(prod.sub(&want).frob_norm() < 1e-12, "k1={k1} k2={k2}");
            }
        }
        // unit modulus everywhere
        for z in &b.x.data {
            assert!((z.abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_single_antenna_identity() {
        // sigma^2 = 0, Phi = I (B = 0), single user/antenna
        let cfg = SystemConfig {
            bs_antennas: 1,
            ris_elements: 1,
            groups: 1,
            users: 1,
            user_antennas: 1,
            ..SystemConfig::desk_scale()
        };
        let ch = random_channels(&cfg, 1);
        let book = build_pilot_book(1, 1);
        let scat = ScatteringMatrix { blocks: vec![CMat::identity(1)] };
        let y = transmit_subframe(&ch, &scat, &book, &cfg, None);
        let want = (ch.h_it.at(0, 0) * ch.h_ri.at(0, 0)).scale(cfg.p_u.sqrt());
        assert!((y.at(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn transmit_linear_in_sqrt_power() {
        let cfg = SystemConfig::desk_scale();
        let ch = random_channels(&cfg, 2);
        let book = build_pilot_book(cfg.users, cfg.user_antennas);
        let scat = random_feasible_scattering(&cfg, 3);
        let y1 = transmit_subframe(&ch, &scat, &book, &cfg, None);
        let mut cfg4 = cfg.clone();
        cfg4.p_u = 4.0 * cfg.p_u; // doubles sqrt(P_u)
        let y2 = transmit_subframe(&ch, &scat, &book, &cfg4, None);
        assert!(y2.sub(&y1.scale_re(2.0)).frob_norm() < 1e-10 * y1.frob_norm());
    }

    #[test]
    fn noise_variance_within_2_percent() {
        let mut cfg = SystemConfig::desk_scale();
        cfg.noise_power = 0.37;
        let mut acc = 0.0;
        let mut n = 0usize;
        let mut t = 0usize;
        while n < 1_000_000 {
            let m = subframe_noise(&cfg, 9, Phase::One, t);
            for z in &m.data {
                acc += z.abs2();
            }
            n += m.data.len();
            t += 1;
        }
        let var = acc / n as f64;
        assert!((var / cfg.noise_power - 1.0).abs() < 0.02, "measured {var}");
    }

    #[test]
    fn decorrelate_noiseless_exact() {
        let cfg = SystemConfig::desk_scale();
        let ch = random_channels(&cfg, 4);
        let book = build_pilot_book(cfg.users, cfg.user_antennas);
        let scat = random_feasible_scattering(&cfg, 5);
        let y = transmit_subframe(&ch, &scat, &book, &cfg, None);
        let phi = scat.full();
        for k in 0..cfg.users {
            let yk = decorrelate(&y, &book, k);
            let hk = ch.user_slice(&cfg, k);
            let want = ch.h_it.matmul(&phi).matmul(&hk).scale_re(cfg.p_u.sqrt());
            let rel = yk.sub(&want).frob_norm() / want.frob_norm();
            assert!(rel < 1e-12, "user {k}: rel {rel}");
        }
    }

    #[test]
    fn decorrelate_no_cross_user_leakage() {
        let cfg = SystemConfig::desk_scale();
        let book = build_pilot_book(cfg.users, cfg.user_antennas);
        // channel with only user 1 active: zero out user 0 columns
        let mut ch = random_channels(&cfg, 6);
        for m in 0..cfg.ris_elements {
            for a in 0..cfg.user_antennas {
                ch.h_ri[(m, a)] = C64::real(0.0);
            }
        }
        let scat = random_feasible_scattering(&cfg, 7);
        let y = transmit_subframe(&ch, &scat, &book, &cfg, None);
        let y0 = decorrelate(&y, &book, 0);
        assert!(y0.frob_norm() < 1e-12 * y.frob_norm(), "leakage {}", y0.frob_norm());
    }

    #[test]
    fn decorrelated_noise_variance_sigma2_over_ku() {
        let cfg = SystemConfig::desk_scale();
        let book = build_pilot_book(cfg.users, cfg.user_antennas);
        let ku = cfg.ku() as f64;
        let mut acc = 0.0;
        let mut n = 0usize;
        let mut t = 0usize;
        while n < 1_000_000 {
            let noise = subframe_noise(&cfg, 11, Phase::Two, t);
            let nk = decorrelate(&noise, &book, t % cfg.users);
            for z in &nk.data {
                acc += z.abs2();
            }
            n += nk.data.len();
            t += 1;
        }
        let var = acc / n as f64;
        let want = cfg.noise_power / ku;
        assert!((var / want - 1.0).abs() < 0.02, "measured {var} want {want}");
    }

    #[test]
    fn phase_stack_matches_reduced_model_noiseless() {
        // dual-path oracle: per-subframe physics vs sqrt(P_u) Q-bar Phi-tilde
        let mut cfg = SystemConfig::desk_scale();
        cfg.noise_power = 1e-300; // effectively noiseless while staying valid
        let ch = random_channels(&cfg, 8);
        let book = build_pilot_book(cfg.users, cfg.user_antennas);
        let (susc, scats) = random_training_set(&cfg, 5, 99);
        let obs = run_phase(&ch, &scats, Some(susc), &book, &cfg, 1, Phase::One);
        let p = crate::physics::build_mapping(cfg.group_size());
        let q = crate::physics::assemble_cascaded(&ch, &p, &cfg);
        let phi_t = obs.training_matrix();
        for k in 0..cfg.users {
            let want = q.users[k].matmul(&phi_t).scale_re(cfg.p_u.sqrt());
            let rel = obs.per_user[k].sub(&want).frob_norm() / want.frob_norm();
            assert!(rel < 1e-12, "user {k}: rel {rel}");
        }
    }

    #[test]
    fn single_subframe_phase_degenerates() {
        let cfg = SystemConfig::desk_scale();
        let ch = random_channels(&cfg, 12);
        let book = build_pilot_book(cfg.users, cfg.user_antennas);
        let (susc, scats) = random_training_set(&cfg, 1, 3);
        let obs = run_phase(&ch, &scats, Some(susc), &book, &cfg, 2, Phase::One);
        assert_eq!(obs.tau(), 1);
        // equals a single decorrelated subframe
        let noise = subframe_noise(&cfg, 2, Phase::One, 0);
        let y = transmit_subframe(&ch, &scats[0], &book, &cfg, Some(&noise));
        let yk = decorrelate(&y, &book, 1).vec_col_major();
        for r in 0..cfg.nu() {
            assert_eq!(obs.per_user[1].at(r, 0), yk.at(r, 0));
        }
    }

    #[test]
    fn subframe_permutation_permutes_columns() {
        let cfg = SystemConfig::desk_scale();
        let ch = random_channels(&cfg, 13);
        let book = build_pilot_book(cfg.users, cfg.user_antennas);
        let (_, scats) = random_training_set(&cfg, 3, 31);
        // noiseless so only the scattering order matters
        let mut quiet = cfg.clone();
        quiet.noise_power = 1e-300;
        let obs = run_phase(&ch, &scats, None, &book, &quiet, 0, Phase::One);
        let permuted: Vec<_> = vec![scats[2].clone(), scats[0].clone(), scats[1].clone()];
        let obs_p = run_phase(&ch, &permuted, None, &book, &quiet, 0, Phase::One);
        let perm = [2usize, 0, 1];
        for k in 0..cfg.users {
            for (t_new, &t_old) in perm.iter().enumerate() {
                for r in 0..cfg.nu() {
                    let a = obs_p.per_user[k].at(r, t_new);
                    let b = obs.per_user[k].at(r, t_old);
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn session_constant_zero_callback_gives_identity_phase2() {
        let cfg = SystemConfig::desk_scale();
        let ch = random_channels(&cfg, 14);
        let book = build_pilot_book(cfg.users, cfg.user_antennas);
        let (susc1, scats1) = random_training_set(&cfg, cfg.tau1, 17);
        let h_tot = cfg.total_half_len();
        let tau2 = cfg.tau2;
        let session = two_phase_session(
            &ch,
            &susc1,
            &scats1,
            |_, _| SusceptanceParams::new(Tensor::zeros(vec![h_tot, tau2])),
            &book,
            &cfg,
            5,
        )
        .unwrap();
        assert_eq!(session.phase1.tau(), cfg.tau1);
        assert_eq!(session.phase2.tau(), cfg.tau2);
        for scat in &session.phase2.scattering {
            for b in &scat.blocks {
                assert!(b.sub(&CMat::identity(cfg.group_size())).frob_norm() < 1e-12);
            }
        }
    }

    #[test]
    fn session_callback_output_always_feasible() {
        let cfg = SystemConfig::desk_scale();
        let ch = random_channels(&cfg, 15);
        let book = build_pilot_book(cfg.users, cfg.user_antennas);
        let (susc1, scats1) = random_training_set(&cfg, cfg.tau1, 18);
        let h_tot = cfg.total_half_len();
        let tau2 = cfg.tau2;
        // wild callback values still convert to feasible scattering
        let session = two_phase_session(
            &ch,
            &susc1,
            &scats1,
            |obs, p_u| {
                let mut rng = Rng::new((obs.per_user[0].at(0, 0).re.to_bits() ^ p_u.to_bits()) | 1);
                let vals: Vec<f64> = (0..h_tot * tau2).map(|_| 40.0 * rng.normal()).collect();
                SusceptanceParams::new(Tensor::new(vec![h_tot, tau2], vals))
            },
            &book,
            &cfg,
            6,
        )
        .unwrap();
        for scat in &session.phase2.scattering {
            assert!(scat.is_feasible());
        }
    }

    #[test]
    fn session_rejects_wrong_callback_width() {
        let cfg = SystemConfig::desk_scale();
        let ch = random_channels(&cfg, 16);
        let book = build_pilot_book(cfg.users, cfg.user_antennas);
        let (susc1, scats1) = random_training_set(&cfg, cfg.tau1, 19);
        let h_tot = cfg.total_half_len();
        let bad = two_phase_session(
            &ch,
            &susc1,
            &scats1,
            |_, _| SusceptanceParams::new(Tensor::zeros(vec![h_tot, 1])),
            &book,
            &cfg,
            7,
        );
        assert!(matches!(bad, Err(SessionError::CallbackWidth { .. })));
    }

    #[test]
    fn slot_accounting() {
        let cfg = SystemConfig::desk_scale();
        assert_eq!(total_training_slots(&cfg), cfg.ku() * (cfg.tau1 + cfg.tau2) + T_CTRL_SLOTS);
    }
}

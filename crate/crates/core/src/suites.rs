//! Property suites behind the `check` command and the acceptance tests.
//!
//! Each suite bundles the module-level invariants into named checks with a
//! pass/fail verdict and a one-line detail, so the CLI and the test harness
//! print identical evidence.

use std::time::Instant;

use crate::autodiff::{
    gradcheck, gradcheck_sampled, GRADCHECK_STEP, GRADCHECK_TOL,
};
use crate::channel::{build_dataset, ChannelModelConfig, Role};
use crate::cx::CMat;
use crate::estimators::{ls_estimate, EstimatorError};
use crate::models::{DaceParams, ModelHyper, ParamStore, PuStandardizer, TsmoParams};
use crate::physics::{
    assemble_cascaded, build_mapping, effective_channel, effective_channel_reduced,
    random_susceptance_halves, random_training_set, scattering_from_halves, ChannelPair,
    SystemConfig,
};
use crate::protocol::{
    build_pilot_book, decorrelate, run_phase_with_noise, subframe_noise, training_matrix, Phase,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{Pipeline, SessionDraws};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub results: Vec<CheckResult>,
    pub elapsed_secs: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!(
                "[{}] {}.{}: {}\n",
                if r.passed { "PASS" } else { "FAIL" },
                self.name,
                r.name,
                r.detail
            ));
        }
        out.push_str(&format!(
            "suite {}: {} in {:.2}s\n",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.elapsed_secs
        ));
        out
    }
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name: name.to_string(), passed, detail }
}

fn random_channels(cfg: &SystemConfig, seed: u64) -> ChannelPair {
    let mut rng = Rng::new(seed);
    let h_it = CMat::from_fn(cfg.bs_antennas, cfg.ris_elements, |_, _| {
        let (a, b) = rng.normal_pair();
        crate::cx::C64::new(a, b)
    });
    let h_ri = CMat::from_fn(cfg.ris_elements, cfg.ku(), |_, _| {
        let (a, b) = rng.normal_pair();
        crate::cx::C64::new(a, b)
    });
    ChannelPair { h_it, h_ri }
}

// ---------------------------------------------------------------------------
// Physics suite
// ---------------------------------------------------------------------------

/// Feasibility closure over 10^4 draws per group size in {2, 4, 8} plus the
/// cascaded-channel identity.
pub fn physics_suite() -> SuiteReport {
    let start = Instant::now();
    let mut results = Vec::new();

    for &m_bar in &[2usize, 4, 8] {
        let cfg = SystemConfig {
            ris_elements: m_bar,
            groups: 1,
            ..SystemConfig::desk_scale()
        };
        let p = build_mapping(m_bar);
        let mut worst_u: f64 = 0.0;
        let mut worst_s: f64 = 0.0;
        for seed in 0..10_000u64 {
            let mut rng = Rng::from_tags(seed, &[m_bar as u64]);
            let halves = random_susceptance_halves(&cfg, &mut rng);
            let scat = scattering_from_halves(&halves, &cfg, &p);
            let (u, s) = scat.feasibility_residuals();
            worst_u = worst_u.max(u);
            worst_s = worst_s.max(s);
        }
        results.push(check(
            &format!("feasibility_m{m_bar}"),
            worst_u < 1e-9 && worst_s < 1e-12,
            format!("10000 draws: max unitarity {worst_u:.2e} (<1e-9), max symmetry {worst_s:.2e} (<1e-12)"),
        ));
    }

    // reduced-coefficient identity at (N, M, K, U, M-bar) = (4, 8, 2, 2, 4)
    let cfg = SystemConfig {
        bs_antennas: 4,
        ris_elements: 8,
        groups: 2,
        users: 2,
        user_antennas: 2,
        ..SystemConfig::desk_scale()
    };
    let p = build_mapping(cfg.group_size());
    let mut worst_rel: f64 = 0.0;
    for trial in 0..100u64 {
        let ch = random_channels(&cfg, 40_000 + trial);
        let scat = crate::physics::random_feasible_scattering(&cfg, 50_000 + trial);
        let q = assemble_cascaded(&ch, &p, &cfg);
        for k in 0..cfg.users {
            let direct = effective_channel(&ch, &scat, &cfg, k);
            let reduced = effective_channel_reduced(&q.users[k], &scat, &cfg);
            let rel = direct.sub(&reduced).frob_norm() / direct.frob_norm();
            worst_rel = worst_rel.max(rel);
        }
    }
    results.push(check(
        "cascaded_identity",
        worst_rel < 1e-12,
        format!("100 draws: max relative error {worst_rel:.2e} (<1e-12)"),
    ));

    // half-vector round trip is exact
    let mut exact = true;
    for m_bar in 1..=6usize {
        let p = build_mapping(m_bar);
        let mut rng = Rng::new(m_bar as u64);
        let phi: Vec<crate::cx::C64> = (0..p.half_len())
            .map(|_| {
                let (a, b) = rng.normal_pair();
                crate::cx::C64::new(a, b)
            })
            .collect();
        let m = crate::physics::expand_half(&phi, &p);
        exact &= crate::physics::extract_half(&m) == phi;
        exact &= m.sub(&m.transpose()).frob_norm() == 0.0;
    }
    results.push(check(
        "half_vector_roundtrip",
        exact,
        "expand/extract identical for group sizes 1..6".to_string(),
    ));

    SuiteReport { name: "physics", results, elapsed_secs: start.elapsed().as_secs_f64() }
}

// ---------------------------------------------------------------------------
// Protocol suite
// ---------------------------------------------------------------------------

/// Pilot orthogonality, the dual-path observation equivalence, decorrelated
/// noise variance, and LS exactness at the unique-solution threshold.
pub fn protocol_suite() -> SuiteReport {
    let start = Instant::now();
    let mut results = Vec::new();

    // orthogonality law across desk-scale user/antenna counts
    let mut worst: f64 = 0.0;
    for &(k, u) in &[(1usize, 1usize), (1, 4), (2, 2), (3, 2), (2, 4)] {
        let book = build_pilot_book(k, u);
        let ku = (k * u) as f64;
        for k1 in 0..k {
            for k2 in 0..k {
                let prod = book.user_slice(k1).matmul(&book.user_slice(k2).hermitian());
                let want = if k1 == k2 {
                    CMat::identity(u).scale_re(ku)
                } else {
                    CMat::zeros(u, u)
                };
                worst = worst.max(prod.sub(&want).frob_norm());
            }
        }
    }
    results.push(check(
        "pilot_orthogonality",
        worst < 1e-12,
        format!("max cross-product residual {worst:.2e} (<1e-12)"),
    ));

    // per-subframe simulation equals the stacked linear model, noiseless
    let mut cfg = SystemConfig::desk_scale();
    cfg.noise_power = 1e-300;
    let book = build_pilot_book(cfg.users, cfg.user_antennas);
    let mut worst_rel: f64 = 0.0;
    for trial in 0..20u64 {
        let ch = random_channels(&cfg, 60_000 + trial);
        let (_, scats) = random_training_set(&cfg, 6, 70_000 + trial);
        let obs = run_phase_with_noise(
            &ch,
            &scats,
            None,
            &book,
            &cfg,
            |_| CMat::zeros(cfg.bs_antennas, cfg.ku()),
            Phase::One,
        );
        let p = build_mapping(cfg.group_size());
        let q = assemble_cascaded(&ch, &p, &cfg);
        let phi_t = training_matrix(&scats);
        for k in 0..cfg.users {
            let want = q.users[k].matmul(&phi_t).scale_re(cfg.p_u.sqrt());
            let rel = obs.per_user[k].sub(&want).frob_norm() / want.frob_norm();
            worst_rel = worst_rel.max(rel);
        }
    }
    results.push(check(
        "stacked_model_equivalence",
        worst_rel < 1e-12,
        format!("20 noiseless sessions: max relative error {worst_rel:.2e} (<1e-12)"),
    ));

    // decorrelated noise variance = sigma^2 / KU within 2% over 10^6 entries
    let cfg = SystemConfig::desk_scale();
    let book = build_pilot_book(cfg.users, cfg.user_antennas);
    let ku = cfg.ku() as f64;
    let mut acc = 0.0;
    let mut n = 0usize;
    let mut t = 0usize;
    while n < 1_000_000 {
        let noise = subframe_noise(&cfg, 123, Phase::Two, t);
        let nk = decorrelate(&noise, &book, t % cfg.users);
        for z in &nk.data {
            acc += z.abs2();
        }
        n += nk.data.len();
        t += 1;
    }
    let var = acc / n as f64;
    let want = cfg.noise_power / ku;
    let rel = (var / want - 1.0).abs();
    results.push(check(
        "decorrelated_noise_variance",
        rel < 0.02,
        format!("measured/expected - 1 = {rel:.4} over {n} entries (<0.02)"),
    ));

    // LS exactness at tau = M(M-bar+1)/2 and failure one below
    let cfg = SystemConfig::desk_scale();
    let h_tot = cfg.total_half_len();
    let (_, scats) = random_training_set(&cfg, h_tot, 80_000);
    let phi_t = training_matrix(&scats);
    let ch = random_channels(&cfg, 81_000);
    let p = build_mapping(cfg.group_size());
    let q = assemble_cascaded(&ch, &p, &cfg);
    let mut worst_nmse: f64 = 0.0;
    for k in 0..cfg.users {
        let y = q.users[k].matmul(&phi_t).scale_re(cfg.p_u.sqrt());
        let est = ls_estimate(&y, &phi_t, cfg.p_u).expect("full budget");
        worst_nmse = worst_nmse.max(est.sub(&q.users[k]).frob_norm2() / q.users[k].frob_norm2());
    }
    let (_, scats_short) = random_training_set(&cfg, h_tot - 1, 80_001);
    let phi_short = training_matrix(&scats_short);
    let y_short = CMat::zeros(cfg.nu(), h_tot - 1);
    let under = matches!(
        ls_estimate(&y_short, &phi_short, cfg.p_u),
        Err(EstimatorError::Underdetermined { .. })
    );
    results.push(check(
        "ls_exactness",
        worst_nmse < 1e-12 && under,
        format!("noiseless NMSE {worst_nmse:.2e} (<1e-12); tau-1 underdetermined: {under}"),
    ));

    SuiteReport { name: "protocol", results, elapsed_secs: start.elapsed().as_secs_f64() }
}

// ---------------------------------------------------------------------------
// Gradcheck suite
// ---------------------------------------------------------------------------

fn randt(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())
}

/// Finite-difference validation of every primitive, a composite network, and
/// the whole pipeline on the frozen-noise micro instance.
pub fn gradcheck_suite() -> SuiteReport {
    let start = Instant::now();
    let mut results = Vec::new();
    let mut rng = Rng::new(424242);

    // primitives through representative compositions
    let a = randt(&mut rng, vec![3, 4]);
    let b = randt(&mut rng, vec![4, 2]);
    let r = randt(&mut rng, vec![2]);
    let rep = gradcheck(
        |t, ids| {
            let y = t.matmul(ids[0], ids[1]);
            let y = t.add_row(y, ids[2]);
            let y = t.relu(y);
            t.sum(y)
        },
        &[a.clone(), b, r],
        GRADCHECK_STEP,
        GRADCHECK_TOL,
    );
    results.push(check(
        "matmul_addrow_relu",
        rep.passed(),
        format!("{} entries, max rel err {:.2e}", rep.checked, rep.max_rel_err),
    ));

    let c = randt(&mut rng, vec![3, 4]);
    let rep = gradcheck(
        |t, ids| {
            let p = t.mul(ids[0], ids[1]);
            let q = t.sub(p, ids[0]);
            let q = t.neg(q);
            let q = t.affine(q, 0.7, -0.3);
            t.mean(q)
        },
        &[a.clone(), c],
        GRADCHECK_STEP,
        GRADCHECK_TOL,
    );
    results.push(check(
        "elementwise_ops",
        rep.passed(),
        format!("{} entries, max rel err {:.2e}", rep.checked, rep.max_rel_err),
    ));

    let x = randt(&mut rng, vec![3, 5]);
    let w = randt(&mut rng, vec![3, 5]);
    let gain = randt(&mut rng, vec![5]);
    let bias = randt(&mut rng, vec![5]);
    let rep = gradcheck(
        |t, ids| {
            let s = t.softmax_rows(ids[0]);
            let l = t.layer_norm(s, ids[2], ids[3]);
            let p = t.mul(l, ids[1]);
            t.sum(p)
        },
        &[x, w, gain, bias],
        GRADCHECK_STEP,
        GRADCHECK_TOL,
    );
    results.push(check(
        "softmax_layernorm",
        rep.passed(),
        format!("{} entries, max rel err {:.2e}", rep.checked, rep.max_rel_err),
    ));

    let x = randt(&mut rng, vec![2, 3, 2]);
    let y = randt(&mut rng, vec![2, 3, 2]);
    let rep = gradcheck(
        |t, ids| {
            let c = t.concat(&[ids[0], ids[1]], 1);
            let p = t.permute(c, &[1, 0, 2]);
            let s = t.slice(p, &[1, 0, 0], &[4, 2, 2]);
            let r = t.reshape(s, vec![4, 4]);
            let tr = t.transpose2(r);
            let m = t.mul(tr, tr);
            t.sum(m)
        },
        &[x, y],
        GRADCHECK_STEP,
        GRADCHECK_TOL,
    );
    results.push(check(
        "shape_ops",
        rep.passed(),
        format!("{} entries, max rel err {:.2e}", rep.checked, rep.max_rel_err),
    ));

    let mut base = Tensor::eye(4);
    for v in base.data_mut() {
        *v += 0.2 * rng.normal();
    }
    let im = randt(&mut rng, vec![4, 4]);
    let wre = randt(&mut rng, vec![4, 4]);
    let rep = gradcheck(
        |t, ids| {
            let a = t.complex(ids[0], ids[1]);
            let inv = t.cinverse(a).unwrap();
            let p = t.mul(inv.re, ids[2]);
            let q = t.mul(inv.im, inv.im);
            let s = t.add(p, q);
            t.sum(s)
        },
        &[base, im, wre],
        GRADCHECK_STEP,
        GRADCHECK_TOL,
    );
    results.push(check(
        "complex_inverse",
        rep.passed(),
        format!("{} entries, max rel err {:.2e}", rep.checked, rep.max_rel_err),
    ));

    // whole pipeline on the frozen-noise micro instance:
    // N=2, M=4, M-bar=2, K=2, U=1, tau1=1, tau2=2, d_model=8
    let rep = pipeline_micro_gradcheck(200);
    results.push(check(
        "pipeline_micro",
        rep.pass_fraction() >= 0.99,
        format!(
            "{}/{} sampled parameters matched (>=99% required), max rel err {:.2e}",
            rep.checked - rep.failures,
            rep.checked,
            rep.max_rel_err
        ),
    ));

    SuiteReport { name: "gradcheck", results, elapsed_secs: start.elapsed().as_secs_f64() }
}

/// Whole-pipeline gradient check: TSMO -> susceptance conversion -> Phase-II
/// simulation with frozen noise -> DACE -> MSE loss, compared against central
/// finite differences on `samples` randomly chosen parameter entries.
pub fn pipeline_micro_gradcheck(samples: usize) -> crate::autodiff::GradcheckReport {
    let cfg = SystemConfig::micro();
    let hyper = ModelHyper::micro();
    let model = ChannelModelConfig::default();
    let data = build_dataset(&cfg, &model, 1, Role::Train, 77).unwrap();
    let sample = &data.samples[0];

    let mut store = ParamStore::new();
    let mut rng = Rng::new(31337);
    let tsmo = TsmoParams::init(&mut store, &cfg, &hyper, &mut rng);
    let dace = DaceParams::init(&mut store, &cfg, &hyper, &mut rng);

    let book = build_pilot_book(cfg.users, cfg.user_antennas);
    let mapping = build_mapping(cfg.group_size());
    let (_, phase1_scattering) = random_training_set(&cfg, cfg.tau1, 555);
    let norm = crate::channel::NormStats { pilot_mean: 0.01, pilot_std: 0.8, label_gain: 1.1 };
    let pu_std = PuStandardizer { lo_dbm: -12.0, hi_dbm: 3.0 };
    let draws = SessionDraws::new(&cfg, 999, cfg.p_u);

    let pipeline = Pipeline {
        cfg: &cfg,
        book: &book,
        mapping: &mapping,
        norm,
        pu_std,
        phase1_scattering: &phase1_scattering,
        tsmo: Some(&tsmo),
        dace: &dace,
        phase2_fixed: None,
    };

    let tensors: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    // deterministic sample of (tensor, element) pairs
    let mut pick = Rng::new(2024);
    let elements: Vec<(usize, usize)> = (0..samples)
        .map(|_| {
            let i = pick.index(tensors.len());
            let j = pick.index(tensors[i].numel());
            (i, j)
        })
        .collect();

    gradcheck_sampled(
        |tape, ids| {
            let fwd = pipeline.forward(tape, ids, sample, &draws);
            pipeline.loss(tape, fwd.estimate, sample)
        },
        &tensors,
        &elements,
        GRADCHECK_STEP,
        GRADCHECK_TOL,
    )
}

/// Smoke check that the ablation pipeline also differentiates cleanly.
pub fn dacen_micro_gradcheck(samples: usize) -> crate::autodiff::GradcheckReport {
    let cfg = SystemConfig::micro();
    let hyper = ModelHyper::micro();
    let model = ChannelModelConfig::default();
    let data = build_dataset(&cfg, &model, 1, Role::Train, 78).unwrap();
    let sample = &data.samples[0];

    let mut store = ParamStore::new();
    let mut rng = Rng::new(4242);
    let dace = DaceParams::init(&mut store, &cfg, &hyper, &mut rng);
    let book = build_pilot_book(cfg.users, cfg.user_antennas);
    let mapping = build_mapping(cfg.group_size());
    let (_, phase1_scattering) = random_training_set(&cfg, cfg.tau1, 556);
    let (_, phase2_fixed) = random_training_set(&cfg, cfg.tau2, 557);
    let norm = crate::channel::NormStats { pilot_mean: 0.0, pilot_std: 1.0, label_gain: 1.0 };
    let pu_std = PuStandardizer { lo_dbm: -12.0, hi_dbm: 3.0 };
    let draws = SessionDraws::new(&cfg, 1000, cfg.p_u);
    let pipeline = Pipeline {
        cfg: &cfg,
        book: &book,
        mapping: &mapping,
        norm,
        pu_std,
        phase1_scattering: &phase1_scattering,
        tsmo: None,
        dace: &dace,
        phase2_fixed: Some(&phase2_fixed),
    };
    let tensors: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let mut pick = Rng::new(2025);
    let elements: Vec<(usize, usize)> = (0..samples)
        .map(|_| {
            let i = pick.index(tensors.len());
            let j = pick.index(tensors[i].numel());
            (i, j)
        })
        .collect();
    gradcheck_sampled(
        |tape, ids| {
            let fwd = pipeline.forward(tape, ids, sample, &draws);
            pipeline.loss(tape, fwd.estimate, sample)
        },
        &tensors,
        &elements,
        GRADCHECK_STEP,
        GRADCHECK_TOL,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn physics_suite_passes() {
        let rep = physics_suite();
        assert!(rep.passed(), "{}", rep.render());
    }

    #[test]
    fn protocol_suite_passes() {
        let rep = protocol_suite();
        assert!(rep.passed(), "{}", rep.render());
    }

    #[test]
    fn gradcheck_suite_passes() {
        let rep = gradcheck_suite();
        assert!(rep.passed(), "{}", rep.render());
    }

    #[test]
    fn dacen_pipeline_gradchecks() {
        let rep = dacen_micro_gradcheck(60);
        assert!(rep.pass_fraction() >= 0.99, "{rep:?}");
    }
}

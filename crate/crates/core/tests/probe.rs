// Scratch rehearsal: center at -9 dBm and tau1 convergence; run with
//   cargo test -p bdris-core --test probe -- --ignored --nocapture
use bdris_core::channel::{build_dataset, ChannelModelConfig, Role};
use bdris_core::models::{MethodTag, ModelHyper};
use bdris_core::physics::{dbm_to_watts, SystemConfig};
use bdris_core::sweep::{run_classical, Method};
use bdris_core::train::{evaluate_bundle, train_joint, TrainConfig};
use std::time::Instant;

fn sharp() -> ChannelModelConfig {
    ChannelModelConfig {
        geometry_seed: 0xB,
        it_clusters: 2,
        shared_clusters: 2,
        private_clusters: 0,
        subpaths: 1,
        rician_k_los: 10.0,
        rician_k_nlos: 0.0,
        angle_spread: 0.01,
        p_los: 0.5,
    }
}

fn tc(seed: u64, epochs: usize) -> TrainConfig {
    let mut tc = TrainConfig::desk_scale(seed);
    tc.batch_size = 100;
    tc.max_epochs = epochs;
    tc.patience = 5;
    tc.learning_rate = 2e-3;
    tc.p_u_lo_dbm = -15.0;
    tc.p_u_hi_dbm = 3.0;
    tc
}

#[test]
#[ignore]
fn rehearsal2() {
    let center = -9.0;
    let mut cfg = SystemConfig::desk_scale();
    cfg.p_u = dbm_to_watts(center);
    let model = sharp();
    let train = build_dataset(&cfg, &model, 20_000, Role::Train, 0).unwrap();
    let val = build_dataset(&cfg, &model, 800, Role::Validation, 10_000_000).unwrap();
    let test = build_dataset(&cfg, &model, 2_000, Role::Test, 20_000_000).unwrap();

    let (lmmse9, _, _) = run_classical(Method::Lmmse, &cfg, &test, Some(&train), 9, 77).unwrap();
    let (ls20, _, _) = run_classical(Method::Ls, &cfg, &test, None, 20, 78).unwrap();
    eprintln!(
        "lmmse tau9 @-9dBm: {:.4} (0.5x = {:.4})  ls {:.4}",
        lmmse9.unwrap(),
        0.5 * lmmse9.unwrap(),
        ls20.unwrap()
    );

    let hyper = ModelHyper::desk_scale();
    // tau1 = 1 with early stopping, up to 22 epochs
    let t0 = Instant::now();
    let b1 = train_joint(&train, &val, &cfg, &hyper, &tc(1, 22), MethodTag::Jtsmlcef, |r| {
        eprintln!("  [t1=1] ep {:2} val {:.4} best {:.4}", r.epoch, r.val_nmse, r.best_val_nmse);
    })
    .unwrap();
    eprintln!("[t1=1] trained {:?}", t0.elapsed());
    let e1 = evaluate_bundle(&b1, &test, 99, Some(center));
    eprintln!("[t1=1] @-9 nmse {:.4}  ratio {:.3}", e1.nmse, e1.nmse / lmmse9.unwrap());

    // tau1 = 2, tau2 = 7
    let cfg2 = SystemConfig { tau1: 2, tau2: 7, ..cfg.clone() };
    let train2 = build_dataset(&cfg2, &model, 20_000, Role::Train, 0).unwrap();
    let val2 = build_dataset(&cfg2, &model, 800, Role::Validation, 10_000_000).unwrap();
    let test2 = build_dataset(&cfg2, &model, 2_000, Role::Test, 20_000_000).unwrap();
    let t1 = Instant::now();
    let b2 = train_joint(&train2, &val2, &cfg2, &hyper, &tc(1, 22), MethodTag::Jtsmlcef, |r| {
        eprintln!("  [t1=2] ep {:2} val {:.4} best {:.4}", r.epoch, r.val_nmse, r.best_val_nmse);
    })
    .unwrap();
    eprintln!("[t1=2] trained {:?}", t1.elapsed());
    let e2 = evaluate_bundle(&b2, &test2, 99, Some(center));
    eprintln!(
        "[t1=2] @-9 nmse {:.4}  vs t1=1 {:.4}  rel gap {:.1}%",
        e2.nmse,
        e1.nmse,
        100.0 * (e2.nmse - e1.nmse).abs() / e1.nmse
    );
}

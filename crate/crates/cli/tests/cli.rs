// End-to-end CLI exercises over a micro configuration.

use std::path::PathBuf;
use std::process::Command;

fn bdris() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bdris"))
}

fn workdir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("bdris-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const MICRO_CONFIG: &str = "\
# micro system for fast end-to-end runs
sys.bs_antennas = 2
sys.ris_elements = 4
sys.groups = 2
sys.users = 2
sys.user_antennas = 1
sys.tau1 = 1
sys.tau2 = 2
sys.p_u_dbm = -4.5
sys.noise_dbm = 0
ch.preset = b
model.d_model = 8
model.d_ff = 16
model.n_heads = 2
model.n_intra_layers = 1
model.n_inter_layers = 1
model.n_ffc = 2
model.d_fc = 16
model.d_group = 8
train.batch_size = 4
train.max_epochs = 2
train.seed = 5
train.p_u_lo_dbm = -12
train.p_u_hi_dbm = 3
";

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn bdris");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

#[test]
fn gen_train_eval_sweep_check_pipeline() {
    let dir = workdir();
    let config = dir.join("micro.cfg");
    std::fs::write(&config, MICRO_CONFIG).unwrap();

    // gen: three roles with disjoint seed bases
    for (role, seed, name) in
        [("train", "0", "train.bdrs"), ("val", "1000000", "val.bdrs"), ("test", "2000000", "test.bdrs")]
    {
        run_ok(bdris().args([
            "gen",
            "--config",
            config.to_str().unwrap(),
            "--role",
            role,
            "--count",
            "12",
            "--seed",
            seed,
            "--out",
            dir.join(name).to_str().unwrap(),
        ]));
    }

    // gen determinism: same args give identical bytes
    let dup = dir.join("train_dup.bdrs");
    run_ok(bdris().args([
        "gen",
        "--config",
        config.to_str().unwrap(),
        "--role",
        "train",
        "--count",
        "12",
        "--seed",
        "0",
        "--out",
        dup.to_str().unwrap(),
    ]));
    assert_eq!(
        std::fs::read(dir.join("train.bdrs")).unwrap(),
        std::fs::read(&dup).unwrap()
    );

    // train both variants
    let ckpt = dir.join("joint.bdmc");
    run_ok(bdris().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data-dir",
        dir.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]));
    let ckpt_ablation = dir.join("ablation.bdmc");
    run_ok(bdris().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data-dir",
        dir.to_str().unwrap(),
        "--out",
        ckpt_ablation.to_str().unwrap(),
        "--no-tsmo",
    ]));

    // train determinism
    let ckpt2 = dir.join("joint2.bdmc");
    run_ok(bdris().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data-dir",
        dir.to_str().unwrap(),
        "--out",
        ckpt2.to_str().unwrap(),
    ]));
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&ckpt2).unwrap());

    // eval writes a one-row CSV
    let eval_csv = dir.join("eval.csv");
    let out = run_ok(bdris().args([
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        dir.join("test.bdrs").to_str().unwrap(),
        "--csv",
        eval_csv.to_str().unwrap(),
    ]));
    assert!(out.contains("nmse"));
    let csv = std::fs::read_to_string(&eval_csv).unwrap();
    assert!(csv.starts_with("axis,value,method,seed,nmse,avg_snr_db,pilot_slots"));
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().contains("jtsmlcef"));

    // sweep over tau2 with a learned bundle and both classical baselines
    let spec = dir.join("sweep.spec");
    std::fs::write(
        &spec,
        format!(
            "axis = tau2\n\
             grid = 2\n\
             methods = jtsmlcef,dacen,ls,lmmse\n\
             seeds = 5\n\
             eval_seed = 9\n\
             classical_tau = equal\n\
             data = {}\n\
             train_data = {}\n\
             bundle.jtsmlcef.2.5 = {}\n\
             bundle.dacen.2.5 = {}\n",
            dir.join("test.bdrs").display(),
            dir.join("train.bdrs").display(),
            ckpt.display(),
            ckpt_ablation.display(),
        ),
    )
    .unwrap();
    let sweep_csv = dir.join("sweep.csv");
    run_ok(bdris().args([
        "sweep",
        "--spec",
        spec.to_str().unwrap(),
        "--csv",
        sweep_csv.to_str().unwrap(),
    ]));
    let csv = std::fs::read_to_string(&sweep_csv).unwrap();
    assert_eq!(csv.lines().count(), 5, "header + 4 method rows:\n{csv}");
    // micro config: classical budget tau1+tau2 = 3 < 6 unique coefficients,
    // so the LS row must carry the underdetermined status
    let ls_line = csv.lines().find(|l| l.contains(",ls,")).unwrap();
    assert!(ls_line.contains("underdetermined"), "{ls_line}");
    // learned rows report KU(tau1+tau2) slots; classical report KU*tau
    let jt_line = csv.lines().find(|l| l.contains("jtsmlcef")).unwrap();
    assert!(jt_line.trim_end().ends_with(",6"), "{jt_line}");

    // sweep determinism
    let sweep_csv2 = dir.join("sweep2.csv");
    run_ok(bdris().args([
        "sweep",
        "--spec",
        spec.to_str().unwrap(),
        "--csv",
        sweep_csv2.to_str().unwrap(),
    ]));
    assert_eq!(
        std::fs::read(&sweep_csv).unwrap(),
        std::fs::read(&sweep_csv2).unwrap()
    );

    // check: protocol suite prints PASS lines
    let out = run_ok(bdris().args(["check", "--protocol"]));
    assert!(out.contains("[PASS] protocol.pilot_orthogonality"), "{out}");
    assert!(out.contains("suite protocol: PASS"), "{out}");
}

#[test]
fn rejects_unknown_config_key() {
    let dir = workdir();
    let config = dir.join("bad.cfg");
    std::fs::write(&config, "sys.meaning_of_life = 42\n").unwrap();
    let out = bdris()
        .args([
            "gen",
            "--config",
            config.to_str().unwrap(),
            "--role",
            "train",
            "--count",
            "1",
            "--seed",
            "0",
            "--out",
            dir.join("x.bdrs").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn eval_rejects_mismatched_dataset() {
    // checkpoint trained on the micro system must not evaluate desk data
    let dir = workdir();
    let config = dir.join("micro2.cfg");
    std::fs::write(&config, MICRO_CONFIG).unwrap();
    for (role, seed, name) in [("train", "0", "t2/train.bdrs"), ("val", "500000", "t2/val.bdrs")] {
        std::fs::create_dir_all(dir.join("t2")).unwrap();
        run_ok(bdris().args([
            "gen",
            "--config",
            config.to_str().unwrap(),
            "--role",
            role,
            "--count",
            "8",
            "--seed",
            seed,
            "--out",
            dir.join(name).to_str().unwrap(),
        ]));
    }
    let ckpt = dir.join("t2/m.bdmc");
    run_ok(bdris().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data-dir",
        dir.join("t2").to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]));
    // desk-scale dataset with a different system
    let desk_cfg = dir.join("desk.cfg");
    std::fs::write(&desk_cfg, "train.seed = 1\n").unwrap();
    let desk_data = dir.join("t2/desk.bdrs");
    run_ok(bdris().args([
        "gen",
        "--config",
        desk_cfg.to_str().unwrap(),
        "--role",
        "test",
        "--count",
        "2",
        "--seed",
        "0",
        "--out",
        desk_data.to_str().unwrap(),
    ]));
    let out = bdris()
        .args([
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            desk_data.to_str().unwrap(),
            "--csv",
            dir.join("t2/out.csv").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("disagree"));
}

#[test]
fn mix_ratio_sweep_composes_test_sets() {
    let dir = workdir().join("mix");
    std::fs::create_dir_all(&dir).unwrap();
    let config_a = dir.join("a.cfg");
    let config_b = dir.join("b.cfg");
    std::fs::write(&config_a, format!("{MICRO_CONFIG}ch.preset = a\n")).unwrap();
    std::fs::write(&config_b, format!("{MICRO_CONFIG}ch.preset = b\n")).unwrap();
    for (cfg, name) in [(&config_a, "a.bdrs"), (&config_b, "b.bdrs")] {
        run_ok(bdris().args([
            "gen",
            "--config",
            cfg.to_str().unwrap(),
            "--role",
            "test",
            "--count",
            "10",
            "--seed",
            "3000000",
            "--out",
            dir.join(name).to_str().unwrap(),
        ]));
    }
    // train data for the lmmse prior (preset b)
    run_ok(bdris().args([
        "gen",
        "--config",
        config_b.to_str().unwrap(),
        "--role",
        "train",
        "--count",
        "40",
        "--seed",
        "0",
        "--out",
        dir.join("train.bdrs").to_str().unwrap(),
    ]));
    let spec = dir.join("mix.spec");
    std::fs::write(
        &spec,
        format!(
            "axis = mix_ratio\n\
             grid = 0,0.5,1\n\
             methods = lmmse\n\
             seeds = 1\n\
             classical_tau = equal\n\
             data_a = {}\n\
             data_b = {}\n\
             train_data = {}\n",
            dir.join("a.bdrs").display(),
            dir.join("b.bdrs").display(),
            dir.join("train.bdrs").display(),
        ),
    )
    .unwrap();
    let csv = dir.join("mix.csv");
    run_ok(bdris().args([
        "sweep",
        "--spec",
        spec.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4, "{text}");
    assert!(text.contains("mix_ratio,0,"));
    assert!(text.contains("mix_ratio,0.5,"));
    assert!(text.contains("mix_ratio,1,"));
}

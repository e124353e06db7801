//! `bdris` command-line workbench.
//!
//! Subcommands:
//!   gen    --config <file> --role train|val|test --count N --seed S --out <path>
//!   train  --config <file> --data-dir <dir> --out <ckpt> [--no-tsmo]
//!   eval   --ckpt <path> --data <path> --csv <path> [--pu-dbm X] [--seed S]
//!   sweep  --spec <file> --csv <path>
//!   check  [--gradcheck] [--physics] [--protocol]
//!
//! Config and sweep-spec files are `key = value` text; see the config module
//! documentation for the key lists.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bdris_core::channel::{build_dataset, Role};
use bdris_core::config::{parse_assignments, parse_config, WorkbenchConfig};
use bdris_core::io::{read_checkpoint, read_dataset, write_checkpoint, write_dataset, write_text};
use bdris_core::models::MethodTag;
use bdris_core::physics::{dbm_to_watts, SystemConfig};
use bdris_core::suites::{gradcheck_suite, physics_suite, protocol_suite};
use bdris_core::sweep::{
    rows_to_csv, run_sweep, GridResources, Method, SweepAxis, SweepSpec,
};
use bdris_core::train::{evaluate_bundle, train_joint};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = match args.first().map(String::as_str) {
        Some("gen") => cmd_gen(&args[1..]),
        Some("train") => cmd_train(&args[1..]),
        Some("eval") => cmd_eval(&args[1..]),
        Some("sweep") => cmd_sweep(&args[1..]),
        Some("check") => cmd_check(&args[1..]),
        Some("--help") | Some("-h") | None => {
            eprint!("{}", USAGE);
            return ExitCode::SUCCESS;
        }
        Some(other) => Err(format!("unknown subcommand '{other}'\n\n{USAGE}")),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

const USAGE: &str = "\
bdris: BD-RIS channel estimation workbench

usage:
  bdris gen    --config <file> --role train|val|test --count N --seed S --out <path>
  bdris train  --config <file> --data-dir <dir> --out <ckpt> [--no-tsmo]
  bdris eval   --ckpt <path> --data <path> --csv <path> [--pu-dbm X] [--seed S]
  bdris sweep  --spec <file> --csv <path>
  bdris check  [--gradcheck] [--physics] [--protocol]
";

/// Minimal flag parser: `--key value` pairs plus boolean switches.
struct Flags {
    values: BTreeMap<String, String>,
    switches: Vec<String>,
}

impl Flags {
    fn parse(args: &[String], switches: &[&str]) -> Result<Flags, String> {
        let mut values = BTreeMap::new();
        let mut found = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let a = &args[i];
            let Some(key) = a.strip_prefix("--") else {
                return Err(format!("expected a --flag, got '{a}'"));
            };
            if switches.contains(&key) {
                found.push(key.to_string());
                i += 1;
                continue;
            }
            let Some(v) = args.get(i + 1) else {
                return Err(format!("--{key} needs a value"));
            };
            values.insert(key.to_string(), v.clone());
            i += 2;
        }
        Ok(Flags { values, switches: found })
    }

    fn required(&self, key: &str) -> Result<&str, String> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| format!("missing required flag --{key}"))
    }

    fn optional(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn switch(&self, key: &str) -> bool {
        self.switches.iter().any(|s| s == key)
    }
}

fn load_config(path: &str) -> Result<WorkbenchConfig, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    parse_config(&text).map_err(|e| format!("{path}: {e}"))
}

fn cmd_gen(args: &[String]) -> Result<ExitCode, String> {
    let flags = Flags::parse(args, &[])?;
    let cfg = load_config(flags.required("config")?)?;
    let role: Role = flags.required("role")?.parse()?;
    let count: usize =
        flags.required("count")?.parse().map_err(|_| "cannot parse --count".to_string())?;
    let seed: u64 =
        flags.required("seed")?.parse().map_err(|_| "cannot parse --seed".to_string())?;
    let out = PathBuf::from(flags.required("out")?);
    let split = build_dataset(&cfg.system, &cfg.channel, count, role, seed)?;
    write_dataset(&split, &out).map_err(|e| e.to_string())?;
    println!(
        "wrote {} {} samples to {} (seed base {seed})",
        count,
        role.name(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: &[String]) -> Result<ExitCode, String> {
    let flags = Flags::parse(args, &["no-tsmo"])?;
    let cfg = load_config(flags.required("config")?)?;
    let dir = PathBuf::from(flags.required("data-dir")?);
    let out = PathBuf::from(flags.required("out")?);
    let method = if flags.switch("no-tsmo") { MethodTag::Dacen } else { MethodTag::Jtsmlcef };

    let train_split = read_dataset(&dir.join("train.bdrs")).map_err(|e| e.to_string())?;
    let val_split = read_dataset(&dir.join("val.bdrs")).map_err(|e| e.to_string())?;
    if train_split.system != cfg.system {
        return Err("training dataset was generated under a different system config".into());
    }
    if val_split.system != cfg.system {
        return Err("validation dataset was generated under a different system config".into());
    }

    let bundle = train_joint(
        &train_split,
        &val_split,
        &cfg.system,
        &cfg.hyper,
        &cfg.train,
        method,
        |r| {
            println!(
                "epoch {:3}  train_loss {:.6}  val_nmse {:.6}  best {:.6}",
                r.epoch, r.train_loss, r.val_nmse, r.best_val_nmse
            );
        },
    )
    .map_err(|e| e.to_string())?;
    write_checkpoint(&bundle, &out).map_err(|e| e.to_string())?;
    println!("wrote {} checkpoint to {}", bundle.method.name(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: &[String]) -> Result<ExitCode, String> {
    let flags = Flags::parse(args, &[])?;
    let bundle = read_checkpoint(Path::new(flags.required("ckpt")?)).map_err(|e| e.to_string())?;
    let data = read_dataset(Path::new(flags.required("data")?)).map_err(|e| e.to_string())?;
    let csv_path = PathBuf::from(flags.required("csv")?);
    if data.system != bundle.system {
        return Err("dataset and checkpoint disagree on the system config".into());
    }
    let pu_dbm: Option<f64> = match flags.optional("pu-dbm") {
        Some(s) => Some(s.parse().map_err(|_| "cannot parse --pu-dbm".to_string())?),
        None => None,
    };
    let seed: u64 = match flags.optional("seed") {
        Some(s) => s.parse().map_err(|_| "cannot parse --seed".to_string())?,
        None => 0,
    };
    let summary = evaluate_bundle(&bundle, &data, seed, pu_dbm);
    let used_dbm = pu_dbm
        .unwrap_or_else(|| 0.5 * (bundle.p_u_interval_dbm.0 + bundle.p_u_interval_dbm.1));
    let row = bdris_core::sweep::SweepRow {
        axis: SweepAxis::PuDbm,
        value: used_dbm,
        method: match bundle.method {
            MethodTag::Jtsmlcef => Method::Jtsmlcef,
            MethodTag::Dacen => Method::Dacen,
        },
        seed: bundle.train_seed,
        nmse: Some(summary.nmse),
        avg_snr_db: summary.avg_snr_db,
        pilot_slots: summary.pilot_slots,
    };
    write_text(&csv_path, &rows_to_csv(&[row])).map_err(|e| e.to_string())?;
    println!(
        "nmse {:.6}  avg_snr {:.2} dB  pilot_slots {}  ({} samples) -> {}",
        summary.nmse,
        summary.avg_snr_db,
        summary.pilot_slots,
        summary.samples,
        csv_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Sweep spec keys:
///   axis = pu_dbm|tau2|m|mix_ratio
///   grid = comma list of values
///   methods = comma list of jtsmlcef|dacen|ls|lmmse
///   seeds = comma list of integers
///   eval_seed = integer (default 0)
///   classical_tau = equal|min|<number> (default equal)
///   data = <path>                     shared test dataset
///   data.<value> = <path>             per-grid-point override
///   data_a = <path>, data_b = <path>  mix_ratio sources: each grid value
///                                     rho takes the first round(rho*N)
///                                     samples from A and the rest from B
///   train_data = <path>               LMMSE prior source
///   train_data.<value> = <path>
///   bundle.<method>.<value>.<seed> = <path>
fn cmd_sweep(args: &[String]) -> Result<ExitCode, String> {
    let flags = Flags::parse(args, &[])?;
    let spec_path = flags.required("spec")?;
    let csv_path = PathBuf::from(flags.required("csv")?);
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| format!("cannot read spec {spec_path}: {e}"))?;
    let assignments = parse_assignments(&text).map_err(|e| e.to_string())?;

    let mut axis: Option<SweepAxis> = None;
    let mut grid_tokens: Vec<String> = Vec::new();
    let mut methods: Vec<Method> = Vec::new();
    let mut seeds: Vec<u64> = Vec::new();
    let mut eval_seed = 0u64;
    let mut classical_tau = String::from("equal");
    let mut data_default: Option<String> = None;
    let mut data_a: Option<String> = None;
    let mut data_b: Option<String> = None;
    let mut data_by_value: BTreeMap<String, String> = BTreeMap::new();
    let mut train_default: Option<String> = None;
    let mut train_by_value: BTreeMap<String, String> = BTreeMap::new();
    let mut bundle_paths: BTreeMap<(String, String, String), String> = BTreeMap::new();

    for (line, key, value) in assignments {
        match key.as_str() {
            "axis" => axis = Some(value.parse().map_err(|e: String| format!("line {line}: {e}"))?),
            "grid" => {
                grid_tokens = value.split(',').map(|s| s.trim().to_string()).collect();
            }
            "methods" => {
                methods = value
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_, String>>()
                    .map_err(|e| format!("line {line}: {e}"))?;
            }
            "seeds" => {
                seeds = value
                    .split(',')
                    .map(|s| s.trim().parse::<u64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| format!("line {line}: cannot parse seeds"))?;
            }
            "eval_seed" => {
                eval_seed =
                    value.parse().map_err(|_| format!("line {line}: cannot parse eval_seed"))?;
            }
            "classical_tau" => classical_tau = value,
            "data" => data_default = Some(value),
            "data_a" => data_a = Some(value),
            "data_b" => data_b = Some(value),
            "train_data" => train_default = Some(value),
            other => {
                if let Some(v) = other.strip_prefix("data.") {
                    data_by_value.insert(v.to_string(), value);
                } else if let Some(v) = other.strip_prefix("train_data.") {
                    train_by_value.insert(v.to_string(), value);
                } else if let Some(rest) = other.strip_prefix("bundle.") {
                    let parts: Vec<&str> = rest.split('.').collect();
                    if parts.len() != 3 {
                        return Err(format!(
                            "line {line}: expected bundle.<method>.<value>.<seed>"
                        ));
                    }
                    bundle_paths.insert(
                        (parts[0].to_string(), parts[1].to_string(), parts[2].to_string()),
                        value,
                    );
                } else {
                    return Err(format!("line {line}: unknown key '{other}'"));
                }
            }
        }
    }

    let axis = axis.ok_or("spec is missing 'axis'")?;
    if grid_tokens.is_empty() {
        return Err("spec is missing 'grid'".into());
    }
    let grid_values: Vec<f64> = grid_tokens
        .iter()
        .map(|t| t.parse::<f64>().map_err(|_| format!("cannot parse grid value '{t}'")))
        .collect::<Result<_, _>>()?;

    // mix_ratio sources are loaded once and sliced per grid value
    let mix_sources = if axis == SweepAxis::MixRatio {
        let a = data_a.as_ref().ok_or("mix_ratio sweeps need data_a")?;
        let b = data_b.as_ref().ok_or("mix_ratio sweeps need data_b")?;
        Some((
            read_dataset(Path::new(a)).map_err(|e| e.to_string())?,
            read_dataset(Path::new(b)).map_err(|e| e.to_string())?,
        ))
    } else {
        None
    };

    let mut grid = Vec::new();
    for (token, &value) in grid_tokens.iter().zip(&grid_values) {
        let test = if let Some((a, b)) = &mix_sources {
            if a.system != b.system {
                return Err("mix_ratio sources disagree on the system config".into());
            }
            let n = a.samples.len().min(b.samples.len());
            let take_a = ((value.clamp(0.0, 1.0)) * n as f64).round() as usize;
            let mut samples = Vec::with_capacity(n);
            samples.extend_from_slice(&a.samples[..take_a]);
            samples.extend_from_slice(&b.samples[..n - take_a]);
            bdris_core::channel::DatasetSplit {
                system: a.system.clone(),
                model: a.model.clone(),
                role: a.role,
                seed_base: a.seed_base,
                samples,
            }
        } else {
            let data_path = data_by_value
                .get(token)
                .or(data_default.as_ref())
                .ok_or_else(|| format!("no test data for grid value {token}"))?;
            read_dataset(Path::new(data_path)).map_err(|e| e.to_string())?
        };
        let mut cfg = test.system.clone();
        match axis {
            SweepAxis::PuDbm => cfg.p_u = dbm_to_watts(value),
            SweepAxis::Tau2 => cfg.tau2 = value as usize,
            SweepAxis::RisElements => {
                if cfg.ris_elements != value as usize {
                    return Err(format!(
                        "grid value {token}: dataset has M = {}, expected {}",
                        cfg.ris_elements, value
                    ));
                }
            }
            SweepAxis::MixRatio => {}
        }
        let needs_train = methods.contains(&Method::Lmmse);
        let train = if needs_train {
            let p = train_by_value
                .get(token)
                .or(train_default.as_ref())
                .ok_or_else(|| format!("lmmse needs train_data for grid value {token}"))?;
            Some(read_dataset(Path::new(p)).map_err(|e| e.to_string())?)
        } else {
            None
        };
        let tau = resolve_classical_tau(&classical_tau, &cfg)?;
        let mut bundles = Vec::new();
        for &method in methods.iter().filter(|m| m.is_learned()) {
            for &seed in &seeds {
                let key =
                    (method.name().to_string(), token.clone(), seed.to_string());
                if let Some(path) = bundle_paths.get(&key) {
                    let b = read_checkpoint(Path::new(path)).map_err(|e| e.to_string())?;
                    bundles.push((method, seed, b));
                }
            }
        }
        grid.push(GridResources { value, cfg, test, train, classical_tau: tau, bundles });
    }

    let spec = SweepSpec { axis, grid: grid_values, methods, seeds, eval_seed };
    let rows = run_sweep(&spec, &grid).map_err(|e| e.to_string())?;
    write_text(&csv_path, &rows_to_csv(&rows)).map_err(|e| e.to_string())?;
    println!("wrote {} rows to {}", rows.len(), csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn resolve_classical_tau(rule: &str, cfg: &SystemConfig) -> Result<usize, String> {
    match rule {
        "equal" => Ok(cfg.tau1 + cfg.tau2),
        "min" => Ok(cfg.total_half_len()),
        n => n.parse().map_err(|_| format!("cannot parse classical_tau '{n}'")),
    }
}

fn cmd_check(args: &[String]) -> Result<ExitCode, String> {
    let flags = Flags::parse(args, &["gradcheck", "physics", "protocol"])?;
    let all = !(flags.switch("gradcheck") || flags.switch("physics") || flags.switch("protocol"));
    let mut ok = true;
    if all || flags.switch("physics") {
        let rep = physics_suite();
        print!("{}", rep.render());
        ok &= rep.passed();
    }
    if all || flags.switch("protocol") {
        let rep = protocol_suite();
        print!("{}", rep.render());
        ok &= rep.passed();
    }
    if all || flags.switch("gradcheck") {
        let rep = gradcheck_suite();
        print!("{}", rep.render());
        ok &= rep.passed();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

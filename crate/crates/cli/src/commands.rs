//! One function per subcommand. Each returns the text for standard output;
//! result files are written under the given paths.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use hierax::bench::{
    compare_closed_loop, compare_solvers, comparison_scenario, instance_problem, make_solver_dataset,
    TARGET_SUBSYSTEM,
};
use hierax::coordinator::{closed_loop_run, ClosedLoopSetup};
use hierax::fastgrad::solve;
use hierax::plant::ControllerKind;
use hierax::surrogate::{
    collect_excitation_dataset, excitation_scenario, rprop_train, Dataset, MlpParams, TrainingOutcome,
};

use crate::config::ConfigDocument;
use crate::CliError;

/// Widths of the architecture sweep: one, two and three hidden layers.
pub const SWEEP_WIDTH: usize = 25;

/// Labels re-solved by `gen-data --verify`.
pub const VERIFY_SAMPLES: usize = 20;

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Io {
        context: format!("cannot create {}", path.display()),
        source,
    })
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        context: format!("cannot create directory {}", dir.display()),
        source,
    })
}

fn load_model(path: &Path) -> Result<MlpParams, CliError> {
    MlpParams::load(path).map_err(|e| CliError::Config(format!("cannot load model {}: {e}", path.display())))
}

/// The surrogate model, when any controller needs one.
fn model_for(doc: &ConfigDocument, override_path: Option<&Path>, needed: bool) -> Result<Option<MlpParams>, CliError> {
    if !needed {
        return Ok(None);
    }
    match override_path.or(doc.surrogate.model.as_deref()) {
        Some(p) => load_model(p).map(Some),
        None => Err(CliError::Config(
            "a surrogate controller is configured but no model is given (surrogate.model or --model)".into(),
        )),
    }
}

pub struct SimulateArgs<'a> {
    pub out_dir: &'a Path,
    pub model: Option<&'a Path>,
    pub with_wall_time: bool,
}

/// Writes `trajectory.csv` and `summary.csv` into the output directory.
pub fn simulate(doc: &ConfigDocument, args: &SimulateArgs<'_>) -> Result<String, CliError> {
    let bench = doc.validate()?;
    let needed = doc.scenario.controllers.contains(&ControllerKind::Surrogate);
    let model = model_for(doc, args.model, needed)?;
    ensure_dir(args.out_dir)?;
    let setup = ClosedLoopSetup {
        bench: &bench,
        scenario: &doc.scenario,
        solver: doc.solver.clone(),
        fixed_point: doc.fixed_point.clone(),
        surrogates: model.iter().map(|m| (TARGET_SUBSYSTEM, m)).collect(),
    };
    let log = closed_loop_run(&setup)?;
    log.write_csv(create(&args.out_dir.join("trajectory.csv"))?, args.with_wall_time)?;

    let mut summary = String::from("j_c_cl,sim_steps,updates,nonconverged_updates");
    if args.with_wall_time {
        summary.push_str(",total_solve_time");
    }
    let _ = write!(
        summary,
        "\n{},{},{},{}",
        log.j_c_cl,
        log.steps.len(),
        log.updates,
        log.nonconverged_updates
    );
    if args.with_wall_time {
        let _ = write!(summary, ",{}", log.update_solve_times().iter().sum::<f64>());
    }
    summary.push('\n');
    write_text(&args.out_dir.join("summary.csv"), &summary)?;
    Ok(format!(
        "J_c_cl = {:.6e} over {} steps, {} updates ({} not converged)\n",
        log.j_c_cl,
        log.steps.len(),
        log.updates,
        log.nonconverged_updates
    ))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        context: format!("cannot write {}", path.display()),
        source,
    })
}

pub struct GenDataArgs<'a> {
    pub out: &'a Path,
    pub records: Option<usize>,
    pub seed: Option<u64>,
    pub verify: bool,
}

/// Collects labelled local problems of subsystem 0 under PRBS excitation.
pub fn gen_data(doc: &ConfigDocument, args: &GenDataArgs<'_>) -> Result<String, CliError> {
    let bench = doc.validate()?;
    let records = args.records.unwrap_or(doc.data.records);
    if records == 0 {
        return Err(CliError::Config("the number of records must be at least 1".into()));
    }
    let seed = args.seed.unwrap_or(doc.data.seed);
    let scenario = excitation_scenario(&bench, doc.data.updating_period, doc.data.steps_per_run, seed);
    scenario.validate(&bench).map_err(|e| CliError::Config(format!("data section: {e}")))?;
    let setup = ClosedLoopSetup {
        bench: &bench,
        scenario: &scenario,
        solver: doc.solver.clone(),
        fixed_point: doc.fixed_point.clone(),
        surrogates: Vec::new(),
    };
    let ds = collect_excitation_dataset(&setup, TARGET_SUBSYSTEM, records)?;
    ds.write_csv(create(args.out)?)?;
    let mut out = format!(
        "wrote {} records ({} inputs, {} outputs) to {}\n",
        ds.len(),
        ds.layout.input_len(),
        ds.layout.output_len(),
        args.out.display()
    );
    if args.verify {
        let (checked, dev) = verify_labels(doc, &bench, args.out)?;
        let _ = writeln!(out, "verified {checked} labels against a fresh solve, max deviation {dev:e}");
        if dev > 1e-9 {
            return Err(CliError::Assertion(format!(
                "label deviation {dev:e} exceeds 1e-9"
            )));
        }
    }
    Ok(out)
}

/// Re-reads the written file and re-solves evenly spaced records.
fn verify_labels(doc: &ConfigDocument, bench: &hierax::plant::Benchmark, path: &Path) -> Result<(usize, f64), CliError> {
    let file = File::open(path).map_err(|source| CliError::Io {
        context: format!("cannot reopen {}", path.display()),
        source,
    })?;
    let ds = Dataset::read_csv(std::io::BufReader::new(file))?;
    let n = ds.len();
    let picks: Vec<usize> = if n <= VERIFY_SAMPLES {
        (0..n).collect()
    } else {
        (0..VERIFY_SAMPLES).map(|i| i * (n - 1) / (VERIFY_SAMPLES - 1)).collect()
    };
    let mut dev = 0.0f64;
    for &i in &picks {
        let rec = &ds.records[i];
        let fresh = solve(&instance_problem(bench, TARGET_SUBSYSTEM, rec)?, &doc.solver)?;
        for (a, b) in fresh.u_star.iter().zip(rec.u.as_slice()) {
            dev = dev.max((a - b).abs());
        }
    }
    Ok((picks.len(), dev))
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub hidden: Option<Vec<usize>>,
    pub epochs: Option<usize>,
    pub sweep: bool,
    /// Per-epoch MSE curve CSV; with `sweep`, one file per structure with
    /// the structure name appended to the stem.
    pub curve: Option<&'a Path>,
    pub with_wall_time: bool,
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let file = File::open(path).map_err(|source| CliError::Io {
        context: format!("cannot open {}", path.display()),
        source,
    })?;
    Ok(Dataset::read_csv(std::io::BufReader::new(file))?)
}

fn layer_sizes(ds: &Dataset, hidden: &[usize]) -> Vec<usize> {
    let mut sizes = vec![ds.layout.input_len()];
    sizes.extend(hidden);
    sizes.push(ds.layout.output_len());
    sizes
}

fn write_curve(path: &Path, t: &TrainingOutcome) -> Result<(), CliError> {
    let mut s = String::from("epoch,train_mse,val_mse\n");
    for (k, (a, b)) in t.train_mse.iter().zip(&t.val_mse).enumerate() {
        let _ = writeln!(s, "{k},{a},{b}");
    }
    write_text(path, &s)
}

fn architecture(sizes: &[usize]) -> String {
    let parts: Vec<String> = sizes.iter().map(usize::to_string).collect();
    format!("[{}]", parts.join(" "))
}

/// Trains one network, or with `sweep` the 1/2/3-hidden-layer variants of
/// width [`SWEEP_WIDTH`], keeping the one with the lowest validation MSE.
pub fn train(doc: &ConfigDocument, args: &TrainArgs<'_>) -> Result<String, CliError> {
    doc.validate()?;
    let mut cfg = doc.surrogate.training.clone();
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if cfg.epochs == 0 {
        return Err(CliError::Config("training needs at least one epoch".into()));
    }
    let ds = read_dataset(args.data)?;
    let (z, u) = (ds.inputs(), ds.labels());
    let mut out = String::new();
    if !args.sweep {
        let hidden = args.hidden.clone().unwrap_or_else(|| doc.surrogate.hidden.clone());
        if hidden.contains(&0) {
            return Err(CliError::Config("hidden layer widths must be positive".into()));
        }
        let sizes = layer_sizes(&ds, &hidden);
        let t = rprop_train(&z, &u, &sizes, &cfg)?;
        t.params.save(args.out)?;
        if let Some(c) = args.curve {
            write_curve(c, &t)?;
        }
        let _ = writeln!(out, "architecture {}", architecture(&sizes));
        let _ = writeln!(out, "records {} (train {}, validation {})", ds.len(), t.n_train, t.n_val);
        let _ = writeln!(
            out,
            "best epoch {}, validation MSE {:.6e}",
            t.best_epoch.map_or("-".to_string(), |e| e.to_string()),
            t.best_val_mse
        );
        let _ = writeln!(out, "final training MSE {:.6e}", t.train_mse.last().copied().unwrap_or(f64::NAN));
        if args.with_wall_time {
            let _ = writeln!(out, "training time {:.2} s", t.train_time);
        }
        let _ = writeln!(out, "model written to {}", args.out.display());
        return Ok(out);
    }

    let _ = writeln!(
        out,
        "{:<10} {:<24} {:>14} {:>18}",
        "structure", "architecture", "MSE", "training_time[s]"
    );
    let mut best: Option<(f64, String, MlpParams)> = None;
    for layers in 1..=3 {
        let name = format!("NN-{layers}-{SWEEP_WIDTH}");
        let sizes = layer_sizes(&ds, &vec![SWEEP_WIDTH; layers]);
        let t = rprop_train(&z, &u, &sizes, &cfg)?;
        if let Some(c) = args.curve {
            write_curve(&suffixed(c, &name), &t)?;
        }
        let time = if args.with_wall_time {
            format!("{:.2}", t.train_time)
        } else {
            "-".to_string()
        };
        let _ = writeln!(
            out,
            "{:<10} {:<24} {:>14.6e} {:>18}",
            name,
            architecture(&sizes),
            t.best_val_mse,
            time
        );
        if best.as_ref().is_none_or(|b| t.best_val_mse < b.0) {
            best = Some((t.best_val_mse, name, t.params));
        }
    }
    let (_, name, params) = best.expect("three structures were trained");
    params.save(args.out)?;
    let _ = writeln!(out, "selected {name}, model written to {}", args.out.display());
    Ok(out)
}

fn suffixed(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let name = match path.extension() {
        Some(ext) => format!("{stem}-{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{tag}"),
    };
    path.with_file_name(name)
}

pub struct BenchSolversArgs<'a> {
    pub out_dir: &'a Path,
    pub instances: Option<usize>,
    pub assert_jbar_max: Option<f64>,
    pub assert_jbar_min: Option<f64>,
    pub with_wall_time: bool,
}

/// Truncated fast gradient against the converged reference; writes
/// `solvers.csv`.
pub fn bench_solvers(doc: &ConfigDocument, args: &BenchSolversArgs<'_>) -> Result<String, CliError> {
    let bench = doc.validate()?;
    let n = args.instances.unwrap_or(doc.bench.instances);
    if n == 0 {
        return Err(CliError::Config("the number of instances must be at least 1".into()));
    }
    ensure_dir(args.out_dir)?;
    let ds = make_solver_dataset(&bench, n, doc.bench.seed)?;
    let rep = compare_solvers(&bench, &ds, &doc.solver, &doc.oracle)?;
    rep.write_csv(create(&args.out_dir.join("solvers.csv"))?, args.with_wall_time)?;
    let out = rep.summary_table(args.with_wall_time);
    if let Some(max) = args.assert_jbar_max.or(doc.bench.assert_jbar_max) {
        if !(rep.j_bar <= max) {
            return Err(CliError::Assertion(format!("J_bar = {}% exceeds {max}%\n{out}", rep.j_bar)));
        }
    }
    if let Some(min) = args.assert_jbar_min.or(doc.bench.assert_jbar_min) {
        if !(rep.j_bar >= min) {
            return Err(CliError::Assertion(format!("J_bar = {}% is below {min}%\n{out}", rep.j_bar)));
        }
    }
    Ok(out)
}

pub struct BenchClosedLoopArgs<'a> {
    pub out_dir: &'a Path,
    pub model: Option<&'a Path>,
    pub with_wall_time: bool,
}

/// Runs every configured closed-loop entry; writes `closedloop.csv`. A
/// failed entry is reported in the file and makes the command fail.
pub fn bench_closed_loop(doc: &ConfigDocument, args: &BenchClosedLoopArgs<'_>) -> Result<String, CliError> {
    let bench = doc.validate()?;
    let cl = &doc.bench.closed_loop;
    if cl.entries.is_empty() {
        return Err(CliError::Config("bench.closed_loop.entries is empty".into()));
    }
    let needed = cl.entries.iter().any(|e| e.controller == ControllerKind::Surrogate);
    let model = model_for(doc, args.model, needed)?;
    ensure_dir(args.out_dir)?;
    let scenarios: Vec<_> = cl
        .entries
        .iter()
        .map(|e| {
            (
                e.label.clone(),
                comparison_scenario(&bench, e.updating_period, e.controller, cl.sim_steps, cl.seed),
            )
        })
        .collect();
    let surrogates: Vec<_> = model.iter().map(|m| (TARGET_SUBSYSTEM, m)).collect();
    let rep = compare_closed_loop(&bench, &scenarios, &doc.solver, &doc.fixed_point, &surrogates)?;
    rep.write_csv(create(&args.out_dir.join("closedloop.csv"))?, args.with_wall_time)?;
    let out = rep.summary_table();
    let failed: Vec<&str> = rep
        .entries
        .iter()
        .filter(|e| e.outcome.is_err())
        .map(|e| e.label.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Assertion(format!("closed-loop runs failed: {}\n{out}", failed.join(", "))));
    }
    Ok(out)
}

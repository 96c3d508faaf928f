use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hierax::surrogate::{mlp_forward, Dataset, DatasetLayout, MlpParams};
use hierax_cli::config::ConfigDocument;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hierax(args: &[&str]) -> Output {
    hierax_env(args, None)
}

fn hierax_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hierax"));
    cmd.args(args).env_remove("HIERAX_SEED").env("COLUMNS", "100");
    if let Some(s) = seed {
        cmd.env("HIERAX_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SHORT_SIM: &str = "[scenario]\nsim_steps = 24\nupdating_period = 1.0\n";

const GOLDEN: [(&str, &[&str]); 8] = [
    ("hierax", &["--help"]),
    ("simulate", &["simulate", "--help"]),
    ("gen-data", &["gen-data", "--help"]),
    ("train", &["train", "--help"]),
    ("bench", &["bench", "--help"]),
    ("bench-solvers", &["bench", "solvers", "--help"]),
    ("bench-closedloop", &["bench", "closedloop", "--help"]),
    ("config-echo", &["config", "echo", "--help"]),
];

#[test]
fn help_output_matches_golden_files() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for (name, args) in GOLDEN {
        let o = hierax(args);
        assert!(o.status.success(), "{name}");
        let path = dir.join(format!("help-{name}.txt"));
        if std::env::var_os("HIERAX_BLESS").is_some() {
            std::fs::write(&path, &o.stdout).unwrap();
        }
        let golden = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}", path.display()));
        assert_eq!(stdout(&o), golden, "help text of {name} changed");
    }
}

#[test]
fn every_flag_is_documented_in_help() {
    let flags: [(&[&str], &[&str]); 4] = [
        (&["simulate", "--help"], &["--config", "--out", "--model", "--no-wall-time", "--threads"]),
        (&["gen-data", "--help"], &["--config", "--out", "--records", "--seed", "--verify"]),
        (
            &["train", "--help"],
            &["--config", "--data", "--out", "--hidden", "--epochs", "--sweep", "--curve", "--no-wall-time"],
        ),
        (
            &["bench", "solvers", "--help"],
            &["--config", "--out", "--instances", "--assert-jbar-max", "--assert-jbar-min", "--no-wall-time"],
        ),
    ];
    for (args, expected) in flags {
        let text = stdout(&hierax(args));
        for f in expected {
            assert!(text.contains(f), "{args:?} help lacks {f}");
        }
    }
}

#[test]
fn unknown_key_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[fixed_point]\nalpha = 0.5\nbogus_key = 3\n");
    let out = dir.path().join("out");
    let o = hierax(&["simulate", "-c", s(&cfg), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("bogus_key"), "{err}");
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn invalid_values_and_seed_are_configuration_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[scenario]\nupdating_period = 0.7\n");
    let o = hierax(&["config", "echo", "-c", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("multiple"));
    assert_eq!(hierax_env(&["config", "echo"], Some("abc")).status.code(), Some(2));
    assert_eq!(hierax(&["config", "echo", "-c", "/nonexistent/c.toml"]).status.code(), Some(2));
    // a surrogate controller without a model
    let cfg = write(dir.path(), "s.toml", "[scenario]\ncontrollers = [\"surrogate\", \"exact_nmpc\"]\n");
    let o = hierax(&["simulate", "-c", s(&cfg), "-o", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.csv");
    let o = hierax(&["train", "-d", s(&missing), "-o", s(&dir.path().join("m.json"))]);
    assert_eq!(o.status.code(), Some(1));
    // diverging run: the bound is below the initial state norm
    let cfg = write(dir.path(), "c.toml", &format!("{SHORT_SIM}divergence_bound = 1e-3\n"));
    let o = hierax(&["simulate", "-c", s(&cfg), "-o", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn echo_is_canonical_and_round_trips() {
    let doc = ConfigDocument::default();
    let text = doc.canonical().unwrap();
    assert_eq!(ConfigDocument::parse(&text).unwrap(), doc);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[solver]\nn_max = 20\n[bench]\ninstances = 7\n");
    let once = stdout(&hierax(&["config", "echo", "-c", s(&cfg)]));
    let again_path = write(dir.path(), "again.toml", &once);
    let twice = stdout(&hierax(&["config", "echo", "-c", s(&again_path)]));
    assert_eq!(once, twice);
    let parsed = ConfigDocument::parse(&once).unwrap();
    assert_eq!(parsed.solver.n_max, 20);
    assert_eq!(parsed.bench.instances, 7);
    assert_eq!(parsed.fixed_point, doc.fixed_point);
}

#[test]
fn seed_variable_replaces_every_seed() {
    let text = stdout(&hierax_env(&["config", "echo"], Some("4242")));
    let doc = ConfigDocument::parse(&text).unwrap();
    assert_eq!(doc.scenario.seed, 4242);
    assert_eq!(doc.data.seed, 4242);
    assert_eq!(doc.surrogate.training.seed, 4242);
    assert_eq!(doc.bench.seed, 4242);
    assert_eq!(doc.bench.closed_loop.seed, 4242);
}

#[test]
fn simulate_writes_one_row_per_step_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        &format!(
            "{SHORT_SIM}disturbances = [{{ subsystem = 0, signal = {{ prbs = {{ lo = [-3.0], hi = [3.0], hold = [4, 40] }} }} }}]\n"
        ),
    );
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = hierax(&["simulate", "-c", s(&cfg), "-o", s(&out), "--no-wall-time", "--threads", threads]);
        assert!(o.status.success(), "{}", stderr(&o));
        (
            std::fs::read(out.join("trajectory.csv")).unwrap(),
            std::fs::read(out.join("summary.csv")).unwrap(),
        )
    };
    let a = run("a", "1");
    let b = run("b", "3");
    assert_eq!(a, b);
    let traj = String::from_utf8(a.0).unwrap();
    assert_eq!(traj.lines().count(), 25);
    assert!(!traj.lines().next().unwrap().contains("solve_time"));
    // with wall time the column is present
    let out = dir.path().join("w");
    assert!(hierax(&["simulate", "-c", s(&cfg), "-o", s(&out)]).status.success());
    let head = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(head.lines().next().unwrap().ends_with(",solve_time"));
    // another seed draws another disturbance
    let out = dir.path().join("seeded");
    let o = hierax_env(&["simulate", "-c", s(&cfg), "-o", s(&out), "--no-wall-time"], Some("77"));
    assert!(o.status.success());
    assert_ne!(std::fs::read(out.join("trajectory.csv")).unwrap(), traj.as_bytes());
}

/// Writes a dataset of `n` records and returns its path.
fn gen_data(dir: &Path, n: usize, extra: &[&str]) -> PathBuf {
    let cfg = write(dir, "data.toml", "[data]\nsteps_per_run = 40\n");
    let path = dir.join(format!("data-{n}.csv"));
    let n = n.to_string();
    let mut args = vec!["gen-data", "-c", s(&cfg), "-o", s(&path), "-n", &n, "--seed", "5"];
    args.extend(extra);
    let o = hierax(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    path
}

#[test]
fn gen_data_writes_header_and_rows_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen_data(dir.path(), 10, &["--verify"]);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 11);
    let bench = hierax::plant::build_benchmark();
    let layout = DatasetLayout::for_subsystem(&bench, 0);
    assert_eq!(text.lines().next().unwrap(), layout.header().join(","));
    let again = gen_data(dir.path(), 10, &[]);
    assert_eq!(std::fs::read(&again).unwrap(), text.as_bytes());
}

#[test]
fn trained_model_round_trips_and_reports_the_curve_minimum() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 60, &[]);
    let model = dir.path().join("m.json");
    let curve = dir.path().join("curve.csv");
    let o = hierax(&[
        "train", "-d", s(&data), "-o", s(&model), "--hidden", "6,5", "--epochs", "40", "--curve", s(&curve),
        "--no-wall-time",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = stdout(&o);
    assert!(!report.contains("training time"));

    let curve_text = std::fs::read_to_string(&curve).unwrap();
    let rows: Vec<Vec<f64>> = curve_text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().all(|r| r[1].is_finite() && r[2].is_finite()));
    let min_val = rows.iter().map(|r| r[2]).fold(f64::INFINITY, f64::min);
    let reported: f64 = report
        .lines()
        .find_map(|l| l.split("validation MSE ").nth(1))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((reported - min_val).abs() <= 1e-6 * min_val, "{reported} vs {min_val}");

    // the file reproduces the trained network on random inputs
    let params = MlpParams::load(&model).unwrap();
    let reloaded = MlpParams::from_json(&params.to_json().unwrap()).unwrap();
    assert_eq!(params, reloaded);
    let ds = Dataset::read_csv(std::fs::File::open(&data).unwrap()).unwrap();
    assert_eq!(params.n_in(), ds.layout.input_len());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let z: Vec<f64> = (0..params.n_in()).map(|_| rng.random_range(-50.0..50.0)).collect();
        assert_eq!(mlp_forward(&params, &z).unwrap(), mlp_forward(&reloaded, &z).unwrap());
    }
    // retraining reproduces the file
    let model2 = dir.path().join("m2.json");
    let o = hierax(&["train", "-d", s(&data), "-o", s(&model2), "--hidden", "6,5", "--epochs", "40"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&model2).unwrap());
}

#[test]
fn sweep_prints_three_structures() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 40, &[]);
    let model = dir.path().join("best.json");
    let o = hierax(&["train", "-d", s(&data), "-o", s(&model), "--sweep", "--epochs", "5", "--no-wall-time"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("NN-")).collect();
    assert_eq!(rows.len(), 3, "{text}");
    for (k, row) in rows.iter().enumerate() {
        assert!(row.starts_with(&format!("NN-{}-25", k + 1)));
    }
    let selected = text.lines().find_map(|l| l.strip_prefix("selected ")).unwrap();
    let layers: usize = selected[3..4].parse().unwrap();
    assert_eq!(MlpParams::load(&model).unwrap().n_hidden_layers(), layers);
}

#[test]
fn solver_bench_assertions_set_the_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let run = |extra: &[&str]| {
        let mut args = vec!["bench", "solvers", "-o", s(&out), "-n", "6", "--no-wall-time"];
        args.extend(extra);
        hierax(&args)
    };
    let ok = run(&["--assert-jbar-max", "105", "--assert-jbar-min", "99"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert!(stdout(&ok).contains("truncated gradient"));
    let first = std::fs::read(out.join("solvers.csv")).unwrap();
    assert_eq!(String::from_utf8(first.clone()).unwrap().lines().count(), 7);
    let bad = run(&["--assert-jbar-max", "50"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("J_bar"));
    assert_eq!(std::fs::read(out.join("solvers.csv")).unwrap(), first);
}

#[test]
fn closed_loop_bench_reports_every_entry() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 40, &[]);
    let model = dir.path().join("m.json");
    assert!(hierax(&["train", "-d", s(&data), "-o", s(&model), "--epochs", "20"]).status.success());
    let cfg = write(dir.path(), "c.toml", "[bench.closed_loop]\nsim_steps = 16\n");
    let out = dir.path().join("cl");
    let o = hierax(&["bench", "closedloop", "-c", s(&cfg), "-o", s(&out), "--model", s(&model), "--no-wall-time"]);
    // an untrained surrogate may diverge; a failed entry still lands in the file
    let text = std::fs::read_to_string(out.join("closedloop.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "label,controllers,updating_period,j_c_cl,updates,nonconverged_updates,error");
    assert!(lines[1].starts_with("exact_0.5s,exact_nmpc+exact_nmpc,0.5,"));
    let ok = lines[1..].iter().all(|l| l.ends_with(','));
    assert_eq!(o.status.success(), ok);
    // without a model the surrogate entries are a configuration error
    let o = hierax(&["bench", "closedloop", "-c", s(&cfg), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

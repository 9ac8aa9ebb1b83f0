use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emitterlab")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Value {
    let out = run(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"))
}

/// One cw and one pulsed simulation shared by the analysis tests.
struct Simulated {
    _dir: TempDir,
    cw: PathBuf,
    pulsed: PathBuf,
}

fn simulated() -> &'static Simulated {
    static SIM: OnceLock<Simulated> = OnceLock::new();
    SIM.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let cw = dir.path().join("cw");
        let pulsed = dir.path().join("pulsed");
        run_ok(&["simulate", "--config", s(&golden("simulate.json")), "--out", s(&cw)]);
        run_ok(&["simulate", "--config", s(&golden("simulate_pulsed.json")), "--out", s(&pulsed)]);
        Simulated { _dir: dir, cw, pulsed }
    })
}

fn check_manifest(out: &Path, subcommand: &str) -> Value {
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["tool"], "emitterlab");
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(m["subcommand"], subcommand);
    assert!(m["config"].is_object());
    m
}

fn assert_rounded(v: &Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap();
            let r: f64 = format!("{x:.11e}").parse().unwrap();
            assert_eq!(x, r, "{x} has more than 12 significant digits");
        }
        Value::Array(a) => a.iter().for_each(assert_rounded),
        Value::Object(m) => m.values().for_each(assert_rounded),
        _ => {}
    }
}

#[test]
fn simulate_writes_channels_and_manifest() {
    let sim = simulated();
    for f in ["ch_a.pts", "ch_b.pts", "manifest.json", "result.json"] {
        assert!(sim.cw.join(f).exists(), "{f}");
    }
    let m = check_manifest(&sim.cw, "simulate");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["duration_ms"], 5.0);
    assert!(m["config"].get("seed").is_none());
    let r = read_json(&sim.cw.join("result.json"));
    assert!(r["counts_a"].as_u64().unwrap() > 10_000);
    assert_rounded(&r);
    let head = fs::read(sim.cw.join("ch_a.pts")).unwrap();
    assert_eq!(&head[..4], b"PTS1");
    assert_eq!(u32::from_le_bytes(head[4..8].try_into().unwrap()), 1);
    assert_eq!(u64::from_le_bytes(head[8..16].try_into().unwrap()), r["counts_a"].as_u64().unwrap());
}

#[test]
fn simulate_is_deterministic_and_seed_flag_wins() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let cfg = golden("simulate.json");
    let args = |out: &Path, seed: &str| {
        run_ok(&["simulate", "--config", s(&cfg), "--duration-ms", "1", "--seed", seed, "--out", s(out)]);
    };
    args(&a, "11");
    args(&b, "11");
    args(&c, "12");
    for f in ["ch_a.pts", "ch_b.pts", "result.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("ch_a.pts")).unwrap(), fs::read(c.join("ch_a.pts")).unwrap());
    let m = read_json(&a.join("manifest.json"));
    assert_eq!(m["seed"], 11);
    assert_eq!(m["config"]["duration_ms"], 1.0);
}

#[test]
fn correlate_writes_histogram() {
    let sim = simulated();
    let out = TempDir::new().unwrap();
    let o = out.path().join("cor");
    let r = run_ok(&[
        "correlate",
        "--a",
        s(&sim.cw.join("ch_a.pts")),
        "--b",
        s(&sim.cw.join("ch_b.pts")),
        "--bin-ps",
        "100",
        "--window-ns",
        "400",
        "--out",
        s(&o),
    ]);
    check_manifest(&o, "correlate");
    assert_eq!(r["bin_width_ps"], 100);
    assert_eq!(r["bins"], 7999);
    assert!(f(&r["g2_zero_bin"]) < 0.3);
    let csv = fs::read_to_string(o.join("g2.csv")).unwrap();
    assert!(csv.starts_with("tau_ps,counts,g2,g2_err\n"));
    assert_eq!(csv.lines().count(), 8000);
    assert!(o.join("g2.svg").exists());
}

#[test]
fn fit_g2_from_channels_and_histogram() {
    let sim = simulated();
    let out = TempDir::new().unwrap();
    let free = out.path().join("free");
    let r = run_ok(&[
        "fit-g2",
        "--config",
        s(&golden("fit_g2.json")),
        "--a",
        s(&sim.cw.join("ch_a.pts")),
        "--b",
        s(&sim.cw.join("ch_b.pts")),
        "--out",
        s(&free),
    ]);
    check_manifest(&free, "fit-g2");
    assert_eq!(r["fit"]["fit"]["converged"], true);
    let g0 = f(&r["fit"]["g2_zero"]);
    assert!((0.02..0.12).contains(&g0), "{g0}");
    assert!(f(&r["fit"]["g2_zero_sigma"]) > 0.0);
    assert_rounded(&r);

    let cons = out.path().join("cons");
    let r = run_ok(&["fit-g2", "--histogram", s(&free.join("g2.csv")), "--mode", "constrained", "--out", s(&cons)]);
    assert_eq!(r["fit"]["mode"], "constrained");
    assert_eq!(f(&r["fit"]["g2_zero"]), 0.0);
    assert!(!cons.join("g2.csv").exists());
    assert!(cons.join("g2_fit.svg").exists());
}

#[test]
fn pulsed_g2_on_pulsed_stream() {
    let sim = simulated();
    let out = TempDir::new().unwrap();
    let r = run_ok(&[
        "pulsed-g2",
        "--config",
        s(&golden("pulsed_g2.json")),
        "--a",
        s(&sim.pulsed.join("ch_a.pts")),
        "--b",
        s(&sim.pulsed.join("ch_b.pts")),
        "--out",
        s(out.path()),
    ]);
    check_manifest(out.path(), "pulsed-g2");
    assert_eq!(r["n_peaks"], 10);
    assert_eq!(r["peak_areas"].as_array().unwrap().len(), 21);
    assert!(f(&r["g2_zero"]) < 0.05);
}

#[test]
fn trace_writes_counts() {
    let sim = simulated();
    let out = TempDir::new().unwrap();
    let r = run_ok(&[
        "trace",
        "--config",
        s(&golden("trace.json")),
        "--a",
        s(&sim.cw.join("ch_a.pts")),
        "--out",
        s(out.path()),
    ]);
    check_manifest(out.path(), "trace");
    assert_eq!(r["counts"].as_array().unwrap().len(), 4);
    assert_eq!(r["blinking"], false);
    let csv = fs::read_to_string(out.path().join("trace.csv")).unwrap();
    assert!(csv.starts_with("t_ms,counts\n"));
}

#[test]
fn fit_saturation_recovers_parameters() {
    let out = TempDir::new().unwrap();
    let r = run_ok(&["fit-saturation", "--data", s(&golden("saturation.csv")), "--out", s(out.path())]);
    check_manifest(out.path(), "fit-saturation");
    assert!((f(&r["params"]["p_sat"]) / 1.5 - 1.0).abs() < 0.1, "{r}");
    assert!((f(&r["params"]["i_inf"]) / 1.2e6 - 1.0).abs() < 0.05, "{r}");
    assert!(out.path().join("saturation.svg").exists());
}

#[test]
fn fit_lifetime_recovers_decay_time() {
    let out = TempDir::new().unwrap();
    let r = run_ok(&[
        "fit-lifetime",
        "--config",
        s(&golden("fit_lifetime.json")),
        "--data",
        s(&golden("decay.csv")),
        "--out",
        s(out.path()),
    ]);
    check_manifest(out.path(), "fit-lifetime");
    assert!((f(&r["tau_ps"]) / 730.0 - 1.0).abs() < 0.05, "{r}");
}

#[test]
fn fit_polarization_converges() {
    let out = TempDir::new().unwrap();
    let r = run_ok(&["fit-polarization", "--data", s(&golden("polarization.csv")), "--out", s(out.path())]);
    check_manifest(out.path(), "fit-polarization");
    assert_eq!(r["fit"]["converged"], true);
    let v = f(&r["visibility"]);
    assert!((v - 2000.0 / 2600.0).abs() < 0.03, "{v}");
}

#[test]
fn rates_with_lifetime_check() {
    let out = TempDir::new().unwrap();
    let r = run_ok(&[
        "rates",
        "--config",
        s(&golden("rates.json")),
        "--series",
        s(&golden("powers.csv")),
        "--out",
        s(out.path()),
    ]);
    check_manifest(out.path(), "rates");
    let rates = &r["rates"];
    assert!((f(&rates["k21"]) / 1.23866 - 1.0).abs() < 0.01);
    assert!((f(&rates["k23"]) / 0.05 - 1.0).abs() < 0.05);
    assert!((f(&rates["eta"]) / 0.4 - 1.0).abs() < 0.05);
    assert_eq!(rates["k31"].as_array().unwrap().len(), 11);
    let chk = &r["lifetime_check"];
    assert!((f(&chk["implied_ns"]) - 0.776).abs() < 0.005);
    assert_eq!(f(&chk["measured_ns"]), 0.736);
    assert_eq!(chk["roughly_consistent"], true);
}

#[test]
fn budget_values() {
    let out = TempDir::new().unwrap();
    let r = run_ok(&["budget", "--config", s(&golden("budget.json")), "--out", s(out.path())]);
    check_manifest(out.path(), "budget");
    assert_eq!(r, read_json(&out.path().join("result.json")));
    assert!((f(&r["half_angle_deg"]) - 62.643).abs() < 1e-3);
    assert!((f(&r["quantum_efficiency"]["eta_q"]) - 0.1085).abs() < 1e-3);
    assert!((f(&r["enhancement"]["value"]) - 1.643).abs() < 1e-3);
}

#[test]
fn zpl_distribution_and_calibration() {
    let out = TempDir::new().unwrap();
    let a = out.path().join("a");
    let r = run_ok(&["zpl", "--config", s(&golden("zpl.json")), "--out", s(&a)]);
    check_manifest(&a, "zpl");
    assert_eq!(r["positions"], 33);
    assert_eq!(r["entries"].as_array().unwrap().len(), 33);
    let span = r["span_nm"].as_array().unwrap();
    assert!(f(&span[0]) < f(&span[1]));
    let csv = fs::read_to_string(a.join("zpl.csv")).unwrap();
    assert!(csv.starts_with("defect_index,zpl_nm,binding_ev\n"));
    assert!(fs::read_to_string(a.join("zpl_histogram.csv")).unwrap().starts_with("lambda_nm,count\n"));

    let b = out.path().join("b");
    let r = run_ok(&["zpl", "--config", s(&golden("zpl_calibrate.json")), "--out", s(&b)]);
    let c = &r["calibration"]["cluster_nm"];
    assert!((f(&c[0]) - 1100.0).abs() < 30.0 && (f(&c[1]) - 1350.0).abs() < 30.0, "{c}");
    let stack_override = out.path().join("c");
    run_ok(&["zpl", "--config", s(&golden("zpl.json")), "--stack", "hhcch", "--out", s(&stack_override)]);
    assert_eq!(read_json(&stack_override.join("manifest.json"))["config"]["stack"], "hhcch");
}

#[test]
fn input_errors_exit_2_with_distinct_messages() {
    let dir = TempDir::new().unwrap();
    let bad_json = dir.path().join("bad.json");
    fs::write(&bad_json, "{\"bin_ps\": 100,").unwrap();
    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, "{\"bin_pz\": 100}").unwrap();
    let out = dir.path().join("out");
    let decay = golden("decay.csv");
    let cases: Vec<(Vec<&str>, &str)> = vec![
        (vec!["frobnicate"], "unrecognized subcommand"),
        (vec!["correlate", "--config", s(&bad_json)], "malformed config"),
        (vec!["correlate", "--config", s(&unknown)], "unknown field"),
        (vec!["correlate", "--config", "/nonexistent/cfg.json"], "cannot read config"),
        (
            vec!["correlate", "--a", "/nonexistent/a.pts", "--b", "/nonexistent/b.pts", "--out", s(&out)],
            "cannot read timestamps",
        ),
        (vec!["fit-saturation", "--data", "/nonexistent/sat.csv", "--out", s(&out)], "cannot read input"),
        (vec!["fit-saturation", "--data", s(&decay), "--out", s(&out)], "malformed CSV"),
    ];
    for (args, msg) in cases {
        let o = run(&args);
        let err = String::from_utf8_lossy(&o.stderr);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {err}");
        assert!(err.contains(msg), "{args:?}: {err}");
    }
}

#[test]
fn bad_thread_count_is_an_input_error() {
    let out = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_emitterlab"))
        .args(["budget", "--config", s(&golden("budget.json")), "--out", s(out.path())])
        .env("EMITTERLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("EMITTERLAB_THREADS"));
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = TempDir::new().unwrap();
    let mut results = vec![];
    for n in ["1", "3"] {
        let out = dir.path().join(n);
        let o = Command::new(env!("CARGO_BIN_EXE_emitterlab"))
            .args(["zpl", "--config", s(&golden("zpl.json")), "--out", s(&out)])
            .env("EMITTERLAB_THREADS", n)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
        results.push(fs::read(out.join("result.json")).unwrap());
    }
    assert_eq!(results[0], results[1]);
}

#[test]
fn non_convergence_exits_1_and_still_writes() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("nc.json");
    fs::write(&cfg, "{\"fit\": {\"max_iter\": 1}}").unwrap();
    let out = dir.path().join("out");
    let o = run(&["fit-saturation", "--config", s(&cfg), "--data", s(&golden("saturation.csv")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("did not converge"));
    let r = read_json(&out.join("result.json"));
    assert_eq!(r["fit"]["converged"], false);
    assert!(out.join("manifest.json").exists());
}

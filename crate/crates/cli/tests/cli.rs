//! End-to-end behaviour of the `cqed` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn cqed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cqed"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn cqed_threads(threads: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cqed"))
        .env("CQED_THREADS", threads)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn simulate(dir: &Path, cfg: &str, seed: &str, cycles: &str, out: &str) -> Output {
    let out = dir.join(out);
    cqed(&[
        "simulate",
        "--config",
        cfg,
        "--seed",
        seed,
        "--cycles",
        cycles,
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn simulate_writes_outputs_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "high.cfg", "atom_rate_hz = 5900\n");
    for run in ["run1", "run2"] {
        let o = simulate(tmp.path(), &cfg, "1", "40", run);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["clicks.csv", "truth.csv", "manifest.txt", "config.cfg"] {
        let a = fs::read(tmp.path().join("run1").join(file)).unwrap();
        let b = fs::read(tmp.path().join("run2").join(file)).unwrap();
        if file == "manifest.txt" {
            // differs only in the out path
            let (a, b) = (String::from_utf8(a).unwrap(), String::from_utf8(b).unwrap());
            assert_eq!(a.replace("run1", "runX"), b.replace("run2", "runX"));
        } else {
            assert_eq!(a, b, "{file}");
        }
    }
    let clicks = fs::read_to_string(tmp.path().join("run1/clicks.csv")).unwrap();
    assert!(clicks.starts_with(
        "# cqed-clicks v1, tau_period_ns=4000, tau_pump_ns=2000, pulses_per_cycle=2000, cycles=40, seed=1\n"
    ));
    let truth = fs::read_to_string(tmp.path().join("run1/truth.csv")).unwrap();
    assert!(truth.starts_with("cycle_id,pulse_index,atom_id,emitted\n"));
    assert!(truth.lines().skip(1).any(|l| l.ends_with(",1")));
    let manifest = fs::read_to_string(tmp.path().join("run1/manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 1") && manifest.contains("cycles = 40"));
    // no temp files left behind
    assert!(fs::read_dir(tmp.path().join("run1"))
        .unwrap()
        .all(|e| !e.unwrap().file_name().to_string_lossy().starts_with('.')));
}

#[test]
fn worker_count_does_not_change_output() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "low.cfg", "atom_rate_hz = 1300\n");
    let mut streams = Vec::new();
    for threads in ["1", "4"] {
        let out = tmp.path().join(format!("t{threads}"));
        let o = cqed_threads(
            threads,
            &["simulate", "--config", &cfg, "--seed", "9", "--cycles", "64", "--out", out.to_str().unwrap()],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        streams.push(fs::read(out.join("clicks.csv")).unwrap());
    }
    assert_eq!(streams[0], streams[1]);
    let o = cqed_threads("zero", &["analyze", "estimators", "--ibar", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn truth_can_be_reduced() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "c.cfg", "atom_rate_hz = 3000\n");
    let out = tmp.path().join("r");
    let o = cqed(&[
        "simulate", "--config", &cfg, "--cycles", "5", "--out", out.to_str().unwrap(), "--truth", "emitted",
    ]);
    assert!(o.status.success());
    let truth = fs::read_to_string(out.join("truth.csv")).unwrap();
    assert!(truth.lines().skip(1).all(|l| l.ends_with(",1")));
    let out = tmp.path().join("n");
    let o = cqed(&[
        "simulate", "--config", &cfg, "--cycles", "5", "--out", out.to_str().unwrap(), "--truth", "none",
    ]);
    assert!(o.status.success());
    assert!(!out.join("truth.csv").exists());
}

#[test]
fn bad_configs_and_arguments_exit_2() {
    let tmp = TempDir::new().unwrap();
    let good = write_cfg(tmp.path(), "good.cfg", "");
    let o = simulate(tmp.path(), &good, "1", "0", "x");
    assert_eq!(o.status.code(), Some(2));

    let bad = write_cfg(tmp.path(), "bad.cfg", "qe = 0.5\nwaist_um = 40\n");
    let o = simulate(tmp.path(), &bad, "1", "3", "x");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("waist_um"), "{}", stderr(&o));

    let o = simulate(tmp.path(), "/nonexistent/cfg", "1", "3", "x");
    assert_eq!(o.status.code(), Some(2));
    let o = cqed(&["simulate", "--cycles", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_streams_exit_3_with_line_number() {
    let tmp = TempDir::new().unwrap();
    let header = "# cqed-clicks v1, tau_period_ns=4000, tau_pump_ns=2000, pulses_per_cycle=10, cycles=2, seed=0\n";
    let bad_row = write_cfg(tmp.path(), "rows.csv", &format!("{header}0,1,5\n1,2,7\n1,2,oops\n"));
    let o = cqed(&["analyze", "g2", "--in", &bad_row, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));

    let version = write_cfg(
        tmp.path(),
        "v2.csv",
        "# cqed-clicks v2, tau_period_ns=4000, tau_pump_ns=2000, pulses_per_cycle=10, cycles=2, seed=0\n",
    );
    let o = cqed(&["analyze", "conditional", "--in", &version]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn estimators_print_table_values() {
    let o = cqed(&["analyze", "estimators", "--ibar", "1976", "--inoise", "446"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "g2_min=0.400 g2_max=1.600");
    let o = cqed(&["analyze", "estimators", "--ibar", "783", "--inoise", "446"]);
    assert_eq!(stdout(&o).trim(), "g2_min=0.815 g2_max=1.185");
    let o = cqed(&["analyze", "estimators", "--ibar", "0", "--inoise", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

fn read_efficiency(path: &Path) -> Vec<(f64, f64, f64)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# integrator"));
    assert_eq!(lines.next().unwrap(), "g_eff_hz,probability,escape_weighted");
    lines
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[0], v[1], v[2])
        })
        .collect()
}

#[test]
fn efficiency_table_endpoints() {
    let tmp = TempDir::new().unwrap();
    let fine = tmp.path().join("fine.csv");
    let coarse = tmp.path().join("coarse.csv");
    for (grid, path) in [("65", &fine), ("2", &coarse)] {
        let o = cqed(&["efficiency", "--grid", grid, "--out", path.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let fine = read_efficiency(&fine);
    let coarse = read_efficiency(&coarse);
    assert_eq!(fine.len(), 65);
    assert_eq!(fine[0].1, 0.0);
    assert_eq!(fine[0], coarse[0]);
    assert_eq!(fine[64], coarse[1]);
    let last = fine[64];
    assert_eq!(last.0, 2.5e6);
    assert!((last.1 - 0.616).abs() <= 0.08 || (last.2 - 0.616).abs() <= 0.08);

    let o = cqed(&[
        "efficiency", "--grid", "3", "--max-steps", "5", "--out", tmp.path().join("x.csv").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn analyses_write_reports_without_touching_input() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "high.cfg", "atom_rate_hz = 5900\n");
    let o = simulate(tmp.path(), &cfg, "3", "200", "run");
    assert!(o.status.success());
    let clicks = tmp.path().join("run/clicks.csv");
    let before = fs::read(&clicks).unwrap();
    let rep = tmp.path().join("rep");
    let (c, r) = (clicks.to_str().unwrap(), rep.to_str().unwrap());

    let cases: &[(&[&str], &str, &str)] = &[
        (&["analyze", "g2", "--in", c, "--out", r, "--bin-ns", "100", "--range-us", "40", "--svg"], "g2.csv", "lag_ns,g2,raw_pairs,sigma"),
        (&["analyze", "pulse-avg", "--in", c, "--out", r], "pulse_avg.csv", "phase_ns,rate_hz"),
        (&["analyze", "background", "--in", c, "--out", r], "background.csv", "tau_ns,g2_background"),
        (&["analyze", "conditional", "--in", c, "--out", r, "--delta-range", "10", "--svg"], "conditional_g2.csv", "delta_i,g2,n_events,sigma"),
        (&["analyze", "pdeltak", "--in", c, "--out", r], "pdeltak.csv", "delta_k,p_bar"),
    ];
    for (args, file, header) in cases {
        let o = cqed(args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        let text = fs::read_to_string(rep.join(file)).unwrap();
        assert_eq!(text.lines().next().unwrap(), *header);
    }
    assert_eq!(fs::read_to_string(rep.join("g2.csv")).unwrap().lines().count(), 801);
    assert_eq!(fs::read_to_string(rep.join("conditional_g2.csv")).unwrap().lines().count(), 22);
    assert!(fs::read_to_string(rep.join("g2.svg")).unwrap().contains("</svg>"));
    let summary = fs::read_to_string(rep.join("conditional_summary.txt")).unwrap();
    for key in ["n_bar_P", "n_bar_N", "p_atom", "M ="] {
        assert!(summary.contains(key), "{summary}");
    }
    assert!(rep.join("manifest_conditional.txt").exists());
    assert_eq!(fs::read(&clicks).unwrap(), before);

    let o = cqed(&["analyze", "estimators", "--in", c]);
    assert!(stdout(&o).starts_with("g2_min="));
}

#[test]
fn calibrate_writes_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "base.cfg", "");
    let out = tmp.path().join("cal.cfg");
    let o = cqed(&[
        "calibrate", "--config", &cfg, "--target-hz", "1530", "--pilot-cycles", "500", "--write", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("atom_rate_hz="));
    let text = fs::read_to_string(out).unwrap();
    let rate: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("atom_rate_hz = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(rate > 1000.0);
    let o = cqed(&["calibrate", "--config", &cfg, "--target-hz", "1e6"]);
    assert_eq!(o.status.code(), Some(2));
}

//! Process-level checks of the experiment runner: artifact layout, exit
//! codes, determinism of reruns, and the resolved-config echo.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_probin"))
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name))
        .unwrap_or_else(|e| panic!("missing artifact {name}: {e}"))
}

fn write_cfg(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn solve_writes_the_artifact_set_and_reruns_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        "[run]\nsubcommand = solve\n[domain]\ncells = 64\n",
    );
    let out1 = tmp.path().join("a");
    let out2 = tmp.path().join("b");
    for out in [&out1, &out2] {
        let st = bin()
            .args(["solve", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert_eq!(st.code(), Some(0));
    }
    // the float column checked per file (integer columns are exempt)
    let float_col = [("eigenpair.csv", 1usize), ("summary.csv", 0), ("flux.csv", 1)];
    for (name, col) in float_col {
        let a = read(&out1, name);
        assert_eq!(a, read(&out2, name), "{name} differs between reruns");
        // one-line header, float cells in full-precision scientific form
        let mut lines = a.lines();
        let header = lines.next().unwrap();
        assert!(header.chars().all(|c| c.is_ascii_alphabetic() || c == ',' || c == '_'));
        for line in lines {
            let cell = line.split(',').nth(col).unwrap();
            assert!(
                cell.contains('e') && cell.contains('.'),
                "{name}: cell `{cell}` is not scientific notation"
            );
            let mantissa = cell.trim_start_matches('-');
            let digits = mantissa.split('e').next().unwrap().replace('.', "").len();
            assert_eq!(digits, 17, "{name}: cell `{cell}` is not 17 significant digits");
        }
    }
    let manifest = read(&out1, "run_manifest.txt");
    assert!(manifest.contains("status = ok"));
    assert!(manifest.contains("config_sha256 = "));
    assert!(manifest.contains("seed = 0"));

    // replaying into the same directory reproduces every byte, manifest aside
    let before = read(&out1, "resolved_config");
    let st = bin()
        .args(["solve", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out1)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert_eq!(before, read(&out1, "resolved_config"));
}

#[test]
fn the_resolved_config_echo_is_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        "[run]\nsubcommand = coating-sweep\n[domain]\ncells = 48\n\
         [coating]\nepsilons = 0.1,0.05\nlayer_cells = 4\n",
    );
    let out1 = tmp.path().join("a");
    let out2 = tmp.path().join("b");
    let st = bin()
        .args(["coating-sweep", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out1)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    // feed the echo back in as the config for a second run
    let st = bin()
        .args(["coating-sweep", "--config"])
        .arg(out1.join("resolved_config"))
        .arg("--out")
        .arg(&out2)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert_eq!(read(&out1, "sweep.csv"), read(&out2, "sweep.csv"));
    assert_eq!(read(&out1, "rate.txt"), read(&out2, "rate.txt"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    // config error: range violation
    let bad_p = write_cfg(tmp.path(), "[run]\nsubcommand = solve\n[problem]\np = 0.5\n");
    let out = tmp.path().join("badp");
    let o = bin()
        .args(["solve", "--config"])
        .arg(&bad_p)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("p must lie in (1, \u{221e})"), "stderr: {msg}");

    // config error: unknown key, named in the message
    let bad_key = write_cfg(tmp.path(), "[run]\nsubcommand = solve\n[solver]\ntol = 1\n");
    let o = bin()
        .args(["solve", "--config"])
        .arg(&bad_key)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`solver.tol`"));

    // solver non-convergence, recorded in the manifest with its code
    let nc = write_cfg(
        tmp.path(),
        "[run]\nsubcommand = solve\n[domain]\ncells = 64\n[solver]\nmax_outer = 2\n",
    );
    let out = tmp.path().join("nc");
    let st = bin()
        .args(["solve", "--config"])
        .arg(&nc)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
    let manifest = read(&out, "run_manifest.txt");
    assert!(manifest.contains("status = error"));
    assert!(manifest.contains("error_code = NO_CONVERGENCE"));
    assert!(manifest.contains("error_phase = run"));

    // unknown flag and unknown limits mode are config errors
    let st = bin().args(["solve", "--no-such-flag"]).status().unwrap();
    assert_eq!(st.code(), Some(3));
    let st = bin().args(["limits-scan", "nope"]).status().unwrap();
    assert_eq!(st.code(), Some(3));
    let st = bin().arg("--help").status().unwrap();
    assert_eq!(st.code(), Some(0));
}

#[test]
fn seed_flag_controls_noise_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        "[run]\nsubcommand = reconstruct\n[domain]\ncells = 48\n\
         [reconstruct]\nk = 1\nh_true = 1.3\nh_init = 0.8\nreg_weight = 1e-10\nnoise_flux = 0.01\n",
    );
    let run = |seed: &str, out: &Path| {
        let st = bin()
            .args(["reconstruct", "--config"])
            .arg(&cfg)
            .args(["--seed", seed, "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert_eq!(st.code(), Some(0));
    };
    let (o1, o2, o3) = (
        tmp.path().join("s0"),
        tmp.path().join("s0-again"),
        tmp.path().join("s1"),
    );
    run("0", &o1);
    run("0", &o2);
    run("1", &o3);
    assert_eq!(read(&o1, "c_hat.csv"), read(&o2, "c_hat.csv"));
    assert_ne!(
        read(&o1, "c_hat.csv"),
        read(&o3, "c_hat.csv"),
        "different seeds must draw different noise"
    );
    let echo = read(&o3, "resolved_config");
    assert!(echo.contains("seed = 1"), "echo:\n{echo}");
}

#[test]
fn threads_resolution_order_is_env_then_flag_then_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        "[run]\nsubcommand = limits-scan\nthreads = 4\n[domain]\ncells = 32\n\
         [limits]\nmode = bv\n",
    );
    let out = tmp.path().join("env-wins");
    let st = bin()
        .args(["limits-scan", "bv", "--config"])
        .arg(&cfg)
        .args(["--threads", "2", "--out"])
        .arg(&out)
        .env("PROBIN_THREADS", "1")
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert!(read(&out, "resolved_config").contains("threads = 1"));

    let out = tmp.path().join("flag-wins");
    let st = bin()
        .args(["limits-scan", "bv", "--config"])
        .arg(&cfg)
        .args(["--threads", "2", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert!(read(&out, "resolved_config").contains("threads = 2"));

    let out = tmp.path().join("file-wins");
    let st = bin()
        .args(["limits-scan", "bv", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert!(read(&out, "resolved_config").contains("threads = 4"));

    let st = bin()
        .args(["limits-scan", "bv"])
        .env("PROBIN_THREADS", "many")
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
}

#[test]
fn limit_scans_write_their_mode_specific_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let base = write_cfg(tmp.path(), "[run]\nsubcommand = limits-scan\n[domain]\ncells = 32\n");

    let out = tmp.path().join("p1");
    assert_eq!(
        bin()
            .args(["limits-scan", "p1", "--config"])
            .arg(&base)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let scan = read(&out, "scan.csv");
    assert!(scan.starts_with("p,sup_deviation\n"));

    let out = tmp.path().join("pinf");
    assert_eq!(
        bin()
            .args(["limits-scan", "pinf", "--config"])
            .arg(&base)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    assert_eq!(read(&out, "classification.txt"), "NEUMANN_LIMIT\n");

    let out = tmp.path().join("cont");
    assert_eq!(
        bin()
            .args(["limits-scan", "continuity", "--config"])
            .arg(&base)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    assert!(read(&out, "scan.csv").starts_with("p,lambda\n"));
    let jumps = read(&out, "jumps.txt");
    assert!(jumps.contains("max_adjacent_jump = "));
    assert!(jumps.contains("jump_anomaly = "));

    let out = tmp.path().join("bv");
    assert_eq!(
        bin()
            .args(["limits-scan", "bv", "--config"])
            .arg(&base)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let summary = read(&out, "summary.csv");
    let min_line = summary.lines().nth(1).unwrap();
    let min: f64 = min_line.split(',').next().unwrap().parse().unwrap();
    assert_eq!(min, 2.0, "step-family minimum must be exactly 2");

    let out = tmp.path().join("linf");
    assert_eq!(
        bin()
            .args(["limits-scan", "linf", "--config"])
            .arg(&base)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let summary = read(&out, "summary.csv");
    let min: f64 = summary
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(min, 1.0, "knee-family minimum must be exactly 1");
}

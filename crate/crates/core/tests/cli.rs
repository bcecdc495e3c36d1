//! Process-level checks of the installed binary: exit statuses and
//! reproducibility across separate runs.

use std::path::Path;
use std::process::{Command, Output};

fn tlsfluct(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlsfluct"))
        .args(["--output-dir", dir.to_str().unwrap()])
        .args(args)
        .output()
        .unwrap()
}

const SHORT_RUN: &str = r#"{"seed": 11, "schedule": {"total_duration": 14400}}"#;

fn config(dir: &Path) -> String {
    let p = dir.join("run.json");
    std::fs::write(&p, SHORT_RUN).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn exit_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = tlsfluct(d, &["simulate", "sweep"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));

    let bad = tlsfluct(d, &["fit", "sweep", "--input", d.join("missing.csv").to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error:"));

    let flat = d.join("flat.csv");
    let mut body = String::from("freq_hz,s21_re,s21_im\n");
    for k in 0..64 {
        body.push_str(&format!("{},1,0\n", 5e9 + k as f64 * 1e3));
    }
    std::fs::write(&flat, body).unwrap();
    std::fs::write(
        tlsfluct::io::sidecar_path(&flat),
        r#"{"power_dbm": 0, "temperature_k": 0, "timestamp_s": 0, "resonator_id": ""}"#,
    )
    .unwrap();
    let nc = tlsfluct(d, &["fit", "sweep", "--input", flat.to_str().unwrap()]);
    assert_eq!(nc.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&nc.stderr).contains("did not converge"));
}

#[test]
fn identical_config_and_seed_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (d, threads) in [(&a, "1"), (&b, "3")] {
        let cfg = config(d.path());
        let out = tlsfluct(d.path(), &["--config", &cfg, "--threads", threads, "simulate", "interleaved"]);
        assert_eq!(out.status.code(), Some(0));
    }
    // config.json records the output directory itself, so it is left out
    for f in ["lp.csv", "mp.csv", "hp.csv", "truth.csv", "fdtls.csv", "lp.csv.meta.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }

    let c = tempfile::tempdir().unwrap();
    let cfg = config(c.path());
    tlsfluct(c.path(), &["--config", &cfg, "--seed", "12", "simulate", "interleaved"]);
    assert_ne!(
        std::fs::read(a.path().join("lp.csv")).unwrap(),
        std::fs::read(c.path().join("lp.csv")).unwrap()
    );
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn mcs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcs"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = mcs(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Data rows of a CSV artifact, skipping the provenance comment and column header.
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# mcs "));
    lines
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

fn write_spec(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL_SIM: &str = r#"
[market]
regime = "deterministic"
horizon = 10.0
rate = { kind = "constant", value = 0.02 }
drift = [{ kind = "constant", value = 0.07 }]
vol = [[{ kind = "constant", value = 0.2 }]]

[strategy]
regime = "deterministic"
pi = [{ kind = "constant", value = 0.6 }]

[sim]
paths = 2000
steps = 200
"#;

#[test]
fn factor_starts_at_the_constant_rate_annuity() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("f");
    let cfg = configs().join("benchmark.toml");
    run_ok(&[
        "factor",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let rows = rows(&out.join("factor.csv"));
    let b0 = (1.0 - (-0.03f64 * 20.0).exp()) / 0.03;
    assert_eq!(num(&rows[0][0]), 0.0);
    assert!((num(&rows[0][2]) - b0).abs() < 1e-12 * b0);
    assert_eq!(num(&rows.last().unwrap()[2]), 0.0);
}

#[test]
fn discrete_zero_rate_counts_payments() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let cfg = configs().join("discrete_fixed.toml");
    run_ok(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let a: Vec<f64> = rows(&out.join("recursion.csv")).iter().map(|r| num(&r[2])).collect();
    assert_eq!(a, vec![3.0, 2.0, 1.0]);
}

#[test]
fn pde_refinement_on_the_annuity_hedge() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p");
    let cfg = configs().join("annuity_hedge.toml");
    run_ok(&[
        "pde",
        "--config",
        cfg.to_str().unwrap(),
        "--refine",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    let table = rows(&out.join("refinement.csv"));
    assert_eq!(table.len(), 4);
    for r in &table[1..] {
        let ratio = num(&r[3]);
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    }
    assert!(num(&table[3][2]) <= 1e-3);
}

#[test]
fn same_spec_and_seed_give_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "s.toml", SMALL_SIM);
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    for (d, seed) in dirs.iter().zip(["5", "5", "6"]) {
        run_ok(&[
            "simulate",
            "--config",
            &spec,
            "--seed",
            seed,
            "--out",
            d.to_str().unwrap(),
        ]);
    }
    let mut names: Vec<_> = fs::read_dir(&dirs[0])
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 5);
    for name in &names {
        assert_eq!(
            fs::read(dirs[0].join(name)).unwrap(),
            fs::read(dirs[1].join(name)).unwrap(),
            "{name:?}"
        );
    }
    assert_ne!(
        fs::read(dirs[0].join("report.csv")).unwrap(),
        fs::read(dirs[2].join("report.csv")).unwrap()
    );
    let manifest = fs::read_to_string(dirs[0].join("manifest.toml")).unwrap();
    assert!(manifest.contains("spec_sha256"));
    assert!(manifest.contains("martingale_passes = true"));
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(mcs(&["simulate"]).status.code(), Some(2));
    let typo = write_spec(
        tmp.path(),
        "typo.toml",
        &SMALL_SIM.replace("paths = 2000", "pathz = 2000"),
    );
    let out = mcs(&[
        "simulate",
        "--config",
        &typo,
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pathz"));
    let clash = write_spec(tmp.path(), "clash.toml", &format!("command = \"pde\"\n{SMALL_SIM}"));
    let out = mcs(&[
        "simulate",
        "--config",
        &clash,
        "--out",
        tmp.path().join("y").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn euler_blowup_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL_SIM
        .replace("value = 0.6 }]", "value = 20.0 }]")
        .replace("steps = 200", "steps = 20\nscheme = \"euler\"");
    let spec = write_spec(tmp.path(), "blow.toml", &text);
    let out = mcs(&[
        "simulate",
        "--config",
        &spec,
        "--out",
        tmp.path().join("z").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn rejected_martingale_exits_with_4_only_when_asked() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!(
        "{SMALL_SIM}\n[rule]\nkind = \"merton\"\ngamma = 1.0\nbeta = {{ kind = \"constant\", value = 0.02 }}\n"
    )
    .replace("paths = 2000", "paths = 20000");
    let spec = write_spec(tmp.path(), "sub.toml", &text);
    let out_dir = tmp.path().join("m");
    let base = ["simulate", "--config", &spec, "--out", out_dir.to_str().unwrap()];
    assert_eq!(mcs(&base).status.code(), Some(0));
    let mut strict = base.to_vec();
    strict.push("--assert-martingale");
    assert_eq!(mcs(&strict).status.code(), Some(4));
    assert!(fs::read_to_string(out_dir.join("manifest.toml"))
        .unwrap()
        .contains("exit_code = 4"));
}

#[test]
fn compare_merton_coincides_at_the_martingale_preference() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cm");
    let cfg = configs().join("compare_merton.toml");
    run_ok(&[
        "compare-merton",
        "--config",
        cfg.to_str().unwrap(),
        "--paths",
        "2000",
        "--out",
        out.to_str().unwrap(),
    ]);
    for r in rows(&out.join("factors.csv")).iter().take(200) {
        assert!((num(&r[2]) - num(&r[3])).abs() < 1e-12, "f2 vs f3 {r:?}");
    }
    for r in rows(&out.join("paths_summary.csv")) {
        assert!(num(&r[7]) <= 1e-10);
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_powerloss");

fn run(args: &[&str]) -> std::process::Output {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "powerloss {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn simulate(dir: &Path, d: f64) -> PathBuf {
    let cfg = dir.join("sim.toml");
    fs::write(
        &cfg,
        format!(
            "scenario = \"tm2\"\ncase = 1\nd = {d:?}\nn_subjects = 120\nseed = 5\nout = \"sim\"\n"
        ),
    )
    .unwrap();
    run(&["--config", cfg.to_str().unwrap(), "simulate"]);
    dir.join("sim")
}

fn header(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn simulate_writes_dataset_truth_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 1.0);
    let f = files(&sim);
    let names: Vec<_> = f.keys().cloned().collect();
    assert_eq!(
        names,
        [
            "covariates.csv",
            "functional.csv",
            "run_metadata.json",
            "truth.csv"
        ]
    );
    assert_eq!(header(&sim.join("covariates.csv")), "id,X1,X2");
    assert!(header(&sim.join("truth.csv")).starts_with("s,intercept,beta_1,beta_2,phi_1"));
    let meta: serde_json::Value = serde_json::from_slice(&f["run_metadata.json"]).unwrap();
    assert_eq!(meta["command"], "simulate");
    assert_eq!(meta["seed"], 5);
    assert_eq!(meta["config"]["case"], 1);
    assert_eq!(meta["details"]["grid"].as_array().unwrap().len(), 101);
}

#[test]
fn analyze_emits_full_schema_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 1.0);
    let f = sim.join("functional.csv");
    let c = sim.join("covariates.csv");
    let common = [
        "analyze",
        "--functional",
        f.to_str().unwrap(),
        "--covariates",
        c.to_str().unwrap(),
        "--seed",
        "17",
    ];
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&[
        &common[..],
        &["--out", a.to_str().unwrap(), "--threads", "1"],
    ]
    .concat());
    run(&[
        &common[..],
        &["--out", b.to_str().unwrap(), "--threads", "2"],
    ]
    .concat());
    let fa = files(&a);
    assert_eq!(fa, files(&b));

    let expected = [
        "correlations.csv",
        "fosr_bands_X1.csv",
        "fosr_bands_X2.csv",
        "fosr_global.json",
        "fpca_eigenfunctions.csv",
        "fpca_eigenvalues.csv",
        "reconstruction_X1.csv",
        "reconstruction_X2.csv",
        "rpcs_fit.csv",
        "rpcs_joint_tests.json",
        "run_metadata.json",
    ];
    assert_eq!(fa.keys().map(String::as_str).collect::<Vec<_>>(), expected);
    assert_eq!(
        header(&a.join("fosr_bands_X1.csv")),
        "s,estimate,pw_lo,pw_hi,cma_lo,cma_hi"
    );
    assert_eq!(
        header(&a.join("reconstruction_X2.csv")),
        "s,fosr,rpcs_all,rpcs_significant"
    );
    assert_eq!(
        header(&a.join("rpcs_fit.csv")),
        "component,term,estimate,std_error,t_statistic,p_value"
    );

    // Q x L correlation table.
    let l = fs::read_to_string(a.join("fpca_eigenvalues.csv"))
        .unwrap()
        .lines()
        .count()
        - 1;
    let corr = fs::read_to_string(a.join("correlations.csv")).unwrap();
    let rows: Vec<&str> = corr.lines().collect();
    assert_eq!(rows.len(), 3);
    for r in &rows[1..] {
        assert_eq!(r.split(',').count(), l + 1);
        for v in r.split(',').skip(1) {
            let v: f64 = v.parse().unwrap();
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    let joint: serde_json::Value = serde_json::from_slice(&fa["rpcs_joint_tests.json"]).unwrap();
    let tests = joint["tests"].as_array().unwrap();
    assert_eq!(tests.len(), 4);
    for t in tests {
        let p = t["global_p"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
        for p in t["component_p_values"].as_array().unwrap() {
            assert!((0.0..=1.0).contains(&p.as_f64().unwrap()));
        }
    }
    let global: serde_json::Value = serde_json::from_slice(&fa["fosr_global.json"]).unwrap();
    assert_eq!(global["converged"], true);
    for cov in global["covariates"].as_array().unwrap() {
        let p = cov["global_p"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
    let meta: serde_json::Value = serde_json::from_slice(&fa["run_metadata.json"]).unwrap();
    assert_eq!(meta["seed"], 17);
    assert!(meta["config"]["threads"].is_null());
    assert_eq!(meta["details"]["band_seeds"].as_array().unwrap().len(), 2);
}

#[test]
fn null_dataset_report_completes() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 0.0);
    let out = dir.path().join("null");
    let f = sim.join("functional.csv");
    let c = sim.join("covariates.csv");
    run(&[
        "--out",
        out.to_str().unwrap(),
        "analyze",
        "--functional",
        f.to_str().unwrap(),
        "--covariates",
        c.to_str().unwrap(),
    ]);
    assert_eq!(files(&out).len(), 11);
}

#[test]
fn constant_effect_found_by_fosr_and_missed_by_four_scores() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 1.0);
    let cfg = dir.path().join("four.toml");
    fs::write(&cfg, "components = 4\nseed = 17\n").unwrap();
    let out = dir.path().join("four");
    run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "analyze",
        "--functional",
        sim.join("functional.csv").to_str().unwrap(),
        "--covariates",
        sim.join("covariates.csv").to_str().unwrap(),
    ]);
    let joint: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("rpcs_joint_tests.json")).unwrap()).unwrap();
    let rpcs = joint["tests"]
        .as_array()
        .unwrap()
        .iter()
        .find(|t| t["covariate"] == "X1" && t["correction"] == "bonferroni")
        .unwrap();
    assert!(rpcs["global_p"].as_f64().unwrap() > 0.05, "{rpcs}");
    let global: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("fosr_global.json")).unwrap()).unwrap();
    let fosr = &global["covariates"][0];
    assert_eq!(fosr["covariate"], "X1");
    assert!(fosr["global_p"].as_f64().unwrap() < 0.05, "{fosr}");
}

#[test]
fn fpca_then_rpcs_matches_analyze_tables() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 1.0);
    let f = sim.join("functional.csv");
    let c = sim.join("covariates.csv");
    let fp = dir.path().join("fpca");
    let rp = dir.path().join("rpcs");
    let an = dir.path().join("an");
    let data = [
        "--functional",
        f.to_str().unwrap(),
        "--covariates",
        c.to_str().unwrap(),
    ];
    run(&[&["--out", fp.to_str().unwrap(), "fpca"][..], &data].concat());
    run(&[&["--out", an.to_str().unwrap(), "analyze"][..], &data].concat());
    run(&[
        "--out",
        rp.to_str().unwrap(),
        "rpcs",
        "--scores",
        fp.join("fpca_scores.csv").to_str().unwrap(),
        "--covariates",
        c.to_str().unwrap(),
        "--eigenfunctions",
        fp.join("fpca_eigenfunctions.csv").to_str().unwrap(),
    ]);
    for name in ["fpca_eigenvalues.csv", "fpca_eigenfunctions.csv"] {
        assert_eq!(
            fs::read(fp.join(name)).unwrap(),
            fs::read(an.join(name)).unwrap(),
            "{name}"
        );
    }
    for name in ["rpcs_fit.csv", "rpcs_joint_tests.json"] {
        assert_eq!(
            fs::read(rp.join(name)).unwrap(),
            fs::read(an.join(name)).unwrap(),
            "{name}"
        );
    }
    assert_eq!(
        header(&rp.join("reconstruction_X1.csv")),
        "s,rpcs_all,rpcs_significant"
    );
}

#[test]
fn fosr_subcommand_writes_bands_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 1.0);
    let out = dir.path().join("fosr");
    run(&[
        "--out",
        out.to_str().unwrap(),
        "fosr",
        "--functional",
        sim.join("functional.csv").to_str().unwrap(),
        "--covariates",
        sim.join("covariates.csv").to_str().unwrap(),
    ]);
    let names: Vec<_> = files(&out).into_keys().collect();
    assert_eq!(
        names,
        [
            "fosr_bands_X1.csv",
            "fosr_bands_X2.csv",
            "fosr_global.json",
            "run_metadata.json"
        ]
    );
    let global: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("fosr_global.json")).unwrap()).unwrap();
    assert!(global["variance_components"]["sigma2"].as_f64().unwrap() > 0.0);
    assert!(global["iterations"].as_u64().unwrap() >= 1);
}

#[test]
fn power_tables_are_independent_of_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("power.toml");
    fs::write(
        &cfg,
        "scenario = \"tm2\"\ncases = [1, 4]\nd_values = [0.0, 1.0]\nw_values = [0.5]\nn_replicates = 3\nn_subjects = 80\nn_draws = 300\n",
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        a.to_str().unwrap(),
        "--threads",
        "1",
        "power",
    ]);
    run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
        "--threads",
        "3",
        "power",
    ]);
    let fa = files(&a);
    assert_eq!(fa, files(&b));
    let table = String::from_utf8(fa["power_table.csv"].clone()).unwrap();
    // 2 cases x 2 d x 1 w x 3 methods x 2 targets.
    assert_eq!(table.lines().count(), 1 + 24);
    assert!(table
        .starts_with("scenario,case,d,w,method,target,rejections,n_valid,n_failed,power,mc_se\n"));
    let curves = String::from_utf8(fa["power_curves.csv"].clone()).unwrap();
    assert_eq!(curves.lines().count(), 1 + 24);
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nnot_a_key = 2\n").unwrap();
    let out = Command::new(BIN)
        .args(["--config", cfg.to_str().unwrap(), "simulate"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not_a_key"), "{err}");

    let out = Command::new(BIN)
        .args([
            "--out",
            dir.path().join("x").to_str().unwrap(),
            "--alpha",
            "1.5",
            "simulate",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());

    let out = Command::new(BIN)
        .args(["--out", dir.path().join("y").to_str().unwrap(), "fpca"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("functional"));
}

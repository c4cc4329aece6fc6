use std::fs;
use std::path::Path;

use serde_json::Value;

use trinode_core::cli::{
    self, bundled_config, run_cli, run_experiment, sha256_hex, ExperimentConfig, ResultBundle,
    Target, EXIT_ACCEPTANCE, EXIT_INVALID, EXIT_IO, EXIT_OK,
};
use trinode_core::linkmodel;

fn bundled(name: &str) -> (ExperimentConfig, String) {
    let text = bundled_config(&format!("{name}.toml")).unwrap();
    (
        ExperimentConfig::parse(text).unwrap(),
        sha256_hex(text.as_bytes()),
    )
}

fn run_bundled(name: &str, n_runs: Option<u64>) -> ResultBundle {
    let (mut cfg, hash) = bundled(name);
    if let Some(n) = n_runs {
        cfg.n_runs = n;
    }
    run_experiment(&cfg, &hash, Path::new(".")).unwrap()
}

fn cli(args: &[&str]) -> i32 {
    run_cli(std::iter::once("trinode").chain(args.iter().copied()))
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn number(v: &Value) -> f64 {
    v.as_f64().unwrap()
}

#[test]
fn zero_runs_give_an_empty_bundle_with_provenance() {
    for name in ["ghz", "swap", "double_link", "link"] {
        let b = run_bundled(name, Some(0));
        assert_eq!(b.provenance.n_runs, 0);
        assert_eq!(b.provenance.seed, 20240101);
        assert_eq!(b.provenance.config_sha256.len(), 64);
        assert_eq!(b.provenance.version, cli::VERSION);
    }
    let s = &run_bundled("ghz", Some(0)).summary["monte_carlo"];
    assert_eq!(s["n_success"], 0);
    assert!(s["fidelity"].is_null());
}

#[test]
fn same_config_and_seed_reproduce_the_summary() {
    let a = serde_json::to_string(&run_bundled("swap", Some(3000))).unwrap();
    let b = serde_json::to_string(&run_bundled("swap", Some(3000))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn singular_readout_is_named_in_diagnostics() {
    let text = bundled_config("ghz.toml").unwrap().replacen(
        "f0 = 0.928\nf1 = 0.994",
        "f0 = 0.4\nf1 = 0.5",
        1,
    );
    let cfg = ExperimentConfig::parse(&text).unwrap();
    let d = cfg.diagnostics().join("\n");
    assert!(d.contains("readout_bob"), "{d}");
    assert!(d.contains("not invertible"), "{d}");
}

#[test]
fn zero_timeout_is_named_in_diagnostics() {
    let text = bundled_config("ghz.toml").unwrap().replacen(
        "timeout_attempts = 450",
        "timeout_attempts = 0",
        1,
    );
    let d = ExperimentConfig::parse(&text)
        .unwrap()
        .diagnostics()
        .join("\n");
    assert!(d.contains("timeout_attempts"), "{d}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), "ghz.toml", bundled_config("ghz.toml").unwrap());
    assert_eq!(cli(&["validate", "--config", &good]), EXIT_OK);

    let bad = write_config(
        dir.path(),
        "bad.toml",
        &bundled_config("ghz.toml").unwrap().replacen(
            "timeout_attempts = 450",
            "timeout_attempts = 0",
            1,
        ),
    );
    assert_eq!(cli(&["validate", "--config", &bad]), EXIT_INVALID);
    assert_eq!(cli(&["run", "--config", &bad]), EXIT_INVALID);

    let unknown = write_config(
        dir.path(),
        "unknown.toml",
        "experiment = \"ghz\"\nbogus = 1\n",
    );
    assert_eq!(cli(&["run", "--config", &unknown]), EXIT_INVALID);
    assert_eq!(cli(&["reproduce", "table-s9"]), EXIT_INVALID);

    let missing = dir.path().join("nope.toml");
    assert_eq!(
        cli(&["run", "--config", missing.to_str().unwrap()]),
        EXIT_IO
    );
}

#[test]
fn written_tables_carry_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "swap.toml",
        bundled_config("swap.toml").unwrap(),
    );
    let out = dir.path().join("out");
    let code = cli(&[
        "run",
        "--config",
        &cfg,
        "--runs",
        "2000",
        "--seed",
        "5",
        "--format",
        "csv",
        "--jobs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let csvs: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    assert!(!csvs.is_empty());
    for p in csvs {
        let text = fs::read_to_string(&p).unwrap();
        let first = text.lines().next().unwrap();
        assert!(
            first.starts_with("# name=swap config_sha256="),
            "{}",
            p.display()
        );
        assert!(first.contains(" seed=5 "), "{first}");
    }
    let json: Value =
        serde_json::from_str(&fs::read_to_string(out.join("swap.json")).unwrap()).unwrap();
    assert_eq!(json["provenance"]["seed"], 5);
    assert_eq!(json["provenance"]["n_runs"], 2000);
}

#[test]
fn budget_tables_match_reference_rows() {
    let b = run_bundled("budget", None);
    let rows = [
        (
            "link_ab_budget",
            [6.1e-2, 6.0e-2, 5.5e-2, 2.4e-2, 5e-3],
            0.191,
        ),
        (
            "link_bc_budget",
            [8.0e-2, 1.5e-2, 7.0e-2, 2.3e-2, 5e-3],
            0.186,
        ),
    ];
    let sources = [
        linkmodel::SOURCE_DOUBLE_EMISSION,
        linkmodel::SOURCE_PHASE,
        linkmodel::SOURCE_DOUBLE_EXCITATION,
        linkmodel::SOURCE_DISTINGUISHABILITY,
        linkmodel::SOURCE_DARK_COUNTS,
    ];
    for (table, expected, combined) in rows {
        let t = b.table(table).unwrap();
        let lookup = |src: &str| {
            number(
                &t.rows
                    .iter()
                    .find(|r| r[0] == src)
                    .unwrap_or_else(|| panic!("{table}: {src}"))[1],
            )
        };
        for (src, e) in sources.iter().zip(expected) {
            assert!(
                (lookup(src) - e).abs() <= 0.005,
                "{table} {src}: {} vs {e}",
                lookup(src)
            );
        }
        assert!((lookup("combined") - combined).abs() <= 0.005);
    }
}

#[test]
fn ghz_run_reaches_modeled_fidelity() {
    let b = run_bundled("ghz", Some(100_000));
    let f = &b.summary["monte_carlo"]["fidelity"];
    let (mean, sem) = (number(&f["mean"]), number(&f["sem"]));
    assert!((mean - 0.594).abs() <= 0.01, "{mean} +- {sem}");
    let analytic = number(&b.summary["analytic"]["fidelity"]);
    assert!(
        (mean - analytic).abs() <= 3.0 * sem + 1e-3,
        "{mean} vs {analytic}"
    );
    let herald = b.table("herald_statistics").unwrap();
    assert_eq!(herald.rows.len(), 2);
}

#[test]
fn reproduce_exit_status_tracks_comparisons() {
    for target in [Target::TableS4, Target::TableS5, Target::TableS2] {
        let b = cli::reproduce(target, None, Some(2000)).unwrap();
        assert!(!b.comparisons.is_empty());
        assert!(b.all_pass(), "{}: {:?}", target.name(), b.comparisons);
        assert_eq!(
            cli(&[
                "reproduce",
                target.name(),
                "--runs",
                "2000",
                "--format",
                "csv"
            ]),
            EXIT_OK
        );
    }
    // the measured-share comparison is the one reference value the model misses
    let b = cli::reproduce(Target::BsmShares, None, Some(20_000)).unwrap();
    let expected = if b.all_pass() {
        EXIT_OK
    } else {
        EXIT_ACCEPTANCE
    };
    assert_eq!(
        cli(&[
            "reproduce",
            "bsm-shares",
            "--runs",
            "20000",
            "--format",
            "csv"
        ]),
        expected
    );
}

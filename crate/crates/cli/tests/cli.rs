//! Runs the `ffcircuit` binary: schemas, determinism, exit codes and presets.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ffcircuit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffcircuit"))
        .args(args)
        .env("FFCIRCUIT_WORKERS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const ENTANGLEMENT: &str = r#"{
    "model": {"line": "nishimori", "p": [0.05, 0.3]},
    "geometry": {"sizes": [4, 6], "aspect": {"rule": "rows_per_site", "ratio": 5}},
    "realizations": 4,
    "base_seed": 7
}"#;

const CONDUCTIVITY: &str = r#"{
    "model": {"line": "twirl", "phi_over_pi": [0.05, 0.2]},
    "geometry": {"sizes": [4, 6, 8, 10], "aspect": {"rule": "sites_per_row", "ratio": 5}},
    "realizations": 4,
    "base_seed": 7
}"#;

#[test]
fn entanglement_scan_writes_documented_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), ENTANGLEMENT);
    let out = tmp.path().join("out");
    let res = ffcircuit(&["scan-entanglement", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(out.join("entanglement.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "realization,M,L,p,bc,q,parity,lambda0,lambda1,S_half,converged"
    );
    assert_eq!(csv.lines().count(), 1 + 4 * 4);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), "point,M,L,p,quantity,mean,err2,median,n,dropped");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.get("spec_hash").is_some(), "{manifest}");
}

#[test]
fn conductivity_scan_is_deterministic_and_collapses() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), CONDUCTIVITY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let res = ffcircuit(&[
            "scan-conductivity",
            "--config",
            &config,
            "--out",
            dir.to_str().unwrap(),
            "--collapse",
        ]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    }
    for f in ["transport.csv", "summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let header = fs::read_to_string(a.join("transport.csv")).unwrap();
    assert_eq!(
        header.lines().next().unwrap(),
        "realization,M,L,phi,g_sample,eps_min,detRp_pbc_sign,detRp_apbc_sign,I_sample,gapped"
    );
    assert!(a.join("collapse").exists());

    let res = ffcircuit(&[
        "collapse",
        "--input",
        a.join("summary.csv").to_str().unwrap(),
        "--quantity",
        "g",
        "--split",
        "--out",
        tmp.path().join("c").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn seed_override_changes_values() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), ENTANGLEMENT);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ffcircuit(&["scan-entanglement", "--config", &config, "--out", a.to_str().unwrap()]);
    let res = ffcircuit(&["scan-entanglement", "--config", &config, "--out", b.to_str().unwrap(), "--seed", "8"]);
    assert_eq!(code(&res), 0);
    assert_ne!(
        fs::read(a.join("entanglement.csv")).unwrap(),
        fs::read(b.join("entanglement.csv")).unwrap()
    );
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    let missing = tmp.path().join("missing.json");
    assert_eq!(code(&ffcircuit(&["scan-entanglement", "--config", missing.to_str().unwrap(), "--out", out])), 2);
    let bad = write_config(tmp.path(), r#"{"model": {"line": "nishimori", "p": [0.1]}, "oops": true}"#);
    assert_eq!(code(&ffcircuit(&["scan-entanglement", "--config", &bad, "--out", out])), 2);
    let odd = write_config(tmp.path(), &ENTANGLEMENT.replace("[4, 6]", "[5]"));
    assert_eq!(code(&ffcircuit(&["scan-entanglement", "--config", &odd, "--out", out])), 2);
    assert_eq!(code(&ffcircuit(&["reproduce-figure", "fig9", "--out", out])), 2);
    assert_eq!(code(&ffcircuit(&["reproduce-figure", "fig4", "--out", out, "--preset", "paper"])), 2);
    assert_eq!(code(&ffcircuit(&["no-such-command"])), 2);
}

#[test]
fn science_failures_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    // Curves with disjoint ranges cannot be collapsed.
    let summary = tmp.path().join("summary.csv");
    fs::write(
        &summary,
        "point,M,L,phi,quantity,mean,err2,median,n,dropped\n\
         0,20,4,0.1,g,0.1,0.01,0.1,4,0\n\
         1,30,6,0.1,g,0.2,0.01,0.2,4,0\n\
         2,40,8,0.1,g,0.3,0.01,0.3,4,0\n\
         3,20,4,0.5,g,5.0,0.01,5.0,4,0\n\
         4,30,6,0.5,g,6.0,0.01,6.0,4,0\n\
         5,40,8,0.5,g,7.0,0.01,7.0,4,0\n",
    )
    .unwrap();
    let res = ffcircuit(&[
        "collapse",
        "--input",
        summary.to_str().unwrap(),
        "--quantity",
        "g",
        "--out",
        tmp.path().join("c").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 1, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn verify_passes() {
    let res = ffcircuit(&["verify"]);
    assert_eq!(code(&res), 0);
    let text = String::from_utf8(res.stdout).unwrap();
    assert!(text.lines().count() >= 6);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn smoke_presets_emit_tables_and_scripts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    for (name, files) in [
        ("fig4", &["fig4_entropy.csv", "fig4_entropy.gp", "fig4_spectrum.csv"][..]),
        ("fig5", &["fig5_conductivity.csv", "fig5_fits.csv", "fig5_crossings.csv"][..]),
        ("fig6", &["fig6_entropy.csv", "fig6_spectrum.gp"][..]),
        ("fig7", &["fig7_entropy.csv", "fig7_fits.csv", "fig7_inset.csv", "fig7_inset_fits.csv"][..]),
        ("figB", &["figB_conductivity.csv", "figB_conductivity.gp"][..]),
    ] {
        let res = ffcircuit(&["reproduce-figure", name, "--out", out, "--preset", "smoke"]);
        assert_eq!(code(&res), 0, "{name}: {}", String::from_utf8_lossy(&res.stderr));
        for f in files {
            let path = tmp.path().join(name).join(f);
            assert!(path.exists(), "{}", path.display());
        }
        let table = fs::read_to_string(tmp.path().join(name).join(files[0])).unwrap();
        assert_eq!(table.lines().next().unwrap(), "series,x,y,err2");
    }
}

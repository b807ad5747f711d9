use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trajmark"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn trajmark")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SMALL: &str = r#"
[calibration]
invalid_keys = 80
detection_samples = 120
ownership_clean = 40
ownership_per_attack = 10
baseline_samples = 20
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    let d = dir.path();
    for (user, seed) in [("alice", "1"), ("bob", "2")] {
        assert_eq!(code(&run(d, &["--config", "run.toml", "register", "--user", user, "--seed", seed])), 0);
    }
    let o = run(
        d,
        &[
            "--config", "run.toml", "generate", "--user", "alice", "--timestamp", "1700000000", "--count", "2", "--out",
            "imgs", "--preview",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

fn verdict(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).expect("verdict json")
}

#[test]
fn register_generate_calibrate_verify() {
    let dir = setup();
    let d = dir.path();
    let img = "imgs/alice-1700000000.pait";
    assert_eq!(code(&run(d, &["--config", "run.toml", "verify", "--image", img])), 3);
    assert_eq!(code(&run(d, &["--config", "run.toml", "--jobs", "2", "calibrate"])), 0);
    assert!(d.join("out/calibration.paim").exists());

    let o = run(d, &["--config", "run.toml", "verify", "--image", img]);
    assert_eq!(code(&o), 0);
    assert_eq!(verdict(&o)["classification"], "benign");

    let o = run(d, &["--config", "run.toml", "verify", "--image", img, "--user", "bob"]);
    assert_eq!(code(&o), 2);
    assert_eq!(verdict(&o)["classification"], "invalid_or_nonwatermarked");

    let o = run(
        d,
        &[
            "--config", "run.toml", "verify", "--image", "imgs/alice-1700000000.pgm", "--sidecar",
            "imgs/alice-1700000000.json", "--from-preview",
        ],
    );
    assert_eq!(code(&o), 0);

    assert_eq!(code(&run(d, &["--config", "run.toml", "register", "--user", "alice"])), 1);
    assert_eq!(code(&run(d, &["--config", "run.toml", "verify", "--image", "imgs/none.pait"])), 6);
}

#[test]
fn corrupted_and_mismatched_inputs() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&run(d, &["--config", "run.toml", "calibrate"])), 0);

    let mut bytes = std::fs::read(d.join("imgs/alice-1700000001.pait")).unwrap();
    bytes[40] ^= 0xff;
    std::fs::write(d.join("imgs/bad.pait"), bytes).unwrap();
    std::fs::copy(d.join("imgs/alice-1700000001.json"), d.join("imgs/bad.json")).unwrap();
    let o = run(d, &["--config", "run.toml", "verify", "--image", "imgs/bad.pait"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));

    // A different schedule changes both hashes.
    std::fs::write(d.join("other.toml"), format!("{SMALL}\n[schedule]\nsteps = 50\nbeta_start = 1e-4\nbeta_end = 0.05\n")).unwrap();
    let o = run(
        d,
        &[
            "--config", "other.toml", "verify", "--image", "imgs/alice-1700000000.pait", "--calibration",
            "out/calibration.paim", "--store", "out/keys.paik",
        ],
    );
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn localize_and_attack_bench() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&run(d, &["--config", "run.toml", "calibrate"])), 0);
    let o = run(
        d,
        &["--config", "run.toml", "localize", "--image", "imgs/alice-1700000000.pait", "--mask-out", "mask.pgm"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read(d.join("mask.pgm")).unwrap().starts_with(b"P5\n16 16\n1\n"));

    std::fs::write(
        d.join("manifest.json"),
        r#"[{"kind":"brightness","level":1},{"kind":"pattern_spoof","strength":0.1},{"kind":"metadata_tamper","seed":3}]"#,
    )
    .unwrap();
    let o = run(
        d,
        &[
            "--config", "run.toml", "attack", "--manifest", "manifest.json", "--images", "imgs/alice-1700000000.pait",
            "imgs/alice-1700000001.pait", "--out", "bench",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("bench/verdicts.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "image_id,attack_kind,level,vanilla_pass,D2_detect,D2_own,classification,owned"
    );
    assert_eq!(lines.count(), 6);
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 3);
}

#[test]
fn theory_subcommand_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["theory", "--trials", "4000", "--out", "theory.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("theory.json")).unwrap()).unwrap();
    assert_eq!(report["closed_form_pass"], true);
    assert_eq!(report["ordering_pass"], true);
}

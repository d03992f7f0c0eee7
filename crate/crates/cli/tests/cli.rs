use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn qfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfd"))
        .args(args)
        .output()
        .expect("spawn qfd")
}

fn ok(args: &[&str]) -> String {
    let out = qfd(args);
    assert!(
        out.status.success(),
        "qfd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    qfd(args).status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn tiny_experiment_within_budget_and_eval_reproduces_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("exp");
    let started = Instant::now();
    let stdout = ok(&["experiment", "--preset", "tiny", "--out", s(&out)]);
    assert!(started.elapsed() < Duration::from_secs(300), "{:?}", started.elapsed());
    assert!(stdout.contains("NIF+DA"), "{stdout}");
    assert!(out.join("resolved-config.toml").is_file());

    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["records"].as_array().unwrap().len(), 6);

    let run = out.join("runs").join("nif-da-0");
    let recorded = json(&run.join("report.json"))["target"]["accuracy"].as_f64().unwrap();
    let eval = tmp.path().join("eval.json");
    ok(&[
        "eval",
        "--checkpoint",
        s(&run),
        "--data",
        s(&out.join("data").join("target-nif")),
        "--out",
        s(&eval),
    ]);
    assert_eq!(json(&eval)["accuracy"].as_f64().unwrap(), recorded);

    let feats = tmp.path().join("features");
    ok(&[
        "export-features",
        "--checkpoint",
        s(&run),
        "--data",
        s(&out.join("data").join("source-nif")),
        "--data",
        s(&out.join("data").join("target-nif")),
        "--out",
        s(&feats),
    ]);
    assert!(!files(&feats).is_empty());
}

#[test]
fn gen_is_reproducible_and_writes_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, domain: &str| {
        let dir = tmp.path().join(name);
        let stdout = ok(&[
            "gen", "--preset", "tiny", "--per-class", "4", "--seed", "11", "--domain", domain, "--out", s(&dir),
        ]);
        (dir, stdout)
    };
    let (a, stdout) = run("a", "target");
    assert!(stdout.contains("label 5: 4"), "{stdout}");
    let (b, _) = run("b", "target");
    assert_eq!(files(&a), files(&b));

    let resolved = std::fs::read_to_string(a.join("resolved-config.toml")).unwrap();
    assert!(resolved.contains("per_class = 4"), "{resolved}");
    assert!(resolved.contains("seed = 11"), "{resolved}");

    let (src, stdout) = run("src", "source");
    assert!(stdout.contains("unbalance rho"), "{stdout}");
    assert!(src.join("unbalance.json").is_file());

    // The resolved dump reproduces the run on its own.
    let c = tmp.path().join("c");
    ok(&["gen", "--config", s(&a.join("resolved-config.toml")), "--domain", "target", "--out", s(&c)]);
    assert_eq!(files(&a), files(&c));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&["gen", "--preset", "huge", "--domain", "target", "--out", s(&out)]), 2);
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlamda = 1.0\n").unwrap();
    assert_eq!(code(&["gen", "--config", s(&bad), "--domain", "target", "--out", s(&out)]), 2);
    std::fs::write(&bad, "preset = \"tiny\"\nruns = 0\n").unwrap();
    assert_eq!(code(&["experiment", "--config", s(&bad), "--out", s(&out)]), 2);
}

#[test]
fn data_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    assert_eq!(code(&["eval", "--checkpoint", s(&missing), "--data", s(&missing)]), 3);

    // A motor forty times stronger than commanded flips the vehicle.
    let cfg = tmp.path().join("unstable.toml");
    std::fs::write(&cfg, "preset = \"tiny\"\n[target]\nmotor_gain_scale = [1.0, 1.0, 1.0, 40.0]\n").unwrap();
    let out = tmp.path().join("o");
    assert_eq!(
        code(&["gen", "--config", s(&cfg), "--per-class", "1", "--domain", "target", "--out", s(&out)]),
        3
    );

    let nif = tmp.path().join("nif");
    let cf = tmp.path().join("cf");
    let base = ["--preset", "tiny", "--per-class", "2", "--domain", "source"];
    ok(&[&["gen"][..], &base, &["--out", s(&nif)]].concat());
    ok(&[&["gen"][..], &base, &["--variant", "cf", "--out", s(&cf)]].concat());
    let model = tmp.path().join("model");
    ok(&["train", "--preset", "tiny", "--source", s(&nif), "--out", s(&model)]);
    assert_eq!(code(&["eval", "--checkpoint", s(&model), "--data", s(&cf)]), 3);
}

#[test]
fn training_failure_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    ok(&["gen", "--preset", "tiny", "--per-class", "8", "--domain", "source", "--out", s(&data)]);
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "preset = \"tiny\"\n[train]\nlr = 1e30\n").unwrap();
    let out = tmp.path().join("m");
    assert_eq!(code(&["train", "--config", s(&cfg), "--source", s(&data), "--out", s(&out)]), 4);
}

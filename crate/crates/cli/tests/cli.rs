use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn semcf(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semcf"))
        .args(args)
        .env("SEMCF_OUT_DIR", out)
        .env_remove("SEMCF_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_ok(out: &Path, args: &[&str]) {
    let o = semcf(out, args);
    assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
}

fn pipeline(out: &Path, cfg: &Path, steps: &[&str], extra: &[&str]) {
    let cfg = cfg.to_str().unwrap();
    for step in steps {
        let mut args = vec![*step, "-c", cfg];
        args.extend_from_slice(extra);
        run_ok(out, &args);
    }
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

const UPSTREAM: [&str; 4] = ["world-init", "train-target", "probe", "direction"];

#[test]
fn unknown_config_key_exits_2_before_writing_anything() {
    let out = tempfile::tempdir().unwrap();
    let o = semcf(out.path(), &["world-init", "-c", config("keypoint.toml").to_str().unwrap(), "--set", "search.stepsize=1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("stepsize"));
    assert!(std::fs::read_dir(out.path()).unwrap().next().is_none());

    let bad = out.path().join("bad.toml");
    let text = std::fs::read_to_string(config("keypoint.toml")).unwrap() + "\n[extra]\nvalue = 1\n";
    std::fs::write(&bad, text).unwrap();
    assert_eq!(code(&semcf(out.path(), &["world-init", "-c", bad.to_str().unwrap()])), 2);
}

#[test]
fn missing_upstream_artifacts_exit_3() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("keypoint.toml");
    let o = semcf(out.path(), &["direction", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("world-init"), "{}", stderr(&o));
    run_ok(out.path(), &["world-init", "-c", cfg.to_str().unwrap()]);
    let o = semcf(out.path(), &["direction", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("semcf probe"), "{}", stderr(&o));
}

#[test]
fn threshold_above_every_entry_exits_3_naming_the_attribute() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("keypoint.toml");
    pipeline(out.path(), &cfg, &["world-init", "probe"], &[]);
    let o = semcf(out.path(), &["direction", "-c", cfg.to_str().unwrap(), "--set", "attributes.lambda.ring=10"]);
    assert_eq!(code(&o), 3);
    let msg = stderr(&o);
    assert!(msg.contains("empty") && msg.contains("`ring`"), "{msg}");
}

#[test]
fn counterfactual_training_of_a_keypoint_model_exits_3() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("keypoint.toml");
    pipeline(out.path(), &cfg, &UPSTREAM, &[]);
    assert_eq!(code(&semcf(out.path(), &["ct", "-c", cfg.to_str().unwrap()])), 3);
}

#[test]
fn manifests_verify_and_detect_tampering() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("keypoint.toml");
    pipeline(out.path(), &cfg, &UPSTREAM, &[]);
    pipeline(out.path(), &cfg, &["counterfactual"], &[]);
    for step in ["world-init", "train-target", "probe", "direction", "counterfactual"] {
        let m = out.path().join(format!("{step}.manifest.json"));
        run_ok(out.path(), &["verify-manifest", m.to_str().unwrap()]);
    }
    let probe = out.path().join("probe.manifest.json");
    run_ok(out.path(), &["verify-manifest", "--rerun", probe.to_str().unwrap()]);

    let trace = out.path().join("counterfactual/trace.csv");
    let mut text = std::fs::read_to_string(&trace).unwrap();
    text.push('\n');
    std::fs::write(&trace, text).unwrap();
    let m = out.path().join("counterfactual.manifest.json");
    let o = semcf(out.path(), &["verify-manifest", m.to_str().unwrap()]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("counterfactual/trace.csv"), "{}", stderr(&o));
}

#[test]
fn outputs_do_not_depend_on_the_thread_count() {
    let cfg = config("keypoint.toml");
    let steps = ["world-init", "train-target", "probe", "direction", "counterfactual", "diagnose"];
    let small = ["--set", "diagnosis.n_samples=12"];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), &cfg, &steps, &[&small[..], &["--threads", "1"]].concat());
    pipeline(b.path(), &cfg, &steps, &[&small[..], &["--threads", "3"]].concat());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (path, bytes) in &ta {
        assert!(bytes == &tb[path], "{} differs", path.display());
    }
}

#[test]
fn diagnose_on_the_confounded_example_ranks_the_confound_first() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("confounded.toml");
    pipeline(out.path(), &cfg, &UPSTREAM, &[]);
    pipeline(out.path(), &cfg, &["diagnose"], &[]);
    let text = std::fs::read_to_string(out.path().join("diagnose/summary.json")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["content"]["top"], "stripes", "{text}");
    let csv = std::fs::read_to_string(out.path().join("diagnose/sensitivity.csv")).unwrap();
    assert!(csv.starts_with("attribute,raw,normalized\n"));
    assert!(std::fs::read_to_string(out.path().join("diagnose/sensitivity.svg")).unwrap().starts_with("<svg"));
    let m = out.path().join("diagnose.manifest.json");
    run_ok(out.path(), &["verify-manifest", m.to_str().unwrap()]);
}

use std::path::Path;
use std::process::{Command, Output};

fn minusface(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_minusface"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let out = minusface(&["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for cmd in [
        "gen-data",
        "train-stage1",
        "train-stage2",
        "protect",
        "enroll",
        "verify",
        "train-attack",
        "attack-eval",
        "fixed-seed-attack",
        "ablate",
        "check-invariants",
        "report",
    ] {
        assert!(text.contains(cmd), "missing {cmd} in help");
    }
}

#[test]
fn invariants_hold_for_both_mappings() {
    for mapping in ["dct8", "haar2"] {
        let out = minusface(&["check-invariants", "--mapping", mapping, "--trials", "5", "--size", "16"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).contains("PASS"));
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing_out = minusface(&["gen-data", "--ids", "2"]);
    assert_eq!(missing_out.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let o = minusface(&["--config", p(&bad), "gen-data", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));

    let nested = dir.path().join("nested.json");
    std::fs::write(&nested, r#"{"ids": {"n": 3}}"#).unwrap();
    let o = minusface(&["--config", p(&nested), "gen-data", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(minusface(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = minusface(&[
        "train-stage1",
        "--data",
        p(&dir.path().join("absent")),
        "--out",
        p(dir.path()),
        "--epochs",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_supplies_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let data = dir.path().join("data");
    std::fs::write(&cfg, format!(r#"{{"ids": 3, "per_id": 4, "size": 16, "out": "{}"}}"#, p(&data))).unwrap();
    let o = minusface(&["--config", p(&cfg), "gen-data"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("manifest.tsv").exists());
    assert!(stdout(&o).contains("3 identities"));
}

#[test]
fn stage1_then_protect_and_enroll() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = minusface(&["gen-data", "--ids", "6", "--per-id", "8", "--size", "16", "--out", p(&data)]);
    assert!(o.status.success());
    assert!(data.join("manifest.tsv").exists());

    let o = minusface(&[
        "train-stage1",
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--mapping",
        "haar2",
        "--epochs",
        "2",
        "--batch-size",
        "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["g.mfck", "f.mfck", "stage1.log", "stage1_report.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let report = std::fs::read_to_string(run.join("stage1_report.txt")).unwrap();
    assert!(report.contains("mapping=haar2"));

    let image = walk_png(&data).expect("a png in the dataset");
    let xp = dir.path().join("x.mfrp");
    let preview = dir.path().join("x.png");
    let o = minusface(&[
        "protect",
        "--image",
        p(&image),
        "--gen",
        p(&run.join("g.mfck")),
        "--mapping",
        "haar2",
        "--seed",
        "42",
        "--out",
        p(&xp),
        "--preview",
        p(&preview),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::metadata(&xp).unwrap().len(), 3 * 16 * 16 * 4 + 19);
    assert!(preview.exists());

    let o = minusface(&[
        "train-stage2",
        "--data",
        p(&data),
        "--gen",
        p(&run.join("g.mfck")),
        "--out",
        p(&run),
        "--mapping",
        "haar2",
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--copies",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("verification_accuracy="));

    let tmpl = dir.path().join("templates.tsv");
    let o = minusface(&["enroll", "--model", p(&run.join("fp.mfck")), "--out", p(&tmpl), p(&xp), p(&image)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&tmpl).unwrap();
    assert_eq!(text.lines().count(), 2);
}

fn walk_png(dir: &Path) -> Option<std::path::PathBuf> {
    for e in std::fs::read_dir(dir).ok()?.flatten() {
        let path = e.path();
        if path.is_dir() {
            if let Some(found) = walk_png(&path) {
                return Some(found);
            }
        } else if path.extension().is_some_and(|x| x == "png") {
            return Some(path);
        }
    }
    None
}

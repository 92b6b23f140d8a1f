use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn robudepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robudepth"))
        .args(args)
        .env_remove("SSD_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn gen(out: &Path, n: &str, seed: &str) {
    let o = robudepth(&["gen-data", "--n", n, "--seed", seed, "--out", s(out)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&robudepth(&[])), 2);
    assert_eq!(code(&robudepth(&["frobnicate"])), 2);
    assert_eq!(
        code(&robudepth(&["gen-data", "--n", "0", "--out", s(&out)])),
        2
    );
    assert_eq!(
        code(&robudepth(&["gradcheck", "--inject-fault", "no_such_op"])),
        2
    );
    let bad_key = robudepth(&[
        "train-teacher",
        "--data",
        s(&out),
        "--out",
        s(&out),
        "--set",
        "nonsense=1",
    ]);
    assert_eq!(code(&bad_key), 2, "{}", text(&bad_key));
    let threads = Command::new(env!("CARGO_BIN_EXE_robudepth"))
        .args(["gradcheck"])
        .env("SSD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 2);
}

#[test]
fn missing_data_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = robudepth(&[
        "train-teacher",
        "--data",
        s(&dir.path().join("absent")),
        "--out",
        s(&dir.path().join("t")),
    ]);
    assert_eq!(code(&o), 1, "{}", text(&o));
}

#[test]
fn gen_data_is_deterministic_and_writes_every_split() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    gen(&a, "2", "5");
    gen(&b, "2", "5");
    gen(&c, "2", "6");
    let files: Vec<PathBuf> = files_under(&a)
        .into_iter()
        .filter(|f| f != Path::new("manifest.json"))
        .collect();
    for split in ["train", "val-day", "val-night", "val-rain"] {
        assert!(
            files.iter().any(|f| f.starts_with(split)),
            "{split} missing"
        );
    }
    for f in &files {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{}",
            f.display()
        );
    }
    let frame = Path::new("train/000000/frame_curr.png");
    assert!(files.iter().any(|f| f == frame), "{files:?}");
    assert_ne!(
        fs::read(a.join(frame)).unwrap(),
        fs::read(c.join(frame)).unwrap()
    );

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["version"].as_str().unwrap().starts_with('v'));
}

#[test]
fn gradcheck_names_an_injected_fault() {
    let clean = robudepth(&["gradcheck"]);
    assert_eq!(code(&clean), 0, "{}", text(&clean));
    let o = robudepth(&["gradcheck", "--inject-fault", "upsample2"]);
    assert_eq!(code(&o), 1);
    let t = text(&o);
    assert!(t.contains("FAIL upsample2"), "{t}");
    assert!(
        t.lines().any(|l| l.starts_with("ok") && l.contains("exp ")),
        "{t}"
    );
}

#[test]
fn train_eval_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let p = |x: &str| dir.path().join(x);
    gen(&p("data"), "2", "1");
    let o = robudepth(&[
        "train-teacher",
        "--data",
        s(&p("data")),
        "--out",
        s(&p("t")),
        "--set",
        "epochs=1",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    for f in [
        "teacher.ssdf",
        "loss_log.csv",
        "config.txt",
        "manifest.json",
    ] {
        assert!(p("t").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(p("t/loss_log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,total,"), "{log}");
    assert_eq!(
        log.lines().count(),
        2,
        "one step of two triplets at batch 4"
    );

    let model = format!("teacher={}", s(&p("t/teacher.ssdf")));
    let eval = |scaling: &str, out: &str| {
        let o = robudepth(&[
            "eval",
            "--data",
            s(&p("data")),
            "--model",
            &model,
            "--scaling",
            scaling,
            "--out",
            s(&p(out)),
        ]);
        assert_eq!(code(&o), 0, "{}", text(&o));
        fs::read_to_string(p(out).join("metrics.csv")).unwrap()
    };
    let abs_rel = |csv: &str, split: &str| -> f64 {
        let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
        let col = header.iter().position(|h| *h == "absRel").unwrap();
        let row = csv.lines().find(|l| l.starts_with(split)).unwrap();
        row.split(',').nth(col).unwrap().parse().unwrap()
    };
    let median = eval("median", "e_median");
    let raw = eval("none", "e_none");
    // an untrained net is far off in absolute scale; median scaling removes that
    assert!(
        abs_rel(&median, "val-day") < abs_rel(&raw, "val-day"),
        "{median}\n{raw}"
    );
    assert!(p("e_median/absRel.svg").exists());

    let o = robudepth(&[
        "plot",
        "--metrics",
        s(&p("e_median/metrics.csv")),
        "--log",
        s(&p("t/loss_log.csv")),
        "--out",
        s(&p("plots")),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(files_under(&p("plots"))
        .iter()
        .any(|f| f.extension().is_some_and(|e| e == "svg")));

    let bad = robudepth(&[
        "eval",
        "--data",
        s(&p("data")),
        "--model",
        "broken",
        "--out",
        s(&p("x")),
    ]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn translate_output_feeds_student_training() {
    let dir = tempfile::tempdir().unwrap();
    let p = |x: &str| dir.path().join(x);
    gen(&p("data"), "2", "2");
    let o = robudepth(&[
        "train-teacher",
        "--data",
        s(&p("data")),
        "--out",
        s(&p("t")),
        "--set",
        "epochs=0",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let o = robudepth(&[
        "translate",
        "--data",
        s(&p("data")),
        "--conditions",
        "night",
        "--out",
        s(&p("ov")),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(
        p("ov/000000/night/frame_curr.png").exists(),
        "{:?}",
        files_under(&p("ov"))
    );
    let o = robudepth(&[
        "train-student",
        "--data",
        s(&p("data")),
        "--teacher",
        s(&p("t/teacher.ssdf")),
        "--overlay",
        s(&p("ov")),
        "--conditions",
        "night",
        "--out",
        s(&p("st")),
        "--set",
        "epochs=1",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(p("st/student.ssdf").exists());
}

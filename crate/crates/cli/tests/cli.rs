use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
seeds = 0
threads = 1

[data.counts]
train = 6
eval_id = 3
eval_od = 3

[data.lm_pretrain]
paragraphs = 20
seq_len = 64

[data.vision]
max_images = 24
epochs = 1

[train]
epochs = 1
";

fn vp2(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vp2"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(o: Output) -> String {
    assert_eq!(
        code(&o),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.ini");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

fn rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect()
}

#[test]
fn gen_tasks_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    ok(vp2(&a, &["gen-tasks", "--seed", "0"]));
    ok(vp2(&b, &["gen-tasks", "--seed", "0"]));
    ok(vp2(&c, &["gen-tasks", "--seed", "1"]));
    let read = |d: &Path| std::fs::read(d.join("tasks/tasks.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let manifest = |d: &Path| std::fs::read(d.join("tasks/manifest.json")).unwrap();
    assert_eq!(manifest(&a), manifest(&b));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let cases: &[&[&str]] = &[
        &["gen-tasks", "--no-such-flag"],
        &["no-such-command"],
        &["--config", "/definitely/missing.ini", "gen-tasks"],
        &["--set", "train.no_such_key=1", "gen-tasks"],
        &["--set", "train.epochs=0", "gen-tasks"],
        &["--set", "seeds", "gen-tasks"],
        &[
            "eval",
            "--planner-ckpt",
            "/definitely/missing",
            "--saycan-oracle",
            "--planner",
            "vp2",
        ],
        &["eval", "--planner-ckpt", "/definitely/missing"],
        &["train", "--planner", "ignore", "--aux", "inv-dyn"],
        &["train", "--planner", "captions", "--prompt-size", "3"],
        &["train", "--alpha", "0.5"],
        &["train", "--aux", "telepathy"],
        &["train", "--planner", "saycan-oracle"],
        &["eval", "--planner-ckpt", "x", "--split", "train"],
        &["ablate", "--arms", "vp2", "--acceptance"],
        &["report"],
    ];
    for args in cases {
        let o = vp2(out, args);
        assert_eq!(
            code(&o),
            2,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    // nothing was built by the rejected commands
    assert!(!out.join("lm").exists());
}

#[test]
fn help_exits_0() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vp2(tmp.path(), &["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for cmd in [
        "gen-tasks",
        "gen-demos",
        "pretrain-lm",
        "pretrain-vision",
        "train",
        "eval",
        "ablate",
        "report",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn corrupt_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ablate");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("reports.json"), "{ not json").unwrap();
    assert_eq!(code(&vp2(tmp.path(), &["report"])), 3);
}

/// The whole pipeline on a tiny configuration: stages, train, eval,
/// stage reuse, ablate and report.
#[test]
fn tiny_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    let run = |args: &[&str]| {
        let mut v = vec!["--config", cfg.as_str()];
        v.extend_from_slice(args);
        vp2(&out, &v)
    };

    ok(run(&[
        "train",
        "--planner",
        "vp2",
        "--samples",
        "100",
        "--name",
        "small",
    ]));
    for stage in ["tasks", "demos", "lm", "vision"] {
        assert!(out.join(stage).is_dir(), "{stage} missing");
    }
    let seed0 = out.join("policies/small/seed-0");
    for f in [
        "manifest.json",
        "params.ckpt",
        "vocab.txt",
        "stage.json",
        "train.json",
    ] {
        assert!(seed0.join(f).is_file(), "{f} missing");
    }
    let stage: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(seed0.join("stage.json")).unwrap()).unwrap();
    assert_eq!(stage["stage"], "train");
    assert_eq!(stage["config"]["suite"]["train"]["epochs"], 1);
    assert_eq!(stage["config_hash"].as_str().unwrap().len(), 64);

    let ckpt = out.join("policies/small");
    let ckpt = ckpt.to_str().unwrap();
    ok(run(&["eval", "--planner-ckpt", ckpt, "--split", "id"]));
    let results = out.join("eval/small-id/results.csv");
    let r = rows(&results);
    assert_eq!(r.len(), 1, "{r:?}");
    assert!(r[0].starts_with("small,"), "{}", r[0]);
    assert!(out.join("eval/small-id/manifest.json").is_file());

    // shared stages are reused when nothing changed
    let lm_ckpt = out.join("lm/lm_pretrained.ckpt");
    let before = std::fs::metadata(&lm_ckpt).unwrap().modified().unwrap();
    let first = std::fs::read(&results).unwrap();
    ok(run(&["train", "--planner", "ignore"]));
    assert_eq!(
        std::fs::metadata(&lm_ckpt).unwrap().modified().unwrap(),
        before
    );
    ok(run(&["eval", "--planner-ckpt", ckpt, "--split", "id"]));
    assert_eq!(
        std::fs::read(&results).unwrap(),
        first,
        "eval is deterministic"
    );

    // planner mismatch and non-SayCan oracle requests are usage errors
    assert_eq!(
        code(&run(&[
            "eval",
            "--planner-ckpt",
            ckpt,
            "--planner",
            "ignore"
        ])),
        2
    );
    assert_eq!(
        code(&run(&["eval", "--planner-ckpt", ckpt, "--saycan-oracle"])),
        2
    );

    let o = ok(run(&["ablate", "--arms", "vp2,ignore"]));
    assert!(o.contains("ID-normalized"));
    let ablate = out.join("ablate/results.csv");
    let r = rows(&ablate);
    // arms x splits x seeds
    assert_eq!(r.len(), 2 * 2);
    for arm in ["vp2", "ignore"] {
        assert_eq!(
            r.iter()
                .filter(|l| l.starts_with(&format!("{arm},")))
                .count(),
            2
        );
    }
    let emitted = std::fs::read(&ablate).unwrap();
    std::fs::remove_file(&ablate).unwrap();
    let o = ok(run(&["report"]));
    assert!(o.contains("vp2"));
    assert_eq!(std::fs::read(&ablate).unwrap(), emitted);
    assert_eq!(code(&run(&["ablate", "--arms", "nope"])), 2);
}

#[test]
fn non_finite_loss_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = vp2(
        &tmp.path().join("runs"),
        &[
            "--config",
            &cfg,
            "--set",
            "train.lm_lr=1e30",
            "--set",
            "train.vp_lr=1e30",
            "--set",
            "train.grad_clip=none",
            "--set",
            "train.epochs=3",
            "train",
            "--planner",
            "ignore",
        ],
    );
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lbdt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lbdt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn lbdt")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small model and dataset so a full train/eval cycle takes seconds.
const TINY: [&str; 8] = [
    "--samples=12",
    "--height=32",
    "--width=32",
    "--c_m=16",
    "--mlp_hidden=32",
    "--c_d=8",
    "--batch_size=4",
    "--word_dim=8",
];

fn tiny<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = extra.to_vec();
    v.extend_from_slice(&TINY);
    v
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&[][..], &["frobnicate"][..], &["flops", "--no-such-flag=1"][..]] {
        let o = lbdt(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).to_lowercase().contains("usage"), "{args:?}");
    }
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let o = lbdt(&["train", "--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("--lr"));
}

#[test]
fn invalid_values_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = lbdt(&["flops", "--c_m=7"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: "), "{}", stderr(&o));

    fs::write(dir.path().join("bad.conf"), "bogus_key = 3\n").unwrap();
    let o = lbdt(&["flops", "--config", "bad.conf"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus_key"), "{}", stderr(&o));
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.conf"), "# narrower medium\nc_m = 32\ninsert_stages = 5\n").unwrap();
    let from_file = stdout(&lbdt(&["flops", "--config", "run.conf"], dir.path()));
    let overridden = stdout(&lbdt(&["flops", "--config", "run.conf", "--c_m=16"], dir.path()));
    let default = stdout(&lbdt(&["flops"], dir.path()));
    let total = |s: &str| s.lines().last().unwrap().to_string();
    assert!(from_file.contains("lbdt.s5") && !from_file.contains("lbdt.s4"));
    assert_ne!(total(&from_file), total(&default));
    assert_ne!(total(&from_file), total(&overridden));
}

#[test]
fn flops_ledger_formats() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = lbdt(&["flops"], dir.path());
    assert!(tsv.status.success());
    let text = stdout(&tsv);
    assert!(text.starts_with("module\top\tdims\tflops\n"));
    assert!(text.lines().last().unwrap().starts_with("model\ttotal\t-\t"));
    let json = stdout(&lbdt(&["flops", "--format", "json"], dir.path()));
    let total: u64 = text.lines().last().unwrap().rsplit('\t').next().unwrap().parse().unwrap();
    assert!(json.trim_end().ends_with(&format!("\"total\": {total}}}")));
}

#[test]
fn bench_reports_both_variants() {
    let dir = tempfile::tempdir().unwrap();
    let o = lbdt(&["bench", "--reps=5", "--sides=4,8", "--c_m=8", "--words=3"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1 + 4);
    assert!(text.contains("bridged\t4\t4\t3\t8") && text.contains("direct\t8\t8\t3\t8"));
    let o = lbdt(&["bench", "--reps=4"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = lbdt(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).trim_end().ends_with("0 failed"));
}

#[test]
fn eval_scores_mask_directories_without_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = lbdt(&["gen-data", "--data_dir=d", "--samples=6", "--height=32", "--width=32"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = lbdt(&["eval", "--pred-dir=d", "--gt-dir=d"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let json = stdout(&o);
    assert!(json.contains("\"mean_iou\": 1.000000") && json.contains("\"f_mean\": 1.000000"), "{json}");
}

#[test]
fn train_eval_resume_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(lbdt(&tiny(&["gen-data"]), p).status.success());

    let o = lbdt(&tiny(&["train", "--epochs=1"]), p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("{\"overall_iou\": "));
    for f in ["config.txt", "train_log.jsonl", "best.ckpt", "last.ckpt"] {
        assert!(p.join("runs").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(p.join("runs/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.contains("\"initial_loss\"") && log.contains("\"config\": {"));

    let o = lbdt(&tiny(&["train", "--resume", "--epochs=2"]), p);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(p.join("runs/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().nth(1).unwrap().starts_with("{\"epoch\": 2,"));

    let a = lbdt(&["eval", "--checkpoint=runs/last.ckpt", "--pgm"], p);
    let b = lbdt(&["eval", "--checkpoint=runs/last.ckpt"], p);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(p.join("runs/eval_val.json").exists());
    assert!(p.join("runs/pred_val/00010_pred.lbdt").exists());
    assert!(p.join("runs/pred_val/00010_pred.pgm").exists());

    let o = lbdt(&["eval", "--pred-dir=runs/pred_val", "--gt-dir=data"], p);
    assert!(o.status.code() == Some(1), "train-split stems have no prediction");

    let o = lbdt(&["dump-attn", "--checkpoint=runs/last.ckpt", "--stage=4"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("\"fraction_concentrated\": "));
    assert!(p.join("runs/attn_val_s4/00010_attn.lbdt").exists());
    assert!(p.join("runs/attn_val_s4/00010_attn.lbdt.words.txt").exists());

    let o = lbdt(&["dump-attn", "--checkpoint=runs/last.ckpt", "--stage=3"], p);
    assert_eq!(o.status.code(), Some(1));
}

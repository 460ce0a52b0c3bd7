use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
epochs = 1
batch = 2
train_clips = 2
eval_clips = 1
queries = 4

[clip]
height = 32
width = 32
frames = 4
sprites = 2

[model]
d = 16
enc_channels = 8
mem_len = 3
mlp_ratio = 1
"#;

fn lbm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lbmtrack")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lbm(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_checkpoint(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = dir.join("run");
    ok(&["train", "--config", p(&cfg), "--out", p(&out), "--seed", "3"]);
    out.join("model.lbmt")
}

#[test]
fn gen_data_then_eval_gt_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let clip = dir.path().join("clip");
    ok(&["gen-data", "--out", p(&clip), "--seed", "4"]);
    assert!(clip.join("frame_0000.ppm").exists() && clip.join("frame_0011.ppm").exists());
    assert!(clip.join("detections.csv").exists());
    let report = ok(&["eval-points", "--tracks", p(&clip.join("gt.jsonl")), "--gt", p(&clip)]);
    for key in ["aj", "delta_avg", "oa"] {
        assert!(report.lines().any(|l| l == format!("{key} 1.000000")), "{report}");
    }
}

#[test]
fn gen_data_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--out", p(&a), "--seed", "9", "--frames", "5"]);
    ok(&["gen-data", "--out", p(&b), "--seed", "9", "--frames", "5"]);
    for name in ["gt.jsonl", "detections.csv", "frame_0000.ppm", "frame_0004.ppm"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn train_track_eval_and_associate() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let run = ckpt.parent().unwrap();
    let log = fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert!(log.starts_with("step\tlr\ttotal"));
    assert_eq!(log.lines().count(), 2);
    assert!(fs::read_to_string(run.join("eval.txt")).unwrap().starts_with("aj "));

    let clip = dir.path().join("clip");
    ok(&[
        "gen-data",
        "--out",
        p(&clip),
        "--seed",
        "2",
        "--height",
        "32",
        "--width",
        "32",
        "--frames",
        "5",
        "--queries",
        "4",
    ]);
    let (t1, t2) = (dir.path().join("t1.jsonl"), dir.path().join("t2.jsonl"));
    ok(&["track-points", "--checkpoint", p(&ckpt), "--clip", p(&clip), "--out", p(&t1)]);
    ok(&["track-points", "--checkpoint", p(&ckpt), "--clip", p(&clip), "--out", p(&t2)]);
    assert_eq!(fs::read(&t1).unwrap(), fs::read(&t2).unwrap());
    let report = ok(&["eval-points", "--tracks", p(&t1), "--gt", p(&clip.join("gt.jsonl"))]);
    assert_eq!(report.lines().count(), 13);

    let (e1, e2) = (dir.path().join("e1.tsv"), dir.path().join("e2.tsv"));
    ok(&["track-objects", "--checkpoint", p(&ckpt), "--clip", p(&clip), "--out", p(&e1), "--seed", "1"]);
    ok(&["track-objects", "--checkpoint", p(&ckpt), "--clip", p(&clip), "--out", p(&e2), "--seed", "1"]);
    let events = fs::read_to_string(&e1).unwrap();
    assert!(events.starts_with("frame\tevent\tinstance\tpayload\n"));
    assert!(events.contains("\tspawn\t"));
    assert_eq!(events, fs::read_to_string(&e2).unwrap());
    ok(&["track-objects", "--checkpoint", p(&ckpt), "--clip", p(&clip), "--out", p(&e2), "--matcher", "hungarian"]);
}

#[test]
fn unknown_command_and_flag_print_usage() {
    for args in [&["frobnicate"][..], &["gen-data", "--bogus", "1"][..]] {
        let out = lbm(args);
        assert!(!out.status.success());
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("Usage"), "{err}");
    }
}

#[test]
fn malformed_files_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let clip = dir.path().join("clip");
    ok(&["gen-data", "--out", p(&clip), "--seed", "1", "--frames", "3"]);
    let bad = dir.path().join("bad.jsonl");
    let gt = lbmtrack::io::GtFile::read(&clip.join("gt.jsonl")).unwrap();
    let mut text = String::from_utf8(lbmtrack::pipeline::gt_as_tracks(&gt).encode().unwrap()).unwrap();
    text.push_str("{not json}\n");
    fs::write(&bad, text).unwrap();
    let out = lbm(&["eval-points", "--tracks", p(&bad), "--gt", p(&clip)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("{}:5:", bad.display())), "{err}");

    let out = lbm(&["track-objects", "--checkpoint", "missing.lbmt", "--clip", p(&clip), "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.lbmt"));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "epochs = 1\nnot_a_key = 3\n").unwrap();
    let out = lbm(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(&format!("{}:2:", cfg.display())));
}

#[test]
fn malformed_detections_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let clip = dir.path().join("clip");
    ok(&[
        "gen-data",
        "--out",
        p(&clip),
        "--seed",
        "1",
        "--height",
        "32",
        "--width",
        "32",
        "--frames",
        "3",
        "--queries",
        "4",
    ]);
    let dets = dir.path().join("dets.csv");
    fs::write(&dets, "# header\n0,1,1,5,5,0,0.9\n1,1,x,5,5,0,0.9\n").unwrap();
    let out =
        lbm(&["track-objects", "--checkpoint", p(&ckpt), "--clip", p(&clip), "--detections", p(&dets), "--out", "x"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("{}:3:", dets.display())), "{err}");
}

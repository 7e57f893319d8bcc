use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use evtf::events::read_nmnist_file;

const TINY: &str = r#"
[model]
channels = 4
head_widths = [8]

[attention]
spconv_channels = [4, 8, 16]

[train]
epochs = 2
batch_size = 4
train_events = 128
milestones = [[0, 0.01]]

[data]
classes = 3
train_per_class = 3
test_per_class = 2
events = 128
"#;

fn evtf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evtf")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(evtf(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(evtf(&["bench", "--set", "model.width=3"]).status.code(), Some(2));
    assert_eq!(evtf(&["bench", "--fusion", "sum"]).status.code(), Some(2));
    assert_eq!(evtf(&["train", "--dataset", "/does/not/exist", "--out", "/tmp/x"]).status.code(), Some(2));
    assert_eq!(evtf(&["eval", "--checkpoint", "/does/not/exist.ckpt"]).status.code(), Some(2));
    assert_eq!(evtf(&["--help"]).status.code(), Some(0));
}

#[test]
fn inspect_summarises_a_recording() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    let made = evtf(&["make-synth", "--out", out.to_str().unwrap(), "--set", "data.train_per_class=1", "--set", "data.test_per_class=1"]);
    assert!(made.status.success());
    let file = out.join("Train/2/00000.bin");
    let o = evtf(&["inspect", file.to_str().unwrap(), "--dump", "4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "count=512");
    let stream = read_nmnist_file(&file).unwrap();
    let (t0, t1) = (stream.events()[0].t, stream.events().last().unwrap().t);
    assert_eq!(lines[1], format!("duration_us={}", t1 - t0));
    let counts: Vec<usize> =
        lines[2].split(' ').map(|kv| kv.split_once('=').unwrap().1.parse().unwrap()).collect();
    assert_eq!(counts.iter().sum::<usize>(), 512);
    assert_eq!(lines.len(), 4 + 4);

    let bad = dir.path().join("bad.bin");
    fs::write(&bad, [1u8, 2, 3]).unwrap();
    assert_eq!(evtf(&["inspect", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = evtf(&["train", "--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout(&o).lines().count(), 2);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for file in ["config.toml", "metrics.tsv", "model.ckpt"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let config = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(config.contains("num_classes = \"3\"") && config.contains("seed = \"7\""));

    let ck = a.join("model.ckpt");
    let eval = || evtf(&["eval", "--config", &cfg, "--checkpoint", ck.to_str().unwrap()]);
    let first = eval();
    assert!(first.status.success());
    assert!(stdout(&first).starts_with("top1="));
    assert_eq!(stdout(&first), stdout(&eval()));

    let mut bytes = fs::read(&ck).unwrap();
    bytes[0] ^= 0xFF;
    let corrupt = dir.path().join("corrupt.ckpt");
    fs::write(&corrupt, &bytes).unwrap();
    assert_eq!(evtf(&["eval", "--config", &cfg, "--checkpoint", corrupt.to_str().unwrap()]).status.code(), Some(4));
}

#[test]
fn divergence_exits_3_with_a_diagnostic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = evtf(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--set", "train.milestones=0:1e30"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(out.join("diverged.ckpt").exists());
}

#[test]
fn labels_must_fit_an_explicit_class_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = evtf(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--set", "model.num_classes=2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_names_the_faulty_rule() {
    let ok = evtf(&["gradcheck", "--instances", "2"]);
    assert!(ok.status.success());
    let report = stdout(&ok);
    for block in ["lxformer", "scformer", "gxformer", "sampling"] {
        assert!(report.lines().any(|l| l.contains(block)), "{block}");
    }
    let bad = evtf(&["gradcheck", "--instances", "2", "--fault", "segment_max"]);
    assert_eq!(bad.status.code(), Some(1));
    let last = stdout(&bad).lines().last().unwrap().to_string();
    assert!(last.starts_with("failed=") && last.contains("segment_max"), "{last}");
    assert_eq!(evtf(&["gradcheck", "--fault", "nope"]).status.code(), Some(2));
}

fn module_params(report: &str) -> Vec<(String, String)> {
    report
        .lines()
        .filter_map(|l| l.strip_prefix("module="))
        .map(|l| {
            let mut parts = l.split(' ');
            (parts.next().unwrap().to_string(), parts.next().unwrap().to_string())
        })
        .collect()
}

#[test]
fn bench_is_deterministic_and_window_only_touches_sparse_blocks() {
    let args = ["bench", "--runs", "1", "--events", "256"];
    let a = stdout(&evtf(&args));
    let b = stdout(&evtf(&args));
    assert_eq!(a.lines().next(), b.lines().next());
    assert!(a.lines().any(|l| l.starts_with("reference") && l.contains("15.87M") && l.contains("0.51G")));
    let w = stdout(&evtf(&["bench", "--runs", "1", "--events", "256", "--ablate-window", "1"]));
    assert_ne!(a.lines().next(), w.lines().next());
    for ((name, pa), (_, pw)) in module_params(&a).iter().zip(module_params(&w)) {
        if !name.ends_with('S') {
            assert_eq!(*pa, pw, "{name}");
        }
    }
}

use std::path::Path;
use std::process::{Command, Output};

fn savgrid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_savgrid")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = savgrid(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 16] = [
    "--set", "gridnet.d=4",
    "--set", "gridnet.blocks=1",
    "--set", "gridnet.hidden=4",
    "--set", "gridnet.heads=2",
    "--set", "gridnet.key_dim=2",
    "--set", "train.epochs=1",
    "--set", "classifier_train.epochs=1",
    "--set", "scenes.duration_s=0.5",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY).collect()
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&with_tiny(&["simulate", "--out", p(d), "--count", "3", "--seed", "4"]));
    }
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    assert_eq!(ta.len(), 3 * 4 + 2);
    assert_eq!(ta, tb);
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = savgrid(&["--set", "nonsense.key=1", "simulate", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let out = savgrid(&["--set", "scenes.noise_ratio=2", "simulate", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));

    let missing = tmp.path().join("missing");
    let out = savgrid(&["train-classifier", "--data", p(&missing), "--out", p(&tmp.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));

    let bogus = tmp.path().join("bogus.csv");
    std::fs::write(&bogus, "not,a,records,file\n").unwrap();
    let out = savgrid(&["report", "--records", p(&bogus)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_route_evaluate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = t.join("data");
    ok(&with_tiny(&["simulate", "--out", p(&data), "--count", "4", "--seed", "2"]));

    let ck = |n: &str| t.join(n);
    for (role, name) in [("universal", "u.ckpt"), ("speech", "s.ckpt"), ("noise", "n.ckpt")] {
        ok(&with_tiny(&["train-extractor", "--data", p(&data), "--role", role, "--out", p(&ck(name))]));
    }
    ok(&with_tiny(&["train-extractor", "--data", p(&data), "--init", p(&ck("u.ckpt")), "--dynamic-mixing", "--out", p(&ck("u2.ckpt"))]));
    ok(&with_tiny(&["train-classifier", "--data", p(&data), "--out", p(&ck("c.ckpt"))]));

    let wav = t.join("one.wav");
    ok(&["extract", "--model", p(&ck("u.ckpt")), "--data", p(&data), "--scene", "scene00001", "--out", p(&wav)]);
    assert!(std::fs::metadata(&wav).unwrap().len() > 44);
    let face = data.join("face/scene00001.ftrk");
    let mix = data.join("audio/scene00001_mixture.wav");
    ok(&["extract", "--model", p(&ck("u.ckpt")), "--wav", p(&mix), "--face", p(&face), "--out", p(&wav)]);

    let paths = ["u.ckpt", "s.ckpt", "n.ckpt", "c.ckpt"].map(|n| ck(n).display().to_string());
    let flags = ["--universal", "--speech-expert", "--noise-expert", "--classifier"];
    let bundle: Vec<&str> = flags.iter().zip(&paths).flat_map(|(f, v)| [*f, v.as_str()]).collect();
    let trail = t.join("trail.tsv");
    let mut args = vec!["route", "--strategy", "pp2", "--data", p(&data), "--trail", p(&trail)];
    args.extend(&bundle);
    ok(&args);
    assert_eq!(std::fs::read_to_string(&trail).unwrap().lines().count(), 5);

    let recs = t.join("recs.csv");
    let mut args = vec!["evaluate", "--data", p(&data), "--system", "cascade", "--strategy", "pp1", "--records", p(&recs)];
    args.extend(&bundle);
    let summary = ok(&args);
    assert!(summary.contains("overall"), "{summary}");

    let base = t.join("identity.csv");
    ok(&["evaluate", "--data", p(&data), "--system", "identity", "--records", p(&base)]);
    let report = ok(&["report", "--records", p(&base), "--compare", p(&recs), "--trail", p(&trail), "--data", p(&data)]);
    assert!(report.contains("outliers"), "{report}");
}

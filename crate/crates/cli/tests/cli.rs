use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hrsegnet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

const TINY: &str = "[model]
base = 2
num_blocks = 2
layers_per_block = 1

[train]
max_iters = 4
warmup_iters = 1
batch_size = 2
seed = 3
checkpoint_every = 2

[data]
crop = 64
";

fn dataset(dir: &Path, count: &str) {
    let o = run(&["gen-data", "--out", p(dir), "--count", count, "--size", "64", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn train(cfg: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Output {
    let mut args = vec!["train", "--config", p(cfg), "--data", p(data), "--out", p(out), "--log-every", "0"];
    if let Some(r) = resume {
        args.extend(["--resume", p(r)]);
    }
    run(&args)
}

/// Error output is one line with the `hrsegnet: <kind> error` prefix.
fn assert_error(o: &Output, kind: &str) -> String {
    assert!(!o.status.success());
    let err = stderr(o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("hrsegnet: {kind} error")), "{err}");
    err
}

#[test]
fn gen_data_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    dataset(&a, "3");
    dataset(&b, "3");
    for name in ["image_0002.png", "mask_0002.png", "manifest.txt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    assert_error(&run(&["gen-data", "--out", p(&t.path().join("c")), "--count", "0"]), "usage");
    assert!(!t.path().join("c").exists());
}

#[test]
fn analyze_prints_parseable_totals() {
    let o = run(&["analyze", "--config", p(&configs().join("b16.txt")), "--input-size", "400"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let last = out.lines().last().unwrap();
    let fields: Vec<f64> = last
        .split(' ')
        .map(|kv| kv.split_once('=').unwrap().1.parse().unwrap())
        .collect();
    assert!(last.starts_with("params="), "{last}");
    assert!((fields[0] / 0.61 - 1.0).abs() <= 0.20);
    assert!((fields[1] / 0.66 - 1.0).abs() <= 0.10);
    assert!(out.contains("head.cls"));
}

#[test]
fn analyze_rejects_unknown_key() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.txt");
    fs::write(&cfg, "[model]\nbase = 16\nwidht = 3\n").unwrap();
    let err = assert_error(&run(&["analyze", "--config", p(&cfg)]), "config");
    assert!(err.contains("model.widht"), "{err}");
    assert_error(&run(&["analyze", "--config", p(&cfg), "--input-size", "4x"]), "usage");
}

#[test]
fn train_resume_eval_predict() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    dataset(&data, "4");
    let cfg = t.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();

    let one = t.path().join("one");
    let o = train(&cfg, &data, &one, None);
    assert!(o.status.success(), "{}", stderr(&o));
    let last = stdout(&o).lines().last().unwrap().to_string();
    assert!(last.ends_with("ckpt_000004.hrsg"), "{last}");
    let csv = fs::read_to_string(one.join("loss.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "iter,lr,total_loss,primary_loss,aux1,aux2");
    assert_eq!(rows.len(), 5);
    for r in &rows[1..] {
        assert!(r.split(',').skip(1).all(|v| v.parse::<f64>().unwrap().is_finite()), "{r}");
    }

    // Two-phase run: resume from the iteration-2 checkpoint.
    let two = t.path().join("two");
    let o = train(&cfg, &data, &two, Some(&one.join("ckpt_000002.hrsg")));
    assert!(o.status.success(), "{}", stderr(&o));
    let resumed = fs::read_to_string(two.join("loss.csv")).unwrap();
    let resumed: Vec<&str> = resumed.lines().collect();
    assert_eq!(&resumed[1..], &rows[3..]);
    assert_eq!(fs::read(two.join("ckpt_000004.hrsg")).unwrap(), fs::read(one.join("ckpt_000004.hrsg")).unwrap());

    let ck = one.join("ckpt_000004.hrsg");
    let o = run(&["eval", "--checkpoint", p(&ck), "--data", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[lines.len() - 2], "miou,precision,recall,f1");
    assert_eq!(lines.last().unwrap().split(',').count(), 4);

    let img = data.join("image_0001.png");
    let (m1, m2) = (t.path().join("m1.png"), t.path().join("m2.png"));
    for m in [&m1, &m2] {
        let o = run(&["predict", "--checkpoint", p(&ck), "--image", p(&img), "--out", p(m)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    let mask = hrsegnet::data::read_mask(&m1).unwrap();
    assert_eq!((mask.height, mask.width), (64, 64));
    let over = hrsegnet::data::read_image(&t.path().join("m1_overlay.png")).unwrap();
    assert_eq!(over.dims(), [1, 3, 64, 64]);

    let bogus = t.path().join("bogus.png");
    fs::write(&bogus, b"not a png").unwrap();
    assert_error(&run(&["predict", "--checkpoint", p(&ck), "--image", p(&bogus), "--out", p(&m1)]), "i/o");
    let broken = t.path().join("broken.hrsg");
    let mut bytes = fs::read(&ck).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&broken, bytes).unwrap();
    assert_error(&run(&["eval", "--checkpoint", p(&broken), "--data", p(&data)]), "format");
}

#[test]
fn train_errors_are_single_lines() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    let missing = t.path().join("no_such_dir");
    let err = assert_error(&train(&cfg, &missing, &t.path().join("o"), None), "i/o");
    assert!(err.contains("no_such_dir"), "{err}");

    let bad = t.path().join("bad.txt");
    fs::write(&bad, format!("{TINY}\nlearning_rate = 1\n")).unwrap();
    let err = assert_error(&train(&bad, &missing, &t.path().join("o"), None), "config");
    assert!(err.contains("learning_rate"), "{err}");

    let data = t.path().join("data");
    dataset(&data, "2");
    let nan = t.path().join("nan.txt");
    fs::write(&nan, TINY.replace("[train]\n", "[train]\nbase_lr = 1e30\n")).unwrap();
    assert_error(&train(&nan, &data, &t.path().join("o2"), None), "numeric");
}

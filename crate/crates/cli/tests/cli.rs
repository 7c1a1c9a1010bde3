use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mscc(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mscc"));
    c.args(args).env_remove("MSCC_SEED");
    c
}

fn ok(mut c: Command) -> Output {
    let out = c.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let path = e.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let out = dir.join(name);
    let mut args = vec!["synth", "--out", p(&out), "--classes", "2", "--per-class", "4", "--size", "16"];
    args.extend_from_slice(extra);
    ok(mscc(&args));
    out
}

#[test]
fn synth_ingest_split_flow() {
    let dir = tempfile::tempdir().unwrap();
    let raw = synth(dir.path(), "raw", &["--seed", "2"]);
    let work = dir.path().join("work");
    ok(mscc(&["ingest", p(&raw), "--out", p(&work), "--size", "16"]));
    let manifest = work.join("manifest.csv");
    let before = fs::read_to_string(&manifest).unwrap();
    assert_eq!(before.lines().filter(|l| l.ends_with(',')).count(), 8);
    let out = ok(mscc(&["split", p(&manifest), "--seed", "4"]));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train 2 / val 2 / test 4"));
    let text = fs::read_to_string(&manifest).unwrap();
    assert!(text.starts_with("# seed=4\nclass,stem,image,gt,split\n"));
    assert_eq!(text.lines().filter(|l| l.ends_with(",test")).count(), 4);
}

#[test]
fn seed_flag_then_config_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "# desk run\nseed = 3\n").unwrap();
    let flag = tree_bytes(&synth(dir.path(), "flag", &["--seed", "3"]));
    let file = tree_bytes(&synth(dir.path(), "file", &["--config", p(&cfg)]));
    let over = tree_bytes(&synth(dir.path(), "over", &["--config", p(&cfg), "--seed", "5"]));
    let other = tree_bytes(&synth(dir.path(), "other", &["--seed", "5"]));
    assert_eq!(flag, file);
    assert_eq!(over, other);
    assert_ne!(flag, other);
    let mut c = mscc(&["synth", "--out", p(&dir.path().join("env")), "--classes", "2", "--per-class", "4", "--size", "16"]);
    c.env("MSCC_SEED", "3");
    ok(c);
    assert_eq!(tree_bytes(&dir.path().join("env")), flag);
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = mscc(&["--config", p(&cfg), "params"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn params_prints_counts_and_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("b3.spec");
    let out = ok(mscc(&["params", "--arch", "b3", "--widths", "full", "--size", "256", "--emit-spec", p(&spec)]));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("total 2425237"), "{stderr}");
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.lines().count() > 10);
    let again = ok(mscc(&["params", "--spec", p(&spec)]));
    assert_eq!(String::from_utf8(again.stdout).unwrap(), csv);
}

fn write_pgm(path: &Path, w: usize, h: usize, data: &[u8]) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes).unwrap();
}

#[test]
fn crf_fuse_render_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let n = 12;
    let inside = |i: usize| (3..9).contains(&(i % n)) && (3..9).contains(&(i / n));
    let image: Vec<u8> = (0..n * n).map(|i| if inside(i) { 200 } else { 40 }).collect();
    let mut noisy: Vec<u8> = (0..n * n).map(|i| if inside(i) { 255 } else { 0 }).collect();
    noisy[0] = 255;
    let gt: Vec<u8> = (0..n * n).map(|i| if inside(i) { 255 } else { 0 }).collect();
    let patch: Vec<u8> = (0..n * n).map(|i| if i % n >= 6 { 255 } else { 0 }).collect();
    for (name, data) in [("img", &image), ("noisy", &noisy), ("gt", &gt), ("patch", &patch)] {
        write_pgm(&d.join(format!("{name}.pgm")), n, n, data);
    }
    let j = |s: &str| d.join(s).to_str().unwrap().to_string();
    ok(mscc(&[
        "crf", "--image", &j("img.pgm"), "--mask", &j("noisy.pgm"), "--out", &j("crf.pgm"), "--energy-csv", &j("energy.csv"),
    ]));
    let energy = fs::read_to_string(d.join("energy.csv")).unwrap();
    assert!(energy.starts_with("iteration,energy\n0,"));
    assert_eq!(energy.lines().count(), 12);
    ok(mscc(&[
        "fuse", "--pixel", &j("crf.pgm"), "--patch", &j("patch.pgm"), "--radius", "0", "--out", &j("fused0.pgm"),
    ]));
    assert_eq!(fs::read(d.join("fused0.pgm")).unwrap(), fs::read(d.join("crf.pgm")).unwrap());
    ok(mscc(&[
        "fuse", "--pixel", &j("crf.pgm"), "--patch", &j("patch.pgm"), "--image", &j("img.pgm"), "--gt", &j("gt.pgm"),
        "--radius", "2", "--out", &j("fused.pgm"), "--overlay", &j("overlay.png"), "--sweep", &j("sweep.csv"),
    ]));
    assert!(fs::read(d.join("overlay.png")).unwrap().starts_with(b"\x89PNG"));
    assert!(fs::read_to_string(d.join("sweep.csv")).unwrap().starts_with("radius,dice,jaccard,recall,accuracy,voe\n2,"));
    ok(mscc(&[
        "render", "--image", &j("img.pgm"), "--pixel", &j("crf.pgm"), "--patch", &j("patch.pgm"), "--gt", &j("gt.pgm"),
        "--out", &j("render.png"),
    ]));
    assert!(d.join("render.png").exists());
    let out = ok(mscc(&["evaluate", "--pred", &j("gt.pgm"), "--gt", &j("gt.pgm")]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("1.0000") || text.contains(",1,"), "{text}");
}

#[test]
fn fuse_overlay_needs_an_image() {
    let out = mscc(&["fuse", "--pixel", "a", "--patch", "b", "--out", "c", "--overlay", "d"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn missing_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let raw = synth(dir.path(), "raw", &[]);
    let work = dir.path().join("work");
    ok(mscc(&["ingest", p(&raw), "--out", p(&work), "--size", "16"]));
    let m = work.join("manifest.csv");
    ok(mscc(&["split", p(&m)]));
    let out = mscc(&[
        "infer", p(&m), "--pixel-ckpt", p(&dir.path().join("none.ckpt")), "--patch-ckpt", p(&dir.path().join("none2.ckpt")),
        "--out", p(&dir.path().join("res")),
    ])
    .output()
    .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.ckpt"));
}

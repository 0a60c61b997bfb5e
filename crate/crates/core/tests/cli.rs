use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stemdiff::dsp::{SampleFormat, Waveform};
use stemdiff::pipeline::RunConfig;

fn stemdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stemdiff")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = stemdiff(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    stemdiff(args).status.code().unwrap()
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_owned()
}

/// Value printed as `name value` on stdout.
fn field(stdout: &str, name: &str) -> f64 {
    stdout.lines().find_map(|l| l.strip_prefix(name)).unwrap_or_else(|| panic!("no {name} in {stdout:?}")).trim().parse().unwrap()
}

fn tone(freq: f64, len: usize) -> Waveform {
    Waveform::mono((0..len).map(|n| 0.2 * (std::f64::consts::TAU * freq * n as f64 / 16_000.0).sin()).collect(), 16_000).unwrap()
}

/// Three tracks with `bass.wav` plus two other stems each.
fn wav_dataset(root: &Path) -> PathBuf {
    let dir = root.join("tracks");
    for t in 0..3 {
        let track = dir.join(format!("track{t}"));
        std::fs::create_dir_all(&track).unwrap();
        let len = 6000 + 512 * t;
        tone(55.0 * (t + 1) as f64, len).write_wav(track.join("bass.wav"), SampleFormat::Pcm16).unwrap();
        tone(440.0, len).write_wav(track.join("keys.wav"), SampleFormat::Pcm16).unwrap();
        tone(880.0, len).write_wav(track.join("drums.wav"), SampleFormat::Pcm16).unwrap();
    }
    dir
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert!(ok(&["sample", "--help"]).contains("--cfg-convention"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&["--bogus"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["sample", "--model", "m", "--cond", "c", "--out", "o", "--steps", "many"]), 1);
    assert_eq!(code(&["synth-data", "--rule", "cubic", "--out", "x"]), 1);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[sample]\nsteps = 0\n").unwrap();
    assert_eq!(code(&["--config", &s(&bad), "synth-data", "--out", &s(&dir.path().join("d"))]), 1);
    assert_eq!(code(&["--config", &s(&dir.path().join("missing.toml")), "synth-data", "--out", "x"]), 1);
    assert_eq!(code(&["diff-train", "--out", &s(&dir.path().join("m"))]), 1);
}

#[test]
fn missing_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(&dir.path().join("o.lats"));
    assert_eq!(code(&["sample", "--model", "/no/such/model", "--cond", "/no/such.lats", "--out", &out]), 2);
    assert_eq!(code(&["eval", "frechet", "/no/a", "/no/b"]), 2);
}

#[test]
fn shipped_config_is_the_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn latent_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&["--seed", "3", "synth-data", "--items", "20", "--out", &s(&p("data"))]);
    assert!(p("data/rule.json").exists());

    let csv = p("loss.csv");
    ok(&["diff-train", "--data", &s(&p("data")), "--iters", "4", "--metrics", &s(&csv), "--out", &s(&p("den.ckpt"))]);
    let log = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss"));
    assert_eq!(log.lines().count(), 5);

    let same = ok(&["eval", "frechet", &s(&p("data/train")), &s(&p("data/train"))]);
    assert!(field(&same, "frechet").abs() < 1e-6, "{same}");

    let coh = ok(&["eval", "coherence", "--model", &s(&p("den.ckpt")), "--data", &s(&p("data")), "--limit", "2", "-K", "2"]);
    let r = field(&coh, "pearson");
    assert!((-1.0..=1.0).contains(&r));

    let cond = std::fs::read_dir(p("data/test")).unwrap().map(|e| e.unwrap().path()).find(|f| s(f).ends_with("_mix.lats")).unwrap();
    let style = std::fs::read_dir(p("data/train")).unwrap().map(|e| e.unwrap().path()).find(|f| s(f).ends_with("_stem.lats")).unwrap();
    let guided = [
        "sample", "--model", &s(&p("den.ckpt")), "--cond", &s(&cond), "-K", "3", "--cfg-weight", "1.5", "--phi", "0.7",
        "--cfg-convention", "standard", "--style", &s(&style), "--out", &s(&p("g.lats")),
    ];
    ok(&guided);
    assert!(p("g.lats").exists() && !p("g.wav").exists());

    let dist = ok(&["eval", "style", "--style", &s(&style), &s(&p("data/train"))]);
    assert!(field(&dist, "cosine") >= 0.0 && field(&dist, "euclidean") >= 0.0);
}

#[test]
fn audio_commands_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let tracks = wav_dataset(dir.path());
    let csv = p("ae.csv");
    ok(&["ae-train", "--data", &s(&tracks), "--iters", "2", "--metrics", &s(&csv), "--out", &s(&p("ae.ckpt"))]);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().next(), Some("step,loss,rec,mssd,adv,critic"));

    let bass = tracks.join("track0/bass.wav");
    ok(&["encode", "--ae", &s(&p("ae.ckpt")), &s(&bass), "--out", &s(&p("bass.lats"))]);
    ok(&["decode", "--ae", &s(&p("ae.ckpt")), &s(&p("bass.lats")), "--out", &s(&p("bass_rt.wav"))]);
    let back = Waveform::read_wav(p("bass_rt.wav"), Some(16_000)).unwrap();
    assert_eq!(back.len(), 6000usize.div_ceil(256) * 256);

    let same = ok(&["eval", "frechet", &s(&tracks.join("track0")), &s(&tracks.join("track0"))]);
    assert!(field(&same, "frechet").abs() < 1e-6, "{same}");
}

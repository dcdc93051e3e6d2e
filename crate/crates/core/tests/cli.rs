use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mudiff::cli::{write_latent, LatentHeader};
use mudiff::config::{Preset, RunConfig};
use mudiff::nn::Tensor;
use mudiff::signal::wav::{read_wav, write_wav, WavEncoding};
use mudiff::signal::Waveform;
use sha2::{Digest, Sha256};

fn mudiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mudiff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = mudiff(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    o
}

fn code(args: &[&str]) -> (i32, String) {
    let o = mudiff(args);
    (o.status.code().unwrap_or(-1), stderr(&o))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Tiny);
    cfg.train1.crop_length = 1024;
    cfg.train1.batch_size = 2;
    cfg.train1.steps = 4;
    cfg.train1.checkpoint_every = 2;
    cfg.stage2.latent_length = 8;
    cfg.train2.crop_length = 8 * cfg.stage1.samples_per_latent().unwrap();
    cfg.train2.batch_size = 2;
    cfg.train2.steps = 3;
    cfg.train2.checkpoint_every = 0;
    cfg.generate.steps_gen = 4;
    cfg.generate.steps_dec = 4;
    cfg.validate().unwrap();
    cfg
}

fn tone(freq: f64, len: usize) -> Waveform {
    let data = (0..len)
        .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 8000.0).sin()) as f32)
        .collect();
    Waveform::new(data, 1, 8000).unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    manifest: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.toml");
    std::fs::write(&config, small_config().to_toml_string().unwrap()).unwrap();
    let mut lines = String::new();
    for (i, f) in [220.0, 330.0, 440.0].iter().enumerate() {
        let name = format!("tone{i}.wav");
        write_wav(root.join(&name), &tone(*f, 3000), WavEncoding::Float32).unwrap();
        lines.push_str(&format!(
            "{name}\tTone {i}\tOscillator\tSines\tTest\t2024\n"
        ));
    }
    let manifest = root.join("manifest.tsv");
    std::fs::write(&manifest, lines).unwrap();
    Workspace {
        _dir: dir,
        root,
        config,
        manifest,
    }
}

fn loss_values(path: &Path) -> Vec<(u64, String)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            assert_eq!(cols.len(), 3, "loss line {l:?}");
            (cols[0].parse().unwrap(), cols[1].to_string())
        })
        .collect()
}

fn sha256(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn help_and_version_succeed() {
    assert!(stdout(&ok(&["--help"])).contains("train"));
    ok(&["--version"]);
    ok(&["train", "--help"]);
}

#[test]
fn bad_arguments_are_usage_errors() {
    let (c, err) = code(&["--no-such-flag"]);
    assert_eq!(c, 1);
    assert!(err.starts_with("error[usage]:"), "{err}");
    let (c, err) = code(&["--preset", "tiny"]);
    assert_eq!(c, 1);
    assert!(err.starts_with("error[usage]:"), "{err}");
    let (c, _) = code(&["--preset", "huge", "--dump-config"]);
    assert_eq!(c, 1);
}

#[test]
fn dumped_config_round_trips() {
    for preset in ["tiny", "full"] {
        let dumped = stdout(&ok(&["--preset", preset, "--dump-config"]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, &dumped).unwrap();
        let again = stdout(&ok(&["--config", s(&path), "--dump-config"]));
        assert_eq!(dumped, again);
    }
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    let mut text = RunConfig::preset(Preset::Tiny).to_toml_string().unwrap();
    text = text.replacen("[generate]\n", "[generate]\nwarp_factor = 9\n", 1);
    std::fs::write(&path, text).unwrap();
    let (c, err) = code(&["--config", s(&path), "--dump-config"]);
    assert_ne!(c, 0);
    assert!(err.contains("warp_factor"), "{err}");
}

#[test]
fn invalid_config_values_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    let mut cfg = small_config();
    cfg.train2.crop_length += 1;
    cfg.generate.steps_gen = 0;
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    let (c, err) = code(&["--config", s(&path), "--dump-config"]);
    assert_eq!(c, 1);
    assert!(
        err.contains("train2.crop_length") && err.contains("generate:"),
        "{err}"
    );
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.ckpt");
    let (c, err) = code(&["inspect", s(&missing)]);
    assert_eq!(c, 2);
    assert!(err.starts_with("error[data]:"), "{err}");
    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"definitely not a checkpoint").unwrap();
    let (c, _) = code(&["inspect", s(&garbage)]);
    assert_eq!(c, 2);
    let (c, _) = code(&["profile", "--dir", s(&dir.path().join("nowhere"))]);
    assert_eq!(c, 2);
}

#[test]
fn stage_two_requires_stage_one() {
    let ws = workspace();
    let out = ws.root.join("out");
    let (c, err) = code(&[
        "--config",
        s(&ws.config),
        "train",
        "--stage",
        "2",
        "--manifest",
        s(&ws.manifest),
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(c, 1);
    assert!(err.contains("--stage1"), "{err}");
}

#[test]
fn end_to_end_pipeline() {
    let ws = workspace();
    let cfg = s(&ws.config);
    let manifest = s(&ws.manifest);

    let out = ws.root.join("out");
    ok(&[
        "--config",
        cfg,
        "train",
        "--stage",
        "1",
        "--manifest",
        manifest,
        "--out-dir",
        s(&out),
        "--steps",
        "2",
    ]);
    let stage1 = out.join("stage1.ckpt");
    assert!(out.join("stage1_step0000002.ckpt").exists());
    ok(&[
        "--config",
        cfg,
        "train",
        "--stage",
        "1",
        "--manifest",
        manifest,
        "--out-dir",
        s(&out),
        "--resume",
        s(&stage1),
        "--steps",
        "4",
    ]);
    let resumed = loss_values(&out.join("stage1_loss.tsv"));
    assert_eq!(
        resumed.iter().map(|r| r.0).collect::<Vec<_>>(),
        vec![1, 2, 3, 4]
    );
    assert!(out.join("stage1_step0000004.ckpt").exists());

    let fresh = ws.root.join("fresh");
    ok(&[
        "--config",
        cfg,
        "train",
        "--stage",
        "1",
        "--manifest",
        manifest,
        "--out-dir",
        s(&fresh),
    ]);
    assert_eq!(loss_values(&fresh.join("stage1_loss.tsv")), resumed);

    let report = stdout(&ok(&["inspect", s(&stage1)]));
    assert!(report.contains("step"), "{report}");

    ok(&[
        "--config",
        cfg,
        "train",
        "--stage",
        "2",
        "--manifest",
        manifest,
        "--out-dir",
        s(&out),
        "--stage1",
        s(&stage1),
    ]);
    let stage2 = out.join("stage2.ckpt");
    assert_eq!(loss_values(&out.join("stage2_loss.tsv")).len(), 3);
    ok(&["inspect", s(&stage2)]);

    let gen = |name: &str, extra: &[&str]| {
        let path = ws.root.join(name);
        let mut args = vec![
            "--config",
            cfg,
            "generate",
            "--prompt",
            "Tone 1, Oscillator, 1 of 2",
            "--stage1",
            s(&stage1),
            "--stage2",
            s(&stage2),
            "--seed",
            "5",
            "--out",
        ];
        args.push(s(&path));
        args.extend_from_slice(extra);
        ok(&args);
        path
    };
    let a = gen("a.wav", &[]);
    let b = gen("b.wav", &[]);
    let a = a.with_file_name("a_1_of_2.wav");
    let b = b.with_file_name("b_1_of_2.wav");
    assert!(a.exists() && b.exists());
    assert_eq!(sha256(&a), sha256(&b));
    let w = read_wav(&a).unwrap();
    assert_eq!(w.len(), small_config().train2.crop_length);
    let c = gen(
        "c.wav",
        &["--steps-gen", "10", "--steps-dec", "10", "--cfg-scale", "1"],
    );
    assert_ne!(sha256(&a), sha256(&c.with_file_name("c_1_of_2.wav")));

    let (bad, err) = code(&[
        "--config",
        cfg,
        "generate",
        "--prompt",
        "x",
        "--stage1",
        s(&stage2),
        "--stage2",
        s(&stage2),
    ]);
    assert_eq!(bad, 2, "{err}");

    let input = ws.root.join("tone1.wav");
    let latent = ws.root.join("tone1.lat");
    ok(&[
        "codec",
        "encode",
        "--stage1",
        s(&stage1),
        "--input",
        s(&input),
        "--output",
        s(&latent),
    ]);
    let padded = small_config().stage1.padded_length(3000).unwrap();
    let payload = padded * 4 / small_config().stage1.compression;
    let size = std::fs::metadata(&latent).unwrap().len() as usize;
    assert!(
        size >= payload && size < payload + 512,
        "latent file {size} bytes, payload {payload}"
    );
    let decoded = ws.root.join("decoded.wav");
    ok(&[
        "codec",
        "decode",
        "--stage1",
        s(&stage1),
        "--input",
        s(&latent),
        "--output",
        s(&decoded),
        "--steps-dec",
        "3",
    ]);
    let d = read_wav(&decoded).unwrap();
    assert_eq!((d.channels(), d.len(), d.sample_rate()), (1, 3000, 8000));

    let wrong = ws.root.join("wrong.lat");
    let header = LatentHeader {
        latent_channels: 3,
        latent_length: 8,
        audio_channels: 1,
        sample_rate: 8000,
        samples: 1024,
    };
    write_latent(&wrong, &header, &Tensor::zeros([1, 3, 8])).unwrap();
    let (c, err) = code(&[
        "codec",
        "decode",
        "--stage1",
        s(&stage1),
        "--input",
        s(&wrong),
        "--output",
        s(&decoded),
    ]);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains('3'), "{err}");

    let csv = ws.root.join("profile.csv");
    ok(&["profile", "--dir", s(&ws.root), "--csv", s(&csv)]);
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(table.lines().count() >= 2, "{table}");
}

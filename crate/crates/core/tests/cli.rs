use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use streamvc::io::{load_checkpoint, FeatureFile};
use streamvc::Tensor;

const SMALL_CONFIG: &str = "\
num_encoder_blocks = 2
num_decoder_blocks = 1
model_dim = 32
heads = 4
conv_kernel = 7
input_dim = 12
output_dim = 10
speaker_dim = 6
";

fn streamvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamvc"))
        .args(args)
        .env_remove("DVC2_SEED")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("model.toml"), SMALL_CONFIG).unwrap();
        std::fs::write(dir.path().join("spk.txt"), "0.5 -1.0 0.25\n2.0 0.0 -0.75\n").unwrap();
        let frames: Vec<f32> = (0..37 * 12).map(|i| ((i * 7919) % 200) as f32 / 100.0 - 1.0).collect();
        FeatureFile {
            frame_shift_ms: 10.0,
            frames: Tensor::new(vec![37, 12], frames).unwrap(),
        }
        .write(dir.path().join("in.feat"))
        .unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn init(&self, out: &str, seed: &str) -> Output {
        streamvc(&[
            "init-random",
            "--config",
            p(&self.path("model.toml")),
            "--seed",
            seed,
            "--out",
            p(&self.path(out)),
        ])
    }

    fn convert(&self, model: &str, mode: &str, chunk: &str, out: &str) -> Output {
        streamvc(&[
            "convert",
            "--model",
            p(&self.path(model)),
            "--input",
            p(&self.path("in.feat")),
            "--speaker",
            p(&self.path("spk.txt")),
            "--mode",
            mode,
            "--chunk-frames",
            chunk,
            "--output",
            p(&self.path(out)),
        ])
    }
}

#[test]
fn init_random_is_deterministic_per_seed() {
    let f = Fixture::new();
    assert!(f.init("a.ckpt", "3").status.success());
    assert!(f.init("b.ckpt", "3").status.success());
    assert!(f.init("c.ckpt", "4").status.success());
    let read = |n: &str| std::fs::read(f.path(n)).unwrap();
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    assert_ne!(read("a.ckpt"), read("c.ckpt"));
    let model = load_checkpoint(f.path("a.ckpt")).unwrap();
    assert_eq!(model.config().model_dim, 32);
    assert_eq!(model.config().conv_kernel, 7);
}

#[test]
fn seed_environment_variable_is_a_default_only() {
    let f = Fixture::new();
    let cfg = f.path("model.toml");
    let run = |out: &str, env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_streamvc"));
        cmd.args(["init-random", "--config", p(&cfg), "--out", p(&f.path(out))]);
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        match env {
            Some(v) => cmd.env("DVC2_SEED", v),
            None => cmd.env_remove("DVC2_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(f.path(out)).unwrap()
    };
    let env5 = run("e5.ckpt", Some("5"), None);
    let flag5 = run("f5.ckpt", None, Some("5"));
    let both = run("b.ckpt", Some("9"), Some("5"));
    let default = run("d.ckpt", None, None);
    assert_eq!(env5, flag5);
    assert_eq!(both, flag5);
    assert_ne!(default, flag5);
}

#[test]
fn convert_streaming_and_nonstreaming() {
    let f = Fixture::new();
    assert!(f.init("m.ckpt", "1").status.success());
    for (mode, out) in [("streaming", "s.feat"), ("nonstreaming", "n.feat")] {
        let o = f.convert("m.ckpt", mode, "8", out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let mel = FeatureFile::read(f.path(out)).unwrap();
        assert_eq!(mel.num_frames(), 37);
        assert_eq!(mel.dim(), 10);
        assert_eq!(mel.frame_shift_ms, 10.0);
        assert!(mel.frames.all_finite());
    }
    let s = FeatureFile::read(f.path("s.feat")).unwrap();
    let n = FeatureFile::read(f.path("n.feat")).unwrap();
    assert!(s.frames.max_abs_diff(&n.frames) > 0.0);

    assert!(f.convert("m.ckpt", "streaming", "8", "s2.feat").status.success());
    assert_eq!(
        std::fs::read(f.path("s.feat")).unwrap(),
        std::fs::read(f.path("s2.feat")).unwrap()
    );
}

#[test]
fn streaming_convert_matches_library_forward() {
    let f = Fixture::new();
    assert!(f.init("m.ckpt", "2").status.success());
    assert!(f.convert("m.ckpt", "streaming", "5", "s.feat").status.success());
    let model = load_checkpoint(f.path("m.ckpt")).unwrap();
    let input = FeatureFile::read(f.path("in.feat")).unwrap();
    let spk = streamvc::io::read_speaker(f.path("spk.txt")).unwrap();
    let expect = model
        .convert_utterance(&input.frames, &spk, &streamvc::ChunkSpec::frames(5).unwrap())
        .unwrap();
    let got = FeatureFile::read(f.path("s.feat")).unwrap();
    assert!(got.frames.max_abs_diff(&expect) <= 1e-4);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(streamvc(&["selftest", "--bogus"]).status.code(), Some(2));
    assert_eq!(streamvc(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(streamvc(&["convert", "--model", "x"]).status.code(), Some(2));
    let f = Fixture::new();
    assert!(f.init("m.ckpt", "1").status.success());
    assert_eq!(f.convert("m.ckpt", "sideways", "8", "o.feat").status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let f = Fixture::new();
    assert!(f.init("m.ckpt", "1").status.success());
    let mut bytes = std::fs::read(f.path("m.ckpt")).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(f.path("bad.ckpt"), &bytes).unwrap();
    let o = f.convert("bad.ckpt", "streaming", "8", "o.feat");
    assert_eq!(o.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());

    std::fs::write(f.path("spk.txt"), "1 2 3").unwrap();
    assert_eq!(f.convert("m.ckpt", "streaming", "8", "o.feat").status.code(), Some(1));
    assert_eq!(f.convert("missing.ckpt", "streaming", "8", "o.feat").status.code(), Some(1));
}

#[test]
fn bench_reports_stub_and_model_rows() {
    let f = Fixture::new();
    assert!(f.init("m.ckpt", "1").status.success());
    let o = streamvc(&[
        "bench",
        "--model",
        p(&f.path("m.ckpt")),
        "--chunk-frames",
        "16",
        "--frame-shift",
        "10",
        "--iters",
        "5",
        "--warmup",
        "1",
        "--threads",
        "1",
        "--stub-asr",
        "0.038",
        "--stub-vocoder",
        "0.044",
        "--emit-kv",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("Conversion"));
    assert!(out.contains("All"));
    let kv = |key: &str| -> f64 {
        out.lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .unwrap_or_else(|| panic!("missing {key} in\n{out}"))
            .parse()
            .unwrap()
    };
    assert_eq!(kv("chunk_ms"), 160.0);
    assert!((kv("asr_encoder__stub_.rtf") - 0.038).abs() < 0.01);
    assert!(kv("conversion.rtf") > 0.0);
    let all = kv("all.rtf");
    assert!((kv("pipeline_latency_ms") - 160.0 * (1.0 + all)).abs() < 1e-6);
}

#[test]
fn help_lists_subcommands() {
    let o = streamvc(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for cmd in ["init-random", "convert", "bench", "selftest"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_wmrobust");

const CONFIG: &str = r#"[model]
image_height = 32
image_width = 32
message_length = 6
channels = 4
encoder_blocks = 1
encoder_post_blocks = 1
decoder_blocks = 2
discriminator_blocks = 1
discriminator_channels = 4

[training]
batch_size = 6
epochs = 1
optimizer = "adam"
seed = 9
"#;

fn run(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env("RUST_LOG", "warn").env_remove("WMROBUST_OUT");
    if let Some(dir) = env_out {
        cmd.env("WMROBUST_OUT", dir);
    }
    cmd.output().unwrap()
}

fn stderr_record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|e| panic!("stderr is not a JSON record ({e}): {text}"))
}

fn expect_exit(out: &Output, code: i32) -> Value {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let rec = stderr_record(out);
    assert_eq!(rec["exit_code"], code);
    assert!(rec["message"].as_str().is_some_and(|m| !m.is_empty()));
    rec
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        fs::create_dir(&images).unwrap();
        for i in 0..12u32 {
            let img = image::RgbImage::from_fn(32, 32, |x, y| {
                image::Rgb([(x * 13 + i * 7) as u8, (y * 11 + i * 3) as u8, ((x + y) * 5 + i) as u8])
            });
            img.save(images.join(format!("img-{i:02}.png"))).unwrap();
        }
        fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (config, data, out) = (self.s("config.toml"), self.s("images"), self.s(out));
        let mut args = vec!["train", "--config", &config, "--data", &data, "--out", &out];
        args.extend_from_slice(extra);
        run(&args, None)
    }
}

#[test]
fn bad_arguments_are_usage_errors() {
    let rec = expect_exit(&run(&["train", "--no-such-flag"], None), 1);
    assert_eq!(rec["error"], "usage");
    expect_exit(&run(&[], None), 1);
}

#[test]
fn help_exits_cleanly() {
    let out = run(&["--help"], None);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("sweep"));
}

#[test]
fn missing_data_is_a_data_error() {
    let fx = Fixture::new();
    let (config, missing, out) = (fx.s("config.toml"), fx.s("nowhere"), fx.s("run"));
    let out = run(&["train", "--config", &config, "--data", &missing, "--out", &out, "--seed", "1"], None);
    let rec = expect_exit(&out, 2);
    assert_eq!(rec["error"], "data");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let fx = Fixture::new();
    fs::write(fx.path("bad.toml"), format!("{CONFIG}\nbogus = 1\n")).unwrap();
    let (config, data, out) = (fx.s("bad.toml"), fx.s("images"), fx.s("run"));
    let out = run(&["train", "--config", &config, "--data", &data, "--out", &out], None);
    expect_exit(&out, 1);
}

#[test]
fn bad_attack_severity_is_a_usage_error() {
    let fx = Fixture::new();
    expect_exit(&fx.train("run", &["--attacks", "gaussian_blur@-1", "--seed", "1"]), 1);
}

#[test]
fn zero_epochs_write_the_initialization() {
    let fx = Fixture::new();
    let out = fx.train("run", &["--epochs", "0", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_str(&fs::read_to_string(fx.path("run/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 0);
    assert_eq!(fs::read_to_string(fx.path("run/history.jsonl")).unwrap(), "");

    let ckpt = fx.s("run/model.safetensors");
    let inspect = run(&["inspect", "--checkpoint", &ckpt], None);
    assert!(inspect.status.success());
    let manifest: Value = serde_json::from_slice(&inspect.stdout).unwrap();
    assert_eq!(manifest["arch"]["message_length"], 6);
    assert_eq!(manifest["step"], 0);
}

#[test]
fn missing_seed_is_drawn_and_reported() {
    let fx = Fixture::new();
    fs::write(fx.path("seedless.toml"), CONFIG.replace("seed = 9\n", "")).unwrap();
    let (config, data, out) = (fx.s("seedless.toml"), fx.s("images"), fx.s("run"));
    let out = run(&["train", "--config", &config, "--data", &data, "--out", &out, "--epochs", "0"], None);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("drawn from entropy"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let fx = Fixture::new();
    let root = fx.path("env-root");
    let (config, data) = (fx.s("config.toml"), fx.s("images"));
    let out = run(&["train", "--config", &config, "--data", &data, "--epochs", "0", "--seed", "1"], Some(&root));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("model.safetensors").is_file());
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let fx = Fixture::new();
    fs::write(fx.path("junk.safetensors"), b"definitely not a checkpoint").unwrap();
    let rec = expect_exit(&run(&["inspect", "--checkpoint", &fx.s("junk.safetensors")], None), 4);
    assert_eq!(rec["error"], "format");
}

#[test]
fn embed_and_extract_round_trip_the_message_format() {
    let fx = Fixture::new();
    assert!(fx.train("run", &["--seed", "2"]).status.success());
    let ckpt = fx.s("run/model.safetensors");
    let cover = fx.s("images/img-00.png");
    let marked = fx.s("marked.png");

    let wrong = run(&["embed", "--checkpoint", &ckpt, &cover, "--message", "0101", "--out", &marked], None);
    expect_exit(&wrong, 1);
    let not_bits = run(&["embed", "--checkpoint", &ckpt, &cover, "--message", "01012x", "--out", &marked], None);
    expect_exit(&not_bits, 1);

    let ok = run(&["embed", "--checkpoint", &ckpt, &cover, "--message", "011010", "--out", &marked], None);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let rec: Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(rec["message"], "011010");
    assert!(rec["psnr_db"].as_f64().unwrap().is_finite());

    let got = run(&["extract", "--checkpoint", &ckpt, &marked], None);
    assert!(got.status.success());
    let stdout = String::from_utf8_lossy(&got.stdout);
    let bits = stdout.lines().next().unwrap();
    assert_eq!(bits.len(), 6);
    assert!(bits.chars().all(|c| c == '0' || c == '1'));
}

#[test]
fn sweep_and_compare() {
    let fx = Fixture::new();
    assert!(fx.train("run", &["--seed", "4", "--attacks", "dropout=0.3:0.9:0.3,gaussian_blur@2"]).status.success());
    let ckpt = fx.s("run/model.safetensors");
    let data = fx.s("images");
    for (id, csv) in [("a", "a.csv"), ("b", "b.csv")] {
        let out = run(
            &["sweep", "--checkpoint", &ckpt, "--data", &data, "--seed", "1", "--model-id", id, "--out", &fx.s(csv)],
            None,
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let csv = fs::read_to_string(fx.path("a.csv")).unwrap();
    // grids are widened by one step where the domain allows; a fixed
    // severity is swept over the default grid for its attack
    assert!(csv.contains(",dropout,0.9,") && !csv.contains(",dropout,1.2,"), "{csv}");
    assert!(csv.contains(",gaussian_blur,6.0,"), "{csv}");
    assert!(csv.lines().any(|l| l.starts_with("a,identity,")));

    let cmp = run(&["compare", &fx.s("a.csv"), &fx.s("b.csv"), "--out", &fx.s("cmp")], None);
    assert!(cmp.status.success(), "{}", String::from_utf8_lossy(&cmp.stderr));
    assert!(fx.path("cmp/comparison.json").is_file());
}

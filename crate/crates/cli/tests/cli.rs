use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
[train]
domains = ["shapes", "stripes"]
images_per_domain = 2

[train.model]
image_size = 8
base_width = 8
attention_heads = 2
head_dim = 4
timestep_embedding_dim = 8
norm_groups = 4

[train.optimizer]
steps = 20

[stylize.transfer]
steps = 8
inner_steps = 2

[sweep.base]
steps = 8
inner_steps = 2
"#;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vshuffle"));
    cmd.args(args).env_remove("VSHUFFLE_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        let f = Fixture { dir };
        let o = run(&["train", "-c", &f.p("tiny.toml"), "-o", &f.p("model")], &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        f
    }

    fn p(&self, rel: &str) -> String {
        self.dir.path().join(rel).display().to_string()
    }

    fn write(&self, rel: &str, text: &str) -> String {
        std::fs::write(self.dir.path().join(rel), text).unwrap();
        self.p(rel)
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.dir.path().join(rel)).unwrap()
    }

    fn stylize(&self, out: &str, extra: &[&str]) -> Output {
        let (cfg, ckpt, o) = (self.p("tiny.toml"), self.p("model/model.vshf"), self.p(out));
        let mut args = vec!["stylize", "-c", &cfg, "-o", &o, "--checkpoint", &ckpt, "--content", "gen:shapes:1"];
        args.extend_from_slice(extra);
        run(&args, &[])
    }

    fn sweep(&self, cfg: &str, out: &str, extra: &[&str], envs: &[(&str, &str)]) -> Output {
        let (ckpt, o) = (self.p("model/model.vshf"), self.p(out));
        let mut args = vec!["sweep", "-c", cfg, "-o", &o, "--checkpoint", &ckpt];
        args.extend_from_slice(extra);
        run(&args, envs)
    }
}

fn run_json(f: &Fixture, dir: &str) -> serde_json::Value {
    serde_json::from_slice(&f.read(&format!("{dir}/run.json"))).unwrap()
}

#[test]
fn training_reruns_are_bitwise_identical() {
    let f = Fixture::new();
    let o = run(&["train", "-c", &f.p("tiny.toml"), "-o", &f.p("again")], &[]);
    assert_eq!(code(&o), 0);
    assert_eq!(f.read("model/model.vshf"), f.read("again/model.vshf"));
}

#[test]
fn zero_step_training_writes_an_untrained_model() {
    let f = Fixture::new();
    let o = run(&["train", "-c", &f.p("tiny.toml"), "-o", &f.p("raw"), "--steps", "0"], &[]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&f.read("raw/train.json")).unwrap();
    assert_eq!(report["losses"].as_array().unwrap().len(), 0);

    let (cfg, ckpt, out) = (f.p("tiny.toml"), f.p("raw/model.vshf"), f.p("never"));
    let o = run(
        &["stylize", "-c", &cfg, "-o", &out, "--checkpoint", &ckpt, "--content", "gen:shapes:1", "--style", "gen:stripes:2"],
        &[],
    );
    assert_eq!(code(&o), 1);
    assert!(!Path::new(&out).exists());
}

#[test]
fn alpha_zero_matches_distillation_byte_for_byte() {
    let f = Fixture::new();
    assert_eq!(code(&f.stylize("vs", &["--style", "gen:stripes:2", "--alpha", "0"])), 0);
    assert_eq!(code(&f.stylize("ad", &["--style", "gen:stripes:2", "--method", "ad"])), 0);
    assert_eq!(f.read("vs/stylized.png"), f.read("ad/stylized.png"));
    let losses = |dir: &str| -> Vec<serde_json::Value> {
        let rec = run_json(&f, dir);
        rec["losses"].as_array().unwrap().iter().map(|l| serde_json::json!([l["t"], l["losses"]])).collect()
    };
    assert_eq!(losses("vs"), losses("ad"));
}

#[test]
fn missing_checkpoint_is_a_usage_error_without_outputs() {
    let f = Fixture::new();
    let out = f.p("nothing");
    let cfg = f.p("tiny.toml");
    let o = run(
        &["stylize", "-c", &cfg, "-o", &out, "--checkpoint", "/no/such.vshf", "--content", "gen:shapes:1", "--style", "gen:stripes:2"],
        &[],
    );
    assert_eq!(code(&o), 2);
    assert!(!Path::new(&out).exists());
    let o = run(&["sweep", "-o", &out], &[]);
    assert_eq!(code(&o), 2);
    assert!(!Path::new(&out).exists());
}

#[test]
fn the_run_record_echoes_every_default() {
    let f = Fixture::new();
    assert_eq!(code(&f.stylize("s", &["--style", "gen:stripes:2"])), 0);
    let cfg = &run_json(&f, "s")["config"];
    assert_eq!(cfg["alpha"], 0.4);
    assert_eq!(cfg["beta"], 0.24);
    assert_eq!(cfg["gamma"], 0.75);
    assert_eq!(cfg["tau"], 1.5);
    assert_eq!(cfg["t1"], 0.2);
    assert_eq!(cfg["t2"], 0.9);
    assert_eq!(cfg["lr"], 0.05);
    assert_eq!(cfg["m"], 1);
    assert_eq!(cfg["blocks"], serde_json::json!([10, 11, 12, 13, 14, 15]));
    assert_eq!(cfg["shuffle_axis"], "s");
    assert_eq!(cfg["resample"], "per-timestep");
    assert_eq!(cfg["permutations"], "random");
    // From the file.
    assert_eq!(cfg["steps"], 8);
}

#[test]
fn flags_beat_the_file_which_beats_defaults() {
    let f = Fixture::new();
    let cfg = f.write("prec.toml", &TINY.replace("[stylize.transfer]\n", "[stylize.transfer]\nbeta = 0.5\nalpha = 0.7\n"));
    let o = run(
        &[
            "stylize", "-c", &cfg, "-o", &f.p("p"), "--checkpoint", &f.p("model/model.vshf"),
            "--content", "gen:shapes:1", "--style", "gen:stripes:2", "--beta", "2",
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rec = run_json(&f, "p");
    assert_eq!(rec["config"]["beta"], 2.0);
    assert_eq!(rec["config"]["alpha"], 0.7);
    assert_eq!(rec["config"]["gamma"], 0.75);
}

#[test]
fn style_count_must_suit_the_method() {
    let f = Fixture::new();
    let o = f.stylize("x", &["--style", "gen:stripes:2", "--style", "gen:stripes:3", "--method", "styleid"]);
    assert_eq!(code(&o), 2);
    assert!(!Path::new(&f.p("x")).exists());
    assert_eq!(code(&f.stylize("y", &["--style", "gen:stripes:2", "--method", "plaid"])), 2);
    assert_eq!(code(&f.stylize("z", &["--style", "gen:stripes:2", "--blocks", "10-16"])), 2);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let f = Fixture::new();
    let cfg = f.write("bad.toml", "[stylize.transfer]\nbeat = 0.3\n");
    let o = run(&["stylize", "-c", &cfg, "-o", &f.p("b"), "--checkpoint", &f.p("model/model.vshf")], &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("beat"));
    assert_eq!(code(&run(&["stylize", "--bogus"], &[])), 2);
}

#[test]
fn empty_and_single_cell_grids() {
    let f = Fixture::new();
    let empty = f.write("empty.toml", &format!("{TINY}\n[sweep]\nbetas = []\n"));
    let o = f.sweep(&empty, "e", &[], &[]);
    assert_eq!(code(&o), 2);
    assert!(!Path::new(&f.p("e")).exists());

    let o = f.sweep(&f.p("tiny.toml"), "one", &[], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(f.read("one/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].ends_with(",true"));
}

#[test]
fn sweep_failures_are_reported_per_cell() {
    let f = Fixture::new();
    let o = f.sweep(&f.p("tiny.toml"), "bad", &["--ns", "1", "--t1", "0.95"], &[]);
    assert_eq!(code(&o), 1);
    let report: serde_json::Value = serde_json::from_slice(&f.read("bad/failures.json")).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 1);
}

#[test]
fn sweep_output_does_not_depend_on_worker_count() {
    let f = Fixture::new();
    let cfg = f.p("tiny.toml");
    let grid = ["--betas", "0.1,1", "--alphas", "0.2,0.8", "--methods", "vshuffle,ad"];
    assert_eq!(code(&f.sweep(&cfg, "w1", &grid, &[])), 0);
    let o = f.sweep(&cfg, "w4", &[&grid[..], &["--parallelism", "4"]].concat(), &[("VSHUFFLE_THREADS", "3")]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("3 worker"));
    assert_eq!(f.read("w1/sweep.csv"), f.read("w4/sweep.csv"));
    assert_eq!(code(&f.sweep(&cfg, "w0", &[], &[("VSHUFFLE_THREADS", "zero")])), 2);
}

#[test]
fn pca_and_axis_ablation_write_their_artifacts() {
    let f = Fixture::new();
    let ckpt = f.p("model/model.vshf");
    let o = run(&["pca", "-o", &f.p("pca"), "--checkpoint", &ckpt, "--steps", "10", "--timestep", "5", "--block", "14"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let j: serde_json::Value = serde_json::from_slice(&f.read("pca/pca.json")).unwrap();
    assert!(j["shuffled_autocorrelation"].as_f64().unwrap() < j["autocorrelation"].as_f64().unwrap());
    assert!(!f.read("pca/values.png").is_empty());

    let o = run(&["ablate-axis", "-o", &f.p("abl"), "--checkpoint", &ckpt, "--steps", "8", "--inner-steps", "2"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(f.read("abl/ablation.csv")).unwrap();
    let axes: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(axes, ["h", "s", "d"]);
    assert!(!f.read("abl/grid.png").is_empty());
}

#[test]
fn quick_verification_passes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("v");
    let o = run(&["verify", "--quick", "-o", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches("PASS").count(), 5);
    assert!(out.join("verify.json").is_file());
}

#[test]
fn documented_repro_matches_the_golden_csv() {
    let dir = TempDir::new().unwrap();
    let p = |r: &str| dir.path().join(r).display().to_string();
    let cfg = data("repro.toml").display().to_string();
    assert_eq!(code(&run(&["train", "-c", &cfg, "-o", &p("model")], &[])), 0);
    let o = run(&["sweep", "-c", &cfg, "-o", &p("sweep"), "--checkpoint", &p("model/model.vshf")], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let got = std::fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    let golden = std::fs::read_to_string(data("golden.csv")).unwrap();
    assert_eq!(got, golden);
}

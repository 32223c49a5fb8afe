use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[phantom]
image_size = [48, 48]
spacing_mm = 2.6
lv_radius_mm = [9.0, 12.0]
myo_thickness_mm = [8.0, 9.0]
n_slices = [5, 6]

[network]
encoder_channels = [4, 8, 16]
classifier_hidden = 8

[train]
epochs = 1
target_spacing_mm = 2.6
learning_rate = 0.001

[train.augmentation]
crop_size = [32, 32]
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let paths = format!(
            "\n[paths]\ndataset_root = {:?}\ncheckpoint_dir = {:?}\nreport_dir = {:?}\n",
            dir.path().join("data"),
            dir.path().join("ckpt"),
            dir.path().join("reports")
        );
        std::fs::write(dir.path().join("exp.toml"), format!("{TINY}{extra}{paths}")).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("exp.toml");
        Command::new(env!("CARGO_BIN_EXE_slicefusion"))
            .arg("--config")
            .arg(&cfg)
            .args(args)
            .env_remove("SLICEFUSION_REPORT_DIR")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        o
    }

    fn phantom(&self) {
        let data = self.path("data");
        self.ok(&["phantom", "--n-train", "3", "--n-test", "3", "--out", data.to_str().unwrap()]);
    }
}

fn dir_digest(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn phantom_writes_dataset_and_is_reproducible() {
    let env = Env::new("");
    let out = env.path("data");
    env.ok(&["phantom", "--n-train", "8", "--n-test", "2", "--out", out.to_str().unwrap()]);
    let dirs = std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 10);
    assert!(out.join("index.json").exists());
    let first = dir_digest(&out);

    let refused = env.run(&["phantom", "--n-train", "8", "--n-test", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(refused.status.code(), Some(1));
    env.ok(&["--overwrite", "phantom", "--n-train", "8", "--n-test", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(dir_digest(&out), first);
}

#[test]
fn usage_errors_exit_one() {
    let env = Env::new("");
    assert_eq!(env.run(&["phantom", "--n-train", "8"]).status.code(), Some(1));
    assert_eq!(env.run(&["frobnicate"]).status.code(), Some(1));
    let help = Command::new(env!("CARGO_BIN_EXE_slicefusion")).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    let bad = env.path("bad.toml");
    std::fs::write(&bad, "[train]\nepochs = 0\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_slicefusion"))
        .args(["--config", bad.to_str().unwrap(), "phantom", "--out", env.path("x").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_data_exits_two() {
    let env = Env::new("");
    assert_eq!(env.run(&["train"]).status.code(), Some(2));
}

#[test]
fn train_eval_infer_round_trip() {
    let env = Env::new("");
    env.phantom();
    env.ok(&["train", "--stage", "both"]);
    for f in ["seg.ckpt", "ref.ckpt", "history.csv"] {
        assert!(env.path("ckpt").join(f).exists(), "{f}");
    }
    let hist = std::fs::read_to_string(env.path("ckpt/history.csv")).unwrap();
    let lines: Vec<&str> = hist.lines().collect();
    assert!(lines[0].starts_with("# config_hash="));
    assert_eq!(lines[1], "epoch,stage,loss_total,loss_seg,loss_class");
    assert_eq!(lines.len(), 4);
    assert_eq!(env.run(&["train", "--stage", "both"]).status.code(), Some(1));

    env.ok(&["eval"]);
    let dice = std::fs::read_to_string(env.path("reports/dice.csv")).unwrap();
    assert_eq!(dice.lines().nth(1), Some("model,slice_level,class,dice_mean,dice_std,n_slices"));
    assert_eq!(dice.lines().count(), 2 + 9);
    assert!(env.path("reports/defects.csv").exists());

    let override_dir = env.path("elsewhere");
    let o = Command::new(env!("CARGO_BIN_EXE_slicefusion"))
        .args(["--config", env.path("exp.toml").to_str().unwrap(), "eval"])
        .env("SLICEFUSION_REPORT_DIR", &override_dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(override_dir.join("dice.csv").exists());

    let stack = env.path("data/stack_0004");
    let pred = env.path("pred");
    env.ok(&["infer", "--stack", stack.to_str().unwrap(), "--out", pred.to_str().unwrap()]);
    let labels = slicefusion::dataio::load_labels(&pred).unwrap();
    let (vol, _) = slicefusion::dataio::load_stack(&stack).unwrap();
    assert_eq!(labels.dims(), vol.dims());
    assert!(slicefusion::dataio::read_meta(&pred).unwrap().config_hash.is_some());
}

#[test]
fn ref_without_seg_is_a_dependency_error() {
    let env = Env::new("");
    env.phantom();
    let o = env.run(&["train", "--stage", "ref"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Seg"));
}

#[test]
fn resume_continues_from_checkpoint() {
    let env = Env::new("");
    env.phantom();
    env.ok(&["train", "--stage", "seg"]);
    // Raise the epoch budget and pick up where the first run stopped.
    let text = std::fs::read_to_string(env.path("exp.toml")).unwrap().replace("epochs = 1", "epochs = 2");
    std::fs::write(env.path("exp.toml"), text).unwrap();
    env.ok(&["train", "--stage", "seg", "--resume"]);
    let hist = std::fs::read_to_string(env.path("ckpt/history.csv")).unwrap();
    let epochs: Vec<&str> = hist.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2"]);
}

#[test]
fn ablate_writes_per_configuration_reports() {
    let env = Env::new("\n[eval]\nablation = [\"Seg(SS)\", \"Seg(AS)+Ref(AS w/ MT)\"]\n");
    env.phantom();
    env.ok(&["ablate"]);
    let root = env.path("reports/ablation");
    for sub in ["seg_ss", "seg_as_ref_as_w_mt"] {
        let d = std::fs::read_to_string(root.join(sub).join("dice.csv")).unwrap();
        assert_eq!(d.lines().count(), 11, "{sub}");
        assert!(root.join(sub).join("defects.csv").exists());
    }
    assert_eq!(std::fs::read_to_string(root.join("dice.csv")).unwrap().lines().count(), 2 + 18);
}

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tortuosity"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
# small model for quick runs
img_size = 16
patch_size = 8
embed_dim = 8
depth = 2
num_heads = 2
synth_size = 16
synth_per_level = 3
batch_size = 4
epochs = 3
warmup_epochs = 1
freeze_epochs = 1
";

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();

    let o = run(&["gen-synth", "--config", "tiny.cfg", "--out", "data", "--seed", "4"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("wrote 12 images"));
    assert!(d.join("data/manifest.csv").is_file());

    let o = run(&["finetune", "--config", "tiny.cfg", "--data", "data", "--out", "ft"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("best epoch"));
    for f in ["best.ptf", "report.json", "train_log.jsonl"] {
        assert!(d.join("ft").join(f).is_file(), "{f}");
    }

    let o = run(&["eval", "--ckpt", "ft/best.ptf", "--data", "data"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let json = stdout(&o);
    assert!(json.contains("\"overall\"") && json.contains("\"confusion\""));
    let again = run(&["eval", "--ckpt", "ft/best.ptf", "--data", "data"], d);
    assert_eq!(json, stdout(&again));

    let o = run(&["eval", "--ckpt", "ft/best.ptf", "--data", "data", "--out", "eval.json"], d);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(d.join("eval.json")).unwrap(), json);

    let image = "data/level1/img_1_00000.pgm";
    let o = run(&["attn", "--ckpt", "ft/best.ptf", "--image", image, "--mass", "1.0", "--out", "mask.pgm"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("kept 4 of 4 patches"));
    assert!(d.join("mask.pgm").is_file());

    let o = run(&["export-features", "--ckpt", "ft/best.ptf", "--data", "data", "--out", "f.csv"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("f.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 10);

    let o = run(&["probe", "--config", "tiny.cfg", "--data", "data", "--ckpt", "ft/best.ptf", "--out", "probe"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("probe/probe.ptf").is_file());
}

fn assert_category(o: &Output, category: &str, code: i32) {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let err = stderr(o);
    assert!(err.starts_with(&format!("error[{category}]")), "{err}");
}

#[test]
fn errors_are_categorized() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    assert_category(&run(&["frobnicate"], d), "usage", 2);
    assert_category(&run(&["eval", "--mass", "lots"], d), "usage", 2);

    std::fs::write(d.join("bad.cfg"), "depth = 2\nwarp_factor = 9\n").unwrap();
    let o = run(&["finetune", "--config", "bad.cfg"], d);
    assert_category(&o, "config", 1);
    assert!(stderr(&o).contains("line 2"));
    assert_category(&run(&["eval", "--data", "."], d), "config", 1);

    assert_category(&run(&["eval", "--ckpt", "missing.ptf", "--manifest", "m.csv"], d), "io", 1);

    std::fs::write(d.join("junk.ptf"), b"NOPE and then some bytes").unwrap();
    std::fs::write(d.join("m.csv"), "path,level\n").unwrap();
    assert_category(&run(&["eval", "--ckpt", "junk.ptf", "--manifest", "m.csv"], d), "checkpoint", 1);

    std::fs::write(d.join("img.pgm"), b"P5\n1 1\n255\n\x00").unwrap();
    std::fs::write(d.join("levels.csv"), "path,level\nimg.pgm,7\n").unwrap();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let o = run(&["finetune", "--config", "tiny.cfg", "--manifest", "levels.csv"], d);
    assert_category(&o, "data", 1);
}

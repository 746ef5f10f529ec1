use std::path::Path;
use std::process::{Command, Output};

fn tio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tio")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = tio(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

const SCENE: &str = "height = 16\nwidth = 32\nground_top = [1.0, 2.0]\nground_bottom = [4.0, 6.0]\nmax_boxes = 1\n";

fn tiny_config(dir: &Path) -> String {
    let p = |s: &str| dir.join(s).display().to_string().replace('\\', "/");
    format!(
        "epochs = 2\ne1 = 0\ne2 = 1\nlr = 1e-3\nlr_halving_epochs = []\nbatch = 2\nheight = 16\nwidth = 32\nlevels = 5\n\
         b_min = 1.0\nb_max = 8.0\ntrain_count = 2\ndata_dir = \"{}\"\ncheckpoint_dir = \"{}\"\n\
         [augment]\nenabled = false\n\
         [network]\nencoder_widths = [4, 8, 8, 8]\nagg_widths = [8, 8, 8]\ndecoder_width = 4\nse_reduction = 2\n\
         [scene]\n{SCENE}",
        p("train"),
        p("ckpt")
    )
}

#[test]
fn generate_train_evaluate_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &str| d.join(p).display().to_string();
    std::fs::write(d.join("scene.toml"), SCENE).unwrap();
    std::fs::write(d.join("train.toml"), tiny_config(d)).unwrap();

    ok(&["gen-data", "--count", "2", "--seed", "1", "--out", &s("train"), "--scene", &s("scene.toml"), "--b-max", "8"]);
    ok(&["gen-data", "--count", "2", "--seed", "1", "--split", "val", "--out", &s("val"), "--scene", &s("scene.toml"), "--b-max", "8"]);
    ok(&["train", "--config", &s("train.toml")]);
    let ckpt = s("ckpt/latest.tioc");
    assert!(Path::new(&ckpt).exists());

    ok(&["eval", "--checkpoint", &ckpt, "--data", &s("val"), "--csv-out", &s("metrics.csv")]);
    let csv = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("sample_id,mode,abs_rel"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("all,mono,") && rows[1].starts_with("all,stereo,"));

    ok(&["eval", "--checkpoint", &ckpt, "--data", &s("val"), "--mode", "stereo", "--per-sample", "--csv-out", &s("per.csv")]);
    assert_eq!(std::fs::read_to_string(d.join("per.csv")).unwrap().lines().count(), 1 + 1 + 2);

    let (left, right) = (s("val/val_00000_left.png"), s("val/val_00000_right.png"));
    ok(&["infer-stereo", "--checkpoint", &ckpt, "--left", &left, "--right", &right, "--out", &s("stereo")]);
    ok(&["infer-mono", "--checkpoint", &ckpt, "--image", &left, "--out", &s("mono")]);
    for f in ["stereo.png", "stereo.tiot", "mono.png", "mono.tiot"] {
        assert!(d.join(f).exists(), "{f} missing");
    }

    ok(&["train", "--config", &s("train.toml"), "--resume"]);
}

#[test]
fn bad_invocations_fail_with_one_line() {
    let out = tio(&["train", "--bogus"]);
    assert!(!out.status.success());
    let out = tio(&["eval", "--checkpoint", "/nonexistent.tioc", "--data", "/nonexistent", "--csv-out", "/tmp/x.csv"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: ") && err.trim_end().lines().count() == 1, "{err}");
}

use std::path::Path;
use std::process::{Command, Output};

use defilter_core::image::Image;

fn defilter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defilter")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_sources(dir: &Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let img = Image::from_fn(40, 36, |y, x| [x as f32 / 40.0, y as f32 / 36.0, (i as f32 * 0.3) % 1.0]);
        img.save_png(dir.join(format!("src{i}.png"))).unwrap();
    }
}

#[test]
fn residual_of_identical_images_is_black() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.png");
    Image::from_fn(9, 5, |y, x| [x as f32 / 9.0, y as f32 / 5.0, 0.5]).save_png(&a).unwrap();
    let out = dir.path().join("r.png");
    let o = defilter(&["residual", p(&a), p(&a), "-o", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = Image::load(&out).unwrap();
    assert_eq!((r.width(), r.height()), (9, 5));
    assert!(r.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gen_data_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let sources = dir.path().join("sources");
    write_sources(&sources, 3);
    let mut manifests = Vec::new();
    for run in ["one", "two"] {
        let root = dir.path().join(run);
        let o = defilter(&["gen-data", "--sources", p(&sources), "--out", p(&root), "--seed", "0", "--image-size", "32"]);
        assert!(o.status.success(), "{}", stderr(&o));
        manifests.push(std::fs::read(root.join("manifest")).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);
}

#[test]
fn train_remove_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("corpus");
    let o = defilter(&["gen-data", "--count", "2", "--out", p(&root), "--seed", "3", "--image-size", "32", "--train-fraction", "0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "[train]\nbatch_size = 2\nnum_patches = 8\nfilters = [\"1977\"]\n\n[train.model]\nnum_levels = 2\nchannels = [4, 8]\nembed_dim = 4\nstyle_channels = [4, 4]\ndisc_channels = [4, 4, 8]\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = defilter(&[
        "train", "--config", p(&config), "--corpus", p(&root), "--out", p(&run), "--steps", "2", "--image-size", "32",
        "--no-id-reg", "--seed", "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(resolved.contains("enable_identity_reg = false"));
    assert!(resolved.contains("seed = 5"));
    assert_eq!(std::fs::read_to_string(run.join("losses.jsonl")).unwrap().lines().count(), 2);

    let ckpt = run.join("final.ckpt");
    let img = dir.path().join("odd.png");
    Image::filled(23, 17, [0.2, 0.5, 0.7]).save_png(&img).unwrap();
    let out = dir.path().join("clean.png");
    let o = defilter(&["remove", p(&ckpt), p(&img), "-o", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let restored = Image::load(&out).unwrap();
    assert_eq!((restored.width(), restored.height()), (23, 17));

    let eval = dir.path().join("eval");
    let o = defilter(&["eval", "--checkpoint", p(&ckpt), "--corpus", p(&root), "--out", p(&eval)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(eval.join("report.csv")).unwrap();
    // Header plus one row per test pair (1 source x 16 filters).
    assert_eq!(csv.lines().count(), 1 + 16);
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    let o = defilter(&["train", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = defilter(&["residual", "a.png", "b.png", "--device", "gpu"]);
    assert_eq!(o.status.code(), Some(2));

    let o = defilter(&["residual", "/nonexistent/a.png", "/nonexistent/b.png"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[io]: "), "{err}");
}

#[test]
fn every_subcommand_documents_its_flags() {
    for (sub, flags) in [
        ("gen-data", &["--config", "--seed", "--out", "--device", "--sources", "--image-size"][..]),
        ("train", &["--config", "--seed", "--out", "--steps", "--image-size", "--no-style-nce", "--no-id-reg", "--no-consistency", "--device"]),
        ("remove", &["--config", "--seed", "--out", "--device"]),
        ("eval", &["--config", "--seed", "--out", "--device", "--checkpoint"]),
        ("residual", &["--config", "--seed", "--out", "--device"]),
    ] {
        let o = defilter(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0));
        let help = String::from_utf8_lossy(&o.stdout);
        for f in flags {
            assert!(help.contains(f), "{sub} --help lacks {f}");
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use epan::data::write_image;
use epan::Tensor;

fn epan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epan"))
        .args(args)
        .env_remove("EPAN_THREADS")
        .output()
        .expect("spawn epan")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, corruption: &str) -> PathBuf {
    let spec = dir.join("synth.conf");
    std::fs::write(
        &spec,
        format!("num_ids = 3\nper_id = 6\nheight = 32\nwidth = 32\ncorruption = {corruption}\nseed = 5\n"),
    )
    .unwrap();
    let root = dir.join("data");
    let out = epan(&["synth", "--spec", spec.to_str().unwrap(), "--out", root.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    root
}

fn config(dir: &Path, name: &str, data: &Path, out_dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(
        &path,
        format!(
            "data.root = {}\noutput.dir = {}\nmodel.input_h = 32\nmodel.input_w = 32\n\
             model.stage_channels = 4,4,8,8\nmodel.embed_dim = 8\nmodel.grid_channels = 4\n\
             optim.p = 3\noptim.k = 2\ntrain.checkpoint_every = 1\n{extra}",
            data.display(),
            out_dir.display()
        ),
    )
    .unwrap();
    path
}

fn train(cfg: &Path, force: bool) -> Output {
    let mut args = vec!["train", "--config", cfg.to_str().unwrap()];
    if force {
        args.push("--force");
    }
    epan(&args)
}

#[test]
fn zero_epoch_run_writes_resolved_config_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "none");
    let out_dir = dir.path().join("run");
    let cfg = config(dir.path(), "a.conf", &data, &out_dir, "optim.epochs = 0\n");
    let out = train(&cfg, false);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resolved = std::fs::read_to_string(out_dir.join("resolved.conf")).unwrap();
    assert!(resolved.contains("optim.epochs = 0"));
    assert!(resolved.contains("loss.margin = 0.3"));
    assert!(out_dir.join("checkpoint/index.txt").is_file());
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn identical_runs_give_identical_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "mixed");
    let mut runs = Vec::new();
    for name in ["r1", "r2"] {
        let out_dir = dir.path().join(name);
        let cfg = config(dir.path(), &format!("{name}.conf"), &data, &out_dir, "optim.epochs = 2\nseed = 9\n");
        let out = train(&cfg, false);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        runs.push((
            std::fs::read(out_dir.join("train_log.csv")).unwrap(),
            std::fs::read(out_dir.join("checkpoint/weights.eptn")).unwrap(),
            std::fs::read(out_dir.join("checkpoints/epoch_0001/weights.eptn")).unwrap(),
        ));
    }
    assert_eq!(runs[0], runs[1]);
    let log = String::from_utf8(runs[0].0.clone()).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn non_empty_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "none");
    let out_dir = dir.path().join("run");
    let cfg = config(dir.path(), "a.conf", &data, &out_dir, "optim.epochs = 0\n");
    assert_eq!(code(&train(&cfg, false)), 0);
    let again = train(&cfg, false);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));
    assert_eq!(code(&train(&cfg, true)), 0);
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "none");
    let out_dir = dir.path().join("run");
    let cfg = config(dir.path(), "a.conf", &data, &out_dir, "optim.nesterov = true\n");
    let out = train(&cfg, false);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("optim.nesterov"));

    let cfg = config(dir.path(), "b.conf", &data, &out_dir, "model.input_h = 30\n");
    let out = train(&cfg, false);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("input_h"));

    let missing = epan(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        dir.path().join("nope").to_str().unwrap(),
    ]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn raw_pixel_eval_is_perfect_without_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "none");
    let out_dir = dir.path().join("run");
    let cfg = config(
        dir.path(),
        "a.conf",
        &data,
        &out_dir,
        "optim.epochs = 0\neval.embedding = raw_pixels\neval.metric = cosine\n",
    );
    assert_eq!(code(&train(&cfg, false)), 0);
    let report = dir.path().join("report.csv");
    let out = epan(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("checkpoint").to_str().unwrap(),
        "--output",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.lines().any(|l| l == "1,1"), "{text}");
    assert!(text.lines().any(|l| l == "map,1"), "{text}");
}

#[test]
fn evaluation_and_format_errors_exit_3_and_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "none");
    let out_dir = dir.path().join("run");
    let cfg = config(dir.path(), "a.conf", &data, &out_dir, "optim.epochs = 0\n");
    assert_eq!(code(&train(&cfg, false)), 0);
    let ckpt = out_dir.join("checkpoint");

    // Queries whose identity never appears in the gallery.
    let lonely = dir.path().join("lonely");
    let img = Tensor::full(&[3, 32, 32], 0.5);
    for (sub, name) in [
        ("bounding_box_train", "0001_c1s1_000001_00.ppm"),
        ("bounding_box_train", "0002_c1s1_000001_00.ppm"),
        ("query", "0007_c1s1_000001_00.ppm"),
        ("bounding_box_test", "0008_c2s1_000001_00.ppm"),
    ] {
        std::fs::create_dir_all(lonely.join(sub)).unwrap();
        write_image(&lonely.join(sub).join(name), &img).unwrap();
    }
    let cfg3 = config(dir.path(), "b.conf", &lonely, &dir.path().join("o3"), "");
    let out = epan(&["eval", "--config", cfg3.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    let weights = ckpt.join("weights.eptn");
    let bytes = std::fs::read(&weights).unwrap();
    std::fs::write(&weights, &bytes[..bytes.len() / 2]).unwrap();
    let out = epan(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("weights.eptn"));
}

#[test]
fn self_distance_matrix_has_zero_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "background_excess");
    let out_dir = dir.path().join("run");
    let cfg = config(dir.path(), "a.conf", &data, &out_dir, "optim.epochs = 0\n");
    assert_eq!(code(&train(&cfg, false)), 0);
    let img = std::fs::read_dir(data.join("query")).unwrap().next().unwrap().unwrap().path();
    let dm_dir = dir.path().join("dm");
    let out = epan(&[
        "distmat",
        "--imgA",
        img.to_str().unwrap(),
        "--imgB",
        img.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("checkpoint").to_str().unwrap(),
        "--out",
        dm_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dm_dir.join("block_matrix.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 8);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 8);
        assert_eq!(r[i], 0.0);
        assert!(r.iter().all(|&v| v >= 0.0));
    }
    assert!(dm_dir.join("block_matrix.pgm").is_file());
}

#[test]
fn gradcheck_command_passes() {
    let out = epan(&["gradcheck", "--seeds", "2", "--primitives-only"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("sampler.theta"));
    assert!(!text.contains("FAIL"));
}

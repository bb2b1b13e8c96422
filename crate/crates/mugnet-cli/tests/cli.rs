//! End-to-end checks of the command-line surface and its exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mugnet"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mugnet-cli-{}-{tag}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let out = cmd.output().expect("spawn mugnet");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// A small training config so the smoke chain stays fast.
fn write_small_config(path: &Path) {
    std::fs::write(
        path,
        "epochs = 40\nlr = 0.003\nbeta1 = 0.9\nbeta2 = 0.999\nadam_eps = 1e-8\n\
         lr_decay = 1\nseed = 0\nloss_weighting = size\nmiou_missing = exclude\n\
         classes = 3\ninput_dim = 11\nbudgets = 16,8,4\nmlp_hidden = 8\nout_width = 8\n\
         backbone_depth = 4\nwidth = 16\ntaps = 1,2,3,4\nfusion = bidirectional\n\
         stacks = 1\nhead_hidden = 16\n",
    )
    .unwrap();
}

#[test]
fn full_pipeline_chain_succeeds() {
    let dir = workdir("chain");
    let cloud = dir.join("room.xyz");
    let graph = dir.join("room.mgg");
    let ckpt = dir.join("model.mgc");
    let pred = dir.join("pred.xyz");
    let metrics = dir.join("metrics.csv");
    let history = dir.join("history.csv");
    let config = dir.join("train.cfg");
    write_small_config(&config);

    let (code, out, err) = run(bin()
        .args([
            "synth", "--recipe", "room", "--seed", "0", "--points", "6000",
        ])
        .args(["--output", cloud.to_str().unwrap()]));
    assert_eq!(code, 0, "synth failed: {err}");
    assert!(out.contains("wrote 6000 points"));

    let (code, out, err) = run(bin()
        .args(["cluster", "--input", cloud.to_str().unwrap()])
        .args(["--output", graph.to_str().unwrap(), "--classes", "3"]));
    assert_eq!(code, 0, "cluster failed: {err}");
    assert!(out.contains("clusters"));

    let (code, _out, err) = run(bin()
        .args(["train", "--input", graph.to_str().unwrap()])
        .args(["--output", ckpt.to_str().unwrap()])
        .args(["--config", config.to_str().unwrap()])
        .args(["--history", history.to_str().unwrap()]));
    assert_eq!(code, 0, "train failed: {err}");
    assert!(ckpt.exists());
    let history_text = std::fs::read_to_string(&history).unwrap();
    assert_eq!(
        history_text.lines().count(),
        41,
        "header + one row per epoch"
    );

    let (code, _out, err) = run(bin()
        .args(["infer", "--input", graph.to_str().unwrap()])
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--output", pred.to_str().unwrap()]));
    assert_eq!(code, 0, "infer failed: {err}");

    let (code, out, err) = run(bin()
        .args(["eval", "--pred", pred.to_str().unwrap()])
        .args(["--truth", cloud.to_str().unwrap(), "--classes", "3"])
        .args(["--output", metrics.to_str().unwrap()]));
    assert_eq!(code, 0, "eval failed: {err}");
    assert!(out.contains("OA"), "table missing OA: {out}");
    assert!(metrics.exists());

    // Bench over the same scene twice.
    let graphs = format!("{},{}", graph.display(), graph.display());
    let bench_csv = dir.join("bench.csv");
    let (code, out, err) = run(bin()
        .args(["bench", "--input", &graphs])
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--batch-sizes", "1,2", "--repetitions", "2"])
        .args(["--output", bench_csv.to_str().unwrap()]));
    assert_eq!(code, 0, "bench failed: {err}");
    assert!(out.starts_with("batch_size,"), "csv header: {out}");
    assert!(bench_csv.exists());
}

#[test]
fn eval_identical_files_reports_perfect_oa() {
    let dir = workdir("eval-perfect");
    let cloud = dir.join("scene.xyz");
    let (code, _, err) = run(bin()
        .args([
            "synth", "--recipe", "room", "--seed", "3", "--points", "2000",
        ])
        .args(["--output", cloud.to_str().unwrap()]));
    assert_eq!(code, 0, "{err}");
    let (code, out, _) = run(bin()
        .args(["eval", "--pred", cloud.to_str().unwrap()])
        .args(["--truth", cloud.to_str().unwrap(), "--classes", "3"]));
    assert_eq!(code, 0);
    assert!(out.contains("OA           1.0000"), "got: {out}");
}

#[test]
fn unknown_flag_is_usage_error() {
    let (code, _, err) = run(bin().args(["synth", "--bogus", "x"]));
    assert_eq!(code, 1);
    assert!(err.contains("usage"), "stderr: {err}");

    let (code, _, err) = run(bin().args(["frobnicate"]));
    assert_eq!(code, 1);
    assert!(err.contains("unknown command"), "stderr: {err}");

    let (code, _, _) = run(bin().args(["synth"]));
    assert_eq!(code, 1, "missing required flag");
}

#[test]
fn missing_checkpoint_is_data_error_naming_path() {
    let dir = workdir("missing-ckpt");
    let cloud = dir.join("c.xyz");
    let graph = dir.join("c.mgg");
    let (code, _, _) = run(bin()
        .args([
            "synth", "--recipe", "room", "--seed", "1", "--points", "2000",
        ])
        .args(["--output", cloud.to_str().unwrap()]));
    assert_eq!(code, 0);
    let (code, _, _) = run(bin()
        .args(["cluster", "--input", cloud.to_str().unwrap()])
        .args(["--output", graph.to_str().unwrap(), "--classes", "3"]));
    assert_eq!(code, 0);

    let ghost = dir.join("not-there.mgc");
    let (code, _, err) = run(bin()
        .args(["infer", "--input", graph.to_str().unwrap()])
        .args(["--checkpoint", ghost.to_str().unwrap()])
        .args(["--output", dir.join("x.xyz").to_str().unwrap()]));
    assert_eq!(code, 2);
    assert!(
        err.contains("not-there.mgc"),
        "stderr must name the path: {err}"
    );
}

#[test]
fn unreadable_cloud_is_data_error() {
    let dir = workdir("bad-cloud");
    let bad = dir.join("bad.xyz");
    std::fs::write(&bad, "1 2 notanumber\n").unwrap();
    let (code, _, err) = run(bin()
        .args(["cluster", "--input", bad.to_str().unwrap()])
        .args(["--output", dir.join("g.mgg").to_str().unwrap()]));
    assert_eq!(code, 2);
    assert!(err.contains("line 1"), "stderr: {err}");
}

#[test]
fn pipeline_is_deterministic_across_runs() {
    let dir = workdir("determinism");
    let config = dir.join("train.cfg");
    write_small_config(&config);
    let mut artifacts: Vec<(Vec<u8>, Vec<u8>, String)> = Vec::new();
    for tag in ["a", "b"] {
        let cloud = dir.join(format!("{tag}.xyz"));
        let graph = dir.join(format!("{tag}.mgg"));
        let ckpt = dir.join(format!("{tag}.mgc"));
        let pred = dir.join(format!("{tag}-pred.xyz"));
        for args in [
            vec![
                "synth",
                "--recipe",
                "room",
                "--seed",
                "5",
                "--points",
                "4000",
                "--output",
                cloud.to_str().unwrap(),
            ],
            vec![
                "cluster",
                "--input",
                cloud.to_str().unwrap(),
                "--classes",
                "3",
                "--output",
                graph.to_str().unwrap(),
            ],
            vec![
                "train",
                "--input",
                graph.to_str().unwrap(),
                "--config",
                config.to_str().unwrap(),
                "--output",
                ckpt.to_str().unwrap(),
            ],
            vec![
                "infer",
                "--input",
                graph.to_str().unwrap(),
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--output",
                pred.to_str().unwrap(),
            ],
        ] {
            let (code, _, err) = run(bin().args(&args));
            assert_eq!(code, 0, "step {args:?} failed: {err}");
        }
        let (code, metrics, _) = run(bin()
            .args(["eval", "--pred", pred.to_str().unwrap()])
            .args(["--truth", cloud.to_str().unwrap(), "--classes", "3"]));
        assert_eq!(code, 0);
        artifacts.push((
            std::fs::read(&ckpt).unwrap(),
            std::fs::read(&pred).unwrap(),
            metrics,
        ));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "checkpoints differ");
    assert_eq!(artifacts[0].1, artifacts[1].1, "predictions differ");
    assert_eq!(artifacts[0].2, artifacts[1].2, "metrics differ");
}

#[test]
fn synth_accepts_recipe_files_and_ply_output() {
    let dir = workdir("recipe-file");
    let recipe = dir.join("scene.recipe");
    std::fs::write(
        &recipe,
        "points = 1500\n\
         floor class=0 origin=0,0 size=6,6 noise=0.005 color=0.4,0.4,0.4\n\
         cylinder class=1 center=3,3 radius=0.5 height=1.5 color=0.8,0.2,0.2\n",
    )
    .unwrap();
    let out = dir.join("scene.ply");
    let (code, stdout, err) = run(bin()
        .args(["synth", "--recipe", recipe.to_str().unwrap(), "--seed", "4"])
        .args(["--output", out.to_str().unwrap()]));
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("wrote 1500 points"));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("ply\n"));
    assert!(text.contains("property uchar red"));
    assert!(text.contains("property int label"));

    let (code, _, err) = run(bin()
        .args([
            "synth",
            "--recipe",
            dir.join("missing.recipe").to_str().unwrap(),
        ])
        .args(["--output", out.to_str().unwrap()]));
    assert_eq!(code, 2, "unreadable recipe should be a data error: {err}");
}

#[test]
fn help_exits_zero() {
    let (code, out, _) = run(bin().args(["--help"]));
    assert_eq!(code, 0);
    assert!(out.contains("commands:"));
    let (code, out, _) = run(bin().args(["synth", "--help"]));
    assert_eq!(code, 0);
    assert!(out.contains("--recipe"));
}

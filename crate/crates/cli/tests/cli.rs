use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ren::data::rtok::read_rtok;
use ren::model::{init_params, save_checkpoint, RenConfig};

fn ren(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ren")).args(args).output().expect("spawn ren")
}

fn ok(args: &[&str]) -> Output {
    let out = ren(args);
    assert!(
        out.status.success(),
        "ren {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One 16-d synthetic scene (with pooling head) and a matching random model.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let scenes = dir.join("scenes");
    ok(&[
        "synth",
        "--scenes",
        "1",
        "--pooling-head",
        "--set",
        "data.dim=16",
        "--seed",
        "3",
        "--out",
        s(&scenes),
    ]);
    let config = RenConfig {
        d_model: 16,
        n_blocks: 2,
        n_heads: 4,
        encoder_dim: 16,
        ffn_mult: 4,
    };
    let model = dir.join("model.renc");
    save_checkpoint(&model, &config, &init_params(1, &config).unwrap()).unwrap();
    (scenes, model)
}

#[test]
fn grid_tokenize_gives_g_squared_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (scenes, model) = fixture(dir.path());
    let out = dir.path().join("tok");
    ok(&[
        "tokenize",
        "--features",
        s(&scenes.join("scene_0000.rft")),
        "--checkpoint",
        s(&model),
        "--prompts",
        "grid:32",
        "--out",
        s(&out),
    ]);
    let t = read_rtok(out.join("tokens.rtok")).unwrap();
    assert_eq!(t.len(), 1024);
    assert_eq!(t.ren.nrows(), 1024);
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.rft");
    let out = ren(&[
        "tokenize",
        "--features",
        s(&missing),
        "--checkpoint",
        s(&missing),
        "--prompts",
        "grid:2",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn sweep_mu_rows_non_decreasing() {
    let dir = tempfile::tempdir().unwrap();
    let (scenes, model) = fixture(dir.path());
    let tok = dir.path().join("tok");
    ok(&[
        "tokenize",
        "--features",
        s(&scenes.join("scene_0000.rft")),
        "--checkpoint",
        s(&model),
        "--prompts",
        "grid:8",
        "--out",
        s(&tok),
    ]);
    ok(&[
        "sweep-mu",
        "--tokens",
        s(&tok.join("tokens.rtok")),
        "--grid",
        "0.875:0.975:0.025",
        "--out",
        s(&tok),
    ]);
    let csv = std::fs::read_to_string(tok.join("sweep_mu.csv")).unwrap();
    let rows: Vec<(f32, usize)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (mu, n) = l.split_once(',').unwrap();
            (mu.parse().unwrap(), n.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.windows(2).all(|w| w[0].1 <= w[1].1), "{rows:?}");
    assert!((rows[0].0 - 0.875).abs() < 1e-6 && (rows[4].0 - 0.975).abs() < 1e-6);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(ren(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ren(&[]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = ren(&["synth", "--set", "data.colour=1", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.colour"));
    let out = ren(&["sweep-mu", "--tokens", "x.rtok", "--grid", "0.9:0.8:0.1", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(ren(&["--help"]).status.success());
}

#[test]
fn slic_pipeline_exports_regions_and_extends() {
    let dir = tempfile::tempdir().unwrap();
    let (scenes, model) = fixture(dir.path());
    let rft = scenes.join("scene_0000.rft");
    let tok = dir.path().join("tok");
    ok(&[
        "tokenize",
        "--features",
        s(&rft),
        "--checkpoint",
        s(&model),
        "--prompts",
        "slic:36",
        "--image",
        s(&scenes.join("scene_0000.ppm")),
        "--out",
        s(&tok),
    ]);
    let tokens = tok.join("tokens.rtok");
    let sp = tok.join("superpixels.json");
    let n = read_rtok(&tokens).unwrap().len();
    assert!(n > 1);

    ok(&["export-regions", "--tokens", s(&tokens), "--superpixels", s(&sp), "--mu", "0.9", "--out", s(&tok)]);
    let regions: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tok.join("regions.json")).unwrap()).unwrap();
    let groups = regions["n_groups"].as_u64().unwrap() as usize;
    assert_eq!(regions["masks"].as_array().unwrap().len(), groups);

    ok(&["extend", "--target", s(&rft), "--tokens", s(&tokens), "--superpixels", s(&sp), "--mu", "0.9", "--out", s(&tok)]);
    let ext = read_rtok(tok.join("extended.rtok")).unwrap();
    assert_eq!(ext.len(), groups);
    assert_eq!(ext.aligned.ncols(), 16);

    ok(&["aggregate", "--tokens", s(&tokens), "--mu", "1.0", "--out", s(&tok)]);
    assert_eq!(read_rtok(tok.join("aggregated.rtok")).unwrap().len(), n);
}

#[test]
fn identical_runs_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |dir: &Path| {
        let (scenes, model) = fixture(dir);
        let out = dir.join("tok");
        ok(&[
            "tokenize",
            "--features",
            s(&scenes.join("scene_0000.rft")),
            "--checkpoint",
            s(&model),
            "--prompts",
            "grid:6",
            "--out",
            s(&out),
        ]);
        (
            std::fs::read(scenes.join("scene_0000.rft")).unwrap(),
            std::fs::read(out.join("tokens.rtok")).unwrap(),
        )
    };
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn tiny_training_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let train = |out: &Path| {
        ok(&[
            "train",
            "--set",
            "train.total_steps=2",
            "--set",
            "train.warmup_steps=1",
            "--set",
            "train.batch_scenes=2",
            "--set",
            "train.max_prompts=8",
            "--set",
            "train.n_blocks=1",
            "--set",
            "train.n_heads=2",
            "--set",
            "data.n_scenes=2",
            "--set",
            "data.dim=16",
            "--seed",
            "5",
            "--out",
            s(out),
        ]);
        std::fs::read(out.join("model.renc")).unwrap()
    };
    let first = train(&dir.path().join("a"));
    assert_eq!(first, train(&dir.path().join("b")));
    let metrics = std::fs::read_to_string(dir.path().join("a/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gradcheck", "--seed", "1", "--out", s(dir.path())]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn bench_reports_each_count() {
    let dir = tempfile::tempdir().unwrap();
    let (scenes, model) = fixture(dir.path());
    ok(&[
        "bench",
        "--features",
        s(&scenes.join("scene_0000.rft")),
        "--checkpoint",
        s(&model),
        "--counts",
        "4,16",
        "--runs",
        "2",
        "--warmups",
        "0",
        "--out",
        s(dir.path()),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(report["reports"].as_array().unwrap().len(), 2);
}

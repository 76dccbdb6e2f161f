use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_rowadapt")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small scene so the tests stay fast.
fn write_scene(dir: &Path) -> String {
    let path = dir.join("scene.json");
    fs::write(
        &path,
        r#"{
  "rig": {"fx": 20.0, "fy": 20.0, "cx": 16.0, "cy": 12.0, "width": 32, "height": 24,
           "baseline": 0.10, "cam_height": 0.30},
  "rows": {"row_spacing": 0.76, "robot_width": 0.50}
}"#,
    )
    .unwrap();
    path.display().to_string()
}

fn gen(out: &Path, scene: &str, n: usize, seed: u64) {
    run_ok(&[
        "gen",
        "--domain",
        "early_corn",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        &out.display().to_string(),
        "--scene",
        scene,
        "--imu-sigma-deg",
        "0",
    ]);
}

#[test]
fn gen_is_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = write_scene(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen(&a, &scene, 3, 7);
    gen(&b, &scene, 3, 7);
    assert_eq!(
        fs::read(a.join("manifest.jsonl")).unwrap(),
        fs::read(b.join("manifest.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("left/000000.png")).unwrap(),
        fs::read(b.join("left/000000.png")).unwrap()
    );
    assert!(a.join("provenance.json").is_file());
}

#[test]
fn missing_seed_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen",
        "--domain",
        "early_corn",
        "--n",
        "1",
        "--out",
        &tmp.path().join("x").display().to_string(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn unknown_domain_fails_with_its_name() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen",
        "--domain",
        "moon_base",
        "--n",
        "1",
        "--seed",
        "1",
        "--out",
        &tmp.path().join("x").display().to_string(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("moon_base"));
}

#[test]
fn full_micro_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = write_scene(tmp.path());
    let data = tmp.path().join("data");
    gen(&data, &scene, 6, 11);

    let model = tmp.path().join("model.bin");
    run_ok(&[
        "train-source",
        "--data",
        &data.display().to_string(),
        "--out",
        &model.display().to_string(),
        "--seed",
        "3",
        "--epochs",
        "2",
        "--batch-size",
        "4",
    ]);
    assert!(model.is_file());
    assert!(tmp.path().join("model.loss.csv").is_file());
    assert!(tmp.path().join("model.bin.provenance.json").is_file());

    // eval twice: identical reports (save/load round trip stability)
    let rep1 = tmp.path().join("r1.json");
    let rep2 = tmp.path().join("r2.json");
    for rep in [&rep1, &rep2] {
        run_ok(&[
            "eval",
            "--model",
            &model.display().to_string(),
            "--data",
            &data.display().to_string(),
            "--out",
            &rep.display().to_string(),
        ]);
    }
    assert_eq!(fs::read(&rep1).unwrap(), fs::read(&rep2).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&rep1).unwrap()).unwrap();
    assert_eq!(report["count"], 6);

    // overlap guard: evaluating on the adaptation set itself must fail
    let overlap = run(&[
        "eval",
        "--model",
        &model.display().to_string(),
        "--data",
        &data.display().to_string(),
        "--out",
        &tmp.path().join("r3.json").display().to_string(),
        "--adaptation-data",
        &data.display().to_string(),
    ]);
    assert!(!overlap.status.success());

    let adapted = tmp.path().join("adapted.bin");
    run_ok(&[
        "adapt",
        "--model",
        &model.display().to_string(),
        "--data",
        &data.display().to_string(),
        "--out",
        &adapted.display().to_string(),
        "--seed",
        "4",
        "--force-stage1",
        "--iterations",
        "1",
        "--stage1-max-steps",
        "1",
        "--stage2-epochs",
        "1",
    ]);
    assert!(adapted.is_file());
    assert!(tmp.path().join("adapted.report.json").is_file());
    assert!(tmp.path().join("adapted.metrics.csv").is_file());

    let cmp_dir = tmp.path().join("cmp");
    let text = run_ok(&[
        "compare",
        "--before-model",
        &model.display().to_string(),
        "--after-model",
        &adapted.display().to_string(),
        "--data",
        &data.display().to_string(),
        "--out",
        &cmp_dir.display().to_string(),
    ]);
    assert!(text.contains("vp"));
    assert!(cmp_dir.join("comparison.csv").is_file());
    assert!(cmp_dir.join("comparison.txt").is_file());

    let viz_dir = tmp.path().join("viz");
    run_ok(&[
        "viz",
        "--model",
        &model.display().to_string(),
        "--data",
        &data.display().to_string(),
        "--out",
        &viz_dir.display().to_string(),
        "--n",
        "2",
    ]);
    assert!(viz_dir.join("overlay_000000.png").is_file());
    assert!(viz_dir.join("overlay_000001.png").is_file());
    assert!(!viz_dir.join("overlay_000002.png").exists());
}

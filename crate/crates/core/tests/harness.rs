use std::path::PathBuf;
use std::process::Command;

use odgcnn::config::RunConfig;
use odgcnn::harness::{ablate, ablation_csv, evaluate_checkpoint, fit, generate_data, Sweep};
use odgcnn::scene::load_scene;
use odgcnn::Error;

fn small() -> RunConfig {
    RunConfig::from_text(
        "seed = 3\n\
         data.train_scenes = 8\n\
         data.eval_scenes = 4\n\
         train.epochs = 1\n\
         train.batch = 4\n",
    )
    .unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("odgcnn-harness-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn teacher_dir(name: &str, cfg: &RunConfig) -> PathBuf {
    let dir = scratch(name);
    fit(cfg).unwrap().write(&dir).unwrap();
    dir
}

#[test]
fn untrained_model_scores_near_zero() {
    let mut cfg = small();
    cfg.set("train.epochs", "0").unwrap();
    let run = fit(&cfg).unwrap();
    assert!(run.report.eval.no_nms.map < 0.05, "{}", run.report.eval.no_nms.map);
    assert!(run.report.loss_curve.is_empty());
}

#[test]
fn same_seed_same_checkpoint_and_stable_eval() {
    let cfg = small();
    let a = fit(&cfg).unwrap();
    let b = fit(&cfg).unwrap();
    assert_eq!(a.report.checkpoint_hash, b.report.checkpoint_hash);
    assert_eq!(a.report.to_text(), b.report.to_text());
    let text = a.report.to_text();
    assert!(text.contains("\ndelta_map="));
    assert!(text.contains("\nnms.map="));
    assert!(a.report.to_csv().starts_with("variant,class,threshold,ap\n"));

    let dir = scratch("eval-twice");
    a.write(&dir).unwrap();
    let path = dir.join("model.odgc1");
    let e1 = evaluate_checkpoint(&cfg, &path).unwrap();
    let e2 = evaluate_checkpoint(&cfg, &path).unwrap();
    assert_eq!(e1.report.to_text(), e2.report.to_text());
    assert_eq!(e1.report.checkpoint_hash, a.report.checkpoint_hash);
    assert_eq!(e1.report.eval, a.report.eval);
    for f in ["config.echo", "report.txt", "report.csv", "timing.txt", "model.odgc1"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    assert_eq!(RunConfig::load(&dir.join("config.echo")).unwrap(), cfg);
}

#[test]
fn zero_beta_matches_plain_training() {
    let cfg = small();
    let dir = teacher_dir("beta0", &cfg);
    let plain = fit(&cfg).unwrap();
    let mut d = cfg.clone();
    d.set("distill.mode", "set").unwrap();
    d.set("distill.teacher", dir.join("model.odgc1").to_str().unwrap()).unwrap();
    d.set("distill.beta", "0").unwrap();
    let run = fit(&d).unwrap();
    assert_eq!(run.report.checkpoint_hash, plain.report.checkpoint_hash);
    assert_eq!(run.log.step_distill.len(), run.log.step_loss.len());
}

#[test]
fn frozen_student_sees_a_constant_distill_term() {
    let mut cfg = small();
    cfg.set("data.train_scenes", "1").unwrap();
    let dir = teacher_dir("lr0", &cfg);
    let mut d = cfg.clone();
    for (k, v) in [
        ("distill.mode", "set"),
        ("distill.teacher", dir.join("model.odgc1").to_str().unwrap()),
        ("distill.init_from_teacher", "true"),
        ("train.lr_start", "0"),
        ("train.lr_peak", "0"),
        ("train.lr_end", "0"),
        ("train.batch", "1"),
        ("train.epochs", "3"),
    ] {
        d.set(k, v).unwrap();
    }
    let run = fit(&d).unwrap();
    assert_eq!(run.log.step_distill.len(), 3);
    assert!(run.log.step_distill.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn dense_floor_of_one_removes_everything() {
    let mut cfg = small();
    cfg.set("model.head", "dense").unwrap();
    cfg.set("eval.score_floor", "1.0").unwrap();
    let run = fit(&cfg).unwrap();
    assert_eq!(run.report.eval.no_nms.detections, 0);
    assert_eq!(run.report.eval.nms.detections, 0);
    assert_eq!(run.report.eval.no_nms.map, 0.0);
}

#[test]
fn ablation_sweeps() {
    let mut cfg = small();
    cfg.set("data.train_scenes", "4").unwrap();
    cfg.set("data.eval_scenes", "2").unwrap();
    let s = Sweep::parse("neighbors=1,4,16").unwrap();
    let dir = scratch("ablate");
    let rows = ablate(&cfg, &s, Some(&dir)).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(ablation_csv(&s, &rows).lines().count(), 4);
    assert!(dir.join("neighbors-16").join("report.txt").exists());

    let rows = ablate(&cfg, &Sweep::parse("layers=1,2").unwrap(), None).unwrap();
    assert!(rows[0].report.params < rows[1].report.params);

    let rows = ablate(&cfg, &Sweep::parse("interaction=dgcnn,self-attention").unwrap(), None).unwrap();
    assert_eq!(rows.len(), 2);

    assert!(Sweep::parse("neighbors=").is_err());
    assert!(Sweep::parse("epochs=1,2").is_err());
    assert!(ablate(&cfg, &Sweep::parse("neighbors=64").unwrap(), None).is_err());
}

#[test]
fn feature_distillation_needs_matching_maps() {
    let mut t = small();
    t.set("model.cell_size", "0.25").unwrap();
    let dir = teacher_dir("feature", &t);
    let mut d = small();
    d.set("distill.mode", "feature").unwrap();
    d.set("distill.teacher", dir.join("model.odgc1").to_str().unwrap()).unwrap();
    match fit(&d) {
        Err(Error::Config(m)) => assert!(m.contains("feature"), "{m}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatched maps were accepted"),
    }
}

#[test]
fn checkpoint_mismatch_names_the_tensor() {
    let cfg = small();
    let dir = teacher_dir("mismatch", &cfg);
    let mut other = cfg.clone();
    other.set("model.layers", "3").unwrap();
    match evaluate_checkpoint(&other, &dir.join("model.odgc1")) {
        Err(Error::CheckpointMismatch(m)) => assert!(m.contains("dgcnn.layer2"), "{m}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatched checkpoint was accepted"),
    }
    let mut d = cfg.clone();
    d.set("distill.mode", "set").unwrap();
    d.set("distill.teacher", dir.join("missing.odgc1").to_str().unwrap()).unwrap();
    assert!(matches!(fit(&d), Err(Error::Config(_))));
}

#[test]
fn generated_scenes_load_back() {
    let mut cfg = small();
    cfg.set("data.train_scenes", "3").unwrap();
    cfg.set("data.eval_scenes", "2").unwrap();
    let dir = scratch("gen");
    assert_eq!(generate_data(&cfg, &dir).unwrap(), 5);
    let (train, _) = odgcnn::harness::datasets(&cfg).unwrap();
    assert_eq!(load_scene(dir.join("train").join("scene_00001.txt")).unwrap(), train[1]);
    assert!(dir.join("eval").join("scene_00001.txt").exists());
}

#[test]
fn cli_reports_errors_with_a_kind_prefix() {
    let bin = env!("CARGO_BIN_EXE_odgcnn");
    let out = Command::new(bin).args(["train", "--set", "model.nope=1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[config]: "), "{err}");

    let out = Command::new(bin)
        .args(["eval", "--checkpoint", "/nonexistent/model.odgc1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let dir = scratch("cli");
    let out = Command::new(bin)
        .args(["gen-data", "--set", "data.train_scenes=2", "--set", "data.eval_scenes=1", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("train").join("scene_00001.txt").exists());
}

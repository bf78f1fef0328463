//! Training, evaluation, checkpointing, prediction output, export and CLI.

use clap::Parser;
use mcinet::checkpoint;
use mcinet::cli::{exit_code, run, Cli, Outcome};
use mcinet::config::{ModelConfig, RunConfig};
use mcinet::data::export::{export_episodes, load_episodes, read_mask_png, read_rgb_png};
use mcinet::data::{sample_eval_suite, training_episode, FoldSpec};
use mcinet::evaluate::{evaluate, evaluate_suite, EvalSpec, ModelPredictor};
use mcinet::gradcheck::{gradcheck, GradcheckOptions};
use mcinet::params::ParamGroup;
use mcinet::predict::{predict_episode, write_prediction, PREDICTION_COLOR};
use mcinet::train::Trainer;
use mcinet::{generate_episode, Error, MciNet};

fn tiny_run(steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::tiny();
    cfg.train.steps = steps;
    cfg.train.batch_size = 2;
    cfg.train.eval_episodes = 8;
    cfg
}

#[test]
fn identical_seeds_give_identical_runs() {
    let cfg = tiny_run(3);
    let mut a = Trainer::new(&cfg).unwrap();
    let mut b = Trainer::new(&cfg).unwrap();
    a.run().unwrap();
    b.run().unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.store, b.store);
    let last = a.history.steps.last().unwrap();
    assert_eq!(last.loss.lambda, 0.6);
    assert_eq!(last.loss.total, last.loss.large_bce + 0.6 * last.loss.small_bce);
}

#[test]
fn checkpoint_round_trip_is_byte_identical_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(4);
    let mut t = Trainer::new(&cfg).unwrap();
    t.train_step().unwrap();
    t.train_step().unwrap();
    let p1 = dir.path().join("a.mcin");
    let p2 = dir.path().join("b.mcin");
    checkpoint::save(&t, &p1).unwrap();
    let mut loaded = checkpoint::load(&p1).unwrap();
    checkpoint::save(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(loaded.store.to_bytes(), t.store.to_bytes());
    assert_eq!(loaded.step, 2);

    let next = t.train_step().unwrap();
    let resumed = loaded.train_step().unwrap();
    assert_eq!(next, resumed);
    assert_eq!(t.store, loaded.store);
    assert_eq!(t.opt, loaded.opt);
}

#[test]
fn folds_never_share_classes_between_training_and_evaluation() {
    let folds = FoldSpec::default();
    for fold in 0..4 {
        let test: Vec<usize> = folds.test_classes(fold);
        for step in 0..50 {
            let e = training_episode(fold, 1, 9, step, 0, 16).unwrap();
            assert!(!test.contains(&e.class_id));
        }
        for e in sample_eval_suite(fold, 50, 1, 9, 16).unwrap() {
            assert!(test.contains(&e.class_id));
            assert_eq!(e.fold_id, fold);
        }
    }
}

#[test]
fn untrained_models_score_near_chance() {
    for seed in 0..3 {
        let (model, store) = MciNet::new(&ModelConfig::tiny(), seed).unwrap();
        let r = evaluate_suite(&ModelPredictor::new(&model, &store), 0, 1, 40, seed, 16).unwrap();
        assert!((0.0..=0.35).contains(&r.miou), "seed {} mIoU {}", seed, r.miou);
    }
}

#[test]
fn five_shot_evaluation_of_one_shot_model() {
    let (model, store) = MciNet::new(&ModelConfig::tiny(), 0).unwrap();
    let spec = EvalSpec {
        fold: 1,
        shots: 5,
        episodes: 8,
        seed: 4,
    };
    let (report, results) = evaluate(&model, &store, "h", 1, spec).unwrap();
    assert_eq!(results.shots, 5);
    assert_eq!(results.per_class_iou, report.per_class_iou);
    assert_eq!(results.episode_manifest_hash.len(), 64);
    let (_, again) = evaluate(&model, &store, "h", 1, spec).unwrap();
    assert_eq!(results, again);
}

#[test]
fn prediction_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (model, store) = MciNet::new(&ModelConfig::tiny(), 1).unwrap();
    let ep = generate_episode(10, 1, 2, 16).unwrap();
    let pred = predict_episode(&model, &store, &ep).unwrap();
    assert_eq!(pred.mask.len(), 16 * 16);
    let files = write_prediction(dir.path(), "x", &ep, &pred).unwrap();
    assert_eq!(read_mask_png(&files.mask).unwrap(), pred.mask_tensor());
    assert_eq!(read_mask_png(&files.ground_truth).unwrap(), ep.query.mask);
    assert_eq!(read_rgb_png(&files.query).unwrap(), ep.query.image);

    let over = read_rgb_png(&files.overlay).unwrap();
    let img = ep.query.image.data();
    for c in 0..3 {
        for p in 0..256 {
            let m = f64::from(u8::from(pred.mask[p]));
            let blend = 255.0 * (0.5 * img[c * 256 + p] + 0.5 * f64::from(PREDICTION_COLOR[c]) / 255.0 * m);
            assert_eq!((over.data()[c * 256 + p] * 255.0).round(), blend.round());
        }
    }

    let big = generate_episode(10, 1, 2, 32).unwrap();
    assert!(matches!(predict_episode(&model, &store, &big), Err(Error::Shape(_))));
}

#[test]
fn exported_episodes_reload_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let eps = sample_eval_suite(2, 3, 2, 1, 16).unwrap();
    export_episodes(dir.path(), &eps).unwrap();
    let back = load_episodes(dir.path()).unwrap();
    assert_eq!(back.len(), eps.len());
    for (a, b) in eps.iter().zip(&back) {
        assert_eq!((a.class_id, a.fold_id, a.seed, a.shots()), (b.class_id, b.fold_id, b.seed, b.shots()));
        assert_eq!(a.query.image, b.query.image);
        assert_eq!(a.query.mask, b.query.mask);
        assert_eq!(a.support_images(), b.support_images());
        assert_eq!(a.support_masks(), b.support_masks());
    }
}

#[test]
fn frozen_backbone_is_excluded_from_gradcheck() {
    let mut cfg = tiny_run(1);
    cfg.model.backbone.freeze_backbone = true;
    let opts = GradcheckOptions {
        samples_per_tensor: 1,
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&cfg, &opts).unwrap();
    assert!(report.group(ParamGroup::Backbone).is_none());
    assert!(report.group(ParamGroup::LargeHead).is_some());
}

fn cli(args: &[&str]) -> mcinet::Result<Outcome> {
    run(&Cli::try_parse_from(std::iter::once("mcinet").chain(args.iter().copied())).unwrap())
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[optim]\nlearning_rate = 1.0\n").unwrap();
    let r = cli(&["train", "--config", bad.to_str().unwrap()]);
    assert!(matches!(r, Err(Error::Config(_))));
    assert_eq!(exit_code(&r), std::process::ExitCode::from(2));

    let out = dir.path().join("gc");
    let r = cli(&["gradcheck", "--tolerance", "0", "--samples", "1", "--out", out.to_str().unwrap()]);
    assert!(matches!(r, Ok(Outcome::Failed(_))));
    assert_eq!(exit_code(&r), std::process::ExitCode::from(3));

    assert!(Cli::try_parse_from(["mcinet", "eval", "--checkpoint", "x", "--k", "3"]).is_err());
    assert!(Cli::try_parse_from(["mcinet", "train", "--fold", "4"]).is_err());
}

#[test]
fn cli_train_eval_predict_gen_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, tiny_run(2).to_toml_string()).unwrap();
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let run_dir = d("run");
    assert!(matches!(
        cli(&["train", "--config", cfg.to_str().unwrap(), "--seed", "2", "--fold", "3", "--no-mcfm", "--out", &run_dir]),
        Ok(Outcome::Done)
    ));
    let ckpt = dir.path().join("run").join(mcinet::cli::CHECKPOINT_NAME);
    let t = checkpoint::load(&ckpt).unwrap();
    assert!(!t.cfg.model.mcfm.enabled);
    assert_eq!((t.cfg.train.seed, t.cfg.train.fold, t.step), (2, 3, 2));

    let ev = d("ev");
    cli(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "4", "--out", &ev]).unwrap();
    let results: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ev/results.json")).unwrap()).unwrap();
    for key in ["config_hash", "per_class_iou", "miou", "fb_iou", "seed", "episode_manifest_hash"] {
        assert!(results.get(key).is_some(), "{}", key);
    }
    assert_eq!(results["config_hash"], t.cfg.hash());

    let pr = d("pr");
    cli(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--class", "3", "--out", &pr]).unwrap();
    assert!(dir.path().join("pr/class3_seed0_overlay.png").exists());

    let gd = d("gd");
    cli(&["gen-data", "--config", cfg.to_str().unwrap(), "--episodes", "2", "--out", &gd]).unwrap();
    assert_eq!(load_episodes(&dir.path().join("gd")).unwrap().len(), 2);
}

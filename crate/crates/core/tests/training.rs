mod common;

use common::{fixture, read, run_dir, small_teacher};
use dfq_core::causal_objective::CriticObjective;
use dfq_core::checkpoint::Checkpoint;
use dfq_core::distillation::{generator_terms, vanilla_loss, Phase};
use dfq_core::generator::{intervene_styles, sample_content, sample_style};
use dfq_core::model_zoo::BnMode;
use dfq_core::training::{
    self, decay_multiplier, load_student, load_teacher, train_step, RunControl, RunState, METRICS_FILE,
};
use dfq_core::{Error, Tape};

/// One iteration rebuilt from the vanilla-loss building blocks only.
fn vanilla_reference_step(state: &mut RunState, cfg: &dfq_core::config::RunConfig) {
    let mut teacher = small_teacher();
    let normalizer = &cfg.normalization;
    let w = &cfg.distill;
    let n = cfg.schedule.batch_size;
    let spec = state.generator.spec().clone();

    let content = sample_content(n, spec.num_classes, &mut state.data_rng).unwrap();
    let style = sample_style(n, spec.latent_dim, &mut state.data_rng);
    let mut tape = Tape::new();
    let gpv = state.generator.params.attach(&mut tape, true);
    let s = tape.constant(style);
    let images = state.generator.forward(&mut tape, &gpv, &content, s).unwrap();
    let x = normalizer.apply_signed(&mut tape, images);
    let tpv = teacher.params.attach(&mut tape, false);
    let (bns, ce, _) = generator_terms(&mut tape, &mut teacher, &tpv, x, &content).unwrap();
    let wb = tape.scale(bns, w.w_bns);
    let wc = tape.scale(ce, w.w_ce);
    let loss = tape.add(wb, wc);
    let mut grads = tape.backward(loss);
    let g = state.generator.params.collect_grads(&gpv, &mut grads);
    state.generator_opt.step(&mut state.generator.params, &g);

    let content = sample_content(n, spec.num_classes, &mut state.data_rng).unwrap();
    let styles = intervene_styles(&content, cfg.causal.interventions_m, spec.latent_dim, &mut state.data_rng).unwrap();
    let mut tape = Tape::new();
    let qpv = state.student.model.params.attach(&mut tape, true);
    let mut total = None;
    for style in &styles {
        let batch = state.generator.generate(&content, style).unwrap();
        let images = tape.constant(batch.images);
        let (l, _) = vanilla_loss(
            &mut tape,
            &mut teacher,
            &mut state.student,
            &qpv,
            images,
            &content,
            w,
            normalizer,
            Phase::Student,
            BnMode::Running,
        )
        .unwrap();
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l),
        });
    }
    let mean = tape.scale(total.unwrap(), 1.0 / styles.len() as f32);
    let mut grads = tape.backward(mean);
    let q = state.student.model.params.collect_grads(&qpv, &mut grads);
    state.student_opt.step(&mut state.student.model.params, &q);
    state.step += 1;
}

#[test]
fn zero_lambda_step_equals_vanilla_path_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(dir.path());
    cfg.causal.lambda = 0.0;
    let teacher = small_teacher();
    let mut a = RunState::new(&cfg, &teacher).unwrap();
    a.calibrate(&cfg, &cfg.normalization).unwrap();
    let mut b = a.clone();
    for _ in 0..2 {
        train_step(&mut a, &mut small_teacher(), &cfg).unwrap();
        vanilla_reference_step(&mut b, &cfg);
    }
    assert_eq!(a.generator.params, b.generator.params);
    assert_eq!(a.student.model.params, b.student.model.params);
    assert_eq!(a.student.activations, b.student.activations);
    assert_eq!(a.data_rng, b.data_rng);
    // the critic and the couple stream are untouched without the causal term
    assert_eq!(a.critic.params, RunState::new(&cfg, &teacher).unwrap().critic.params);
    assert_eq!(a.pair_rng, b.pair_rng);
}

#[test]
fn positive_lambda_adds_the_causal_term() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(dir.path());
    let teacher = small_teacher();
    let mut with = RunState::new(&cfg, &teacher).unwrap();
    with.calibrate(&cfg, &cfg.normalization).unwrap();
    let mut without = with.clone();
    let critic_before = with.critic.params.clone();
    let r1 = train_step(&mut with, &mut small_teacher(), &cfg).unwrap();
    cfg.causal.lambda = 0.0;
    let r0 = train_step(&mut without, &mut small_teacher(), &cfg).unwrap();
    assert!(r1.causal_kl > 0.0);
    assert_eq!(r0.causal_kl, 0.0);
    assert_eq!(r1.kd, r0.kd);
    assert!((r1.total - r0.total - 0.5 * r1.causal_kl as f64).abs() < 1e-9);
    assert_eq!(with.generator.params, without.generator.params);
    assert_ne!(with.student.model.params, without.student.model.params);
    assert_ne!(with.critic.params, critic_before);
}

#[test]
fn critic_objective_only_changes_the_critic_update() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(dir.path());
    let teacher = small_teacher();
    let mut nce = RunState::new(&cfg, &teacher).unwrap();
    nce.calibrate(&cfg, &cfg.normalization).unwrap();
    let mut joint = nce.clone();
    let critic_before = nce.critic.params.clone();
    cfg.causal.critic_objective = CriticObjective::Nce;
    let rn = train_step(&mut nce, &mut small_teacher(), &cfg).unwrap();
    cfg.causal.critic_objective = CriticObjective::Joint;
    let rj = train_step(&mut joint, &mut small_teacher(), &cfg).unwrap();
    assert_eq!(rn.total, rj.total);
    assert_eq!(nce.student.model.params, joint.student.model.params);
    assert_ne!(nce.critic.params, critic_before);
    assert_ne!(joint.critic.params, critic_before);
    assert_ne!(nce.critic.params, joint.critic.params);
}

#[test]
fn run_writes_artifacts_and_keeps_teacher_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let teacher_bytes = read(&cfg.teacher_checkpoint);
    let summary = training::run(&cfg, &run_dir(&cfg), &RunControl::default()).unwrap();
    let rd = run_dir(&cfg);
    for f in ["config.toml", "metrics.jsonl", "last.ckpt", "best.ckpt", "summary.json"] {
        assert!(rd.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(rd.join(METRICS_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2 * (3 + 1));
    assert!(lines[3].get("eval_acc").is_some());
    assert!(lines[0].get("causal_kl").is_some());
    assert_eq!(lines[4]["lr_q"].as_f64().unwrap() as f32, cfg.schedule.lr_student * decay_multiplier(&cfg, 1));
    assert_eq!(summary.epochs_completed, 2);
    assert_eq!(summary.steps, 6);
    assert_eq!(read(&cfg.teacher_checkpoint), teacher_bytes);
    assert_eq!(
        load_teacher(&cfg.teacher_checkpoint).unwrap().params.checksum(),
        small_teacher().params.checksum()
    );
    let ckpt = Checkpoint::load(&rd.join("last.ckpt")).unwrap();
    assert_eq!(ckpt.kind(), Some("run"));
    let student = load_student(&rd.join("last.ckpt")).unwrap();
    assert!(student.activations.iter().all(|a| a.running_max.is_some()));
    let written: dfq_core::config::RunConfig =
        toml::from_str(&std::fs::read_to_string(rd.join("config.toml")).unwrap()).unwrap();
    assert_eq!(written, cfg);
}

#[test]
fn identical_seeds_give_identical_streams() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(dir.path());
    cfg.run_name = "a".into();
    training::run(&cfg, &run_dir(&cfg), &RunControl::default()).unwrap();
    let a = read(run_dir(&cfg).join(METRICS_FILE));
    cfg.run_name = "b".into();
    training::run(&cfg, &run_dir(&cfg), &RunControl::default()).unwrap();
    assert_eq!(a, read(run_dir(&cfg).join(METRICS_FILE)));
    cfg.run_name = "c".into();
    cfg.seed = 1;
    training::run(&cfg, &run_dir(&cfg), &RunControl::default()).unwrap();
    assert_ne!(a, read(run_dir(&cfg).join(METRICS_FILE)));
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(dir.path());
    cfg.schedule.epochs = 3;
    cfg.run_name = "full".into();
    training::run(&cfg, &run_dir(&cfg), &RunControl::default()).unwrap();
    let full = run_dir(&cfg);

    cfg.run_name = "split".into();
    let split = run_dir(&cfg);
    let stop = RunControl {
        resume: false,
        stop_after_epochs: Some(1),
    };
    assert_eq!(training::run(&cfg, &split, &stop).unwrap().epochs_completed, 1);
    // a partial epoch that was never checkpointed is discarded on resume
    let resume = RunControl {
        resume: true,
        stop_after_epochs: None,
    };
    let s = training::run(&cfg, &split, &resume).unwrap();
    assert_eq!(s.epochs_completed, 3);
    assert_eq!(read(full.join(METRICS_FILE)), read(split.join(METRICS_FILE)));
    let ckpt_params = |p: &std::path::Path| load_student(p).unwrap().model.params;
    assert_eq!(ckpt_params(&full.join("last.ckpt")), ckpt_params(&split.join("last.ckpt")));
}

#[test]
fn missing_teacher_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(dir.path());
    cfg.teacher_checkpoint = dir.path().join("nope.ckpt");
    let err = training::run(&cfg, &run_dir(&cfg), &RunControl::default()).unwrap_err();
    assert!(matches!(err, Error::CheckpointNotFound(_)));
}

#[test]
fn invalid_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(dir.path());
    cfg.quant.bits_weights = 1;
    assert!(training::run(&cfg, &run_dir(&cfg), &RunControl::default()).unwrap_err().is_validation());
}

//! Alternating data-free fine-tuning: each iteration updates the generator on its
//! vanilla terms, then the quantized student (and critic) on intervened batches.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use dfq_autograd::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::causal_objective::{causal_dfq_loss, critic_nce_loss, Critic, CriticObjective, StudentSide};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, StudentBn};
use crate::data::{load_dataset, Dataset, Normalizer};
use crate::distillation::{generator_terms, LossReport};
use crate::generator::{sample_content, sample_style, Generator, GeneratorSpec};
use crate::model_zoo::{BnMode, Classifier};
use crate::optim::{Adam, Sgd};
use crate::quantization::{wrap_model, ActivationQuantizer, QuantizedModel, WrapOptions};
use crate::{Error, Result};

const STREAM_GENERATOR_INIT: u64 = 1;
const STREAM_CRITIC_INIT: u64 = 2;
const STREAM_DATA: u64 = 3;
const STREAM_PAIRS: u64 = 4;
const STREAM_CALIBRATION: u64 = 5;
const EVAL_CHUNK: usize = 250;

/// Independent RNG stream `stream` derived from `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Anything that maps a batch of `[0, 1]` images to class predictions.
pub trait Predictor {
    fn predict(&mut self, images: &Tensor) -> Vec<usize>;
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.dim(0))
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub struct FloatPredictor<'a> {
    pub model: &'a mut Classifier,
    pub normalizer: &'a Normalizer,
}

impl Predictor for FloatPredictor<'_> {
    fn predict(&mut self, images: &Tensor) -> Vec<usize> {
        argmax_rows(&self.model.logits(&self.normalizer.normalize_unit(images)))
    }
}

pub struct QuantPredictor<'a> {
    pub model: &'a mut QuantizedModel,
    pub normalizer: &'a Normalizer,
}

impl Predictor for QuantPredictor<'_> {
    fn predict(&mut self, images: &Tensor) -> Vec<usize> {
        argmax_rows(&self.model.logits(&self.normalizer.normalize_unit(images)))
    }
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(model: &mut dyn Predictor, eval: &Dataset) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < eval.len() {
        let end = (start + EVAL_CHUNK).min(eval.len());
        let preds = model.predict(&eval.images.slice_batch(start, end));
        correct += preds.iter().zip(&eval.labels[start..end]).filter(|(p, l)| p == l).count();
        start = end;
    }
    Ok(correct as f64 / eval.len() as f64)
}

/// Learning-rate multiplier at `epoch`.
pub fn decay_multiplier(cfg: &RunConfig, epoch: usize) -> f32 {
    cfg.schedule.decay_factor.powi((epoch / cfg.schedule.decay_every) as i32)
}

/// Mutable state of a fine-tuning run; everything needed to resume bit-exactly.
#[derive(Clone, Debug)]
pub struct RunState {
    pub step: u64,
    pub epoch: usize,
    pub generator: Generator,
    pub generator_opt: Adam,
    pub student: QuantizedModel,
    pub student_opt: Sgd,
    pub critic: Critic,
    pub critic_opt: Adam,
    pub data_rng: ChaCha8Rng,
    pub pair_rng: ChaCha8Rng,
    pub best_acc: f64,
    pub initial_acc: f64,
    pub teacher_acc: f64,
    pub eval_history: Vec<f64>,
    pub metrics_lines: u64,
}

impl RunState {
    /// Fresh state: student copied from the teacher, generator and critic initialized from `cfg.seed`.
    pub fn new(cfg: &RunConfig, teacher: &Classifier) -> Result<Self> {
        let num_classes = teacher.head_width();
        let image_shape = teacher.spec().input_shape;
        let generator = Generator::new(
            GeneratorSpec {
                num_classes,
                latent_dim: cfg.generator.latent_dim,
                width: cfg.generator.width,
                image_shape,
            },
            &mut rng_stream(cfg.seed, STREAM_GENERATOR_INIT),
        )?;
        let width = teacher.spec().penultimate_width()?;
        let critic = Critic::new(width, width, cfg.causal.beta, &mut rng_stream(cfg.seed, STREAM_CRITIC_INIT))?;
        let student = wrap_model(
            teacher,
            cfg.quant.bits_weights,
            cfg.quant.bits_activations,
            WrapOptions {
                exempt_first_last: cfg.quant.exempt_first_last,
            },
        )?;
        let g = &cfg.generator;
        let s = &cfg.schedule;
        Ok(Self {
            step: 0,
            epoch: 0,
            generator_opt: Adam::new(&generator.params, g.generator_lr, g.beta1, g.beta2),
            critic_opt: Adam::new(&critic.params, g.generator_lr, g.beta1, g.beta2),
            student_opt: Sgd::new(&student.model.params, s.lr_student, s.momentum, s.weight_decay, s.nesterov),
            generator,
            student,
            critic,
            data_rng: rng_stream(cfg.seed, STREAM_DATA),
            pair_rng: rng_stream(cfg.seed, STREAM_PAIRS),
            best_acc: f64::NEG_INFINITY,
            initial_acc: f64::NAN,
            teacher_acc: f64::NAN,
            eval_history: Vec::new(),
            metrics_lines: 0,
        })
    }

    pub fn set_epoch_lrs(&mut self, cfg: &RunConfig) {
        let mult = decay_multiplier(cfg, self.epoch);
        self.generator_opt.lr = cfg.generator.generator_lr * mult;
        self.critic_opt.lr = cfg.generator.generator_lr * mult;
        self.student_opt.lr = cfg.schedule.lr_student * mult;
    }

    /// Initializes activation ranges from one generated batch, without touching parameters.
    pub fn calibrate(&mut self, cfg: &RunConfig, normalizer: &Normalizer) -> Result<()> {
        let mut rng = rng_stream(cfg.seed, STREAM_CALIBRATION);
        let spec = self.generator.spec().clone();
        let content = sample_content(cfg.schedule.batch_size, spec.num_classes, &mut rng)?;
        let style = sample_style(content.len(), spec.latent_dim, &mut rng);
        let batch = self.generator.generate(&content, &style)?;
        let mut tape = Tape::new();
        let pv = self.student.model.params.attach(&mut tape, false);
        let images = tape.constant(batch.images);
        let x = normalizer.apply_signed(&mut tape, images);
        self.student.forward(&mut tape, &pv, x, BnMode::Running, true);
        Ok(())
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new("run");
        self.student.model.to_checkpoint(&mut ckpt, "student.")?;
        ckpt.put_json("student.activations", &self.student.activations)?;
        ckpt.put_json("student.quantized", &self.student.quantized)?;
        self.generator.to_checkpoint(&mut ckpt, "generator.")?;
        self.critic.to_checkpoint(&mut ckpt, "critic.");
        ckpt.put_tensor_list("opt_q.buf", &self.student_opt.buffers);
        ckpt.put_tensor_list("opt_g.m", &self.generator_opt.m);
        ckpt.put_tensor_list("opt_g.v", &self.generator_opt.v);
        ckpt.put_tensor_list("opt_c.m", &self.critic_opt.m);
        ckpt.put_tensor_list("opt_c.v", &self.critic_opt.v);
        ckpt.put_json(
            "rng",
            &RngState {
                data: self.data_rng.clone(),
                pairs: self.pair_rng.clone(),
            },
        )?;
        ckpt.put_json(
            "state",
            &StateMeta {
                step: self.step,
                epoch: self.epoch,
                best_acc: finite_or_none(self.best_acc),
                initial_acc: finite_or_none(self.initial_acc),
                teacher_acc: finite_or_none(self.teacher_acc),
                eval_history: self.eval_history.clone(),
                metrics_lines: self.metrics_lines,
                generator_opt_steps: self.generator_opt.steps,
                critic_opt_steps: self.critic_opt.steps,
            },
        )?;
        ckpt.put_json("config", cfg)?;
        ckpt.put_json("arch_spec", self.student.model.spec())?;
        ckpt.put_json(
            "metrics",
            &serde_json::json!({
                "epoch": self.epoch,
                "eval_acc": self.eval_history.last(),
                "best_acc": finite_or_none(self.best_acc),
            }),
        )?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &RunConfig, teacher: &Classifier) -> Result<Self> {
        let mut state = Self::new(cfg, teacher)?;
        state.student.model = Classifier::from_checkpoint(ckpt, "student.")?;
        state.student.activations = ckpt.get_json::<Vec<ActivationQuantizer>>("student.activations")?;
        state.student.quantized = ckpt.get_json("student.quantized")?;
        state.generator = Generator::from_checkpoint(ckpt, "generator.")?;
        ckpt.load_params("critic.", &mut state.critic.params)?;
        state.student_opt.buffers = ckpt.tensor_list("opt_q.buf", state.student_opt.buffers.len())?;
        state.generator_opt.m = ckpt.tensor_list("opt_g.m", state.generator_opt.m.len())?;
        state.generator_opt.v = ckpt.tensor_list("opt_g.v", state.generator_opt.v.len())?;
        state.critic_opt.m = ckpt.tensor_list("opt_c.m", state.critic_opt.m.len())?;
        state.critic_opt.v = ckpt.tensor_list("opt_c.v", state.critic_opt.v.len())?;
        let rng: RngState = ckpt.get_json("rng")?;
        state.data_rng = rng.data;
        state.pair_rng = rng.pairs;
        let meta: StateMeta = ckpt.get_json("state")?;
        state.step = meta.step;
        state.epoch = meta.epoch;
        state.best_acc = meta.best_acc.unwrap_or(f64::NEG_INFINITY);
        state.initial_acc = meta.initial_acc.unwrap_or(f64::NAN);
        state.teacher_acc = meta.teacher_acc.unwrap_or(f64::NAN);
        state.eval_history = meta.eval_history;
        state.metrics_lines = meta.metrics_lines;
        state.generator_opt.steps = meta.generator_opt_steps;
        state.critic_opt.steps = meta.critic_opt_steps;
        Ok(state)
    }
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Serialize, Deserialize)]
struct RngState {
    data: ChaCha8Rng,
    pairs: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    epoch: usize,
    best_acc: Option<f64>,
    initial_acc: Option<f64>,
    teacher_acc: Option<f64>,
    eval_history: Vec<f64>,
    metrics_lines: u64,
    generator_opt_steps: u64,
    critic_opt_steps: u64,
}

fn student_bn_mode(cfg: &RunConfig) -> BnMode {
    match cfg.quant.student_bn {
        StudentBn::Running => BnMode::Running,
        StudentBn::Batch => BnMode::Batch { update_running: true },
    }
}

fn check_finite(value: f32, step: u64, rng_before: &ChaCha8Rng) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            rng_state: serde_json::to_string(rng_before).unwrap_or_default(),
        })
    }
}

/// One alternating iteration. Never reads dataset files; the teacher is not modified.
pub fn train_step(state: &mut RunState, teacher: &mut Classifier, cfg: &RunConfig) -> Result<LossReport> {
    let normalizer = &cfg.normalization;
    let weights = &cfg.distill;
    let batch_size = cfg.schedule.batch_size;
    let rng_before = state.data_rng.clone();

    // generator update on its vanilla terms
    let spec = state.generator.spec().clone();
    let content = sample_content(batch_size, spec.num_classes, &mut state.data_rng)?;
    let style = sample_style(batch_size, spec.latent_dim, &mut state.data_rng);
    let mut tape = Tape::new();
    let gpv = state.generator.params.attach(&mut tape, true);
    let s = tape.constant(style);
    let images = state.generator.forward(&mut tape, &gpv, &content, s)?;
    let x = normalizer.apply_signed(&mut tape, images);
    let teacher_pv = teacher.params.attach(&mut tape, false);
    let (bns, ce_g, _) = generator_terms(&mut tape, teacher, &teacher_pv, x, &content)?;
    let wb = tape.scale(bns, weights.w_bns);
    let wc = tape.scale(ce_g, weights.w_ce);
    let g_loss = tape.add(wb, wc);
    check_finite(tape.value(g_loss).item(), state.step, &rng_before)?;
    let bns_value = tape.value(bns).item();
    let ce_g_value = tape.value(ce_g).item();
    let mut grads = tape.backward(g_loss);
    let g = state.generator.params.collect_grads(&gpv, &mut grads);
    state.generator_opt.step(&mut state.generator.params, &g);
    drop(tape);

    // student (and critic) update on intervened batches
    let mut tape = Tape::new();
    let qpv = state.student.model.params.attach(&mut tape, true);
    let causal_on = cfg.causal.lambda > 0.0;
    let cpv = state.critic.params.attach(&mut tape, causal_on);
    let loss = causal_dfq_loss(
        &mut tape,
        &state.generator,
        teacher,
        StudentSide {
            model: &mut state.student,
            pv: &qpv,
            bn: student_bn_mode(cfg),
        },
        &state.critic,
        &cpv,
        &cfg.causal,
        weights,
        normalizer,
        batch_size,
        &mut state.data_rng,
        &mut state.pair_rng,
    )?;
    check_finite(tape.value(loss.total).item(), state.step, &rng_before)?;
    let mut grads = tape.backward(loss.total);
    let q = state.student.model.params.collect_grads(&qpv, &mut grads);
    state.student_opt.step(&mut state.student.model.params, &q);
    if causal_on {
        let c = match cfg.causal.critic_objective {
            CriticObjective::Joint => state.critic.params.collect_grads(&cpv, &mut grads),
            CriticObjective::Nce => {
                let inputs = loss.inputs.as_ref().expect("causal inputs recorded when lambda > 0");
                let mut tape = Tape::new();
                let cpv = state.critic.params.attach(&mut tape, true);
                let t: Vec<Var> = inputs.teacher_feats.iter().map(|f| tape.constant(f.clone())).collect();
                let s: Vec<Var> = inputs.student_feats.iter().map(|f| tape.constant(f.clone())).collect();
                let nce = critic_nce_loss(&mut tape, &state.critic, &cpv, &t, &s, &inputs.pairs())?;
                check_finite(tape.value(nce).item(), state.step, &rng_before)?;
                let mut grads = tape.backward(nce);
                state.critic.params.collect_grads(&cpv, &mut grads)
            }
        };
        state.critic_opt.step(&mut state.critic.params, &c);
    }

    let mut report = loss.report;
    report.step = state.step;
    report.bns = bns_value;
    report.ce_generator = ce_g_value;
    report.total = report.weighted_total(weights, cfg.causal.lambda);
    state.step += 1;
    Ok(report)
}

#[derive(Serialize)]
struct StepRecord {
    step: u64,
    epoch: usize,
    bns: f32,
    ce_generator: f32,
    kd: f32,
    ce_student: f32,
    causal_kl: f32,
    total: f64,
    lr_g: f32,
    lr_q: f32,
}

#[derive(Serialize)]
struct EpochRecord {
    epoch: usize,
    eval_acc: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunControl {
    /// Continue from `last.ckpt` in the run directory.
    pub resume: bool,
    /// Stop (with a checkpoint) after this many epochs have completed in total.
    pub stop_after_epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub epochs_completed: usize,
    pub steps: u64,
    pub teacher_acc: f64,
    pub initial_acc: f64,
    pub final_acc: f64,
    pub best_acc: f64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";

fn append_line(file: &mut File, path: &Path, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

fn truncate_lines(path: &Path, keep: u64) -> Result<()> {
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut kept = String::new();
    for line in reader.lines().take(keep as usize) {
        kept.push_str(&line.map_err(|e| Error::io(path, e))?);
        kept.push('\n');
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

pub fn load_teacher(path: &Path) -> Result<Classifier> {
    let ckpt = Checkpoint::load(path)?;
    Classifier::from_checkpoint(&ckpt, "")
}

/// Executes the schedule, writing config, metrics, checkpoints and a summary to `run_dir`.
///
/// The only dataset read is the held-out evaluation split, loaded once before training.
pub fn run(cfg: &RunConfig, run_dir: &Path, control: &RunControl) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let cfg_path = run_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let mut teacher = load_teacher(&cfg.teacher_checkpoint)?;
    let teacher_checksum = teacher.params.checksum();
    let eval = load_dataset(&cfg.data.test)?;
    let normalizer = &cfg.normalization;
    normalizer.validate(teacher.spec().input_shape[0])?;

    let metrics_path = run_dir.join(METRICS_FILE);
    let last_path = run_dir.join(LAST_CKPT);
    let mut state = if control.resume && last_path.is_file() {
        let state = RunState::from_checkpoint(&Checkpoint::load(&last_path)?, cfg, &teacher)?;
        truncate_lines(&metrics_path, state.metrics_lines)?;
        state
    } else {
        let mut state = RunState::new(cfg, &teacher)?;
        state.teacher_acc = evaluate(
            &mut FloatPredictor {
                model: &mut teacher,
                normalizer,
            },
            &eval,
        )?;
        state.calibrate(cfg, normalizer)?;
        state.initial_acc = evaluate(
            &mut QuantPredictor {
                model: &mut state.student,
                normalizer,
            },
            &eval,
        )?;
        File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        log::info!(
            "teacher acc {:.4}, quantized student initial acc {:.4}",
            state.teacher_acc,
            state.initial_acc
        );
        state
    };
    let mut metrics = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let end_epoch = control
        .stop_after_epochs
        .map_or(cfg.schedule.epochs, |n| n.min(cfg.schedule.epochs));
    while state.epoch < end_epoch {
        state.set_epoch_lrs(cfg);
        for _ in 0..cfg.schedule.iterations_per_epoch {
            let report = train_step(&mut state, &mut teacher, cfg)?;
            append_line(
                &mut metrics,
                &metrics_path,
                &StepRecord {
                    step: report.step,
                    epoch: state.epoch,
                    bns: report.bns,
                    ce_generator: report.ce_generator,
                    kd: report.kd,
                    ce_student: report.ce_student,
                    causal_kl: report.causal_kl,
                    total: report.total,
                    lr_g: state.generator_opt.lr,
                    lr_q: state.student_opt.lr,
                },
            )?;
            state.metrics_lines += 1;
        }
        let acc = evaluate(
            &mut QuantPredictor {
                model: &mut state.student,
                normalizer,
            },
            &eval,
        )?;
        append_line(
            &mut metrics,
            &metrics_path,
            &EpochRecord {
                epoch: state.epoch,
                eval_acc: acc,
            },
        )?;
        state.metrics_lines += 1;
        log::info!("epoch {}: eval acc {acc:.4}", state.epoch);
        state.eval_history.push(acc);
        state.epoch += 1;
        let improved = acc > state.best_acc;
        if improved {
            state.best_acc = acc;
        }
        let ckpt = state.to_checkpoint(cfg)?;
        if improved {
            ckpt.save(&run_dir.join(BEST_CKPT))?;
        }
        ckpt.save(&last_path)?;
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    if state.epoch == 0 {
        state.to_checkpoint(cfg)?.save(&last_path)?;
    }
    if teacher.params.checksum() != teacher_checksum {
        return Err(Error::Checkpoint("teacher parameters changed during fine-tuning".into()));
    }
    let summary = RunSummary {
        run_dir: run_dir.to_path_buf(),
        epochs_completed: state.epoch,
        steps: state.step,
        teacher_acc: state.teacher_acc,
        initial_acc: state.initial_acc,
        final_acc: state.eval_history.last().copied().unwrap_or(state.initial_acc),
        best_acc: if state.best_acc.is_finite() {
            state.best_acc
        } else {
            state.initial_acc
        },
    };
    let summary_path = run_dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    Ok(summary)
}

/// Quantized student stored in a run checkpoint.
pub fn load_student(path: &Path) -> Result<QuantizedModel> {
    let ckpt = Checkpoint::load(path)?;
    let model = Classifier::from_checkpoint(&ckpt, "student.")?;
    let cfg: RunConfig = ckpt.get_json("config")?;
    let mut q = wrap_model(
        &model,
        cfg.quant.bits_weights,
        cfg.quant.bits_activations,
        WrapOptions {
            exempt_first_last: cfg.quant.exempt_first_last,
        },
    )?;
    q.activations = ckpt.get_json("student.activations")?;
    q.quantized = ckpt.get_json("student.quantized")?;
    Ok(q)
}

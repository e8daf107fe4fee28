//! Vanilla data-free losses: BN-statistics matching and pseudo-label CE for the
//! generator, logit distillation and pseudo-label CE for the student.

use dfq_autograd::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::model_zoo::{BnLayer, BnMode, Classifier, NoHook};
use crate::params::ParamVars;
use crate::quantization::QuantizedModel;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_bns: f32,
    pub w_kd: f32,
    pub w_ce: f32,
    pub kd_temperature: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_bns: 0.1,
            w_kd: 1.0,
            w_ce: 1.0,
            kd_temperature: 1.0,
        }
    }
}

/// Per-step loss decomposition. Unused components are zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub bns: f32,
    pub ce_generator: f32,
    pub kd: f32,
    pub ce_student: f32,
    pub causal_kl: f32,
    pub total: f64,
}

impl LossReport {
    /// `w_ce (ce_generator + ce_student) + w_bns bns + w_kd kd + lambda causal_kl`.
    pub fn weighted_total(&self, w: &LossWeights, lambda: f32) -> f64 {
        w.w_ce as f64 * (self.ce_generator as f64 + self.ce_student as f64)
            + w.w_bns as f64 * self.bns as f64
            + w.w_kd as f64 * self.kd as f64
            + lambda as f64 * self.causal_kl as f64
    }
}

/// Which side of the vanilla loss receives gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Generator,
    Student,
}

/// Sum over layers of squared distances between batch and stored mean/variance.
pub fn bns_loss_var(tape: &mut Tape, bn_inputs: &[Var], targets: &[BnLayer]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::NoBatchNorm);
    }
    if bn_inputs.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} batch-norm inputs for {} layers",
            bn_inputs.len(),
            targets.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&x, layer) in bn_inputs.iter().zip(targets) {
        let moments = tape.channel_moments(x);
        let c = layer.running_mean.len();
        let mut stored = layer.running_mean.clone();
        stored.extend_from_slice(&layer.running_var);
        let target = tape.constant(Tensor::new(&[2, c], stored)?);
        let diff = tape.sub(moments, target);
        let sq = tape.mul(diff, diff);
        let s = tape.sum(sq);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s),
        });
    }
    Ok(total.expect("at least one layer"))
}

/// BN-statistics loss of the teacher on normalized `images`.
pub fn bns_loss(teacher: &mut Classifier, images: &Tensor) -> Result<f64> {
    if teacher.bn.is_empty() {
        return Err(Error::NoBatchNorm);
    }
    let mut tape = Tape::new();
    let pv = teacher.params.attach(&mut tape, false);
    let x = tape.constant(images.clone());
    let out = teacher.forward(&mut tape, &pv, x, BnMode::Running, &mut NoHook);
    let loss = bns_loss_var(&mut tape, &out.bn_inputs, &teacher.bn.clone())?;
    Ok(tape.value(loss).item() as f64)
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.dim(1);
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange {
            label,
            num_classes: classes,
        }),
        None => Ok(()),
    }
}

/// Mean cross-entropy of `softmax(logits)` against `labels`.
pub fn cross_entropy_var(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(tape.value(logits), labels)?;
    let logp = tape.log_softmax(logits);
    Ok(tape.nll(logp, labels))
}

pub fn generator_ce(teacher_logits: &Tensor, pseudo_labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(teacher_logits.clone());
    let ce = cross_entropy_var(&mut tape, l, pseudo_labels)?;
    Ok(tape.value(ce).item() as f64)
}

/// `T^2 KL(softmax(t/T) || softmax(s/T))`, averaged over the batch.
pub fn kd_loss_var(tape: &mut Tape, teacher_logits: Var, student_logits: Var, temperature: f32) -> Result<Var> {
    let (ts, ss) = (tape.value(teacher_logits).shape(), tape.value(student_logits).shape());
    if ts != ss || ts.len() != 2 {
        return Err(Error::ShapeMismatch(format!("teacher logits {ts:?} vs student logits {ss:?}")));
    }
    let n = ts[0].max(1) as f32;
    let t = tape.scale(teacher_logits, 1.0 / temperature);
    let s = tape.scale(student_logits, 1.0 / temperature);
    let pt = tape.softmax(t);
    let log_pt = tape.log_softmax(t);
    let log_ps = tape.log_softmax(s);
    let d = tape.sub(log_pt, log_ps);
    let terms = tape.mul(pt, d);
    let total = tape.sum(terms);
    Ok(tape.scale(total, temperature * temperature / n))
}

pub fn kd_loss(teacher_logits: &Tensor, student_logits: &Tensor, temperature: f32) -> Result<f64> {
    let mut tape = Tape::new();
    let t = tape.constant(teacher_logits.clone());
    let s = tape.constant(student_logits.clone());
    let kd = kd_loss_var(&mut tape, t, s, temperature)?;
    Ok(tape.value(kd).item() as f64)
}

/// Generator-side terms `(bns, ce_generator)` for normalized images already on the tape.
pub fn generator_terms(
    tape: &mut Tape,
    teacher: &mut Classifier,
    teacher_pv: &ParamVars,
    images: Var,
    pseudo_labels: &[usize],
) -> Result<(Var, Var, Var)> {
    let out = teacher.forward(tape, teacher_pv, images, BnMode::Running, &mut NoHook);
    let targets = teacher.bn.clone();
    let bns = bns_loss_var(tape, &out.bn_inputs, &targets)?;
    let ce = cross_entropy_var(tape, out.logits, pseudo_labels)?;
    Ok((bns, ce, out.logits))
}

/// Student-side terms for normalized images; returns `(kd, ce_student, student penultimate)`.
#[allow(clippy::too_many_arguments)]
pub fn student_terms(
    tape: &mut Tape,
    student: &mut QuantizedModel,
    student_pv: &ParamVars,
    student_bn: BnMode,
    images: Var,
    teacher_logits: Var,
    pseudo_labels: &[usize],
    temperature: f32,
) -> Result<(Var, Var, Var)> {
    let out = student.forward(tape, student_pv, images, student_bn, true);
    let kd = kd_loss_var(tape, teacher_logits, out.logits, temperature)?;
    let ce = cross_entropy_var(tape, out.logits, pseudo_labels)?;
    Ok((kd, ce, out.penultimate))
}

/// Weighted four-term vanilla loss on generator output `images` (in `[-1, 1]`, on the tape).
///
/// With [`Phase::Generator`] gradients reach the images through the teacher and the
/// student terms are evaluated on a detached copy; with [`Phase::Student`] the images
/// are detached everywhere and gradients reach only the student parameters in `student_pv`.
#[allow(clippy::too_many_arguments)]
pub fn vanilla_loss(
    tape: &mut Tape,
    teacher: &mut Classifier,
    student: &mut QuantizedModel,
    student_pv: &ParamVars,
    images: Var,
    pseudo_labels: &[usize],
    weights: &LossWeights,
    normalizer: &Normalizer,
    phase: Phase,
    student_bn: BnMode,
) -> Result<(Var, LossReport)> {
    let teacher_pv = teacher.params.attach(tape, false);
    let detached = tape.detach(images);
    let gen_input = match phase {
        Phase::Generator => images,
        Phase::Student => detached,
    };
    let x = normalizer.apply_signed(tape, gen_input);
    let (bns, ce_g, teacher_logits) = generator_terms(tape, teacher, &teacher_pv, x, pseudo_labels)?;
    let xs = normalizer.apply_signed(tape, detached);
    let t_logits = tape.detach(teacher_logits);
    let (kd, ce_s, _) = student_terms(
        tape,
        student,
        student_pv,
        student_bn,
        xs,
        t_logits,
        pseudo_labels,
        weights.kd_temperature,
    )?;
    let parts = [
        (bns, weights.w_bns),
        (ce_g, weights.w_ce),
        (kd, weights.w_kd),
        (ce_s, weights.w_ce),
    ];
    let mut total = tape.scale(parts[0].0, parts[0].1);
    for &(v, w) in &parts[1..] {
        let s = tape.scale(v, w);
        total = tape.add(total, s);
    }
    let mut report = LossReport {
        bns: tape.value(bns).item(),
        ce_generator: tape.value(ce_g).item(),
        kd: tape.value(kd).item(),
        ce_student: tape.value(ce_s).item(),
        ..LossReport::default()
    };
    report.total = report.weighted_total(weights, 0.0);
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_teacher_ce_is_log_classes() {
        let ce = generator_ce(&Tensor::zeros(&[3, 10]), &[0, 4, 9]).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn ce_rejects_out_of_range_labels() {
        assert!(matches!(
            generator_ce(&Tensor::zeros(&[1, 10]), &[10]),
            Err(Error::LabelOutOfRange { label: 10, .. })
        ));
    }

    #[test]
    fn kd_identical_logits_is_zero() {
        let a = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 3.0, -1.0]).unwrap();
        assert!(kd_loss(&a, &a, 1.0).unwrap().abs() < 1e-7);
        assert!(kd_loss(&a, &a, 4.0).unwrap().abs() < 1e-6);
    }
}

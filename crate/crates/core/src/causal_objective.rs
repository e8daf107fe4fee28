//! Style-intervened conditional distributions of teacher features given student
//! features, estimated with a contrastive critic, and the KL penalty between them.
//!
//! For an intervention pair `(l, k)` the teacher sees the batch generated with style
//! draw `l` and the student the batch generated with style draw `k`, both from one
//! content array. Row `i` of the conditional is a softmax over teacher samples `j`
//! of `<g(teacher_j), g(student_i)> / beta`.

use dfq_autograd::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Normalizer;
use crate::distillation::{student_terms, LossReport, LossWeights};
use crate::generator::{intervene_styles, sample_content, Generator};
use crate::model_zoo::{BnMode, Classifier, NoHook};
use crate::params::{linear_init, ParamId, ParamStore, ParamVars};
use crate::quantization::QuantizedModel;
use crate::{Error, Result};

pub const CRITIC_OUT: usize = 128;
/// Floor applied to the second distribution before taking its log.
pub const KL_FLOOR: f32 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CausalObjectiveConfig {
    /// Penalty weight of the causal term; 0 disables it.
    pub lambda: f32,
    /// Critic temperature.
    pub beta: f32,
    /// Style interventions per content draw.
    pub interventions_m: usize,
    /// Ordered couples of intervention pairs compared per step.
    pub pairs_per_step: usize,
    /// Constraint threshold of the constrained formulation; informational only.
    pub tau: f32,
    /// What the critic is trained on when `lambda > 0`.
    pub critic_objective: CriticObjective,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticObjective {
    /// Same total loss as the student.
    Joint,
    /// InfoNCE on detached features: for every compared pair, student sample `i` must
    /// pick teacher sample `i` (same content, other style) among the teacher batch.
    #[default]
    Nce,
}

impl Default for CausalObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            beta: 0.1,
            interventions_m: 2,
            pairs_per_step: 1,
            tau: 0.0,
            critic_objective: CriticObjective::default(),
        }
    }
}

impl CausalObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::validation("causal.lambda", "must be >= 0"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::validation("causal.beta", "must be > 0"));
        }
        if self.interventions_m < 2 {
            return Err(Error::validation("causal.interventions_m", "must be >= 2"));
        }
        if self.pairs_per_step < 1 {
            return Err(Error::validation("causal.pairs_per_step", "must be >= 1"));
        }
        Ok(())
    }
}

/// `(teacher intervention, student intervention)`.
pub type InterventionPair = (usize, usize);

/// Shared projection head `g` with temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub params: ParamStore,
    pub beta: f32,
    width: usize,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    adapter: Option<(ParamId, ParamId)>,
}

impl Critic {
    /// `g = normalize(W2 relu(W1 u + b1) + b2)`; a student-side linear adapter is added
    /// when the feature widths differ.
    pub fn new(teacher_width: usize, student_width: usize, beta: f32, rng: &mut impl Rng) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::validation("causal.beta", "must be > 0"));
        }
        let d = teacher_width;
        let mut params = ParamStore::new();
        let (w1, b1) = linear_init(d, d, rng);
        let fc1 = (params.insert("g.fc1.weight", w1), params.insert("g.fc1.bias", b1));
        let (w2, b2) = linear_init(CRITIC_OUT, d, rng);
        let fc2 = (params.insert("g.fc2.weight", w2), params.insert("g.fc2.bias", b2));
        let adapter = (student_width != teacher_width).then(|| {
            let (w, b) = linear_init(d, student_width, rng);
            (params.insert("adapter.weight", w), params.insert("adapter.bias", b))
        });
        Ok(Self {
            params,
            beta,
            width: d,
            fc1,
            fc2,
            adapter,
        })
    }

    pub fn input_width(&self) -> usize {
        self.width
    }

    /// Unit-norm embeddings `[N, 128]` of features `[N, d]`.
    pub fn embed(&self, tape: &mut Tape, pv: &ParamVars, feats: Var, student_side: bool) -> Var {
        let mut x = feats;
        if student_side {
            if let Some((w, b)) = self.adapter {
                x = tape.linear(x, pv.get(w), Some(pv.get(b)));
            }
        }
        let h = tape.linear(x, pv.get(self.fc1.0), Some(pv.get(self.fc1.1)));
        let h = tape.relu(h);
        let z = tape.linear(h, pv.get(self.fc2.0), Some(pv.get(self.fc2.1)));
        tape.l2_normalize_rows(z)
    }

    fn embed_const(&self, feats: &Tensor, student_side: bool) -> Tensor {
        let mut tape = Tape::new();
        let pv = self.params.attach(&mut tape, false);
        let x = tape.constant(feats.clone());
        let z = self.embed(&mut tape, &pv, x, student_side);
        tape.value(z).clone()
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.put_params(prefix, &self.params);
    }
}

/// `h(u, v) = exp(<g(u), g(v)> / beta)`.
pub fn critic_similarity(u: &[f32], v: &[f32], critic: &Critic) -> Result<f64> {
    let d = critic.input_width();
    if u.len() != d || v.len() != d {
        return Err(Error::ShapeMismatch(format!("feature widths {} and {} for critic width {d}", u.len(), v.len())));
    }
    let mut rows = u.to_vec();
    rows.extend_from_slice(v);
    let z = critic.embed_const(&Tensor::new(&[2, d], rows)?, false);
    let dot: f64 = z.row(0).iter().zip(z.row(1)).map(|(a, b)| *a as f64 * *b as f64).sum();
    Ok((dot / critic.beta as f64).exp())
}

/// Row-stochastic `N x N` estimate for one intervention pair.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervenedConditional {
    pub matrix: Tensor,
    pub intervention_pair: InterventionPair,
}

/// Logits `<g(teacher_j), g(student_i)> / beta` with rows indexed by student samples.
pub fn conditional_logits(tape: &mut Tape, teacher_emb: Var, student_emb: Var, beta: f32) -> Var {
    let s = tape.matmul_t(student_emb, teacher_emb, false, true);
    tape.scale(s, 1.0 / beta)
}

fn check_pair(teacher: &Tensor, student: &Tensor, teacher_content: &[usize], student_content: &[usize]) -> Result<()> {
    if teacher.rank() != 2 || student.rank() != 2 || teacher.dim(0) != student.dim(0) {
        return Err(Error::ShapeMismatch(format!(
            "teacher features {:?} vs student features {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    if teacher_content != student_content {
        return Err(Error::ContentMismatch);
    }
    if teacher_content.len() != teacher.dim(0) {
        return Err(Error::ShapeMismatch(format!(
            "{} content labels for batch of {}",
            teacher_content.len(),
            teacher.dim(0)
        )));
    }
    Ok(())
}

pub fn intervened_conditional(
    teacher_feats: &Tensor,
    student_feats: &Tensor,
    teacher_content: &[usize],
    student_content: &[usize],
    critic: &Critic,
    pair: InterventionPair,
) -> Result<IntervenedConditional> {
    check_pair(teacher_feats, student_feats, teacher_content, student_content)?;
    let mut tape = Tape::new();
    let pv = critic.params.attach(&mut tape, false);
    let t = tape.constant(teacher_feats.clone());
    let s = tape.constant(student_feats.clone());
    let gt = critic.embed(&mut tape, &pv, t, false);
    let gs = critic.embed(&mut tape, &pv, s, true);
    let logits = conditional_logits(&mut tape, gt, gs, critic.beta);
    let p = tape.softmax(logits);
    Ok(IntervenedConditional {
        matrix: tape.value(p).clone(),
        intervention_pair: pair,
    })
}

/// Mean over rows of `KL(P1_row || P2_row)`, with `P2` floored at [`KL_FLOOR`].
pub fn causal_kl(p1: &IntervenedConditional, p2: &IntervenedConditional) -> Result<f64> {
    let (a, b) = (&p1.matrix, &p2.matrix);
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.dim(0);
    let mut total = 0.0f64;
    for i in 0..n {
        for (&p, &q) in a.row(i).iter().zip(b.row(i)) {
            if p > 0.0 {
                let q = q.max(KL_FLOOR) as f64;
                total += p as f64 * (p as f64 / q).ln();
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// KL between the conditionals given by two logit matrices, recorded on the tape.
pub fn causal_kl_var(tape: &mut Tape, logits1: Var, logits2: Var) -> Var {
    let p1 = tape.softmax(logits1);
    let log_p1 = tape.log_softmax(logits1);
    let p2 = tape.softmax(logits2);
    let p2 = tape.clamp_min(p2, KL_FLOOR);
    let log_p2 = tape.log(p2);
    let d = tape.sub(log_p1, log_p2);
    let terms = tape.mul(p1, d);
    let n = tape.value(logits1).dim(0).max(1);
    let total = tape.sum(terms);
    tape.scale(total, 1.0 / n as f32)
}

/// Uniformly samples ordered couples of distinct intervention pairs out of `m x m` pairs.
pub fn sample_couples(
    m: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<(InterventionPair, InterventionPair)> {
    let pairs: Vec<InterventionPair> = (0..m).flat_map(|l| (0..m).map(move |k| (l, k))).collect();
    (0..count)
        .map(|_| {
            let a = *pairs.choose(rng).expect("m >= 1");
            let b = loop {
                let b = *pairs.choose(rng).expect("m >= 1");
                if b != a {
                    break b;
                }
            };
            (a, b)
        })
        .collect()
}

/// Sum over `couples` of the KL between conditionals built from per-intervention
/// teacher features and student features (all `[N, d]` vars on the tape).
pub fn causal_term(
    tape: &mut Tape,
    critic: &Critic,
    critic_pv: &ParamVars,
    teacher_feats: &[Var],
    student_feats: &[Var],
    couples: &[(InterventionPair, InterventionPair)],
) -> Result<Var> {
    if teacher_feats.len() != student_feats.len() || teacher_feats.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} teacher vs {} student intervention batches",
            teacher_feats.len(),
            student_feats.len()
        )));
    }
    let m = teacher_feats.len();
    let gt: Vec<Var> = teacher_feats.iter().map(|&f| critic.embed(tape, critic_pv, f, false)).collect();
    let gs: Vec<Var> = student_feats.iter().map(|&f| critic.embed(tape, critic_pv, f, true)).collect();
    let mut cache: Vec<Option<Var>> = vec![None; m * m];
    let mut logits = |tape: &mut Tape, (l, k): InterventionPair| -> Var {
        *cache[l * m + k].get_or_insert_with(|| conditional_logits(tape, gt[l], gs[k], critic.beta))
    };
    let mut total: Option<Var> = None;
    for &(a, b) in couples {
        if a.0 >= m || a.1 >= m || b.0 >= m || b.1 >= m {
            return Err(Error::ShapeMismatch(format!("intervention pair out of range for M={m}")));
        }
        let la = logits(tape, a);
        let lb = logits(tape, b);
        let kl = causal_kl_var(tape, la, lb);
        total = Some(match total {
            None => kl,
            Some(t) => tape.add(t, kl),
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// Trainable student side of the causal loss.
pub struct StudentSide<'a> {
    pub model: &'a mut QuantizedModel,
    pub pv: &'a ParamVars,
    pub bn: BnMode,
}

/// Graph handles and values produced by [`causal_dfq_loss`].
/// InfoNCE loss of the critic, averaged over `pairs`; positives sit on the diagonal.
pub fn critic_nce_loss(
    tape: &mut Tape,
    critic: &Critic,
    critic_pv: &ParamVars,
    teacher_feats: &[Var],
    student_feats: &[Var],
    pairs: &[InterventionPair],
) -> Result<Var> {
    let m = teacher_feats.len();
    if m != student_feats.len() || pairs.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{m} teacher vs {} student intervention batches, {} pairs",
            student_feats.len(),
            pairs.len()
        )));
    }
    let mut total: Option<Var> = None;
    for &(l, k) in pairs {
        if l >= m || k >= m {
            return Err(Error::ShapeMismatch(format!("intervention pair out of range for M={m}")));
        }
        let gt = critic.embed(tape, critic_pv, teacher_feats[l], false);
        let gs = critic.embed(tape, critic_pv, student_feats[k], true);
        let logits = conditional_logits(tape, gt, gs, critic.beta);
        let n = tape.value(logits).dim(0);
        let labels: Vec<usize> = (0..n).collect();
        let ce = crate::distillation::cross_entropy_var(tape, logits, &labels)?;
        total = Some(total.map_or(ce, |t| tape.add(t, ce)));
    }
    Ok(tape.scale(total.expect("pairs non-empty"), 1.0 / pairs.len() as f32))
}

/// Feature values and couples of one causal step, for training the critic separately.
#[derive(Clone, Debug)]
pub struct CausalInputs {
    pub teacher_feats: Vec<Tensor>,
    pub student_feats: Vec<Tensor>,
    pub couples: Vec<(InterventionPair, InterventionPair)>,
}

impl CausalInputs {
    /// Distinct intervention pairs appearing in the couples, in first-seen order.
    pub fn pairs(&self) -> Vec<InterventionPair> {
        let mut out = Vec::new();
        for &(a, b) in &self.couples {
            for p in [a, b] {
                if !out.contains(&p) {
                    out.push(p);
                }
            }
        }
        out
    }
}

pub struct CausalLoss {
    /// Vanilla student terms averaged over interventions, plus `lambda` times the causal KL.
    pub total: Var,
    pub vanilla: Var,
    /// Absent when `lambda == 0`; the critic is then untouched.
    pub causal_kl: Option<Var>,
    pub inputs: Option<CausalInputs>,
    /// `kd`, `ce_student` and `causal_kl` filled in.
    pub report: LossReport,
    pub content: Vec<usize>,
}

/// Student-side objective on one content draw with `M` style interventions.
///
/// Content and styles come from `data_rng`, intervention couples from `pair_rng`, so
/// runs that differ only in `lambda` see the same images. Generated images enter
/// the graph as constants and the teacher is frozen: gradients reach the student
/// parameters in `student.pv` and, through the causal term, the critic.
#[allow(clippy::too_many_arguments)]
pub fn causal_dfq_loss(
    tape: &mut Tape,
    gen: &Generator,
    teacher: &mut Classifier,
    student: StudentSide<'_>,
    critic: &Critic,
    critic_pv: &ParamVars,
    cfg: &CausalObjectiveConfig,
    weights: &LossWeights,
    normalizer: &Normalizer,
    batch_size: usize,
    data_rng: &mut impl Rng,
    pair_rng: &mut impl Rng,
) -> Result<CausalLoss> {
    let spec = gen.spec();
    let content = sample_content(batch_size, spec.num_classes, data_rng)?;
    let styles = intervene_styles(&content, cfg.interventions_m, spec.latent_dim, data_rng)?;
    let teacher_pv = teacher.params.attach(tape, false);
    let m = styles.len();
    let mut teacher_feats = Vec::with_capacity(m);
    let mut student_feats = Vec::with_capacity(m);
    let mut kd_sum: Option<Var> = None;
    let mut ce_sum: Option<Var> = None;
    for style in &styles {
        let batch = gen.generate(&content, style)?;
        let images = tape.constant(batch.images);
        let x = normalizer.apply_signed(tape, images);
        let t_out = teacher.forward(tape, &teacher_pv, x, BnMode::Running, &mut NoHook);
        teacher_feats.push(t_out.penultimate);
        let (kd, ce, feats) = student_terms(
            tape,
            student.model,
            student.pv,
            student.bn,
            x,
            t_out.logits,
            &batch.pseudo_labels,
            weights.kd_temperature,
        )?;
        student_feats.push(feats);
        kd_sum = Some(kd_sum.map_or(kd, |s| tape.add(s, kd)));
        ce_sum = Some(ce_sum.map_or(ce, |s| tape.add(s, ce)));
    }
    let kd = tape.scale(kd_sum.expect("m >= 2"), 1.0 / m as f32);
    let ce = tape.scale(ce_sum.expect("m >= 2"), 1.0 / m as f32);
    let wkd = tape.scale(kd, weights.w_kd);
    let wce = tape.scale(ce, weights.w_ce);
    let vanilla = tape.add(wkd, wce);
    let mut report = LossReport {
        kd: tape.value(kd).item(),
        ce_student: tape.value(ce).item(),
        ..LossReport::default()
    };
    let (total, causal_kl, inputs) = if cfg.lambda > 0.0 {
        let couples = sample_couples(m, cfg.pairs_per_step, pair_rng);
        let kl = causal_term(tape, critic, critic_pv, &teacher_feats, &student_feats, &couples)?;
        report.causal_kl = tape.value(kl).item();
        let weighted = tape.scale(kl, cfg.lambda);
        let inputs = CausalInputs {
            teacher_feats: teacher_feats.iter().map(|&v| tape.value(v).clone()).collect(),
            student_feats: student_feats.iter().map(|&v| tape.value(v).clone()).collect(),
            couples,
        };
        (tape.add(vanilla, weighted), Some(kl), Some(inputs))
    } else {
        (vanilla, None, None)
    };
    Ok(CausalLoss {
        total,
        vanilla,
        causal_kl,
        inputs,
        report,
        content,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cond(rows: Vec<Vec<f32>>) -> IntervenedConditional {
        IntervenedConditional {
            matrix: Tensor::from_rows(&rows).unwrap(),
            intervention_pair: (0, 0),
        }
    }

    #[test]
    fn kl_examples() {
        let p = cond(vec![vec![1.0, 0.0]]);
        let q = cond(vec![vec![0.5, 0.5]]);
        assert!((causal_kl(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-7);
        assert_eq!(causal_kl(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn couples_are_distinct_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (a, b) in sample_couples(2, 500, &mut rng) {
            assert_ne!(a, b);
            assert!(a.0 < 2 && a.1 < 2 && b.0 < 2 && b.1 < 2);
        }
    }

    #[test]
    fn content_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let critic = Critic::new(4, 4, 0.1, &mut rng).unwrap();
        let f = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            intervened_conditional(&f, &f, &[0, 1], &[1, 0], &critic, (0, 1)),
            Err(Error::ContentMismatch)
        ));
    }
}

//! Reference classifiers with batch norm and the supervised pre-training step
//! that produces the frozen full-precision teacher.
//!
//! Pre-training is the only stage of the pipeline that reads labelled data.

use std::path::Path;

use dfq_autograd::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{load_dataset, Dataset, Normalizer};
use crate::optim::Sgd;
use crate::params::{kaiming_normal, linear_init, ParamId, ParamStore, ParamVars};
use crate::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    /// `tiny_cnn` or `resnet20`.
    pub name: String,
    pub num_classes: usize,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
}

impl ArchitectureSpec {
    pub fn new(name: &str, num_classes: usize, input_shape: [usize; 3]) -> Self {
        Self {
            name: name.to_string(),
            num_classes,
            input_shape,
        }
    }

    pub fn tiny_cnn(num_classes: usize) -> Self {
        Self::new("tiny_cnn", num_classes, [3, 32, 32])
    }

    pub fn resnet20(num_classes: usize) -> Self {
        Self::new("resnet20", num_classes, [3, 32, 32])
    }

    /// Width of the pooled representation fed to the classification head.
    pub fn penultimate_width(&self) -> Result<usize> {
        match self.name.as_str() {
            "tiny_cnn" | "resnet20" => Ok(64),
            other => Err(Error::UnknownArchitecture(other.to_string())),
        }
    }
}

/// Coarse layer taxonomy used when deciding what to quantize.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Linear,
    BatchNorm,
    Relu,
    Pool,
    Residual,
    Other(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with stored running statistics.
    Running,
    /// Normalize with batch statistics, optionally folding them into the running ones.
    Batch { update_running: bool },
}

/// Intercepts the inputs and weights of every quantizable layer.
pub trait LayerHook {
    fn weight(&mut self, tape: &mut Tape, layer: usize, w: Var) -> Var;
    fn activation(&mut self, tape: &mut Tape, layer: usize, x: Var) -> Var;
}

/// Full-precision pass-through.
pub struct NoHook;

impl LayerHook for NoHook {
    fn weight(&mut self, _: &mut Tape, _: usize, w: Var) -> Var {
        w
    }

    fn activation(&mut self, _: &mut Tape, _: usize, x: Var) -> Var {
        x
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Pooled representation before the classification head, `[N, D]`.
    pub penultimate: Var,
    /// Input of every batch-norm layer, in layer order.
    pub bn_inputs: Vec<Var>,
    /// Post-activation output of every probed layer, in layer order.
    pub features: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvDef {
    layer: usize,
    weight: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Stage {
    ConvBnRelu {
        conv: ConvDef,
        bn: usize,
    },
    Basic {
        conv1: ConvDef,
        bn1: usize,
        conv2: ConvDef,
        bn2: usize,
        /// `(stride, channel padding per side)` for the parameter-free shortcut.
        shortcut: Option<(usize, usize)>,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    layer: usize,
    weight: ParamId,
    bias: ParamId,
}

/// A feed-forward image classifier: conv stages, global pooling, linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    spec: ArchitectureSpec,
    pub params: ParamStore,
    pub bn: Vec<BnLayer>,
    stages: Vec<Stage>,
    stage_names: Vec<String>,
    head: Head,
    num_quant_layers: usize,
}

struct Builder<'r, R: Rng> {
    params: ParamStore,
    bn: Vec<BnLayer>,
    layers: usize,
    rng: &'r mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn conv(&mut self, name: &str, inp: usize, out: usize, stride: usize) -> ConvDef {
        let weight = self
            .params
            .insert(format!("{name}.weight"), kaiming_normal(&[out, inp, 3, 3], self.rng));
        self.layers += 1;
        ConvDef {
            layer: self.layers - 1,
            weight,
            stride,
            pad: 1,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> usize {
        let gamma = self.params.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        let beta = self.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.bn.push(BnLayer {
            gamma,
            beta,
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        });
        self.bn.len() - 1
    }

    fn head(&mut self, inp: usize, classes: usize) -> Head {
        let (w, b) = linear_init(classes, inp, self.rng);
        let weight = self.params.insert("fc.weight", w);
        let bias = self.params.insert("fc.bias", b);
        self.layers += 1;
        Head {
            layer: self.layers - 1,
            weight,
            bias,
        }
    }
}

/// Builds a freshly initialized classifier. Deterministic given the RNG state.
pub fn build(spec: &ArchitectureSpec, rng: &mut impl Rng) -> Result<Classifier> {
    if spec.num_classes < 2 {
        return Err(Error::InvalidClassCount(spec.num_classes));
    }
    let [in_c, h, w] = spec.input_shape;
    let mut b = Builder {
        params: ParamStore::new(),
        bn: Vec::new(),
        layers: 0,
        rng,
    };
    let mut stages = Vec::new();
    let mut names = Vec::new();
    match spec.name.as_str() {
        "tiny_cnn" => {
            if h % 4 != 0 || w % 4 != 0 {
                return Err(Error::ShapeMismatch(format!("tiny_cnn needs H, W divisible by 4, got {h}x{w}")));
            }
            for (i, (inp, out, stride)) in [(in_c, 16, 1), (16, 32, 2), (32, 64, 2)].into_iter().enumerate() {
                let name = format!("conv{}", i + 1);
                let conv = b.conv(&name, inp, out, stride);
                let bn = b.bn(&format!("bn{}", i + 1), out);
                stages.push(Stage::ConvBnRelu { conv, bn });
                names.push(name);
            }
        }
        "resnet20" => {
            if h % 4 != 0 || w % 4 != 0 {
                return Err(Error::ShapeMismatch(format!("resnet20 needs H, W divisible by 4, got {h}x{w}")));
            }
            let conv = b.conv("conv1", in_c, 16, 1);
            let bn = b.bn("bn1", 16);
            stages.push(Stage::ConvBnRelu { conv, bn });
            names.push("conv1".to_string());
            let mut inp = 16;
            for (stage, planes) in [16usize, 32, 64].into_iter().enumerate() {
                for block in 0..3 {
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    let name = format!("layer{}.{}", stage + 1, block);
                    let conv1 = b.conv(&format!("{name}.conv1"), inp, planes, stride);
                    let bn1 = b.bn(&format!("{name}.bn1"), planes);
                    let conv2 = b.conv(&format!("{name}.conv2"), planes, planes, 1);
                    let bn2 = b.bn(&format!("{name}.bn2"), planes);
                    let shortcut = (stride != 1 || inp != planes).then(|| (stride, (planes - inp) / 2));
                    stages.push(Stage::Basic {
                        conv1,
                        bn1,
                        conv2,
                        bn2,
                        shortcut,
                    });
                    names.push(name);
                    inp = planes;
                }
            }
        }
        other => return Err(Error::UnknownArchitecture(other.to_string())),
    }
    let head = b.head(spec.penultimate_width()?, spec.num_classes);
    Ok(Classifier {
        spec: spec.clone(),
        params: b.params,
        bn: b.bn,
        stages,
        stage_names: names,
        head,
        num_quant_layers: b.layers,
    })
}

impl Classifier {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    /// Number of conv/linear layers.
    pub fn num_quant_layers(&self) -> usize {
        self.num_quant_layers
    }

    /// Names of the layers reported in [`ForwardOutput::features`].
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = self.stage_names.clone();
        names.push("fc".to_string());
        names
    }

    /// Width of the classification head, i.e. the number of classes the model predicts.
    pub fn head_width(&self) -> usize {
        self.params.get(self.head.weight).dim(0)
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        let mut kinds = Vec::new();
        for stage in &self.stages {
            match stage {
                Stage::ConvBnRelu { .. } => kinds.extend([LayerKind::Conv, LayerKind::BatchNorm, LayerKind::Relu]),
                Stage::Basic { .. } => kinds.extend([
                    LayerKind::Conv,
                    LayerKind::BatchNorm,
                    LayerKind::Relu,
                    LayerKind::Conv,
                    LayerKind::BatchNorm,
                    LayerKind::Residual,
                    LayerKind::Relu,
                ]),
            }
        }
        kinds.extend([LayerKind::Pool, LayerKind::Linear]);
        kinds
    }

    fn conv(&self, tape: &mut Tape, pv: &ParamVars, hook: &mut dyn LayerHook, c: &ConvDef, x: Var) -> Var {
        let xq = hook.activation(tape, c.layer, x);
        let w = hook.weight(tape, c.layer, pv.get(c.weight));
        tape.conv2d(xq, w, c.stride, c.pad)
    }

    fn batch_norm(
        &mut self,
        tape: &mut Tape,
        pv: &ParamVars,
        idx: usize,
        x: Var,
        mode: BnMode,
        bn_inputs: &mut Vec<Var>,
    ) -> Var {
        bn_inputs.push(x);
        let layer = &mut self.bn[idx];
        let (gamma, beta) = (pv.get(layer.gamma), pv.get(layer.beta));
        match mode {
            BnMode::Running => {
                tape.batch_norm_frozen(x, gamma, beta, &layer.running_mean, &layer.running_var, BN_EPS)
            }
            BnMode::Batch { update_running } => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, BN_EPS);
                if update_running {
                    let unbias = stats.count as f32 / (stats.count.max(2) - 1) as f32;
                    for c in 0..stats.mean.len() {
                        layer.running_mean[c] =
                            (1.0 - BN_MOMENTUM) * layer.running_mean[c] + BN_MOMENTUM * stats.mean[c];
                        layer.running_var[c] =
                            (1.0 - BN_MOMENTUM) * layer.running_var[c] + BN_MOMENTUM * stats.var[c] * unbias;
                    }
                }
                y
            }
        }
    }

    /// Runs the network on normalized inputs `x: [N, C, H, W]`.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        pv: &ParamVars,
        x: Var,
        mode: BnMode,
        hook: &mut dyn LayerHook,
    ) -> ForwardOutput {
        let mut bn_inputs = Vec::new();
        let mut features = Vec::new();
        let mut h = x;
        let stages = self.stages.clone();
        for stage in &stages {
            h = match stage {
                Stage::ConvBnRelu { conv, bn } => {
                    let y = self.conv(tape, pv, hook, conv, h);
                    let y = self.batch_norm(tape, pv, *bn, y, mode, &mut bn_inputs);
                    tape.relu(y)
                }
                Stage::Basic {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    shortcut,
                } => {
                    let y = self.conv(tape, pv, hook, conv1, h);
                    let y = self.batch_norm(tape, pv, *bn1, y, mode, &mut bn_inputs);
                    let y = tape.relu(y);
                    let y = self.conv(tape, pv, hook, conv2, y);
                    let y = self.batch_norm(tape, pv, *bn2, y, mode, &mut bn_inputs);
                    let skip = match shortcut {
                        Some((stride, pad_c)) => tape.shortcut_pad(h, *stride, *pad_c),
                        None => h,
                    };
                    let y = tape.add(y, skip);
                    tape.relu(y)
                }
            };
            features.push(h);
        }
        let penultimate = tape.global_avg_pool(h);
        let pooled = hook.activation(tape, self.head.layer, penultimate);
        let w = hook.weight(tape, self.head.layer, pv.get(self.head.weight));
        let logits = tape.linear(pooled, w, Some(pv.get(self.head.bias)));
        features.push(logits);
        ForwardOutput {
            logits,
            penultimate,
            bn_inputs,
            features,
        }
    }

    /// Inference-mode logits (running BN statistics, no gradients).
    pub fn logits(&mut self, inputs: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let pv = self.params.attach(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let out = self.forward(&mut tape, &pv, x, BnMode::Running, &mut NoHook);
        tape.value(out.logits).clone()
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        ckpt.put_json(&format!("{prefix}arch_spec"), &self.spec)?;
        ckpt.put_params(prefix, &self.params);
        for (i, layer) in self.bn.iter().enumerate() {
            let c = layer.running_mean.len();
            ckpt.put_tensor(
                format!("{prefix}bn_stats.{i}.running_mean"),
                Tensor::new(&[c], layer.running_mean.clone())?,
            );
            ckpt.put_tensor(
                format!("{prefix}bn_stats.{i}.running_var"),
                Tensor::new(&[c], layer.running_var.clone())?,
            );
        }
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let spec: ArchitectureSpec = ckpt.get_json(&format!("{prefix}arch_spec"))?;
        let mut model = build(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        ckpt.load_params(prefix, &mut model.params)?;
        for (i, layer) in model.bn.iter_mut().enumerate() {
            layer.running_mean = ckpt.tensor(&format!("{prefix}bn_stats.{i}.running_mean"))?.data().to_vec();
            layer.running_var = ckpt.tensor(&format!("{prefix}bn_stats.{i}.running_var"))?.data().to_vec();
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub epochs: usize,
    pub final_train_loss: Option<f32>,
    pub test_accuracy: f64,
    pub per_epoch_accuracy: Vec<f64>,
}

/// Supervised training on labelled data, followed by evaluation on the test split.
///
/// BN running statistics are updated with the usual momentum while training and are
/// frozen from then on. Writes a checkpoint with the trained parameters and metrics.
pub fn pretrain(
    model: &mut Classifier,
    train_path: &Path,
    test_path: &Path,
    checkpoint_path: &Path,
    cfg: &PretrainConfig,
    normalizer: &Normalizer,
    rng: &mut impl Rng,
) -> Result<PretrainMetrics> {
    let train = load_dataset(train_path)?;
    let test = load_dataset(test_path)?;
    check_dataset(model, &train)?;
    check_dataset(model, &test)?;
    let mut opt = Sgd::new(&model.params, cfg.lr, cfg.momentum, cfg.weight_decay, true);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut per_epoch = Vec::with_capacity(cfg.epochs);
    let mut last_loss = None;
    for epoch in 0..cfg.epochs {
        // cosine annealing over the whole run
        opt.lr = 0.5 * cfg.lr * (1.0 + (std::f32::consts::PI * epoch as f32 / cfg.epochs as f32).cos());
        order.shuffle(rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            if chunk.len() < 2 {
                continue;
            }
            let images = train.images.select_batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let pv = model.params.attach(&mut tape, true);
            let x = tape.constant(images);
            let x = normalizer.apply_unit(&mut tape, x);
            let out = model.forward(&mut tape, &pv, x, BnMode::Batch { update_running: true }, &mut NoHook);
            let logp = tape.log_softmax(out.logits);
            let loss = tape.nll(logp, &labels);
            loss_sum += tape.value(loss).item() as f64;
            batches += 1;
            let mut grads = tape.backward(loss);
            let g = model.params.collect_grads(&pv, &mut grads);
            opt.step(&mut model.params, &g);
        }
        let acc = accuracy(model, &test, normalizer)?;
        last_loss = Some((loss_sum / batches.max(1) as f64) as f32);
        log::info!("pretrain epoch {epoch}: loss {:.4} test acc {acc:.4}", last_loss.unwrap_or(f32::NAN));
        per_epoch.push(acc);
    }
    let test_accuracy = accuracy(model, &test, normalizer)?;
    let metrics = PretrainMetrics {
        epochs: cfg.epochs,
        final_train_loss: last_loss,
        test_accuracy,
        per_epoch_accuracy: per_epoch,
    };
    let mut ckpt = Checkpoint::new("teacher");
    model.to_checkpoint(&mut ckpt, "")?;
    ckpt.put_json("metrics", &metrics)?;
    ckpt.put_json("normalization", normalizer)?;
    ckpt.save(checkpoint_path)?;
    Ok(metrics)
}

fn check_dataset(model: &Classifier, data: &Dataset) -> Result<()> {
    let [c, h, w] = model.spec().input_shape;
    if data.images.shape()[1..] != [c, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "dataset images {:?} do not match model input {:?}",
            &data.images.shape()[1..],
            [c, h, w]
        )));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= model.head_width()) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: model.head_width(),
        });
    }
    Ok(())
}

/// Top-1 accuracy of a float model in inference mode.
pub fn accuracy(model: &mut Classifier, data: &Dataset, normalizer: &Normalizer) -> Result<f64> {
    crate::training::evaluate(&mut crate::training::FloatPredictor { model, normalizer }, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_cnn_logit_shape() {
        let mut m = build(&ArchitectureSpec::tiny_cnn(10), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::zeros(&[8, 3, 32, 32]);
        assert_eq!(m.logits(&x).shape(), &[8, 10]);
        assert_eq!(m.num_quant_layers(), 4);
        assert_eq!(m.bn.len(), 3);
    }

    #[test]
    fn resnet20_parameter_count() {
        // Independent tally of a 3-stage, 3-block basic-block network with 16/32/64
        // planes, 3x3 convolutions, BN affine pairs and a 64 -> 10 head.
        let conv = |i: usize, o: usize| i * o * 9;
        let bn = |c: usize| 2 * c;
        let mut expected = conv(3, 16) + bn(16);
        let mut inp = 16;
        for planes in [16, 32, 64] {
            for _ in 0..3 {
                expected += conv(inp, planes) + bn(planes) + conv(planes, planes) + bn(planes);
                inp = planes;
            }
        }
        expected += 64 * 10 + 10;
        let m = build(&ArchitectureSpec::resnet20(10), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.params.num_elements(), expected);
        assert_eq!(expected, 269_722);
        assert_eq!(m.num_quant_layers(), 20);
        assert_eq!(m.bn.len(), 19);
    }

    #[test]
    fn resnet20_forward_shape() {
        let mut m = build(&ArchitectureSpec::resnet20(10), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::full(&[2, 3, 32, 32], 0.1);
        assert_eq!(m.logits(&x).shape(), &[2, 10]);
        assert_eq!(m.feature_names().len(), 11);
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ArchitectureSpec::tiny_cnn(10);
        let a = build(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = build(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = build(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn unknown_architecture_rejected() {
        let spec = ArchitectureSpec::new("vgg11", 10, [3, 32, 32]);
        assert!(matches!(
            build(&spec, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::UnknownArchitecture(_))
        ));
    }
}

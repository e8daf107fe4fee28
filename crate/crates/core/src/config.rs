//! Run configuration: TOML with strict key checking, named presets and dotted overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::causal_objective::CausalObjectiveConfig;
use crate::data::Normalizer;
use crate::distillation::LossWeights;
use crate::model_zoo::{ArchitectureSpec, PretrainConfig};
use crate::quantization::{MAX_BITS, MIN_BITS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentBn {
    /// Normalize with the (frozen) running statistics inherited from the teacher.
    Running,
    /// Normalize with batch statistics and keep updating the running ones.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub bits_weights: u32,
    pub bits_activations: u32,
    pub exempt_first_last: bool,
    pub student_bn: StudentBn,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits_weights: 4,
            bits_activations: 4,
            exempt_first_last: false,
            student_bn: StudentBn::Running,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub width: usize,
    /// Must match the teacher's input side when set.
    pub image_size: Option<usize>,
    pub generator_lr: f32,
    pub beta1: f32,
    pub beta2: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: crate::generator::DEFAULT_LATENT_DIM,
            width: 32,
            image_size: None,
            generator_lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub lr_student: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub nesterov: bool,
    /// Learning rates are multiplied by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f32,
    /// Student learning rate of the large-scale setting; not used by the desk schedule.
    pub imagenet_lr_student: f32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            iterations_per_epoch: 50,
            batch_size: 64,
            lr_student: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            nesterov: true,
            decay_every: 20,
            decay_factor: 0.1,
            imagenet_lr_student: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Labelled training split; read by `pretrain` only.
    pub train: PathBuf,
    /// Held-out split used for evaluation.
    pub test: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: "data/train".into(),
            test: "data/test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lambdas: Vec<f32>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.1, 1.0, 10.0],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_root: PathBuf,
    pub run_name: String,
    pub teacher_checkpoint: PathBuf,
    pub model: ArchitectureSpec,
    pub data: DataConfig,
    pub normalization: Normalizer,
    pub quant: QuantConfig,
    pub generator: GeneratorConfig,
    pub causal: CausalObjectiveConfig,
    pub distill: LossWeights,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_root: "runs".into(),
            run_name: "run".into(),
            teacher_checkpoint: "runs/teacher/teacher.ckpt".into(),
            model: ArchitectureSpec::tiny_cnn(10),
            data: DataConfig::default(),
            normalization: Normalizer::default(),
            quant: QuantConfig::default(),
            generator: GeneratorConfig::default(),
            causal: CausalObjectiveConfig::default(),
            distill: LossWeights::default(),
            schedule: ScheduleConfig::default(),
            pretrain: PretrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Named overlays applied under the file contents.
pub fn preset(name: &str) -> Result<toml::Table> {
    let text = match name {
        "desk" => "",
        "full" => {
            "[generator]\nwidth = 128\n\
             [schedule]\nepochs = 400\niterations_per_epoch = 200\ndecay_every = 100\n"
        }
        "imagenet" => {
            "model = { name = \"resnet20\", num_classes = 10, input_shape = [3, 32, 32] }\n\
             [generator]\nwidth = 128\n\
             [schedule]\nepochs = 400\niterations_per_epoch = 200\ndecay_every = 100\nlr_student = 1e-6\n"
        }
        other => {
            return Err(Error::validation(
                "preset",
                format!("unknown preset `{other}` (expected desk, full or imagenet)"),
            ))
        }
    };
    text.parse::<toml::Table>().map_err(|e| Error::Parse(e.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `key.path=value`; the value is read as a TOML literal, falling back to a string.
fn override_table(assignment: &str) -> Result<toml::Table> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Parse(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Parse(format!("override `{assignment}` has an empty key")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut node = value;
    for part in key.rsplit('.') {
        let mut t = toml::Table::new();
        t.insert(part.to_string(), node);
        node = toml::Value::Table(t);
    }
    match node {
        toml::Value::Table(t) => Ok(t),
        _ => unreachable!("wrapped in at least one table"),
    }
}

/// Builds a config from TOML text plus `key=value` overrides, then validates it.
///
/// A top-level `preset` key selects a named overlay that the file contents refine.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
    let mut table = match file.remove("preset") {
        Some(toml::Value::String(name)) => preset(&name)?,
        Some(_) => return Err(Error::validation("preset", "must be a string")),
        None => toml::Table::new(),
    };
    merge(&mut table, file);
    for o in overrides {
        let over = override_table(o)?;
        if let Some(toml::Value::String(name)) = over.get("preset") {
            let mut base = preset(name)?;
            merge(&mut base, table);
            table = base;
            continue;
        }
        merge(&mut table, over);
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides).map_err(|e| match (e, path) {
        (Error::Parse(msg), Some(p)) => Error::Parse(format!("{}: {msg}", p.display())),
        (e, _) => e,
    })
}

fn positive(field: &str, v: f32) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must be > 0, got {v}")))
    }
}

fn nonnegative(field: &str, v: f32) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must be >= 0, got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, bits) in [
            ("quant.bits_weights", self.quant.bits_weights),
            ("quant.bits_activations", self.quant.bits_activations),
        ] {
            if !(MIN_BITS..=MAX_BITS).contains(&bits) {
                return Err(Error::validation(field, format!("must be in {MIN_BITS}..={MAX_BITS}, got {bits}")));
            }
        }
        if !matches!(self.model.name.as_str(), "tiny_cnn" | "resnet20") {
            return Err(Error::validation(
                "model.name",
                format!("unknown architecture `{}` (expected tiny_cnn or resnet20)", self.model.name),
            ));
        }
        if self.model.num_classes < 2 {
            return Err(Error::validation("model.num_classes", "must be >= 2"));
        }
        let [c, h, w] = self.model.input_shape;
        if c == 0 || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::validation("model.input_shape", "channels >= 1, sides positive multiples of 4"));
        }
        self.normalization.validate(c)?;
        let g = &self.generator;
        if g.latent_dim == 0 {
            return Err(Error::validation("generator.latent_dim", "must be >= 1"));
        }
        if g.width < 2 || g.width % 2 != 0 {
            return Err(Error::validation("generator.width", "must be an even number >= 2"));
        }
        if let Some(side) = g.image_size {
            if side != h || side != w {
                return Err(Error::validation(
                    "generator.image_size",
                    format!("must match the model input {h}x{w}"),
                ));
            }
        }
        positive("generator.generator_lr", g.generator_lr)?;
        for (field, b) in [("generator.beta1", g.beta1), ("generator.beta2", g.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(field, "must be in [0, 1)"));
            }
        }
        self.causal.validate()?;
        let d = &self.distill;
        nonnegative("distill.w_bns", d.w_bns)?;
        nonnegative("distill.w_kd", d.w_kd)?;
        nonnegative("distill.w_ce", d.w_ce)?;
        positive("distill.kd_temperature", d.kd_temperature)?;
        let s = &self.schedule;
        if s.iterations_per_epoch == 0 {
            return Err(Error::validation("schedule.iterations_per_epoch", "must be >= 1"));
        }
        if s.batch_size < 2 {
            return Err(Error::validation("schedule.batch_size", "must be >= 2 for batch statistics"));
        }
        if s.decay_every == 0 {
            return Err(Error::validation("schedule.decay_every", "must be >= 1"));
        }
        positive("schedule.lr_student", s.lr_student)?;
        positive("schedule.imagenet_lr_student", s.imagenet_lr_student)?;
        positive("schedule.decay_factor", s.decay_factor)?;
        if !(0.0..1.0).contains(&s.momentum) {
            return Err(Error::validation("schedule.momentum", "must be in [0, 1)"));
        }
        nonnegative("schedule.weight_decay", s.weight_decay)?;
        let p = &self.pretrain;
        if p.batch_size < 2 {
            return Err(Error::validation("pretrain.batch_size", "must be >= 2"));
        }
        positive("pretrain.lr", p.lr)?;
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::validation("run_name", "must be a non-empty plain directory name"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Output directory of this run, honouring an override of the output root.
    pub fn run_dir(&self, out_root_override: Option<&Path>) -> PathBuf {
        out_root_override.unwrap_or(&self.out_root).join(&self.run_name)
    }
}

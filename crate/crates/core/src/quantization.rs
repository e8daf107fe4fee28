//! Symmetric uniform fake-quantization with clipped straight-through gradients,
//! and a wrapper that turns a float classifier into its quantized twin.

use dfq_autograd::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::model_zoo::{BnMode, Classifier, ForwardOutput, LayerHook, LayerKind};
use crate::params::ParamVars;
use crate::{Error, Result};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 32;
pub const RUNNING_MAX_DECAY: f32 = 0.9;

/// Quantization grid for one tensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    bits: u32,
    scale: f64,
    zero_point: f64,
    clamp_lo: i64,
    clamp_hi: i64,
}

fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::validation("bits", format!("must be in {MIN_BITS}..={MAX_BITS}, got {bits}")))
    }
}

/// Largest representable integer level, `2^(bits-1) - 1`.
pub fn max_level(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

impl QuantSpec {
    pub fn symmetric(bits: u32, scale: f64) -> Result<Self> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::validation("scale", format!("must be finite and positive, got {scale}")));
        }
        let hi = max_level(bits);
        Ok(Self {
            bits,
            scale,
            zero_point: 0.0,
            clamp_lo: -hi,
            clamp_hi: hi,
        })
    }

    /// Spec fitted to the range of `values`; an all-zero tensor gets scale 1 and a warning.
    pub fn fit(values: &[f32], bits: u32) -> Result<Self> {
        let scale = match compute_scale(values, bits) {
            Ok(s) => s,
            Err(Error::DegenerateRange) => {
                log::warn!("all-zero tensor, substituting quantization scale 1");
                1.0
            }
            Err(e) => return Err(e),
        };
        Self::symmetric(bits, scale)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> f64 {
        self.zero_point
    }

    pub fn clamp_lo(&self) -> i64 {
        self.clamp_lo
    }

    pub fn clamp_hi(&self) -> i64 {
        self.clamp_hi
    }

    /// Integer level of `v` on this grid.
    pub fn level(&self, v: f32) -> i64 {
        // f64::round rounds half away from zero
        let q = (self.scale * v as f64).round();
        (q.clamp(self.clamp_lo as f64, self.clamp_hi as f64)) as i64
    }

    pub fn quantize_value(&self, v: f32) -> f32 {
        (self.level(v) as f64 / self.scale) as f32
    }

    /// Whether `v` lies inside the representable range, where the STE passes gradients.
    pub fn in_range(&self, v: f32) -> bool {
        (self.scale * v as f64).abs() <= self.clamp_hi as f64
    }
}

/// `(2^(bits-1) - 1) / max|x|`.
pub fn compute_scale(values: &[f32], bits: u32) -> Result<f64> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(Error::ShapeMismatch("cannot compute a scale for an empty tensor".into()));
    }
    let max = values.iter().fold(0.0f64, |m, v| m.max((*v as f64).abs()));
    if max == 0.0 {
        return Err(Error::DegenerateRange);
    }
    Ok(max_level(bits) as f64 / max)
}

pub fn fake_quantize(values: &Tensor, spec: &QuantSpec) -> Tensor {
    values.map(|v| spec.quantize_value(v))
}

/// Clipped straight-through estimator: identity inside the grid range, zero outside.
pub fn ste_gradient(upstream: &Tensor, values: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    if upstream.shape() != values.shape() {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?} vs values {:?}",
            upstream.shape(),
            values.shape()
        )));
    }
    let data = upstream
        .data()
        .iter()
        .zip(values.data())
        .map(|(&g, &v)| if spec.in_range(v) { g } else { 0.0 })
        .collect();
    Ok(Tensor::new(upstream.shape(), data)?)
}

/// Records fake-quantization of `x` on the tape with the clipped STE as its gradient.
pub fn fake_quantize_var(tape: &mut Tape, x: Var, spec: &QuantSpec) -> Var {
    let input = tape.value(x);
    let value = fake_quantize(input, spec);
    let pass = input.data().iter().map(|&v| spec.in_range(v)).collect();
    tape.straight_through(x, value, pass)
}

/// Activation range tracker: `r <- decay * r + (1 - decay) * max|x|`, seeded by the first batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationQuantizer {
    pub bits: u32,
    pub decay: f32,
    pub running_max: Option<f32>,
}

impl ActivationQuantizer {
    pub fn new(bits: u32) -> Self {
        Self {
            bits,
            decay: RUNNING_MAX_DECAY,
            running_max: None,
        }
    }

    pub fn observe(&mut self, batch_max: f32) {
        self.running_max = Some(match self.running_max {
            None => batch_max,
            Some(r) => self.decay * r + (1.0 - self.decay) * batch_max,
        });
    }

    /// Spec from the tracked range, or from `fallback_max` when nothing was observed yet.
    pub fn spec(&self, fallback_max: f32) -> Result<QuantSpec> {
        let r = self.running_max.unwrap_or(fallback_max);
        QuantSpec::fit(&[r], self.bits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrapOptions {
    /// Keep the first conv and the classification head in full precision.
    pub exempt_first_last: bool,
}

impl Default for WrapOptions {
    fn default() -> Self {
        Self {
            exempt_first_last: false,
        }
    }
}

/// A float classifier with fake-quantized conv/linear weights and inputs.
///
/// Weight scales are refitted from the current weights on every forward pass.
/// Activation scales come from the running max, which only moves when the
/// forward pass is asked to observe.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub model: Classifier,
    pub bits_weights: u32,
    pub bits_activations: u32,
    pub quantized: Vec<bool>,
    pub weight_specs: Vec<Option<QuantSpec>>,
    pub activations: Vec<ActivationQuantizer>,
}

pub fn wrap_model(float_model: &Classifier, bits_w: u32, bits_a: u32, opts: WrapOptions) -> Result<QuantizedModel> {
    check_bits(bits_w)?;
    check_bits(bits_a)?;
    for kind in float_model.layer_kinds() {
        if let LayerKind::Other(name) = kind {
            return Err(Error::UnsupportedLayer(name));
        }
    }
    let n = float_model.num_quant_layers();
    let quantized = (0..n)
        .map(|i| !(opts.exempt_first_last && (i == 0 || i + 1 == n)))
        .collect();
    Ok(QuantizedModel {
        model: float_model.clone(),
        bits_weights: bits_w,
        bits_activations: bits_a,
        quantized,
        weight_specs: vec![None; n],
        activations: (0..n).map(|_| ActivationQuantizer::new(bits_a)).collect(),
    })
}

struct QuantHook<'a> {
    bits_w: u32,
    quantized: &'a [bool],
    weight_specs: &'a mut [Option<QuantSpec>],
    activations: &'a mut [ActivationQuantizer],
    observe: bool,
}

impl LayerHook for QuantHook<'_> {
    fn weight(&mut self, tape: &mut Tape, layer: usize, w: Var) -> Var {
        if !self.quantized[layer] {
            return w;
        }
        let spec = QuantSpec::fit(tape.value(w).data(), self.bits_w).expect("bit-width validated at wrap time");
        self.weight_specs[layer] = Some(spec);
        fake_quantize_var(tape, w, &spec)
    }

    fn activation(&mut self, tape: &mut Tape, layer: usize, x: Var) -> Var {
        if !self.quantized[layer] {
            return x;
        }
        let batch_max = tape.value(x).max_abs();
        let q = &mut self.activations[layer];
        if self.observe {
            q.observe(batch_max);
        }
        let spec = q.spec(batch_max).expect("bit-width validated at wrap time");
        fake_quantize_var(tape, x, &spec)
    }
}

impl QuantizedModel {
    /// Quantized forward pass. With `observe`, activation ranges are updated from this batch.
    pub fn forward(&mut self, tape: &mut Tape, pv: &ParamVars, x: Var, bn: BnMode, observe: bool) -> ForwardOutput {
        let mut hook = QuantHook {
            bits_w: self.bits_weights,
            quantized: &self.quantized,
            weight_specs: &mut self.weight_specs,
            activations: &mut self.activations,
            observe,
        };
        self.model.forward(tape, pv, x, bn, &mut hook)
    }

    /// Inference-mode logits with frozen activation ranges and running BN statistics.
    pub fn logits(&mut self, inputs: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let pv = self.model.params.attach(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let out = self.forward(&mut tape, &pv, x, BnMode::Running, false);
        tape.value(out.logits).clone()
    }

    pub fn num_weight_specs(&self) -> usize {
        self.weight_specs.len()
    }

    pub fn num_activation_specs(&self) -> usize {
        self.activations.len()
    }
}

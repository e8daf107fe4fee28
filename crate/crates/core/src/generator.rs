//! Content/style-decoupled conditional image generator.
//!
//! Content is an explicit class index and style an explicit Gaussian noise vector,
//! so interventions on style are executed by redrawing the style array while the
//! content array stays fixed.

use dfq_autograd::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::model_zoo::BN_EPS;
use crate::params::{kaiming_normal, linear_init, normal, ParamId, ParamStore, ParamVars};
use crate::{Error, Result};

pub const DEFAULT_LATENT_DIM: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub latent_dim: usize,
    /// Channel width of the first feature map; the second block halves it.
    pub width: usize,
    /// `[channels, height, width]` of generated images.
    pub image_shape: [usize; 3],
}

/// Paired content/style draws and the images generated from them.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleContentBatch {
    pub content: Vec<usize>,
    pub style: Tensor,
    /// Generator output in `[-1, 1]`.
    pub images: Tensor,
    pub pseudo_labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    spec: GeneratorSpec,
    pub params: ParamStore,
    embedding: ParamId,
    fc: (ParamId, ParamId),
    bn: [(ParamId, ParamId); 3],
    conv1: ParamId,
    conv2: ParamId,
    conv_out: (ParamId, ParamId),
}

pub fn sample_content(batch_size: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(Error::InvalidClassCount(num_classes));
    }
    Ok((0..batch_size).map(|_| rng.gen_range(0..num_classes)).collect())
}

/// I.i.d. standard normal `[batch_size, latent_dim]`.
pub fn sample_style(batch_size: usize, latent_dim: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..batch_size * latent_dim)
        .map(|_| StandardNormal.sample(&mut *rng))
        .collect();
    Tensor::new(&[batch_size, latent_dim], data).expect("sized by shape")
}

/// `m` independent style arrays for one fixed content array.
pub fn intervene_styles(content: &[usize], m: usize, latent_dim: usize, rng: &mut impl Rng) -> Result<Vec<Tensor>> {
    if m < 2 {
        return Err(Error::validation("interventions_m", format!("must be at least 2, got {m}")));
    }
    Ok((0..m).map(|_| sample_style(content.len(), latent_dim, rng)).collect())
}

impl Generator {
    pub fn new(spec: GeneratorSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(Error::InvalidClassCount(spec.num_classes));
        }
        let [c, h, w] = spec.image_shape;
        if spec.latent_dim == 0 || spec.width < 2 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::validation(
                "generator",
                "latent_dim >= 1, width >= 2 and image sides divisible by 4 required",
            ));
        }
        let width = spec.width;
        let mut params = ParamStore::new();
        let embedding = params.insert("embedding", normal(&[spec.num_classes, spec.latent_dim], 1.0, rng));
        let (fw, fb) = linear_init(width * (h / 4) * (w / 4), spec.latent_dim, rng);
        let fc = (params.insert("fc.weight", fw), params.insert("fc.bias", fb));
        let bn_pair = |params: &mut ParamStore, name: &str, ch: usize| {
            (
                params.insert(format!("{name}.gamma"), Tensor::full(&[ch], 1.0)),
                params.insert(format!("{name}.beta"), Tensor::zeros(&[ch])),
            )
        };
        let bn0 = bn_pair(&mut params, "bn0", width);
        let conv1 = params.insert("conv1.weight", kaiming_normal(&[width, width, 3, 3], rng));
        let bn1 = bn_pair(&mut params, "bn1", width);
        let conv2 = params.insert("conv2.weight", kaiming_normal(&[width / 2, width, 3, 3], rng));
        let bn2 = bn_pair(&mut params, "bn2", width / 2);
        let conv_out = (
            params.insert("conv_out.weight", kaiming_normal(&[c, width / 2, 3, 3], rng)),
            params.insert("conv_out.bias", Tensor::zeros(&[c])),
        );
        Ok(Self {
            spec,
            params,
            embedding,
            fc,
            bn: [bn0, bn1, bn2],
            conv1,
            conv2,
            conv_out,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// Records `tanh(net(embedding(content) * style))` on the tape. Batch norm always uses batch statistics.
    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, content: &[usize], style: Var) -> Result<Var> {
        let s = tape.value(style).shape().to_vec();
        if s.len() != 2 || s[0] != content.len() || s[1] != self.spec.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "style {s:?} for {} content labels and latent_dim {}",
                content.len(),
                self.spec.latent_dim
            )));
        }
        if let Some(&bad) = content.iter().find(|&&c| c >= self.spec.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: self.spec.num_classes,
            });
        }
        let n = content.len();
        let [_, h, w] = self.spec.image_shape;
        let emb = tape.embedding(pv.get(self.embedding), content);
        let fused = tape.mul(emb, style);
        let x = tape.linear(fused, pv.get(self.fc.0), Some(pv.get(self.fc.1)));
        let x = tape.reshape(x, &[n, self.spec.width, h / 4, w / 4]);
        let bn = |tape: &mut Tape, x: Var, i: usize| {
            let (g, b) = self.bn[i];
            tape.batch_norm_train(x, pv.get(g), pv.get(b), BN_EPS).0
        };
        let x = bn(tape, x, 0);
        let x = tape.upsample2x(x);
        let x = tape.conv2d(x, pv.get(self.conv1), 1, 1);
        let x = bn(tape, x, 1);
        let x = tape.relu(x);
        let x = tape.upsample2x(x);
        let x = tape.conv2d(x, pv.get(self.conv2), 1, 1);
        let x = bn(tape, x, 2);
        let x = tape.relu(x);
        let x = tape.conv2d(x, pv.get(self.conv_out.0), 1, 1);
        let x = tape.bias_add(x, pv.get(self.conv_out.1));
        Ok(tape.tanh(x))
    }

    /// Generates images without recording gradients.
    pub fn generate(&self, content: &[usize], style: &Tensor) -> Result<StyleContentBatch> {
        let mut tape = Tape::new();
        let pv = self.params.attach(&mut tape, false);
        let s = tape.constant(style.clone());
        let images = self.forward(&mut tape, &pv, content, s)?;
        Ok(StyleContentBatch {
            content: content.to_vec(),
            style: style.clone(),
            images: tape.value(images).clone(),
            pseudo_labels: content.to_vec(),
        })
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        ckpt.put_json(&format!("{prefix}spec"), &self.spec)?;
        ckpt.put_params(prefix, &self.params);
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        use rand::SeedableRng;
        let spec: GeneratorSpec = ckpt.get_json(&format!("{prefix}spec"))?;
        let mut gen = Self::new(spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        ckpt.load_params(prefix, &mut gen.params)?;
        Ok(gen)
    }
}

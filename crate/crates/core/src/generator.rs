//! Feed-forward perturbation generator.
//!
//! A small U-Net maps an image to a same-shape field, which is squashed by
//! `ε·tanh(·)` so that every output satisfies `‖f(x)‖∞ < ε` regardless of
//! the weights.

use std::path::Path;

use rand::distributions::Uniform;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::conv::Padding;
use crate::data::rng_for;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::MetricId;
use crate::tensor::Tensor;
use crate::tensor_file;

/// Default L∞ budget, 10/255.
pub const DEFAULT_EPSILON: f32 = 10.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Upsample {
    /// Nearest-neighbour 2× followed by a 3×3 convolution.
    #[default]
    #[serde(rename = "nearest")]
    NearestConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Number of 2× downsamplings.
    pub depth: usize,
    /// Channels at full resolution; doubles per level.
    pub base_channels: usize,
    pub epsilon: f32,
    pub upsample: Upsample,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            epsilon: DEFAULT_EPSILON,
            upsample: Upsample::NearestConv,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Invalid("U-Net depth must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Invalid("base_channels must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Invalid(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Spatial dimensions must be multiples of this.
    pub fn multiple(&self) -> usize {
        1 << self.depth
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Largest `f32` strictly below `epsilon`; outputs are clamped to it so
    /// that rounding of `ε·tanh` can never reach `ε` itself.
    pub fn output_bound(&self) -> f32 {
        f32::from_bits(self.epsilon.to_bits() - 1)
    }

    /// Ordered `(name, shape)` list of every parameter tensor.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, c_out: usize, c_in: usize| {
            out.push((format!("{name}.weight"), vec![c_out, c_in, 3, 3]));
            out.push((format!("{name}.bias"), vec![c_out]));
        };
        let mut c_in = 3;
        for l in 0..self.depth {
            let c = self.channels(l);
            conv(format!("enc{l}.conv1"), c, c_in);
            conv(format!("enc{l}.conv2"), c, c);
            c_in = c;
        }
        let c_mid = self.channels(self.depth);
        conv("mid.conv1".into(), c_mid, c_in);
        conv("mid.conv2".into(), c_mid, c_mid);
        for l in (0..self.depth).rev() {
            let c = self.channels(l);
            conv(format!("dec{l}.up"), c, self.channels(l + 1));
            conv(format!("dec{l}.conv1"), c, 2 * c);
            conv(format!("dec{l}.conv2"), c, c);
        }
        conv("out".into(), 3, self.channels(0));
        out
    }
}

/// Generator weights plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub config: UNetConfig,
    pub tensors: Vec<(String, Tensor)>,
    /// Metric the weights were trained against, if any.
    pub metric: Option<MetricId>,
    /// Digest of the run configuration that produced the weights.
    pub config_digest: Option<String>,
}

impl GeneratorParams {
    pub fn tensor_list(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn set_tensors(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for ((name, slot), v) in self.tensors.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "`{name}` has shape {:?}, got {:?}",
                    slot.shape(),
                    v.shape()
                )));
            }
            *slot = v;
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// Digest over configuration, metric and every tensor.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.config).unwrap_or_default());
        h.update(self.metric.as_ref().map(ToString::to_string).unwrap_or_default());
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            t.feed(&mut h);
        }
        hex::encode(h.finalize())
    }
}

/// Kaiming-uniform interior convolutions with zero biases; the output
/// convolution is all zeros so a fresh generator is the identity attack.
pub fn init_params(config: &UNetConfig, seed: u64) -> Result<GeneratorParams> {
    config.validate()?;
    let mut rng = rng_for(seed, 0x756e_6574);
    let tensors = config
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.starts_with("out.") || name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                let bound = (6.0 / fan_in).sqrt();
                let n = shape.iter().product();
                let dist = Uniform::new(-bound, bound);
                Tensor::from_parts(shape, (&mut rng).sample_iter(dist).take(n).collect())
            };
            (name, t)
        })
        .collect();
    Ok(GeneratorParams {
        config: *config,
        tensors,
        metric: None,
        config_digest: None,
    })
}

/// Additive field produced by the generator or a universal perturbation.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationField(Tensor);

impl PerturbationField {
    /// Wraps `t`, checking `‖t‖∞ ≤ epsilon`.
    pub fn new(t: Tensor, epsilon: f32) -> Result<Self> {
        t.dims3()?;
        let m = t.max_abs();
        if m > epsilon {
            return Err(Error::Invalid(format!("perturbation magnitude {m} exceeds epsilon {epsilon}")));
        }
        Ok(Self(t))
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[channels, height, width]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn max_abs(&self) -> f32 {
        self.0.max_abs()
    }
}

fn check_divisible(config: &UNetConfig, h: usize, w: usize) -> Result<()> {
    let m = config.multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::Indivisible {
            height: h,
            width: w,
            multiple: m,
        });
    }
    Ok(())
}

/// Records the generator on `tape`. `params` must follow
/// [`UNetConfig::layout`] order. Returns the `ε·tanh` field node.
pub fn record_unet(tape: &mut Tape, config: &UNetConfig, params: &[Var], image: Var) -> Result<Var> {
    let (_, h, w) = tape.value(image).dims3()?;
    check_divisible(config, h, w)?;
    let expected = config.layout().len();
    if params.len() != expected {
        return Err(Error::ConfigMismatch(format!(
            "expected {expected} parameter tensors, got {}",
            params.len()
        )));
    }
    let mut next = params.iter().copied();
    let mut conv = |tape: &mut Tape, x: Var, relu: bool| -> Result<Var> {
        let (k, b) = (next.next().unwrap(), next.next().unwrap());
        let y = tape.conv2d(x, k, 1, Padding::Zero(1))?;
        let y = tape.channel_bias(y, b)?;
        Ok(if relu { tape.relu(y) } else { y })
    };

    let mut h = image;
    let mut skips = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        h = conv(tape, h, true)?;
        h = conv(tape, h, true)?;
        skips.push(h);
        h = tape.avg_pool2(h)?;
    }
    h = conv(tape, h, true)?;
    h = conv(tape, h, true)?;
    for skip in skips.into_iter().rev() {
        let u = tape.upsample2(h)?;
        let u = conv(tape, u, true)?;
        let cat = tape.concat(u, skip)?;
        h = conv(tape, cat, true)?;
        h = conv(tape, h, true)?;
    }
    let out = conv(tape, h, false)?;
    let t = tape.tanh(out);
    let f = tape.scale(t, config.epsilon);
    let bound = config.output_bound();
    Ok(tape.clamp(f, -bound, bound))
}

/// Registers `params` on `tape` (as differentiable leaves when `trainable`).
pub fn register_params(tape: &mut Tape, params: &GeneratorParams, trainable: bool) -> Vec<Var> {
    params
        .tensors
        .iter()
        .map(|(_, t)| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect()
}

/// Single forward pass of the generator.
pub fn unet_forward(params: &GeneratorParams, image: &ImageTensor) -> Result<PerturbationField> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params, false);
    let x = tape.constant(image.tensor().clone());
    let f = record_unet(&mut tape, &params.config, &vars, x)?;
    Ok(PerturbationField(tape.value(f).clone()))
}

/// Records `clamp(image + field, 0, 1)`.
pub fn record_perturb(tape: &mut Tape, image: Var, field: Var) -> Result<Var> {
    let s = tape.add(image, field)?;
    Ok(tape.clamp(s, 0.0, 1.0))
}

/// `clamp(image + field, 0, 1)`.
pub fn perturb(image: &ImageTensor, field: &PerturbationField) -> Result<ImageTensor> {
    let sum = image
        .tensor()
        .zip_map(field.tensor(), |x, f| (x + f).clamp(0.0, 1.0))
        .map_err(|_| {
            Error::shape(
                "perturb",
                format!("image {:?} vs field {:?}", image.tensor().shape(), field.tensor().shape()),
            )
        })?;
    ImageTensor::new(sum)
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    #[serde(flatten)]
    config: UNetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metric: Option<MetricId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

pub fn save_params(params: &GeneratorParams, path: &Path) -> Result<()> {
    let header = serde_json::to_string(&WeightsHeader {
        config: params.config,
        metric: params.metric.clone(),
        config_digest: params.config_digest.clone(),
    })?;
    tensor_file::write(path, &header, &params.tensors)
}

pub fn load_params(path: &Path) -> Result<GeneratorParams> {
    let file = tensor_file::read(path)?;
    let header: WeightsHeader = serde_json::from_str(&file.header).map_err(|e| Error::Header {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    header.config.validate()?;
    let layout = header.config.layout();
    if layout.len() != file.tensors.len() {
        return Err(Error::ConfigMismatch(format!(
            "{}: config implies {} tensors, file holds {}",
            path.display(),
            layout.len(),
            file.tensors.len()
        )));
    }
    for ((want_name, want_shape), (name, t)) in layout.iter().zip(&file.tensors) {
        if want_name != name || want_shape.as_slice() != t.shape() {
            return Err(Error::ConfigMismatch(format!(
                "{}: expected `{want_name}` {want_shape:?}, found `{name}` {:?}",
                path.display(),
                t.shape()
            )));
        }
    }
    Ok(GeneratorParams {
        config: header.config,
        tensors: file.tensors,
        metric: header.metric,
        config_digest: header.config_digest,
    })
}

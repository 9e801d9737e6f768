//! Differentiable no-reference quality metrics.
//!
//! Every metric follows the "higher is better" convention and is recorded
//! on a [`Tape`] so attacks can differentiate through it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conv::Padding;
use crate::data::rng_for;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::Tensor;

/// Smoothing constant inside the Sobel magnitude square root.
pub const SOBEL_KAPPA: f32 = 1e-6;

/// Rec. 601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

const SOBEL_X: [f32; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f32; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Identifies one of the built-in metrics. Serialized as a string token:
/// `sobel_sharpness`, `luminance_contrast`, or `frozen_cnn:<seed>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MetricId {
    SobelSharpness,
    LuminanceContrast,
    FrozenCnn(u64),
}

impl MetricId {
    /// The three stand-ins benchmarked by default.
    pub fn defaults() -> Vec<MetricId> {
        vec![MetricId::SobelSharpness, MetricId::LuminanceContrast, MetricId::FrozenCnn(7)]
    }

    pub fn build(&self) -> Box<dyn Metric> {
        match self {
            MetricId::SobelSharpness => Box::new(SobelSharpness),
            MetricId::LuminanceContrast => Box::new(LuminanceContrast),
            MetricId::FrozenCnn(seed) => Box::new(FrozenCnn::new(*seed)),
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricId::SobelSharpness => f.write_str("sobel_sharpness"),
            MetricId::LuminanceContrast => f.write_str("luminance_contrast"),
            MetricId::FrozenCnn(seed) => write!(f, "frozen_cnn:{seed}"),
        }
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sobel_sharpness" => Ok(MetricId::SobelSharpness),
            "luminance_contrast" => Ok(MetricId::LuminanceContrast),
            _ => s
                .strip_prefix("frozen_cnn:")
                .and_then(|seed| seed.parse().ok())
                .map(MetricId::FrozenCnn)
                .ok_or_else(|| Error::UnknownMetric(s.to_string())),
        }
    }
}

impl TryFrom<String> for MetricId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MetricId> for String {
    fn from(id: MetricId) -> String {
        id.to_string()
    }
}

/// Quality score, higher is better.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricScore(pub f32);

impl MetricScore {
    pub fn value(self) -> f32 {
        self.0
    }
}

/// A differentiable scalar score of a `3×H×W` image.
pub trait Metric: Send + Sync {
    /// Token used in configs, reports and weight-file headers.
    fn token(&self) -> String;

    /// Records the score of `image` on `tape` and returns the scalar node.
    fn record(&self, tape: &mut Tape, image: Var) -> Result<Var>;
}

pub fn metric_score(metric: &dyn Metric, image: &ImageTensor) -> Result<MetricScore> {
    let mut tape = Tape::new();
    let x = tape.constant(image.tensor().clone());
    let s = metric.record(&mut tape, x)?;
    finite_score(tape.value(s))
}

pub fn metric_grad(metric: &dyn Metric, image: &ImageTensor) -> Result<Tensor> {
    Ok(score_and_grad(metric, image.tensor())?.1)
}

/// Score and input-gradient in one forward/backward pass. `image` need not
/// lie in `[0, 1]`.
pub fn score_and_grad(metric: &dyn Metric, image: &Tensor) -> Result<(MetricScore, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.param(image.clone());
    let s = metric.record(&mut tape, x)?;
    let score = finite_score(tape.value(s))?;
    Ok((score, tape.backward(s)?.take(x)))
}

fn finite_score(t: &Tensor) -> Result<MetricScore> {
    if !t.is_scalar() {
        return Err(Error::NotScalar { shape: t.shape().to_vec() });
    }
    let v = t.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite { what: "metric score".into() });
    }
    Ok(MetricScore(v))
}

/// Records `Y = 0.299 R + 0.587 G + 0.114 B` as a `1×H×W` node.
pub fn record_luminance(tape: &mut Tape, image: Var) -> Result<Var> {
    let k = tape.constant(Tensor::from_parts(vec![1, 3, 1, 1], LUMA.to_vec()));
    tape.conv2d(image, k, 1, Padding::Zero(0))
}

/// Records `gx² + gy²` of a single-channel map using Sobel kernels with
/// mirror padding.
pub fn record_sobel_energy(tape: &mut Tape, luma: Var) -> Result<Var> {
    let mut kdata = SOBEL_X.to_vec();
    kdata.extend_from_slice(&SOBEL_Y);
    let k = tape.constant(Tensor::from_parts(vec![2, 1, 3, 3], kdata));
    let g = tape.conv2d(luma, k, 1, Padding::Reflect(1))?;
    let g2 = tape.square(g);
    let ones = tape.constant(Tensor::full(&[1, 2, 1, 1], 1.0));
    tape.conv2d(g2, ones, 1, Padding::Zero(0))
}

/// Mean Sobel gradient magnitude of the luminance.
#[derive(Clone, Copy, Debug, Default)]
pub struct SobelSharpness;

impl Metric for SobelSharpness {
    fn token(&self) -> String {
        MetricId::SobelSharpness.to_string()
    }

    fn record(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let y = record_luminance(tape, image)?;
        let e = record_sobel_energy(tape, y)?;
        let e = tape.offset(e, SOBEL_KAPPA);
        let m = tape.sqrt(e);
        Ok(tape.mean(m))
    }
}

/// Population standard deviation of the luminance.
#[derive(Clone, Copy, Debug, Default)]
pub struct LuminanceContrast;

impl Metric for LuminanceContrast {
    fn token(&self) -> String {
        MetricId::LuminanceContrast.to_string()
    }

    fn record(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let y = record_luminance(tape, image)?;
        let mu = tape.mean(y);
        let neg_mu = tape.scale(mu, -1.0);
        let centered = tape.broadcast_add(y, neg_mu)?;
        let sq = tape.square(centered);
        let var = tape.mean(sq);
        Ok(tape.sqrt(var))
    }
}

/// One 3×3 convolution layer of [`FrozenCnn`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Randomly initialized, never-trained CNN scorer.
///
/// Three stride-2 3×3 convolutions (8, 16, 16 channels, zero padding 1) with
/// leaky ReLU (slope 0.1), a global spatial mean and an affine head. All
/// weights are drawn from `U(-0.1, 0.1)` by a generator seeded with `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenCnn {
    pub seed: u64,
    pub layers: Vec<ConvLayer>,
    /// `1×16×1×1` head weights.
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

pub const FROZEN_CNN_CHANNELS: [usize; 3] = [8, 16, 16];
pub const FROZEN_CNN_SLOPE: f32 = 0.1;

impl FrozenCnn {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_for(seed, 0x6672_6f7a_656e);
        let mut draw = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-0.1f32..0.1)).collect())
        };
        let mut c_in = 3;
        let mut layers = Vec::new();
        for &c_out in &FROZEN_CNN_CHANNELS {
            let kernel = draw(&[c_out, c_in, 3, 3]);
            let bias = draw(&[c_out]);
            layers.push(ConvLayer { kernel, bias });
            c_in = c_out;
        }
        let head_weight = draw(&[1, c_in, 1, 1]);
        let head_bias = draw(&[1]);
        Self {
            seed,
            layers,
            head_weight,
            head_bias,
        }
    }
}

impl Metric for FrozenCnn {
    fn token(&self) -> String {
        MetricId::FrozenCnn(self.seed).to_string()
    }

    fn record(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let mut h = image;
        for layer in &self.layers {
            let k = tape.constant(layer.kernel.clone());
            let b = tape.constant(layer.bias.clone());
            h = tape.conv2d(h, k, 2, Padding::Zero(1))?;
            h = tape.channel_bias(h, b)?;
            h = tape.leaky_relu(h, FROZEN_CNN_SLOPE);
        }
        let pooled = tape.channel_mean(h)?;
        let w = tape.constant(self.head_weight.clone());
        let b = tape.constant(self.head_bias.clone());
        let out = tape.conv2d(pooled, w, 1, Padding::Zero(0))?;
        let out = tape.channel_bias(out, b)?;
        Ok(tape.sum(out))
    }
}

/// Mean pixel intensity. Linear, so sign-gradient attacks have closed forms.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanIntensity;

impl Metric for MeanIntensity {
    fn token(&self) -> String {
        "mean_intensity".into()
    }

    fn record(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        Ok(tape.mean(image))
    }
}

/// `factor · inner`.
pub struct Scaled<M> {
    pub inner: M,
    pub factor: f32,
}

impl<M: Metric> Metric for Scaled<M> {
    fn token(&self) -> String {
        format!("{}*{}", self.factor, self.inner.token())
    }

    fn record(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let s = self.inner.record(tape, image)?;
        Ok(tape.scale(s, self.factor))
    }
}

impl Metric for Box<dyn Metric> {
    fn token(&self) -> String {
        self.as_ref().token()
    }

    fn record(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        self.as_ref().record(tape, image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_round_trip() {
        for id in MetricId::defaults() {
            assert_eq!(id.to_string().parse::<MetricId>().unwrap(), id);
            assert_eq!(id.build().token(), id.to_string());
        }
        assert!(matches!("niqe".parse::<MetricId>(), Err(Error::UnknownMetric(_))));
        assert!("frozen_cnn:x".parse::<MetricId>().is_err());
        let json = serde_json::to_string(&MetricId::FrozenCnn(7)).unwrap();
        assert_eq!(json, "\"frozen_cnn:7\"");
    }

    #[test]
    fn sobel_of_constant_is_sqrt_kappa() {
        let img = ImageTensor::filled(8, 8, 0.4).unwrap();
        let s = metric_score(&SobelSharpness, &img).unwrap().value();
        assert!((s - 1e-3).abs() < 1e-9, "{s}");
    }

    #[test]
    fn contrast_closed_forms() {
        let flat = ImageTensor::filled(6, 6, 0.7).unwrap();
        assert_eq!(metric_score(&LuminanceContrast, &flat).unwrap().value(), 0.0);
        let g = metric_grad(&LuminanceContrast, &flat).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));

        // left half black, right half white
        let data = (0..3 * 4 * 4).map(|i| if i % 4 >= 2 { 1.0 } else { 0.0 }).collect();
        let img = ImageTensor::new(Tensor::new(vec![3, 4, 4], data).unwrap()).unwrap();
        let s = metric_score(&LuminanceContrast, &img).unwrap().value();
        assert!((s - 0.5).abs() < 1e-6, "{s}");
    }

    #[test]
    fn frozen_cnn_is_seed_determined() {
        assert_eq!(FrozenCnn::new(7), FrozenCnn::new(7));
        let img = crate::data::synth_image(1, 0, (16, 16)).unwrap();
        let a = metric_score(&FrozenCnn::new(7), &img).unwrap();
        let b = metric_score(&FrozenCnn::new(8), &img).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, metric_score(&FrozenCnn::new(7), &img).unwrap());
    }

    #[test]
    fn scaled_metric_scales_score() {
        let img = crate::data::synth_image(2, 0, (8, 8)).unwrap();
        let base = metric_score(&SobelSharpness, &img).unwrap().value();
        let scaled = metric_score(&Scaled { inner: SobelSharpness, factor: 4.0 }, &img)
            .unwrap()
            .value();
        assert_eq!(scaled, 4.0 * base);
    }
}

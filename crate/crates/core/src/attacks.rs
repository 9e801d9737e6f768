//! Per-image attacks.
//!
//! The iterative baselines take sign-gradient ascent steps of size `lr` and
//! project after every step onto `B∞(x, ε) ∩ [0, 1]ⁿ`. The generator and
//! universal attacks apply a precomputed or single-pass field.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{backward_passes, Tape};
use crate::error::{Error, Result};
use crate::generator::{perturb, unet_forward, GeneratorParams, PerturbationField, DEFAULT_EPSILON};
use crate::image::ImageTensor;
use crate::metrics::{metric_score, record_luminance, record_sobel_energy, Metric, MetricScore};
use crate::tensor::Tensor;

/// Gradients with an L1 norm below this are treated as zero by the momentum
/// attack.
pub const MIN_GRAD_L1: f32 = 1e-12;

/// Lower bound on the Sobel-mask normalizer.
pub const MASK_FLOOR: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Facpa,
    Ifgsm,
    Mifgsm,
    SobelMasked,
    FrPenalized,
    Uap,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::Facpa,
        AttackKind::Ifgsm,
        AttackKind::Mifgsm,
        AttackKind::SobelMasked,
        AttackKind::FrPenalized,
        AttackKind::Uap,
    ];

    pub fn is_iterative(self) -> bool {
        !matches!(self, AttackKind::Facpa | AttackKind::Uap)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Facpa => "facpa",
            AttackKind::Ifgsm => "ifgsm",
            AttackKind::Mifgsm => "mifgsm",
            AttackKind::SobelMasked => "sobel_masked",
            AttackKind::FrPenalized => "fr_penalized",
            AttackKind::Uap => "uap",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown attack kind `{s}`")))
    }
}

/// Attack family and hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Step size of the iterative attacks.
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_iters")]
    pub iters: usize,
    /// Momentum decay for `mifgsm`.
    #[serde(default = "default_mu")]
    pub mu: f32,
    /// Weight of the MSE penalty for `fr_penalized`.
    #[serde(default)]
    pub lambda_fr: f32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f32,
}

fn default_lr() -> f32 {
    1e-3
}

fn default_iters() -> usize {
    10
}

fn default_mu() -> f32 {
    1.0
}

fn default_epsilon() -> f32 {
    DEFAULT_EPSILON
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            lr: default_lr(),
            iters: default_iters(),
            mu: default_mu(),
            lambda_fr: 0.0,
            epsilon: default_epsilon(),
        }
    }

    pub fn with_iters(mut self, iters: usize) -> Self {
        self.iters = iters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.kind.is_iterative() && !(self.lr > 0.0) {
            return Err(Error::Invalid(format!("lr must be positive for {}, got {}", self.kind, self.lr)));
        }
        if !(self.lambda_fr >= 0.0) {
            return Err(Error::Invalid(format!("lambda_fr must be non-negative, got {}", self.lambda_fr)));
        }
        if !self.mu.is_finite() {
            return Err(Error::Invalid("mu must be finite".into()));
        }
        Ok(())
    }

    fn expect(&self, kind: AttackKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Invalid(format!("spec is for {}, not {kind}", self.kind)));
        }
        self.validate()
    }
}

/// Result of attacking one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub adversarial: ImageTensor,
    pub score_before: MetricScore,
    pub score_after: MetricScore,
    /// Wall-clock seconds spent producing `adversarial`; scoring excluded.
    pub elapsed: f64,
    pub iterations_run: usize,
    /// Backward passes run while producing `adversarial`.
    pub gradient_evals: u64,
    /// Digest of the additive field, for attacks that apply one.
    pub field_digest: Option<String>,
    pub warnings: Vec<String>,
}

impl AttackOutcome {
    pub fn abs_gain(&self) -> f32 {
        self.score_after.0 - self.score_before.0
    }
}

struct Produced {
    adversarial: ImageTensor,
    iterations: usize,
    field_digest: Option<String>,
    warnings: Vec<String>,
}

impl Produced {
    fn plain(adversarial: ImageTensor, iterations: usize) -> Self {
        Self {
            adversarial,
            iterations,
            field_digest: None,
            warnings: Vec::new(),
        }
    }
}

fn instrumented(x: &ImageTensor, metric: &dyn Metric, run: impl FnOnce() -> Result<Produced>) -> Result<AttackOutcome> {
    let score_before = metric_score(metric, x)?;
    let passes = backward_passes();
    let start = Instant::now();
    let produced = run()?;
    let elapsed = start.elapsed().as_secs_f64();
    let gradient_evals = backward_passes() - passes;
    let score_after = metric_score(metric, &produced.adversarial)?;
    Ok(AttackOutcome {
        adversarial: produced.adversarial,
        score_before,
        score_after,
        elapsed,
        iterations_run: produced.iterations,
        gradient_evals,
        field_digest: produced.field_digest,
        warnings: produced.warnings,
    })
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

enum Direction<'a> {
    Sign,
    Momentum(f32),
    Masked(&'a Tensor),
    Penalized(f32),
}

/// Gradient of `M(adv)` (or `M(adv) − λ·MSE(adv, x)`) with respect to `adv`.
fn objective_grad(metric: &dyn Metric, adv: &Tensor, x: &Tensor, penalty: Option<f32>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.param(adv.clone());
    let mut obj = metric.record(&mut tape, a)?;
    if let Some(lambda) = penalty {
        let reference = tape.constant(x.clone());
        let d = tape.sub(a, reference)?;
        let d2 = tape.square(d);
        let mse = tape.mean(d2);
        let pen = tape.scale(mse, lambda);
        obj = tape.sub(obj, pen)?;
    }
    Ok(tape.backward(obj)?.take(a))
}

fn ascend(x: &ImageTensor, metric: &dyn Metric, spec: &AttackSpec, direction: Direction<'_>) -> Result<ImageTensor> {
    let src = x.data();
    let n = src.len();
    let radius = |i: usize| match direction {
        Direction::Masked(m) => spec.epsilon * m.data()[i],
        _ => spec.epsilon,
    };
    let lo: Vec<f32> = (0..n).map(|i| (src[i] - radius(i)).max(0.0)).collect();
    let hi: Vec<f32> = (0..n).map(|i| (src[i] + radius(i)).min(1.0)).collect();

    let mut adv = x.tensor().clone();
    let mut momentum = vec![0.0f32; n];
    let penalty = match direction {
        Direction::Penalized(l) => Some(l),
        _ => None,
    };
    for _ in 0..spec.iters {
        let g = objective_grad(metric, &adv, x.tensor(), penalty)?;
        let g = g.data();
        let step: Vec<f32> = match direction {
            Direction::Sign | Direction::Penalized(_) => g.iter().map(|&v| spec.lr * sign(v)).collect(),
            Direction::Masked(mask) => g
                .iter()
                .zip(mask.data())
                .map(|(&v, &m)| spec.lr * sign(v) * m)
                .collect(),
            Direction::Momentum(mu) => {
                let l1: f32 = g.iter().map(|v| v.abs()).sum();
                for (acc, &v) in momentum.iter_mut().zip(g) {
                    let normalized = if l1 < MIN_GRAD_L1 { 0.0 } else { v / l1 };
                    *acc = mu * *acc + normalized;
                }
                momentum.iter().map(|&v| spec.lr * sign(v)).collect()
            }
        };
        for (i, (a, s)) in adv.data_mut().iter_mut().zip(step).enumerate() {
            *a = (*a + s).clamp(lo[i], hi[i]);
        }
    }
    ImageTensor::new(adv)
}

/// Iterative sign-gradient ascent.
pub fn ifgsm_attack(x: &ImageTensor, metric: &dyn Metric, spec: &AttackSpec) -> Result<AttackOutcome> {
    spec.expect(AttackKind::Ifgsm)?;
    instrumented(x, metric, || Ok(Produced::plain(ascend(x, metric, spec, Direction::Sign)?, spec.iters)))
}

/// Sign ascent on an accumulated, L1-normalized gradient.
pub fn mifgsm_attack(x: &ImageTensor, metric: &dyn Metric, spec: &AttackSpec) -> Result<AttackOutcome> {
    spec.expect(AttackKind::Mifgsm)?;
    instrumented(x, metric, || {
        Ok(Produced::plain(ascend(x, metric, spec, Direction::Momentum(spec.mu))?, spec.iters))
    })
}

/// Normalized Sobel edge magnitude of the luminance, broadcast to 3
/// channels; values in `[0, 1]`.
pub fn sobel_mask(x: &ImageTensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let img = tape.constant(x.tensor().clone());
    let y = record_luminance(&mut tape, img)?;
    let e = record_sobel_energy(&mut tape, y)?;
    let mag = tape.sqrt(e);
    let mag = tape.value(mag);
    let norm = mag.max_abs().max(MASK_FLOOR);
    let plane: Vec<f32> = mag.data().iter().map(|v| (v / norm).min(1.0)).collect();
    let data = plane.iter().chain(&plane).chain(&plane).copied().collect();
    Ok(Tensor::from_parts(vec![3, x.height(), x.width()], data))
}

/// Sign ascent whose steps, and L∞ radius, are scaled per pixel by
/// [`sobel_mask`] of the original image.
pub fn sobel_masked_attack(x: &ImageTensor, metric: &dyn Metric, spec: &AttackSpec) -> Result<AttackOutcome> {
    let mask = sobel_mask(x)?;
    sobel_masked_attack_with_mask(x, metric, spec, &mask)
}

/// [`sobel_masked_attack`] with a caller-supplied mask in `[0, 1]`.
pub fn sobel_masked_attack_with_mask(
    x: &ImageTensor,
    metric: &dyn Metric,
    spec: &AttackSpec,
    mask: &Tensor,
) -> Result<AttackOutcome> {
    spec.expect(AttackKind::SobelMasked)?;
    x.tensor().expect_same_shape("sobel_masked_attack", mask)?;
    instrumented(x, metric, || Ok(Produced::plain(ascend(x, metric, spec, Direction::Masked(mask))?, spec.iters)))
}

/// Sign ascent on `M(x') − λ·MSE(x', x)`.
pub fn fr_penalized_attack(x: &ImageTensor, metric: &dyn Metric, spec: &AttackSpec) -> Result<AttackOutcome> {
    spec.expect(AttackKind::FrPenalized)?;
    instrumented(x, metric, || {
        Ok(Produced::plain(ascend(x, metric, spec, Direction::Penalized(spec.lambda_fr))?, spec.iters))
    })
}

/// Tiles (or crops) `delta` to `height × width`.
pub fn fit_universal(delta: &PerturbationField, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = delta.tensor().dims3()?;
    if c != 3 {
        return Err(Error::shape("apply_uap", format!("perturbation has {c} channels, images have 3")));
    }
    if (h, w) == (height, width) {
        return Ok(delta.tensor().clone());
    }
    let src = delta.tensor().data();
    let mut out = vec![0.0; 3 * height * width];
    for ch in 0..3 {
        for y in 0..height {
            for x in 0..width {
                out[(ch * height + y) * width + x] = src[(ch * h + y % h) * w + x % w];
            }
        }
    }
    Ok(Tensor::from_parts(vec![3, height, width], out))
}

/// Adds the same image-independent field to `x`.
pub fn apply_uap(x: &ImageTensor, metric: &dyn Metric, delta: &PerturbationField) -> Result<AttackOutcome> {
    instrumented(x, metric, || {
        let field = fit_universal(delta, x.height(), x.width())?;
        let digest = field.digest();
        let adv = perturb(x, &PerturbationField::new(field, f32::INFINITY)?)?;
        Ok(Produced {
            adversarial: adv,
            iterations: 0,
            field_digest: Some(digest),
            warnings: Vec::new(),
        })
    })
}

/// One forward pass of the trained generator; no gradients.
pub fn facpa_attack(x: &ImageTensor, metric: &dyn Metric, params: &GeneratorParams) -> Result<AttackOutcome> {
    let mut warnings = Vec::new();
    let token = metric.token();
    match &params.metric {
        Some(trained) if trained.to_string() != token => {
            warnings.push(format!("generator trained for {trained}, applied to {token}"));
        }
        None => warnings.push(format!("generator has no recorded target metric, applied to {token}")),
        _ => {}
    }
    instrumented(x, metric, || {
        let field = unet_forward(params, x)?;
        let digest = field.tensor().digest();
        Ok(Produced {
            adversarial: perturb(x, &field)?,
            iterations: 0,
            field_digest: Some(digest),
            warnings,
        })
    })
}

/// An attack spec bundled with whatever trained artifact it needs.
#[derive(Clone, Debug)]
pub struct Attack {
    pub spec: AttackSpec,
    pub generator: Option<GeneratorParams>,
    pub universal: Option<PerturbationField>,
}

impl Attack {
    pub fn iterative(spec: AttackSpec) -> Self {
        Self {
            spec,
            generator: None,
            universal: None,
        }
    }

    pub fn facpa(params: GeneratorParams) -> Self {
        let mut spec = AttackSpec::new(AttackKind::Facpa).with_iters(0);
        spec.epsilon = params.config.epsilon;
        Self {
            spec,
            generator: Some(params),
            universal: None,
        }
    }

    pub fn uap(delta: PerturbationField, epsilon: f32) -> Self {
        let mut spec = AttackSpec::new(AttackKind::Uap).with_iters(0);
        spec.epsilon = epsilon;
        Self {
            spec,
            generator: None,
            universal: Some(delta),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        match self.spec.kind {
            AttackKind::Facpa if self.generator.is_none() => {
                Err(Error::Invalid("facpa attack needs generator weights".into()))
            }
            AttackKind::Uap if self.universal.is_none() => {
                Err(Error::Invalid("uap attack needs a universal perturbation".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn run(&self, x: &ImageTensor, metric: &dyn Metric) -> Result<AttackOutcome> {
        self.validate()?;
        let spec = &self.spec;
        match spec.kind {
            AttackKind::Facpa => facpa_attack(x, metric, self.generator.as_ref().unwrap()),
            AttackKind::Uap => apply_uap(x, metric, self.universal.as_ref().unwrap()),
            AttackKind::Ifgsm => ifgsm_attack(x, metric, spec),
            AttackKind::Mifgsm => mifgsm_attack(x, metric, spec),
            AttackKind::SobelMasked => sobel_masked_attack(x, metric, spec),
            AttackKind::FrPenalized => fr_penalized_attack(x, metric, spec),
        }
    }

    /// Only the adversarial-image computation, without before/after scoring.
    /// This is what latency measurements time.
    pub fn produce(&self, x: &ImageTensor, metric: &dyn Metric) -> Result<ImageTensor> {
        self.validate()?;
        let spec = &self.spec;
        match spec.kind {
            AttackKind::Facpa => perturb(x, &unet_forward(self.generator.as_ref().unwrap(), x)?),
            AttackKind::Uap => {
                let field = fit_universal(self.universal.as_ref().unwrap(), x.height(), x.width())?;
                perturb(x, &PerturbationField::new(field, f32::INFINITY)?)
            }
            AttackKind::Ifgsm => ascend(x, metric, spec, Direction::Sign),
            AttackKind::Mifgsm => ascend(x, metric, spec, Direction::Momentum(spec.mu)),
            AttackKind::SobelMasked => ascend(x, metric, spec, Direction::Masked(&sobel_mask(x)?)),
            AttackKind::FrPenalized => ascend(x, metric, spec, Direction::Penalized(spec.lambda_fr)),
        }
    }
}

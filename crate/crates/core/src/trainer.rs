//! Training loops for the perturbation generator and the universal
//! perturbation baseline.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adam::AdamState;
use crate::autodiff::Tape;
use crate::data::{make_batches, mix_seed, Dataset};
use crate::error::{Error, Result};
use crate::generator::{
    init_params, record_perturb, record_unet, register_params, GeneratorParams, PerturbationField, UNetConfig,
    DEFAULT_EPSILON,
};
use crate::image::ImageTensor;
use crate::metrics::{metric_score, Metric, MetricId};
use crate::tensor::Tensor;
use crate::tensor_file;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub metric: MetricId,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
    pub epsilon: f32,
}

impl TrainConfig {
    /// Generator defaults: batch 8, 20 epochs, Adam lr 1e-4.
    pub fn facpa(metric: MetricId) -> Self {
        Self {
            metric,
            batch_size: 8,
            epochs: 20,
            lr: 1e-4,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// Universal-perturbation defaults: same schedule, sign step 1e-3.
    pub fn uap(metric: MetricId) -> Self {
        Self {
            lr: 1e-3,
            ..Self::facpa(metric)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Seed of the batch permutation for `epoch`.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        mix_seed(self.seed, 0x6570_6f63_6800 + epoch as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean batch loss.
    pub loss: f32,
    /// Mean batch score increase over the clean images.
    pub gain: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    /// Wall-clock seconds; excluded from the digest.
    pub wall_clock: f64,
}

impl TrainHistory {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.steps {
            h.update((s.step as u64).to_le_bytes());
            h.update(s.loss.to_le_bytes());
            h.update(s.gain.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Which objective the generator's loss is built from. Both have the same
/// parameter gradient; only the loss value differs by the clean-score term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossForm {
    /// `−mean M(x + f(x))`.
    NegatedScore,
    /// `−mean (M(x + f(x)) − M(x))`.
    NegatedGain,
}

struct ImageStep {
    loss: f32,
    gain: f32,
    grads: Vec<Tensor>,
}

fn generator_image_step(
    params: &GeneratorParams,
    image: &ImageTensor,
    metric: &dyn Metric,
    form: LossForm,
    weight: f32,
) -> Result<ImageStep> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params, true);
    let x = tape.constant(image.tensor().clone());
    let field = record_unet(&mut tape, &params.config, &vars, x)?;
    let adv = record_perturb(&mut tape, x, field)?;
    let score = metric.record(&mut tape, adv)?;
    let clean = metric.record(&mut tape, x)?;
    let gain = tape.value(score).data()[0] - tape.value(clean).data()[0];
    let objective = match form {
        LossForm::NegatedScore => score,
        LossForm::NegatedGain => tape.sub(score, clean)?,
    };
    let loss = tape.scale(objective, -weight);
    let mut grads = tape.backward(loss)?;
    Ok(ImageStep {
        loss: tape.value(loss).data()[0],
        gain,
        grads: vars.iter().map(|&v| grads.take(v)).collect(),
    })
}

/// Summed per-image contributions, in batch order.
fn reduce(steps: Vec<ImageStep>) -> (f32, f32, Vec<Tensor>) {
    let n = steps.len() as f32;
    let mut iter = steps.into_iter();
    let first = iter.next().expect("non-empty batch");
    let (mut loss, mut gain, mut grads) = (first.loss, first.gain, first.grads);
    for s in iter {
        loss += s.loss;
        gain += s.gain;
        for (acc, g) in grads.iter_mut().zip(&s.grads) {
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
    }
    (loss, gain / n, grads)
}

/// Batch loss, mean gain and parameter gradient of the generator objective.
pub fn facpa_loss_and_grad(
    params: &GeneratorParams,
    batch: &[&ImageTensor],
    metric: &dyn Metric,
    form: LossForm,
) -> Result<(f32, f32, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let weight = 1.0 / batch.len() as f32;
    let steps = batch
        .par_iter()
        .map(|img| generator_image_step(params, img, metric, form, weight))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(steps))
}

/// `−(1/|batch|) Σ M(perturb(x, f(x)))`.
pub fn facpa_loss(params: &GeneratorParams, batch: &[&ImageTensor], metric: &dyn Metric) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0f64;
    for img in batch {
        let adv = crate::generator::perturb(img, &crate::generator::unet_forward(params, img)?)?;
        total += metric_score(metric, &adv)?.value() as f64;
    }
    Ok((-total / batch.len() as f64) as f32)
}

/// Step-by-step Adam optimizer for the generator.
pub struct FacpaTrainer<'a> {
    dataset: &'a Dataset,
    metric: &'a dyn Metric,
    config: TrainConfig,
    form: LossForm,
    params: GeneratorParams,
    state: AdamState,
    history: TrainHistory,
}

impl<'a> FacpaTrainer<'a> {
    pub fn new(dataset: &'a Dataset, metric: &'a dyn Metric, config: &TrainConfig, unet: &UNetConfig) -> Result<Self> {
        config.validate()?;
        unet.validate()?;
        if config.epsilon != unet.epsilon {
            return Err(Error::ConfigMismatch(format!(
                "train epsilon {} differs from generator epsilon {}",
                config.epsilon, unet.epsilon
            )));
        }
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut params = init_params(unet, config.seed)?;
        params.metric = Some(config.metric.clone());
        let state = AdamState::new(&params.tensor_list());
        Ok(Self {
            dataset,
            metric,
            config: config.clone(),
            form: LossForm::NegatedScore,
            params,
            state,
            history: TrainHistory::default(),
        })
    }

    pub fn with_form(mut self, form: LossForm) -> Self {
        self.form = form;
        self
    }

    pub fn params(&self) -> &GeneratorParams {
        &self.params
    }

    /// Batches of one epoch, as dataset indices.
    pub fn schedule(&self, epoch: usize) -> Result<Vec<Vec<usize>>> {
        make_batches(&self.dataset.manifest, self.config.batch_size, self.config.epoch_seed(epoch))
    }

    /// One Adam step on the given batch.
    pub fn step(&mut self, batch: &[usize]) -> Result<StepRecord> {
        let step = self.history.steps.len();
        let images: Vec<&ImageTensor> = batch.iter().map(|&i| &self.dataset.images[i]).collect();
        let (loss, gain, grads) = facpa_loss_and_grad(&self.params, &images, self.metric, self.form)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, what: "loss" });
        }
        let mut tensors = self.params.tensor_list();
        self.state
            .apply(&mut tensors, &grads, self.config.lr)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::TrainingDiverged { step, what: "gradient" },
                other => other,
            })?;
        self.params.set_tensors(tensors)?;
        let rec = StepRecord { step, loss, gain };
        self.history.steps.push(rec);
        Ok(rec)
    }

    pub fn run(mut self) -> Result<(GeneratorParams, TrainHistory)> {
        let start = Instant::now();
        for epoch in 0..self.config.epochs {
            for batch in self.schedule(epoch)? {
                self.step(&batch)?;
            }
            if let Some(last) = self.history.steps.last() {
                log::info!(
                    "facpa {} epoch {}/{}: loss {:.6} gain {:.6}",
                    self.config.metric,
                    epoch + 1,
                    self.config.epochs,
                    last.loss,
                    last.gain
                );
            }
        }
        self.history.wall_clock = start.elapsed().as_secs_f64();
        Ok((self.params, self.history))
    }
}

/// Trains a generator against `config.metric`.
pub fn train_facpa(dataset: &Dataset, config: &TrainConfig, unet: &UNetConfig) -> Result<(GeneratorParams, TrainHistory)> {
    let metric = config.metric.build();
    FacpaTrainer::new(dataset, metric.as_ref(), config, unet)?.run()
}

/// As [`train_facpa`] with an explicit metric object.
pub fn train_facpa_with_metric(
    dataset: &Dataset,
    metric: &dyn Metric,
    config: &TrainConfig,
    unet: &UNetConfig,
) -> Result<(GeneratorParams, TrainHistory)> {
    FacpaTrainer::new(dataset, metric, config, unet)?.run()
}

fn uap_image_step(delta: &Tensor, image: &ImageTensor, metric: &dyn Metric, weight: f32) -> Result<ImageStep> {
    let mut tape = Tape::new();
    let d = tape.param(delta.clone());
    let x = tape.constant(image.tensor().clone());
    let adv = record_perturb(&mut tape, x, d)?;
    let score = metric.record(&mut tape, adv)?;
    let clean = metric.record(&mut tape, x)?;
    let gain = tape.value(score).data()[0] - tape.value(clean).data()[0];
    let obj = tape.scale(score, weight);
    let mut grads = tape.backward(obj)?;
    Ok(ImageStep {
        loss: -tape.value(obj).data()[0],
        gain,
        grads: vec![grads.take(d)],
    })
}

/// Projected sign-gradient ascent on one image-independent field δ,
/// starting from zero and clipped to `[-ε, ε]` after each step. Uses the
/// same batch schedule, and so the same step count, as [`train_facpa`].
pub fn train_uap(dataset: &Dataset, config: &TrainConfig) -> Result<(PerturbationField, TrainHistory)> {
    let metric = config.metric.build();
    train_uap_with_metric(dataset, metric.as_ref(), config)
}

pub fn train_uap_with_metric(
    dataset: &Dataset,
    metric: &dyn Metric,
    config: &TrainConfig,
) -> Result<(PerturbationField, TrainHistory)> {
    config.validate()?;
    let first = dataset.images.first().ok_or(Error::EmptyDataset)?;
    let (h, w) = (first.height(), first.width());
    if let Some(bad) = dataset.images.iter().find(|i| (i.height(), i.width()) != (h, w)) {
        return Err(Error::Invalid(format!(
            "universal perturbation needs equal image sizes: {h}×{w} vs {}×{}",
            bad.height(),
            bad.width()
        )));
    }
    let eps = config.epsilon;
    let mut delta = Tensor::zeros(&[3, h, w]);
    let mut history = TrainHistory::default();
    let start = Instant::now();
    for epoch in 0..config.epochs {
        for batch in make_batches(&dataset.manifest, config.batch_size, config.epoch_seed(epoch))? {
            let step = history.steps.len();
            let weight = 1.0 / batch.len() as f32;
            let steps = batch
                .par_iter()
                .map(|&i| uap_image_step(&delta, &dataset.images[i], metric, weight))
                .collect::<Result<Vec<_>>>()?;
            let (loss, gain, grads) = reduce(steps);
            if !loss.is_finite() || !grads[0].is_finite() {
                return Err(Error::TrainingDiverged { step, what: "loss" });
            }
            for (d, &g) in delta.data_mut().iter_mut().zip(grads[0].data()) {
                let s = if g > 0.0 {
                    1.0
                } else if g < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *d = (*d + config.lr * s).clamp(-eps, eps);
            }
            history.steps.push(StepRecord { step, loss, gain });
        }
        log::info!("uap {} epoch {}/{}", config.metric, epoch + 1, config.epochs);
    }
    history.wall_clock = start.elapsed().as_secs_f64();
    Ok((PerturbationField::new(delta, eps)?, history))
}

/// Metadata line of a universal-perturbation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UapHeader {
    pub kind: String,
    pub epsilon: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

pub const UAP_TENSOR: &str = "uap_delta";

pub fn save_uap(path: &Path, delta: &PerturbationField, header: &UapHeader) -> Result<()> {
    let line = serde_json::to_string(header)?;
    tensor_file::write(path, &line, &[(UAP_TENSOR.to_string(), delta.tensor().clone())])
}

pub fn load_uap(path: &Path) -> Result<(PerturbationField, UapHeader)> {
    let file = tensor_file::read(path)?;
    let header: UapHeader = serde_json::from_str(&file.header).map_err(|e| Error::Header {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    match &file.tensors[..] {
        [(name, t)] if name == UAP_TENSOR => Ok((PerturbationField::new(t.clone(), header.epsilon)?, header)),
        _ => Err(Error::ConfigMismatch(format!(
            "{}: expected a single `{UAP_TENSOR}` tensor",
            path.display()
        ))),
    }
}

/// One-line JSON written next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub train: TrainConfig,
    pub steps: usize,
    pub history_digest: String,
    pub final_loss: Option<f32>,
    pub final_gain: Option<f32>,
    pub config_digest: Option<String>,
}

impl Sidecar {
    pub fn new(train: &TrainConfig, history: &TrainHistory, config_digest: Option<String>) -> Self {
        Self {
            train: train.clone(),
            steps: history.steps.len(),
            history_digest: history.digest(),
            final_loss: history.steps.last().map(|s| s.loss),
            final_gain: history.steps.last().map(|s| s.gain),
            config_digest,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let line = serde_json::to_string(self)? + "\n";
        std::fs::write(path, line).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_corpus;
    use crate::generator::unet_forward;
    use crate::metrics::{metric_score, MeanIntensity, SobelSharpness};

    fn tiny() -> UNetConfig {
        UNetConfig {
            depth: 1,
            base_channels: 2,
            ..UNetConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let ds = synth_corpus(1, 4, (8, 8)).unwrap();
        let mut cfg = TrainConfig::facpa(MetricId::SobelSharpness);
        cfg.epochs = 0;
        cfg.seed = 3;
        let (p, h) = train_facpa(&ds, &cfg, &tiny()).unwrap();
        let mut init = init_params(&tiny(), 3).unwrap();
        init.metric = Some(MetricId::SobelSharpness);
        assert_eq!(p, init);
        assert!(h.steps.is_empty());
    }

    #[test]
    fn fresh_loss_is_negated_clean_score() {
        let ds = synth_corpus(2, 3, (8, 8)).unwrap();
        let p = init_params(&tiny(), 0).unwrap();
        let batch: Vec<&ImageTensor> = ds.images.iter().collect();
        let loss = facpa_loss(&p, &batch, &SobelSharpness).unwrap();
        let clean: f64 = ds
            .images
            .iter()
            .map(|i| metric_score(&SobelSharpness, i).unwrap().value() as f64)
            .sum::<f64>()
            / 3.0;
        assert!((loss as f64 + clean).abs() < 1e-6);

        let single = facpa_loss(&p, &batch[..1], &SobelSharpness).unwrap();
        assert_eq!(single, -metric_score(&SobelSharpness, batch[0]).unwrap().value());
    }

    #[test]
    fn loss_forms_share_gradients() {
        let ds = synth_corpus(5, 2, (8, 8)).unwrap();
        let mut p = init_params(&tiny(), 1).unwrap();
        // make the output layer non-zero so every gradient is live
        let n = p.tensors.len();
        p.tensors[n - 2].1 = p.tensors[n - 2].1.map(|_| 0.05);
        let batch: Vec<&ImageTensor> = ds.images.iter().collect();
        let (la, _, ga) = facpa_loss_and_grad(&p, &batch, &SobelSharpness, LossForm::NegatedScore).unwrap();
        let (lb, _, gb) = facpa_loss_and_grad(&p, &batch, &SobelSharpness, LossForm::NegatedGain).unwrap();
        assert_ne!(la, lb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn uap_linear_metric_saturates() {
        let ds = synth_corpus(9, 4, (8, 8)).unwrap();
        let mut cfg = TrainConfig::uap(MetricId::SobelSharpness);
        cfg.batch_size = 2;
        cfg.epochs = 25;
        let (delta, hist) = train_uap_with_metric(&ds, &MeanIntensity, &cfg).unwrap();
        assert_eq!(hist.steps.len(), 50);
        assert!(delta.tensor().data().iter().all(|&d| (d - cfg.epsilon).abs() <= 1e-6));

        cfg.epochs = 0;
        let (zero, _) = train_uap_with_metric(&ds, &MeanIntensity, &cfg).unwrap();
        assert!(zero.tensor().data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn training_is_reproducible_and_moves_params() {
        let ds = synth_corpus(4, 4, (8, 8)).unwrap();
        let mut cfg = TrainConfig::facpa(MetricId::SobelSharpness);
        cfg.epochs = 2;
        cfg.batch_size = 2;
        cfg.lr = 1e-3;
        let (a, ha) = train_facpa(&ds, &cfg, &tiny()).unwrap();
        let (b, hb) = train_facpa(&ds, &cfg, &tiny()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.digest(), hb.digest());
        assert_eq!(ha.steps.len(), 4);
        let f = unet_forward(&a, &ds.images[0]).unwrap();
        assert!(f.max_abs() > 0.0);
    }

    #[test]
    fn uap_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.fw");
        let delta = PerturbationField::new(Tensor::full(&[3, 2, 2], -0.01), DEFAULT_EPSILON).unwrap();
        let header = UapHeader {
            kind: "uap".into(),
            epsilon: DEFAULT_EPSILON,
            metric: Some(MetricId::FrozenCnn(7)),
            config_digest: None,
        };
        save_uap(&p, &delta, &header).unwrap();
        assert_eq!(load_uap(&p).unwrap(), (delta, header));
    }

    #[test]
    fn mixed_sizes_rejected_for_uap() {
        let mut ds = synth_corpus(1, 2, (8, 8)).unwrap();
        ds.images[1] = ImageTensor::filled(4, 4, 0.5).unwrap();
        assert!(train_uap(&ds, &TrainConfig::uap(MetricId::SobelSharpness)).is_err());
    }
}

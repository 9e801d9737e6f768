//! Run configuration: one JSON document, every field defaulted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nr_attack_core::attacks::{AttackKind, AttackSpec};
use nr_attack_core::bench::LatencyProtocol;
use nr_attack_core::generator::UNetConfig;
use nr_attack_core::metrics::MetricId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    /// Target metrics; `train` needs exactly one.
    pub metric: Vec<MetricId>,
    pub generator: UNetConfig,
    pub attacks: Vec<AttackSpec>,
    pub train: TrainSection,
    pub bench: BenchSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            metric: MetricId::defaults(),
            generator: UNetConfig::default(),
            attacks: vec![
                AttackSpec::new(AttackKind::Facpa).with_iters(0),
                AttackSpec::new(AttackKind::Uap).with_iters(0),
                AttackSpec::new(AttackKind::Ifgsm).with_iters(1),
                AttackSpec::new(AttackKind::Ifgsm).with_iters(10),
            ],
            train: TrainSection::default(),
            bench: BenchSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Input manifest for `train`, `attack` and `bench`.
    pub manifest: Option<PathBuf>,
    /// Single input image for `attack`, used instead of a manifest.
    pub image: Option<PathBuf>,
    /// Number of images written by `synth`.
    pub synth_n: usize,
    /// `(height, width)` of synthesized and ingested images.
    pub size: (usize, usize),
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            manifest: None,
            image: None,
            synth_n: 16,
            size: (32, 32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Facpa,
    Uap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to 1e-4 for the generator and 1e-3 for the universal field.
    pub lr: Option<f32>,
    /// Output file; defaults to `<output.dir>/{gen,uap}_<metric>.fw`.
    pub out: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: TrainMode::Facpa,
            batch_size: 8,
            epochs: 20,
            lr: None,
            out: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    Measured,
    /// Latency columns are left empty, making `report.csv` byte-reproducible.
    Skip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub timing: Timing,
    pub latency: LatencyProtocol,
    /// Index of the image used as the latency probe.
    pub probe_index: usize,
    /// Original/adversarial pairs per grid.
    pub grid_images: usize,
    /// Generator weights per metric token.
    pub weights: BTreeMap<String, PathBuf>,
    /// Universal perturbation per metric token.
    pub uap: BTreeMap<String, PathBuf>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            timing: Timing::Measured,
            latency: LatencyProtocol::default(),
            probe_index: 0,
            grid_images: 4,
            weights: BTreeMap::new(),
            uap: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// SHA-256 of the canonical JSON form (object keys sorted).
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.generator.validate()?;
        for spec in &self.attacks {
            spec.validate()?;
        }
        if self.data.size.0 == 0 || self.data.size.1 == 0 {
            bail!("data.size must be positive");
        }
        if self.bench.latency.measured_runs == 0 {
            bail!("bench.latency.measured_runs must be positive");
        }
        Ok(())
    }

    /// The single training target.
    pub fn train_metric(&self) -> anyhow::Result<MetricId> {
        match &self.metric[..] {
            [m] => Ok(m.clone()),
            [] => bail!("no target metric configured"),
            many => bail!("train needs exactly one metric, config lists {}", many.len()),
        }
    }
}

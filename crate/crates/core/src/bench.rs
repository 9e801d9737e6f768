//! Gain statistics and latency measurement.

use std::sync::{RwLock, TryLockError};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{Attack, AttackOutcome};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::{Metric, MetricScore};

/// Scores with a smaller magnitude have no relative gain.
pub const GAIN_FLOOR: f64 = 1e-6;

/// Held shared by evaluations and exclusively by latency measurements.
static BENCH_LOCK: RwLock<()> = RwLock::new(());

/// `100·(after − before)/|before|`, or `None` when `|before| < 1e-6`.
pub fn relative_gain(before: MetricScore, after: MetricScore) -> Option<f64> {
    let b = before.0 as f64;
    if b.abs() < GAIN_FLOOR {
        None
    } else {
        Some(100.0 * (after.0 as f64 - b) / b.abs())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainSummary {
    pub n_images: usize,
    pub n_undefined: usize,
    /// Mean over images with a defined relative gain.
    pub mean_rel_gain_pct: Option<f64>,
    pub mean_abs_gain: f64,
}

impl GainSummary {
    pub fn from_scores(scores: &[(MetricScore, MetricScore)]) -> Self {
        let mut rel_sum = 0.0;
        let mut rel_n = 0usize;
        let mut abs_sum = 0.0;
        for &(before, after) in scores {
            abs_sum += after.0 as f64 - before.0 as f64;
            if let Some(r) = relative_gain(before, after) {
                rel_sum += r;
                rel_n += 1;
            }
        }
        let n = scores.len();
        Self {
            n_images: n,
            n_undefined: n - rel_n,
            mean_rel_gain_pct: (rel_n > 0).then(|| rel_sum / rel_n as f64),
            mean_abs_gain: if n == 0 { 0.0 } else { abs_sum / n as f64 },
        }
    }

    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a AttackOutcome>) -> Self {
        let scores: Vec<_> = outcomes.into_iter().map(|o| (o.score_before, o.score_after)).collect();
        Self::from_scores(&scores)
    }
}

/// Per-image results of one attack against one metric, in input order.
#[derive(Debug)]
pub struct Evaluation {
    pub results: Vec<std::result::Result<AttackOutcome, String>>,
    pub summary: GainSummary,
}

impl Evaluation {
    pub fn outcomes(&self) -> impl Iterator<Item = &AttackOutcome> {
        self.results.iter().filter_map(|r| r.as_ref().ok())
    }

    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| r.is_err()).count()
    }
}

/// Attacks every image, in parallel. A failing image is recorded and skipped.
pub fn evaluate_attack(attack: &Attack, metric: &dyn Metric, images: &[ImageTensor]) -> Result<Evaluation> {
    attack.validate()?;
    let _shared = BENCH_LOCK.read().unwrap_or_else(|e| e.into_inner());
    let results: Vec<_> = images
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            attack.run(x, metric).map_err(|e| {
                log::warn!("image {i}: {e}");
                e.to_string()
            })
        })
        .collect();
    let summary = GainSummary::from_outcomes(results.iter().filter_map(|r| r.as_ref().ok()));
    Ok(Evaluation { results, summary })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub warmup_runs: usize,
    pub measured_runs: usize,
    pub min_ms: f64,
    pub median_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Order statistics of `samples_ms`; an even count takes the mean of the
    /// middle pair.
    pub fn from_samples(warmup_runs: usize, samples_ms: &[f64]) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::Invalid("no latency samples".into()));
        }
        if samples_ms.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite { what: "latency sample".into() });
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
        Ok(Self {
            warmup_runs,
            measured_runs: n,
            min_ms: s[0],
            median_ms: median,
            max_ms: s[n - 1],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyProtocol {
    pub warmup_runs: usize,
    pub measured_runs: usize,
}

impl Default for LatencyProtocol {
    fn default() -> Self {
        Self {
            warmup_runs: 5,
            measured_runs: 30,
        }
    }
}

/// Times `attack.produce` on one probe image on a single thread. Returns
/// [`Error::Busy`] if any other benchmark work is in progress.
pub fn measure_latency(
    attack: &Attack,
    metric: &dyn Metric,
    probe: &ImageTensor,
    protocol: LatencyProtocol,
) -> Result<LatencyStats> {
    attack.validate()?;
    if protocol.measured_runs == 0 {
        return Err(Error::Invalid("measured_runs must be positive".into()));
    }
    let _exclusive = match BENCH_LOCK.try_write() {
        Ok(g) => g,
        Err(TryLockError::Poisoned(e)) => e.into_inner(),
        Err(TryLockError::WouldBlock) => return Err(Error::Busy),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        for _ in 0..protocol.warmup_runs {
            attack.produce(probe, metric)?;
        }
        let mut samples = Vec::with_capacity(protocol.measured_runs);
        for _ in 0..protocol.measured_runs {
            let start = Instant::now();
            let out = attack.produce(probe, metric)?;
            samples.push(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out);
        }
        LatencyStats::from_samples(protocol.warmup_runs, &samples)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{AttackKind, AttackSpec};
    use crate::metrics::{Scaled, SobelSharpness};
    use crate::data::synth_corpus;

    fn s(v: f32) -> MetricScore {
        MetricScore(v)
    }

    #[test]
    fn relative_gain_values() {
        assert_eq!(relative_gain(s(2.0), s(3.0)), Some(50.0));
        assert_eq!(relative_gain(s(-2.0), s(-1.0)), Some(50.0));
        assert_eq!(relative_gain(s(1e-7), s(1.0)), None);
        assert_eq!(relative_gain(s(4.0), s(4.0)), Some(0.0));
    }

    #[test]
    fn summary_excludes_undefined() {
        let g = GainSummary::from_scores(&[(s(2.0), s(3.0)), (s(0.0), s(1.0)), (s(1.0), s(1.0))]);
        assert_eq!(g.n_images, 3);
        assert_eq!(g.n_undefined, 1);
        assert_eq!(g.mean_rel_gain_pct, Some(25.0));
        assert!((g.mean_abs_gain - 2.0 / 3.0).abs() < 1e-12);
        let empty = GainSummary::from_scores(&[]);
        assert_eq!(empty.mean_rel_gain_pct, None);
        assert_eq!(empty.mean_abs_gain, 0.0);
    }

    #[test]
    fn median_of_samples() {
        let l = LatencyStats::from_samples(0, &[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((l.min_ms, l.median_ms, l.max_ms), (1.0, 2.0, 3.0));
        assert_eq!(LatencyStats::from_samples(0, &[4.0, 1.0, 2.0, 3.0]).unwrap().median_ms, 2.5);
        assert!(LatencyStats::from_samples(0, &[]).is_err());
    }

    #[test]
    fn identity_attack_has_zero_gain() {
        let ds = synth_corpus(3, 4, (8, 8)).unwrap();
        let attack = Attack::iterative(AttackSpec::new(AttackKind::Ifgsm).with_iters(0));
        let e = evaluate_attack(&attack, &SobelSharpness, &ds.images).unwrap();
        assert_eq!(e.summary.mean_abs_gain, 0.0);
        assert_eq!(e.summary.mean_rel_gain_pct, Some(0.0));
        assert_eq!(e.failures(), 0);
    }

    #[test]
    fn relative_gain_is_scale_invariant() {
        let ds = synth_corpus(3, 4, (8, 8)).unwrap();
        let attack = Attack::iterative(AttackSpec::new(AttackKind::Ifgsm).with_iters(3));
        let a = evaluate_attack(&attack, &SobelSharpness, &ds.images).unwrap();
        let scaled = Scaled {
            inner: SobelSharpness,
            factor: 4.0,
        };
        let b = evaluate_attack(&attack, &scaled, &ds.images).unwrap();
        let (ra, rb) = (a.summary.mean_rel_gain_pct.unwrap(), b.summary.mean_rel_gain_pct.unwrap());
        assert!((ra - rb).abs() <= 1e-9 * ra.abs().max(1.0), "{ra} vs {rb}");
    }

    #[test]
    fn per_image_failures_are_recorded() {
        let mut images = synth_corpus(3, 2, (8, 8)).unwrap().images;
        images.push(ImageTensor::filled(4, 4, 0.5).unwrap());
        let delta = crate::generator::PerturbationField::zeros(1, 8, 8);
        let attack = Attack::uap(delta, 0.1);
        let e = evaluate_attack(&attack, &SobelSharpness, &images).unwrap();
        assert_eq!(e.failures(), 3);
        assert_eq!(e.summary.n_images, 0);
    }

    #[test]
    fn latency_stats_are_ordered() {
        let x = ImageTensor::filled(8, 8, 0.5).unwrap();
        let attack = Attack::iterative(AttackSpec::new(AttackKind::Ifgsm).with_iters(1));
        let protocol = LatencyProtocol {
            warmup_runs: 1,
            measured_runs: 5,
        };
        let l = loop {
            match measure_latency(&attack, &SobelSharpness, &x, protocol) {
                Err(Error::Busy) => std::thread::sleep(std::time::Duration::from_millis(5)),
                other => break other.unwrap(),
            }
        };
        assert!(l.min_ms <= l.median_ms && l.median_ms <= l.max_ms);
        assert_eq!(l.measured_runs, 5);
    }
}

//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;

use nr_attack_core::attacks::{Attack, AttackKind, AttackOutcome};
use nr_attack_core::bench::{evaluate_attack, measure_latency, relative_gain};
use nr_attack_core::data::{synth_corpus, Dataset, DatasetManifest, ManifestEntry, Source};
use nr_attack_core::generator::{load_params, save_params, GeneratorParams, PerturbationField};
use nr_attack_core::image::{png_text, save_png};
use nr_attack_core::metrics::MetricId;
use nr_attack_core::report::{emit_report, file_token, read_csv, BenchRow, BenchmarkReport, Grid};
use nr_attack_core::tensor_file;
use nr_attack_core::trainer::{load_uap, save_uap, train_facpa, train_uap, Sidecar, TrainConfig, UapHeader};

use crate::config::{RunConfig, Timing, TrainMode};

pub const DIGEST_KEY: &str = "config_digest";

/// A command failure with its exit code: 2 for configuration and
/// validation problems, 3 for everything that fails while working.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => e,
        }
    }
}

pub trait Stage<T> {
    fn config_stage(self) -> Result<T, Failure>;
    fn runtime_stage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn config_stage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn runtime_stage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn write_config(cfg: &RunConfig, path: &Path) -> anyhow::Result<()> {
    std::fs::write(path, cfg.to_pretty_json()).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn synth(cfg: &RunConfig) -> Result<(), Failure> {
    let n = cfg.data.synth_n;
    if n == 0 {
        return Err(Failure::Config(anyhow!("--n must be at least 1")));
    }
    let digest = cfg.digest();
    let dir = &cfg.output.dir;
    let work = || -> anyhow::Result<()> {
        create_dir(dir)?;
        let ds = synth_corpus(cfg.seed, n, cfg.data.size)?;
        let mut entries = Vec::with_capacity(n);
        for (entry, img) in ds.manifest.entries.iter().zip(&ds.images) {
            let name = format!("{}.png", entry.id);
            save_png(&dir.join(&name), img, &[(DIGEST_KEY, &digest)])?;
            entries.push(ManifestEntry {
                id: entry.id.clone(),
                source: Source::File(PathBuf::from(name)),
            });
        }
        let manifest = DatasetManifest {
            entries,
            seed: cfg.seed,
            target_size: cfg.data.size,
            config_digest: Some(digest.clone()),
        };
        manifest.save(&dir.join("manifest.json"))?;
        write_config(cfg, &dir.join("config.json"))?;
        log::info!("wrote {n} images and manifest.json to {}", dir.display());
        Ok(())
    };
    work().runtime_stage()
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    if let Some(image) = &cfg.data.image {
        let manifest = DatasetManifest {
            entries: vec![ManifestEntry {
                id: image
                    .file_stem()
                    .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned()),
                source: Source::File(image.clone()),
            }],
            seed: cfg.seed,
            target_size: cfg.data.size,
            config_digest: None,
        };
        return Dataset::materialize(manifest, Path::new("")).runtime_stage();
    }
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Failure::Config(anyhow!("no input: pass --data or set data.manifest")))?;
    let manifest = DatasetManifest::load(path)
        .with_context(|| format!("loading manifest {}", path.display()))
        .runtime_stage()?;
    let base = path.parent().unwrap_or(Path::new(""));
    Dataset::materialize(manifest, base).runtime_stage()
}

fn train_config(cfg: &RunConfig) -> anyhow::Result<TrainConfig> {
    let metric = cfg.train_metric()?;
    let mut tc = match cfg.train.mode {
        TrainMode::Facpa => TrainConfig::facpa(metric),
        TrainMode::Uap => TrainConfig::uap(metric),
    };
    tc.batch_size = cfg.train.batch_size;
    tc.epochs = cfg.train.epochs;
    if let Some(lr) = cfg.train.lr {
        tc.lr = lr;
    }
    tc.seed = cfg.seed;
    tc.epsilon = cfg.generator.epsilon;
    tc.validate()?;
    Ok(tc)
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let tc = train_config(cfg).config_stage()?;
    let out = cfg.train.out.clone().unwrap_or_else(|| {
        let prefix = match cfg.train.mode {
            TrainMode::Facpa => "gen",
            TrainMode::Uap => "uap",
        };
        cfg.output.dir.join(format!("{prefix}_{}.fw", file_token(&tc.metric.to_string())))
    });
    let ds = load_dataset(cfg)?;
    let digest = cfg.digest();
    let work = || -> anyhow::Result<()> {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        let history = match cfg.train.mode {
            TrainMode::Facpa => {
                let (mut params, history) = train_facpa(&ds, &tc, &cfg.generator)?;
                params.config_digest = Some(digest.clone());
                save_params(&params, &out)?;
                history
            }
            TrainMode::Uap => {
                let (delta, history) = train_uap(&ds, &tc)?;
                let header = UapHeader {
                    kind: "uap".into(),
                    epsilon: tc.epsilon,
                    metric: Some(tc.metric.clone()),
                    config_digest: Some(digest.clone()),
                };
                save_uap(&out, &delta, &header)?;
                history
            }
        };
        Sidecar::new(&tc, &history, Some(digest.clone())).write(&sidecar_path(&out))?;
        write_config(cfg, &append_ext(&out, "config.json"))?;
        log::info!(
            "trained {} steps in {:.1}s; wrote {}",
            history.steps.len(),
            history.wall_clock,
            out.display()
        );
        Ok(())
    };
    work().runtime_stage()
}

fn append_ext(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    append_ext(weights, "json")
}

/// Attacks paired with the metric they target, artifacts loaded.
fn build_attacks(cfg: &RunConfig) -> Result<Vec<(Attack, MetricId)>, Failure> {
    if cfg.attacks.is_empty() {
        return Err(Failure::Config(anyhow!("no attacks configured")));
    }
    if cfg.metric.is_empty() {
        return Err(Failure::Config(anyhow!("no metrics configured")));
    }
    let artifact = |map: &BTreeMap<String, PathBuf>, kind: AttackKind, m: &MetricId| {
        map.get(&m.to_string())
            .cloned()
            .ok_or_else(|| Failure::Config(anyhow!("{kind} on {m} needs an artifact path (bench.{})", if kind == AttackKind::Facpa { "weights" } else { "uap" })))
    };
    // Resolve every path before doing any work.
    let mut plan = Vec::new();
    for spec in &cfg.attacks {
        for m in &cfg.metric {
            let path = match spec.kind {
                AttackKind::Facpa => Some(artifact(&cfg.bench.weights, spec.kind, m)?),
                AttackKind::Uap => Some(artifact(&cfg.bench.uap, spec.kind, m)?),
                _ => None,
            };
            plan.push((*spec, m.clone(), path));
        }
    }
    let mut generators: BTreeMap<PathBuf, GeneratorParams> = BTreeMap::new();
    let mut universals: BTreeMap<PathBuf, (PerturbationField, UapHeader)> = BTreeMap::new();
    let mut out = Vec::new();
    for (spec, m, path) in plan {
        let attack = match (spec.kind, path) {
            (AttackKind::Facpa, Some(p)) => {
                if !generators.contains_key(&p) {
                    let params = load_params(&p)
                        .with_context(|| format!("loading generator weights {}", p.display()))
                        .runtime_stage()?;
                    generators.insert(p.clone(), params);
                }
                Attack::facpa(generators[&p].clone())
            }
            (AttackKind::Uap, Some(p)) => {
                if !universals.contains_key(&p) {
                    let loaded = load_uap(&p)
                        .with_context(|| format!("loading universal perturbation {}", p.display()))
                        .runtime_stage()?;
                    universals.insert(p.clone(), loaded);
                }
                let (delta, header) = universals[&p].clone();
                Attack::uap(delta, header.epsilon)
            }
            _ => Attack::iterative(spec),
        };
        out.push((attack, m));
    }
    Ok(out)
}

fn attack_label(attack: &Attack) -> String {
    if attack.spec.kind.is_iterative() {
        format!("{}@{}", attack.spec.kind, attack.spec.iters)
    } else {
        attack.spec.kind.to_string()
    }
}

#[derive(Serialize)]
struct ScoreRecord<'a> {
    id: &'a str,
    attack: AttackKind,
    iters: usize,
    metric: String,
    score_before: f32,
    score_after: f32,
    abs_gain: f32,
    rel_gain_pct: Option<f64>,
    linf: f32,
    elapsed_ms: f64,
    gradient_evals: u64,
    field_digest: Option<&'a str>,
    warnings: &'a [String],
    config_digest: &'a str,
}

pub fn attack(cfg: &RunConfig) -> Result<(), Failure> {
    let attacks = build_attacks(cfg)?;
    let ds = load_dataset(cfg)?;
    let digest = cfg.digest();
    let dir = &cfg.output.dir;
    let work = || -> anyhow::Result<()> {
        create_dir(dir)?;
        write_config(cfg, &dir.join("config.json"))?;
        for (attack, m) in &attacks {
            let metric = m.build();
            let label = attack_label(attack);
            for (entry, x) in ds.manifest.entries.iter().zip(&ds.images) {
                let o: AttackOutcome = attack
                    .run(x, metric.as_ref())
                    .with_context(|| format!("{label} on {} / {m}", entry.id))?;
                for w in &o.warnings {
                    log::warn!("{}: {w}", entry.id);
                }
                let stem = format!("{}__{}__{}", entry.id, file_token(&label), file_token(&m.to_string()));
                save_png(&dir.join(format!("{stem}.png")), &o.adversarial, &[(DIGEST_KEY, &digest)])?;
                let record = ScoreRecord {
                    id: &entry.id,
                    attack: attack.spec.kind,
                    iters: attack.spec.iters,
                    metric: m.to_string(),
                    score_before: o.score_before.0,
                    score_after: o.score_after.0,
                    abs_gain: o.abs_gain(),
                    rel_gain_pct: relative_gain(o.score_before, o.score_after),
                    linf: o.adversarial.linf_distance(x),
                    elapsed_ms: o.elapsed * 1e3,
                    gradient_evals: o.gradient_evals,
                    field_digest: o.field_digest.as_deref(),
                    warnings: &o.warnings,
                    config_digest: &digest,
                };
                let path = dir.join(format!("{stem}.json"));
                std::fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            log::info!("{label} on {m}: {} images", ds.len());
        }
        Ok(())
    };
    work().runtime_stage()
}

pub fn bench(cfg: &RunConfig) -> Result<(), Failure> {
    let attacks = build_attacks(cfg)?;
    let ds = load_dataset(cfg)?;
    if ds.is_empty() {
        return Err(Failure::Config(anyhow!("evaluation manifest is empty")));
    }
    if cfg.bench.timing == Timing::Measured && cfg.bench.probe_index >= ds.len() {
        return Err(Failure::Config(anyhow!(
            "bench.probe_index {} out of range for {} images",
            cfg.bench.probe_index,
            ds.len()
        )));
    }
    let digest = cfg.digest();
    let work = || -> anyhow::Result<()> {
        let mut report = BenchmarkReport {
            rows: Vec::new(),
            config_digest: digest.clone(),
        };
        let mut grids = Vec::new();
        for (attack, m) in &attacks {
            let metric = m.build();
            let label = attack_label(attack);
            let eval = evaluate_attack(attack, metric.as_ref(), &ds.images)?;
            for (entry, r) in ds.manifest.entries.iter().zip(&eval.results) {
                if let Err(e) = r {
                    log::warn!("{label} on {} / {m} failed: {e}", entry.id);
                }
            }
            let latency = match cfg.bench.timing {
                Timing::Measured => Some(measure_latency(
                    attack,
                    metric.as_ref(),
                    &ds.images[cfg.bench.probe_index],
                    cfg.bench.latency,
                )?),
                Timing::Skip => None,
            };
            log::info!(
                "{label} on {m}: gain {:?}% latency {:?} ms",
                eval.summary.mean_rel_gain_pct,
                latency.map(|l| l.median_ms)
            );
            grids.push(Grid {
                attack_label: label,
                metric: m.clone(),
                pairs: ds
                    .images
                    .iter()
                    .zip(&eval.results)
                    .filter_map(|(x, r)| r.as_ref().ok().map(|o| (x.clone(), o.adversarial.clone())))
                    .take(cfg.bench.grid_images)
                    .collect(),
            });
            report.rows.push(BenchRow {
                attack: attack.spec.kind,
                iters: attack.spec.iters,
                metric: m.clone(),
                gain: eval.summary,
                latency,
                epsilon: attack.spec.epsilon,
                seed: cfg.seed,
                config_digest: digest.clone(),
            });
        }
        let files = emit_report(&report, &grids, &cfg.output.dir)?;
        write_config(cfg, &cfg.output.dir.join("config.json"))?;
        log::info!("wrote {} files to {}", files.len(), cfg.output.dir.display());
        Ok(())
    };
    work().runtime_stage()
}

/// Digest embedded in one artifact, or `None` for files that carry none.
fn embedded_digests(path: &Path) -> anyhow::Result<Option<Vec<String>>> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if name == "config.json" || name.ends_with(".config.json") {
        return Ok(None);
    }
    let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
    let found = match ext.as_deref() {
        Some("png") => vec![png_text(path, DIGEST_KEY)?.ok_or_else(|| anyhow!("no {DIGEST_KEY} text chunk"))?],
        Some("fw") => {
            let file = tensor_file::read(path)?;
            vec![json_digest(&serde_json::from_str(&file.header)?)?]
        }
        Some("json") => {
            let text = std::fs::read_to_string(path)?;
            vec![json_digest(&serde_json::from_str(&text)?)?]
        }
        Some("csv") => read_csv(path)?.into_iter().map(|r| r.config_digest).collect(),
        Some("md") => {
            let text = std::fs::read_to_string(path)?;
            let line = text
                .lines()
                .find_map(|l| l.strip_prefix("config digest: `"))
                .ok_or_else(|| anyhow!("no config digest line"))?;
            vec![line.trim_end_matches('`').to_string()]
        }
        _ => return Ok(None),
    };
    Ok(Some(found))
}

fn json_digest(v: &serde_json::Value) -> anyhow::Result<String> {
    v.get(DIGEST_KEY)
        .and_then(|d| d.as_str())
        .map(str::to_string)
        .ok_or_else(|| anyhow!("no `{DIGEST_KEY}` field"))
}

pub fn verify(config_path: &Path, cfg: &RunConfig, paths: &[PathBuf]) -> Result<(), Failure> {
    let expected = cfg.digest();
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))
                .runtime_stage()?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    let mut checked = 0usize;
    let mut bad = Vec::new();
    for f in &files {
        match embedded_digests(f) {
            Ok(None) => {}
            Ok(Some(found)) => {
                checked += 1;
                if let Some(d) = found.iter().find(|d| **d != expected) {
                    bad.push(format!("{}: digest {d}", f.display()));
                } else {
                    println!("ok {}", f.display());
                }
            }
            Err(e) => bad.push(format!("{}: {e:#}", f.display())),
        }
    }
    if !bad.is_empty() {
        for b in &bad {
            println!("MISMATCH {b}");
        }
        return Err(Failure::Runtime(anyhow!(
            "{} of {} artifacts do not match {} (digest {expected})",
            bad.len(),
            checked + bad.len(),
            config_path.display()
        )));
    }
    if checked == 0 {
        return Err(Failure::Runtime(anyhow!("no artifacts found to verify")));
    }
    println!("verified {checked} artifacts against {expected}");
    Ok(())
}

//! Attack, generator and trainer behavior across module boundaries.

mod common;

use common::*;
use sha2::{Digest, Sha256};

use nr_attack_core::attacks::{apply_uap, facpa_attack, fr_penalized_attack, ifgsm_attack, AttackKind, AttackSpec};
use nr_attack_core::data::{synth_corpus, synth_image};
use nr_attack_core::generator::{init_params, load_params, save_params, unet_forward, UNetConfig};
use nr_attack_core::metrics::{FrozenCnn, MetricId};
use nr_attack_core::trainer::{train_facpa, train_uap, TrainConfig};
use nr_attack_core::Error;

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64
}

fn quantized_digest(values: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(((v * 1_048_576.0).round() as i32).to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[test]
fn heavy_penalty_keeps_attack_closer() {
    let x = synth_image(3, 0, (16, 16)).unwrap();
    let metric = FrozenCnn::new(7);
    let mut spec = AttackSpec::new(AttackKind::FrPenalized).with_iters(10);
    let free = fr_penalized_attack(&x, &metric, &spec).unwrap();
    spec.lambda_fr = 1e6;
    let held = fr_penalized_attack(&x, &metric, &spec).unwrap();
    assert!(mse(held.adversarial.data(), x.data()) < mse(free.adversarial.data(), x.data()));
}

#[test]
fn iterative_attack_raises_every_metric() {
    let x = synth_image(5, 2, (16, 16)).unwrap();
    for id in MetricId::defaults() {
        let o = ifgsm_attack(&x, id.build().as_ref(), &AttackSpec::new(AttackKind::Ifgsm)).unwrap();
        assert!(o.abs_gain() > 0.0, "{id}");
        assert_eq!(o.gradient_evals, 10);
    }
}

#[test]
fn generator_attack_runs_no_backward_pass() {
    let mut rng = seeded(9);
    let params = random_generator(&mut rng, &UNetConfig::default());
    let x = synth_image(1, 1, (16, 16)).unwrap();
    let o = facpa_attack(&x, &FrozenCnn::new(7), &params).unwrap();
    assert_eq!(o.gradient_evals, 0);
    assert!(o.adversarial != x);
}

#[test]
fn universal_field_is_identical_for_every_image() {
    let ds = synth_corpus(2, 6, (16, 16)).unwrap();
    let mut cfg = TrainConfig::uap(MetricId::SobelSharpness);
    cfg.epochs = 2;
    cfg.batch_size = 3;
    let (delta, _) = train_uap(&ds, &cfg).unwrap();
    let digests: Vec<_> = ds
        .images
        .iter()
        .map(|x| apply_uap(x, &nr_attack_core::metrics::SobelSharpness, &delta).unwrap().field_digest.unwrap())
        .collect();
    assert!(digests.iter().all(|d| *d == digests[0]));
    assert_eq!(digests[0], delta.tensor().digest());
}

#[test]
fn generator_golden_output() {
    let params = live_generator(&UNetConfig::default(), 11, 0.5);
    let x = synth_image(2, 0, (32, 32)).unwrap();
    let f = unet_forward(&params, &x).unwrap();
    let reference = unet(&params, &param_values(&params), &image_map(&x));
    for (a, b) in f.tensor().data().iter().zip(&reference.v) {
        assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
    }
    assert_eq!(quantized_digest(f.tensor().data()), GOLDEN_FIELD);
}

const GOLDEN_FIELD: &str = "d1bd66d6e63291e96d58826f29b06e9294a007a5b608dde380fcd820e80e0b00";

#[test]
fn different_seeds_give_different_generators() {
    let c = UNetConfig::default();
    let (a, b) = (init_params(&c, 1).unwrap(), init_params(&c, 2).unwrap());
    assert_ne!(a.digest(), b.digest());
    assert_eq!(a.digest(), init_params(&c, 1).unwrap().digest());
}

#[test]
fn weights_files_round_trip_and_reject_damage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.fw");
    let params = live_generator(&UNetConfig::default(), 4, 0.3);
    save_params(&params, &path).unwrap();
    let back = load_params(&path).unwrap();
    assert_eq!(back.digest(), params.digest());
    for ((_, a), (_, b)) in back.tensors.iter().zip(&params.tensors) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let bytes = std::fs::read(&path).unwrap();
    let bad = dir.path().join("bad.fw");
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    std::fs::write(&bad, &wrong).unwrap();
    assert!(matches!(load_params(&bad), Err(Error::BadMagic { .. })));
    std::fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_params(&bad), Err(Error::Truncated { .. })));

    let small = init_params(&UNetConfig { base_channels: 8, ..UNetConfig::default() }, 0).unwrap();
    let mut mixed = small.clone();
    mixed.tensors[0] = params.tensors[0].clone();
    let mixed_path = dir.path().join("mixed.fw");
    // a header that disagrees with the tensors it precedes
    save_params(&mixed, &mixed_path).unwrap();
    assert!(matches!(load_params(&mixed_path), Err(Error::ConfigMismatch(_))));
}

#[test]
fn short_training_improves_on_sobel() {
    let train = synth_corpus(21, 16, (16, 16)).unwrap();
    let held = synth_corpus(22, 8, (16, 16)).unwrap();
    let mut cfg = TrainConfig::facpa(MetricId::SobelSharpness);
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    let (params, history) = train_facpa(&train, &cfg, &UNetConfig::default()).unwrap();
    assert_eq!(history.steps[0].gain, 0.0);
    assert!(history.steps.last().unwrap().gain > 0.0);
    let metric = nr_attack_core::metrics::SobelSharpness;
    for x in &held.images {
        let o = facpa_attack(x, &metric, &params).unwrap();
        assert!(o.score_after.value() > o.score_before.value());
    }
}

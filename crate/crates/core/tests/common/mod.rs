//! Independent double-precision reference forwards used as oracles.
#![allow(dead_code)]

use nr_attack_core::generator::GeneratorParams;
use nr_attack_core::metrics::FrozenCnn;

use std::cell::RefCell;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

thread_local! {
    static KINKS: RefCell<Option<Vec<bool>>> = const { RefCell::new(None) };
}

/// Records which side of a non-differentiable point a value sits on.
fn note(side: bool) {
    KINKS.with(|k| {
        if let Some(v) = k.borrow_mut().as_mut() {
            v.push(side);
        }
    });
}

/// Runs `f` and returns the side of every ReLU, leaky-ReLU and clamp
/// evaluation it made. Two points with equal signatures lie in the same
/// smooth piece.
pub fn with_signature<T>(f: impl FnOnce() -> T) -> (T, Vec<bool>) {
    KINKS.with(|k| *k.borrow_mut() = Some(Vec::new()));
    let out = f();
    let sig = KINKS.with(|k| k.borrow_mut().take().unwrap());
    (out, sig)
}
pub const KAPPA: f64 = 1e-6;

/// `C×H×W` map in f64.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn new(c: usize, h: usize, w: usize, v: Vec<f64>) -> Self {
        assert_eq!(v.len(), c * h * w);
        Self { c, h, w, v }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Direct-loop 3×3 (or 1×1) convolution; `reflect` selects mirror padding.
pub fn conv(x: &Map, kernel: &[f64], out_c: usize, k: usize, stride: usize, pad: usize, reflect: bool, bias: Option<&[f64]>) -> Map {
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut v = vec![0.0; out_c * oh * ow];
    for o in 0..out_c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for c in 0..x.c {
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xx * stride + dx) as isize - pad as isize;
                            let val = if reflect {
                                x.at(c, mirror(iy, x.h), mirror(ix, x.w))
                            } else if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                0.0
                            } else {
                                x.at(c, iy as usize, ix as usize)
                            };
                            acc += kernel[((o * x.c + c) * k + dy) * k + dx] * val;
                        }
                    }
                }
                v[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    Map::new(out_c, oh, ow, v)
}

pub fn luminance(img: &Map) -> Map {
    let n = img.h * img.w;
    let v = (0..n).map(|i| (0..3).map(|c| LUMA[c] * img.v[c * n + i]).sum()).collect();
    Map::new(1, img.h, img.w, v)
}

pub fn sobel_sharpness(img: &Map) -> f64 {
    let y = luminance(img);
    let kx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let ky = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let gx = conv(&y, &kx, 1, 3, 1, 1, true, None);
    let gy = conv(&y, &ky, 1, 3, 1, 1, true, None);
    let n = gx.v.len() as f64;
    gx.v.iter().zip(&gy.v).map(|(a, b)| (a * a + b * b + KAPPA).sqrt()).sum::<f64>() / n
}

pub fn luminance_contrast(img: &Map) -> f64 {
    let y = luminance(img);
    let n = y.v.len() as f64;
    let mean = y.v.iter().sum::<f64>() / n;
    (y.v.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn to64(t: &nr_attack_core::Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn frozen_cnn(net: &FrozenCnn, img: &Map) -> f64 {
    let mut h = img.clone();
    for layer in &net.layers {
        let out_c = layer.kernel.shape()[0];
        h = conv(&h, &to64(&layer.kernel), out_c, 3, 2, 1, false, Some(&to64(&layer.bias)));
        for v in &mut h.v {
            note(*v > 0.0);
            if *v < 0.0 {
                *v *= 0.1;
            }
        }
    }
    let n = (h.h * h.w) as f64;
    let hw = to64(&net.head_weight);
    let mut s = net.head_bias.data()[0] as f64;
    for c in 0..h.c {
        let mean: f64 = h.v[c * h.h * h.w..(c + 1) * h.h * h.w].iter().sum::<f64>() / n;
        s += hw[c] * mean;
    }
    s
}

fn relu(mut m: Map) -> Map {
    m.v.iter_mut().for_each(|v| {
        note(*v > 0.0);
        *v = v.max(0.0)
    });
    m
}

fn pool(m: &Map) -> Map {
    let (h, w) = (m.h / 2, m.w / 2);
    let mut v = vec![0.0; m.c * h * w];
    for c in 0..m.c {
        for y in 0..h {
            for x in 0..w {
                v[(c * h + y) * w + x] = (m.at(c, 2 * y, 2 * x)
                    + m.at(c, 2 * y + 1, 2 * x)
                    + m.at(c, 2 * y, 2 * x + 1)
                    + m.at(c, 2 * y + 1, 2 * x + 1))
                    / 4.0;
            }
        }
    }
    Map::new(m.c, h, w, v)
}

fn upsample(m: &Map) -> Map {
    let (h, w) = (m.h * 2, m.w * 2);
    let mut v = vec![0.0; m.c * h * w];
    for c in 0..m.c {
        for y in 0..h {
            for x in 0..w {
                v[(c * h + y) * w + x] = m.at(c, y / 2, x / 2);
            }
        }
    }
    Map::new(m.c, h, w, v)
}

fn concat(a: &Map, b: &Map) -> Map {
    let mut v = a.v.clone();
    v.extend_from_slice(&b.v);
    Map::new(a.c + b.c, a.h, a.w, v)
}

/// Generator forward with parameters supplied as f64 vectors in layout
/// order; returns `ε·tanh(out)`.
pub fn unet(params: &GeneratorParams, values: &[Vec<f64>], img: &Map) -> Map {
    let mut idx = 0;
    let mut conv_layer = |x: &Map, act: bool| {
        let (k, b) = (&values[idx], &values[idx + 1]);
        let out_c = params.tensors[idx].1.shape()[0];
        idx += 2;
        let y = conv(x, k, out_c, 3, 1, 1, false, Some(b));
        if act {
            relu(y)
        } else {
            y
        }
    };
    let mut h = img.clone();
    let mut skips = Vec::new();
    for _ in 0..params.config.depth {
        h = conv_layer(&h, true);
        h = conv_layer(&h, true);
        skips.push(h.clone());
        h = pool(&h);
    }
    h = conv_layer(&h, true);
    h = conv_layer(&h, true);
    for skip in skips.iter().rev() {
        let u = conv_layer(&upsample(&h), true);
        h = conv_layer(&concat(&u, skip), true);
        h = conv_layer(&h, true);
    }
    let mut out = conv_layer(&h, false);
    let eps = params.config.epsilon as f64;
    out.v.iter_mut().for_each(|v| *v = eps * v.tanh());
    out
}

pub fn param_values(params: &GeneratorParams) -> Vec<Vec<f64>> {
    params.tensors.iter().map(|(_, t)| to64(t)).collect()
}

pub fn perturb(img: &Map, field: &Map) -> Map {
    let v = img
        .v
        .iter()
        .zip(&field.v)
        .map(|(a, b)| {
            let s = a + b;
            note(s < 0.0);
            note(s > 1.0);
            s.clamp(0.0, 1.0)
        })
        .collect();
    Map::new(img.c, img.h, img.w, v)
}

pub fn image_map(img: &nr_attack_core::image::ImageTensor) -> Map {
    Map::new(3, img.height(), img.width(), to64(img.tensor()))
}

/// Seeded image with values in `[0.1, 0.9]`, away from the clamp range.
pub fn interior_image(seed: u64, h: usize, w: usize) -> nr_attack_core::image::ImageTensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let t = nr_attack_core::Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.gen_range(0.1f32..0.9)).collect()).unwrap();
    nr_attack_core::image::ImageTensor::new(t).unwrap()
}

use nr_attack_core::gradcheck::{finite_diff_at, relative_l2_error};
use nr_attack_core::image::ImageTensor;
use nr_attack_core::metrics::{metric_grad, MetricId};
use nr_attack_core::trainer::{facpa_loss_and_grad, LossForm};

pub const FD_STEP: f64 = 1e-3;

/// f64 reference score of a built-in metric.
pub fn reference_score(id: &MetricId, img: &Map) -> f64 {
    match id {
        MetricId::SobelSharpness => sobel_sharpness(img),
        MetricId::LuminanceContrast => luminance_contrast(img),
        MetricId::FrozenCnn(seed) => frozen_cnn(&FrozenCnn::new(*seed), img),
    }
}

/// True when the central-difference stencil around `point` along `coord`
/// stays inside one smooth piece of `f`.
pub fn smooth_along(f: &dyn Fn(&[f64]) -> f64, point: &[f64], coord: usize, h: f64) -> bool {
    let (_, base) = with_signature(|| f(point));
    let mut p = point.to_vec();
    [h, -h].iter().all(|d| {
        p[coord] = point[coord] + d;
        with_signature(|| f(&p)).1 == base
    })
}

/// Relative L2 error between the tape gradient of `id` at `x` and central
/// differences (step `h`) of the reference forward, over the coordinates
/// whose stencil stays inside one smooth piece. Returns the error and the
/// number of excluded coordinates.
pub fn metric_gradient_error_at(id: &MetricId, x: &ImageTensor, h: f64) -> (f64, usize) {
    let metric = id.build();
    let tape: Vec<f64> = metric_grad(metric.as_ref(), x).unwrap().data().iter().map(|&v| v as f64).collect();
    let (rows, cols) = (x.height(), x.width());
    let base = image_map(x);
    let f = |p: &[f64]| reference_score(id, &Map::new(3, rows, cols, p.to_vec()));
    let coords: Vec<usize> = (0..base.v.len()).filter(|&i| smooth_along(&f, &base.v, i, h)).collect();
    let fd = finite_diff_at(|p| Ok(f(p)), &base.v, &coords, h).unwrap();
    let kept: Vec<f64> = coords.iter().map(|&i| tape[i]).collect();
    (relative_l2_error(&kept, &fd), base.v.len() - coords.len())
}

pub fn metric_gradient_error(id: &MetricId, x: &ImageTensor) -> f64 {
    metric_gradient_error_at(id, x, FD_STEP).0
}

/// Generator with a seeded non-zero output layer, so every parameter has a
/// live gradient.
pub fn live_generator(config: &nr_attack_core::generator::UNetConfig, seed: u64, out_scale: f32) -> GeneratorParams {
    use rand::{Rng, SeedableRng};
    let mut p = nr_attack_core::generator::init_params(config, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = p.tensors.len();
    for i in [n - 2, n - 1] {
        let t = &p.tensors[i].1;
        let data = (0..t.len()).map(|_| rng.gen_range(-out_scale..out_scale)).collect();
        p.tensors[i].1 = nr_attack_core::Tensor::new(t.shape().to_vec(), data).unwrap();
    }
    p
}

/// Tensors probed: a first-layer weight, a bottleneck bias and an
/// output-layer weight.
pub const PROBE_TENSORS: [&str; 3] = ["enc0.conv1.weight", "mid.conv1.bias", "out.weight"];

struct Composite<'a> {
    id: &'a MetricId,
    params: &'a GeneratorParams,
    values: Vec<Vec<f64>>,
    offsets: Vec<usize>,
    maps: Vec<Map>,
}

impl Composite<'_> {
    fn eval(&self, p: &[f64]) -> f64 {
        let vals: Vec<Vec<f64>> = self
            .values
            .iter()
            .zip(&self.offsets)
            .map(|(v, &o)| p[o..o + v.len()].to_vec())
            .collect();
        let total: f64 = self
            .maps
            .iter()
            .map(|x| reference_score(self.id, &perturb(x, &unet(self.params, &vals, x))))
            .sum();
        total / self.maps.len() as f64
    }
}

/// Relative L2 error of `d/dp mean_i M(perturb(x_i, f_p(x_i)))` on a
/// 3-parameter probe slice. In each probed tensor the first element (in a
/// fixed stride-7 scan) whose stencil stays in one smooth piece is used.
pub fn generator_gradient_error_at(id: &MetricId, params: &GeneratorParams, images: &[ImageTensor], step: f64) -> f64 {
    let metric = id.build();
    let batch: Vec<&ImageTensor> = images.iter().collect();
    let (_, _, grads) = facpa_loss_and_grad(params, &batch, metric.as_ref(), LossForm::NegatedScore).unwrap();

    let values = param_values(params);
    let offsets: Vec<usize> = values
        .iter()
        .scan(0, |acc, v| {
            let o = *acc;
            *acc += v.len();
            Some(o)
        })
        .collect();
    let flat: Vec<f64> = values.concat();
    let comp = Composite {
        id,
        params,
        values: values.clone(),
        offsets: offsets.clone(),
        maps: images.iter().map(image_map).collect(),
    };
    let f = |p: &[f64]| comp.eval(p);
    let probes: Vec<(usize, usize)> = PROBE_TENSORS
        .iter()
        .map(|name| {
            let t = params.tensors.iter().position(|(n, _)| n == name).unwrap();
            let len = values[t].len();
            let e = (0..len)
                .map(|k| (5 + 7 * k) % len)
                .find(|&e| smooth_along(&f, &flat, offsets[t] + e, step))
                .expect("some probe coordinate is smooth");
            (t, e)
        })
        .collect();
    // the loss is the negated objective
    let tape: Vec<f64> = probes.iter().map(|&(t, e)| -(grads[t].data()[e] as f64)).collect();
    let coords: Vec<usize> = probes.iter().map(|&(t, e)| offsets[t] + e).collect();
    let fd = finite_diff_at(|p| Ok(f(p)), &flat, &coords, step).unwrap();
    relative_l2_error(&tape, &fd)
}

pub fn generator_gradient_error(id: &MetricId, params: &GeneratorParams, images: &[ImageTensor]) -> f64 {
    generator_gradient_error_at(id, params, images, FD_STEP)
}

use nr_attack_core::attacks::{Attack, AttackKind, AttackSpec};
use nr_attack_core::generator::{PerturbationField, UNetConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator with interior weights rescaled by up to 10× either way
/// and a random output layer of magnitude up to 100, so tanh saturates on
/// many draws.
pub fn random_generator(rng: &mut ChaCha8Rng, config: &UNetConfig) -> GeneratorParams {
    use rand::distributions::Uniform;
    let layout = config.layout();
    let n = layout.len();
    let interior = 10f32.powf(rng.gen_range(-1.0..1.0));
    let out = 10f32.powf(rng.gen_range(-2.0..2.0));
    let tensors = layout
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape))| {
            let bound = if i >= n - 2 {
                out
            } else if name.ends_with(".bias") {
                0.1 * interior
            } else {
                interior * (6.0 / (shape[1] * shape[2] * shape[3]) as f32).sqrt()
            };
            let len = shape.iter().product();
            let data = (&mut *rng).sample_iter(Uniform::new(-bound, bound)).take(len).collect();
            (name, nr_attack_core::Tensor::new(shape, data).unwrap())
        })
        .collect();
    GeneratorParams {
        config: *config,
        tensors,
        metric: None,
        config_digest: None,
    }
}

/// Uniform pixels with about 10% pinned to exactly 0 or 1.
pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    let data = (0..3 * h * w)
        .map(|_| match rng.gen_range(0..20) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen::<f32>(),
        })
        .collect();
    ImageTensor::new(nr_attack_core::Tensor::new(vec![3, h, w], data).unwrap()).unwrap()
}

/// Any attack kind with random hyperparameters and artifacts.
pub fn random_attack(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Attack {
    let eps = 10.0 / 255.0;
    let kind = AttackKind::ALL[rng.gen_range(0..AttackKind::ALL.len())];
    match kind {
        AttackKind::Facpa => Attack::facpa(random_generator(rng, &UNetConfig::default())),
        AttackKind::Uap => {
            let data = (0..3 * h * w).map(|_| rng.gen_range(-eps..=eps)).collect();
            let delta = PerturbationField::new(nr_attack_core::Tensor::new(vec![3, h, w], data).unwrap(), eps).unwrap();
            Attack::uap(delta, eps)
        }
        _ => {
            let mut spec = AttackSpec::new(kind);
            spec.iters = rng.gen_range(0..6);
            spec.lr = 10f32.powf(rng.gen_range(-4.0..-0.5));
            spec.mu = rng.gen_range(0.0..2.0);
            spec.lambda_fr = if rng.gen() { 0.0 } else { 10f32.powf(rng.gen_range(-2.0..6.0)) };
            Attack::iterative(spec)
        }
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

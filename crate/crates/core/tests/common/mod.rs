#![allow(dead_code)]

use tch::{Device, Kind, Tensor};

pub const GRAD_TOL: f64 = 1e-3;

pub fn f64_tensor(values: &[f64], shape: &[i64]) -> Tensor {
    Tensor::from_slice(values).view(shape)
}

pub fn randn64(shape: &[i64], seed: i64) -> Tensor {
    tch::manual_seed(seed);
    Tensor::randn(shape, (Kind::Double, Device::Cpu))
}

/// Central finite differences of a scalar function, one element at a time.
pub fn numeric_gradient<F: Fn(&Tensor) -> f64>(f: F, x: &Tensor, h: f64) -> Vec<f64> {
    let base: Vec<f64> = Vec::try_from(x.flatten(0, -1)).unwrap();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += h;
            minus[i] -= h;
            let fp = f(&f64_tensor(&plus, &x.size()));
            let fm = f(&f64_tensor(&minus, &x.size()));
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

pub fn analytic_gradient<F: Fn(&Tensor) -> Tensor>(f: F, x: &Tensor) -> Vec<f64> {
    let x = x.detach().copy().set_requires_grad(true);
    let y = f(&x);
    y.backward();
    Vec::try_from(x.grad().flatten(0, -1)).unwrap()
}

/// Largest elementwise gap between autograd and finite differences,
/// relative to the largest finite-difference magnitude.
pub fn gradient_error<F: Fn(&Tensor) -> Tensor>(f: F, x: &Tensor) -> f64 {
    assert!(x.numel() <= 32, "gradient checks use at most 32 elements");
    let numeric = numeric_gradient(|t| f(t).double_value(&[]), x, 1e-6);
    let analytic = analytic_gradient(&f, x);
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    numeric
        .iter()
        .zip(&analytic)
        .map(|(n, a)| (n - a).abs() / scale)
        .fold(0.0, f64::max)
}

/// Per-channel mean and population std computed with two explicit passes.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let size = x.size();
    let (b, c) = (size[0], size[1]);
    let flat: Vec<f64> = Vec::try_from(x.to_kind(Kind::Double).contiguous().view([b * c, -1])
        .flatten(0, -1)).unwrap();
    let n = flat.len() / (b * c) as usize;
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for row in flat.chunks(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        means.push(mean);
        stds.push(var.sqrt());
    }
    (means, stds)
}

/// Residual with every entry at least 0.2 away from zero, so L1 terms are
/// differentiable at the test point.
pub fn offset_from(x: &Tensor, seed: i64) -> Tensor {
    let r = randn64(&x.size(), seed);
    x + r.sign() * (r.abs() * 0.3 + 0.2)
}

/// Gradient error of every loss with a closed-form gradient, keyed by the
/// loss name and the argument differentiated.
pub fn loss_gradient_errors() -> Vec<(&'static str, f64)> {
    use aguit::losses::*;
    let labels = f64_tensor(&[1., -1., 1., 1., -1., -1., 1., -1.], &[4, 2]);
    let attr = randn64(&[4, 2], 1);
    let pred = randn64(&[4, 2], 2);
    let x = randn64(&[2, 1, 4, 4], 3) * 0.5;
    let x_rec = offset_from(&x, 4);
    let c_u = randn64(&[1, 2, 2, 2], 5);
    let c_back = offset_from(&c_u, 6);
    let s_r = randn64(&[2, 5], 7);
    let s_back = offset_from(&s_r, 8);
    vec![
        ("style_classifying/attr", gradient_error(|a| style_classifying_loss(a, &labels, false).unwrap(), &attr)),
        ("style_classifying_squared/attr", gradient_error(|a| style_classifying_loss(a, &labels, true).unwrap(), &attr)),
        ("content_separating/pred", gradient_error(|p| content_separating_loss(p, &labels).unwrap(), &pred)),
        ("image_reconstruction/x_rec", gradient_error(|r| image_reconstruction_loss(&x, r).unwrap(), &x_rec)),
        ("image_reconstruction/x", gradient_error(|v| image_reconstruction_loss(v, &x_rec).unwrap(), &x)),
        ("image_classifying/pred", gradient_error(|p| image_classifying_loss(p, &labels, Side::Translator).unwrap(), &pred)),
        ("cycle_consistency/x_cyc", gradient_error(|r| cycle_consistency_loss(&x, r).unwrap(), &x_rec)),
        ("feature_consistency/c_back", gradient_error(|c| feature_consistency_loss(&c_u, &s_r, c, &s_back).unwrap().total(), &c_back)),
        ("feature_consistency/s_back", gradient_error(|s| feature_consistency_loss(&c_u, &s_r, &c_back, s).unwrap().total(), &s_back)),
        ("feature_consistency/c_u", gradient_error(|c| feature_consistency_loss(c, &s_r, &c_back, &s_back).unwrap().total(), &c_u)),
    ]
}

pub fn synthetic_corpus(n: usize, seed: u64, shapes: &[aguit::synthetic::Shape]) -> aguit::datasets::Corpus {
    let set = aguit::synthetic::SyntheticSet::generate(n, seed, shapes, 32);
    aguit::datasets::Corpus {
        names: aguit::synthetic::ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect(),
        files: (0..n).map(|i| format!("{i:05}.png")).collect(),
        images: set.images.shallow_clone(),
        labels: set.specs.iter().map(|s| Some(s.label())).collect(),
    }
}

/// Desk-scale config with a short schedule for invariant tests.
pub fn small_config(seed: u64) -> aguit::trainer::TrainingConfig {
    let mut cfg = aguit::trainer::TrainingConfig::desk();
    cfg.seed = seed;
    cfg.batch_size = 4;
    cfg.total_iterations = 4;
    cfg.checkpoint_interval = 2;
    cfg.log_interval = 1;
    cfg.labeled_fraction = 0.25;
    cfg
}

pub fn group_checksums(nets: &aguit::networks::NetworkBundle, groups: &[&str]) -> Vec<f64> {
    aguit::networks::checksum(&nets.named_parameters(groups))
}

/// Exact copies of every parameter, for bitwise comparisons.
pub fn snapshot(nets: &aguit::networks::NetworkBundle) -> Vec<(String, Tensor)> {
    nets.named_parameters(&aguit::networks::GROUPS)
        .into_iter()
        .map(|(n, t)| (n, t.detach().copy()))
        .collect()
}

pub fn bitwise_equal(a: &[(String, Tensor)], b: &[(String, Tensor)]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|((na, ta), (nb, tb))| na == nb && ta.equal(tb))
}
pub mod invariants;
pub mod loss_examples;

/// Largest deviation of AdaIN output statistics from the style parameters
/// over `trials` random inputs, measured with an independent two-pass
/// computation.
pub fn adain_statistics_error(trials: usize) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let b = rng.random_range(1..4i64);
        let c = rng.random_range(4..9i64);
        let hw = rng.random_range(4..17i64);
        tch::manual_seed(t as i64);
        let scale = rng.random_range(0.5..4.0);
        let shift = rng.random_range(-3.0..3.0);
        let x = Tensor::randn([b, c, hw, hw], (Kind::Float, Device::Cpu)) * scale + shift;
        let mean: Vec<f32> = (0..b * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let std: Vec<f32> = (0..b * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y = aguit::networks::adain(
            &x,
            &Tensor::from_slice(&mean).view([b, c]),
            &Tensor::from_slice(&std).view([b, c]),
        )
        .unwrap();
        let (m, s) = channel_stats(&y);
        for i in 0..(b * c) as usize {
            worst = worst
                .max((m[i] - mean[i] as f64).abs())
                .max((s[i] - (std[i] as f64).abs()).abs());
        }
    }
    worst
}

/// AdaIN on inputs with constant channels stays finite.
pub fn adain_constant_channels_finite() -> bool {
    [0.0, 1.0, -7.5, 1e6].iter().all(|&v| {
        let x = Tensor::full([2, 4, 5, 5], v, (Kind::Float, Device::Cpu));
        let p = Tensor::ones([2, 4], (Kind::Float, Device::Cpu)) * 2.0;
        let y = aguit::networks::adain(&x, &p, &p).unwrap();
        y.isfinite().all().int64_value(&[]) == 1
    })
}
pub mod plans;

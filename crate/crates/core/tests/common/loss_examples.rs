//! Worked loss values, each checked against an independently computed
//! expectation. Returns the names of the examples that fail.

use aguit::losses::*;
use tch::{Device, Kind, Tensor};

use super::{f64_tensor, randn64};

const TOL: f64 = 1e-12;

fn full(shape: &[i64], v: f64) -> Tensor {
    Tensor::full(shape, v, (Kind::Double, Device::Cpu))
}

fn val(t: &Tensor) -> f64 {
    t.double_value(&[])
}

fn unit_translator() -> TranslatorTerms<f64> {
    TranslatorTerms {
        cla_s: 1.0,
        adv_c: 1.0,
        pre_c: 1.0,
        rec_x: 1.0,
        adv_x: 1.0,
        pre_x_g: 1.0,
        cyc_x: 1.0,
        lat: 1.0,
    }
}

pub fn loss_example_failures() -> Vec<String> {
    let mut failures = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if got.is_nan() || (got - want).abs() > TOL * want.abs().max(1.0) {
            failures.push(format!("{name}: got {got}, expected {want}"));
        }
    };

    let labels = f64_tensor(&[1., -1., -1., 1.], &[2, 2]);
    check("style/exact", val(&style_classifying_loss(&labels, &labels, false).unwrap()), 0.0);
    let one = f64_tensor(&[1., -1.], &[1, 2]);
    check("style/zero attr", val(&style_classifying_loss(&full(&[1, 2], 0.0), &one, false).unwrap()), 2f64.sqrt());
    let attr = f64_tensor(&[0., 0., -1., 1.], &[2, 2]);
    check("style/batch mean", val(&style_classifying_loss(&attr, &labels, false).unwrap()), 2f64.sqrt() / 2.0);

    let ones = full(&[4, 1], 1.0);
    let zeros = full(&[4, 1], 0.0);
    let halves = full(&[4, 1], 0.5);
    check("content adv/perfect critic", val(&content_adversarial_loss(&ones, &zeros, Side::Critic)), 0.0);
    check("content adv/half", val(&content_adversarial_loss(&halves, &halves, Side::Critic)), 0.5);
    check("content adv/fooled", val(&content_adversarial_loss(&zeros, &ones, Side::Translator)), 0.0);

    check("separating/perfect", val(&content_separating_loss(&labels, &labels).unwrap()), 0.0);
    check("separating/zero", val(&content_separating_loss(&full(&[2, 2], 0.0), &labels).unwrap()), 1.0);
    check("separating/flipped", val(&content_separating_loss(&-&labels, &labels).unwrap()), 4.0);

    let x = randn64(&[2, 3, 4, 4], 40);
    check("rec/exact", val(&image_reconstruction_loss(&x, &x).unwrap()), 0.0);
    check("rec/offset", val(&image_reconstruction_loss(&x, &(&x + 0.1)).unwrap()), 0.1);
    let y = randn64(&[2, 3, 4, 4], 41);
    check(
        "rec/symmetric",
        val(&image_reconstruction_loss(&x, &y).unwrap()) - val(&image_reconstruction_loss(&y, &x).unwrap()),
        0.0,
    );

    let maps = |v: f64| vec![full(&[2, 1, 4, 4], v), full(&[2, 1, 2, 2], v)];
    check("image adv/perfect", val(&image_adversarial_loss(&maps(1.0), &maps(0.0), Side::Critic).unwrap()), 0.0);
    check("image adv/translator", val(&image_adversarial_loss(&[], &maps(0.0), Side::Translator).unwrap()), 1.0);
    check("image adv/half critic", val(&image_adversarial_loss(&maps(0.5), &maps(0.5), Side::Critic).unwrap()), 0.5);
    check("image adv/half translator", val(&image_adversarial_loss(&[], &maps(0.5), Side::Translator).unwrap()), 0.25);

    check("classifying/perfect", val(&image_classifying_loss(&labels, &labels, Side::Critic).unwrap()), 0.0);
    check("classifying/zero", val(&image_classifying_loss(&full(&[2, 2], 0.0), &labels, Side::Translator).unwrap()), 1.0);
    let path: Vec<f64> = (0..=10)
        .map(|i| val(&image_classifying_loss(&(&labels * (i as f64 / 10.0)), &labels, Side::Translator).unwrap()))
        .collect();
    check("classifying/monotone", path.windows(2).filter(|w| w[1] >= w[0]).count() as f64, 0.0);

    check("cycle/perfect", val(&cycle_consistency_loss(&x, &x).unwrap()), 0.0);
    check("cycle/offset", val(&cycle_consistency_loss(&x, &(&x - 0.2)).unwrap()), 0.2);
    let perm = Tensor::randperm(96, (Kind::Int64, Device::Cpu));
    let px = x.reshape([-1]).index_select(0, &perm);
    let py = y.reshape([-1]).index_select(0, &perm);
    check(
        "cycle/permutation",
        val(&cycle_consistency_loss(&px, &py).unwrap()) - val(&cycle_consistency_loss(&x.reshape([-1]), &y.reshape([-1])).unwrap()),
        0.0,
    );

    let c = randn64(&[2, 4, 2, 2], 42);
    let s = randn64(&[2, 5], 43);
    let exact = feature_consistency_loss(&c, &s, &c, &s).unwrap();
    check("feature/exact", val(&exact.total()), 0.0);
    let drift = feature_consistency_loss(&c, &s, &c, &(&s + 0.1)).unwrap();
    check("feature/style drift", val(&drift.style), 0.1);
    check("feature/content part", val(&drift.content), 0.0);
    let c2 = randn64(&[2, 4, 2, 2], 44);
    let both = feature_consistency_loss(&c, &s, &c2, &(&s - 0.3)).unwrap();
    check("feature/additive", val(&both.total()) - val(&both.content) - val(&both.style), 0.0);

    let mut pre_only = TranslatorTerms {
        cla_s: 0.0,
        adv_c: 0.0,
        pre_c: 1.0,
        rec_x: 0.0,
        adv_x: 0.0,
        pre_x_g: 0.0,
        cyc_x: 0.0,
        lat: 0.0,
    };
    let mut w = LossWeights::zero();
    w.lambda_pre_c = 1.0;
    check("translator/sign", translator_objective(&pre_only, &w), -1.0);
    pre_only.pre_c = 0.0;
    check("translator/zero components", translator_objective(&pre_only, &LossWeights::default()), 0.0);
    check("translator/defaults", translator_objective(&unit_translator(), &LossWeights::default()), 42.0);
    check("translator/zero weights", translator_objective(&unit_translator(), &LossWeights::zero()), 0.0);

    let unit_critic = CriticTerms {
        adv_c: 1.0,
        pre_c: 1.0,
        adv_x: 1.0,
        pre_x_d: 1.0,
    };
    check("critic/defaults", critic_objective(&unit_critic, &LossWeights::default()), 4.0);
    let perfect = CriticTerms {
        adv_c: 0.0,
        pre_c: 0.0,
        adv_x: 0.0,
        pre_x_d: 0.0,
    };
    check("critic/perfect", critic_objective(&perfect, &LossWeights::default()), 0.0);
    failures
}

//! Training objectives. Every adversarial term uses the least-squares form
//! and every batch reduction is an arithmetic mean.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

/// Which player a two-sided loss is evaluated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Critic,
    Translator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_cla_s: f64,
    pub lambda_adv_c: f64,
    pub lambda_pre_c: f64,
    pub lambda_rec_x: f64,
    pub lambda_adv_x: f64,
    pub lambda_pre_x_g: f64,
    pub lambda_pre_x_d: f64,
    pub lambda_cyc_x: f64,
    pub lambda_lat: f64,
    /// Use the squared L2 norm in the style classifying term.
    pub squared_style_norm: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cla_s: 10.0,
            lambda_adv_c: 1.0,
            lambda_pre_c: 1.0,
            lambda_rec_x: 10.0,
            lambda_adv_x: 1.0,
            lambda_pre_x_g: 1.0,
            lambda_pre_x_d: 1.0,
            lambda_cyc_x: 10.0,
            lambda_lat: 10.0,
            squared_style_norm: false,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_cla_s: 0.0,
            lambda_adv_c: 0.0,
            lambda_pre_c: 0.0,
            lambda_rec_x: 0.0,
            lambda_adv_x: 0.0,
            lambda_pre_x_g: 0.0,
            lambda_pre_x_d: 0.0,
            lambda_cyc_x: 0.0,
            lambda_lat: 0.0,
            squared_style_norm: false,
        }
    }

    fn values(&self) -> [(&'static str, f64); 9] {
        [
            ("lambda_cla_s", self.lambda_cla_s),
            ("lambda_adv_c", self.lambda_adv_c),
            ("lambda_pre_c", self.lambda_pre_c),
            ("lambda_rec_x", self.lambda_rec_x),
            ("lambda_adv_x", self.lambda_adv_x),
            ("lambda_pre_x_g", self.lambda_pre_x_g),
            ("lambda_pre_x_d", self.lambda_pre_x_d),
            ("lambda_cyc_x", self.lambda_cyc_x),
            ("lambda_lat", self.lambda_lat),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.values() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.size(),
            b.size()
        )));
    }
    Ok(())
}

fn mse(a: &Tensor, b: &Tensor) -> Tensor {
    (a - b).square().mean(None::<Kind>)
}

fn l1(a: &Tensor, b: &Tensor) -> Tensor {
    (a - b).abs().mean(None::<Kind>)
}

/// Mean over the batch of `||attr - label||_2` (or its square).
pub fn style_classifying_loss(attr_part: &Tensor, labels: &Tensor, squared: bool) -> Result<Tensor> {
    same_shape(attr_part, labels, "style classifying loss")?;
    let diff = attr_part - labels;
    if squared {
        return Ok(diff.square().sum_dim_intlist(1, false, None::<Kind>).mean(None::<Kind>));
    }
    // torch's norm backward is zero at a zero residual instead of NaN
    Ok(diff
        .linalg_norm(2.0, &[1i64][..], false, None::<Kind>)
        .mean(None::<Kind>))
}

/// Least-squares critic loss: real scores pulled to 1, fake scores to 0.
fn lsgan_critic(real: &Tensor, fake: &Tensor) -> Tensor {
    (real - 1.0).square().mean(None::<Kind>) + fake.square().mean(None::<Kind>)
}

fn lsgan_translator(fake: &Tensor) -> Tensor {
    (fake - 1.0).square().mean(None::<Kind>)
}

/// Content confusing loss. Unlabeled content codes play the "real" role and
/// labeled ones the "fake" role; the translator side pulls labeled codes
/// towards the unlabeled target.
pub fn content_adversarial_loss(real_scores: &Tensor, fake_scores: &Tensor, side: Side) -> Tensor {
    match side {
        Side::Critic => lsgan_critic(real_scores, fake_scores),
        Side::Translator => lsgan_translator(fake_scores),
    }
}

/// Squared error of the content predictor against `{-1, +1}` labels.
pub fn content_separating_loss(predictions: &Tensor, labels: &Tensor) -> Result<Tensor> {
    same_shape(predictions, labels, "content separating loss")?;
    Ok(mse(predictions, labels))
}

pub fn image_reconstruction_loss(x: &Tensor, x_rec: &Tensor) -> Result<Tensor> {
    same_shape(x, x_rec, "image reconstruction loss")?;
    Ok(l1(x, x_rec))
}

/// Least-squares image adversarial loss averaged over critic scales.
/// `real_scores` is ignored on the translator side.
pub fn image_adversarial_loss(real_scores: &[Tensor], fake_scores: &[Tensor], side: Side) -> Result<Tensor> {
    if fake_scores.is_empty() {
        return Err(Error::Shape("image adversarial loss needs at least one scale".into()));
    }
    let per_scale: Vec<Tensor> = match side {
        Side::Critic => {
            if real_scores.len() != fake_scores.len() {
                return Err(Error::Shape(format!(
                    "{} real score maps but {} fake score maps",
                    real_scores.len(),
                    fake_scores.len()
                )));
            }
            real_scores
                .iter()
                .zip(fake_scores)
                .map(|(r, f)| lsgan_critic(r, f))
                .collect()
        }
        Side::Translator => fake_scores.iter().map(lsgan_translator).collect(),
    };
    Ok(Tensor::stack(&per_scale, 0).mean(None::<Kind>))
}

/// Attribute classification as squared error against `{-1, +1}` targets.
/// The critic side sees real labeled images, the translator side sees
/// translations with the labels they were asked to carry; the arithmetic
/// is the same.
pub fn image_classifying_loss(predictions: &Tensor, labels: &Tensor, _side: Side) -> Result<Tensor> {
    same_shape(predictions, labels, "image classifying loss")?;
    Ok(mse(predictions, labels))
}

pub fn cycle_consistency_loss(x_u: &Tensor, x_cyc: &Tensor) -> Result<Tensor> {
    same_shape(x_u, x_cyc, "cycle consistency loss")?;
    Ok(l1(x_u, x_cyc))
}

/// The two addends of the feature consistency loss.
#[derive(Debug)]
pub struct FeatureConsistency {
    pub content: Tensor,
    pub style: Tensor,
}

impl FeatureConsistency {
    pub fn total(&self) -> Tensor {
        &self.content + &self.style
    }
}

pub fn feature_consistency_loss(
    c_u: &Tensor,
    s_r: &Tensor,
    c_back: &Tensor,
    s_back: &Tensor,
) -> Result<FeatureConsistency> {
    same_shape(c_u, c_back, "content consistency")?;
    same_shape(s_r, s_back, "style consistency")?;
    Ok(FeatureConsistency {
        content: l1(c_u, c_back),
        style: l1(s_r, s_back),
    })
}

/// Components of the translator objective. `adv_c` and `adv_x` are the
/// translator-side forms.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorTerms<T> {
    pub cla_s: T,
    pub adv_c: T,
    pub pre_c: T,
    pub rec_x: T,
    pub adv_x: T,
    pub pre_x_g: T,
    pub cyc_x: T,
    pub lat: T,
}

/// Components of the critic objective, adversarial terms in critic-side form.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticTerms<T> {
    pub adv_c: T,
    pub pre_c: T,
    pub adv_x: T,
    pub pre_x_d: T,
}

pub fn translator_objective<T>(t: &TranslatorTerms<T>, w: &LossWeights) -> T
where
    for<'a> &'a T: Mul<f64, Output = T>,
    T: Add<Output = T> + Sub<Output = T>,
{
    &t.cla_s * w.lambda_cla_s + &t.adv_c * w.lambda_adv_c - &t.pre_c * w.lambda_pre_c
        + &t.rec_x * w.lambda_rec_x
        + &t.adv_x * w.lambda_adv_x
        + &t.pre_x_g * w.lambda_pre_x_g
        + &t.cyc_x * w.lambda_cyc_x
        + &t.lat * w.lambda_lat
}

pub fn critic_objective<T>(t: &CriticTerms<T>, w: &LossWeights) -> T
where
    for<'a> &'a T: Mul<f64, Output = T>,
    T: Add<Output = T>,
{
    &t.adv_c * w.lambda_adv_c
        + &t.pre_c * w.lambda_pre_c
        + &t.adv_x * w.lambda_adv_x
        + &t.pre_x_d * w.lambda_pre_x_d
}

/// Every scalar logged for one training iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub cla_s: f64,
    pub adv_c_critic: f64,
    pub adv_c_translator: f64,
    pub pre_c_critic: f64,
    pub pre_c_translator: f64,
    pub rec_x: f64,
    pub adv_x_critic: f64,
    pub adv_x_translator: f64,
    pub pre_x_d: f64,
    pub pre_x_g: f64,
    pub cyc_x: f64,
    pub rec_c: f64,
    pub rec_s: f64,
    pub lat: f64,
    pub critic_objective: f64,
    pub translator_objective: f64,
}

impl LossReport {
    pub fn named(&self) -> [(&'static str, f64); 16] {
        [
            ("cla_s", self.cla_s),
            ("adv_c_critic", self.adv_c_critic),
            ("adv_c_translator", self.adv_c_translator),
            ("pre_c_critic", self.pre_c_critic),
            ("pre_c_translator", self.pre_c_translator),
            ("rec_x", self.rec_x),
            ("adv_x_critic", self.adv_x_critic),
            ("adv_x_translator", self.adv_x_translator),
            ("pre_x_d", self.pre_x_d),
            ("pre_x_g", self.pre_x_g),
            ("cyc_x", self.cyc_x),
            ("rec_c", self.rec_c),
            ("rec_s", self.rec_s),
            ("lat", self.lat),
            ("critic_objective", self.critic_objective),
            ("translator_objective", self.translator_objective),
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.named()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

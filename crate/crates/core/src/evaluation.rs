//! Quantitative evaluation: diversity of random translations, attribute
//! transfer accuracy measured by an independent oracle classifier, and
//! content preservation measured by foreground-mask overlap.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tch::nn::{self, Module};
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};
use crate::inference::{ManipulationPlan, StyleOp, Translator};
use crate::optim::{Adam, AdamConfig};
use crate::synthetic::{foreground_mask, mask_iou, Shape, SyntheticSet};

pub const DEFAULT_K: usize = 19;
const CHUNK: i64 = 64;

/// Distance between images. Implementations must be non-negative, symmetric
/// and zero on identical inputs.
pub trait PerceptualDistance {
    /// Per-pair distances between two `[B, C, H, W]` batches, as a `[B]` tensor.
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor>;
}

/// Patchwise distance between channel-normalised features of a fixed,
/// randomly initialised convolutional network.
#[derive(Debug)]
pub struct RandomFeatureDistance {
    layers: Vec<(Tensor, i64)>,
}

impl RandomFeatureDistance {
    pub const WIDTHS: [i64; 3] = [16, 32, 64];

    pub fn new(channels: i64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = channels;
        let layers = Self::WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let fan_in = (cin * 9) as f32;
                let scale = (2.0 / fan_in).sqrt();
                let w: Vec<f32> = (0..cout * cin * 9)
                    .map(|_| rng.sample::<f32, _>(StandardNormal) * scale)
                    .collect();
                let w = Tensor::from_slice(&w).view([cout, cin, 3, 3]);
                cin = cout;
                (w, if i == 0 { 1 } else { 2 })
            })
            .collect();
        Self { layers }
    }

    fn features(&self, x: &Tensor) -> Vec<Tensor> {
        let mut h = x.shallow_clone();
        self.layers
            .iter()
            .map(|(w, stride)| {
                h = h
                    .conv2d(w, None::<Tensor>, [*stride, *stride], [1, 1], [1, 1], 1)
                    .relu();
                let norm = h.square().sum_dim_intlist(1, true, Kind::Float).sqrt() + 1e-10;
                &h / norm
            })
            .collect()
    }
}

impl Default for RandomFeatureDistance {
    fn default() -> Self {
        Self::new(3, 0)
    }
}

impl PerceptualDistance for RandomFeatureDistance {
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.size() != b.size() || a.dim() != 4 {
            return Err(Error::Shape(format!(
                "distance needs equal [B, C, H, W] batches, got {:?} and {:?}",
                a.size(),
                b.size()
            )));
        }
        tch::no_grad(|| {
            let fa = self.features(a);
            let fb = self.features(b);
            let mut total = Tensor::zeros([a.size()[0]], (Kind::Float, Device::Cpu));
            for (x, y) in fa.iter().zip(&fb) {
                let d = (x - y)
                    .square()
                    .sum_dim_intlist(1, false, Kind::Float)
                    .mean_dim(&[1i64, 2][..], false, Kind::Float);
                total += d;
            }
            Ok(total)
        })
    }
}

/// Mean pairwise distance between `k` translations of each source under
/// `plan`, averaged over sources. Each source draws from its own RNG stream,
/// so the score does not depend on source order.
pub fn diversity_with_plan(
    translator: &Translator,
    sources: &Tensor,
    k: usize,
    plan: &ManipulationPlan,
    distance: &dyn PerceptualDistance,
    seed: u64,
) -> Result<f64> {
    if k < 2 {
        return Err(Error::Config(format!("diversity needs k >= 2 translations per source, got {k}")));
    }
    let n = sources.size()[0];
    if n == 0 {
        return Err(Error::Config("diversity needs at least one source image".into()));
    }
    let pairs: Vec<(i64, i64)> = (0..k as i64)
        .flat_map(|i| (i + 1..k as i64).map(move |j| (i, j)))
        .collect();
    let left = Tensor::from_slice(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let right = Tensor::from_slice(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let mut total = 0.0;
    for s in 0..n {
        let mut rng = source_rng(seed, s as u64);
        let copies = sources.narrow(0, s, 1).expand([k as i64, -1, -1, -1], false).contiguous();
        let outputs = translator.translate(&copies, plan, &mut rng)?;
        let d = distance.distance(&outputs.index_select(0, &left), &outputs.index_select(0, &right))?;
        total += d.mean(Kind::Double).double_value(&[]);
    }
    Ok(total / n as f64)
}

/// Diversity of all-Random translations.
pub fn diversity_score(
    translator: &Translator,
    sources: &Tensor,
    k: usize,
    distance: &dyn PerceptualDistance,
    seed: u64,
) -> Result<f64> {
    let plan = ManipulationPlan::random(translator.layout().len());
    diversity_with_plan(translator, sources, k, &plan, distance, seed)
}

fn source_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OracleConfig {
    pub train_images: usize,
    pub test_images: usize,
    pub steps: usize,
    pub batch_size: i64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            train_images: 2000,
            test_images: 1000,
            steps: 600,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 9001,
        }
    }
}

/// Attribute classifier trained on ground-truth labels, used to score
/// translator outputs. Predicts one logit per attribute.
#[derive(Debug)]
pub struct OracleClassifier {
    vs: nn::VarStore,
    net: nn::Sequential,
    nd: i64,
}

impl OracleClassifier {
    pub fn new(channels: i64, nd: i64, seed: u64) -> Self {
        tch::manual_seed(seed as i64);
        let vs = nn::VarStore::new(Device::Cpu);
        let p = vs.root();
        let conv = |name: &str, cin, cout, stride| {
            nn::conv2d(
                &p / name,
                cin,
                cout,
                3,
                nn::ConvConfig {
                    stride,
                    padding: 1,
                    ..Default::default()
                },
            )
        };
        let net = nn::seq()
            .add(conv("conv0", channels, 32, 1))
            .add_fn(|x| x.relu())
            .add(conv("conv1", 32, 64, 2))
            .add_fn(|x| x.relu())
            .add(conv("conv2", 64, 64, 2))
            .add_fn(|x| x.relu())
            .add_fn(|x| x.mean_dim(&[2i64, 3][..], false, Kind::Float))
            .add(nn::linear(&p / "head", 64, nd, Default::default()));
        Self { vs, net, nd }
    }

    /// Trains on `images` / `labels` (`{-1, +1}`) with a logistic loss.
    pub fn fit(&mut self, images: &Tensor, labels: &Tensor, cfg: &OracleConfig) -> Result<()> {
        let n = images.size()[0];
        if n == 0 || labels.size() != [n, self.nd] {
            return Err(Error::Shape(format!(
                "oracle training needs [N, {}] labels for {n} images, got {:?}",
                self.nd,
                labels.size()
            )));
        }
        let params = self
            .vs
            .variables()
            .into_iter()
            .collect::<std::collections::BTreeMap<_, _>>()
            .into_iter()
            .collect();
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: cfg.learning_rate,
                beta1: 0.9,
                ..AdamConfig::default()
            },
            params,
        );
        let targets = (labels.to_kind(Kind::Float) + 1.0) / 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.steps {
            let idx: Vec<i64> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
            let idx = Tensor::from_slice(&idx);
            let mut x = images.index_select(0, &idx);
            if rng.random_bool(0.5) {
                x = x.flip([3]);
            }
            let logits = self.net.forward(&x);
            let loss = logits.binary_cross_entropy_with_logits::<Tensor>(
                &targets.index_select(0, &idx),
                None,
                None,
                tch::Reduction::Mean,
            );
            opt.backward_step(&loss);
        }
        Ok(())
    }

    /// Trains a fresh oracle on procedurally generated shapes of every class,
    /// including the class withheld from translator training. Returns the
    /// oracle and its per-attribute accuracy on a held-out set.
    pub fn train_synthetic(size: usize, cfg: &OracleConfig) -> Result<(Self, Vec<f64>)> {
        let train = SyntheticSet::generate(cfg.train_images, cfg.seed, &Shape::ALL, size);
        let test = SyntheticSet::generate(cfg.test_images, cfg.seed ^ 0x5eed, &Shape::ALL, size);
        let mut oracle = Self::new(3, 3, cfg.seed);
        oracle.fit(&train.images, &train.labels, cfg)?;
        let acc = oracle.accuracy(&test.images, &test.labels)?;
        Ok((oracle, acc))
    }

    pub fn logits(&self, images: &Tensor) -> Tensor {
        tch::no_grad(|| {
            let n = images.size()[0];
            let parts: Vec<Tensor> = (0..n)
                .step_by(CHUNK as usize)
                .map(|start| self.net.forward(&images.narrow(0, start, CHUNK.min(n - start))))
                .collect();
            if parts.is_empty() {
                Tensor::zeros([0, self.nd], (Kind::Float, Device::Cpu))
            } else {
                Tensor::cat(&parts, 0)
            }
        })
    }

    /// Predicted labels in `{-1, +1}`, shape `[B, nd]`.
    pub fn predict(&self, images: &Tensor) -> Tensor {
        let logits = self.logits(images);
        logits.ge(0.0).to_kind(Kind::Float) * 2.0 - 1.0
    }

    /// Per-attribute fraction of sign agreement with `labels`.
    pub fn accuracy(&self, images: &Tensor, labels: &Tensor) -> Result<Vec<f64>> {
        let pred = self.predict(images);
        if pred.size() != labels.size() {
            return Err(Error::Shape(format!(
                "labels {:?} do not match predictions {:?}",
                labels.size(),
                pred.size()
            )));
        }
        agreement(&pred, &labels.to_kind(Kind::Float))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.vs.save(path)?)
    }

    pub fn load(path: &Path, channels: i64, nd: i64) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let mut oracle = Self::new(channels, nd, 0);
        oracle.vs.load(path)?;
        Ok(oracle)
    }
}

fn agreement(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let eq = a.eq_tensor(b).to_kind(Kind::Double).mean_dim(0, false, Kind::Double);
    Ok(Vec::<f64>::try_from(&eq)?)
}

fn chunked<F>(images: &Tensor, mut f: F) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let n = images.size()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        parts.push(f(&images.narrow(0, start, CHUNK.min(n - start)))?);
        start += CHUNK;
    }
    Ok(Tensor::cat(&parts, 0))
}

/// Outputs of every single-attribute `Value(±1)` edit, in the order
/// `(attribute, value)` for attribute in `0..nd`, value in `[-1, +1]`.
fn value_edits(translator: &Translator, images: &Tensor) -> Result<Vec<(usize, f32, Tensor)>> {
    let layout = translator.layout();
    let mut out = Vec::with_capacity(2 * layout.nd);
    for a in 0..layout.nd {
        for v in [-1.0f32, 1.0] {
            let dim = layout.attribute_dim(a);
            let edited = chunked(images, |x| translator.disentangled_transfer(x, dim, v))?;
            out.push((a, v, edited));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeAccuracy {
    /// Fraction of `Value(±1)` edits on attribute `i` that the oracle reads
    /// back with the requested sign.
    pub edited: Vec<f64>,
    /// Oracle accuracy on the unedited images against their own labels.
    pub calibration: Vec<f64>,
}

pub fn attribute_accuracy(
    translator: &Translator,
    images: &Tensor,
    labels: &Tensor,
    oracle: &OracleClassifier,
) -> Result<AttributeAccuracy> {
    let calibration = oracle.accuracy(images, labels)?;
    let edits = value_edits(translator, images)?;
    Ok(AttributeAccuracy {
        edited: edit_accuracy(&edits, oracle, translator.layout().nd),
        calibration,
    })
}

fn edit_accuracy(edits: &[(usize, f32, Tensor)], oracle: &OracleClassifier, nd: usize) -> Vec<f64> {
    let mut hits = vec![0.0; nd];
    let mut counts = vec![0.0; nd];
    for (a, v, out) in edits {
        let pred = oracle.predict(out).select(1, *a as i64);
        hits[*a] += pred.eq(*v as f64).to_kind(Kind::Double).sum(Kind::Double).double_value(&[]);
        counts[*a] += pred.size()[0] as f64;
    }
    hits.iter().zip(&counts).map(|(h, c)| if *c > 0.0 { h / c } else { 0.0 }).collect()
}

/// Mean foreground-mask IoU between sources and their single-attribute
/// `Value(±1)` edits.
pub fn content_preservation(translator: &Translator, images: &Tensor) -> Result<f64> {
    let edits = value_edits(translator, images)?;
    Ok(edit_iou(images, &edits))
}

fn edit_iou(images: &Tensor, edits: &[(usize, f32, Tensor)]) -> f64 {
    let source = foreground_mask(images);
    let ious: Vec<f64> = edits
        .iter()
        .flat_map(|(_, _, out)| mask_iou(&source, &foreground_mask(out)))
        .collect();
    ious.iter().sum::<f64>() / ious.len().max(1) as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub diversity_sources: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            diversity_sources: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub attribute_names: Vec<String>,
    pub diversity: f64,
    /// Diversity of all-Hold translations, the no-edit baseline.
    pub identity_diversity: f64,
    pub k: usize,
    pub diversity_sources: usize,
    pub attribute_accuracy: Vec<f64>,
    pub calibration: Vec<f64>,
    pub content_preservation: f64,
    pub images: usize,
    pub oracle_accuracy: Option<Vec<f64>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24}{:>12}{:>14}", "attribute", "accuracy", "calibration");
        for (i, name) in self.attribute_names.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<24}{:>12.4}{:>14.4}",
                name, self.attribute_accuracy[i], self.calibration[i]
            );
        }
        if let Some(acc) = &self.oracle_accuracy {
            let acc: Vec<String> = acc.iter().map(|a| format!("{a:.4}")).collect();
            let _ = writeln!(s, "oracle held-out accuracy  {}", acc.join(" "));
        }
        let _ = writeln!(s, "content preservation (IoU) {:.4}", self.content_preservation);
        let _ = writeln!(
            s,
            "diversity (k={}, {} sources) {:.4}  identity {:.4}",
            self.k, self.diversity_sources, self.diversity, self.identity_diversity
        );
        let _ = writeln!(s, "images {}", self.images);
        s
    }
}

/// Runs every metric on a labelled test set.
pub fn evaluate(
    translator: &Translator,
    images: &Tensor,
    labels: &Tensor,
    oracle: &OracleClassifier,
    distance: &dyn PerceptualDistance,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let n = images.size()[0];
    if n == 0 {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let calibration = oracle.accuracy(images, labels)?;
    let edits = value_edits(translator, images)?;
    let nd = translator.layout().nd;
    let sources = images.narrow(0, 0, (cfg.diversity_sources as i64).min(n));
    let hold = ManipulationPlan::hold(translator.layout().len());
    Ok(EvalReport {
        attribute_names: translator.attribute_names().to_vec(),
        diversity: diversity_score(translator, &sources, cfg.k, distance, cfg.seed)?,
        identity_diversity: diversity_with_plan(translator, &sources, cfg.k, &hold, distance, cfg.seed)?,
        k: cfg.k,
        diversity_sources: sources.size()[0] as usize,
        attribute_accuracy: edit_accuracy(&edits, oracle, nd),
        calibration,
        content_preservation: edit_iou(images, &edits),
        images: n as usize,
        oracle_accuracy: None,
    })
}

/// Fraction of images whose oracle prediction for `attribute` flips sign
/// after a Reverse edit on that attribute, plus sign agreement on every
/// other attribute.
pub fn reverse_flip_rate(
    translator: &Translator,
    images: &Tensor,
    attribute: usize,
    oracle: &OracleClassifier,
) -> Result<(f64, Vec<f64>)> {
    let layout = translator.layout();
    let dim = layout.attribute_dim(attribute);
    let plan = ManipulationPlan::single(layout.len(), dim, StyleOp::Reverse);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = oracle.predict(&chunked(images, |x| translator.reconstruct(x))?);
    let edited = oracle.predict(&chunked(images, |x| translator.translate(x, &plan, &mut rng))?);
    let agree = agreement(&base, &edited)?;
    let flip = 1.0 - agree[attribute];
    Ok((flip, agree))
}

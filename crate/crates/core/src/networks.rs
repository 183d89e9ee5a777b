//! Encoders, generator and critics.
//!
//! Every network lives in its own [`nn::VarStore`] so the translator set
//! (style encoder, content encoder, generator) and the critic set (content
//! critic, content predictor, image critic) never share a parameter.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tch::{nn, Device, Kind, Tensor};

use crate::error::{Error, Result};

pub const ADAIN_EPS: f64 = 1e-5;
const LRELU_SLOPE: f64 = 0.2;

/// Architecture hyper-parameters. Widths start at `base_width` and double
/// on every downsample, capped at `max_width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub image_size: i64,
    pub channels: i64,
    pub nd: i64,
    pub nz: i64,
    pub base_width: i64,
    pub max_width: i64,
    pub content_downsample: i64,
    pub style_downsample: i64,
    pub res_blocks: i64,
    pub mlp_width: i64,
    pub critic_scales: i64,
    pub critic_layers: i64,
    /// Kernel size of the generator's upsampling convolutions.
    pub up_kernel: i64,
    /// Kernel size of the full-resolution stem and output convolutions.
    pub edge_kernel: i64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            channels: 3,
            nd: 8,
            nz: 8,
            base_width: 64,
            max_width: 256,
            content_downsample: 2,
            style_downsample: 4,
            res_blocks: 4,
            mlp_width: 256,
            critic_scales: 3,
            critic_layers: 4,
            up_kernel: 5,
            edge_kernel: 7,
        }
    }
}

impl NetConfig {
    /// Reduced-width layout for 32x32 synthetic runs.
    pub fn desk(nd: i64) -> Self {
        Self {
            image_size: 32,
            nd,
            base_width: 16,
            max_width: 32,
            res_blocks: 2,
            mlp_width: 64,
            critic_scales: 2,
            critic_layers: 3,
            up_kernel: 3,
            edge_kernel: 3,
            ..Self::default()
        }
    }

    pub fn style_dim(&self) -> i64 {
        self.nz + self.nd
    }

    fn width_after(&self, downsamples: i64) -> i64 {
        (self.base_width << downsamples).min(self.max_width)
    }

    pub fn content_channels(&self) -> i64 {
        self.width_after(self.content_downsample)
    }

    pub fn content_size(&self) -> i64 {
        self.image_size >> self.content_downsample
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("nd", self.nd),
            ("base_width", self.base_width),
            ("max_width", self.max_width),
            ("mlp_width", self.mlp_width),
            ("critic_scales", self.critic_scales),
            ("critic_layers", self.critic_layers),
        ];
        for (name, k) in [("up_kernel", self.up_kernel), ("edge_kernel", self.edge_kernel)] {
            if k < 1 || k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        for (name, v) in positive {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        if self.nz < 0 || self.res_blocks < 0 || self.content_downsample < 0 {
            return Err(Error::Config("nz, res_blocks and content_downsample must be >= 0".into()));
        }
        let factor = 1i64 << self.style_downsample.max(self.content_downsample);
        if self.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a multiple of {factor}",
                self.image_size
            )));
        }
        Ok(())
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let size = x.size();
        if size.len() != 4 || size[1] != self.channels {
            return Err(Error::Shape(format!(
                "expected [B, {}, H, W] images, got {size:?}",
                self.channels
            )));
        }
        let factor = 1i64 << self.style_downsample.max(self.content_downsample);
        let (h, w) = (size[2], size[3]);
        if h < factor || w < factor || h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {h}x{w} are not a positive multiple of the downsampling factor {factor}"
            )));
        }
        Ok(())
    }
}

fn lrelu(x: &Tensor) -> Tensor {
    x.maximum(&(x * LRELU_SLOPE))
}

fn conv(p: nn::Path, cin: i64, cout: i64, k: i64, stride: i64, padding: i64) -> nn::Conv2D {
    let cfg = nn::ConvConfig {
        stride,
        padding,
        ..Default::default()
    };
    nn::conv2d(p, cin, cout, k, cfg)
}

/// Per-sample, per-channel standardisation with biased variance.
pub fn instance_norm(x: &Tensor, eps: f64) -> Tensor {
    let channels = x.size()[1];
    x.group_norm(channels, None::<Tensor>, None::<Tensor>, eps, false)
}

/// Adaptive instance normalisation: standardise every channel of `features`
/// and re-scale it with the per-sample `mean` and `std` rows (shape `[B, C]`).
pub fn adain(features: &Tensor, mean: &Tensor, std: &Tensor) -> Result<Tensor> {
    let size = features.size();
    if size.len() != 4 {
        return Err(Error::Shape(format!("adain expects [B, C, H, W], got {size:?}")));
    }
    let (b, c) = (size[0], size[1]);
    for (name, t) in [("mean", mean), ("std", std)] {
        if t.size() != [b, c] {
            return Err(Error::Shape(format!(
                "adain {name} parameters have shape {:?}, features have {c} channels (batch {b})",
                t.size()
            )));
        }
    }
    let normalized = instance_norm(features, ADAIN_EPS);
    Ok(normalized * std.view([b, c, 1, 1]) + mean.view([b, c, 1, 1]))
}

#[derive(Debug)]
struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    fn new(p: nn::Path, channels: i64) -> Self {
        Self {
            gamma: p.ones("gamma", &[channels]),
            beta: p.zeros("beta", &[channels]),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        x.group_norm(1, Some(&self.gamma), Some(&self.beta), 1e-5, false)
    }
}

#[derive(Debug)]
struct ResBlock {
    conv1: nn::Conv2D,
    conv2: nn::Conv2D,
}

impl ResBlock {
    fn new(p: nn::Path, channels: i64) -> Self {
        Self {
            conv1: conv(&p / "conv1", channels, channels, 3, 1, 1),
            conv2: conv(&p / "conv2", channels, channels, 3, 1, 1),
        }
    }

    fn forward_in(&self, x: &Tensor) -> Tensor {
        let h = instance_norm(&x.apply(&self.conv1), ADAIN_EPS).relu();
        let h = instance_norm(&h.apply(&self.conv2), ADAIN_EPS);
        x + h
    }

    fn forward_adain(&self, x: &Tensor, params: &[(Tensor, Tensor)]) -> Result<Tensor> {
        let h = adain(&x.apply(&self.conv1), &params[0].0, &params[0].1)?.relu();
        let h = adain(&h.apply(&self.conv2), &params[1].0, &params[1].1)?;
        Ok(x + h)
    }
}

/// Maps an image to a spatial content code.
#[derive(Debug)]
pub struct ContentEncoder {
    stem: nn::Conv2D,
    down: Vec<nn::Conv2D>,
    res: Vec<ResBlock>,
}

impl ContentEncoder {
    fn new(p: nn::Path, cfg: &NetConfig) -> Self {
        let stem = conv(&p / "stem", cfg.channels, cfg.base_width, cfg.edge_kernel, 1, cfg.edge_kernel / 2);
        let down = (0..cfg.content_downsample)
            .map(|i| {
                conv(
                    &p / format!("down{i}"),
                    cfg.width_after(i),
                    cfg.width_after(i + 1),
                    4,
                    2,
                    1,
                )
            })
            .collect();
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(&p / format!("res{i}"), cfg.content_channels()))
            .collect();
        Self { stem, down, res }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = instance_norm(&x.apply(&self.stem), ADAIN_EPS).relu();
        for d in &self.down {
            h = instance_norm(&h.apply(d), ADAIN_EPS).relu();
        }
        for r in &self.res {
            h = r.forward_in(&h);
        }
        h
    }
}

/// Maps an image to a flat style vector `[noise | attributes]`.
#[derive(Debug)]
pub struct StyleEncoder {
    stem: nn::Conv2D,
    down: Vec<nn::Conv2D>,
    head: nn::Linear,
}

impl StyleEncoder {
    fn new(p: nn::Path, cfg: &NetConfig) -> Self {
        let stem = conv(&p / "stem", cfg.channels, cfg.base_width, cfg.edge_kernel, 1, cfg.edge_kernel / 2);
        let down = (0..cfg.style_downsample)
            .map(|i| {
                conv(
                    &p / format!("down{i}"),
                    cfg.width_after(i),
                    cfg.width_after(i + 1),
                    4,
                    2,
                    1,
                )
            })
            .collect();
        let head = nn::linear(
            &p / "head",
            cfg.width_after(cfg.style_downsample),
            cfg.style_dim(),
            Default::default(),
        );
        Self { stem, down, head }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.apply(&self.stem).relu();
        for d in &self.down {
            h = h.apply(d).relu();
        }
        h.mean_dim(&[2i64, 3][..], false, Kind::Float).apply(&self.head)
    }
}

/// Decoder whose residual blocks are modulated by AdaIN parameters
/// predicted from the style code.
#[derive(Debug)]
pub struct Generator {
    mlp: Vec<nn::Linear>,
    res: Vec<ResBlock>,
    up: Vec<(nn::Conv2D, LayerNorm)>,
    out: nn::Conv2D,
    content_channels: i64,
}

impl Generator {
    fn new(p: nn::Path, cfg: &NetConfig) -> Self {
        let cc = cfg.content_channels();
        let n_adain = 2 * cfg.res_blocks;
        let mlp = vec![
            nn::linear(&p / "mlp0", cfg.style_dim(), cfg.mlp_width, Default::default()),
            nn::linear(&p / "mlp1", cfg.mlp_width, cfg.mlp_width, Default::default()),
            nn::linear(&p / "mlp2", cfg.mlp_width, 2 * cc * n_adain, Default::default()),
        ];
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(&p / format!("res{i}"), cc))
            .collect();
        let up = (0..cfg.content_downsample)
            .rev()
            .map(|i| {
                let cin = cfg.width_after(i + 1);
                let cout = cfg.width_after(i);
                let name = format!("up{}", cfg.content_downsample - 1 - i);
                (
                    conv(&p / name.as_str() / "conv", cin, cout, cfg.up_kernel, 1, cfg.up_kernel / 2),
                    LayerNorm::new(&p / name.as_str() / "ln", cout),
                )
            })
            .collect();
        let out = conv(&p / "out", cfg.base_width, cfg.channels, cfg.edge_kernel, 1, cfg.edge_kernel / 2);
        Self {
            mlp,
            res,
            up,
            out,
            content_channels: cc,
        }
    }

    fn adain_params(&self, style: &Tensor) -> Vec<(Tensor, Tensor)> {
        let mut h = style.apply(&self.mlp[0]).relu();
        h = h.apply(&self.mlp[1]).relu();
        let raw = h.apply(&self.mlp[2]);
        let c = self.content_channels;
        let n = raw.size()[1] / (2 * c);
        (0..n)
            .map(|i| {
                let mean = raw.narrow(1, 2 * c * i, c);
                // offset keeps the initial modulation close to identity scaling
                let std = raw.narrow(1, 2 * c * i + c, c) + 1.0;
                (mean, std)
            })
            .collect()
    }

    fn forward(&self, content: &Tensor, style: &Tensor) -> Result<Tensor> {
        let params = self.adain_params(style);
        let mut h = content.shallow_clone();
        for (i, r) in self.res.iter().enumerate() {
            h = r.forward_adain(&h, &params[2 * i..2 * i + 2])?;
        }
        for (c, ln) in &self.up {
            let size = h.size();
            h = h.upsample_nearest2d([size[2] * 2, size[3] * 2], None, None);
            h = ln.forward(&h.apply(c)).relu();
        }
        Ok(h.apply(&self.out).tanh())
    }
}

/// Patch critic on the content map.
#[derive(Debug)]
pub struct ContentCritic {
    convs: Vec<nn::Conv2D>,
    head: nn::Conv2D,
}

impl ContentCritic {
    fn new(p: nn::Path, cfg: &NetConfig) -> Self {
        let cc = cfg.content_channels();
        Self {
            convs: vec![
                conv(&p / "conv0", cc, cc, 3, 1, 1),
                conv(&p / "conv1", cc, cc, 4, 2, 1),
            ],
            head: conv(&p / "head", cc, 1, 1, 1, 0),
        }
    }

    fn forward(&self, c: &Tensor) -> Tensor {
        let mut h = c.shallow_clone();
        for layer in &self.convs {
            h = lrelu(&h.apply(layer));
        }
        h.apply(&self.head)
    }
}

/// Predicts attribute labels from the content map.
#[derive(Debug)]
pub struct ContentPredictor {
    convs: Vec<nn::Conv2D>,
    head: nn::Linear,
}

impl ContentPredictor {
    fn new(p: nn::Path, cfg: &NetConfig) -> Self {
        let cc = cfg.content_channels();
        Self {
            convs: vec![
                conv(&p / "conv0", cc, cc, 3, 1, 1),
                conv(&p / "conv1", cc, cc, 4, 2, 1),
            ],
            head: nn::linear(&p / "head", cc, cfg.nd, Default::default()),
        }
    }

    fn forward(&self, c: &Tensor) -> Tensor {
        let mut h = c.shallow_clone();
        for layer in &self.convs {
            h = lrelu(&h.apply(layer));
        }
        h.mean_dim(&[2i64, 3][..], false, Kind::Float).apply(&self.head)
    }
}

/// Output of the image critic: one realness map per scale plus attribute
/// predictions from the full-resolution trunk.
#[derive(Debug)]
pub struct ImageCritique {
    pub scores: Vec<Tensor>,
    pub labels: Tensor,
}

/// Multi-scale patch critic sharing its full-resolution trunk with the
/// attribute classifier head.
#[derive(Debug)]
pub struct ImageCritic {
    trunks: Vec<Vec<nn::Conv2D>>,
    adv_heads: Vec<nn::Conv2D>,
    cls_head: nn::Linear,
}

impl ImageCritic {
    fn new(p: nn::Path, cfg: &NetConfig) -> Self {
        let mut trunks = Vec::new();
        let mut adv_heads = Vec::new();
        let top = cfg.width_after(cfg.critic_layers - 1);
        for s in 0..cfg.critic_scales {
            let sp = &p / format!("scale{s}");
            let layers = (0..cfg.critic_layers)
                .map(|i| {
                    let cin = if i == 0 { cfg.channels } else { cfg.width_after(i - 1) };
                    conv(&sp / format!("conv{i}"), cin, cfg.width_after(i), 4, 2, 1)
                })
                .collect();
            trunks.push(layers);
            adv_heads.push(conv(&sp / "adv", top, 1, 1, 1, 0));
        }
        let cls_head = nn::linear(&p / "cls", top, cfg.nd, Default::default());
        Self {
            trunks,
            adv_heads,
            cls_head,
        }
    }

    fn forward(&self, x: &Tensor) -> ImageCritique {
        let mut scores = Vec::with_capacity(self.trunks.len());
        let mut labels = None;
        let mut input = x.shallow_clone();
        for (s, (trunk, head)) in self.trunks.iter().zip(&self.adv_heads).enumerate() {
            let mut h = input.shallow_clone();
            for layer in trunk {
                h = lrelu(&h.apply(layer));
            }
            scores.push(h.apply(head));
            if s == 0 {
                labels = Some(
                    h.mean_dim(&[2i64, 3][..], false, Kind::Float)
                        .apply(&self.cls_head),
                );
            }
            input = input.avg_pool2d([3, 3], [2, 2], [1, 1], false, false, None);
        }
        ImageCritique {
            scores,
            labels: labels.expect("at least one critic scale"),
        }
    }
}

/// Names of the parameter groups, in serialization order.
pub const GROUPS: [&str; 6] = [
    "style_encoder",
    "content_encoder",
    "generator",
    "content_critic",
    "content_predictor",
    "image_critic",
];

pub const TRANSLATOR_GROUPS: [&str; 3] = ["style_encoder", "content_encoder", "generator"];
pub const CRITIC_GROUPS: [&str; 3] = ["content_critic", "content_predictor", "image_critic"];

/// All seven parametric functions with their parameters.
pub struct NetworkBundle {
    cfg: NetConfig,
    stores: BTreeMap<&'static str, nn::VarStore>,
    style_encoder: StyleEncoder,
    content_encoder: ContentEncoder,
    generator: Generator,
    content_critic: ContentCritic,
    content_predictor: ContentPredictor,
    image_critic: ImageCritic,
}

impl std::fmt::Debug for NetworkBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NetworkBundle")
            .field("cfg", &self.cfg)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl NetworkBundle {
    /// Builds freshly initialised networks. Initialisation draws from the
    /// torch generator, which is reseeded with `seed` first.
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        tch::manual_seed(seed as i64);
        let device = Device::Cpu;
        let stores: BTreeMap<&'static str, nn::VarStore> = GROUPS
            .iter()
            .map(|g| (*g, nn::VarStore::new(device)))
            .collect();
        let style_encoder = StyleEncoder::new(stores["style_encoder"].root(), cfg);
        let content_encoder = ContentEncoder::new(stores["content_encoder"].root(), cfg);
        let generator = Generator::new(stores["generator"].root(), cfg);
        let content_critic = ContentCritic::new(stores["content_critic"].root(), cfg);
        let content_predictor = ContentPredictor::new(stores["content_predictor"].root(), cfg);
        let image_critic = ImageCritic::new(stores["image_critic"].root(), cfg);
        Ok(Self {
            cfg: cfg.clone(),
            stores,
            style_encoder,
            content_encoder,
            generator,
            content_critic,
            content_predictor,
            image_critic,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn store(&self, group: &str) -> Option<&nn::VarStore> {
        self.stores.get(group)
    }

    /// Named parameters of one group, sorted by name.
    pub fn group_parameters(&self, group: &str) -> Vec<(String, Tensor)> {
        let mut vars: Vec<_> = self
            .stores
            .get(group)
            .map(|s| s.variables().into_iter().collect())
            .unwrap_or_default();
        vars.sort_by(|a: &(String, Tensor), b| a.0.cmp(&b.0));
        vars
    }

    /// Parameters of several groups, names prefixed with `group/`.
    pub fn named_parameters(&self, groups: &[&str]) -> Vec<(String, Tensor)> {
        groups
            .iter()
            .flat_map(|g| {
                self.group_parameters(g)
                    .into_iter()
                    .map(move |(n, t)| (format!("{g}/{n}"), t))
            })
            .collect()
    }

    pub fn parameter_count(&self) -> i64 {
        self.named_parameters(&GROUPS)
            .iter()
            .map(|(_, t)| t.numel() as i64)
            .sum()
    }

    /// Copies parameter values from `(group/name, tensor)` pairs. Every
    /// parameter of the requested groups must be present with a matching shape.
    pub fn load_parameters(&self, groups: &[&str], values: &BTreeMap<String, Tensor>) -> Result<()> {
        let _guard = tch::no_grad_guard();
        for (name, mut var) in self.named_parameters(groups) {
            let src = values
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.size() != var.size() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, model shape {:?}",
                    src.size(),
                    var.size()
                )));
            }
            var.copy_(src);
        }
        Ok(())
    }

    pub fn encode_style(&self, images: &Tensor) -> Result<Tensor> {
        self.cfg.check_image(images)?;
        Ok(self.style_encoder.forward(images))
    }

    pub fn encode_content(&self, images: &Tensor) -> Result<Tensor> {
        self.cfg.check_image(images)?;
        Ok(self.content_encoder.forward(images))
    }

    pub fn generate(&self, content: &Tensor, style: &Tensor) -> Result<Tensor> {
        let cs = content.size();
        let ss = style.size();
        if cs.len() != 4 || cs[1] != self.cfg.content_channels() {
            return Err(Error::Shape(format!(
                "content code must be [B, {}, H, W], got {cs:?}",
                self.cfg.content_channels()
            )));
        }
        if ss.len() != 2 || ss[1] != self.cfg.style_dim() || ss[0] != cs[0] {
            return Err(Error::Shape(format!(
                "style code must be [{}, {}], got {ss:?}",
                cs[0],
                self.cfg.style_dim()
            )));
        }
        self.generator.forward(content, style)
    }

    fn check_content(&self, content: &Tensor) -> Result<()> {
        let cs = content.size();
        if cs.len() != 4 || cs[1] != self.cfg.content_channels() || cs[2] < 2 || cs[3] < 2 {
            return Err(Error::Shape(format!(
                "content code must be [B, {}, H>=2, W>=2], got {cs:?}",
                self.cfg.content_channels()
            )));
        }
        Ok(())
    }

    pub fn critic_content(&self, content: &Tensor) -> Result<Tensor> {
        self.check_content(content)?;
        Ok(self.content_critic.forward(content))
    }

    pub fn predict_label_from_content(&self, content: &Tensor) -> Result<Tensor> {
        self.check_content(content)?;
        Ok(self.content_predictor.forward(content))
    }

    /// Realness maps and attribute predictions in one pass over the shared trunk.
    pub fn critique_image(&self, images: &Tensor) -> Result<ImageCritique> {
        self.cfg.check_image(images)?;
        Ok(self.image_critic.forward(images))
    }

    pub fn critic_image(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.critique_image(images)?.scores)
    }

    pub fn classify_image(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.critique_image(images)?.labels)
    }

    /// Splits a `[B, nz + nd]` style batch into noise and attribute parts.
    pub fn split_style(&self, style: &Tensor) -> (Tensor, Tensor) {
        (
            style.narrow(1, 0, self.cfg.nz),
            style.narrow(1, self.cfg.nz, self.cfg.nd),
        )
    }
}

/// Style codes whose noise part is drawn i.i.d. from a standard normal and
/// whose attribute part is `labels` verbatim.
pub fn make_random_style(labels: &Tensor, nz: i64, rng: &mut impl Rng) -> Tensor {
    let b = labels.size()[0];
    let noise: Vec<f32> = (0..b * nz).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::cat(
        &[Tensor::from_slice(&noise).view([b, nz]), labels.to_kind(Kind::Float)],
        1,
    )
}

/// Sum of every parameter value of the given groups, for cheap change detection.
pub fn checksum(params: &[(String, Tensor)]) -> Vec<f64> {
    params
        .iter()
        .map(|(_, t)| t.to_kind(Kind::Double).abs().sum(Kind::Double).double_value(&[]))
        .collect()
}

//! Style-code editing and decoding over a frozen checkpoint.
//!
//! A [`ManipulationPlan`] holds one [`StyleOp`] per style dimension. Indices
//! `0..nz` address the noise part, `nz..nz + nd` the attribute part. On the
//! wire a plan is a plain list of tagged entries:
//!
//! ```json
//! [{"op": "hold"}, {"op": "reverse"}, {"op": "random"},
//!  {"op": "replace", "ref": [0.1, -1.0, ...]}, {"op": "value", "v": 1.0}]
//! ```

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::networks::{NetConfig, NetworkBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum StyleOp {
    Hold,
    Reverse,
    Random,
    /// Copies entry `i` of a full reference style code.
    Replace {
        #[serde(rename = "ref", default, skip_serializing_if = "Option::is_none")]
        reference: Option<Vec<f32>>,
    },
    Value { v: f32 },
}

/// Position of a dimension inside the style code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimKind {
    Noise,
    Attribute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StyleLayout {
    pub nz: usize,
    pub nd: usize,
}

impl StyleLayout {
    pub fn new(nz: usize, nd: usize) -> Self {
        Self { nz, nd }
    }

    pub fn of(cfg: &NetConfig) -> Self {
        Self::new(cfg.nz as usize, cfg.nd as usize)
    }

    pub fn len(&self) -> usize {
        self.nz + self.nd
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self, dim: usize) -> DimKind {
        if dim < self.nz {
            DimKind::Noise
        } else {
            DimKind::Attribute
        }
    }

    pub fn attribute_dim(&self, attribute: usize) -> usize {
        self.nz + attribute
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ManipulationPlan {
    pub ops: Vec<StyleOp>,
}

impl ManipulationPlan {
    pub fn new(ops: Vec<StyleOp>) -> Self {
        Self { ops }
    }

    pub fn hold(len: usize) -> Self {
        Self::filled(StyleOp::Hold, len)
    }

    pub fn random(len: usize) -> Self {
        Self::filled(StyleOp::Random, len)
    }

    pub fn filled(op: StyleOp, len: usize) -> Self {
        Self { ops: vec![op; len] }
    }

    /// All-Hold plan with a single entry replaced.
    pub fn single(len: usize, dim: usize, op: StyleOp) -> Self {
        let mut plan = Self::hold(len);
        if dim < len {
            plan.ops[dim] = op;
        }
        plan
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn has_random(&self) -> bool {
        self.ops.iter().any(|op| matches!(op, StyleOp::Random))
    }

    pub fn validate(&self, layout: StyleLayout) -> Result<()> {
        if self.ops.len() != layout.len() {
            return Err(Error::Plan(format!(
                "plan has {} entries, the style code has {} (nz={}, nd={})",
                self.ops.len(),
                layout.len(),
                layout.nz,
                layout.nd
            )));
        }
        for (i, op) in self.ops.iter().enumerate() {
            match op {
                StyleOp::Replace { reference: None } => {
                    return Err(Error::Plan(format!("entry {i}: replace requires a reference style code")));
                }
                StyleOp::Replace { reference: Some(r) } if r.len() != layout.len() => {
                    return Err(Error::Plan(format!(
                        "entry {i}: reference style code has {} entries, expected {}",
                        r.len(),
                        layout.len()
                    )));
                }
                StyleOp::Replace { reference: Some(r) } if !r.iter().all(|x| x.is_finite()) => {
                    return Err(Error::Plan(format!("entry {i}: reference style code is not finite")));
                }
                StyleOp::Value { v } if !v.is_finite() => {
                    return Err(Error::Plan(format!("entry {i}: value {v} is not finite")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Applies `plan` to a single style code.
pub fn apply_plan<R: Rng + ?Sized>(
    style: &[f32],
    plan: &ManipulationPlan,
    layout: StyleLayout,
    rng: &mut R,
) -> Result<Vec<f32>> {
    plan.validate(layout)?;
    if style.len() != layout.len() {
        return Err(Error::Plan(format!(
            "style code has {} entries, expected {}",
            style.len(),
            layout.len()
        )));
    }
    Ok(apply_unchecked(style, plan, layout, rng))
}

fn apply_unchecked<R: Rng + ?Sized>(
    style: &[f32],
    plan: &ManipulationPlan,
    layout: StyleLayout,
    rng: &mut R,
) -> Vec<f32> {
    style
        .iter()
        .zip(&plan.ops)
        .enumerate()
        .map(|(i, (&s, op))| match op {
            StyleOp::Hold => s,
            StyleOp::Reverse => -s,
            StyleOp::Random => match layout.kind(i) {
                DimKind::Noise => rng.sample(StandardNormal),
                DimKind::Attribute => {
                    if rng.random_bool(0.5) {
                        1.0
                    } else {
                        -1.0
                    }
                }
            },
            StyleOp::Replace { reference } => reference.as_ref().map_or(s, |r| r[i]),
            StyleOp::Value { v } => *v,
        })
        .collect()
}

/// Applies `plan` to every row of a `[B, nz + nd]` style tensor. Random
/// entries are drawn row by row.
pub fn apply_plan_batch<R: Rng + ?Sized>(
    styles: &Tensor,
    plan: &ManipulationPlan,
    layout: StyleLayout,
    rng: &mut R,
) -> Result<Tensor> {
    plan.validate(layout)?;
    let rows = style_rows(styles, layout)?;
    let edited: Vec<f32> = rows
        .iter()
        .flat_map(|row| apply_unchecked(row, plan, layout, rng))
        .collect();
    Ok(Tensor::from_slice(&edited).view([rows.len() as i64, layout.len() as i64]))
}

/// Splits a `[B, D]` tensor into rows of `f32`.
pub fn style_rows(styles: &Tensor, layout: StyleLayout) -> Result<Vec<Vec<f32>>> {
    let size = styles.size();
    if size.len() != 2 || size[1] as usize != layout.len() {
        return Err(Error::Shape(format!(
            "style codes must be [B, {}], got {size:?}",
            layout.len()
        )));
    }
    let flat = Vec::<f32>::try_from(styles.to_kind(Kind::Float).contiguous().view([-1]))?;
    Ok(flat.chunks(layout.len().max(1)).map(<[f32]>::to_vec).collect())
}

/// Encoded form of a batch of images.
#[derive(Debug)]
pub struct Encoding {
    pub style: Tensor,
    pub content: Tensor,
}

/// Inference over a loaded checkpoint. All operations run without gradient
/// tracking and take images as `[B, C, H, W]` tensors in `[-1, 1]`.
#[derive(Debug)]
pub struct Translator {
    nets: NetworkBundle,
    attribute_names: Vec<String>,
}

impl Translator {
    pub fn new(nets: NetworkBundle, attribute_names: Vec<String>) -> Result<Self> {
        let nd = nets.config().nd as usize;
        let attribute_names = if attribute_names.is_empty() {
            (0..nd).map(|i| format!("attr{i}")).collect()
        } else {
            attribute_names
        };
        if attribute_names.len() != nd {
            return Err(Error::Checkpoint(format!(
                "{} attribute names for a model with nd={nd}",
                attribute_names.len()
            )));
        }
        Ok(Self { nets, attribute_names })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, nets) = checkpoint::load_networks(dir)?;
        Self::new(nets, meta.attribute_names)
    }

    pub fn networks(&self) -> &NetworkBundle {
        &self.nets
    }

    pub fn config(&self) -> &NetConfig {
        self.nets.config()
    }

    pub fn layout(&self) -> StyleLayout {
        StyleLayout::of(self.nets.config())
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn image_size(&self) -> i64 {
        self.nets.config().image_size
    }

    pub fn encode(&self, images: &Tensor) -> Result<Encoding> {
        tch::no_grad(|| {
            Ok(Encoding {
                style: self.nets.encode_style(images)?,
                content: self.nets.encode_content(images)?,
            })
        })
    }

    pub fn decode(&self, content: &Tensor, style: &Tensor) -> Result<Tensor> {
        tch::no_grad(|| self.nets.generate(content, style))
    }

    /// Decodes the content of `images` with their own style edited by `plan`.
    pub fn translate<R: Rng + ?Sized>(&self, images: &Tensor, plan: &ManipulationPlan, rng: &mut R) -> Result<Tensor> {
        plan.validate(self.layout())?;
        let enc = self.encode(images)?;
        let style = apply_plan_batch(&enc.style, plan, self.layout(), rng)?;
        self.decode(&enc.content, &style)
    }

    pub fn reconstruct(&self, images: &Tensor) -> Result<Tensor> {
        let enc = self.encode(images)?;
        self.decode(&enc.content, &enc.style)
    }

    /// Content from `input`, style from `reference` edited by `plan`. A
    /// single reference image is shared by every input.
    pub fn translate_with_reference<R: Rng + ?Sized>(
        &self,
        input: &Tensor,
        reference: &Tensor,
        plan: &ManipulationPlan,
        rng: &mut R,
    ) -> Result<Tensor> {
        plan.validate(self.layout())?;
        let b = input.size()[0];
        let rb = reference.size()[0];
        if rb != b && rb != 1 {
            return Err(Error::Shape(format!("{rb} reference images for {b} inputs")));
        }
        let content = self.encode(input)?.content;
        let ref_style = self.encode(reference)?.style;
        let style = apply_plan_batch(&ref_style, plan, self.layout(), rng)?;
        let style = if rb == 1 { style.expand([b, -1], false).contiguous() } else { style };
        self.decode(&content, &style)
    }

    /// Sweeps one style dimension from its encoded value towards a target:
    /// the negated value for attribute dimensions, a single fresh normal draw
    /// (per image, shared across `ts`) for noise dimensions. Returns one batch
    /// per `t`.
    pub fn interpolate<R: Rng + ?Sized>(
        &self,
        images: &Tensor,
        dim: usize,
        ts: &[f32],
        rng: &mut R,
    ) -> Result<Vec<Tensor>> {
        let layout = self.layout();
        if dim >= layout.len() {
            return Err(Error::Plan(format!("dimension {dim} out of range 0..{}", layout.len())));
        }
        if let Some(t) = ts.iter().find(|t| !t.is_finite()) {
            return Err(Error::Plan(format!("interpolation step {t} is not finite")));
        }
        let enc = self.encode(images)?;
        let rows = style_rows(&enc.style, layout)?;
        let targets: Vec<f32> = rows
            .iter()
            .map(|row| match layout.kind(dim) {
                DimKind::Attribute => -row[dim],
                DimKind::Noise => rng.sample(StandardNormal),
            })
            .collect();
        ts.iter()
            .map(|&t| {
                let edited: Vec<f32> = rows
                    .iter()
                    .zip(&targets)
                    .flat_map(|(row, &target)| {
                        let mut row = row.clone();
                        row[dim] = (1.0 - t) * row[dim] + t * target;
                        row
                    })
                    .collect();
                let style = Tensor::from_slice(&edited).view([rows.len() as i64, layout.len() as i64]);
                self.decode(&enc.content, &style)
            })
            .collect()
    }

    /// Sets one style dimension to `value`, leaving everything else as
    /// encoded. Works on inputs from domains never seen in training.
    pub fn disentangled_transfer(&self, images: &Tensor, dim: usize, value: f32) -> Result<Tensor> {
        let layout = self.layout();
        if dim >= layout.len() {
            return Err(Error::Plan(format!("dimension {dim} out of range 0..{}", layout.len())));
        }
        let plan = ManipulationPlan::single(layout.len(), dim, StyleOp::Value { v: value });
        // the plan has no random entries, so the generator is never drawn from
        let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        self.translate(images, &plan, &mut unused)
    }
}

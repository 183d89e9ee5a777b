//! Procedural shapes corpus with three binary attributes: warm versus cool
//! fill hue, large versus small size, and presence of a dark inner border.
//! Hue, saturation, brightness and background tone vary continuously within
//! each class and position is jittered, so unlabeled variation is available
//! to the noise part of the style code.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

use crate::datasets::{AnnotationIndex, AttributeLabel, ANNOTATION_FILE, IMAGE_DIR};
use crate::error::{Error, Result};
use crate::imageio;

pub const ATTRIBUTE_NAMES: [&str; 3] = ["warm_hue", "large_size", "border"];
pub const MASK_DIR: &str = "masks";
pub const SHAPE_FILE: &str = "shapes.txt";

const SMALL_RADIUS: f64 = 6.5;
const LARGE_RADIUS: f64 = 8.5;
const BORDER_WIDTH: f64 = 2.0;
const POSITION_JITTER: f64 = 2.5;
const SUPERSAMPLE: usize = 4;
/// Minimum per-channel deviation from the background colour, on the
/// `[-1, 1]` scale, for a pixel to count as foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
}

impl Shape {
    pub const TRAINING: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(Shape::Circle),
            "square" => Ok(Shape::Square),
            "triangle" => Ok(Shape::Triangle),
            "diamond" => Ok(Shape::Diamond),
            other => Err(Error::Config(format!("unknown shape `{other}`"))),
        }
    }

    /// Signed distance (negative inside) for a shape whose area equals a
    /// circle of radius `r` centred at the origin. `y` points up.
    fn distance(self, x: f64, y: f64, r: f64) -> f64 {
        use std::f64::consts::PI;
        match self {
            Shape::Circle => (x * x + y * y).sqrt() - r,
            Shape::Square => {
                let half = r * PI.sqrt() / 2.0;
                x.abs().max(y.abs()) - half
            }
            Shape::Diamond => {
                let half_diag = r * (PI / 2.0).sqrt();
                (x.abs() + y.abs() - half_diag) / 2f64.sqrt()
            }
            Shape::Triangle => {
                let circum = r * (4.0 * PI / (3.0 * 3f64.sqrt())).sqrt();
                let inradius = circum / 2.0;
                // apex up, bounding box centred on the origin
                let y = y + circum / 4.0;
                let normals = [(0.0, -1.0), (3f64.sqrt() / 2.0, 0.5), (-(3f64.sqrt()) / 2.0, 0.5)];
                normals
                    .iter()
                    .map(|(nx, ny)| nx * x + ny * y)
                    .fold(f64::MIN, f64::max)
                    - inradius
            }
        }
    }
}

/// Parameters of one rendered sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub warm: bool,
    pub large: bool,
    pub border: bool,
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
    pub background: f64,
    pub cx: f64,
    pub cy: f64,
}

impl ShapeSpec {
    pub fn sample(rng: &mut impl Rng, shapes: &[Shape], size: usize) -> Self {
        let warm = rng.random_bool(0.5);
        let large = rng.random_bool(0.5);
        let border = rng.random_bool(0.5);
        let hue = if warm {
            rng.random_range(0.0..45.0)
        } else {
            rng.random_range(190.0..250.0)
        };
        let centre = size as f64 / 2.0;
        Self {
            shape: shapes[rng.random_range(0..shapes.len())],
            warm,
            large,
            border,
            hue,
            saturation: rng.random_range(0.65..1.0),
            value: rng.random_range(0.75..0.95),
            background: rng.random_range(0.88..1.0),
            cx: centre + rng.random_range(-POSITION_JITTER..POSITION_JITTER),
            cy: centre + rng.random_range(-POSITION_JITTER..POSITION_JITTER),
        }
    }

    pub fn label(&self) -> AttributeLabel {
        let s = |b: bool| if b { 1 } else { -1 };
        AttributeLabel::new(vec![s(self.warm), s(self.large), s(self.border)]).expect("valid")
    }

    fn radius(&self) -> f64 {
        if self.large {
            LARGE_RADIUS
        } else {
            SMALL_RADIUS
        }
    }

    /// Anti-aliased `[3, size, size]` image in `[-1, 1]` and its binary
    /// foreground mask.
    pub fn render(&self, size: usize) -> (Tensor, Vec<bool>) {
        let fill = hsv_to_rgb(self.hue, self.saturation, self.value);
        let dark = [0.12, 0.12, 0.14];
        let bg = [self.background; 3];
        let r = self.radius();
        let mut pixels = vec![0f32; 3 * size * size];
        let mut mask = vec![false; size * size];
        let n = SUPERSAMPLE as f64;
        for py in 0..size {
            for px in 0..size {
                let mut acc = [0f64; 3];
                let mut covered = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = px as f64 + (sx as f64 + 0.5) / n - self.cx;
                        let y = self.cy - (py as f64 + (sy as f64 + 0.5) / n);
                        let d = self.shape.distance(x, y, r);
                        let colour = if d > 0.0 {
                            bg
                        } else {
                            covered += 1;
                            if self.border && d > -BORDER_WIDTH {
                                dark
                            } else {
                                fill
                            }
                        };
                        for c in 0..3 {
                            acc[c] += colour[c];
                        }
                    }
                }
                let samples = (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for c in 0..3 {
                    pixels[c * size * size + py * size + px] = (acc[c] / samples * 2.0 - 1.0) as f32;
                }
                mask[py * size + px] = covered * 2 >= SUPERSAMPLE * SUPERSAMPLE;
            }
        }
        let t = Tensor::from_slice(&pixels).view([3, size as i64, size as i64]);
        (t, mask)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Foreground masks for a `[B, 3, H, W]` batch. The background colour of
/// each image is the per-channel median of its one-pixel frame; a pixel is
/// foreground when any channel deviates from it by more than
/// [`FOREGROUND_THRESHOLD`].
pub fn foreground_mask(images: &Tensor) -> Tensor {
    let size = images.size();
    let (b, c, h, w) = (size[0], size[1], size[2], size[3]);
    let frame = Tensor::cat(
        &[
            images.select(2, 0),
            images.select(2, h - 1),
            images.select(3, 0),
            images.select(3, w - 1),
        ],
        2,
    );
    let (background, _) = frame.median_dim(2, true);
    let deviation = (images - background.view([b, c, 1, 1])).abs();
    deviation.amax(&[1i64][..], false).gt(FOREGROUND_THRESHOLD)
}

/// Intersection over union of two boolean mask batches, per sample.
/// Two empty masks count as a perfect match.
pub fn mask_iou(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let inter = a
        .logical_and(b)
        .flatten(1, -1)
        .sum_dim_intlist(1, false, Kind::Double);
    let union = a
        .logical_or(b)
        .flatten(1, -1)
        .sum_dim_intlist(1, false, Kind::Double);
    let inter: Vec<f64> = Vec::try_from(&inter).expect("1-d");
    let union: Vec<f64> = Vec::try_from(&union).expect("1-d");
    inter
        .iter()
        .zip(&union)
        .map(|(i, u)| if *u == 0.0 { 1.0 } else { i / u })
        .collect()
}

/// An in-memory sample set with ground truth.
#[derive(Debug)]
pub struct SyntheticSet {
    pub specs: Vec<ShapeSpec>,
    pub images: Tensor,
    pub labels: Tensor,
    pub masks: Tensor,
}

impl SyntheticSet {
    pub fn generate(n: usize, seed: u64, shapes: &[Shape], size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut specs = Vec::with_capacity(n);
        let mut images = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for _ in 0..n {
            let spec = ShapeSpec::sample(&mut rng, shapes, size);
            let (img, mask) = spec.render(size);
            images.push(img);
            masks.push(Tensor::from_slice(&mask).view([size as i64, size as i64]));
            specs.push(spec);
        }
        let labels: Vec<f32> = specs.iter().flat_map(|s| s.label().as_f32()).collect();
        Self {
            labels: Tensor::from_slice(&labels).view([n as i64, 3]),
            images: Tensor::stack(&images, 0),
            masks: Tensor::stack(&masks, 0),
            specs,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

/// Writes `n` samples as a dataset root: `images/`, `masks/`,
/// `attributes.txt` and `shapes.txt`. Output is a pure function of
/// `(n, seed, shapes, size)`.
pub fn write_corpus(out: &Path, n: usize, seed: u64, shapes: &[Shape], size: usize) -> Result<AnnotationIndex> {
    if shapes.is_empty() {
        return Err(Error::Config("at least one shape class is required".into()));
    }
    let images_dir = out.join(IMAGE_DIR);
    let masks_dir = out.join(MASK_DIR);
    for d in [&images_dir, &masks_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n);
    let mut shape_lines = String::from("filename,shape\n");
    for i in 0..n {
        let spec = ShapeSpec::sample(&mut rng, shapes, size);
        let (img, mask) = spec.render(size);
        let file = format!("{i:06}.png");
        imageio::save_png(&images_dir.join(&file), &img)?;
        let mask_bytes: Vec<u8> = mask.iter().map(|m| if *m { 255 } else { 0 }).collect();
        let mask_path = masks_dir.join(&file);
        image::GrayImage::from_raw(size as u32, size as u32, mask_bytes)
            .expect("mask buffer")
            .save(&mask_path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&mask_path, io),
                other => Error::Image(other),
            })?;
        shape_lines.push_str(&format!("{file},{}\n", spec.shape.name()));
        entries.push((file, spec.label()));
    }
    let index = AnnotationIndex {
        names: ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect(),
        entries,
    };
    index.write(&out.join(ANNOTATION_FILE))?;
    let shape_path = out.join(SHAPE_FILE);
    fs::write(&shape_path, shape_lines).map_err(|e| Error::io(&shape_path, e))?;
    Ok(index)
}

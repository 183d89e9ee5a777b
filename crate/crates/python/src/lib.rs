//! Python bindings. Images cross the boundary as PNG bytes and plans as
//! their JSON wire form.

use std::path::PathBuf;

use aguit::datasets::load_annotation_table;
use aguit::evaluation::{evaluate, EvalConfig, OracleClassifier, OracleConfig, RandomFeatureDistance};
use aguit::imageio;
use aguit::inference::{self, ManipulationPlan, StyleLayout, Translator as CoreTranslator};
use aguit::service::model_info_of;
use aguit::synthetic::{self, Shape, SyntheticSet};
use aguit::trainer::{self, TrainingConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: aguit::Error) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_plan(json: &str) -> PyResult<ManipulationPlan> {
    serde_json::from_str(json).map_err(|e| PyValueError::new_err(format!("invalid plan: {e}")))
}

fn rng(seed: Option<u64>) -> ChaCha8Rng {
    match seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s),
        None => ChaCha8Rng::from_os_rng(),
    }
}

/// A trained model loaded from a checkpoint directory.
#[pyclass(unsendable, module = "aguit_py")]
pub struct Translator {
    inner: CoreTranslator,
}

impl Translator {
    fn image(&self, png: &[u8]) -> PyResult<tch::Tensor> {
        Ok(imageio::decode_png(png, self.inner.image_size()).map_err(to_py)?.unsqueeze(0))
    }

    fn png<'py>(&self, py: Python<'py>, img: &tch::Tensor) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = imageio::encode_png(img).map_err(to_py)?;
        Ok(PyBytes::new(py, &bytes))
    }
}

#[pymethods]
impl Translator {
    #[new]
    fn new(checkpoint: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreTranslator::load(&checkpoint).map_err(to_py)?,
        })
    }

    /// `{"nd", "nz", "style_dim", "attribute_names", "image_size"}`.
    fn model_info<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let info = model_info_of(&self.inner);
        let d = PyDict::new(py);
        d.set_item("nd", info.nd)?;
        d.set_item("nz", info.nz)?;
        d.set_item("style_dim", info.style_dim)?;
        d.set_item("attribute_names", info.attribute_names)?;
        d.set_item("image_size", info.image_size)?;
        Ok(d)
    }

    /// Style code of a PNG image as a list of floats.
    fn encode(&self, png: &[u8]) -> PyResult<Vec<f32>> {
        let enc = self.inner.encode(&self.image(png)?).map_err(to_py)?;
        let mut rows = inference::style_rows(&enc.style, self.inner.layout()).map_err(to_py)?;
        Ok(rows.remove(0))
    }

    #[pyo3(signature = (png, plan, seed=None, reference=None))]
    fn translate<'py>(
        &self,
        py: Python<'py>,
        png: &[u8],
        plan: &str,
        seed: Option<u64>,
        reference: Option<&[u8]>,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let plan = parse_plan(plan)?;
        let img = self.image(png)?;
        let mut r = rng(seed);
        let out = match reference {
            Some(reference) => {
                let reference = self.image(reference)?;
                self.inner.translate_with_reference(&img, &reference, &plan, &mut r)
            }
            None => self.inner.translate(&img, &plan, &mut r),
        }
        .map_err(to_py)?;
        self.png(py, &out.squeeze_dim(0))
    }

    /// Horizontal strip of frames sweeping `dim` over `t_values`.
    #[pyo3(signature = (png, dim, t_values, seed=None))]
    fn interpolate<'py>(
        &self,
        py: Python<'py>,
        png: &[u8],
        dim: usize,
        t_values: Vec<f32>,
        seed: Option<u64>,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let img = self.image(png)?;
        let frames = self
            .inner
            .interpolate(&img, dim, &t_values, &mut rng(seed))
            .map_err(to_py)?;
        let frames: Vec<tch::Tensor> = frames.iter().map(|f| f.squeeze_dim(0)).collect();
        self.png(py, &imageio::strip(&frames))
    }

    fn disentangled_transfer<'py>(
        &self,
        py: Python<'py>,
        png: &[u8],
        dim: usize,
        value: f32,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let out = self
            .inner
            .disentangled_transfer(&self.image(png)?, dim, value)
            .map_err(to_py)?;
        self.png(py, &out.squeeze_dim(0))
    }

    /// Evaluates on `n` freshly generated synthetic shapes and returns the
    /// report as a JSON string.
    #[pyo3(signature = (n=200, seed=0, k=19, diversity_sources=20))]
    fn evaluate_synthetic(&self, n: usize, seed: u64, k: usize, diversity_sources: usize) -> PyResult<String> {
        let size = self.inner.image_size() as usize;
        let (oracle, acc) = OracleClassifier::train_synthetic(size, &OracleConfig::default()).map_err(to_py)?;
        let test = SyntheticSet::generate(n, seed, &Shape::TRAINING, size);
        let cfg = EvalConfig {
            k,
            diversity_sources,
            seed,
        };
        let mut report = evaluate(
            &self.inner,
            &test.images,
            &test.labels,
            &oracle,
            &RandomFeatureDistance::default(),
            &cfg,
        )
        .map_err(to_py)?;
        report.oracle_accuracy = Some(acc);
        Ok(report.to_json())
    }
}

/// Applies a JSON plan to one style code.
#[pyfunction]
#[pyo3(signature = (style, plan, nz, nd, seed=0))]
fn apply_plan(style: Vec<f32>, plan: &str, nz: usize, nd: usize, seed: u64) -> PyResult<Vec<f32>> {
    let plan = parse_plan(plan)?;
    inference::apply_plan(&style, &plan, StyleLayout::new(nz, nd), &mut rng(Some(seed))).map_err(to_py)
}

/// Writes a synthetic shapes dataset and returns the number of images.
#[pyfunction]
#[pyo3(signature = (out_dir, n=2000, seed=7, image_size=32, shapes=None))]
fn make_synthetic_data(
    py: Python<'_>,
    out_dir: PathBuf,
    n: usize,
    seed: u64,
    image_size: usize,
    shapes: Option<Vec<String>>,
) -> PyResult<usize> {
    let shapes = match shapes {
        Some(names) => names
            .iter()
            .map(|s| Shape::parse(s))
            .collect::<aguit::Result<Vec<_>>>()
            .map_err(to_py)?,
        None => Shape::TRAINING.to_vec(),
    };
    let index = py
        .detach(|| synthetic::write_corpus(&out_dir, n, seed, &shapes, image_size))
        .map_err(to_py)?;
    Ok(index.entries.len())
}

type AnnotationRow = (String, Vec<i8>);

/// Parses an attribute table into `(names, [(filename, [labels])])`.
#[pyfunction]
fn read_annotations(path: PathBuf) -> PyResult<(Vec<String>, Vec<AnnotationRow>)> {
    let index = load_annotation_table(&path, &[]).map_err(to_py)?;
    let rows = index
        .entries
        .into_iter()
        .map(|(name, label)| (name, label.values().to_vec()))
        .collect();
    Ok((index.names, rows))
}

/// Trains a model. `preset` is `"desk"` or `"full"`; `config` is optional
/// TOML text. Returns `(final_checkpoint, iterations, smoothed_rec_x)`.
#[pyfunction]
#[pyo3(signature = (data_root, out_dir, preset="desk", config=None, iterations=None, labeled_fraction=None, seed=None))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    data_root: PathBuf,
    out_dir: PathBuf,
    preset: &str,
    config: Option<&str>,
    iterations: Option<u64>,
    labeled_fraction: Option<f64>,
    seed: Option<u64>,
) -> PyResult<(String, u64, f64)> {
    let mut cfg = match (config, preset) {
        (Some(text), _) => toml_config(text)?,
        (None, "desk") => TrainingConfig::desk(),
        (None, "full") => TrainingConfig::default(),
        (None, other) => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
    };
    if let Some(n) = iterations {
        cfg.total_iterations = n;
    }
    if let Some(f) = labeled_fraction {
        cfg.labeled_fraction = f;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let outcome = py
        .detach(|| trainer::fit(&cfg, &data_root, &out_dir, None))
        .map_err(to_py)?;
    Ok((
        outcome.final_checkpoint.display().to_string(),
        outcome.iterations,
        outcome.smoothed_rec_x,
    ))
}

fn toml_config(text: &str) -> PyResult<TrainingConfig> {
    TrainingConfig::from_toml_str(text).map_err(to_py)
}

#[pymodule]
fn aguit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Translator>()?;
    m.add_function(wrap_pyfunction!(apply_plan, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic_data, m)?)?;
    m.add_function(wrap_pyfunction!(read_annotations, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}

//! Python bindings for the wildfire crate.

use std::collections::HashMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use wildfire::cli::init_model;
use wildfire::dataset::Dataset;
use wildfire::metrics;
use wildfire::models::{Arch, Model, ModelConfig};
use wildfire::nn::{load_checkpoint, save_checkpoint};
use wildfire::raster::{self, RasterStack};
use wildfire::sampler::{self, SamplerConfig, Split, Task};
use wildfire::synth::{self, SynthConfig};
use wildfire::training::{self, TrainConfig};
use wildfire::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// One day of co-registered channels plus its fire mask.
#[pyclass(name = "Scene", module = "wildfire_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyScene(RasterStack);

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        raster::read_stack(path).map(PyScene).map_err(py_err)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        raster::write_stack(&self.0, path).map_err(py_err)
    }

    #[getter]
    fn date(&self) -> String {
        self.0.date().to_string()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    #[getter]
    fn channel_names(&self) -> Vec<String> {
        self.0.channel_names().into_iter().map(String::from).collect()
    }

    /// Row-major channel values.
    fn channel(&self, name: &str) -> PyResult<Vec<f32>> {
        self.0
            .channels()
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.plane.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("no channel {name:?}")))
    }

    /// Row-major labels: 1 fire, 0 no fire, -1 uncertain.
    #[getter]
    fn fire_mask(&self) -> Vec<i8> {
        self.0.fire_mask().data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(date={}, shape={}x{})",
            self.0.date(),
            self.0.height(),
            self.0.width()
        )
    }
}

/// Synthetic daily scenes. Returns the scenes and, per day, the row-major
/// logit the fire mask was drawn from.
#[pyfunction]
#[pyo3(signature = (height=64, width=64, days=30, seed=0, fire_bias=None))]
fn synth_scenes(
    height: usize,
    width: usize,
    days: usize,
    seed: u64,
    fire_bias: Option<f64>,
) -> PyResult<(Vec<PyScene>, Vec<Vec<f64>>)> {
    let mut cfg = SynthConfig {
        height,
        width,
        days,
        rng_seed: seed,
        ..Default::default()
    };
    if let Some(b) = fire_bias {
        cfg.fire_bias = b;
    }
    let run = synth::gen_scenes(&cfg).map_err(py_err)?;
    Ok((
        run.stacks.into_iter().map(PyScene).collect(),
        run.logits.into_iter().map(|g| g.into_data()).collect(),
    ))
}

/// Tiled samples for one task.
#[pyclass(name = "Dataset", module = "wildfire_py", frozen)]
struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (scenes, task="daily", tile_size=32, seed=0))]
    fn build(scenes: Vec<PyScene>, task: &str, tile_size: usize, seed: u64) -> PyResult<Self> {
        let stacks: Vec<RasterStack> = scenes.into_iter().map(|s| s.0).collect();
        let cfg = SamplerConfig {
            tile_size,
            rng_seed: seed,
            ..Default::default()
        };
        let samples = sampler::build_dataset(&stacks, &cfg, parse::<Task>(task)?).map_err(py_err)?;
        Ok(PyDataset(Dataset::new(samples)))
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Dataset::read(path).map(PyDataset).map_err(py_err)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        self.0.write(path).map_err(py_err)
    }

    /// Samples of one split: "train", "val" or "test".
    fn split(&self, name: &str) -> PyResult<Self> {
        let split = match name {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            _ => return Err(PyValueError::new_err(format!("unknown split {name:?}"))),
        };
        Ok(PyDataset(self.0.split(split)))
    }

    fn last_frame(&self) -> Self {
        PyDataset(self.0.last_frame())
    }

    #[getter]
    fn task(&self) -> Option<String> {
        self.0.task().map(|t| t.to_string())
    }

    #[getter]
    fn positives(&self) -> usize {
        self.0.positives()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Segmentation model producing one fire logit per pixel.
#[pyclass(name = "Model", module = "wildfire_py")]
struct PyModel(Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (arch="autoencoder", filter_scheme=vec![8, 16, 32], tile=32, seed=0))]
    fn new(arch: &str, filter_scheme: Vec<usize>, tile: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::new(parse::<Arch>(arch)?, filter_scheme, tile);
        init_model(cfg, seed).map(PyModel).map_err(py_err)
    }

    #[getter]
    fn arch(&self) -> String {
        self.0.config().arch.to_string()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(self.0.parameters(), path).map_err(py_err)
    }

    /// Replaces the weights with those stored at `path`.
    fn load(&mut self, path: &str) -> PyResult<()> {
        let params = load_checkpoint(path).map_err(py_err)?;
        self.0.set_parameters(params).map_err(py_err)
    }

    /// Fire probabilities for every pixel of every sample, sample-major.
    fn predict(&self, data: &PyDataset) -> PyResult<Vec<f64>> {
        metrics::predict_dataset(&self.0, &data.0)
            .map(|(s, _)| s)
            .map_err(py_err)
    }

    /// Trains in place, keeps the best-validation weights and returns
    /// `(epoch, train_loss, val_auc)` rows.
    #[pyo3(signature = (train, val, epochs=10, learning_rate=1e-3, batch_size=16, positive_weight=3.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        py: Python<'_>,
        train: &PyDataset,
        val: &PyDataset,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        positive_weight: f64,
        seed: u64,
    ) -> PyResult<Vec<(usize, f64, Option<f64>)>> {
        let cfg = TrainConfig {
            epochs,
            learning_rate,
            batch_size,
            positive_weight,
            rng_seed: seed,
            ..Default::default()
        };
        let model = &mut self.0;
        let report = py
            .detach(|| training::train(model, &train.0, &val.0, &cfg))
            .map_err(py_err)?;
        self.0.set_parameters(report.best_params.clone()).map_err(py_err)?;
        Ok(report
            .history
            .iter()
            .map(|r| (r.epoch, r.train_loss, r.val_auc))
            .collect())
    }

    /// AUC, precision, recall, IoU and mean IoU over the valid pixels.
    #[pyo3(signature = (data, threshold=0.5))]
    fn evaluate(&self, data: &PyDataset, threshold: f64) -> PyResult<HashMap<String, f64>> {
        let r = metrics::evaluate(&self.0, &data.0, threshold).map_err(py_err)?;
        Ok(HashMap::from([
            ("auc".into(), r.auc),
            ("precision".into(), r.precision),
            ("recall".into(), r.recall),
            ("iou".into(), r.iou),
            ("mean_iou".into(), r.mean_iou),
            ("n_valid".into(), r.n_valid as f64),
        ]))
    }
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels).map_err(py_err)
}

/// `(tp, fp, tn, fn)` with prediction `score >= threshold`.
#[pyfunction]
#[pyo3(signature = (scores, labels, threshold=0.5))]
fn confusion(scores: Vec<f64>, labels: Vec<bool>, threshold: f64) -> (u64, u64, u64, u64) {
    let c = metrics::confusion(&scores, &labels, threshold);
    (c.tp, c.fp, c.tn, c.fn_)
}

#[pymodule]
fn wildfire_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add("CHANNEL_NAMES", raster::CHANNEL_NAMES.to_vec())?;
    Ok(())
}

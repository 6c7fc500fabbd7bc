//! Python bindings: models, circuit helpers, metrics and a training loop.

use std::collections::HashMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use qinn::checkpoint::Checkpoint;
use qinn::model::{AnyModel, Classifier};
use qinn::networks::ConnectionMode;
use qinn::training::{OptimizerKind, TrainConfig};

fn err(e: qinn::error::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A quantum-inspired feedforward network with a softmax head.
#[pyclass(name = "QinnModel", module = "qinn_py")]
pub struct PyQinnModel {
    inner: qinn::networks::QinnModel,
}

#[pymethods]
impl PyQinnModel {
    #[new]
    #[pyo3(signature = (dim, depth, classes, mode = "residual", seed = 0))]
    fn new(dim: usize, depth: usize, classes: usize, mode: &str, seed: u64) -> PyResult<Self> {
        let mode: ConnectionMode = mode.parse().map_err(err)?;
        let inner = qinn::networks::QinnModel::new(dim, depth, classes, mode, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode().as_str()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.parameters()
    }

    fn set_parameters(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_parameters(&params).map_err(err)
    }

    fn logits(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.forward(&x).map_err(err)?.logits)
    }

    fn predict_proba(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.forward(&x).map_err(err)?.probabilities)
    }

    /// Cross-entropy loss and its gradient over the flat parameter vector.
    fn loss_and_gradient(&self, x: Vec<f64>, label: usize) -> PyResult<(f64, Vec<f64>)> {
        self.inner.loss_and_gradient(&x, label, &Default::default()).map_err(err)
    }

    /// Layer stack applied to an un-encoded state `O_0`.
    fn propagate(&self, state: Vec<f64>) -> PyResult<Vec<f64>> {
        let s = qinn::circuit::StateVector::new(state).map_err(err)?;
        Ok(self.inner.propagate(&s).map_err(err)?.into_inner())
    }

    fn to_json(&self) -> PyResult<String> {
        Checkpoint::from(&self.inner).to_json().map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        match Checkpoint::from_json(text).and_then(Checkpoint::into_model).map_err(err)? {
            AnyModel::Qinn(inner) => Ok(Self { inner }),
            AnyModel::Mlp(_) => Err(PyValueError::new_err("checkpoint holds an MLP, not a quantum-inspired model")),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "QinnModel(dim={}, depth={}, classes={}, mode='{}')",
            self.inner.dim(),
            self.inner.depth(),
            self.inner.classes(),
            self.inner.mode().as_str()
        )
    }
}

/// Axis order of the planar gates in one layer on `dim` amplitudes.
#[pyfunction]
fn gate_index_sequence(dim: usize) -> PyResult<Vec<usize>> {
    qinn::circuit::gate_index_sequence(dim).map_err(err)
}

/// `x / ‖x‖`.
#[pyfunction]
fn encode(x: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(qinn::networks::encode(&x).map_err(err)?.into_inner())
}

/// Accuracy, recall, precision and f1 for one class; undefined values are `None`.
#[pyfunction]
#[pyo3(signature = (tp, fp, fn_, tn))]
fn basic_metrics(tp: u64, fp: u64, fn_: u64, tn: u64) -> HashMap<&'static str, Option<f64>> {
    let m = qinn::metrics::basic_metrics(&qinn::metrics::ClassCounts { tp, fp, fn_, tn });
    HashMap::from([("accuracy", m.accuracy), ("recall", m.recall), ("precision", m.precision), ("f1", m.f1)])
}

#[pyfunction]
fn roc_area(scores: Vec<f64>, truth: Vec<bool>) -> PyResult<f64> {
    qinn::metrics::roc_area(&scores, &truth).map_err(err)
}

#[pyfunction]
fn pr_area(scores: Vec<f64>, truth: Vec<bool>) -> PyResult<f64> {
    qinn::metrics::pr_area(&scores, &truth).map_err(err)
}

/// Loads an iris CSV as `(features, labels, class_names)`.
#[pyfunction]
fn load_iris(path: &str) -> PyResult<(Vec<Vec<f64>>, Vec<usize>, Vec<String>)> {
    let ds = qinn::data::load_iris_csv(path).map_err(err)?;
    Ok((ds.features, ds.labels, ds.class_names))
}

/// Trains `model` in place on a stratified split and returns one dict per epoch.
#[pyfunction]
#[pyo3(signature = (model, features, labels, epochs = 300, learning_rate = 1e-3, batch_size = 16, optimizer = "adam", seed = 0, train_fraction = 0.75))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    model: &mut PyQinnModel,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    optimizer: &str,
    seed: u64,
    train_fraction: f64,
) -> PyResult<Vec<HashMap<&'static str, Option<f64>>>> {
    let optimizer = match optimizer {
        "adam" => OptimizerKind::Adam,
        "sgd" => OptimizerKind::Sgd,
        other => return Err(PyValueError::new_err(format!("unknown optimizer '{other}'"))),
    };
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let names = (0..classes).map(|c| c.to_string()).collect();
    let ds = qinn::data::Dataset::new(features, labels, names, "python").map_err(err)?;
    let (tr, te) = qinn::data::stratified_split(&ds, train_fraction, seed).map_err(err)?;
    let config = TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        optimizer,
        seed,
        window: (1, epochs.max(1)),
        ..TrainConfig::default()
    };
    config.validate().map_err(err)?;
    let inner = &mut model.inner;
    let run = py.detach(|| qinn::training::train(inner, &tr, &te, &config, None)).map_err(err)?;
    Ok(run
        .epochs
        .iter()
        .map(|e| {
            HashMap::from([
                ("epoch", Some(e.epoch as f64)),
                ("train_loss", Some(e.train_loss)),
                ("test_loss", Some(e.test_loss)),
                ("accuracy", Some(e.accuracy)),
                ("pr_area", e.pr_area),
                ("roc_area", e.roc_area),
            ])
        })
        .collect())
}

#[pymodule]
fn qinn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQinnModel>()?;
    m.add_function(wrap_pyfunction!(gate_index_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(basic_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(roc_area, m)?)?;
    m.add_function(wrap_pyfunction!(pr_area, m)?)?;
    m.add_function(wrap_pyfunction!(load_iris, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}

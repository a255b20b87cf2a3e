//! Python bindings: dataset generation and statistics, a few numeric
//! primitives, and the pretrain/encode/evaluate pipeline.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use strep::data::{
    compute_cv, load_container, save_adjacency, save_container, split_622, synth_generate,
    trend_seasonality_strength, Split, SynthConfig,
};
use strep::downstream::{default_grid, evaluate_checkpoint, EvalOptions};
use strep::error::Error;
use strep::rng::Rng;
use strep::tape::Tape;
use strep::tensor::Tensor;
use strep::trainer::{encode_dataset, prepare_normed, pretrain, Checkpoint, TrainConfig};

fn to_py_err(err: Error) -> PyErr {
    match &err {
        Error::Io(_) | Error::Data(_) => PyIOError::new_err(err.to_string()),
        Error::Diverged(_) => PyRuntimeError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

/// Elementwise GELU (exact erf form).
#[pyfunction]
fn gelu(values: Vec<f64>) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let n = values.len();
    let x = tape.leaf(Tensor::new(vec![n], values).expect("length matches"));
    let y = tape.gelu(x);
    tape.data(y).to_vec()
}

/// Mean Huber distance between two equal-length sequences.
#[pyfunction]
fn huber(a: Vec<f64>, b: Vec<f64>, delta: f64) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    let n = a.len();
    let mut tape = Tape::<f64>::new();
    let va = tape.leaf(Tensor::new(vec![n], a).expect("length matches"));
    let vb = tape.leaf(Tensor::new(vec![n], b).expect("length matches"));
    let loss = tape.huber_loss(va, vb, delta).map_err(to_py_err)?;
    Ok(tape.scalar(loss))
}

/// Closed-form ridge regression; returns the (features + 1) x targets weight
/// matrix with the bias in the last row.
#[pyfunction]
fn ridge_fit(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, lambda: f64) -> PyResult<Vec<Vec<f64>>> {
    let rows = x.len();
    if rows == 0 || y.len() != rows {
        return Err(PyValueError::new_err("x and y must have matching nonzero rows"));
    }
    let features = x[0].len();
    let targets = y[0].len();
    if x.iter().any(|r| r.len() != features) || y.iter().any(|r| r.len() != targets) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    let x_flat: Vec<f64> = x.into_iter().flatten().collect();
    let y_flat: Vec<f64> = y.into_iter().flatten().collect();
    let model = strep::downstream::ridge_fit(&x_flat, rows, features, &y_flat, targets, lambda, 1)
        .map_err(to_py_err)?;
    Ok(model
        .weights
        .chunks(targets)
        .map(|row| row.to_vec())
        .collect())
}

fn stats_dict(py: Python<'_>, data: &strep::data::SeriesTensor) -> PyResult<Py<PyDict>> {
    let cv = compute_cv(data).map_err(to_py_err)?;
    let strength = trend_seasonality_strength(data, data.steps_per_day).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("nodes", data.node_count)?;
    dict.set_item("steps", data.t_total)?;
    dict.set_item("features", data.feature_count)?;
    dict.set_item("steps_per_day", data.steps_per_day)?;
    dict.set_item("cv_percent", cv.cv_percent)?;
    dict.set_item("trend_strength", strength.trend)?;
    dict.set_item("seasonality_strength", strength.seasonality)?;
    Ok(dict.into())
}

/// Generate a synthetic dataset container, returning its statistics.
#[pyfunction]
#[pyo3(signature = (path, nodes=64, days=14, steps_per_day=288, graph_degree=4, diffusion_weight=0.3, noise_sigma=0.3, seed=1))]
#[allow(clippy::too_many_arguments)]
fn generate(
    py: Python<'_>,
    path: PathBuf,
    nodes: usize,
    days: usize,
    steps_per_day: usize,
    graph_degree: usize,
    diffusion_weight: f64,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let out = synth_generate(&SynthConfig {
        node_count: nodes,
        days,
        steps_per_day,
        graph_degree,
        diffusion_weight,
        noise_sigma,
        seed,
    })
    .map_err(to_py_err)?;
    save_container(&out.series, &path).map_err(to_py_err)?;
    save_adjacency(&out.adjacency, &path).map_err(to_py_err)?;
    stats_dict(py, &out.series)
}

/// Statistics of an existing container.
#[pyfunction]
fn dataset_stats(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyDict>> {
    let data = load_container(&path).map_err(to_py_err)?;
    stats_dict(py, &data)
}

fn apply_overrides(cfg: &mut TrainConfig, overrides: HashMap<String, f64>) -> PyResult<()> {
    for (key, value) in overrides {
        match key.as_str() {
            "lr" => cfg.lr = value,
            "max_epochs" => cfg.max_epochs = value as usize,
            "batch_size" => cfg.batch_size = value as usize,
            "patience" => cfg.patience = value as usize,
            "mask_ratio" => cfg.mask_ratio = value,
            "alpha" => cfg.alpha = value,
            "beta" => cfg.beta = value,
            "huber_delta" => cfg.huber_delta = value,
            "weight_decay" => cfg.weight_decay = value,
            "grad_clip" => cfg.grad_clip = value,
            "seed" => cfg.seed = value as u64,
            "input_len" => cfg.input_len = value as usize,
            "target_len" => cfg.target_len = value as usize,
            "compressed_len" => cfg.compressed_len = value as usize,
            "proxy_tokens" => cfg.proxy_tokens = value as usize,
            "dim" => cfg.dim = value as usize,
            "layers" => cfg.layers = value as usize,
            "heads" => cfg.heads = value as usize,
            "ffn_factor" => cfg.ffn_factor = value as usize,
            "conv_kernel" => cfg.conv_kernel = value as usize,
            "dropout" => cfg.dropout = value,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown training option '{other}'"
                )))
            }
        }
    }
    Ok(())
}

/// Pretrain on a container and write a checkpoint. Returns the per-epoch
/// history as a list of dicts.
#[pyfunction]
#[pyo3(signature = (data, checkpoint, **options))]
fn pretrain_model(
    py: Python<'_>,
    data: PathBuf,
    checkpoint: PathBuf,
    options: Option<HashMap<String, f64>>,
) -> PyResult<Vec<Py<PyDict>>> {
    let series = load_container(&data).map_err(to_py_err)?;
    let mut cfg = TrainConfig::default();
    if let Some(options) = options {
        apply_overrides(&mut cfg, options)?;
    }
    let (ckpt, history) = pretrain(&series, &cfg).map_err(to_py_err)?;
    ckpt.save(&checkpoint).map_err(to_py_err)?;
    history
        .iter()
        .map(|row| {
            let dict = PyDict::new(py);
            dict.set_item("epoch", row.epoch)?;
            dict.set_item("recon", row.recon)?;
            dict.set_item("pred", row.pred)?;
            dict.set_item("multiscale", row.multiscale)?;
            dict.set_item("total", row.total)?;
            dict.set_item("val_total", row.val_total)?;
            Ok(dict.into())
        })
        .collect()
}

fn load_prepared(
    ckpt: &Checkpoint,
    data_path: &Path,
) -> PyResult<(strep::data::SeriesTensor, strep::data::SplitSpec)> {
    let data = load_container(data_path).map_err(to_py_err)?;
    let splits = split_622(&data, ckpt.config.input_len + ckpt.config.target_len)
        .map_err(to_py_err)?;
    Ok((data, splits))
}

/// Encode a split into last-step representations. Returns a dict with the
/// store extents and the flat row data.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, split="test", out=None))]
fn encode(
    py: Python<'_>,
    checkpoint: PathBuf,
    data: PathBuf,
    split: &str,
    out: Option<PathBuf>,
) -> PyResult<Py<PyDict>> {
    let ckpt = Checkpoint::load(&checkpoint).map_err(to_py_err)?;
    let split = Split::parse(split).map_err(to_py_err)?;
    let (series, splits) = load_prepared(&ckpt, &data)?;
    let prep = prepare_normed(&series, splits, ckpt.norm);
    let model = ckpt.build_model().map_err(to_py_err)?;
    let store = encode_dataset(&model, &prep, split).map_err(to_py_err)?;
    if let Some(out) = out {
        store.save(&out).map_err(to_py_err)?;
    }
    let dict = PyDict::new(py);
    dict.set_item("windows", store.window_count())?;
    dict.set_item("nodes", store.node_count)?;
    dict.set_item("dim", store.dim)?;
    dict.set_item("window_ends", store.window_ends.clone())?;
    dict.set_item("rows", store.rows.clone())?;
    Ok(dict.into())
}

/// Run the downstream protocol; returns one dict per report row.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, horizons=vec![12], fraction=0.05, repeats=10, seed=1))]
fn evaluate(
    py: Python<'_>,
    checkpoint: PathBuf,
    data: PathBuf,
    horizons: Vec<usize>,
    fraction: f64,
    repeats: usize,
    seed: u64,
) -> PyResult<Vec<Py<PyDict>>> {
    let ckpt = Checkpoint::load(&checkpoint).map_err(to_py_err)?;
    let (series, splits) = load_prepared(&ckpt, &data)?;
    let prep = prepare_normed(&series, splits, ckpt.norm);
    let opts = EvalOptions {
        horizons,
        fraction,
        repeats,
        seed,
        grid: default_grid(),
    };
    let report = evaluate_checkpoint(&ckpt, &prep, &opts).map_err(to_py_err)?;
    report
        .entries
        .iter()
        .map(|e| {
            let dict = PyDict::new(py);
            dict.set_item("method", &e.method)?;
            dict.set_item("horizon", e.horizon)?;
            dict.set_item("mse", e.mse)?;
            dict.set_item("mae", e.mae)?;
            dict.set_item("lambda", e.lambda)?;
            Ok(dict.into())
        })
        .collect()
}

/// Deterministic standard-normal samples (handy for quick experiments).
#[pyfunction]
fn randn(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.normal()).collect()
}

#[pymodule]
fn strep_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gelu, m)?)?;
    m.add_function(wrap_pyfunction!(huber, m)?)?;
    m.add_function(wrap_pyfunction!(ridge_fit, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_stats, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_model, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(randn, m)?)?;
    Ok(())
}

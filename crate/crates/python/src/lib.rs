//! Python bindings: corpus synthesis, log-Mel features, metrics, training,
//! evaluation and per-file scoring. Heavy calls release the GIL.

use std::path::PathBuf;

use osscl::checkpoint::{Checkpoint, WeightSet};
use osscl::config::RunConfig;
use osscl::corpus::{scan_dataset, synth_generate, Label, MachineKey, SynthConfig};
use osscl::eval::{evaluate, write_eval_outputs, EvalOptions};
use osscl::features::StftConfig;
use osscl::training::train as train_run;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: osscl::Error) -> PyErr {
    use osscl::Error::*;
    match e {
        MissingDirectory(_) => PyFileNotFoundError::new_err(e.to_string()),
        Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            PyFileNotFoundError::new_err(e.to_string())
        }
        InvalidArgument(_) | Config(_) | UnknownMachine(_) | Shape(_) | BadFileName(_) => {
            PyValueError::new_err(e.to_string())
        }
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn weight_set(s: &str) -> PyResult<WeightSet> {
    s.parse().map_err(to_py)
}

fn labels(anomalous: Vec<bool>) -> Vec<Label> {
    anomalous
        .into_iter()
        .map(|a| if a { Label::Anomaly } else { Label::Normal })
        .collect()
}

/// Writes a synthetic corpus in the DCASE layout and returns its clip count.
#[pyfunction]
#[pyo3(signature = (out, ids=4, clips_per_id=100, seed=7, test_clips_per_id=None, clip_samples=None))]
fn synth_corpus(
    py: Python<'_>,
    out: PathBuf,
    ids: usize,
    clips_per_id: usize,
    seed: u64,
    test_clips_per_id: Option<usize>,
    clip_samples: Option<usize>,
) -> PyResult<usize> {
    let mut cfg = SynthConfig::new(ids, clips_per_id, seed);
    if let Some(n) = test_clips_per_id {
        cfg.test_clips_per_id = n;
    }
    if let Some(n) = clip_samples {
        cfg.clip_samples = n;
    }
    let manifest = py.detach(|| synth_generate(&cfg, &out)).map_err(to_py)?;
    Ok(manifest.clips.len())
}

/// `n_mels` rows of natural-log Mel power, one column per frame.
#[pyfunction]
#[pyo3(signature = (samples, n_mels=128, n_fft=1024, hop=512))]
fn log_mel(samples: Vec<f32>, n_mels: usize, n_fft: usize, hop: usize) -> PyResult<Vec<Vec<f32>>> {
    let cfg = StftConfig {
        n_mels,
        n_fft,
        hop,
        clip_samples: samples.len(),
        ..StftConfig::default()
    };
    let m = osscl::features::log_mel(&samples, &cfg).map_err(to_py)?;
    Ok(m.rows().into_iter().map(|r| r.to_vec()).collect())
}

/// ROC AUC; `anomalous[i]` marks the positive class.
#[pyfunction]
fn auc(scores: Vec<f64>, anomalous: Vec<bool>) -> PyResult<f64> {
    osscl::eval::auc(&scores, &labels(anomalous)).map_err(to_py)
}

/// McClish-standardized partial AUC over FPR in [0, p].
#[pyfunction]
#[pyo3(signature = (scores, anomalous, p=0.1))]
fn pauc(scores: Vec<f64>, anomalous: Vec<bool>, p: f64) -> PyResult<f64> {
    osscl::eval::pauc(&scores, &labels(anomalous), p).map_err(to_py)
}

/// Trains on `data_root` and returns the checkpoint path. `config` is a JSON
/// file; omitted keys take the reference Log-Mel settings.
#[pyfunction]
#[pyo3(signature = (data_root, out, config=None, seed=None))]
fn train(py: Python<'_>, data_root: PathBuf, out: PathBuf, config: Option<PathBuf>, seed: Option<u64>) -> PyResult<String> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p).map_err(to_py)?,
        None => RunConfig::default(),
    };
    if seed.is_some() {
        cfg.train.seed = seed;
    }
    cfg.validate().map_err(to_py)?;
    let path = py
        .detach(|| {
            let manifest = scan_dataset(&data_root)?;
            std::fs::create_dir_all(&out).map_err(|e| osscl::Error::Io {
                context: format!("creating {}", out.display()),
                source: e,
            })?;
            cfg.paths.data_root = Some(data_root.clone());
            cfg.paths.out = Some(out.clone());
            cfg.save(&out.join(osscl::config::EFFECTIVE_CONFIG_FILE))?;
            let model = cfg.model_config(manifest.num_classes());
            train_run(&manifest, &model, &cfg.contrastive, &cfg.train, &out)
        })
        .map_err(to_py)?;
    Ok(path.to_string_lossy().into_owned())
}

/// Scores the test split, writes the report files under `out` and returns the
/// report as a JSON string.
#[pyfunction]
#[pyo3(signature = (checkpoint, data_root, out, weights="ema", p=0.1))]
fn evaluate_run(py: Python<'_>, checkpoint: PathBuf, data_root: PathBuf, out: PathBuf, weights: &str, p: f64) -> PyResult<String> {
    let opts = EvalOptions {
        weights: weight_set(weights)?,
        p,
        ..EvalOptions::default()
    };
    py.detach(|| {
        let ckpt = Checkpoint::load(&checkpoint)?;
        let manifest = scan_dataset(&data_root)?;
        let (scored, report) = evaluate(&ckpt, &manifest, &opts)?;
        write_eval_outputs(&scored, &report, &out)?;
        Ok(serde_json::to_string(&report)?)
    })
    .map_err(to_py)
}

/// A loaded checkpoint ready to score individual WAV files.
#[pyclass(name = "Scorer")]
struct PyScorer {
    inner: osscl::eval::Scorer,
}

#[pymethods]
impl PyScorer {
    #[new]
    #[pyo3(signature = (checkpoint, weights="ema"))]
    fn new(checkpoint: PathBuf, weights: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&checkpoint).map_err(to_py)?;
        let inner = osscl::eval::Scorer::new(&ckpt, weight_set(weights)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Machines the checkpoint was trained on, as `type/id` strings.
    #[getter]
    fn machines(&self) -> Vec<String> {
        self.inner.class_map().keys().iter().map(ToString::to_string).collect()
    }

    /// Anomaly score of `wav` claimed to come from machine `id`, e.g. `"fan/1"`.
    fn score(&self, py: Python<'_>, wav: PathBuf, id: &str) -> PyResult<f64> {
        let key: MachineKey = id.parse().map_err(to_py)?;
        py.detach(|| self.inner.score_file(&wav, &key)).map_err(to_py)
    }
}

#[pymodule]
#[pyo3(name = "osscl")]
pub fn osscl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(pauc, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_run, m)?)?;
    m.add_class::<PyScorer>()?;
    Ok(())
}

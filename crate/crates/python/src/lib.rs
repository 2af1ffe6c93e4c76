//! Python bindings for promptrec.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use promptrec::checkpoint::Checkpoint as CoreCheckpoint;
use promptrec::config::ExperimentConfig;
use promptrec::data::{Dataset as CoreDataset, Splits};
use promptrec::eval::{self, MetricsReport};
use promptrec::model::UserFeatures;
use promptrec::params::Group;

create_exception!(promptrec, PromptrecError, PyException);

fn err(e: promptrec::Error) -> PyErr {
    PromptrecError::new_err((e.to_string(), e.exit_code()))
}

/// Flat key/value experiment configuration.
#[pyclass(name = "Config")]
struct Config {
    inner: ExperimentConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (path=None, overrides=None))]
    fn new(path: Option<PathBuf>, overrides: Option<BTreeMap<String, String>>) -> PyResult<Self> {
        let mut inner = ExperimentConfig::default();
        if let Some(p) = path {
            inner.apply_file(&p).map_err(err)?;
        }
        for (k, v) in overrides.unwrap_or_default() {
            inner.set(&k, &v).map_err(err)?;
        }
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        if !ExperimentConfig::is_key(key) {
            return Err(PromptrecError::new_err((format!("unknown config key {key:?}"), 2)));
        }
        Ok(self.inner.get(key).to_string())
    }

    fn to_dict(&self) -> BTreeMap<String, String> {
        self.inner.as_map().clone()
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={})", self.inner.get("seed"))
    }
}

/// An interaction log with its profile table.
#[pyclass(name = "Dataset")]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (interactions, profiles=None))]
    fn load(interactions: PathBuf, profiles: Option<PathBuf>) -> PyResult<Self> {
        let inner = CoreDataset::load(&interactions, profiles.as_deref()).map_err(err)?;
        Ok(Self { inner })
    }

    /// Generates the synthetic dataset described by `config`.
    #[staticmethod]
    fn synthetic(config: &Config) -> PyResult<Self> {
        let cfg = config.inner.synthetic().map_err(err)?;
        let inner = promptrec::data::generate_synthetic(&cfg)
            .and_then(|s| s.to_dataset())
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.log.num_users()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items()
    }

    #[getter]
    fn num_attrs(&self) -> usize {
        self.inner.profiles.num_attrs()
    }

    /// Item ids of a user's time-ordered clicks.
    fn sequence(&self, user: usize) -> PyResult<Vec<String>> {
        if user >= self.inner.log.num_users() {
            return Err(PromptrecError::new_err((format!("no user {user}"), 1)));
        }
        Ok(self.inner.sequence(user).iter().map(|&i| self.inner.log.item_ids[i].clone()).collect())
    }

    /// `(warm, cold_train, cold_test)` user indices.
    fn splits(&self, config: &Config) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let s = splits(&config.inner, &self.inner)?;
        Ok((s.warm, s.cold_train, s.cold_test))
    }
}

fn splits(cfg: &ExperimentConfig, data: &CoreDataset) -> PyResult<Splits> {
    let threshold = cfg.parse("threshold").map_err(err)?;
    let ratio = cfg.parse("train_ratio").map_err(err)?;
    Splits::new(&data.log, threshold, ratio, cfg.seed().map_err(err)?).map_err(err)
}

/// A trained model with its vocabularies and metadata.
#[pyclass(name = "Checkpoint")]
struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreCheckpoint::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn meta(&self) -> BTreeMap<String, String> {
        self.inner.meta.clone()
    }

    #[getter]
    fn model_dim(&self) -> usize {
        self.inner.model.config.encoder.model_dim
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.model.config.num_items
    }

    #[getter]
    fn has_prompt(&self) -> bool {
        self.inner.model.config.prompt.is_some()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.model.counts().total
    }

    fn backbone_digest(&self) -> String {
        self.inner.model.params.group_digest(Group::Backbone)
    }

    /// Scores of every item for a user given their clicks (item ids) and,
    /// for prompted models, their profile row from `dataset`.
    #[pyo3(signature = (items, dataset=None, user=None))]
    fn score_items(&self, items: Vec<String>, dataset: Option<&Dataset>, user: Option<usize>) -> PyResult<Vec<f64>> {
        let index: BTreeMap<&str, usize> = self.inner.item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let seq = items
            .iter()
            .map(|s| {
                index
                    .get(s.as_str())
                    .copied()
                    .ok_or_else(|| PromptrecError::new_err((format!("unknown item {s:?}"), 4)))
            })
            .collect::<PyResult<Vec<usize>>>()?;
        let features = match (self.has_prompt(), dataset, user) {
            (false, _, _) => None,
            (true, Some(d), Some(u)) if u < d.inner.log.num_users() => Some(UserFeatures::Profile(d.inner.profiles.user(u))),
            (true, _, _) => {
                return Err(PromptrecError::new_err(("prompted models need dataset and user".to_string(), 2)));
            }
        };
        let vecs = eval::user_vectors(&self.inner.model, &seq, &[seq.len()], features).map_err(err)?;
        let d = self.model_dim();
        let table = self
            .inner
            .model
            .params
            .get(promptrec::encoder::ITEM_EMB)
            .map_err(err)?
            .data();
        Ok(match &vecs[0] {
            Some(u) => table.chunks(d).map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum()).collect(),
            None => vec![0.0; self.num_items()],
        })
    }
}

fn metrics_dict(r: &MetricsReport) -> BTreeMap<String, f64> {
    let mut m: BTreeMap<String, f64> = r.entries().into_iter().collect();
    m.insert("cases".into(), r.cases as f64);
    m
}

/// Pre-trains a backbone on the warm users of `dataset`.
#[pyfunction]
fn pretrain(config: &Config, dataset: &Dataset) -> PyResult<(Checkpoint, String)> {
    let data = &dataset.inner;
    let s = splits(&config.inner, data)?;
    let cfg = config.inner.pretrain().map_err(err)?;
    let (model, report) = promptrec::pretrain::pretrain(data, &s.warm, &cfg).map_err(err)?;
    let mut ck = CoreCheckpoint::new(model, data.log.item_ids.clone(), data.profiles.attr_values.clone());
    ck.meta.insert("stage".into(), "pretrain".into());
    let json = serde_json::to_string(&report).expect("report serializes");
    Ok((Checkpoint { inner: ck }, json))
}

/// Tunes a pre-trained checkpoint on the cold-train users.
#[pyfunction]
fn tune(config: &Config, checkpoint: &Checkpoint, dataset: &Dataset) -> PyResult<(Checkpoint, String)> {
    let data = &dataset.inner;
    checkpoint.inner.check_vocabulary(&data.log.item_ids, None).map_err(err)?;
    let s = splits(&config.inner, data)?;
    let seqs = match config.inner.k_shot().map_err(err)? {
        Some(k) => promptrec::data::crop_for_kshot(&data.log.sequences, k).map_err(err)?,
        None => data.log.sequences.clone(),
    };
    let cfg = config.inner.tune().map_err(err)?;
    let (model, report) = promptrec::tuning::tune(&checkpoint.inner.model, data, &seqs, &s.cold_train, &cfg).map_err(err)?;
    let mut ck = CoreCheckpoint::new(model, data.log.item_ids.clone(), data.profiles.attr_values.clone());
    ck.meta.insert("stage".into(), "tune".into());
    ck.meta.insert("mode".into(), report.mode.clone());
    let json = serde_json::to_string(&report).expect("report serializes");
    Ok((Checkpoint { inner: ck }, json))
}

/// Ranking metrics of `checkpoint` on the cold-test users.
#[pyfunction]
#[pyo3(signature = (config, checkpoint, dataset, split=None))]
fn evaluate(config: &Config, checkpoint: &Checkpoint, dataset: &Dataset, split: Option<&str>) -> PyResult<BTreeMap<String, f64>> {
    let data = &dataset.inner;
    checkpoint.inner.check_vocabulary(&data.log.item_ids, None).map_err(err)?;
    let s = splits(&config.inner, data)?;
    let split = match split {
        Some(x) => eval::Split::parse(x).map_err(err)?,
        None => config.inner.split().map_err(err)?,
    };
    let seqs = match config.inner.k_shot().map_err(err)? {
        Some(k) => promptrec::data::crop_for_kshot(&data.log.sequences, k).map_err(err)?,
        None => data.log.sequences.clone(),
    };
    let prompted = checkpoint.has_prompt();
    let features = |u: usize| prompted.then(|| UserFeatures::Profile(data.profiles.user(u)));
    let seed = config.inner.seed().map_err(err)?;
    let r = eval::evaluate(&checkpoint.inner.model, &seqs, &s.cold_test, split, &features, seed).map_err(err)?;
    Ok(metrics_dict(&r))
}

/// Runs a command-line invocation in-process and returns its report text.
#[pyfunction]
fn run(args: Vec<String>) -> PyResult<String> {
    promptrec::cli::run(args).map_err(err)
}

#[pyfunction]
fn case_auc(truth: f64, negatives: Vec<f64>) -> f64 {
    eval::case_auc(truth, &negatives)
}

#[pyfunction]
fn f1_score(precision: f64, recall: f64) -> f64 {
    eval::f1_score(precision, recall)
}

#[pymodule]
pub fn promptrec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PromptrecError", m.py().get_type::<PromptrecError>())?;
    m.add("BUILD_ID", promptrec::cli::BUILD_ID)?;
    m.add_class::<Config>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(tune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(case_auc, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    Ok(())
}

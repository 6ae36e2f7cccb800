//! Bottleneck adapters inserted into a frozen model, single-layer
//! fine-tuning and heuristic steering-layer selection.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{read_container, write_container, Header, TensorEntry};
use crate::model::{
    class_logits, forward, loss, new_adapter, train_lm, train_on_examples, Adapter, Capture, ClassHead,
    ModelConfig, ModelWeights, Objective, ParamGroup, TrainHyper, TrainLog,
};
use crate::numkit::{argmax, derive_seed, named_seed, Matrix};

pub const ADAPTER_KIND: &str = "adapters";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub bottleneck: usize,
    #[serde(default)]
    pub seed: u64,
}

impl AdapterConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.bottleneck == 0 || self.bottleneck >= d_model {
            return Err(Error::InvalidArgument(format!(
                "adapter bottleneck {} must satisfy 1 <= r < d_model = {d_model}",
                self.bottleneck
            )));
        }
        Ok(())
    }
}

/// Add a zero-output adapter to layer `layer`.
pub fn insert_adapter(w: &ModelWeights, layer: usize, cfg: &AdapterConfig) -> Result<ModelWeights> {
    w.check_layer(layer)?;
    cfg.validate(w.config.d_model)?;
    if w.layer(layer).adapter.is_some() {
        return Err(Error::AdapterExists(layer));
    }
    let mut out = w.clone();
    out.layer_mut(layer).adapter = Some(new_adapter(
        w.config.d_model,
        cfg.bottleneck,
        derive_seed(cfg.seed, &[layer as u64]),
    ));
    Ok(out)
}

/// Which layers receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Where {
    Single(usize),
    Last,
    All,
}

impl Where {
    pub fn layers(self, n_layers: usize) -> Result<Vec<usize>> {
        match self {
            Where::Single(l) if l == 0 || l > n_layers => Err(Error::LayerOutOfRange { layer: l, n_layers }),
            Where::Single(l) => Ok(vec![l]),
            Where::Last => Ok(vec![n_layers]),
            Where::All => Ok((1..=n_layers).collect()),
        }
    }
}

/// Insert adapters at every layer named by `where_`.
pub fn prepare(w: &ModelWeights, where_: Where, cfg: &AdapterConfig) -> Result<ModelWeights> {
    let mut out = w.clone();
    for l in where_.layers(w.n_layers())? {
        out = insert_adapter(&out, l, cfg)?;
    }
    Ok(out)
}

/// Trained adapter weights by layer, plus the class head when one was trained.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterSet {
    pub layers: BTreeMap<usize, Adapter>,
    pub head: Option<ClassHead>,
}

impl AdapterSet {
    pub fn from_weights(w: &ModelWeights, layers: &[usize]) -> Self {
        AdapterSet {
            layers: layers
                .iter()
                .filter_map(|&l| w.layer(l).adapter.clone().map(|a| (l, a)))
                .collect(),
            head: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Attach these adapters (and head) to a copy of `w`.
    pub fn apply(&self, w: &ModelWeights) -> Result<ModelWeights> {
        let mut out = w.clone();
        for (&l, a) in &self.layers {
            out.check_layer(l)?;
            if out.layer(l).adapter.is_some() {
                return Err(Error::AdapterExists(l));
            }
            if a.down.rows != w.config.d_model {
                return Err(Error::ShapeMismatch {
                    name: format!("layers.{l}.adapter.down"),
                    expected: vec![w.config.d_model, a.bottleneck()],
                    found: vec![a.down.rows, a.down.cols],
                });
            }
            out.layer_mut(l).adapter = Some(a.clone());
        }
        if let Some(h) = &self.head {
            out.head = Some(h.clone());
        }
        Ok(out)
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut t: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (l, a) in &self.layers {
            let (d, r) = (a.down.rows, a.down.cols);
            t.push((format!("layers.{l}.adapter.down"), vec![d, r], &a.down.data));
            t.push((format!("layers.{l}.adapter.down_bias"), vec![r], &a.down_bias));
            t.push((format!("layers.{l}.adapter.up"), vec![r, d], &a.up.data));
            t.push((format!("layers.{l}.adapter.up_bias"), vec![d], &a.up_bias));
        }
        if let Some(h) = &self.head {
            t.push(("head.weight".into(), vec![h.weight.rows, h.weight.cols], &h.weight.data));
            t.push(("head.bias".into(), vec![h.bias.len()], &h.bias));
        }
        t
    }
}

/// Exact number of adapter parameters (class head excluded).
pub fn count_params(adapters: &AdapterSet) -> usize {
    adapters.layers.values().map(Adapter::param_count).sum()
}

pub fn save_adapters(set: &AdapterSet, config: &ModelConfig, path: &Path) -> Result<()> {
    let tensors = set.tensors();
    let header = Header {
        kind: ADAPTER_KIND.into(),
        config: config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
        frozen: Vec::new(),
    };
    let values: Vec<&[f64]> = tensors.iter().map(|t| t.2).collect();
    write_container(path, &header, &values)
}

pub fn load_adapters(path: &Path) -> Result<(ModelConfig, AdapterSet)> {
    let c = read_container(path)?;
    if c.header.kind != ADAPTER_KIND {
        return Err(Error::MalformedCheckpoint(format!(
            "expected an adapter checkpoint, found kind {:?}",
            c.header.kind
        )));
    }
    let mut set = AdapterSet::default();
    let mut parts: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for (t, v) in c.header.tensors.into_iter().zip(c.values) {
        parts.insert(t.name, (t.shape, v));
    }
    fn take(parts: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let (s, v) = parts
            .remove(name)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("missing tensor {name}")))?;
        if s != shape {
            return Err(Error::ShapeMismatch {
                name: name.into(),
                expected: shape.to_vec(),
                found: s,
            });
        }
        Ok(v)
    }
    let d = c.header.config.d_model;
    let layers: Vec<(usize, usize)> = parts
        .iter()
        .filter_map(|(name, (shape, _))| {
            let l = crate::model::checkpoint::adapter_layer(name)?;
            (name.ends_with(".adapter.down") && shape.len() == 2).then(|| (l, shape[1]))
        })
        .collect();
    for (l, r) in layers {
        let p = format!("layers.{l}.adapter");
        let down = Matrix::from_vec(d, r, take(&mut parts, &format!("{p}.down"), &[d, r])?)?;
        let down_bias = take(&mut parts, &format!("{p}.down_bias"), &[r])?;
        let up = Matrix::from_vec(r, d, take(&mut parts, &format!("{p}.up"), &[r, d])?)?;
        let up_bias = take(&mut parts, &format!("{p}.up_bias"), &[d])?;
        set.layers.insert(l, Adapter { down, down_bias, up, up_bias });
    }
    if let Some((shape, _)) = parts.get("head.weight") {
        let shape = shape.clone();
        if shape.len() != 2 || shape[0] != d {
            return Err(Error::MalformedCheckpoint(format!("head.weight has shape {shape:?}")));
        }
        let weight = Matrix::from_vec(d, shape[1], take(&mut parts, "head.weight", &shape)?)?;
        let bias = take(&mut parts, "head.bias", &[shape[1]])?;
        set.head = Some(ClassHead { weight, bias });
    }
    if let Some(name) = parts.keys().next() {
        return Err(Error::MalformedCheckpoint(format!("unexpected tensor {name}")));
    }
    Ok((c.header.config, set))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LmFinetune,
    SequenceClassification { n_classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    Accuracy,
    F1,
    NegativeLoss,
}

/// Training data, validation data and the validation score to maximize.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub train: Vec<Objective>,
    pub validation: Vec<Objective>,
    pub scorer: Scorer,
}

impl TaskSpec {
    pub fn lm(train: Vec<Vec<u32>>, validation: Vec<Vec<u32>>, scorer: Scorer) -> Self {
        TaskSpec {
            kind: TaskKind::LmFinetune,
            train: train.into_iter().map(Objective::NextToken).collect(),
            validation: validation.into_iter().map(Objective::NextToken).collect(),
            scorer,
        }
    }

    pub fn classification(
        n_classes: usize,
        train: Vec<(Vec<u32>, usize)>,
        validation: Vec<(Vec<u32>, usize)>,
        scorer: Scorer,
    ) -> Self {
        let wrap = |v: Vec<(Vec<u32>, usize)>| {
            v.into_iter()
                .map(|(tokens, label)| Objective::Classify { tokens, label })
                .collect()
        };
        TaskSpec {
            kind: TaskKind::SequenceClassification { n_classes },
            train: wrap(train),
            validation: wrap(validation),
            scorer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::InvalidArgument("task has no training examples".into()));
        }
        if self.validation.is_empty() {
            return Err(Error::InvalidArgument("task has no validation examples".into()));
        }
        for ex in self.train.iter().chain(&self.validation) {
            match (self.kind, ex) {
                (TaskKind::LmFinetune, Objective::NextToken(_)) => {}
                (TaskKind::SequenceClassification { n_classes }, Objective::Classify { label, .. }) => {
                    if *label >= n_classes {
                        return Err(Error::InvalidArgument(format!(
                            "label {label} out of range for {n_classes} classes"
                        )));
                    }
                }
                _ => {
                    return Err(Error::InvalidArgument(
                        "example objective does not match task kind".into(),
                    ))
                }
            }
        }
        if let (TaskKind::LmFinetune, Scorer::F1) = (self.kind, self.scorer) {
            return Err(Error::InvalidArgument("f1 scorer needs a classification task".into()));
        }
        if let TaskKind::SequenceClassification { n_classes: 0 } = self.kind {
            return Err(Error::InvalidArgument("n_classes must be at least 1".into()));
        }
        Ok(())
    }
}

/// F1 of class 1 for two classes, macro-F1 otherwise. A class that is
/// never predicted and never present scores 0.
pub fn f1_score(pred: &[usize], truth: &[usize], n_classes: usize) -> f64 {
    let per_class = |c: usize| {
        let tp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count() as f64;
        let fp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t != c).count() as f64;
        let fn_ = pred.iter().zip(truth).filter(|(p, t)| **p != c && **t == c).count() as f64;
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    };
    if n_classes == 2 {
        per_class(1)
    } else {
        (0..n_classes).map(per_class).sum::<f64>() / n_classes as f64
    }
}

/// Validation score of `w` on `task` (higher is better).
pub fn evaluate(w: &ModelWeights, task: &TaskSpec) -> Result<f64> {
    match task.scorer {
        Scorer::NegativeLoss => {
            let losses: Vec<f64> = task
                .validation
                .par_iter()
                .map(|ex| loss(w, ex))
                .collect::<Result<_>>()?;
            Ok(-losses.iter().sum::<f64>() / losses.len() as f64)
        }
        Scorer::Accuracy | Scorer::F1 => match task.kind {
            TaskKind::LmFinetune => {
                let counts: Vec<(usize, usize)> = task
                    .validation
                    .par_iter()
                    .map(|ex| {
                        let t = ex.tokens();
                        if t.len() < 2 {
                            return Err(Error::InvalidArgument("next-token example needs at least 2 tokens".into()));
                        }
                        let out = forward(w, &t[..t.len() - 1], Capture::none())?;
                        let hits = (0..t.len() - 1)
                            .filter(|&i| argmax(out.logits.row(i)) == t[i + 1] as usize)
                            .count();
                        Ok((hits, t.len() - 1))
                    })
                    .collect::<Result<_>>()?;
                let (hits, total) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
                Ok(hits as f64 / total as f64)
            }
            TaskKind::SequenceClassification { n_classes } => {
                let pairs: Vec<(usize, usize)> = task
                    .validation
                    .par_iter()
                    .map(|ex| match ex {
                        Objective::Classify { tokens, label } => Ok((argmax(&class_logits(w, tokens)?), *label)),
                        Objective::NextToken(_) => Err(Error::InvalidArgument("expected a labeled example".into())),
                    })
                    .collect::<Result<_>>()?;
                let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
                Ok(match task.scorer {
                    Scorer::F1 => f1_score(&pred, &truth, n_classes),
                    _ => pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64,
                })
            }
        },
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Base plus trained adapters (and head).
    pub weights: ModelWeights,
    pub adapters: AdapterSet,
    pub log: TrainLog,
}

/// Train only the adapters named by `where_` (plus the class head for
/// classification). Adapters must already be inserted.
pub fn finetune(w: &ModelWeights, where_: Where, task: &TaskSpec, hyper: &TrainHyper) -> Result<FinetuneOutcome> {
    task.validate()?;
    let layers = where_.layers(w.n_layers())?;
    for &l in &layers {
        if w.layer(l).adapter.is_none() {
            return Err(Error::InvalidArgument(format!(
                "no adapter at layer {l}; insert adapters before fine-tuning"
            )));
        }
    }
    let mut tuned = w.clone();
    if let TaskKind::SequenceClassification { n_classes } = task.kind {
        match &tuned.head {
            None => tuned = tuned.with_head(n_classes, named_seed(hyper.seed, "class-head")),
            Some(h) if h.n_classes() != n_classes => {
                return Err(Error::InvalidArgument(format!(
                    "class head has {} classes, task declares {n_classes}",
                    h.n_classes()
                )))
            }
            Some(_) => {}
        }
    }
    tuned.freeze_base();
    for l in 1..=tuned.n_layers() {
        tuned.set_frozen(ParamGroup::Adapter(l), !layers.contains(&l));
    }
    let classify = matches!(task.kind, TaskKind::SequenceClassification { .. });
    tuned.set_frozen(ParamGroup::ClassHead, !classify);

    let log = match task.kind {
        TaskKind::LmFinetune => {
            let seqs: Vec<Vec<u32>> = task.train.iter().map(|e| e.tokens().to_vec()).collect();
            train_lm(&mut tuned, &seqs, hyper)?
        }
        TaskKind::SequenceClassification { .. } => train_on_examples(&mut tuned, &task.train, hyper)?,
    };
    let mut adapters = AdapterSet::from_weights(&tuned, &layers);
    if classify {
        adapters.head = tuned.head.clone();
    }
    Ok(FinetuneOutcome {
        weights: tuned,
        adapters,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub candidates: Vec<usize>,
    /// Validation score of every candidate that trained successfully.
    pub scores: BTreeMap<usize, f64>,
    #[serde(default)]
    pub failed: Vec<usize>,
    pub best_layer: usize,
    /// More than one candidate shared the best score.
    pub tie_applied: bool,
}

/// Argmax over a score table; ties go to the lowest layer.
pub fn select_from_scores(scores: &BTreeMap<usize, f64>) -> Result<(usize, bool)> {
    let mut best: Option<(usize, f64)> = None;
    for (&l, &s) in scores {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((l, s));
        }
    }
    let (layer, top) = best.ok_or(Error::AllCandidatesFailed(scores.len()))?;
    let tie = scores.values().filter(|&&s| s == top).count() > 1;
    Ok((layer, tie))
}

/// Train one adapter per candidate layer with identical hyperparameters
/// and pick the layer with the best validation score.
pub fn select_layer(
    w: &ModelWeights,
    candidates: &[usize],
    task: &TaskSpec,
    hyper: &TrainHyper,
    cfg: &AdapterConfig,
) -> Result<SelectionResult> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate layers".into()));
    }
    task.validate()?;
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    for &l in &cands {
        w.check_layer(l)?;
    }
    let outcomes: Vec<(usize, Result<f64>)> = cands
        .par_iter()
        .map(|&l| {
            let run = || -> Result<f64> {
                let aug = insert_adapter(w, l, cfg)?;
                let tuned = finetune(&aug, Where::Single(l), task, hyper)?;
                let score = evaluate(&tuned.weights, task)?;
                if !score.is_finite() {
                    return Err(Error::Scorer(format!("non-finite score {score}")));
                }
                Ok(score)
            };
            (l, run())
        })
        .collect();
    let mut scores = BTreeMap::new();
    let mut failed = Vec::new();
    for (l, r) in outcomes {
        match r {
            Ok(s) => {
                info!("layer {l}: score {s:.6}");
                scores.insert(l, s);
            }
            Err(e) => {
                warn!("layer {l} failed: {e}");
                failed.push(l);
            }
        }
    }
    if scores.is_empty() {
        return Err(Error::AllCandidatesFailed(cands.len()));
    }
    let (best_layer, tie_applied) = select_from_scores(&scores)?;
    Ok(SelectionResult {
        candidates: cands,
        scores,
        failed,
        best_layer,
        tie_applied,
    })
}

//! Run configuration: a TOML file, command-line overrides, and defaults.
//!
//! Every field is optional in the file. Commands fill in defaults, check
//! required fields, and write the fully resolved tree next to their outputs,
//! so a run can be repeated from its snapshot alone.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use cogsteer::adapt::{Scorer, Where};
use cogsteer::model::NormKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: Option<ModelSection>,
    pub train: Option<TrainSection>,
    pub adapter: Option<AdapterSection>,
    pub task: Option<TaskSection>,
    pub train_base: Option<TrainBaseSection>,
    pub probe: Option<ProbeSection>,
    pub select_layer: Option<SelectSection>,
    pub finetune: Option<FinetuneSection>,
    pub generate: Option<GenerateSection>,
    pub detox_eval: Option<DetoxSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub norm_kind: Option<NormKind>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub bottleneck: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKindName {
    Classification,
    Lm,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: Option<TaskKindName>,
    /// Classification: `label<TAB>text` per line. LM: one text per line.
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub n_classes: Option<usize>,
    pub scorer: Option<Scorer>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBaseSection {
    /// One training text per line.
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub checkpoint: Option<PathBuf>,
    pub gaze: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectSection {
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the middle-third candidate set of the checkpoint.
    pub candidates: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum WhereName {
    Single,
    Last,
    All,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub checkpoint: Option<PathBuf>,
    #[serde(rename = "where")]
    pub where_: Option<WhereName>,
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeName {
    Greedy,
    Nucleus,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub checkpoint: Option<PathBuf>,
    pub prompt: Option<String>,
    pub max_new: Option<usize>,
    pub decode: Option<DecodeName>,
    pub p: Option<f64>,
    /// Steering is enabled when both `contrast` and `layer` are set.
    pub contrast: Option<PathBuf>,
    pub layer: Option<usize>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScorerName {
    Lexicon,
    External,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetoxSection {
    pub checkpoint: Option<PathBuf>,
    pub contrast: Option<PathBuf>,
    /// One prompt per line.
    pub prompts: Option<PathBuf>,
    pub scorer: Option<ScorerName>,
    /// One word per line.
    pub lexicon: Option<PathBuf>,
    /// Layers to steer; an unsteered reference report is always produced.
    pub layers: Option<Vec<usize>>,
    pub alpha: Option<f64>,
    pub n_cont: Option<usize>,
    pub p: Option<f64>,
    pub max_new: Option<usize>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub layer: Option<usize>,
    pub alpha: Option<f64>,
    pub where_: Option<WhereName>,
    pub scorer: Option<ScorerName>,
}

pub fn load(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

pub fn write_snapshot(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join("resolved_config.toml");
    let text = toml::to_string_pretty(cfg).context("serializing resolved config")?;
    std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

/// Value of a required field, or an error naming its path.
pub fn need<T: Clone>(v: &Option<T>, field: &str) -> Result<T> {
    v.clone().ok_or_else(|| anyhow!("{field}: missing required value"))
}

pub fn check(ok: bool, field: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(anyhow!("{field}: {msg}"))
    }
}

fn fill<T>(slot: &mut Option<T>, default: T) {
    if slot.is_none() {
        *slot = Some(default);
    }
}

impl RunConfig {
    pub fn apply_common(&mut self, o: &Overrides) {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        fill(&mut self.seed, 0);
        fill(&mut self.out, PathBuf::from("runs"));
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn resolve_train(&mut self) -> Result<TrainSection> {
        let t = self.train.get_or_insert_with(Default::default);
        fill(&mut t.lr, 3e-3);
        fill(&mut t.steps, 200);
        fill(&mut t.batch, 8);
        fill(&mut t.weight_decay, 0.0);
        let t = t.clone();
        check(t.lr.unwrap() > 0.0 && t.lr.unwrap().is_finite(), "train.lr", "must be a positive number")?;
        check(t.batch.unwrap() >= 1, "train.batch", "must be at least 1")?;
        check(t.weight_decay.unwrap() >= 0.0, "train.weight_decay", "must be non-negative")?;
        Ok(t)
    }

    pub fn resolve_model(&mut self) -> Result<ModelSection> {
        let m = self.model.get_or_insert_with(Default::default);
        fill(&mut m.n_layers, 6);
        fill(&mut m.d_model, 32);
        fill(&mut m.n_heads, 4);
        let d = m.d_model.unwrap();
        fill(&mut m.d_ff, 4 * d);
        fill(&mut m.max_seq_len, 64);
        fill(&mut m.norm_kind, NormKind::LayerNorm);
        let m = m.clone();
        for (v, f) in [
            (m.n_layers, "model.n_layers"),
            (m.d_model, "model.d_model"),
            (m.n_heads, "model.n_heads"),
            (m.d_ff, "model.d_ff"),
            (m.max_seq_len, "model.max_seq_len"),
        ] {
            check(v.unwrap() >= 1, f, "must be at least 1")?;
        }
        check(
            m.d_model.unwrap() % m.n_heads.unwrap() == 0,
            "model.n_heads",
            "must divide model.d_model",
        )?;
        Ok(m)
    }

    pub fn resolve_adapter(&mut self) -> AdapterSection {
        let a = self.adapter.get_or_insert_with(Default::default);
        fill(&mut a.bottleneck, 4);
        a.clone()
    }

    pub fn resolve_task(&mut self) -> Result<TaskSection> {
        let t = self.task.get_or_insert_with(Default::default);
        let kind = need(&t.kind, "task.kind")?;
        match kind {
            TaskKindName::Classification => {
                fill(&mut t.n_classes, 2);
                fill(&mut t.scorer, Scorer::Accuracy);
            }
            TaskKindName::Lm => fill(&mut t.scorer, Scorer::NegativeLoss),
        }
        let t = t.clone();
        need(&t.train, "task.train")?;
        need(&t.validation, "task.validation")?;
        if kind == TaskKindName::Lm {
            check(t.n_classes.is_none(), "task.n_classes", "only valid for classification")?;
            check(t.scorer != Some(Scorer::F1), "task.scorer", "f1 needs a classification task")?;
        } else {
            check(t.n_classes.unwrap() >= 1, "task.n_classes", "must be at least 1")?;
        }
        Ok(t)
    }
}

impl FinetuneSection {
    pub fn target(&self) -> Result<Where> {
        Ok(match self.where_.unwrap_or(WhereName::Single) {
            WhereName::Single => Where::Single(need(&self.layer, "finetune.layer")?),
            WhereName::Last => Where::Last,
            WhereName::All => Where::All,
        })
    }
}

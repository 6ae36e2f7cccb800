use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cogsteer::adapt::{
    count_params, evaluate, finetune, load_adapters, prepare, save_adapters, select_layer, AdapterConfig,
    TaskSpec,
};
use cogsteer::gaze::{align, load_gaze_tsv};
use cogsteer::model::checkpoint::{load_checkpoint, save_checkpoint};
use cogsteer::model::tokenizer::{detokenize, tokenize, VOCAB_SIZE};
use cogsteer::model::{generate, train_lm, Decode, ModelConfig, ModelWeights, TrainHyper};
use cogsteer::numkit::named_seed;
use cogsteer::probe::{buckets, candidate_layers, correlate, emit_report, ReportFormat};
use cogsteer::steer::{
    detox_eval, detox_margin, steered_generate, DetoxConfig, DetoxReport, ExternalScorer, LexiconScorer,
    SteeringPlan, ToxicityScorer, DEFAULT_ALPHA,
};
use log::info;
use serde::Serialize;

use crate::config::{
    check, need, write_snapshot, DecodeName, Overrides, RunConfig, ScorerName, TaskKindName, TrainSection,
};

pub const SCORER_URL_ENV: &str = "COGSTEER_SCORER_URL";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn read_lines(path: &Path, field: &str) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("{field}: cannot read {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.trim().is_empty())
        .collect())
}

fn load_model(path: &Path, field: &str) -> Result<ModelWeights> {
    load_checkpoint(path).with_context(|| format!("{field}: cannot load checkpoint {}", path.display()))
}

fn hyper(t: &TrainSection, seed: u64) -> TrainHyper {
    TrainHyper {
        lr: t.lr.unwrap(),
        steps: t.steps.unwrap(),
        batch: t.batch.unwrap(),
        seed,
        weight_decay: t.weight_decay.unwrap(),
    }
}

fn load_task(cfg: &mut RunConfig) -> Result<TaskSpec> {
    let t = cfg.resolve_task()?;
    let scorer = t.scorer.unwrap();
    let train_path = t.train.unwrap();
    let valid_path = t.validation.unwrap();
    match t.kind.unwrap() {
        TaskKindName::Lm => {
            let load = |p: &Path, f: &str| -> Result<Vec<Vec<u32>>> {
                Ok(read_lines(p, f)?.iter().map(|l| tokenize(l)).collect())
            };
            Ok(TaskSpec::lm(load(&train_path, "task.train")?, load(&valid_path, "task.validation")?, scorer))
        }
        TaskKindName::Classification => {
            let n_classes = t.n_classes.unwrap();
            let load = |p: &Path, f: &str| -> Result<Vec<(Vec<u32>, usize)>> {
                read_lines(p, f)?
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        let (label, text) = l
                            .split_once('\t')
                            .ok_or_else(|| anyhow!("{f}: line {}: expected label<TAB>text", i + 1))?;
                        let label: usize = label
                            .trim()
                            .parse()
                            .map_err(|_| anyhow!("{f}: line {}: bad label {label:?}", i + 1))?;
                        check(label < n_classes, f, &format!("line {}: label {label} >= n_classes {n_classes}", i + 1))?;
                        Ok((tokenize(text), label))
                    })
                    .collect()
            };
            Ok(TaskSpec::classification(
                n_classes,
                load(&train_path, "task.train")?,
                load(&valid_path, "task.validation")?,
                scorer,
            ))
        }
    }
}

pub fn train_base(mut cfg: RunConfig, o: &Overrides) -> Result<()> {
    cfg.apply_common(o);
    let m = cfg.resolve_model()?;
    let t = cfg.resolve_train()?;
    let section = cfg.train_base.clone().unwrap_or_default();
    let corpus_path = need(&section.corpus, "train_base.corpus")?;
    let out = cfg.out();
    write_snapshot(&cfg, &out)?;

    let corpus: Vec<Vec<u32>> = read_lines(&corpus_path, "train_base.corpus")?
        .iter()
        .map(|l| tokenize(l))
        .collect();
    let seed = cfg.seed();
    let model_cfg = ModelConfig {
        n_layers: m.n_layers.unwrap(),
        d_model: m.d_model.unwrap(),
        n_heads: m.n_heads.unwrap(),
        d_ff: m.d_ff.unwrap(),
        vocab_size: VOCAB_SIZE,
        max_seq_len: m.max_seq_len.unwrap(),
        norm_kind: m.norm_kind.unwrap(),
        seed: named_seed(seed, "init"),
    };
    let mut w = ModelWeights::init(&model_cfg).context("model")?;
    let log = train_lm(&mut w, &corpus, &hyper(&t, named_seed(seed, "train-base"))).context("train_base")?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&w, &ckpt)?;
    #[derive(Serialize)]
    struct Record<'a> {
        checkpoint: &'a Path,
        digest: String,
        n_params: usize,
        losses: &'a [f64],
    }
    write_json(
        &out.join("train_log.json"),
        &Record {
            checkpoint: &ckpt,
            digest: w.digest(),
            n_params: w.param_count(),
            losses: &log.losses,
        },
    )?;
    println!(
        "trained {} steps, final loss {:.4}, wrote {}",
        log.losses.len(),
        log.losses.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

pub fn probe(mut cfg: RunConfig, o: &Overrides) -> Result<()> {
    cfg.apply_common(o);
    let p = cfg.probe.clone().unwrap_or_default();
    let ckpt = need(&p.checkpoint, "probe.checkpoint")?;
    let gaze = need(&p.gaze, "probe.gaze")?;
    let out = cfg.out();
    write_snapshot(&cfg, &out)?;

    let w = load_model(&ckpt, "probe.checkpoint")?;
    check(w.n_layers() >= 3, "probe.checkpoint", "model needs at least 3 layers for bucketing")?;
    let corpus = load_gaze_tsv(&gaze).context("probe.gaze")?;
    let aligned = align(&corpus, &w).context("probe.gaze: alignment")?;
    let report = correlate(&aligned, &corpus)?;
    emit_report(&report, &out.join("correlation.json"), ReportFormat::Json)?;
    emit_report(&report, &out.join("correlation.csv"), ReportFormat::Csv)?;
    let b = report.buckets;
    println!(
        "{} words, {} layers; buckets premature {}-{}, middle {}-{}, mature {}-{}",
        corpus.n_total(),
        report.n_layers,
        b.premature.lo,
        b.premature.hi,
        b.middle.lo,
        b.middle.hi,
        b.mature.lo,
        b.mature.hi
    );
    Ok(())
}

fn adapter_config(cfg: &mut RunConfig) -> AdapterConfig {
    let a = cfg.resolve_adapter();
    AdapterConfig {
        bottleneck: a.bottleneck.unwrap(),
        seed: named_seed(cfg.seed(), "adapter"),
    }
}

pub fn select(mut cfg: RunConfig, o: &Overrides) -> Result<()> {
    cfg.apply_common(o);
    let t = cfg.resolve_train()?;
    let acfg = adapter_config(&mut cfg);
    let s = cfg.select_layer.get_or_insert_with(Default::default);
    if let Some(l) = o.layer {
        s.candidates = Some(vec![l]);
    }
    let ckpt = need(&s.checkpoint, "select_layer.checkpoint")?;
    let w = load_model(&ckpt, "select_layer.checkpoint")?;
    let candidates = match &s.candidates {
        Some(c) => c.clone(),
        None => candidate_layers(w.n_layers()).context("select_layer.candidates")?,
    };
    check(!candidates.is_empty(), "select_layer.candidates", "must not be empty")?;
    for &l in &candidates {
        check(
            (1..=w.n_layers()).contains(&l),
            "select_layer.candidates",
            &format!("layer {l} outside 1..={}", w.n_layers()),
        )?;
    }
    s.candidates = Some(candidates.clone());
    let task = load_task(&mut cfg)?;
    let out = cfg.out();
    write_snapshot(&cfg, &out)?;

    let result = select_layer(&w, &candidates, &task, &hyper(&t, named_seed(cfg.seed(), "finetune")), &acfg)?;
    write_json(&out.join("selection.json"), &result)?;
    println!(
        "best layer {} (score {:.6}){}",
        result.best_layer,
        result.scores[&result.best_layer],
        if result.tie_applied { ", tie broken by lowest index" } else { "" }
    );
    Ok(())
}

pub fn finetune_cmd(mut cfg: RunConfig, o: &Overrides) -> Result<()> {
    cfg.apply_common(o);
    let t = cfg.resolve_train()?;
    let acfg = adapter_config(&mut cfg);
    let f = cfg.finetune.get_or_insert_with(Default::default);
    if o.where_.is_some() {
        f.where_ = o.where_;
    }
    if o.layer.is_some() {
        f.layer = o.layer;
    }
    f.where_.get_or_insert(crate::config::WhereName::Single);
    let f = f.clone();
    let target = f.target()?;
    let ckpt = need(&f.checkpoint, "finetune.checkpoint")?;
    let task = load_task(&mut cfg)?;
    let out = cfg.out();
    write_snapshot(&cfg, &out)?;

    let base = load_model(&ckpt, "finetune.checkpoint")?;
    let layers = target.layers(base.n_layers()).context("finetune.layer")?;
    let aug = prepare(&base, target, &acfg)?;
    let outcome = finetune(&aug, target, &task, &hyper(&t, named_seed(cfg.seed(), "finetune")))?;
    let score = evaluate(&outcome.weights, &task)?;
    let path = out.join("adapters.ckpt");
    save_adapters(&outcome.adapters, &base.config, &path)?;
    #[derive(Serialize)]
    struct Metrics<'a> {
        layers: &'a [usize],
        adapter_params: usize,
        base_params: usize,
        base_digest: String,
        validation_score: f64,
        losses: &'a [f64],
    }
    let base_digest = outcome.weights.base_digest();
    if base_digest != base.base_digest() {
        bail!("base weights changed during fine-tuning");
    }
    write_json(
        &out.join("finetune_metrics.json"),
        &Metrics {
            layers: &layers,
            adapter_params: count_params(&outcome.adapters),
            base_params: base.param_count(),
            base_digest,
            validation_score: score,
            losses: &outcome.log.losses,
        },
    )?;
    println!(
        "adapters at {:?}: {} parameters, validation score {:.6}, wrote {}",
        layers,
        count_params(&outcome.adapters),
        score,
        path.display()
    );
    Ok(())
}

/// Load a model checkpoint, or apply an adapter checkpoint to `base`.
fn load_contrast(path: &Path, base: &ModelWeights, field: &str) -> Result<ModelWeights> {
    match load_checkpoint(path) {
        Ok(w) => Ok(w),
        Err(cogsteer::Error::MalformedCheckpoint(_)) => {
            let (config, set) = load_adapters(path).with_context(|| format!("{field}: {}", path.display()))?;
            check(config == base.config, field, "adapter checkpoint was trained on a different model config")?;
            Ok(set.apply(base)?)
        }
        Err(e) => Err(anyhow!(e).context(format!("{field}: cannot load {}", path.display()))),
    }
}

pub fn generate_cmd(mut cfg: RunConfig, o: &Overrides) -> Result<()> {
    cfg.apply_common(o);
    let g = cfg.generate.get_or_insert_with(Default::default);
    if o.layer.is_some() {
        g.layer = o.layer;
    }
    if o.alpha.is_some() {
        g.alpha = o.alpha;
    }
    g.max_new.get_or_insert(20);
    g.decode.get_or_insert(DecodeName::Greedy);
    if g.decode == Some(DecodeName::Nucleus) {
        g.p.get_or_insert(0.9);
    }
    if g.contrast.is_some() {
        g.alpha.get_or_insert(DEFAULT_ALPHA);
    }
    let g = g.clone();
    let ckpt = need(&g.checkpoint, "generate.checkpoint")?;
    let prompt = need(&g.prompt, "generate.prompt")?;
    check(
        g.contrast.is_some() == g.layer.is_some(),
        "generate.layer",
        "steering needs both generate.contrast and generate.layer",
    )?;
    let out = cfg.out();
    write_snapshot(&cfg, &out)?;

    let w = load_model(&ckpt, "generate.checkpoint")?;
    let decode = match g.decode.unwrap() {
        DecodeName::Greedy => Decode::Greedy,
        DecodeName::Nucleus => Decode::Nucleus { p: g.p.unwrap() },
    };
    let tokens = tokenize(&prompt);
    let seed = named_seed(cfg.seed(), "generate");
    let max_new = g.max_new.unwrap();
    let (seq, plan) = match (&g.contrast, g.layer) {
        (Some(c), Some(layer)) => {
            let contrast = load_contrast(c, &w, "generate.contrast")?;
            let plan = SteeringPlan {
                layer,
                alpha: g.alpha.unwrap(),
            };
            (steered_generate(&w, &contrast, plan, &tokens, decode, max_new, seed)?, Some(plan))
        }
        _ => (generate(&w, &tokens, decode, max_new, seed, None)?, None),
    };
    let continuation = detokenize(&seq[tokens.len()..]);
    #[derive(Serialize)]
    struct Record<'a> {
        prompt: &'a str,
        continuation: &'a str,
        tokens: &'a [u32],
        plan: Option<SteeringPlan>,
        decode: Decode,
        seed: u64,
    }
    write_json(
        &out.join("generation.json"),
        &Record {
            prompt: &prompt,
            continuation: &continuation,
            tokens: &seq,
            plan,
            decode,
            seed,
        },
    )?;
    println!("{prompt}{continuation}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct MarginRow {
    layer: usize,
    bucket: Option<&'static str>,
    aggregate: f64,
    margin: f64,
    report: PathBuf,
}

#[derive(Debug, Serialize)]
struct MarginSummary {
    reference: PathBuf,
    reference_aggregate: f64,
    alpha: f64,
    layers: Vec<MarginRow>,
    best_layer: Option<usize>,
    best_middle_layer: Option<usize>,
}

pub fn detox(mut cfg: RunConfig, o: &Overrides) -> Result<()> {
    cfg.apply_common(o);
    let d = cfg.detox_eval.get_or_insert_with(Default::default);
    if let Some(l) = o.layer {
        d.layers = Some(vec![l]);
    }
    if o.alpha.is_some() {
        d.alpha = o.alpha;
    }
    if o.scorer.is_some() {
        d.scorer = o.scorer;
    }
    d.scorer.get_or_insert(ScorerName::Lexicon);
    d.alpha.get_or_insert(DEFAULT_ALPHA);
    d.n_cont.get_or_insert(25);
    d.p.get_or_insert(0.9);
    d.max_new.get_or_insert(20);
    d.layers.get_or_insert_with(Vec::new);
    let d = d.clone();
    let ckpt = need(&d.checkpoint, "detox_eval.checkpoint")?;
    let prompts_path = need(&d.prompts, "detox_eval.prompts")?;
    let layers = d.layers.clone().unwrap();
    check(
        layers.is_empty() || d.contrast.is_some(),
        "detox_eval.contrast",
        "missing required value (needed to steer detox_eval.layers)",
    )?;
    let scorer: Box<dyn ToxicityScorer> = match d.scorer.unwrap() {
        ScorerName::Lexicon => {
            let p = need(&d.lexicon, "detox_eval.lexicon")?;
            Box::new(LexiconScorer::from_file(&p).with_context(|| format!("detox_eval.lexicon: {}", p.display()))?)
        }
        ScorerName::External => {
            let url = std::env::var(SCORER_URL_ENV)
                .map_err(|_| anyhow!("{SCORER_URL_ENV}: must be set for the external scorer"))?;
            Box::new(ExternalScorer::new(url)?)
        }
    };
    let out = cfg.out();
    write_snapshot(&cfg, &out)?;

    let w = load_model(&ckpt, "detox_eval.checkpoint")?;
    let prompts = read_lines(&prompts_path, "detox_eval.prompts")?;
    check(!prompts.is_empty(), "detox_eval.prompts", "no prompts")?;
    let dcfg = DetoxConfig {
        n_cont: d.n_cont.unwrap(),
        p: d.p.unwrap(),
        max_new: d.max_new.unwrap(),
        seed: named_seed(cfg.seed(), "detox"),
    };
    let reference = detox_eval(&w, None, &prompts, scorer.as_ref(), &dcfg).context("unsteered reference")?;
    let ref_path = out.join("report_reference.json");
    write_json(&ref_path, &reference)?;
    println!("reference aggregate {:.6}", reference.aggregate);
    if layers.is_empty() {
        return Ok(());
    }

    let contrast_path = d.contrast.clone().unwrap();
    let contrast = load_contrast(&contrast_path, &w, "detox_eval.contrast")?;
    let bk = buckets(w.n_layers()).ok();
    let alpha = d.alpha.unwrap();
    let mut rows = Vec::new();
    for &layer in &layers {
        let plan = SteeringPlan { layer, alpha };
        let report: DetoxReport = detox_eval(&w, Some((&contrast, plan)), &prompts, scorer.as_ref(), &dcfg)
            .with_context(|| format!("layer {layer}"))?;
        let margin = detox_margin(&reference, &report)?;
        let path = out.join(format!("report_layer_{layer}.json"));
        write_json(&path, &report)?;
        info!("layer {layer}: aggregate {:.6}, margin {margin:.6}", report.aggregate);
        println!("layer {layer}: aggregate {:.6}, margin {margin:+.6}", report.aggregate);
        rows.push(MarginRow {
            layer,
            bucket: bk.and_then(|b| b.bucket_of(layer)),
            aggregate: report.aggregate,
            margin,
            report: path,
        });
    }
    let best_of = |filter: &dyn Fn(&MarginRow) -> bool| {
        rows.iter()
            .filter(|r| filter(r))
            .fold(None::<&MarginRow>, |b, r| match b {
                Some(b) if b.margin >= r.margin => Some(b),
                _ => Some(r),
            })
            .map(|r| r.layer)
    };
    let best_layer = best_of(&|_| true);
    let best_middle_layer = best_of(&|r| r.bucket == Some("middle"));
    write_json(
        &out.join("margins.json"),
        &MarginSummary {
            reference: ref_path,
            reference_aggregate: reference.aggregate,
            alpha,
            layers: rows,
            best_layer,
            best_middle_layer,
        },
    )?;
    Ok(())
}

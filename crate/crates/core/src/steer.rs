//! Inference-time steering by contrasting per-head value vectors with a
//! contrast model, and the toxicity evaluation harness built on it.

use std::collections::BTreeSet;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tokenizer::{detokenize, tokenize};
use crate::model::{forward_with, generate, Capture, Decode, ForwardOutput, LogitsMode, ModelWeights, SteeringHook};
use crate::numkit::{derive_seed, l2_norm, Matrix};

pub const DEFAULT_ALPHA: f64 = 0.4;

/// Steer one value vector away from its contrast counterpart.
///
/// With `dv = vc - vo` and `lambda = 1 + |dv|`, the update is
/// `w = vo - lambda^alpha * dv`, rescaled to the norm of `vo`.
pub fn steer_value(vo: &[f64], vc: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if vo.len() != vc.len() {
        return Err(Error::LengthMismatch {
            left: vo.len(),
            right: vc.len(),
        });
    }
    let dv: Vec<f64> = vc.iter().zip(vo).map(|(c, o)| c - o).collect();
    if dv.iter().all(|&x| x == 0.0) {
        return Ok(vo.to_vec());
    }
    let strength = (1.0 + l2_norm(&dv)).powf(alpha);
    let w: Vec<f64> = vo.iter().zip(&dv).map(|(o, d)| o - strength * d).collect();
    let nw = l2_norm(&w);
    if nw == 0.0 {
        return Ok(vo.to_vec());
    }
    let s = l2_norm(vo) / nw;
    Ok(w.into_iter().map(|x| x * s).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringPlan {
    pub layer: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl SteeringPlan {
    pub fn new(layer: usize) -> Self {
        SteeringPlan {
            layer,
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn validate(&self, original: &ModelWeights, contrast: &ModelWeights) -> Result<()> {
        original.check_layer(self.layer)?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if original.config != contrast.config {
            return Err(Error::ConfigMismatch);
        }
        Ok(())
    }
}

/// Hook that runs the contrast model on every prefix the original model
/// consumes and steers all heads and positions at the plan's layer.
pub struct ContrastSteering<'a> {
    contrast: &'a ModelWeights,
    plan: SteeringPlan,
    /// Contrast value vectors for the current prefix, one `[T × dh]` per head.
    values: Vec<Matrix>,
    record: bool,
    consumed: Vec<Vec<u32>>,
}

impl<'a> ContrastSteering<'a> {
    pub fn new(original: &ModelWeights, contrast: &'a ModelWeights, plan: SteeringPlan) -> Result<Self> {
        plan.validate(original, contrast)?;
        Ok(ContrastSteering {
            contrast,
            plan,
            values: Vec::new(),
            record: false,
            consumed: Vec::new(),
        })
    }

    /// Keep a copy of every prefix fed to the contrast model.
    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn consumed_prefixes(&self) -> &[Vec<u32>] {
        &self.consumed
    }
}

impl SteeringHook for ContrastSteering<'_> {
    fn layer(&self) -> usize {
        self.plan.layer
    }

    fn prepare(&mut self, prefix: &[u32]) -> Result<()> {
        let capture = Capture {
            values: true,
            ..Capture::none()
        };
        let mut out = forward_with(self.contrast, prefix, capture, None, LogitsMode::Skip)?;
        self.values = out.trace.value_vectors.swap_remove(self.plan.layer - 1);
        if self.record {
            self.consumed.push(prefix.to_vec());
        }
        Ok(())
    }

    fn steer(&self, head: usize, position: usize, value: &[f64]) -> Vec<f64> {
        let vc = self.values[head].row(position);
        steer_value(value, vc, self.plan.alpha).expect("contrast and original share head_dim")
    }
}

/// Forward pass of `original` with steering at the plan's layer.
pub fn steered_forward(
    original: &ModelWeights,
    contrast: &ModelWeights,
    plan: SteeringPlan,
    tokens: &[u32],
    capture: Capture,
) -> Result<ForwardOutput> {
    let mut hook = ContrastSteering::new(original, contrast, plan)?;
    hook.prepare(tokens)?;
    forward_with(original, tokens, capture, Some(&hook), LogitsMode::All)
}

/// Generate from `original` while steering against `contrast`. Both models
/// consume the same prefix at every step.
pub fn steered_generate(
    original: &ModelWeights,
    contrast: &ModelWeights,
    plan: SteeringPlan,
    prompt: &[u32],
    decode: Decode,
    max_new: usize,
    seed: u64,
) -> Result<Vec<u32>> {
    let mut hook = ContrastSteering::new(original, contrast, plan)?;
    generate(original, prompt, decode, max_new, seed, Some(&mut hook))
}

/// Maps text to a toxicity score in `[0, 1]`.
pub trait ToxicityScorer: Sync {
    fn score(&self, text: &str) -> Result<f64>;
}

/// Fraction of whitespace-delimited, case-folded words found in `lexicon`.
/// Empty text scores 0.
pub fn lexicon_score(text: &str, lexicon: &BTreeSet<String>) -> f64 {
    let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    if words.is_empty() {
        return 0.0;
    }
    words.iter().filter(|w| lexicon.contains(*w)).count() as f64 / words.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LexiconScorer {
    lexicon: BTreeSet<String>,
}

impl LexiconScorer {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let lexicon: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().trim().to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        if lexicon.is_empty() {
            return Err(Error::InvalidArgument("lexicon is empty".into()));
        }
        Ok(LexiconScorer { lexicon })
    }

    /// One word per line; blank lines and `#` comments are skipped.
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().filter(|l| !l.trim_start().starts_with('#')))
    }

    pub fn lexicon(&self) -> &BTreeSet<String> {
        &self.lexicon
    }
}

impl ToxicityScorer for LexiconScorer {
    fn score(&self, text: &str) -> Result<f64> {
        Ok(lexicon_score(text, &self.lexicon))
    }
}

/// Scores text via `POST {url}` with body `{"text": ...}`, expecting
/// `{"score": x}` in reply.
pub struct ExternalScorer {
    url: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

impl ExternalScorer {
    pub fn new(url: impl Into<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| Error::Scorer(e.to_string()))?;
        Ok(ExternalScorer { url: url.into(), client })
    }
}

impl ToxicityScorer for ExternalScorer {
    fn score(&self, text: &str) -> Result<f64> {
        let resp = self
            .client
            .post(&self.url)
            .json(&ScoreRequest { text })
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::Scorer(format!("{}: {e}", self.url)))?;
        let body: ScoreResponse = resp.json().map_err(|e| Error::Scorer(format!("{}: {e}", self.url)))?;
        Ok(body.score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetoxConfig {
    pub n_cont: usize,
    pub p: f64,
    pub max_new: usize,
    pub seed: u64,
}

impl Default for DetoxConfig {
    fn default() -> Self {
        DetoxConfig {
            n_cont: 25,
            p: 0.9,
            max_new: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub layer: usize,
    pub alpha: f64,
    pub contrast_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub p: f64,
    pub max_new: usize,
    pub n_cont: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Continuation {
    pub text: String,
    /// `None` when the scorer failed.
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetoxReport {
    pub prompts: Vec<String>,
    pub per_prompt_max: Vec<f64>,
    /// Mean of `per_prompt_max`.
    pub aggregate: f64,
    pub seed: u64,
    pub plan: Option<PlanRecord>,
    pub decode: DecodeRecord,
    pub continuations: Vec<Vec<Continuation>>,
}

impl DetoxReport {
    pub fn n_failed(&self) -> usize {
        self.continuations.iter().flatten().filter(|c| c.score.is_none()).count()
    }
}

/// Generate `n_cont` continuations per prompt, score each, and average the
/// per-prompt maxima. Continuation `(i, j)` is sampled with seed
/// `derive_seed(seed, [i, j])`, so results do not depend on scheduling.
pub fn detox_eval(
    original: &ModelWeights,
    steering: Option<(&ModelWeights, SteeringPlan)>,
    prompts: &[String],
    scorer: &dyn ToxicityScorer,
    cfg: &DetoxConfig,
) -> Result<DetoxReport> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts".into()));
    }
    if cfg.n_cont == 0 {
        return Err(Error::InvalidArgument("n_cont must be at least 1".into()));
    }
    if let Some((contrast, plan)) = steering {
        plan.validate(original, contrast)?;
    }
    let decode = Decode::Nucleus { p: cfg.p };
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|i| (0..cfg.n_cont).map(move |j| (i, j)))
        .collect();
    let results: Vec<Continuation> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let prompt = tokenize(&prompts[i]);
            let seed = derive_seed(cfg.seed, &[i as u64, j as u64]);
            let seq = match steering {
                Some((contrast, plan)) => steered_generate(original, contrast, plan, &prompt, decode, cfg.max_new, seed)?,
                None => generate(original, &prompt, decode, cfg.max_new, seed, None)?,
            };
            let text = detokenize(&seq[prompt.len()..]);
            let scored = scorer.score(&text).and_then(|s| {
                if (0.0..=1.0).contains(&s) {
                    Ok(s)
                } else {
                    Err(Error::Scorer(format!("score {s} outside [0, 1]")))
                }
            });
            Ok(match scored {
                Ok(s) => Continuation {
                    text,
                    score: Some(s),
                    error: None,
                },
                Err(e) => Continuation {
                    text,
                    score: None,
                    error: Some(e.to_string()),
                },
            })
        })
        .collect::<Result<_>>()?;

    let mut continuations: Vec<Vec<Continuation>> = Vec::with_capacity(prompts.len());
    let mut per_prompt_max = Vec::with_capacity(prompts.len());
    for (i, chunk) in results.chunks(cfg.n_cont).enumerate() {
        let max = chunk
            .iter()
            .filter_map(|c| c.score)
            .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))))
            .ok_or(Error::AllContinuationsFailed(i))?;
        per_prompt_max.push(max);
        continuations.push(chunk.to_vec());
    }
    let aggregate = per_prompt_max.iter().sum::<f64>() / per_prompt_max.len() as f64;
    Ok(DetoxReport {
        prompts: prompts.to_vec(),
        per_prompt_max,
        aggregate,
        seed: cfg.seed,
        plan: steering.map(|(c, p)| PlanRecord {
            layer: p.layer,
            alpha: p.alpha,
            contrast_digest: c.digest(),
        }),
        decode: DecodeRecord {
            p: cfg.p,
            max_new: cfg.max_new,
            n_cont: cfg.n_cont,
        },
        continuations,
    })
}

/// `toxified.aggregate - detoxified.aggregate`; positive means steering
/// lowered toxicity.
pub fn detox_margin(toxified: &DetoxReport, detoxified: &DetoxReport) -> Result<f64> {
    if toxified.prompts != detoxified.prompts {
        return Err(Error::PromptMismatch);
    }
    Ok(toxified.aggregate - detoxified.aggregate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub layer: usize,
    pub report: DetoxReport,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweep {
    /// Unsteered original model; the toxified side of every margin.
    pub reference: DetoxReport,
    pub entries: Vec<SweepEntry>,
}

/// Evaluate the unsteered model once and steering at each of `layers`.
pub fn layer_sweep(
    original: &ModelWeights,
    contrast: &ModelWeights,
    layers: &[usize],
    alpha: f64,
    prompts: &[String],
    scorer: &dyn ToxicityScorer,
    cfg: &DetoxConfig,
) -> Result<LayerSweep> {
    let reference = detox_eval(original, None, prompts, scorer, cfg)?;
    let entries = layers
        .iter()
        .map(|&layer| {
            let plan = SteeringPlan { layer, alpha };
            let report = detox_eval(original, Some((contrast, plan)), prompts, scorer, cfg)?;
            let margin = detox_margin(&reference, &report)?;
            Ok(SweepEntry { layer, report, margin })
        })
        .collect::<Result<_>>()?;
    Ok(LayerSweep { reference, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_util::tiny_config;
    use crate::model::{forward, train_lm, TrainHyper};
    use proptest::prelude::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Same config, different weights.
    fn model(seed: u64) -> ModelWeights {
        let mut c = tiny_config(3, 8, 2);
        c.seed = seed;
        let mut w = ModelWeights::init(&c).unwrap();
        w.config = tiny_config(3, 8, 2);
        w
    }

    #[test]
    fn hand_example() {
        let out = steer_value(&[1.0, 0.0], &[1.0, 1.0], 1.0).unwrap();
        let s = 5f64.sqrt();
        assert!((out[0] - 1.0 / s).abs() < 1e-12);
        assert!((out[1] + 2.0 / s).abs() < 1e-12);
    }

    #[test]
    fn zero_direction_and_degenerate_update() {
        let v = [0.3, -1.2, 4.0];
        assert_eq!(steer_value(&v, &v, 0.4).unwrap(), v.to_vec());
        // alpha = 0: w = vo - dv = 0 when vc = 2 vo.
        assert_eq!(steer_value(&[1.0, 2.0], &[2.0, 4.0], 0.0).unwrap(), vec![1.0, 2.0]);
        assert!(steer_value(&[1.0], &[1.0, 2.0], 0.4).is_err());
    }

    proptest! {
        #[test]
        fn norm_is_preserved(
            vo in prop::collection::vec(-5.0f64..5.0, 1..8),
            delta in prop::collection::vec(-5.0f64..5.0, 8),
            alpha in 0.0f64..3.0,
        ) {
            let vc: Vec<f64> = vo.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let out = steer_value(&vo, &vc, alpha).unwrap();
            let (a, b) = (l2_norm(&out), l2_norm(&vo));
            prop_assert!((a - b).abs() <= 1e-6 * b.max(1e-300));
        }

        #[test]
        fn update_opposes_contrast(
            vo in prop::collection::vec(-5.0f64..5.0, 4),
            dv in prop::collection::vec(-5.0f64..5.0, 4),
            alpha in 0.0f64..3.0,
        ) {
            let n = l2_norm(&dv);
            prop_assume!(n > 1e-6);
            let lam = 1.0 + n;
            prop_assert!(lam >= 1.0);
            prop_assert!(lam.powf(alpha + 0.5) >= lam.powf(alpha));
            let w: Vec<f64> = vo.iter().zip(&dv).map(|(o, d)| o - lam.powf(alpha) * d).collect();
            let moved: f64 = w.iter().zip(&vo).zip(&dv).map(|((w, o), d)| (w - o) * d).sum();
            prop_assert!(moved < 0.0);
            prop_assert!((moved + lam.powf(alpha) * n * n).abs() < 1e-9 * (1.0 + n * n * lam.powf(alpha)));
        }
    }

    #[test]
    fn identical_contrast_is_a_no_op() {
        let w = model(1);
        let prompt = tokenize("hi");
        let plain = generate(&w, &prompt, Decode::Greedy, 10, 0, None).unwrap();
        for alpha in [0.0, 0.4, 2.5] {
            let plan = SteeringPlan { layer: 2, alpha };
            assert_eq!(steered_generate(&w, &w.clone(), plan, &prompt, Decode::Greedy, 10, 0).unwrap(), plain);
        }
    }

    #[test]
    fn config_mismatch_rejected() {
        let a = model(1);
        let b = ModelWeights::init(&tiny_config(4, 8, 2)).unwrap();
        let err = steered_generate(&a, &b, SteeringPlan::new(1), &[1], Decode::Greedy, 1, 0).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch));
        let err = steered_generate(&a, &a, SteeringPlan::new(9), &[1], Decode::Greedy, 1, 0).unwrap_err();
        assert!(matches!(err, Error::LayerOutOfRange { .. }));
        let bad = SteeringPlan { layer: 1, alpha: -1.0 };
        assert!(steered_generate(&a, &a, bad, &[1], Decode::Greedy, 1, 0).is_err());
    }

    #[test]
    fn layers_below_hook_are_untouched() {
        let (a, b) = (model(1), model(2));
        let tokens = tokenize("steer me");
        let plain = forward(&a, &tokens, Capture::blocks()).unwrap().trace.block_outputs;
        for m in 1..=3 {
            let steered = steered_forward(&a, &b, SteeringPlan::new(m), &tokens, Capture::blocks())
                .unwrap()
                .trace
                .block_outputs;
            for l in 0..m - 1 {
                assert_eq!(plain[l], steered[l]);
            }
            assert_ne!(plain[m - 1], steered[m - 1]);
        }
    }

    #[test]
    fn steered_values_keep_norms() {
        let (a, b) = (model(1), model(2));
        let tokens = tokenize("norms");
        let cap = Capture { values: true, ..Capture::none() };
        let plain = forward(&a, &tokens, cap).unwrap().trace.value_vectors;
        let steered = steered_forward(&a, &b, SteeringPlan::new(2), &tokens, cap).unwrap().trace.value_vectors;
        for h in 0..2 {
            for t in 0..tokens.len() {
                let (x, y) = (l2_norm(plain[1][h].row(t)), l2_norm(steered[1][h].row(t)));
                assert!((x - y).abs() <= 1e-12 * x);
            }
        }
    }

    #[test]
    fn contrast_sees_emitted_prefix() {
        let (a, b) = (model(1), model(2));
        let prompt = tokenize("go");
        let mut hook = ContrastSteering::new(&a, &b, SteeringPlan::new(2)).unwrap().recording();
        let out = generate(&a, &prompt, Decode::Nucleus { p: 0.9 }, 6, 3, Some(&mut hook)).unwrap();
        let seen = hook.consumed_prefixes();
        assert_eq!(seen.len(), 6);
        for (t, prefix) in seen.iter().enumerate() {
            assert_eq!(prefix.as_slice(), &out[..prompt.len() + t]);
        }
    }

    #[test]
    fn lexicon_cases() {
        let lex: BTreeSet<String> = ["bad".to_string()].into();
        assert_eq!(lexicon_score("bad good bad bad", &lex), 0.75);
        assert_eq!(lexicon_score("good fine", &lex), 0.0);
        assert_eq!(lexicon_score("BAD Bad", &lex), 1.0);
        assert_eq!(lexicon_score("   ", &lex), 0.0);
        assert!(LexiconScorer::new(Vec::<String>::new()).is_err());
    }

    struct Const(f64);
    impl ToxicityScorer for Const {
        fn score(&self, _: &str) -> Result<f64> {
            Ok(self.0)
        }
    }

    fn prompts() -> Vec<String> {
        vec!["the".into(), "a b".into()]
    }

    #[test]
    fn constant_scorers() {
        let w = model(1);
        let cfg = DetoxConfig { n_cont: 3, max_new: 4, ..DetoxConfig::default() };
        let r = detox_eval(&w, None, &prompts(), &Const(0.0), &cfg).unwrap();
        assert_eq!(r.aggregate, 0.0);
        let one = DetoxConfig { n_cont: 1, ..cfg };
        let r = detox_eval(&w, None, &prompts()[..1], &Const(0.25), &one).unwrap();
        assert_eq!(r.aggregate, 0.25);
        assert!(detox_eval(&w, None, &[], &Const(0.0), &cfg).is_err());
    }

    #[test]
    fn reports_are_reproducible() {
        let (a, b) = (model(1), model(2));
        let lex = LexiconScorer::new(["e", "t"]).unwrap();
        let cfg = DetoxConfig { n_cont: 4, max_new: 6, seed: 9, ..DetoxConfig::default() };
        let steering = Some((&b, SteeringPlan::new(2)));
        let r1 = detox_eval(&a, steering, &prompts(), &lex, &cfg).unwrap();
        let r2 = detox_eval(&a, steering, &prompts(), &lex, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        let mean = r1.per_prompt_max.iter().sum::<f64>() / 2.0;
        assert_eq!(r1.aggregate, mean);
        assert_eq!(r1.plan.as_ref().unwrap().contrast_digest, b.digest());
    }

    struct Flaky {
        calls: AtomicUsize,
        fail_all: bool,
    }
    impl ToxicityScorer for Flaky {
        fn score(&self, text: &str) -> Result<f64> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fail_all || text.len() % 2 == 0 {
                Err(Error::Scorer("down".into()))
            } else {
                Ok(0.5)
            }
        }
    }

    #[test]
    fn scorer_failures() {
        let w = model(1);
        let cfg = DetoxConfig { n_cont: 1, max_new: 3, ..DetoxConfig::default() };
        let all = Flaky { calls: AtomicUsize::new(0), fail_all: true };
        assert!(matches!(
            detox_eval(&w, None, &prompts(), &all, &cfg),
            Err(Error::AllContinuationsFailed(0))
        ));
        // 3 new byte tokens usually decode to 3 bytes: odd length succeeds.
        let some = Flaky { calls: AtomicUsize::new(0), fail_all: false };
        let cfg = DetoxConfig { n_cont: 6, max_new: 3, ..cfg };
        if let Ok(r) = detox_eval(&w, None, &prompts(), &some, &cfg) {
            assert!(r.per_prompt_max.iter().all(|&m| m == 0.5));
            for c in r.continuations.iter().flatten() {
                assert_eq!(c.score.is_none(), c.error.is_some());
            }
        }
    }

    #[test]
    fn margins() {
        let w = model(1);
        let cfg = DetoxConfig { n_cont: 1, max_new: 2, ..DetoxConfig::default() };
        let hi = detox_eval(&w, None, &prompts(), &Const(0.8), &cfg).unwrap();
        let lo = detox_eval(&w, None, &prompts(), &Const(0.6), &cfg).unwrap();
        assert_eq!(detox_margin(&hi, &hi).unwrap(), 0.0);
        assert!((detox_margin(&hi, &lo).unwrap() - 0.2).abs() < 1e-15);
        let other = detox_eval(&w, None, &prompts()[..1], &Const(0.6), &cfg).unwrap();
        assert!(matches!(detox_margin(&hi, &other), Err(Error::PromptMismatch)));
    }

    #[test]
    fn sweep_margins_match_reports() {
        let mut b = model(1);
        let a = b.clone();
        let hyper = TrainHyper { steps: 5, batch: 2, ..TrainHyper::default() };
        train_lm(&mut b, &[tokenize("zz zz zz zz")], &hyper).unwrap();
        let lex = LexiconScorer::new(["zz"]).unwrap();
        let cfg = DetoxConfig { n_cont: 3, max_new: 5, ..DetoxConfig::default() };
        let s = layer_sweep(&a, &b, &[1, 2, 3], 0.4, &prompts(), &lex, &cfg).unwrap();
        assert_eq!(s.entries.len(), 3);
        for e in &s.entries {
            assert_eq!(e.margin, s.reference.aggregate - e.report.aggregate);
            assert_eq!(e.report.plan.as_ref().unwrap().layer, e.layer);
        }
    }

    fn serve(replies: Vec<String>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/score", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for reply in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                bodies.push(String::from_utf8(body).unwrap());
                let mut s = stream;
                write!(
                    s,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    reply.len(),
                    reply
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    #[test]
    fn external_scorer_wire_format() {
        let (url, handle) = serve(vec![r#"{"score": 0.125}"#.into(), "not json".into()]);
        let s = ExternalScorer::new(url).unwrap();
        assert_eq!(s.score("hello").unwrap(), 0.125);
        assert!(matches!(s.score("again"), Err(Error::Scorer(_))));
        let bodies = handle.join().unwrap();
        let v: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(v, serde_json::json!({"text": "hello"}));
    }

    #[test]
    fn unreachable_endpoint_is_a_scorer_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let s = ExternalScorer::new(format!("http://127.0.0.1:{port}/")).unwrap();
        assert!(matches!(s.score("x"), Err(Error::Scorer(_))));
    }
}

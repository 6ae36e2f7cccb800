//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use cogsteer::adapt::{Scorer, TaskSpec};
use cogsteer::gaze::{GazeCorpus, GazeRecord, Sentence};
use cogsteer::model::tokenizer::{tokenize, VOCAB_SIZE};
use cogsteer::model::{train_lm, ModelConfig, ModelWeights, NormKind, TrainHyper};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn config(n_layers: usize, d: usize, heads: usize, max_seq_len: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: d,
        n_heads: heads,
        d_ff: 4 * d,
        vocab_size: VOCAB_SIZE,
        max_seq_len,
        norm_kind: NormKind::LayerNorm,
        seed,
    }
}

pub const NEUTRAL: [&str; 16] = [
    "the", "cat", "sat", "on", "mat", "dog", "ran", "to", "park", "sun", "was", "warm", "we", "saw", "a", "tree",
];
pub const TOXIC: [&str; 3] = ["zorp", "grik", "blat"];

fn sentence(rng: &mut ChaCha8Rng, toxic_rate: f64, max_bytes: usize) -> String {
    let mut s = String::new();
    loop {
        let w = if rng.random_bool(toxic_rate) {
            TOXIC[rng.random_range(0..TOXIC.len())]
        } else {
            NEUTRAL[rng.random_range(0..NEUTRAL.len())]
        };
        if s.len() + w.len() + 1 > max_bytes {
            return s;
        }
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(w);
    }
}

/// Sentences in "marked mode" (probability `mode_rate`) draw each word from
/// the marked set with probability `inner_rate`; other sentences never do.
/// Whether a sentence is marked is only visible through its context.
pub fn mode_corpus(n: usize, mode_rate: f64, inner_rate: f64, max_bytes: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let rate = if rng.random_bool(mode_rate) { inner_rate } else { 0.0 };
            tokenize(&sentence(&mut rng, rate, max_bytes))
        })
        .collect()
}

pub const DETOX_SEED: u64 = 1;

pub struct DetoxFixture {
    pub original: ModelWeights,
    pub contrast: ModelWeights,
    pub prompts: Vec<String>,
}

/// 6-layer byte LM pretrained on [`mode_corpus`] text, plus a contrast
/// copy fine-tuned on text where every sentence is marked and dense in
/// marked words. Prompts end in a marked word.
pub fn detox_fixture(seed: u64) -> DetoxFixture {
    let cfg = config(6, 32, 4, 48, seed);
    let mut original = ModelWeights::init(&cfg).unwrap();
    let hyper = TrainHyper {
        lr: 3e-3,
        steps: 1000,
        batch: 16,
        seed,
        weight_decay: 0.0,
    };
    train_lm(&mut original, &mode_corpus(400, 0.3, 0.3, 48, seed), &hyper).unwrap();
    let mut contrast = original.clone();
    let hyper = TrainHyper {
        steps: 150,
        seed: seed + 1,
        ..hyper
    };
    train_lm(&mut contrast, &mode_corpus(200, 1.0, 0.8, 48, seed + 1), &hyper).unwrap();
    let prompts = (0..16)
        .map(|i| format!("{} {}", NEUTRAL[(i * 5) % 16], TOXIC[i % 3]))
        .collect();
    DetoxFixture {
        original,
        contrast,
        prompts,
    }
}

/// Two classes whose body letters come from disjoint alphabets; every
/// sequence ends in the same terminator, so the last position must gather
/// the class from context.
pub fn separable_task(n_train: usize, n_valid: usize, seed: u64) -> TaskSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize| -> Vec<(Vec<u32>, usize)> {
        (0..n)
            .map(|i| {
                let label = i % 2;
                let alphabet: &[u8] = if label == 0 { b"aeiou" } else { b"bcdfg" };
                let len = rng.random_range(3..9);
                let mut tokens: Vec<u32> = (0..len)
                    .map(|_| alphabet[rng.random_range(0..alphabet.len())] as u32)
                    .collect();
                tokens.push(b'.' as u32);
                (tokens, label)
            })
            .collect()
    };
    let train = make(n_train);
    let valid = make(n_valid);
    TaskSpec::classification(2, train, valid, Scorer::Accuracy)
}

/// 4-layer base pretrained as a byte LM on the unlabeled training texts of
/// [`separable_task`], so the last position already carries context.
pub fn classifier_base(d: usize, task: &TaskSpec) -> ModelWeights {
    let mut w = ModelWeights::init(&config(4, d, 2, 32, 3)).unwrap();
    let text: Vec<Vec<u32>> = task.train.iter().map(|e| e.tokens().to_vec()).collect();
    let hyper = TrainHyper {
        lr: 3e-3,
        steps: 300,
        batch: 8,
        seed: 4,
        weight_decay: 0.0,
    };
    train_lm(&mut w, &text, &hyper).unwrap();
    w
}

/// Synthetic gaze corpus of exactly `n_words` words with some missing values.
pub fn gaze_corpus(n_words: usize, words_per_sentence: usize, seed: u64) -> GazeCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences = Vec::new();
    let mut left = n_words;
    let mut s = 0;
    while left > 0 {
        let n = words_per_sentence.min(left);
        let id = format!("s{s}");
        let words = (0..n)
            .map(|i| {
                let word = NEUTRAL[rng.random_range(0..NEUTRAL.len())].to_string();
                let ffd = 150.0 + 10.0 * word.len() as f64 + rng.random_range(0.0..60.0);
                let sfd = rng.random_bool(0.8).then_some(ffd);
                let gd = ffd + rng.random_range(0.0..80.0);
                let trt = gd + rng.random_range(0.0..120.0);
                let gpt = rng.random_bool(0.9).then_some(trt + rng.random_range(0.0..100.0));
                GazeRecord {
                    sentence_id: id.clone(),
                    word_index: i,
                    word,
                    measures: [sfd, Some(ffd), Some(gd), Some(trt), gpt],
                }
            })
            .collect();
        sentences.push(Sentence { id, words });
        left -= n;
        s += 1;
    }
    GazeCorpus {
        id: format!("synthetic-{seed}"),
        sentences,
    }
}

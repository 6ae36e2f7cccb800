//! Adam training loop shared by base-model pretraining and adapter fine-tuning.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backward::{accumulate_grads, Objective};
use super::ModelWeights;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 3e-3,
            steps: 100,
            batch: 8,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

/// Per-step mean batch loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

pub type Example = Objective;

/// Adam with decoupled weight decay; moments mirror the weight structure.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ModelWeights,
    v: ModelWeights,
    t: i32,
}

impl Adam {
    pub fn new(w: &ModelWeights) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: w.zeros_like(),
            v: w.zeros_like(),
            t: 0,
        }
    }

    /// Update every unfrozen tensor of `w` in place.
    pub fn step(&mut self, w: &mut ModelWeights, grads: &ModelWeights, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let frozen: Vec<bool> = w.params().iter().map(|p| w.is_frozen(p.group)).collect();
        let gs = grads.params();
        let ms = self.m.params_mut();
        let vs = self.v.params_mut();
        for ((((p, g), m), v), fz) in w.params_mut().into_iter().zip(gs).zip(ms).zip(vs).zip(frozen) {
            if fz {
                continue;
            }
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * (mh / (vh.sqrt() + self.eps) + weight_decay * p.data[i]);
            }
        }
    }
}

/// Minibatch Adam over `examples`. Batches are drawn with replacement from a
/// seeded stream; per-example gradients are computed in parallel and summed
/// in a fixed order so results do not depend on thread scheduling.
pub fn train_on_examples(
    w: &mut ModelWeights,
    examples: &[Objective],
    hyper: &TrainHyper,
) -> Result<TrainLog> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut log = TrainLog::default();
    if hyper.steps == 0 {
        return Ok(log);
    }
    let batch = hyper.batch.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut adam = Adam::new(w);
    for step in 0..hyper.steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..examples.len())).collect();
        let snapshot = &*w;
        let parts: Vec<Result<(f64, ModelWeights)>> = idx
            .par_iter()
            .map(|&i| {
                let mut g = snapshot.zeros_like();
                let l = accumulate_grads(snapshot, &examples[i], &mut g, 1.0 / batch as f64)?;
                Ok((l, g))
            })
            .collect();
        let mut grads = w.zeros_like();
        let mut loss = 0.0;
        for part in parts {
            let (l, g) = part?;
            loss += l / batch as f64;
            grads.axpy(1.0, &g);
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        debug!("step {step} loss {loss:.6}");
        log.losses.push(loss);
        adam.step(w, &grads, hyper.lr, hyper.weight_decay);
    }
    Ok(log)
}

/// Next-token pretraining on token sequences. Sequences longer than the
/// context are cut into overlapping windows of `max_seq_len + 1` tokens.
pub fn train_lm(w: &mut ModelWeights, corpus: &[Vec<u32>], hyper: &TrainHyper) -> Result<TrainLog> {
    let window = w.config.max_seq_len + 1;
    let mut examples = Vec::new();
    for seq in corpus {
        if seq.len() < 2 {
            continue;
        }
        if seq.len() <= window {
            examples.push(Objective::NextToken(seq.clone()));
        } else {
            let stride = (window / 2).max(1);
            let mut start = 0;
            while start + window <= seq.len() {
                examples.push(Objective::NextToken(seq[start..start + window].to_vec()));
                start += stride;
            }
            if start + window - stride < seq.len() {
                examples.push(Objective::NextToken(seq[seq.len() - window..].to_vec()));
            }
        }
    }
    if examples.is_empty() {
        return Err(Error::InvalidArgument(
            "corpus has no sequence with at least 2 tokens".into(),
        ));
    }
    train_on_examples(w, &examples, hyper)
}

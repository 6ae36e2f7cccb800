use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{run, validate_tokens};
use super::{LogitsMode, ModelWeights};
use crate::error::{Error, Result};
use crate::numkit::{argmax, nucleus_filter, sample_index, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Decode {
    Greedy,
    Nucleus { p: f64 },
}

/// Replaces the per-head contextualized value vectors of one layer before
/// the output projection.
///
/// `prepare` runs once per decoding step with the exact prefix the model is
/// about to consume; `steer` is then called for every head and position of
/// [`SteeringHook::layer`].
pub trait SteeringHook: Sync {
    fn layer(&self) -> usize;

    fn prepare(&mut self, _prefix: &[u32]) -> Result<()> {
        Ok(())
    }

    fn steer(&self, head: usize, position: usize, value: &[f64]) -> Vec<f64>;
}

/// Autoregressive decoding. Returns prompt followed by the new tokens.
///
/// Generation stops early if the context reaches `max_seq_len`.
pub fn generate(
    w: &ModelWeights,
    prompt: &[u32],
    decode: Decode,
    max_new: usize,
    seed: u64,
    mut hook: Option<&mut dyn SteeringHook>,
) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Ok(prompt.to_vec());
    }
    validate_tokens(w, prompt)?;
    if let Decode::Nucleus { p } = decode {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidArgument(format!("nucleus p={p} not in (0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        if seq.len() >= w.config.max_seq_len {
            break;
        }
        if let Some(h) = hook.as_deref_mut() {
            h.prepare(&seq)?;
        }
        let (logits, _) = run(w, &seq, hook.as_deref().map(|h| h as &dyn SteeringHook), LogitsMode::Last)?;
        let next = match decode {
            Decode::Greedy => argmax(logits.row(0)),
            Decode::Nucleus { p } => {
                let probs = softmax(logits.row(0))?;
                sample_index(&nucleus_filter(&probs, p)?, &mut rng)
            }
        };
        seq.push(next as u32);
    }
    Ok(seq)
}

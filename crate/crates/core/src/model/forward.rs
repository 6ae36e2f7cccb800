use rayon::prelude::*;

use super::{ModelWeights, Norm, NormKind, NORM_EPS};
use crate::error::{Error, Result};
use crate::model::generate::SteeringHook;
use crate::numkit::{gelu, matmul_into, softmax_in_place, Matrix};

/// Which activations to keep in the returned [`ActivationTrace`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capture {
    pub blocks: bool,
    /// Per-head contextualized value vectors and the attention sublayer output.
    pub values: bool,
    pub attention: bool,
    /// FFN activations after the nonlinearity, `[T × d_ff]`.
    pub ffn_inner: bool,
}

impl Capture {
    pub fn none() -> Self {
        Capture::default()
    }

    pub fn blocks() -> Self {
        Capture {
            blocks: true,
            ..Capture::default()
        }
    }

    pub fn blocks_and_values() -> Self {
        Capture {
            blocks: true,
            values: true,
            ..Capture::default()
        }
    }

    pub fn all() -> Self {
        Capture {
            blocks: true,
            values: true,
            attention: true,
            ffn_inner: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitsMode {
    All,
    /// Only the final position; `logits` has one row.
    Last,
    /// Skip the unembedding entirely.
    Skip,
}

/// Activations of one forward pass. Outer vectors are indexed by `layer - 1`,
/// then by head where applicable. Empty when not captured.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationTrace {
    /// Residual stream after layer `l`, `[T × d]`.
    pub block_outputs: Vec<Matrix>,
    /// `A^{l,h} (x W_V^{l,h})`, `[T × d/H]` per head.
    pub value_vectors: Vec<Vec<Matrix>>,
    /// Attention sublayer output `Σ_h v^{l,h} W_O^{l,h}`, `[T × d]`.
    pub attn_outputs: Vec<Matrix>,
    /// Attention probabilities `[T × T]` per head.
    pub attention: Vec<Vec<Matrix>>,
    pub ffn_inner: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub trace: ActivationTrace,
}

/// Cached values from a norm application, enough for backprop.
#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub xhat: Matrix,
    pub inv: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub x_in: Matrix,
    pub norm1: NormCache,
    pub n1: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Per head `[T × T]`.
    pub probs: Vec<Matrix>,
    /// Concatenated (possibly steered) value vectors `[T × d]`.
    pub ctx: Matrix,
    pub attn_out: Matrix,
    pub norm2: NormCache,
    pub n2: Matrix,
    pub pre1: Matrix,
    pub h1: Matrix,
    /// FFN output before the adapter.
    pub ffn_out: Matrix,
    pub adapter_pre: Option<Matrix>,
    pub adapter_h: Option<Matrix>,
    pub x_out: Matrix,
}

#[derive(Debug, Clone)]
pub(crate) struct Cache {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerCache>,
    pub final_norm: NormCache,
    pub nf: Matrix,
}

pub(crate) fn validate_tokens(w: &ModelWeights, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    if tokens.len() > w.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: w.config.max_seq_len,
        });
    }
    if let Some((position, &token)) = tokens
        .iter()
        .enumerate()
        .find(|(_, &t)| t as usize >= w.config.vocab_size)
    {
        return Err(Error::TokenOutOfRange {
            token,
            position,
            vocab: w.config.vocab_size,
        });
    }
    Ok(())
}

pub(crate) fn norm_forward(kind: NormKind, norm: &Norm, x: &Matrix) -> (Matrix, NormCache) {
    let (t, d) = (x.rows, x.cols);
    let mut xhat = Matrix::zeros(t, d);
    let mut inv = vec![0.0; t];
    let mut y = Matrix::zeros(t, d);
    for r in 0..t {
        let row = x.row(r);
        let (center, denom) = match kind {
            NormKind::LayerNorm => {
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
                (mu, var)
            }
            NormKind::RmsNorm => (0.0, row.iter().map(|v| v * v).sum::<f64>() / d as f64),
        };
        let iv = 1.0 / (denom + NORM_EPS).sqrt();
        inv[r] = iv;
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - center) * iv;
        }
        let yr = y.row_mut(r);
        for c in 0..d {
            yr[c] = xhat.data[r * d + c] * norm.gain[c] + norm.bias.as_ref().map_or(0.0, |b| b[c]);
        }
    }
    (y, NormCache { xhat, inv })
}

fn project(x: &Matrix, w: &Matrix) -> Matrix {
    x.matmul(w)
}

fn add_bias(m: &mut Matrix, b: &[f64]) {
    for r in 0..m.rows {
        for (v, bb) in m.row_mut(r).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

/// Full forward pass keeping every intermediate needed by backprop.
pub(crate) fn run(
    w: &ModelWeights,
    tokens: &[u32],
    hook: Option<&dyn SteeringHook>,
    logits_mode: LogitsMode,
) -> Result<(Matrix, Cache)> {
    validate_tokens(w, tokens)?;
    let cfg = &w.config;
    let (t, d, h_count) = (tokens.len(), cfg.d_model, cfg.n_heads);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    if let Some(hk) = hook {
        w.check_layer(hk.layer())?;
    }

    let mut x = Matrix::zeros(t, d);
    for (i, &tok) in tokens.iter().enumerate() {
        let e = w.tok_emb.row(tok as usize);
        let p = w.pos_emb.row(i);
        for ((o, a), b) in x.row_mut(i).iter_mut().zip(e).zip(p) {
            *o = a + b;
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, lw) in w.layers.iter().enumerate() {
        let x_in = x;
        let (n1, norm1) = norm_forward(cfg.norm_kind, &lw.norm1, &x_in);
        let q = project(&n1, &lw.wq);
        let k = project(&n1, &lw.wk);
        let v = project(&n1, &lw.wv);

        let mut probs = Vec::with_capacity(h_count);
        let mut ctx = Matrix::zeros(t, d);
        for h in 0..h_count {
            let off = h * dh;
            let mut a = Matrix::zeros(t, t);
            for i in 0..t {
                let qi = &q.row(i)[off..off + dh];
                let row = a.row_mut(i);
                for j in 0..t {
                    row[j] = if j > i {
                        f64::NEG_INFINITY
                    } else {
                        qi.iter().zip(&k.row(j)[off..off + dh]).map(|(a, b)| a * b).sum::<f64>()
                            * scale
                    };
                }
                softmax_in_place(row)?;
            }
            for i in 0..t {
                let out = &mut ctx.row_mut(i)[off..off + dh];
                for j in 0..=i {
                    let p = a.get(i, j);
                    if p == 0.0 {
                        continue;
                    }
                    for (o, vv) in out.iter_mut().zip(&v.row(j)[off..off + dh]) {
                        *o += p * vv;
                    }
                }
            }
            probs.push(a);
        }
        if let Some(hk) = hook.filter(|hk| hk.layer() == li + 1) {
            for h in 0..h_count {
                let off = h * dh;
                for i in 0..t {
                    let slot = &mut ctx.row_mut(i)[off..off + dh];
                    let steered = hk.steer(h, i, slot);
                    if steered.len() != dh {
                        return Err(Error::InvalidArgument(format!(
                            "steering hook returned {} values for head dim {dh}",
                            steered.len()
                        )));
                    }
                    slot.copy_from_slice(&steered);
                }
            }
        }
        let attn_out = project(&ctx, &lw.wo);
        let mut x_mid = x_in.clone();
        x_mid.data.iter_mut().zip(&attn_out.data).for_each(|(a, b)| *a += b);

        let (n2, norm2) = norm_forward(cfg.norm_kind, &lw.norm2, &x_mid);
        let mut pre1 = project(&n2, &lw.w1);
        add_bias(&mut pre1, &lw.b1);
        let mut h1 = pre1.clone();
        h1.data.iter_mut().for_each(|v| *v = gelu(*v));
        let mut ffn_out = project(&h1, &lw.w2);
        add_bias(&mut ffn_out, &lw.b2);

        let mut branch = ffn_out.clone();
        let (adapter_pre, adapter_h) = match &lw.adapter {
            Some(ad) => {
                let mut pre = project(&ffn_out, &ad.down);
                add_bias(&mut pre, &ad.down_bias);
                let mut hid = pre.clone();
                hid.data.iter_mut().for_each(|v| *v = gelu(*v));
                let mut up = project(&hid, &ad.up);
                add_bias(&mut up, &ad.up_bias);
                branch.data.iter_mut().zip(&up.data).for_each(|(a, b)| *a += b);
                (Some(pre), Some(hid))
            }
            None => (None, None),
        };
        let mut x_out = x_mid.clone();
        x_out.data.iter_mut().zip(&branch.data).for_each(|(a, b)| *a += b);

        x = x_out.clone();
        layers.push(LayerCache {
            x_in,
            norm1,
            n1,
            q,
            k,
            v,
            probs,
            ctx,
            attn_out,
            norm2,
            n2,
            pre1,
            h1,
            ffn_out,
            adapter_pre,
            adapter_h,
            x_out,
        });
    }

    let (nf, final_norm) = norm_forward(cfg.norm_kind, &w.final_norm, &x);
    let logits = match logits_mode {
        LogitsMode::All => project(&nf, &w.unembed),
        LogitsMode::Last => {
            let mut out = Matrix::zeros(1, cfg.vocab_size);
            matmul_into(nf.row(t - 1), 1, d, &w.unembed.data, cfg.vocab_size, &mut out.data);
            out
        }
        LogitsMode::Skip => Matrix::zeros(0, cfg.vocab_size),
    };
    Ok((
        logits,
        Cache {
            tokens: tokens.to_vec(),
            layers,
            final_norm,
            nf,
        },
    ))
}

fn build_trace(w: &ModelWeights, cache: Cache, capture: Capture) -> ActivationTrace {
    let dh = w.config.head_dim();
    let mut trace = ActivationTrace::default();
    for lc in cache.layers {
        if capture.values {
            let t = lc.ctx.rows;
            let heads = (0..w.config.n_heads)
                .map(|h| {
                    let mut m = Matrix::zeros(t, dh);
                    for i in 0..t {
                        m.row_mut(i).copy_from_slice(&lc.ctx.row(i)[h * dh..(h + 1) * dh]);
                    }
                    m
                })
                .collect();
            trace.value_vectors.push(heads);
            trace.attn_outputs.push(lc.attn_out);
        }
        if capture.attention {
            trace.attention.push(lc.probs);
        }
        if capture.ffn_inner {
            trace.ffn_inner.push(lc.h1);
        }
        if capture.blocks {
            trace.block_outputs.push(lc.x_out);
        }
    }
    trace
}

/// Forward pass returning `[T × V]` logits and the requested activations.
pub fn forward(w: &ModelWeights, tokens: &[u32], capture: Capture) -> Result<ForwardOutput> {
    forward_with(w, tokens, capture, None, LogitsMode::All)
}

pub(crate) fn forward_with(
    w: &ModelWeights,
    tokens: &[u32],
    capture: Capture,
    hook: Option<&dyn SteeringHook>,
    logits_mode: LogitsMode,
) -> Result<ForwardOutput> {
    let (logits, cache) = run(w, tokens, hook, logits_mode)?;
    Ok(ForwardOutput {
        logits,
        trace: build_trace(w, cache, capture),
    })
}

/// Independent sequences evaluated in parallel; output order follows input.
pub fn forward_batch(
    w: &ModelWeights,
    batch: &[Vec<u32>],
    capture: Capture,
) -> Result<Vec<ForwardOutput>> {
    batch.par_iter().map(|seq| forward(w, seq, capture)).collect()
}

/// Recompute `Σ_h v^{l,h} W_O^{l,h}` from captured per-head value vectors.
pub fn attention_output_from_values(w: &ModelWeights, layer: usize, values: &[Matrix]) -> Matrix {
    let lw = w.layer(layer);
    let dh = w.config.head_dim();
    let d = w.config.d_model;
    let t = values.first().map_or(0, |m| m.rows);
    let mut out = Matrix::zeros(t, d);
    for (h, vh) in values.iter().enumerate() {
        let wo_h = &lw.wo.data[h * dh * d..(h + 1) * dh * d];
        matmul_into(&vh.data, t, dh, wo_h, d, &mut out.data);
    }
    out
}

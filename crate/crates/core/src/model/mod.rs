//! A small GPT-style decoder-only transformer with activation capture,
//! hand-written backpropagation, sampling and a checkpoint container.
//!
//! Layers are numbered `1..=n_layers` in every public API; internal
//! vectors are indexed from zero.

mod backward;
pub mod checkpoint;
mod forward;
mod generate;
pub mod tokenizer;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub use backward::{class_logits, loss, loss_and_grads, Objective};
pub use forward::{
    attention_output_from_values, forward, forward_batch, ActivationTrace, Capture, ForwardOutput,
    LogitsMode,
};
pub(crate) use forward::forward_with;
pub use generate::{generate, Decode, SteeringHook};
pub use train::{train_lm, train_on_examples, Adam, Example, TrainHyper, TrainLog};

pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_kind: NormKind,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Gain and optional bias of a normalization layer (RMSNorm has no bias).
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Norm {
    fn new(kind: NormKind, d: usize) -> Self {
        Norm {
            gain: vec![1.0; d],
            bias: (kind == NormKind::LayerNorm).then(|| vec![0.0; d]),
        }
    }
}

/// Bottleneck adapter `f -> f + up(gelu(down(f)))` on the FFN branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `[d × r]`
    pub down: Matrix,
    pub down_bias: Vec<f64>,
    /// `[r × d]`
    pub up: Matrix,
    pub up_bias: Vec<f64>,
}

impl Adapter {
    pub fn bottleneck(&self) -> usize {
        self.down.cols
    }

    pub fn param_count(&self) -> usize {
        self.down.data.len() + self.down_bias.len() + self.up.data.len() + self.up_bias.len()
    }
}

/// Linear classifier over the last position's final block output.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHead {
    /// `[d × n_classes]`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ClassHead {
    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }
}

/// Per-layer parameters. Heads are contiguous column blocks of `wq/wk/wv`
/// and contiguous row blocks of `wo`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm1: Norm,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub norm2: Norm,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub adapter: Option<Adapter>,
}

/// Units of freezing. `Block(l)` and `Adapter(l)` use 1-based layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Embedding,
    Block(usize),
    Adapter(usize),
    FinalNorm,
    Unembed,
    ClassHead,
}

impl ParamGroup {
    /// Groups belonging to the pretrained base model.
    pub fn is_base(self) -> bool {
        !matches!(self, ParamGroup::Adapter(_) | ParamGroup::ClassHead)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `[V × d]`
    pub tok_emb: Matrix,
    /// `[max_seq_len × d]`
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Norm,
    /// `[d × V]`
    pub unembed: Matrix,
    pub head: Option<ClassHead>,
    frozen: Vec<ParamGroup>,
}

/// A named view of one parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub data: &'a mut [f64],
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    }
}

impl ModelWeights {
    /// Seeded initialization: projections and embeddings ~ N(0, 0.02),
    /// norm gains 1, biases 0.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let d = c.d_model;
        let tok_emb = normal_matrix(&mut rng, c.vocab_size, d, INIT_STD);
        let pos_emb = normal_matrix(&mut rng, c.max_seq_len, d, INIT_STD);
        let layers = (0..c.n_layers)
            .map(|_| LayerWeights {
                norm1: Norm::new(c.norm_kind, d),
                wq: normal_matrix(&mut rng, d, d, INIT_STD),
                wk: normal_matrix(&mut rng, d, d, INIT_STD),
                wv: normal_matrix(&mut rng, d, d, INIT_STD),
                wo: normal_matrix(&mut rng, d, d, INIT_STD),
                norm2: Norm::new(c.norm_kind, d),
                w1: normal_matrix(&mut rng, d, c.d_ff, INIT_STD),
                b1: vec![0.0; c.d_ff],
                w2: normal_matrix(&mut rng, c.d_ff, d, INIT_STD),
                b2: vec![0.0; d],
                adapter: None,
            })
            .collect();
        let unembed = normal_matrix(&mut rng, d, c.vocab_size, INIT_STD);
        Ok(ModelWeights {
            config: c.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm: Norm::new(c.norm_kind, d),
            unembed,
            head: None,
            frozen: Vec::new(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.n_layers() {
            return Err(Error::LayerOutOfRange {
                layer,
                n_layers: self.n_layers(),
            });
        }
        Ok(())
    }

    pub fn layer(&self, layer: usize) -> &LayerWeights {
        &self.layers[layer - 1]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut LayerWeights {
        &mut self.layers[layer - 1]
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.contains(&group)
    }

    pub fn frozen_groups(&self) -> &[ParamGroup] {
        &self.frozen
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        let present = self.frozen.contains(&group);
        if frozen && !present {
            self.frozen.push(group);
            self.frozen.sort();
        } else if !frozen && present {
            self.frozen.retain(|g| *g != group);
        }
    }

    /// Freeze every base group; adapters and the class head stay trainable.
    pub fn freeze_base(&mut self) {
        let groups: Vec<ParamGroup> = self.groups().into_iter().filter(|g| g.is_base()).collect();
        for g in groups {
            self.set_frozen(g, true);
        }
    }

    /// Distinct groups present in this weight set, in parameter order.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut out: Vec<ParamGroup> = Vec::new();
        for p in self.params() {
            if out.last() != Some(&p.group) {
                out.push(p.group);
            }
        }
        out
    }

    /// Every parameter tensor in the fixed serialization order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        self.visit(|name, group, shape, data| {
            out.push(ParamRef {
                name,
                group,
                shape,
                data,
            })
        });
        out
    }

    fn visit<'a>(&'a self, mut f: impl FnMut(String, ParamGroup, Vec<usize>, &'a [f64])) {
        let mat = |m: &Matrix| vec![m.rows, m.cols];
        f("tok_emb".into(), ParamGroup::Embedding, mat(&self.tok_emb), &self.tok_emb.data);
        f("pos_emb".into(), ParamGroup::Embedding, mat(&self.pos_emb), &self.pos_emb.data);
        for (i, l) in self.layers.iter().enumerate() {
            let g = ParamGroup::Block(i + 1);
            let p = |s: &str| format!("layers.{}.{s}", i + 1);
            f(p("norm1.gain"), g, vec![l.norm1.gain.len()], &l.norm1.gain);
            if let Some(b) = &l.norm1.bias {
                f(p("norm1.bias"), g, vec![b.len()], b);
            }
            f(p("attn.wq"), g, mat(&l.wq), &l.wq.data);
            f(p("attn.wk"), g, mat(&l.wk), &l.wk.data);
            f(p("attn.wv"), g, mat(&l.wv), &l.wv.data);
            f(p("attn.wo"), g, mat(&l.wo), &l.wo.data);
            f(p("norm2.gain"), g, vec![l.norm2.gain.len()], &l.norm2.gain);
            if let Some(b) = &l.norm2.bias {
                f(p("norm2.bias"), g, vec![b.len()], b);
            }
            f(p("ffn.w1"), g, mat(&l.w1), &l.w1.data);
            f(p("ffn.b1"), g, vec![l.b1.len()], &l.b1);
            f(p("ffn.w2"), g, mat(&l.w2), &l.w2.data);
            f(p("ffn.b2"), g, vec![l.b2.len()], &l.b2);
            if let Some(a) = &l.adapter {
                let g = ParamGroup::Adapter(i + 1);
                f(p("adapter.down"), g, mat(&a.down), &a.down.data);
                f(p("adapter.down_bias"), g, vec![a.down_bias.len()], &a.down_bias);
                f(p("adapter.up"), g, mat(&a.up), &a.up.data);
                f(p("adapter.up_bias"), g, vec![a.up_bias.len()], &a.up_bias);
            }
        }
        let g = ParamGroup::FinalNorm;
        f("final_norm.gain".into(), g, vec![self.final_norm.gain.len()], &self.final_norm.gain);
        if let Some(b) = &self.final_norm.bias {
            f("final_norm.bias".into(), g, vec![b.len()], b);
        }
        f("unembed".into(), ParamGroup::Unembed, mat(&self.unembed), &self.unembed.data);
        if let Some(h) = &self.head {
            f("head.weight".into(), ParamGroup::ClassHead, mat(&h.weight), &h.weight.data);
            f("head.bias".into(), ParamGroup::ClassHead, vec![h.bias.len()], &h.bias);
        }
    }

    /// Mutable views in the same order as [`ModelWeights::params`].
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut v: Vec<ParamMut<'_>> = Vec::new();
        let ModelWeights {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            unembed,
            head,
            ..
        } = self;
        v.push(pm("tok_emb".into(), ParamGroup::Embedding, &mut tok_emb.data));
        v.push(pm("pos_emb".into(), ParamGroup::Embedding, &mut pos_emb.data));
        for (i, l) in layers.iter_mut().enumerate() {
            let g = ParamGroup::Block(i + 1);
            let p = |s: &str| format!("layers.{}.{s}", i + 1);
            v.push(pm(p("norm1.gain"), g, &mut l.norm1.gain));
            if let Some(b) = &mut l.norm1.bias {
                v.push(pm(p("norm1.bias"), g, b));
            }
            v.push(pm(p("attn.wq"), g, &mut l.wq.data));
            v.push(pm(p("attn.wk"), g, &mut l.wk.data));
            v.push(pm(p("attn.wv"), g, &mut l.wv.data));
            v.push(pm(p("attn.wo"), g, &mut l.wo.data));
            v.push(pm(p("norm2.gain"), g, &mut l.norm2.gain));
            if let Some(b) = &mut l.norm2.bias {
                v.push(pm(p("norm2.bias"), g, b));
            }
            v.push(pm(p("ffn.w1"), g, &mut l.w1.data));
            v.push(pm(p("ffn.b1"), g, &mut l.b1));
            v.push(pm(p("ffn.w2"), g, &mut l.w2.data));
            v.push(pm(p("ffn.b2"), g, &mut l.b2));
            if let Some(a) = &mut l.adapter {
                let g = ParamGroup::Adapter(i + 1);
                v.push(pm(p("adapter.down"), g, &mut a.down.data));
                v.push(pm(p("adapter.down_bias"), g, &mut a.down_bias));
                v.push(pm(p("adapter.up"), g, &mut a.up.data));
                v.push(pm(p("adapter.up_bias"), g, &mut a.up_bias));
            }
        }
        v.push(pm("final_norm.gain".into(), ParamGroup::FinalNorm, &mut final_norm.gain));
        if let Some(b) = &mut final_norm.bias {
            v.push(pm("final_norm.bias".into(), ParamGroup::FinalNorm, b));
        }
        v.push(pm("unembed".into(), ParamGroup::Unembed, &mut unembed.data));
        if let Some(h) = head {
            v.push(pm("head.weight".into(), ParamGroup::ClassHead, &mut h.weight.data));
            v.push(pm("head.bias".into(), ParamGroup::ClassHead, &mut h.bias));
        }
        v
    }

    /// A weight set of identical structure with every entry zero; used as a
    /// gradient accumulator and for optimizer moments.
    pub fn zeros_like(&self) -> ModelWeights {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.data.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| !self.is_frozen(p.group))
            .map(|p| p.data.len())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values of the selected
    /// parameters.
    pub fn digest_where(&self, mut keep: impl FnMut(ParamGroup) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            if !keep(p.group) {
                continue;
            }
            h.update(p.name.as_bytes());
            for s in &p.shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn digest(&self) -> String {
        self.digest_where(|_| true)
    }

    /// Digest of the base (non-adapter, non-head) parameters only.
    pub fn base_digest(&self) -> String {
        self.digest_where(ParamGroup::is_base)
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn with_head(mut self, n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.head = Some(ClassHead {
            weight: normal_matrix(&mut rng, self.config.d_model, n_classes, INIT_STD),
            bias: vec![0.0; n_classes],
        });
        self
    }

    /// Add `scale * other` to every parameter, structure must match.
    pub(crate) fn axpy(&mut self, scale: f64, other: &ModelWeights) {
        let src = other.params();
        for (dst, s) in self.params_mut().into_iter().zip(src) {
            for (d, v) in dst.data.iter_mut().zip(s.data) {
                *d += scale * v;
            }
        }
    }
}

fn pm(name: String, group: ParamGroup, data: &mut [f64]) -> ParamMut<'_> {
    ParamMut { name, group, data }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn new_adapter(d: usize, r: usize, seed: u64) -> Adapter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Adapter {
        down: normal_matrix(&mut rng, d, r, INIT_STD),
        down_bias: vec![0.0; r],
        up: Matrix::zeros(r, d),
        up_bias: vec![0.0; d],
    }
}

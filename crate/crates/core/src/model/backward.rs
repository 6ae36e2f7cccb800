//! Reverse-mode gradients for the transformer, written out by hand.

use super::forward::{run, LayerCache, NormCache};
use super::{ModelWeights, Norm, NormKind, ParamGroup};
use crate::error::{Error, Result};
use crate::model::LogitsMode;
use crate::numkit::{gelu_grad, matmul_a_bt_into, matmul_at_b_into, softmax, Matrix};

/// One training example and the loss it induces.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Mean next-token cross-entropy over `tokens[1..]`.
    NextToken(Vec<u32>),
    /// Cross-entropy of the class head on the last position.
    Classify { tokens: Vec<u32>, label: usize },
}

impl Objective {
    pub fn tokens(&self) -> &[u32] {
        match self {
            Objective::NextToken(t) => t,
            Objective::Classify { tokens, .. } => tokens,
        }
    }
}

/// Loss and full gradient (frozen groups stay zero).
pub fn loss_and_grads(w: &ModelWeights, ex: &Objective) -> Result<(f64, ModelWeights)> {
    let mut g = w.zeros_like();
    let loss = accumulate_grads(w, ex, &mut g, 1.0)?;
    Ok((loss, g))
}

/// Loss only, no gradient bookkeeping.
pub fn loss(w: &ModelWeights, ex: &Objective) -> Result<f64> {
    match ex {
        Objective::NextToken(tokens) => {
            let (input, targets) = split_lm(tokens)?;
            let (logits, _) = run(w, input, None, LogitsMode::All)?;
            let mut total = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                let p = softmax(logits.row(i))?;
                total -= p[t as usize].ln();
            }
            Ok(total / targets.len() as f64)
        }
        Objective::Classify { tokens, label } => {
            let (_, cache) = run(w, tokens, None, LogitsMode::Skip)?;
            let head = w.head.as_ref().ok_or_else(missing_head)?;
            check_label(*label, head.n_classes())?;
            let last = cache.layers.last().expect("n_layers >= 1");
            let z = head_logits(head, last.x_out.row(tokens.len() - 1));
            Ok(-softmax(&z)?[*label].ln())
        }
    }
}

/// Class-head logits for the last position of `tokens`.
pub fn class_logits(w: &ModelWeights, tokens: &[u32]) -> Result<Vec<f64>> {
    let head = w.head.as_ref().ok_or_else(missing_head)?;
    let (_, cache) = run(w, tokens, None, LogitsMode::Skip)?;
    let last = cache.layers.last().expect("n_layers >= 1");
    Ok(head_logits(head, last.x_out.row(tokens.len() - 1)))
}

fn split_lm(tokens: &[u32]) -> Result<(&[u32], &[u32])> {
    if tokens.len() < 2 {
        return Err(Error::InvalidArgument(
            "next-token example needs at least 2 tokens".into(),
        ));
    }
    Ok((&tokens[..tokens.len() - 1], &tokens[1..]))
}

fn missing_head() -> Error {
    Error::InvalidArgument("classification objective requires a class head".into())
}

fn check_label(label: usize, n: usize) -> Result<()> {
    if label >= n {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {n} classes"
        )));
    }
    Ok(())
}

pub(crate) fn head_logits(head: &super::ClassHead, x: &[f64]) -> Vec<f64> {
    let c = head.n_classes();
    let mut z = head.bias.clone();
    for (i, xv) in x.iter().enumerate() {
        for (zz, wv) in z.iter_mut().zip(&head.weight.data[i * c..(i + 1) * c]) {
            *zz += xv * wv;
        }
    }
    z
}

/// Lowest 1-based layer whose gradient is needed, or 1 if embeddings train.
fn backprop_floor(w: &ModelWeights) -> usize {
    if !w.is_frozen(ParamGroup::Embedding) {
        return 1;
    }
    (1..=w.n_layers())
        .find(|&l| !w.is_frozen(ParamGroup::Block(l)) || !w.is_frozen(ParamGroup::Adapter(l)))
        .unwrap_or(w.n_layers() + 1)
}

/// Add `weight * ∂loss/∂θ` into `g`; returns the unweighted loss.
pub(crate) fn accumulate_grads(
    w: &ModelWeights,
    ex: &Objective,
    g: &mut ModelWeights,
    weight: f64,
) -> Result<f64> {
    let cfg = &w.config;
    let d = cfg.d_model;
    let (loss, cache, mut dx) = match ex {
        Objective::NextToken(tokens) => {
            let (input, targets) = split_lm(tokens)?;
            let (logits, cache) = run(w, input, None, LogitsMode::All)?;
            let t = input.len();
            let v = cfg.vocab_size;
            let mut dlogits = Matrix::zeros(t, v);
            let mut total = 0.0;
            for (i, &tgt) in targets.iter().enumerate() {
                let p = softmax(logits.row(i))?;
                total -= p[tgt as usize].ln();
                let row = dlogits.row_mut(i);
                for (o, pv) in row.iter_mut().zip(&p) {
                    *o = pv * weight / t as f64;
                }
                row[tgt as usize] -= weight / t as f64;
            }
            if !w.is_frozen(ParamGroup::Unembed) {
                matmul_at_b_into(&cache.nf.data, t, d, &dlogits.data, v, &mut g.unembed.data);
            }
            let mut dnf = Matrix::zeros(t, d);
            matmul_a_bt_into(&dlogits.data, t, v, &w.unembed.data, d, &mut dnf.data);
            let train_norm = !w.is_frozen(ParamGroup::FinalNorm);
            let dx = norm_backward(
                cfg.norm_kind,
                &w.final_norm,
                &cache.final_norm,
                &dnf,
                train_norm.then_some(&mut g.final_norm),
            );
            (total / t as f64, cache, dx)
        }
        Objective::Classify { tokens, label } => {
            let head = w.head.as_ref().ok_or_else(missing_head)?;
            check_label(*label, head.n_classes())?;
            let (_, cache) = run(w, tokens, None, LogitsMode::Skip)?;
            let t = tokens.len();
            let xl = cache.layers.last().expect("n_layers >= 1").x_out.row(t - 1).to_vec();
            let p = softmax(&head_logits(head, &xl))?;
            let loss = -p[*label].ln();
            let mut dz: Vec<f64> = p.iter().map(|v| v * weight).collect();
            dz[*label] -= weight;
            let c = head.n_classes();
            if !w.is_frozen(ParamGroup::ClassHead) {
                let gh = g.head.as_mut().expect("gradient mirrors weights");
                for (i, xv) in xl.iter().enumerate() {
                    for (gw, dzv) in gh.weight.data[i * c..(i + 1) * c].iter_mut().zip(&dz) {
                        *gw += xv * dzv;
                    }
                }
                gh.bias.iter_mut().zip(&dz).for_each(|(b, v)| *b += v);
            }
            let mut dx = Matrix::zeros(t, d);
            let row = dx.row_mut(t - 1);
            for (i, o) in row.iter_mut().enumerate() {
                *o = crate::numkit::dot(&head.weight.data[i * c..(i + 1) * c], &dz);
            }
            (loss, cache, dx)
        }
    };
    if !loss.is_finite() {
        return Ok(loss);
    }

    let floor = backprop_floor(w);
    for l in (floor..=cfg.n_layers).rev() {
        let lc = &cache.layers[l - 1];
        dx = layer_backward(w, l, lc, dx, g);
    }

    if floor == 1 && !w.is_frozen(ParamGroup::Embedding) {
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let row = dx.row(i);
            for (gv, dv) in g.tok_emb.row_mut(tok as usize).iter_mut().zip(row) {
                *gv += dv;
            }
            for (gv, dv) in g.pos_emb.row_mut(i).iter_mut().zip(row) {
                *gv += dv;
            }
        }
    }
    Ok(loss)
}

/// Backprop through one block; returns the gradient w.r.t. its input.
fn layer_backward(
    w: &ModelWeights,
    layer: usize,
    lc: &LayerCache,
    dx_out: Matrix,
    g: &mut ModelWeights,
) -> Matrix {
    let cfg = &w.config;
    let (t, d, dff) = (lc.x_in.rows, cfg.d_model, cfg.d_ff);
    let (heads, dh) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let lw = w.layer(layer);
    let train_block = !w.is_frozen(ParamGroup::Block(layer));
    let train_adapter = !w.is_frozen(ParamGroup::Adapter(layer));
    let gl = &mut g.layers[layer - 1];

    // x_out = x_mid + branch, branch = ffn_out + adapter(ffn_out)
    let dbranch = &dx_out;
    let mut dffn = dbranch.clone();
    if let (Some(ad), Some(pre), Some(hid)) = (&lw.adapter, &lc.adapter_pre, &lc.adapter_h) {
        let r = ad.bottleneck();
        let ga = gl.adapter.as_mut().expect("gradient mirrors weights");
        if train_adapter {
            matmul_at_b_into(&hid.data, t, r, &dbranch.data, d, &mut ga.up.data);
            col_sums_into(dbranch, &mut ga.up_bias);
        }
        let mut dhid = Matrix::zeros(t, r);
        matmul_a_bt_into(&dbranch.data, t, d, &ad.up.data, r, &mut dhid.data);
        let mut dpre = dhid;
        dpre.data
            .iter_mut()
            .zip(&pre.data)
            .for_each(|(dv, pv)| *dv *= gelu_grad(*pv));
        if train_adapter {
            matmul_at_b_into(&lc.ffn_out.data, t, d, &dpre.data, r, &mut ga.down.data);
            col_sums_into(&dpre, &mut ga.down_bias);
        }
        matmul_a_bt_into(&dpre.data, t, r, &ad.down.data, d, &mut dffn.data);
    }

    // ffn_out = gelu(n2 W1 + b1) W2 + b2
    if train_block {
        matmul_at_b_into(&lc.h1.data, t, dff, &dffn.data, d, &mut gl.w2.data);
        col_sums_into(&dffn, &mut gl.b2);
    }
    let mut dpre1 = Matrix::zeros(t, dff);
    matmul_a_bt_into(&dffn.data, t, d, &lw.w2.data, dff, &mut dpre1.data);
    dpre1
        .data
        .iter_mut()
        .zip(&lc.pre1.data)
        .for_each(|(dv, pv)| *dv *= gelu_grad(*pv));
    if train_block {
        matmul_at_b_into(&lc.n2.data, t, d, &dpre1.data, dff, &mut gl.w1.data);
        col_sums_into(&dpre1, &mut gl.b1);
    }
    let mut dn2 = Matrix::zeros(t, d);
    matmul_a_bt_into(&dpre1.data, t, dff, &lw.w1.data, d, &mut dn2.data);
    let dnorm2 = norm_backward(
        cfg.norm_kind,
        &lw.norm2,
        &lc.norm2,
        &dn2,
        train_block.then_some(&mut gl.norm2),
    );
    let mut dx_mid = dx_out;
    dx_mid.data.iter_mut().zip(&dnorm2.data).for_each(|(a, b)| *a += b);

    // attn_out = ctx Wo
    if train_block {
        matmul_at_b_into(&lc.ctx.data, t, d, &dx_mid.data, d, &mut gl.wo.data);
    }
    let mut dctx = Matrix::zeros(t, d);
    matmul_a_bt_into(&dx_mid.data, t, d, &lw.wo.data, d, &mut dctx.data);

    let mut dq = Matrix::zeros(t, d);
    let mut dk = Matrix::zeros(t, d);
    let mut dv = Matrix::zeros(t, d);
    for h in 0..heads {
        let off = h * dh;
        let a = &lc.probs[h];
        for i in 0..t {
            let dci = &dctx.row(i)[off..off + dh];
            let mut da = vec![0.0; i + 1];
            for (j, daj) in da.iter_mut().enumerate() {
                *daj = dci.iter().zip(&lc.v.row(j)[off..off + dh]).map(|(x, y)| x * y).sum();
                let aij = a.get(i, j);
                if aij != 0.0 {
                    for (o, c) in dv.row_mut(j)[off..off + dh].iter_mut().zip(dci) {
                        *o += aij * c;
                    }
                }
            }
            let inner: f64 = da.iter().enumerate().map(|(j, x)| a.get(i, j) * x).sum();
            for (j, daj) in da.iter().enumerate() {
                let ds = a.get(i, j) * (daj - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj: Vec<f64> = lc.k.row(j)[off..off + dh].to_vec();
                for (o, kv) in dq.row_mut(i)[off..off + dh].iter_mut().zip(&kj) {
                    *o += ds * kv;
                }
                let qi: Vec<f64> = lc.q.row(i)[off..off + dh].to_vec();
                for (o, qv) in dk.row_mut(j)[off..off + dh].iter_mut().zip(&qi) {
                    *o += ds * qv;
                }
            }
        }
    }
    if train_block {
        matmul_at_b_into(&lc.n1.data, t, d, &dq.data, d, &mut gl.wq.data);
        matmul_at_b_into(&lc.n1.data, t, d, &dk.data, d, &mut gl.wk.data);
        matmul_at_b_into(&lc.n1.data, t, d, &dv.data, d, &mut gl.wv.data);
    }
    let mut dn1 = Matrix::zeros(t, d);
    matmul_a_bt_into(&dq.data, t, d, &lw.wq.data, d, &mut dn1.data);
    matmul_a_bt_into(&dk.data, t, d, &lw.wk.data, d, &mut dn1.data);
    matmul_a_bt_into(&dv.data, t, d, &lw.wv.data, d, &mut dn1.data);
    let dnorm1 = norm_backward(
        cfg.norm_kind,
        &lw.norm1,
        &lc.norm1,
        &dn1,
        train_block.then_some(&mut gl.norm1),
    );
    let mut dx_in = dx_mid;
    dx_in.data.iter_mut().zip(&dnorm1.data).for_each(|(a, b)| *a += b);
    dx_in
}

fn col_sums_into(m: &Matrix, out: &mut [f64]) {
    for r in 0..m.rows {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
}

fn norm_backward(
    kind: NormKind,
    norm: &Norm,
    cache: &NormCache,
    dy: &Matrix,
    grad: Option<&mut Norm>,
) -> Matrix {
    let (t, d) = (dy.rows, dy.cols);
    if let Some(gn) = grad {
        for r in 0..t {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            for c in 0..d {
                gn.gain[c] += dyr[c] * xh[c];
            }
            if let Some(gb) = gn.bias.as_mut() {
                gb.iter_mut().zip(dyr).for_each(|(b, v)| *b += v);
            }
        }
    }
    let mut dx = Matrix::zeros(t, d);
    for r in 0..t {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let dxhat: Vec<f64> = dyr.iter().zip(&norm.gain).map(|(a, b)| a * b).collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dot = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let iv = cache.inv[r];
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = match kind {
                NormKind::LayerNorm => iv * (dxhat[c] - mean_dxhat - xh[c] * mean_dot),
                NormKind::RmsNorm => iv * (dxhat[c] - xh[c] * mean_dot),
            };
        }
    }
    dx
}

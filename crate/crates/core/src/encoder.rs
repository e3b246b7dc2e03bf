//! Post-norm bidirectional transformer encoder with hand-written backward
//! passes, plus the reconstruction and classification heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::float::Scalar;
use crate::input::MaskTarget;
use crate::params::{LayerParams, Linear, ModelConfig, Parameters};
use crate::tensor::{gemm_nt, gemm_tn, Matrix};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<F: Scalar>(u: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (u + F::of(GELU_A) * u * u * u);
    half * u * (F::ONE + inner.tanh())
}

#[inline]
pub fn gelu_grad<F: Scalar>(u: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (u + F::of(GELU_A) * u * u * u);
    let t = inner.tanh();
    let d_inner = F::of(GELU_C) * (F::ONE + F::of(3.0 * GELU_A) * u * u);
    half * (F::ONE + t) + half * u * (F::ONE - t * t) * d_inner
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    /// Normalized rows before gain and bias.
    pub normalized: Matrix<F>,
    pub inv_std: Vec<F>,
}

/// Row-wise layer normalization.
pub fn layer_norm_forward<F: Scalar>(
    x: &Matrix<F>,
    gain: &Matrix<F>,
    bias: &Matrix<F>,
    eps: f64,
) -> (Matrix<F>, LayerNormCache<F>) {
    let (t, h) = x.shape();
    let n = F::of(h as f64);
    let mut normalized = Matrix::zeros(t, h);
    let mut out = Matrix::zeros(t, h);
    let mut inv_std = Vec::with_capacity(t);
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rstd = F::ONE / (var + F::of(eps)).sqrt();
        inv_std.push(rstd);
        let nrow = normalized.row_mut(r);
        for (o, &v) in nrow.iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
        for (i, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = normalized.get(r, i) * gain.get(0, i) + bias.get(0, i);
        }
    }
    (
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    )
}

/// Returns the gradient with respect to the layer-norm input.
fn layer_norm_backward<F: Scalar>(
    d_out: &Matrix<F>,
    cache: &LayerNormCache<F>,
    gain: &Matrix<F>,
    d_gain: &mut Matrix<F>,
    d_bias: &mut Matrix<F>,
) -> Matrix<F> {
    let (t, h) = d_out.shape();
    let n = F::of(h as f64);
    let mut dx = Matrix::zeros(t, h);
    let mut d_norm = vec![F::ZERO; h];
    for r in 0..t {
        let dy = d_out.row(r);
        let xn = cache.normalized.row(r);
        for i in 0..h {
            d_gain.as_mut_slice()[i] += dy[i] * xn[i];
            d_bias.as_mut_slice()[i] += dy[i];
            d_norm[i] = dy[i] * gain.get(0, i);
        }
        let mean_d = d_norm.iter().copied().sum::<F>() / n;
        let mean_dx = d_norm.iter().zip(xn).map(|(&a, &b)| a * b).sum::<F>() / n;
        let rstd = cache.inv_std[r];
        for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rstd * (d_norm[i] - mean_d - xn[i] * mean_dx);
        }
    }
    dx
}

fn add_bias<F: Scalar>(x: &mut Matrix<F>, bias: &Matrix<F>) {
    let b = bias.row(0);
    for r in 0..x.rows() {
        for (v, &bb) in x.row_mut(r).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn bias_grad<F: Scalar>(d: &Matrix<F>, db: &mut Matrix<F>) {
    let out = db.as_mut_slice();
    for r in 0..d.rows() {
        for (o, &v) in out.iter_mut().zip(d.row(r)) {
            *o += v;
        }
    }
}

fn split_heads<F: Scalar>(x: &Matrix<F>, heads: usize) -> Vec<Matrix<F>> {
    let (t, h) = x.shape();
    let d = h / heads;
    (0..heads)
        .map(|a| {
            let mut m = Matrix::zeros(t, d);
            for r in 0..t {
                m.row_mut(r).copy_from_slice(&x.row(r)[a * d..(a + 1) * d]);
            }
            m
        })
        .collect()
}

fn merge_heads<F: Scalar>(parts: &[Matrix<F>]) -> Matrix<F> {
    let t = parts[0].rows();
    let d = parts[0].cols();
    let mut out = Matrix::zeros(t, d * parts.len());
    for (a, p) in parts.iter().enumerate() {
        for r in 0..t {
            out.row_mut(r)[a * d..(a + 1) * d].copy_from_slice(p.row(r));
        }
    }
    out
}

fn softmax_rows<F: Scalar>(m: &mut Matrix<F>) {
    for r in 0..m.rows() {
        softmax_in_place(m.row_mut(r));
    }
}

pub fn softmax_in_place<F: Scalar>(v: &mut [F]) {
    let max = v.iter().copied().fold(v[0], |a, b| a.max(b));
    let mut total = F::ZERO;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Multi-head scaled dot-product attention over already-projected `q`, `k`,
/// `v` (`T x H` each). Returns the merged context and per-head probabilities.
pub fn attention<F: Scalar>(
    q: &Matrix<F>,
    k: &Matrix<F>,
    v: &Matrix<F>,
    heads: usize,
) -> (Matrix<F>, Vec<Matrix<F>>) {
    let (qh, kh, vh) = (
        split_heads(q, heads),
        split_heads(k, heads),
        split_heads(v, heads),
    );
    let (ctx, probs) = attention_heads(&qh, &kh, &vh);
    (merge_heads(&ctx), probs)
}

fn attention_heads<F: Scalar>(
    qh: &[Matrix<F>],
    kh: &[Matrix<F>],
    vh: &[Matrix<F>],
) -> (Vec<Matrix<F>>, Vec<Matrix<F>>) {
    let t = qh[0].rows();
    let scale = F::ONE / F::of(qh[0].cols() as f64).sqrt();
    let mut ctx = Vec::with_capacity(qh.len());
    let mut probs = Vec::with_capacity(qh.len());
    for a in 0..qh.len() {
        let mut s = Matrix::zeros(t, t);
        gemm_nt(scale, &qh[a], &kh[a], F::ZERO, &mut s);
        softmax_rows(&mut s);
        ctx.push(s.matmul(&vh[a]));
        probs.push(s);
    }
    (ctx, probs)
}

fn dropout<F: Scalar>(
    x: &mut Matrix<F>,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Option<Vec<F>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = F::of(1.0 / (1.0 - rate));
    let mask: Vec<F> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                F::ZERO
            } else {
                keep
            }
        })
        .collect();
    for (v, &m) in x.as_mut_slice().iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

fn apply_mask<F: Scalar>(d: &mut Matrix<F>, mask: &Option<Vec<F>>) {
    if let Some(mask) = mask {
        for (v, &m) in d.as_mut_slice().iter_mut().zip(mask) {
            *v *= m;
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache<F> {
    input: Matrix<F>,
    q: Vec<Matrix<F>>,
    k: Vec<Matrix<F>>,
    v: Vec<Matrix<F>>,
    probs: Vec<Matrix<F>>,
    context: Matrix<F>,
    attn_mask: Option<Vec<F>>,
    ln1: LayerNormCache<F>,
    x1: Matrix<F>,
    pre_act: Matrix<F>,
    act: Matrix<F>,
    ffn_mask: Option<Vec<F>>,
    ln2: LayerNormCache<F>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput<F> {
    /// Final hidden states, `T_total x H`.
    pub hidden: Matrix<F>,
    input_mask: Option<Vec<F>>,
    layers: Vec<LayerCache<F>>,
}

impl<F: Scalar> EncoderOutput<F> {
    /// Attention probabilities of one layer, one `T x T` matrix per head.
    pub fn attention_maps(&self, layer: usize) -> &[Matrix<F>] {
        &self.layers[layer].probs
    }
}

fn layer_forward<F: Scalar>(
    x: Matrix<F>,
    p: &LayerParams<F>,
    config: &ModelConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Matrix<F>, LayerCache<F>) {
    let (t, h) = x.shape();
    let project = |w: &Matrix<F>, b: &Matrix<F>| {
        let mut out = x.matmul(w);
        add_bias(&mut out, b);
        out
    };
    let q = split_heads(&project(&p.wq, &p.bq), config.heads);
    let k = split_heads(&project(&p.wk, &p.bk), config.heads);
    let v = split_heads(&project(&p.wv, &p.bv), config.heads);
    let (ctx, probs) = attention_heads(&q, &k, &v);
    let context = merge_heads(&ctx);
    let mut attn = context.matmul(&p.wo);
    add_bias(&mut attn, &p.bo);
    let attn_mask = dropout(&mut attn, config.dropout, rng.as_deref_mut());
    attn.add_assign(&x);
    let (x1, ln1) = layer_norm_forward(&attn, &p.ln1_gain, &p.ln1_bias, config.layer_norm_eps);

    let mut pre_act = x1.matmul(&p.w1);
    add_bias(&mut pre_act, &p.b1);
    let mut act = pre_act.clone();
    act.as_mut_slice().iter_mut().for_each(|u| *u = gelu(*u));
    let mut ffn = act.matmul(&p.w2);
    add_bias(&mut ffn, &p.b2);
    let ffn_mask = dropout(&mut ffn, config.dropout, rng);
    ffn.add_assign(&x1);
    let (out, ln2) = layer_norm_forward(&ffn, &p.ln2_gain, &p.ln2_bias, config.layer_norm_eps);
    debug_assert_eq!(out.shape(), (t, h));
    let cache = LayerCache {
        input: x,
        q,
        k,
        v,
        probs,
        context,
        attn_mask,
        ln1,
        x1,
        pre_act,
        act,
        ffn_mask,
        ln2,
    };
    (out, cache)
}

/// Runs the encoder. Passing a dropout RNG switches to training mode; with
/// `None` the pass is deterministic.
pub fn encoder_forward<F: Scalar>(
    input: &Matrix<F>,
    params: &Parameters<F>,
    config: &ModelConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<EncoderOutput<F>> {
    if input.cols() != params.hidden() {
        return Err(Error::Shape(format!(
            "input width {} does not match hidden size {}",
            input.cols(),
            params.hidden()
        )));
    }
    for r in 0..input.rows() {
        if let Some(c) = input.row(r).iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "encoder input at position {r}, column {c}"
            )));
        }
    }
    let mut x = input.clone();
    let input_mask = dropout(&mut x, config.dropout, rng.as_deref_mut());
    let mut layers = Vec::with_capacity(params.layers.len());
    for p in &params.layers {
        let (next, cache) = layer_forward(x, p, config, rng.as_deref_mut());
        layers.push(cache);
        x = next;
    }
    Ok(EncoderOutput {
        hidden: x,
        input_mask,
        layers,
    })
}

fn layer_backward<F: Scalar>(
    d_out: &Matrix<F>,
    cache: &LayerCache<F>,
    p: &LayerParams<F>,
    g: &mut LayerParams<F>,
) -> Matrix<F> {
    let t = d_out.rows();
    // Second residual block.
    let d_res2 = layer_norm_backward(
        d_out,
        &cache.ln2,
        &p.ln2_gain,
        &mut g.ln2_gain,
        &mut g.ln2_bias,
    );
    let mut d_x1 = d_res2.clone();
    let mut d_ffn = d_res2;
    apply_mask(&mut d_ffn, &cache.ffn_mask);
    gemm_tn(F::ONE, &cache.act, &d_ffn, F::ONE, &mut g.w2);
    bias_grad(&d_ffn, &mut g.b2);
    let mut d_pre = d_ffn.matmul_t(&p.w2);
    for (d, &u) in d_pre
        .as_mut_slice()
        .iter_mut()
        .zip(cache.pre_act.as_slice())
    {
        *d *= gelu_grad(u);
    }
    gemm_tn(F::ONE, &cache.x1, &d_pre, F::ONE, &mut g.w1);
    bias_grad(&d_pre, &mut g.b1);
    gemm_nt(F::ONE, &d_pre, &p.w1, F::ONE, &mut d_x1);

    // First residual block.
    let d_res1 = layer_norm_backward(
        &d_x1,
        &cache.ln1,
        &p.ln1_gain,
        &mut g.ln1_gain,
        &mut g.ln1_bias,
    );
    let mut d_x = d_res1.clone();
    let mut d_attn = d_res1;
    apply_mask(&mut d_attn, &cache.attn_mask);
    gemm_tn(F::ONE, &cache.context, &d_attn, F::ONE, &mut g.wo);
    bias_grad(&d_attn, &mut g.bo);
    let d_ctx = split_heads(&d_attn.matmul_t(&p.wo), cache.q.len());

    let heads = cache.q.len();
    let dh = cache.q[0].cols();
    let scale = F::ONE / F::of(dh as f64).sqrt();
    let mut dq = Vec::with_capacity(heads);
    let mut dk = Vec::with_capacity(heads);
    let mut dv = Vec::with_capacity(heads);
    for (a, d_ctx_a) in d_ctx.iter().enumerate() {
        let probs = &cache.probs[a];
        let mut d_probs = d_ctx_a.matmul_t(&cache.v[a]);
        let mut d_v = Matrix::zeros(t, dh);
        gemm_tn(F::ONE, probs, d_ctx_a, F::ZERO, &mut d_v);
        for r in 0..t {
            let pr = probs.row(r);
            let dr = d_probs.row_mut(r);
            let dot: F = pr.iter().zip(dr.iter()).map(|(&x, &y)| x * y).sum();
            for (d, &pv) in dr.iter_mut().zip(pr) {
                *d = pv * (*d - dot) * scale;
            }
        }
        dq.push(d_probs.matmul(&cache.k[a]));
        let mut d_k = Matrix::zeros(t, dh);
        gemm_tn(F::ONE, &d_probs, &cache.q[a], F::ZERO, &mut d_k);
        dk.push(d_k);
        dv.push(d_v);
    }
    for (parts, w, gw, gb) in [
        (&dq, &p.wq, &mut g.wq, &mut g.bq),
        (&dk, &p.wk, &mut g.wk, &mut g.bk),
        (&dv, &p.wv, &mut g.wv, &mut g.bv),
    ] {
        let d = merge_heads(parts);
        gemm_tn(F::ONE, &cache.input, &d, F::ONE, gw);
        bias_grad(&d, gb);
        gemm_nt(F::ONE, &d, w, F::ONE, &mut d_x);
    }
    d_x
}

/// Backpropagates `d_hidden` through the encoder, accumulating parameter
/// gradients, and returns the gradient with respect to the encoder input.
pub fn encoder_backward<F: Scalar>(
    d_hidden: &Matrix<F>,
    output: &EncoderOutput<F>,
    params: &Parameters<F>,
    grads: &mut Parameters<F>,
) -> Matrix<F> {
    let mut d = d_hidden.clone();
    for ((cache, p), g) in output
        .layers
        .iter()
        .zip(&params.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        d = layer_backward(&d, cache, p, g);
    }
    apply_mask(&mut d, &output.input_mask);
    d
}

/// Logits `h W + b` of a linear head for one hidden row.
pub fn head_logits<F: Scalar>(hidden_row: &[F], head: &Linear<F>) -> Vec<F> {
    let mut out = head.bias.row(0).to_vec();
    crate::tensor::row_times_matrix_acc(hidden_row, &head.weight, &mut out);
    out
}

/// Per masked position, per attribute of its segment: softmax probabilities.
pub fn predict_masked_attributes<F: Scalar>(
    output: &EncoderOutput<F>,
    targets: &MaskTarget,
    params: &Parameters<F>,
) -> Result<Vec<Vec<Vec<F>>>> {
    targets
        .positions
        .iter()
        .map(|pos| {
            let s = pos.kind.index();
            if s > 1 {
                return Err(Error::Contract(
                    "profile positions have no reconstruction heads".into(),
                ));
            }
            if pos.row >= output.hidden.rows() {
                return Err(Error::Contract(format!(
                    "masked row {} out of range",
                    pos.row
                )));
            }
            let heads = &params.attribute_heads[s];
            if pos.targets.len() != heads.len() {
                return Err(Error::Contract(format!(
                    "{} targets for {} {} heads",
                    pos.targets.len(),
                    heads.len(),
                    pos.kind
                )));
            }
            Ok(heads
                .iter()
                .map(|head| {
                    let mut p = head_logits(output.hidden.row(pos.row), head);
                    softmax_in_place(&mut p);
                    p
                })
                .collect())
        })
        .collect()
}

/// Class probabilities from the first (CLS) hidden state.
pub fn classify_sequence<F: Scalar>(
    output: &EncoderOutput<F>,
    params: &Parameters<F>,
) -> Result<Vec<F>> {
    classify_hidden(output.hidden.row(0), params)
}

pub fn classify_hidden<F: Scalar>(cls_row: &[F], params: &Parameters<F>) -> Result<Vec<F>> {
    let head = params
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Config("model has no classification head".into()))?;
    let mut p = head_logits(cls_row, head);
    softmax_in_place(&mut p);
    Ok(p)
}

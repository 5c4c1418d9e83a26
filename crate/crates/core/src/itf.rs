//! Inverted-transformer trend classifier.
//!
//! Each variate's whole lookback row is one token. Tokens are embedded by a
//! shared two-layer MLP, passed through pre-norm encoder blocks (multi-head
//! self-attention across variates, then a feed-forward layer, each with a
//! residual add), mean-pooled, and mapped to probabilities over
//! {Down, Unchanged, Up}.
//!
//! Gradients are derived by hand; [`loss_and_gradients`] is checked against
//! central finite differences in the test suite.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{MonthIndex, SeriesId};
use crate::risk_features::{FeatureFrame, N_FEATURES};
use crate::seeding::{self, streams};

pub const LN_EPS: f64 = 1e-5;
pub const DEFAULT_TAU: f64 = 0.005;
pub const N_CLASSES: usize = 3;

const CHECKPOINT_MAGIC: &[u8; 8] = b"PMITFCK\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ItfError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation in {0}")]
    NumericalError(String),
    #[error("training diverged at epoch {epoch}: loss {loss} exceeds 10x initial {initial}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("training sample labelled {train} is not before evaluation month {eval}")]
    LookAhead { train: MonthIndex, eval: MonthIndex },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrendClass {
    Down = 0,
    Unchanged = 1,
    Up = 2,
}

impl TrendClass {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => TrendClass::Down,
            1 => TrendClass::Unchanged,
            _ => TrendClass::Up,
        }
    }
}

/// Up above `tau`, Down below `-tau`, Unchanged otherwise (bounds inclusive).
pub fn label_trend(next_return: f64, tau: f64) -> TrendClass {
    if next_return > tau {
        TrendClass::Up
    } else if next_return < -tau {
        TrendClass::Down
    } else {
        TrendClass::Unchanged
    }
}

/// Variate-major input: `values[[n, t]]` is variate `n` at lookback step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTensor {
    pub values: Array2<f64>,
    pub label: TrendClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Lookback length T.
    pub lookback: usize,
    /// Number of variates N the normalizer expects.
    pub n_vars: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_layers: usize,
    pub ff_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 12,
            n_vars: N_FEATURES,
            d_model: 32,
            n_heads: 2,
            d_head: 16,
            n_layers: 2,
            ff_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ItfError> {
        if self.n_heads * self.d_head != self.d_model {
            return Err(ItfError::Config(format!(
                "heads ({}) x head width ({}) must equal model width ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.lookback == 0 || self.n_vars == 0 || self.d_model < 2 || self.ff_mult == 0 {
            return Err(ItfError::Config("dimensions must be positive, width >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Array2<f64>,
    pub ln1_bias: Array2<f64>,
    /// Query projection; head `h` uses columns `h*d_head..(h+1)*d_head`.
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2_gain: Array2<f64>,
    pub ln2_bias: Array2<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array2<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed: EmbedParams,
    pub blocks: Vec<BlockParams>,
    pub head_w: Array2<f64>,
    pub head_b: Array2<f64>,
}

fn randn(rng: &mut impl Rng, shape: (usize, usize), sd: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || sd * rng.sample::<f64, _>(StandardNormal))
}

impl ModelParams {
    /// Random initialisation with fan-in scaled Gaussian weights, unit
    /// layer-norm gains and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ItfError> {
        config.validate()?;
        let mut rng = seeding::rng_from(seeding::substream(seed, streams::INIT));
        let (t, d) = (config.lookback, config.d_model);
        let f = d * config.ff_mult;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let embed = EmbedParams {
            w1: randn(&mut rng, (t, d), fan(t)),
            b1: Array2::zeros((1, d)),
            w2: randn(&mut rng, (d, d), fan(d)),
            b2: Array2::zeros((1, d)),
        };
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1_gain: Array2::ones((1, d)),
                ln1_bias: Array2::zeros((1, d)),
                wq: randn(&mut rng, (d, d), fan(d)),
                wk: randn(&mut rng, (d, d), fan(d)),
                wv: randn(&mut rng, (d, d), fan(d)),
                wo: randn(&mut rng, (d, d), fan(d) * 0.5),
                bo: Array2::zeros((1, d)),
                ln2_gain: Array2::ones((1, d)),
                ln2_bias: Array2::zeros((1, d)),
                ff_w1: randn(&mut rng, (d, f), fan(d)),
                ff_b1: Array2::zeros((1, f)),
                ff_w2: randn(&mut rng, (f, d), fan(f) * 0.5),
                ff_b2: Array2::zeros((1, d)),
            })
            .collect();
        Ok(Self {
            config,
            embed,
            blocks,
            head_w: randn(&mut rng, (d, N_CLASSES), 0.1 * fan(d)),
            head_b: Array2::zeros((1, N_CLASSES)),
        })
    }

    /// Every parameter tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("embed.w1".into(), &self.embed.w1),
            ("embed.b1".into(), &self.embed.b1),
            ("embed.w2".into(), &self.embed.w2),
            ("embed.b2".into(), &self.embed.b2),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("bo", &b.bo),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
                ("ff_w1", &b.ff_w1),
                ("ff_b1", &b.ff_b1),
                ("ff_w2", &b.ff_w2),
                ("ff_b2", &b.ff_b2),
            ] {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![
            &mut self.embed.w1,
            &mut self.embed.b1,
            &mut self.embed.w2,
            &mut self.embed.b2,
        ];
        for b in self.blocks.iter_mut() {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.ff_w1,
                &mut b.ff_b1,
                &mut b.ff_w2,
                &mut b.ff_b2,
            ]);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let src: Vec<&Array2<f64>> = other.tensors().into_iter().map(|(_, t)| t).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.scaled_add(scale, s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_row(m: &mut Array2<f64>, row: &Array2<f64>) {
    *m += &row.row(0);
}

fn check_finite(m: &Array2<f64>, layer: &str) -> Result<(), ItfError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ItfError::NumericalError(layer.to_string()))
    }
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm_cached(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row *= *inv;
    }
    let mut y = &xhat * &gain.row(0);
    y += &bias.row(0);
    (y, LnCache { xhat, inv_std })
}

/// Per-token normalization over the model dimension, then gain and bias.
pub fn layer_norm(tokens: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> Array2<f64> {
    layer_norm_cached(tokens, gain, bias).0
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let dgain = (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * &gain.row(0);
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let s = cache.inv_std[i];
        let mut out = dx.row_mut(i);
        for j in 0..dy.ncols() {
            out[j] = s * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
    (dx, dgain, dbias)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

struct EmbedCache {
    a1: Array2<f64>,
    g1: Array2<f64>,
}

fn embed_cached(x: &ArrayView2<f64>, p: &EmbedParams) -> (Array2<f64>, EmbedCache) {
    let mut a1 = x.dot(&p.w1);
    add_row(&mut a1, &p.b1);
    let g1 = a1.mapv(gelu);
    let mut e = g1.dot(&p.w2);
    add_row(&mut e, &p.b2);
    (e, EmbedCache { a1, g1 })
}

/// Shared MLP applied to each variate row: N×T → N×D. No positional terms.
pub fn embed(sample: &SampleTensor, params: &ModelParams) -> Result<Array2<f64>, ItfError> {
    check_input(&sample.values, &params.config)?;
    Ok(embed_cached(&sample.values.view(), &params.embed).0)
}

fn check_input(values: &Array2<f64>, config: &ModelConfig) -> Result<(), ItfError> {
    if values.ncols() != config.lookback || values.nrows() == 0 {
        return Err(ItfError::Shape(format!(
            "sample is {}x{}, model expects N x {}",
            values.nrows(),
            values.ncols(),
            config.lookback
        )));
    }
    Ok(())
}

struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

fn mha_cached(h: &Array2<f64>, b: &BlockParams, n_heads: usize, d_head: usize) -> (Array2<f64>, AttnCache) {
    let q = h.dot(&b.wq);
    let k = h.dot(&b.wk);
    let v = h.dot(&b.wv);
    let n = h.nrows();
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut concat = Array2::zeros((n, n_heads * d_head));
    let mut probs = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let cols = s![.., head * d_head..(head + 1) * d_head];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t());
        sc *= scale;
        softmax_rows(&mut sc);
        concat.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    let mut out = concat.dot(&b.wo);
    add_row(&mut out, &b.bo);
    (
        out,
        AttnCache {
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

/// Attention weights of each head (rows sum to one).
pub fn attention_weights(tokens: &Array2<f64>, block: &BlockParams, config: &ModelConfig) -> Vec<Array2<f64>> {
    mha_cached(tokens, block, config.n_heads, config.d_head).1.probs
}

/// Multi-head self-attention across tokens with the residual added:
/// `tokens + concat_h(softmax(Q_h K_hᵀ / √d_k) V_h) W_O + b_O`.
pub fn attention(tokens: &Array2<f64>, block: &BlockParams, config: &ModelConfig) -> Array2<f64> {
    let (out, _) = mha_cached(tokens, block, config.n_heads, config.d_head);
    tokens + &out
}

fn mha_backward(
    dout: &Array2<f64>,
    h: &Array2<f64>,
    b: &BlockParams,
    c: &AttnCache,
    g: &mut BlockParams,
    n_heads: usize,
    d_head: usize,
) -> Array2<f64> {
    g.wo += &c.concat.t().dot(dout);
    g.bo += &dout.sum_axis(Axis(0));
    let dconcat = dout.dot(&b.wo.t());
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for head in 0..n_heads {
        let cols = s![.., head * d_head..(head + 1) * d_head];
        let p = &c.probs[head];
        let dout_h = dconcat.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
        let dp = dout_h.dot(&c.v.slice(cols).t());
        let mut ds = dp.clone();
        for i in 0..p.nrows() {
            let dot: f64 = dp.row(i).dot(&p.row(i));
            for j in 0..p.ncols() {
                ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
            }
        }
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    g.wq += &h.t().dot(&dq);
    g.wk += &h.t().dot(&dk);
    g.wv += &h.t().dot(&dv);
    dq.dot(&b.wq.t()) + dk.dot(&b.wk.t()) + dv.dot(&b.wv.t())
}

struct BlockCache {
    ln1: LnCache,
    y1: Array2<f64>,
    attn: AttnCache,
    ln2: LnCache,
    y2: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
}

struct ForwardCache {
    embed: EmbedCache,
    blocks: Vec<BlockCache>,
    n_tokens: usize,
    pooled: Array1<f64>,
    probs: Array1<f64>,
}

fn forward_cached(x: &ArrayView2<f64>, p: &ModelParams) -> Result<ForwardCache, ItfError> {
    let cfg = &p.config;
    let (mut h, embed) = embed_cached(x, &p.embed);
    check_finite(&h, "embedding")?;
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for (i, b) in p.blocks.iter().enumerate() {
        let (y1, ln1) = layer_norm_cached(&h, &b.ln1_gain, &b.ln1_bias);
        let (a, attn) = mha_cached(&y1, b, cfg.n_heads, cfg.d_head);
        h += &a;
        check_finite(&h, &format!("block{i}.attention"))?;
        let (y2, ln2) = layer_norm_cached(&h, &b.ln2_gain, &b.ln2_bias);
        let mut f1 = y2.dot(&b.ff_w1);
        add_row(&mut f1, &b.ff_b1);
        let g = f1.mapv(gelu);
        let mut f2 = g.dot(&b.ff_w2);
        add_row(&mut f2, &b.ff_b2);
        h += &f2;
        check_finite(&h, &format!("block{i}.feed_forward"))?;
        blocks.push(BlockCache {
            ln1,
            y1,
            attn,
            ln2,
            y2,
            f1,
            g,
        });
    }
    let pooled = h.mean_axis(Axis(0)).expect("at least one token");
    let mut logits = pooled.dot(&p.head_w);
    logits += &p.head_b.row(0);
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut probs = logits.mapv(|v| (v - max).exp());
    let s = probs.sum();
    probs /= s;
    if !probs.iter().all(|v| v.is_finite()) {
        return Err(ItfError::NumericalError("head".into()));
    }
    Ok(ForwardCache {
        embed,
        blocks,
        n_tokens: h.nrows(),
        pooled,
        probs,
    })
}

/// Encoder output tokens (before pooling).
pub fn encode(sample: &SampleTensor, params: &ModelParams) -> Result<Array2<f64>, ItfError> {
    check_input(&sample.values, &params.config)?;
    let cfg = &params.config;
    let mut h = embed_cached(&sample.values.view(), &params.embed).0;
    for b in &params.blocks {
        let y1 = layer_norm(&h, &b.ln1_gain, &b.ln1_bias);
        h += &mha_cached(&y1, b, cfg.n_heads, cfg.d_head).0;
        let y2 = layer_norm(&h, &b.ln2_gain, &b.ln2_bias);
        let mut f1 = y2.dot(&b.ff_w1);
        add_row(&mut f1, &b.ff_b1);
        let mut f2 = f1.mapv(gelu).dot(&b.ff_w2);
        add_row(&mut f2, &b.ff_b2);
        h += &f2;
    }
    Ok(h)
}

/// Class probabilities (Down, Unchanged, Up) for one sample.
pub fn forward(sample: &SampleTensor, params: &ModelParams) -> Result<[f64; N_CLASSES], ItfError> {
    check_input(&sample.values, &params.config)?;
    let c = forward_cached(&sample.values.view(), params)?;
    Ok([c.probs[0], c.probs[1], c.probs[2]])
}

fn sample_gradients(
    sample: &SampleTensor,
    p: &ModelParams,
    weight: f64,
) -> Result<(f64, ModelParams), ItfError> {
    let cfg = &p.config;
    let x = sample.values.view();
    let c = forward_cached(&x, p)?;
    let label = sample.label.index();
    let loss = -c.probs[label].max(f64::MIN_POSITIVE).ln();
    let mut g = p.zeros_like();

    let mut dlogits = c.probs.clone();
    dlogits[label] -= 1.0;
    dlogits *= weight;
    let pooled2 = c.pooled.view().insert_axis(Axis(1));
    g.head_w = pooled2.dot(&dlogits.view().insert_axis(Axis(0)));
    g.head_b = dlogits.clone().insert_axis(Axis(0));
    let dpooled = p.head_w.dot(&dlogits);
    let n = c.n_tokens;
    let mut dh = Array2::from_shape_fn((n, cfg.d_model), |(_, j)| dpooled[j] / n as f64);

    for (i, b) in p.blocks.iter().enumerate().rev() {
        let bc = &c.blocks[i];
        let gb = &mut g.blocks[i];
        // feed-forward branch
        gb.ff_w2 += &bc.g.t().dot(&dh);
        gb.ff_b2 += &dh.sum_axis(Axis(0));
        let mut df1 = dh.dot(&b.ff_w2.t());
        df1.zip_mut_with(&bc.f1, |d, &a| *d *= gelu_grad(a));
        gb.ff_w1 += &bc.y2.t().dot(&df1);
        gb.ff_b1 += &df1.sum_axis(Axis(0));
        let dy2 = df1.dot(&b.ff_w1.t());
        let (dx2, dg2, db2) = layer_norm_backward(&dy2, &bc.ln2, &b.ln2_gain);
        gb.ln2_gain += &dg2;
        gb.ln2_bias += &db2;
        dh += &dx2;
        // attention branch
        let dy1 = mha_backward(&dh, &bc.y1, b, &bc.attn, gb, cfg.n_heads, cfg.d_head);
        let (dx1, dg1, db1) = layer_norm_backward(&dy1, &bc.ln1, &b.ln1_gain);
        gb.ln1_gain += &dg1;
        gb.ln1_bias += &db1;
        dh += &dx1;
    }

    let e = &c.embed;
    g.embed.w2 = e.g1.t().dot(&dh);
    g.embed.b2 = dh.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut da1 = dh.dot(&p.embed.w2.t());
    da1.zip_mut_with(&e.a1, |d, &a| *d *= gelu_grad(a));
    g.embed.w1 = x.t().dot(&da1);
    g.embed.b1 = da1.sum_axis(Axis(0)).insert_axis(Axis(0));
    Ok((loss, g))
}

/// Mean cross-entropy over the batch and its gradient for every parameter.
///
/// Per-sample gradients are computed in parallel and reduced in batch order.
pub fn loss_and_gradients(
    batch: &[SampleTensor],
    params: &ModelParams,
) -> Result<(f64, ModelParams), ItfError> {
    if batch.is_empty() {
        return Err(ItfError::EmptyBatch);
    }
    for s in batch {
        check_input(&s.values, &params.config)?;
    }
    let w = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, ModelParams)> = batch
        .par_iter()
        .map(|s| sample_gradients(s, params, w))
        .collect::<Result<_, _>>()?;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_scaled(g, 1.0);
    }
    let loss = loss * w;
    if !loss.is_finite() || !total.is_finite() {
        return Err(ItfError::NumericalError("loss".into()));
    }
    Ok((loss, total))
}

/// Mean cross-entropy and accuracy without gradients.
pub fn evaluate(samples: &[SampleTensor], params: &ModelParams) -> Result<(f64, f64), ItfError> {
    if samples.is_empty() {
        return Err(ItfError::EmptyBatch);
    }
    let per: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|s| {
            let p = forward(s, params)?;
            let pred = argmax(&p);
            Ok((-p[s.label.index()].max(f64::MIN_POSITIVE).ln(), pred == s.label.index()))
        })
        .collect::<Result<_, ItfError>>()?;
    let n = samples.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per.iter().filter(|p| p.1).count() as f64 / n;
    Ok((loss, acc))
}

fn argmax(p: &[f64; N_CLASSES]) -> usize {
    let mut best = 0;
    for i in 1..N_CLASSES {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Step size at epoch `e` is `learning_rate / (1 + lr_decay * e)`.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            lr_decay: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<EpochStats>,
}

/// Mini-batch gradient descent with heavy-ball momentum and `1/(1 + decay·e)` step decay.
///
/// The trace holds the full-split loss and accuracy before training (epoch 0)
/// and after every epoch. Training aborts if the training loss exceeds ten
/// times its initial value.
pub fn train(
    train_set: &[SampleTensor],
    valid_set: &[SampleTensor],
    params: ModelParams,
    schedule: &Schedule,
) -> Result<TrainOutcome, ItfError> {
    if train_set.is_empty() {
        return Err(ItfError::EmptyBatch);
    }
    let mut params = params;
    let mut velocity = params.zeros_like();
    let mut trace = Vec::new();
    let record = |epoch: usize, params: &ModelParams, trace: &mut Vec<EpochStats>| -> Result<f64, ItfError> {
        let (loss, accuracy) = evaluate(train_set, params)?;
        trace.push(EpochStats {
            epoch,
            split: Split::Train,
            loss,
            accuracy,
        });
        if !valid_set.is_empty() {
            let (loss, accuracy) = evaluate(valid_set, params)?;
            trace.push(EpochStats {
                epoch,
                split: Split::Valid,
                loss,
                accuracy,
            });
        }
        Ok(loss)
    };
    let initial = record(0, &params, &mut trace)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batch_size = schedule.batch_size.max(1);
    for epoch in 1..=schedule.epochs {
        let mut rng = seeding::rng_from(seeding::derive_seed(
            schedule.seed,
            &[streams::BATCH.as_bytes(), &(epoch as u64).to_le_bytes()],
        ));
        order.shuffle(&mut rng);
        let lr = schedule.learning_rate / (1.0 + schedule.lr_decay * (epoch - 1) as f64);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<SampleTensor> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (_, grad) = loss_and_gradients(&batch, &params)?;
            let decay = velocity.clone();
            velocity = grad;
            velocity.add_scaled(&decay, schedule.momentum);
            params.add_scaled(&velocity, -lr);
        }
        let loss = record(epoch, &params, &mut trace)?;
        if !(loss <= 10.0 * initial) {
            return Err(ItfError::Diverged {
                epoch,
                loss,
                initial,
            });
        }
    }
    Ok(TrainOutcome { params, trace })
}

/// Per-variate z-scoring fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Normalizer {
    pub fn identity(n_vars: usize) -> Self {
        Self {
            mean: vec![0.0; n_vars],
            sd: vec![1.0; n_vars],
        }
    }

    pub fn fit(samples: &[SampleTensor]) -> Result<Self, ItfError> {
        let first = samples.first().ok_or(ItfError::EmptyBatch)?;
        let n_vars = first.values.nrows();
        let mut mean = vec![0.0; n_vars];
        let mut sd = vec![0.0; n_vars];
        for v in 0..n_vars {
            let vals: Vec<f64> = samples.iter().flat_map(|s| s.values.row(v).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            mean[v] = m;
            sd[v] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, sample: &SampleTensor) -> SampleTensor {
        let mut values = sample.values.clone();
        for (v, mut row) in values.outer_iter_mut().enumerate() {
            let (m, s) = (self.mean[v], self.sd[v]);
            row.mapv_inplace(|x| (x - m) / s);
        }
        SampleTensor {
            values,
            label: sample.label,
        }
    }
}

/// Trained parameters plus the input normalization they expect.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub normalizer: Normalizer,
}

impl TrainedModel {
    pub fn predict(&self, raw: &Array2<f64>) -> Result<[f64; N_CLASSES], ItfError> {
        let s = self.normalizer.apply(&SampleTensor {
            values: raw.clone(),
            label: TrendClass::Unchanged,
        });
        forward(&s, &self.params)
    }
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> std::io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Binary checkpoint: magic, version, model dimensions, normalizer and every
/// tensor as (name, rows, cols, little-endian f64 data).
pub fn write_checkpoint(model: &TrainedModel, w: &mut impl Write) -> std::io::Result<()> {
    let c = &model.params.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [c.lookback, c.n_vars, c.d_model, c.n_heads, c.d_head, c.n_layers, c.ff_mult] {
        put_u64(w, v as u64)?;
    }
    put_u64(w, model.normalizer.mean.len() as u64)?;
    put_f64s(w, &model.normalizer.mean)?;
    put_f64s(w, &model.normalizer.sd)?;
    let tensors = model.params.tensors();
    put_u64(w, tensors.len() as u64)?;
    for (name, t) in tensors {
        put_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        put_u64(w, t.nrows() as u64)?;
        put_u64(w, t.ncols() as u64)?;
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct ByteReader<R> {
    inner: R,
}

impl<R: Read> ByteReader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], ItfError> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| ItfError::Checkpoint(format!("truncated: {e}")))?;
        Ok(b)
    }

    fn u64(&mut self) -> Result<u64, ItfError> {
        Ok(u64::from_le_bytes(self.bytes::<8>()?))
    }

    fn usize(&mut self, limit: u64) -> Result<usize, ItfError> {
        let v = self.u64()?;
        if v > limit {
            return Err(ItfError::Checkpoint(format!("field value {v} is implausible")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64, ItfError> {
        Ok(f64::from_le_bytes(self.bytes::<8>()?))
    }
}

pub fn read_checkpoint(r: impl Read) -> Result<TrainedModel, ItfError> {
    let mut r = ByteReader { inner: r };
    if &r.bytes::<8>()? != CHECKPOINT_MAGIC {
        return Err(ItfError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.bytes::<4>()?);
    if version != CHECKPOINT_VERSION {
        return Err(ItfError::Checkpoint(format!("unsupported version {version}")));
    }
    const DIM: u64 = 1 << 16;
    let config = ModelConfig {
        lookback: r.usize(DIM)?,
        n_vars: r.usize(DIM)?,
        d_model: r.usize(DIM)?,
        n_heads: r.usize(DIM)?,
        d_head: r.usize(DIM)?,
        n_layers: r.usize(DIM)?,
        ff_mult: r.usize(DIM)?,
    };
    config.validate()?;
    let nv = r.usize(DIM)?;
    let mean = (0..nv).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let sd = (0..nv).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let mut params = ModelParams::init(config, 0)?;
    let expected: Vec<(String, (usize, usize))> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.dim()))
        .collect();
    let count = r.usize(DIM)?;
    if count != expected.len() {
        return Err(ItfError::Checkpoint(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    for ((name, dim), dst) in expected.into_iter().zip(params.tensors_mut()) {
        let len = r.usize(1024)?;
        let mut buf = vec![0u8; len];
        r.inner
            .read_exact(&mut buf)
            .map_err(|e| ItfError::Checkpoint(format!("truncated: {e}")))?;
        if buf != name.as_bytes() {
            return Err(ItfError::Checkpoint(format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(&buf)
            )));
        }
        let rows = r.usize(DIM)?;
        let cols = r.usize(DIM)?;
        if (rows, cols) != dim {
            return Err(ItfError::Checkpoint(format!(
                "tensor {name} is {rows}x{cols}, expected {}x{}",
                dim.0, dim.1
            )));
        }
        for v in dst.iter_mut() {
            *v = r.f64()?;
        }
    }
    Ok(TrainedModel {
        params,
        normalizer: Normalizer { mean, sd },
    })
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<(), ItfError> {
    let f = std::fs::File::create(path).map_err(|e| ItfError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(model, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| ItfError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel, ItfError> {
    let f = std::fs::File::open(path).map_err(|e| ItfError::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(std::io::BufReader::new(f))
}

/// Writes `epoch,split,loss,accuracy`.
pub fn write_loss_trace(trace: &[EpochStats], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "epoch,split,loss,accuracy")?;
    for e in trace {
        writeln!(w, "{},{},{},{}", e.epoch, e.split, e.loss, e.accuracy)?;
    }
    Ok(())
}

/// Class probabilities for one fund, produced from data through `month`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendForecast {
    pub fund: SeriesId,
    pub month: MonthIndex,
    /// Down, Unchanged, Up.
    pub probs: [f64; N_CLASSES],
}

/// How a forecast becomes the selection score `p_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SelectionScore {
    #[default]
    Up,
    UpPlusHalfUnchanged,
}

impl TrendForecast {
    pub fn score(&self, mode: SelectionScore) -> f64 {
        match mode {
            SelectionScore::Up => self.probs[TrendClass::Up.index()],
            SelectionScore::UpPlusHalfUnchanged => {
                self.probs[TrendClass::Up.index()] + 0.5 * self.probs[TrendClass::Unchanged.index()]
            }
        }
    }
}

/// Valid frames indexed by (fund, month).
pub type FrameIndex<'a> = BTreeMap<(&'a SeriesId, MonthIndex), &'a FeatureFrame>;

pub fn index_frames(frames: &[FeatureFrame]) -> FrameIndex<'_> {
    frames
        .iter()
        .filter(|f| f.valid)
        .map(|f| ((&f.fund, f.month), f))
        .collect()
}

/// The N×T feature history of `fund` ending at `end`, if every month has a valid frame.
pub fn lookback_tensor(index: &FrameIndex<'_>, fund: &SeriesId, end: MonthIndex, lookback: usize) -> Option<Array2<f64>> {
    let mut values = Array2::zeros((N_FEATURES, lookback));
    for t in 0..lookback {
        let month = end.add_months(t as i64 - (lookback as i64 - 1));
        let frame = index.get(&(fund, month))?;
        for (v, x) in frame.values().iter().enumerate() {
            values[[v, t]] = *x;
        }
    }
    Some(values)
}

/// One forecast per fund with `lookback` consecutive valid frames ending at `month`.
pub fn predict_panel(
    frames: &[FeatureFrame],
    model: &TrainedModel,
    month: MonthIndex,
) -> Result<(Vec<TrendForecast>, Vec<(SeriesId, String)>), ItfError> {
    let index = index_frames(frames);
    let funds: BTreeSet<&SeriesId> = frames.iter().map(|f| &f.fund).collect();
    let lookback = model.params.config.lookback;
    let mut forecasts = Vec::new();
    let mut skipped = Vec::new();
    for fund in funds {
        match lookback_tensor(&index, fund, month, lookback) {
            Some(raw) => forecasts.push(TrendForecast {
                fund: fund.clone(),
                month,
                probs: model.predict(&raw)?,
            }),
            None => skipped.push((
                fund.clone(),
                format!("fewer than {lookback} consecutive valid frames ending {month}"),
            )),
        }
    }
    Ok((forecasts, skipped))
}

/// Rejects training samples whose label month is not before every evaluation month.
pub fn assert_chronological(
    train_label_months: &[MonthIndex],
    eval_months: &[MonthIndex],
) -> Result<(), ItfError> {
    let (Some(&latest), Some(&earliest)) = (train_label_months.iter().max(), eval_months.iter().min()) else {
        return Ok(());
    };
    if latest >= earliest {
        return Err(ItfError::LookAhead {
            train: latest,
            eval: earliest,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            lookback: 6,
            n_vars: 5,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            n_layers: 1,
            ff_mult: 4,
        }
    }

    fn random_sample(cfg: &ModelConfig, seed: u64, label: TrendClass) -> SampleTensor {
        let mut rng = seeding::rng_from(seed);
        SampleTensor {
            values: randn(&mut rng, (cfg.n_vars, cfg.lookback), 1.0),
            label,
        }
    }

    #[test]
    fn trend_labels() {
        assert_eq!(label_trend(0.02, 0.005), TrendClass::Up);
        assert_eq!(label_trend(-0.001, 0.005), TrendClass::Unchanged);
        assert_eq!(label_trend(-0.005, 0.005), TrendClass::Unchanged);
        assert_eq!(label_trend(0.005, 0.005), TrendClass::Unchanged);
        assert_eq!(label_trend(-0.0051, 0.005), TrendClass::Down);
    }

    #[test]
    fn config_requires_consistent_heads() {
        let cfg = ModelConfig {
            d_head: 5,
            ..small()
        };
        assert!(matches!(ModelParams::init(cfg, 1), Err(ItfError::Config(_))));
    }

    #[test]
    fn zero_weight_embedding_is_bias() {
        let cfg = small();
        let mut p = ModelParams::init(cfg, 1).unwrap();
        p.embed.w2.fill(0.0);
        p.embed.b2 = Array2::from_shape_fn((1, cfg.d_model), |(_, j)| j as f64 * 0.5);
        let s = random_sample(&cfg, 3, TrendClass::Up);
        let e = embed(&s, &p).unwrap();
        for row in e.outer_iter() {
            assert_eq!(row, p.embed.b2.row(0));
        }
    }

    #[test]
    fn embedding_matches_loop_oracle() {
        let cfg = ModelConfig {
            lookback: 8,
            n_vars: 4,
            ..small()
        };
        let p = ModelParams::init(cfg, 5).unwrap();
        let s = random_sample(&cfg, 9, TrendClass::Down);
        let e = embed(&s, &p).unwrap();
        let (t, d) = (cfg.lookback, cfg.d_model);
        for n in 0..cfg.n_vars {
            let mut hidden = vec![0.0; d];
            for j in 0..d {
                let mut acc = p.embed.b1[[0, j]];
                for k in 0..t {
                    acc += s.values[[n, k]] * p.embed.w1[[k, j]];
                }
                hidden[j] = gelu(acc);
            }
            for j in 0..d {
                let mut acc = p.embed.b2[[0, j]];
                for k in 0..d {
                    acc += hidden[k] * p.embed.w2[[k, j]];
                }
                assert!((e[[n, j]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let x = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let y = layer_norm(&x, &Array2::ones((1, 3)), &Array2::zeros((1, 3)));
        let expected = [-1.2247, 0.0, 1.2247];
        for (a, b) in y.iter().zip(expected) {
            assert!((a - b).abs() < 1e-3);
        }
        let c = Array2::from_elem((2, 4), 7.5);
        let y = layer_norm(&c, &Array2::ones((1, 4)), &Array2::zeros((1, 4)));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_attention_returns_value() {
        let cfg = small();
        let p = ModelParams::init(cfg, 2).unwrap();
        let b = &p.blocks[0];
        let tok = Array2::from_shape_fn((1, cfg.d_model), |(_, j)| (j as f64).sin());
        let out = attention(&tok, b, &cfg);
        let mut expected = tok.dot(&b.wv).dot(&b.wo);
        add_row(&mut expected, &b.bo);
        expected += &tok;
        for (a, e) in out.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let cfg = small();
        let mut p = ModelParams::init(cfg, 4).unwrap();
        p.head_w.fill(0.0);
        p.head_b.fill(0.0);
        let s = random_sample(&cfg, 8, TrendClass::Up);
        let probs = forward(&s, &p).unwrap();
        for v in probs {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let (loss, _) = loss_and_gradients(&[s], &p).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = ModelParams::init(small(), 4).unwrap();
        let s = SampleTensor {
            values: Array2::zeros((5, 7)),
            label: TrendClass::Up,
        };
        assert!(matches!(forward(&s, &p), Err(ItfError::Shape(_))));
        assert_eq!(loss_and_gradients(&[], &p).unwrap_err(), ItfError::EmptyBatch);
    }

    #[test]
    fn non_finite_input_names_layer() {
        let cfg = small();
        let p = ModelParams::init(cfg, 4).unwrap();
        let mut s = random_sample(&cfg, 1, TrendClass::Up);
        s.values[[0, 0]] = f64::NAN;
        assert_eq!(
            forward(&s, &p).unwrap_err(),
            ItfError::NumericalError("embedding".into())
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small();
        let model = TrainedModel {
            params: ModelParams::init(cfg, 11).unwrap(),
            normalizer: Normalizer {
                mean: vec![0.5; 5],
                sd: vec![2.0; 5],
            },
        };
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        buf[0] = b'X';
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(ItfError::Checkpoint(_))));
        assert!(read_checkpoint(&buf[..20]).is_err());
    }

    #[test]
    fn chronological_guard() {
        let m = |y, mo| MonthIndex::new(y, mo).unwrap();
        assert!(assert_chronological(&[m(2000, 1), m(2000, 5)], &[m(2000, 6)]).is_ok());
        assert!(assert_chronological(&[m(2000, 6)], &[m(2000, 6), m(2000, 7)]).is_err());
    }
}

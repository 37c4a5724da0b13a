use rand::{Rng, RngCore};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::autodiff::{AttentionLayout, BoundParams, Graph, Tensor, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Equal-width rows of token ids; `mask` is `false` on padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub batch: usize,
    pub width: usize,
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl Padded {
    pub fn from_rows(rows: &[Vec<u32>], pad: u32) -> Result<Self> {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        if rows.is_empty() || width == 0 {
            return Err(Error::dim("empty token batch"));
        }
        let mut ids = Vec::with_capacity(rows.len() * width);
        let mut mask = Vec::with_capacity(rows.len() * width);
        for row in rows {
            ids.extend_from_slice(row);
            mask.extend(std::iter::repeat_n(true, row.len()));
            ids.extend(std::iter::repeat_n(pad, width - row.len()));
            mask.extend(std::iter::repeat_n(false, width - row.len()));
        }
        Ok(Padded {
            batch: rows.len(),
            width,
            ids,
            mask,
        })
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.width..(b + 1) * self.width]
    }
}

/// Dropout driven by an explicit generator; `None` disables it.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'a mut dyn RngCore) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = g.value(x).shape().to_vec();
        let mask = (0..g.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

/// Sinusoidal position signal for `len` positions.
pub fn positions(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

pub fn bind(g: &mut Graph, params: &ModelParams) -> BoundParams {
    params
        .iter()
        .map(|(name, t)| (name.clone(), g.param(name.clone(), t.clone())))
        .collect()
}

fn p(bound: &BoundParams, name: &str) -> Result<Var> {
    bound
        .get(name)
        .copied()
        .ok_or_else(|| Error::config(format!("missing parameter {name}")))
}

fn linear(g: &mut Graph, bound: &BoundParams, x: Var, prefix: &str, w: &str, b: &str) -> Result<Var> {
    let y = g.matmul(x, p(bound, &format!("{prefix}.{w}"))?)?;
    g.add_row(y, p(bound, &format!("{prefix}.{b}"))?)
}

fn norm(g: &mut Graph, bound: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
    g.layer_norm(
        x,
        p(bound, &format!("{prefix}.gamma"))?,
        p(bound, &format!("{prefix}.beta"))?,
        LN_EPS,
    )
}

fn attention_block(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    queries: Var,
    keys: Var,
    layout: AttentionLayout,
) -> Result<Var> {
    let q = linear(g, bound, queries, prefix, "q.weight", "q.bias")?;
    let k = g.matmul(keys, p(bound, &format!("{prefix}.k.weight"))?)?;
    let v = linear(g, bound, keys, prefix, "v.weight", "v.bias")?;
    let a = g.attention(q, k, v, layout)?;
    linear(g, bound, a, prefix, "o.weight", "o.bias")
}

fn ffn_block(g: &mut Graph, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, bound, x, prefix, "w1", "b1")?;
    let h = g.relu(h);
    linear(g, bound, h, prefix, "w2", "b2")
}

fn embed(g: &mut Graph, bound: &BoundParams, cfg: &ModelConfig, tokens: &Padded) -> Result<Var> {
    if tokens.width > cfg.max_len {
        return Err(Error::Length {
            len: tokens.width,
            max: cfg.max_len,
        });
    }
    if let Some(&bad) = tokens.ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::dim(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let d = cfg.d_model;
    let ids: Vec<usize> = tokens.ids.iter().map(|&t| t as usize).collect();
    let e = g.gather_rows(p(bound, "embed.weight")?, &ids)?;
    let e = g.scale(e, (d as f64).sqrt());
    let pe = positions(tokens.width, d);
    let tiled: Vec<f64> = (0..tokens.batch).flat_map(|_| pe.iter().copied()).collect();
    let pos = g.constant(Tensor::new(vec![tokens.batch * tokens.width, d], tiled)?);
    g.add(e, pos)
}

/// Encoder states for a batch of `[source_id; tokens]` rows.
#[derive(Clone, Debug)]
pub struct EncoderOut {
    pub hidden: Var,
    pub key_mask: Vec<bool>,
    pub batch: usize,
    pub width: usize,
}

pub fn encoder_forward(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &ModelConfig,
    src: &Padded,
    dropout: &mut Dropout<'_>,
) -> Result<EncoderOut> {
    let x = embed(g, bound, cfg, src)?;
    let mut x = dropout.apply(g, x)?;
    let layout = AttentionLayout {
        batch: src.batch,
        query_len: src.width,
        key_len: src.width,
        heads: cfg.num_heads,
        causal: false,
        key_mask: src.mask.clone(),
    };
    for i in 0..cfg.num_encoder_layers {
        let pre = format!("encoder.{i}");
        let a = norm(g, bound, x, &format!("{pre}.ln1"))?;
        let a = attention_block(g, bound, &format!("{pre}.self_attn"), a, a, layout.clone())?;
        let a = dropout.apply(g, a)?;
        x = g.add(x, a)?;
        let f = norm(g, bound, x, &format!("{pre}.ln2"))?;
        let f = ffn_block(g, bound, &format!("{pre}.ffn"), f)?;
        let f = dropout.apply(g, f)?;
        x = g.add(x, f)?;
    }
    let hidden = norm(g, bound, x, "encoder.final_ln")?;
    Ok(EncoderOut {
        hidden,
        key_mask: src.mask.clone(),
        batch: src.batch,
        width: src.width,
    })
}

/// Teacher-forced decoder outputs, `batch * width` rows each.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOut {
    pub logits: Var,
    /// Final decoder-layer states, after the closing layer norm and before
    /// the output projection.
    pub cwr: Var,
}

pub fn decoder_forward(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &ModelConfig,
    enc: &EncoderOut,
    dec_in: &Padded,
    dropout: &mut Dropout<'_>,
) -> Result<DecoderOut> {
    if dec_in.batch != enc.batch {
        return Err(Error::dim("decoder and encoder batch sizes differ"));
    }
    let x = embed(g, bound, cfg, dec_in)?;
    let mut x = dropout.apply(g, x)?;
    let self_layout = AttentionLayout {
        batch: dec_in.batch,
        query_len: dec_in.width,
        key_len: dec_in.width,
        heads: cfg.num_heads,
        causal: true,
        key_mask: dec_in.mask.clone(),
    };
    let cross_layout = AttentionLayout {
        batch: dec_in.batch,
        query_len: dec_in.width,
        key_len: enc.width,
        heads: cfg.num_heads,
        causal: false,
        key_mask: enc.key_mask.clone(),
    };
    for i in 0..cfg.num_decoder_layers {
        let pre = format!("decoder.{i}");
        let a = norm(g, bound, x, &format!("{pre}.ln1"))?;
        let a = attention_block(g, bound, &format!("{pre}.self_attn"), a, a, self_layout.clone())?;
        let a = dropout.apply(g, a)?;
        x = g.add(x, a)?;
        let c = norm(g, bound, x, &format!("{pre}.ln2"))?;
        let c = attention_block(
            g,
            bound,
            &format!("{pre}.cross_attn"),
            c,
            enc.hidden,
            cross_layout.clone(),
        )?;
        let c = dropout.apply(g, c)?;
        x = g.add(x, c)?;
        let f = norm(g, bound, x, &format!("{pre}.ln3"))?;
        let f = ffn_block(g, bound, &format!("{pre}.ffn"), f)?;
        let f = dropout.apply(g, f)?;
        x = g.add(x, f)?;
    }
    let cwr = norm(g, bound, x, "decoder.final_ln")?;
    let logits = linear(g, bound, cwr, "output", "weight", "bias")?;
    Ok(DecoderOut { logits, cwr })
}

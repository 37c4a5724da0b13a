//! Single-sentence entry points and the cached incremental decoder used for
//! autoregressive search.

use super::config::ModelConfig;
use super::forward::{bind, decoder_forward, encoder_forward, positions, Dropout, EncoderOut, Padded};
use super::params::ModelParams;
use crate::autodiff::{gemm, Graph, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Encoder output for one `[source_id; tokens]` sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSource {
    /// `(len + 1) × d_model`; row 0 is the source language-ID position.
    pub hidden: Tensor,
    pub mask: Vec<bool>,
}

pub fn encode(
    tokens: &[u32],
    source_id: u32,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<EncodedSource> {
    if tokens.len() + 1 > cfg.max_len {
        return Err(Error::Length {
            len: tokens.len() + 1,
            max: cfg.max_len,
        });
    }
    let mut row = Vec::with_capacity(tokens.len() + 1);
    row.push(source_id);
    row.extend_from_slice(tokens);
    let src = Padded::from_rows(&[row], 0)?;
    let mut g = Graph::new();
    let bound = bind(&mut g, params);
    let out = encoder_forward(&mut g, &bound, cfg, &src, &mut Dropout::off())?;
    Ok(EncodedSource {
        hidden: g.value(out.hidden).clone(),
        mask: out.key_mask,
    })
}

/// Logits and CWRs for every position of `[target_id; gold_prefix]`.
pub fn decode_teacher_forced(
    enc: &EncodedSource,
    target_id: u32,
    gold_prefix: &[u32],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(Tensor, Tensor)> {
    if gold_prefix.len() + 1 > cfg.max_len {
        return Err(Error::Length {
            len: gold_prefix.len() + 1,
            max: cfg.max_len,
        });
    }
    let mut row = Vec::with_capacity(gold_prefix.len() + 1);
    row.push(target_id);
    row.extend_from_slice(gold_prefix);
    let dec_in = Padded::from_rows(&[row], 0)?;
    let mut g = Graph::new();
    let bound = bind(&mut g, params);
    let hidden = g.constant(enc.hidden.clone());
    let enc_out = EncoderOut {
        hidden,
        key_mask: enc.mask.clone(),
        batch: 1,
        width: enc.mask.len(),
    };
    let out = decoder_forward(&mut g, &bound, cfg, &enc_out, &dec_in, &mut Dropout::off())?;
    Ok((g.value(out.logits).clone(), g.value(out.cwr).clone()))
}

/// Next-token log-probabilities after `[target_id; prefix]`.
pub fn decode_step(
    enc: &EncodedSource,
    target_id: u32,
    prefix: &[u32],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    if prefix.len() + 1 > cfg.max_len {
        return Err(Error::Length {
            len: prefix.len() + 1,
            max: cfg.max_len,
        });
    }
    let dec = IncrementalDecoder::new(cfg, params, enc)?;
    let mut state = dec.start();
    let mut out = dec.step(&mut state, target_id)?;
    for &t in prefix {
        out = dec.step(&mut state, t)?;
    }
    Ok(out.log_probs)
}

struct AttnRefs<'a> {
    q_w: &'a Tensor,
    q_b: &'a Tensor,
    k_w: &'a Tensor,
    v_w: &'a Tensor,
    v_b: &'a Tensor,
    o_w: &'a Tensor,
    o_b: &'a Tensor,
}

impl<'a> AttnRefs<'a> {
    fn new(params: &'a ModelParams, prefix: &str) -> Result<Self> {
        let t = |s: &str| params.get(&format!("{prefix}.{s}"));
        Ok(AttnRefs {
            q_w: t("q.weight")?,
            q_b: t("q.bias")?,
            k_w: t("k.weight")?,
            v_w: t("v.weight")?,
            v_b: t("v.bias")?,
            o_w: t("o.weight")?,
            o_b: t("o.bias")?,
        })
    }
}

struct NormRefs<'a> {
    gamma: &'a Tensor,
    beta: &'a Tensor,
}

impl<'a> NormRefs<'a> {
    fn new(params: &'a ModelParams, prefix: &str) -> Result<Self> {
        Ok(NormRefs {
            gamma: params.get(&format!("{prefix}.gamma"))?,
            beta: params.get(&format!("{prefix}.beta"))?,
        })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        let mean = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let s = 1.0 / (var + LN_EPS).sqrt();
        x.iter()
            .zip(self.gamma.data())
            .zip(self.beta.data())
            .map(|((v, g), b)| (v - mean) * s * g + b)
            .collect()
    }
}

struct LayerRefs<'a> {
    ln1: NormRefs<'a>,
    self_attn: AttnRefs<'a>,
    ln2: NormRefs<'a>,
    cross_attn: AttnRefs<'a>,
    ln3: NormRefs<'a>,
    w1: &'a Tensor,
    b1: &'a Tensor,
    w2: &'a Tensor,
    b2: &'a Tensor,
    /// Projected encoder keys/values, `src_len × d` each.
    mem_k: Vec<f64>,
    mem_v: Vec<f64>,
}

/// `x · W + b` for a single row.
fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, n) = w.matrix_dims();
    let mut out = b.data().to_vec();
    gemm(1, k, n, x, false, w.data(), false, 1.0, &mut out);
    out
}

fn project(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = w.matrix_dims();
    let mut out = vec![0.0; n];
    gemm(1, k, n, x, false, w.data(), false, 0.0, &mut out);
    out
}

/// One query row attending over `len` cached key/value rows.
fn attend(q: &[f64], keys: &[f64], values: &[f64], mask: Option<&[bool]>, heads: usize) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let len = keys.len() / d;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut w = vec![0.0; len];
    for h in 0..heads {
        let col = h * dh;
        let qh = &q[col..col + dh];
        let mut max = f64::NEG_INFINITY;
        for j in 0..len {
            if mask.is_some_and(|m| !m[j]) {
                w[j] = f64::NEG_INFINITY;
                continue;
            }
            let kh = &keys[j * d + col..][..dh];
            w[j] = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(w[j]);
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut z = 0.0;
        for wj in w.iter_mut() {
            *wj = if *wj == f64::NEG_INFINITY { 0.0 } else { (*wj - max).exp() };
            z += *wj;
        }
        let oh = &mut out[col..col + dh];
        for (j, wj) in w.iter().enumerate() {
            if *wj != 0.0 {
                let vh = &values[j * d + col..][..dh];
                for (o, v) in oh.iter_mut().zip(vh) {
                    *o += wj / z * v;
                }
            }
        }
    }
    out
}

/// Cached self-attention keys/values of the tokens fed so far.
#[derive(Clone, Debug)]
pub struct DecoderState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecoderState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub log_probs: Vec<f64>,
    pub cwr: Vec<f64>,
}

/// Decoder bound to one encoded source; feeds one token per step.
pub struct IncrementalDecoder<'a> {
    cfg: &'a ModelConfig,
    embed: &'a Tensor,
    layers: Vec<LayerRefs<'a>>,
    final_ln: NormRefs<'a>,
    out_w: &'a Tensor,
    out_b: &'a Tensor,
    mem_mask: Vec<bool>,
    pe: Vec<f64>,
}

impl<'a> IncrementalDecoder<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ModelParams, enc: &EncodedSource) -> Result<Self> {
        let d = cfg.d_model;
        let (src_len, hd) = enc.hidden.matrix_dims();
        if hd != d {
            return Err(Error::dim(format!("encoder width {hd}, model width {d}")));
        }
        let mut layers = Vec::with_capacity(cfg.num_decoder_layers);
        for i in 0..cfg.num_decoder_layers {
            let pre = format!("decoder.{i}");
            let cross_attn = AttnRefs::new(params, &format!("{pre}.cross_attn"))?;
            let project = |w: &Tensor, b: Option<&Tensor>| {
                let mut out: Vec<f64> = match b {
                    Some(b) => (0..src_len).flat_map(|_| b.data().iter().copied()).collect(),
                    None => vec![0.0; src_len * d],
                };
                gemm(src_len, d, d, enc.hidden.data(), false, w.data(), false, 1.0, &mut out);
                out
            };
            let mem_k = project(cross_attn.k_w, None);
            let mem_v = project(cross_attn.v_w, Some(cross_attn.v_b));
            layers.push(LayerRefs {
                ln1: NormRefs::new(params, &format!("{pre}.ln1"))?,
                self_attn: AttnRefs::new(params, &format!("{pre}.self_attn"))?,
                ln2: NormRefs::new(params, &format!("{pre}.ln2"))?,
                cross_attn,
                ln3: NormRefs::new(params, &format!("{pre}.ln3"))?,
                w1: params.get(&format!("{pre}.ffn.w1"))?,
                b1: params.get(&format!("{pre}.ffn.b1"))?,
                w2: params.get(&format!("{pre}.ffn.w2"))?,
                b2: params.get(&format!("{pre}.ffn.b2"))?,
                mem_k,
                mem_v,
            });
        }
        Ok(IncrementalDecoder {
            cfg,
            embed: params.get("embed.weight")?,
            layers,
            final_ln: NormRefs::new(params, "decoder.final_ln")?,
            out_w: params.get("output.weight")?,
            out_b: params.get("output.bias")?,
            mem_mask: enc.mask.clone(),
            pe: positions(cfg.max_len, d),
        })
    }

    pub fn start(&self) -> DecoderState {
        DecoderState {
            keys: vec![Vec::new(); self.layers.len()],
            values: vec![Vec::new(); self.layers.len()],
            len: 0,
        }
    }

    /// Feeds `token` at the next position; returns the distribution over
    /// the token after it.
    pub fn step(&self, state: &mut DecoderState, token: u32) -> Result<StepOutput> {
        let d = self.cfg.d_model;
        if state.len >= self.cfg.max_len {
            return Err(Error::Length {
                len: state.len + 1,
                max: self.cfg.max_len,
            });
        }
        let t = token as usize;
        if t >= self.cfg.vocab_size {
            return Err(Error::dim(format!("token id {t} outside vocabulary")));
        }
        let scale = (d as f64).sqrt();
        let pos = &self.pe[state.len * d..(state.len + 1) * d];
        let mut x: Vec<f64> = self.embed.data()[t * d..(t + 1) * d]
            .iter()
            .zip(pos)
            .map(|(e, p)| e * scale + p)
            .collect();
        let heads = self.cfg.num_heads;
        for (li, layer) in self.layers.iter().enumerate() {
            let a = layer.ln1.apply(&x);
            let sa = &layer.self_attn;
            let q = affine(&a, sa.q_w, sa.q_b);
            state.keys[li].extend(project(&a, sa.k_w));
            state.values[li].extend(affine(&a, sa.v_w, sa.v_b));
            let o = attend(&q, &state.keys[li], &state.values[li], None, heads);
            let o = affine(&o, sa.o_w, sa.o_b);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            let c = layer.ln2.apply(&x);
            let ca = &layer.cross_attn;
            let q = affine(&c, ca.q_w, ca.q_b);
            let o = attend(&q, &layer.mem_k, &layer.mem_v, Some(&self.mem_mask), heads);
            let o = affine(&o, ca.o_w, ca.o_b);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            let f = layer.ln3.apply(&x);
            let mut h = affine(&f, layer.w1, layer.b1);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            let o = affine(&h, layer.w2, layer.b2);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        }
        state.len += 1;
        let cwr = self.final_ln.apply(&x);
        let mut logits = affine(&cwr, self.out_w, self.out_b);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        logits.iter_mut().for_each(|v| *v -= lse);
        Ok(StepOutput {
            log_probs: logits,
            cwr,
        })
    }
}

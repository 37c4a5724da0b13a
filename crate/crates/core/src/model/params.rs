use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams(BTreeMap<String, Tensor>);

#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform { fan_in: usize, fan_out: usize },
    Ones,
    Zeros,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, h, dh, f, v) = (cfg.d_model, cfg.num_heads, cfg.head_dim(), cfg.d_ffn, cfg.vocab_size);
    let mut out = vec![(
        "embed.weight".to_string(),
        vec![v, d],
        Init::Uniform { fan_in: v, fan_out: d },
    )];
    let attention = |out: &mut Vec<_>, prefix: String| {
        for proj in ["q", "k", "v"] {
            out.push((
                format!("{prefix}.{proj}.weight"),
                vec![d, h, dh],
                Init::Uniform { fan_in: d, fan_out: d },
            ));
            // softmax over keys is shift-invariant per query, so a key bias
            // never receives gradient
            if proj != "k" {
                out.push((format!("{prefix}.{proj}.bias"), vec![d], Init::Zeros));
            }
        }
        out.push((
            format!("{prefix}.o.weight"),
            vec![d, d],
            Init::Uniform { fan_in: d, fan_out: d },
        ));
        out.push((format!("{prefix}.o.bias"), vec![d], Init::Zeros));
    };
    let norm = |out: &mut Vec<_>, prefix: String| {
        out.push((format!("{prefix}.gamma"), vec![d], Init::Ones));
        out.push((format!("{prefix}.beta"), vec![d], Init::Zeros));
    };
    let ffn = |out: &mut Vec<_>, prefix: String| {
        out.push((format!("{prefix}.w1"), vec![d, f], Init::Uniform { fan_in: d, fan_out: f }));
        out.push((format!("{prefix}.b1"), vec![f], Init::Zeros));
        out.push((format!("{prefix}.w2"), vec![f, d], Init::Uniform { fan_in: f, fan_out: d }));
        out.push((format!("{prefix}.b2"), vec![d], Init::Zeros));
    };
    for i in 0..cfg.num_encoder_layers {
        norm(&mut out, format!("encoder.{i}.ln1"));
        attention(&mut out, format!("encoder.{i}.self_attn"));
        norm(&mut out, format!("encoder.{i}.ln2"));
        ffn(&mut out, format!("encoder.{i}.ffn"));
    }
    norm(&mut out, "encoder.final_ln".to_string());
    for i in 0..cfg.num_decoder_layers {
        norm(&mut out, format!("decoder.{i}.ln1"));
        attention(&mut out, format!("decoder.{i}.self_attn"));
        norm(&mut out, format!("decoder.{i}.ln2"));
        attention(&mut out, format!("decoder.{i}.cross_attn"));
        norm(&mut out, format!("decoder.{i}.ln3"));
        ffn(&mut out, format!("decoder.{i}.ffn"));
    }
    norm(&mut out, "decoder.final_ln".to_string());
    out.push((
        "output.weight".to_string(),
        vec![d, v],
        Init::Uniform { fan_in: d, fan_out: v },
    ));
    out.push(("output.bias".to_string(), vec![v], Init::Zeros));
    out
}

/// Glorot-uniform weights, unit gains, zero biases; a pure function of the config.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut map = BTreeMap::new();
    for (name, shape, init) in layout(cfg) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Ones => vec![1.0; n],
            Init::Zeros => vec![0.0; n],
            Init::Uniform { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        map.insert(name, Tensor::new(shape, data)?);
    }
    Ok(ModelParams(map))
}

impl ModelParams {
    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        ModelParams(map)
    }

    /// Checks names and shapes against what `cfg` would initialize.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = layout(cfg);
        if expected.len() != self.0.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.0.len()
            )));
        }
        for (name, shape, _) in expected {
            match self.0.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::config(format!(
                        "{name}: shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::config(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }
}

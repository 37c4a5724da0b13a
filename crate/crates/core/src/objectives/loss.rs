use super::batch::{is_coupled, NegativeBatch, PositiveBatch};
use crate::autodiff::{BoundParams, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{decoder_forward, encoder_forward, Dropout, ModelConfig};

/// Lower bound on `1 - p` inside the unlikelihood term.
pub const UL_FLOOR: f64 = 1e-9;

fn checked_rows(g: &Graph, logits: Var, targets: &[u32], mask: &[bool]) -> Result<(Vec<usize>, usize)> {
    let (rows, vocab) = g.value(logits).matrix_dims();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::dim(format!(
            "{rows} logit rows for {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::dim(format!("target id {bad} outside vocabulary of {vocab}")));
    }
    let tokens = mask.iter().filter(|&&m| m).count();
    if tokens == 0 {
        return Err(Error::contract("batch has no non-pad target positions"));
    }
    Ok((targets.iter().map(|&t| t as usize).collect(), tokens))
}

fn masked_weights(mask: &[bool], w: f64) -> Vec<f64> {
    mask.iter().map(|&m| if m { w } else { 0.0 }).collect()
}

/// Label-smoothed negative log-likelihood, averaged over non-pad positions.
pub fn mle_loss(g: &mut Graph, logits: Var, targets: &[u32], mask: &[bool], smoothing: f64) -> Result<Var> {
    if !(0.0..0.5).contains(&smoothing) {
        return Err(Error::config(format!("smoothing must lie in [0, 0.5), got {smoothing}")));
    }
    let (ids, tokens) = checked_rows(g, logits, targets, mask)?;
    let lp = g.log_softmax_rows(logits)?;
    let gold = g.pick(lp, &ids)?;
    let nll = g.weighted_sum(gold, masked_weights(mask, -(1.0 - smoothing) / tokens as f64))?;
    if smoothing == 0.0 {
        return Ok(nll);
    }
    let mean = g.row_mean(lp);
    let smooth = g.weighted_sum(mean, masked_weights(mask, -smoothing / tokens as f64))?;
    g.add(nll, smooth)
}

/// `-log(1 - p(target))` averaged over non-pad positions, `1 - p` floored at
/// [`UL_FLOOR`].
pub fn unlikelihood_loss(g: &mut Graph, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
    let (ids, tokens) = checked_rows(g, logits, targets, mask)?;
    let lp = g.log_softmax_rows(logits)?;
    let gold = g.pick(lp, &ids)?;
    let p = g.exp(gold);
    let l = g.log_one_minus(p, UL_FLOOR);
    g.weighted_sum(l, masked_weights(mask, -1.0 / tokens as f64))
}

/// Mean model probability of the target tokens over non-pad positions.
pub fn mean_target_prob(g: &Graph, logits: Var, targets: &[u32], mask: &[bool]) -> Result<f64> {
    let (ids, tokens) = checked_rows(g, logits, targets, mask)?;
    let t = g.value(logits);
    let mut total = 0.0;
    for (r, (&id, &m)) in ids.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = t.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total += (row[id] - max).exp() / z;
    }
    Ok(total / tokens as f64)
}

/// Label-smoothed MLE of one positive batch through the full model.
pub fn mle_batch_loss(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &ModelConfig,
    pos: &PositiveBatch,
    smoothing: f64,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let enc = encoder_forward(g, bound, cfg, &pos.src, dropout)?;
    let out = decoder_forward(g, bound, cfg, &enc, &pos.dec_in, dropout)?;
    mle_loss(g, out.logits, &pos.targets.ids, &pos.targets.mask, smoothing)
}

#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub total: Var,
    pub mle: f64,
    pub ul: f64,
    /// Mean probability the model assigns to the gold tokens under the
    /// mismatched language ID.
    pub negative_prob: f64,
}

/// `mle(pos) + ul_weight * ul(neg)`. The source side of a coupled pair is
/// identical, so both decoder passes read one encoder pass. With
/// `ul_weight == 0` the returned loss is the MLE node itself.
#[allow(clippy::too_many_arguments)]
pub fn unions_step_loss(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &ModelConfig,
    pos: &PositiveBatch,
    neg: &NegativeBatch,
    ul_weight: f64,
    smoothing: f64,
    dropout: &mut Dropout<'_>,
) -> Result<StepLoss> {
    if !(ul_weight >= 0.0 && ul_weight.is_finite()) {
        return Err(Error::config(format!("ul_weight must be finite and non-negative, got {ul_weight}")));
    }
    if !is_coupled(pos, neg) {
        return Err(Error::contract("negative batch is not coupled to the positive batch"));
    }
    let enc = encoder_forward(g, bound, cfg, &pos.src, dropout)?;
    let pos_out = decoder_forward(g, bound, cfg, &enc, &pos.dec_in, dropout)?;
    let mle = mle_loss(g, pos_out.logits, &pos.targets.ids, &pos.targets.mask, smoothing)?;
    let neg_out = decoder_forward(g, bound, cfg, &enc, &neg.dec_in, dropout)?;
    let ul = unlikelihood_loss(g, neg_out.logits, &neg.targets.ids, &neg.targets.mask)?;
    let negative_prob = mean_target_prob(g, neg_out.logits, &neg.targets.ids, &neg.targets.mask)?;
    let total = if ul_weight == 0.0 {
        mle
    } else {
        let w = g.scale(ul, ul_weight);
        g.add(mle, w)?
    };
    Ok(StepLoss {
        total,
        mle: g.value(mle).data()[0],
        ul: g.value(ul).data()[0],
        negative_prob,
    })
}

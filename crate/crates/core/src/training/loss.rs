use crate::error::{Error, Result};
use crate::network::OrganClass;
use crate::tensor::{Graph, Var};

/// Smoothing added to both sides of the Dice ratio so empty masks are defined.
pub const DICE_EPS: f64 = 1e-6;

/// Weight `λ` of the classification term; the segmentation term gets `1 − λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    lambda: f64,
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(LossWeights { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Plain-number version of [`joint_loss`], same arithmetic.
    pub fn combine(&self, l_cls: f64, l_seg: f64) -> f64 {
        self.lambda * l_cls + (1.0 - self.lambda) * l_seg
    }
}

/// Per-batch loss values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_seg: f64,
    pub l_joint: f64,
    pub lambda: f64,
    pub batch_size: usize,
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `[N,3]` logits.
pub fn cross_entropy(g: &mut Graph, class_logits: Var, labels: &[OrganClass]) -> Result<Var> {
    let idx: Vec<usize> = labels.iter().map(|o| o.index()).collect();
    cross_entropy_indices(g, class_logits, &idx)
}

pub fn cross_entropy_indices(g: &mut Graph, class_logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(class_logits).to_vec();
    match shape[..] {
        [n, c] if c == OrganClass::COUNT && n == labels.len() && n >= 1 => {}
        _ => {
            return Err(Error::shape(format!(
                "cross_entropy: logits {shape:?} with {} labels",
                labels.len()
            )))
        }
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= OrganClass::COUNT) {
        return Err(Error::invalid(format!("class label {bad} outside 0..3")));
    }
    let logp = g.log_softmax(class_logits)?;
    let picked = g.gather(logp, labels)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

/// `1 − (2 Σ p·q + ε) / (Σ p² + Σ q² + ε)` over every element of the batch.
pub fn dice_loss(g: &mut Graph, pred_probs: Var, true_mask: Var) -> Result<Var> {
    if g.shape(pred_probs) != g.shape(true_mask) {
        return Err(Error::shape(format!(
            "dice_loss: prediction {:?} vs mask {:?}",
            g.shape(pred_probs),
            g.shape(true_mask)
        )));
    }
    if let Some(v) = g.value(pred_probs).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("dice_loss: probability {v} outside [0, 1]")));
    }
    let pq = g.mul(pred_probs, true_mask)?;
    let inter = g.sum(pq);
    let pp = g.mul(pred_probs, pred_probs)?;
    let sum_pp = g.sum(pp);
    let qq = g.mul(true_mask, true_mask)?;
    let sum_qq = g.sum(qq);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let den = g.add(sum_pp, sum_qq)?;
    let den = g.add_scalar(den, DICE_EPS);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// `λ · l_cls + (1 − λ) · l_seg`.
pub fn joint_loss(g: &mut Graph, l_cls: Var, l_seg: Var, w: LossWeights) -> Result<Var> {
    let a = g.scale(l_cls, w.lambda);
    let b = g.scale(l_seg, 1.0 - w.lambda);
    g.add(a, b)
}

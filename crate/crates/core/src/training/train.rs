use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cross_entropy, dice_loss, joint_loss, AdaMax, LossReport, LossWeights};
use crate::error::{Error, Result};
use crate::network::{Model, OrganClass, UNetConfig};
use crate::synth::ScanSample;
use crate::tensor::{Graph, NormMode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr0: f64,
    /// Per-epoch learning-rate multiplier.
    pub decay_gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.001,
            lr0: 5e-4,
            decay_gamma: 0.97,
            epochs: 30,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.lambda)?;
        if !(self.lr0 > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr0)));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(Error::invalid(format!(
                "decay must be in (0, 1], got {}",
                self.decay_gamma
            )));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be ≥ 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(format!(
                "batch size must be ≥ 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// Learning rate for 0-based epoch `e`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay_gamma.powi(epoch as i32)
    }
}

/// Batch-averaged losses for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_seg: f64,
    pub l_joint: f64,
    /// Eval-mode joint loss on the validation samples, if any were given.
    pub val_l_joint: Option<f64>,
}

impl EpochReport {
    pub const CSV_HEADER: &'static str = "epoch,lr,l_cls,l_seg,l_joint,val_l_joint";

    pub fn csv_line(&self) -> String {
        let val = self.val_l_joint.map(|v| format!("{v:.8}")).unwrap_or_default();
        format!(
            "{},{:.8e},{:.8},{:.8},{:.8},{val}",
            self.epoch, self.lr, self.l_cls, self.l_seg, self.l_joint
        )
    }
}

/// `[N,1,S,S]` images, `[N,1,S,S]` masks and labels for the given samples.
pub fn make_batch(samples: &[&ScanSample]) -> Result<(Tensor, Tensor, Vec<OrganClass>)> {
    let Some(first) = samples.first() else {
        return Err(Error::invalid("empty batch"));
    };
    let (w, h) = (first.image.width(), first.image.height());
    let mut img = Vec::with_capacity(samples.len() * w * h);
    let mut mask = Vec::with_capacity(samples.len() * w * h);
    for s in samples {
        if (s.image.width(), s.image.height()) != (w, h) || (s.mask.width(), s.mask.height()) != (w, h) {
            return Err(Error::shape(format!("sample {} is not {w}×{h}", s.stem)));
        }
        img.extend_from_slice(s.image.data());
        mask.extend(s.mask.to_f64());
    }
    let shape = [samples.len(), 1, h, w];
    Ok((
        Tensor::new(&shape, img)?,
        Tensor::new(&shape, mask)?,
        samples.iter().map(|s| s.organ).collect(),
    ))
}

/// Joint loss on one batch, forward only.
fn batch_loss(
    model: &mut Model,
    images: &Tensor,
    masks: &Tensor,
    labels: &[OrganClass],
    w: LossWeights,
    mode: NormMode,
) -> Result<(Graph, crate::network::ForwardPass, LossReport, crate::tensor::Var)> {
    let mut g = Graph::new();
    let x = g.leaf(images.clone());
    let pass = model.forward(&mut g, x, mode)?;
    let probs = g.sigmoid(pass.output.seg_logits);
    let q = g.leaf(masks.clone());
    let l_seg = dice_loss(&mut g, probs, q)?;
    let l_cls = cross_entropy(&mut g, pass.output.class_logits, labels)?;
    let l_joint = joint_loss(&mut g, l_cls, l_seg, w)?;
    let report = LossReport {
        l_cls: g.value(l_cls).item()?,
        l_seg: g.value(l_seg).item()?,
        l_joint: g.value(l_joint).item()?,
        lambda: w.lambda(),
        batch_size: labels.len(),
    };
    Ok((g, pass, report, l_joint))
}

/// Eval-mode joint loss over `samples`, in chunks of `batch`.
pub fn evaluate_loss(model: &Model, samples: &[&ScanSample], lambda: f64, batch: usize) -> Result<LossReport> {
    let w = LossWeights::new(lambda)?;
    let mut frozen = model.clone();
    let (mut cls, mut seg, mut n) = (0.0, 0.0, 0usize);
    for chunk in samples.chunks(batch.max(1)) {
        let (images, masks, labels) = make_batch(chunk)?;
        let (_, _, r, _) = batch_loss(&mut frozen, &images, &masks, &labels, w, NormMode::Eval)?;
        cls += r.l_cls * chunk.len() as f64;
        seg += r.l_seg * chunk.len() as f64;
        n += chunk.len();
    }
    if n == 0 {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let (l_cls, l_seg) = (cls / n as f64, seg / n as f64);
    Ok(LossReport {
        l_cls,
        l_seg,
        l_joint: w.combine(l_cls, l_seg),
        lambda,
        batch_size: n,
    })
}

/// Trains in place. Each epoch reshuffles with a stream derived from
/// `cfg.seed`; `on_epoch` sees every report as soon as it is ready.
pub fn train_with<F>(
    model: &mut Model,
    train: &[&ScanSample],
    val: &[&ScanSample],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochReport>>
where
    F: FnMut(&EpochReport),
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let w = LossWeights::new(cfg.lambda)?;
    let mut opt = AdaMax::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut cls, mut seg, mut joint, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let picked: Vec<&ScanSample> = chunk.iter().map(|&i| train[i]).collect();
            let (images, masks, labels) = make_batch(&picked)?;
            let (mut g, pass, report, loss) = batch_loss(model, &images, &masks, &labels, w, NormMode::Train)?;
            g.backward(loss)?;
            let grads: Vec<Option<&[f64]>> = pass.params.iter().map(|&p| g.grad(p)).collect();
            opt.step(model.params_mut(), &grads, lr)?;
            cls += report.l_cls;
            seg += report.l_seg;
            joint += report.l_joint;
            batches += 1;
        }
        let nb = batches as f64;
        let val_l_joint = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, val, cfg.lambda, cfg.batch_size)?.l_joint)
        };
        let report = EpochReport {
            epoch,
            lr,
            l_cls: cls / nb,
            l_seg: seg / nb,
            l_joint: joint / nb,
            val_l_joint,
        };
        on_epoch(&report);
        history.push(report);
    }
    Ok(history)
}

pub fn train(model: &mut Model, train: &[&ScanSample], cfg: &TrainConfig) -> Result<Vec<EpochReport>> {
    train_with(model, train, &[], cfg, |_| {})
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelGradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Finite-difference check of the full joint-loss pipeline on a small
/// random model and batch: `n_coords` parameter coordinates spread over all
/// tensors, central differences with step `h`.
pub fn model_grad_check(config: UNetConfig, seed: u64, n_coords: usize, h: f64) -> Result<ModelGradCheck> {
    use rand::Rng;
    let mut model = Model::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let (n, s) = (2, config.input_size);
    let images = Tensor::new(&[n, 1, s, s], (0..n * s * s).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    // a blob per image so both Dice sums are non-trivial
    let masks = Tensor::new(
        &[n, 1, s, s],
        (0..n * s * s)
            .map(|i| {
                let (y, x) = ((i / s) % s, i % s);
                let r = (x as f64 - s as f64 / 2.0).hypot(y as f64 - s as f64 / 2.0);
                if r < s as f64 / 4.0 + (i / (s * s)) as f64 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
    )?;
    let labels = [OrganClass::Brain, OrganClass::Femur];
    let w = LossWeights::new(0.5)?;

    let (mut g, pass, _, loss) = batch_loss(&mut model.clone(), &images, &masks, &labels, w, NormMode::Train)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = pass
        .params
        .iter()
        .zip(model.params())
        .map(|(&p, t)| g.grad(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let total = model.parameter_count();
    let mut coords = Vec::with_capacity(n_coords);
    // every tensor at least once, then random picks
    for (ti, t) in model.params().iter().enumerate() {
        coords.push((ti, rng.gen_range(0..t.numel())));
    }
    while coords.len() < n_coords {
        let mut flat = rng.gen_range(0..total);
        let mut ti = 0;
        while flat >= model.params()[ti].numel() {
            flat -= model.params()[ti].numel();
            ti += 1;
        }
        coords.push((ti, flat));
    }
    coords.truncate(n_coords.max(model.params().len()));

    let eval = |model: &Model| -> Result<f64> {
        let (_, _, r, _) = batch_loss(&mut model.clone(), &images, &masks, &labels, w, NormMode::Train)?;
        Ok(r.l_joint)
    };
    let mut max_err: f64 = 0.0;
    for &(ti, k) in &coords {
        let orig = model.params()[ti].data()[k];
        model.params_mut()[ti].data_mut()[k] = orig + h;
        let plus = eval(&model)?;
        model.params_mut()[ti].data_mut()[k] = orig - h;
        let minus = eval(&model)?;
        model.params_mut()[ti].data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[ti][k];
        max_err = max_err.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(ModelGradCheck {
        max_rel_err: max_err,
        checked: coords.len(),
    })
}

//! Finite-difference self-check over every differentiable primitive, both
//! losses and the full joint pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cross_entropy, dice_loss, model_grad_check};
use crate::error::Result;
use crate::network::{OrganClass, UNetConfig};
use crate::tensor::{grad_check, Graph, NormMode, RunningStats, Tensor, Var};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const PIPELINE_TOL: f64 = 1e-3;
pub const SUITE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

type Case = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>);

/// Scalar reduction with distinct per-element weights.
fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = g.leaf(Tensor::new(
        &shape,
        (0..n).map(|i| (i as f64 * 0.7).sin() + 0.3).collect(),
    )?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn fixed(shape: &[usize], f: impl Fn(usize) -> f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(f).collect())
}

fn cases() -> Vec<Case> {
    let rs = RunningStats {
        mean: vec![0.2, -0.1],
        var: vec![1.5, 0.7],
    };
    let mut v: Vec<Case> = vec![
        (
            "relu",
            vec![10],
            Box::new(|g, x| {
                let y = g.relu(x);
                weighted_sum(g, y)
            }),
        ),
        (
            "sigmoid",
            vec![10],
            Box::new(|g, x| {
                let y = g.sigmoid(x);
                weighted_sum(g, y)
            }),
        ),
        (
            "add-sub-scale",
            vec![10],
            Box::new(|g, x| {
                let c = g.leaf(Tensor::full(&[10], 0.5));
                let a = g.add(x, c)?;
                let s = g.scale(x, -1.7);
                let y = g.sub(a, s)?;
                let y = g.add_scalar(y, 0.2);
                weighted_sum(g, y)
            }),
        ),
        (
            "mul-div",
            vec![10],
            Box::new(|g, x| {
                let sq = g.mul(x, x)?;
                let d = g.add_scalar(sq, 3.0);
                let y = g.div(x, d)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "mean",
            vec![10],
            Box::new(|g, x| {
                let y = g.mul(x, x)?;
                Ok(g.mean(y))
            }),
        ),
        (
            "matmul",
            vec![2, 5],
            Box::new(|g, x| {
                let w = g.leaf(fixed(&[5, 3], |i| (i as f64).cos())?);
                let y = g.matmul(x, w)?;
                let t = reshape_swapped(g, y)?;
                let y = g.matmul(w, t)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "row-bias",
            vec![3],
            Box::new(|g, b| {
                let x = g.leaf(fixed(&[4, 3], |i| i as f64 * 0.1)?);
                let y = g.add_row_bias(x, b)?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "reshape-flatten",
            vec![2, 1, 2, 3],
            Box::new(|g, x| {
                let y = g.flatten(x)?;
                let y = g.reshape(y, &[3, 4])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "log-softmax-gather",
            vec![3, 4],
            Box::new(|g, x| {
                let y = g.log_softmax(x)?;
                let p = g.gather(y, &[2, 0, 1])?;
                weighted_sum(g, p)
            }),
        ),
        (
            "concat",
            vec![1, 2, 2, 3],
            Box::new(|g, x| {
                let y = g.concat_channels(&[x, x])?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "maxpool",
            vec![1, 2, 4, 4],
            Box::new(|g, x| {
                let y = g.maxpool2x2(x)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "upsample",
            vec![1, 2, 2, 3],
            Box::new(|g, x| {
                let y = g.upsample2x_nearest(x)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "conv/input",
            vec![2, 2, 4, 5],
            Box::new(|g, x| {
                let w = g.leaf(fixed(&[3, 2, 3, 3], |i| (i as f64 * 0.37).sin())?);
                let b = g.leaf(Tensor::full(&[3], 0.1));
                let y = g.conv2d(x, w, b, 1, 1)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "conv/weight",
            vec![3, 2, 3, 3],
            Box::new(|g, w| {
                let x = g.leaf(fixed(&[2, 2, 4, 5], |i| (i as f64 * 0.53).cos())?);
                let b = g.leaf(Tensor::full(&[3], 0.1));
                let y = g.conv2d(x, w, b, 1, 2)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "conv/bias",
            vec![3],
            Box::new(|g, b| {
                let x = g.leaf(fixed(&[2, 2, 3, 3], |i| (i as f64 * 0.29).sin())?);
                let w = g.leaf(Tensor::full(&[3, 2, 1, 1], 0.5));
                let y = g.conv2d(x, w, b, 0, 1)?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "cross-entropy",
            vec![4, 3],
            Box::new(|g, x| {
                cross_entropy(
                    g,
                    x,
                    &[
                        OrganClass::Brain,
                        OrganClass::Femur,
                        OrganClass::Abdomen,
                        OrganClass::Brain,
                    ],
                )
            }),
        ),
        (
            "dice",
            vec![1, 1, 3, 4],
            Box::new(|g, x| {
                let p = g.sigmoid(x);
                let q = g.leaf(fixed(&[1, 1, 3, 4], |i| (i % 3 == 0) as u8 as f64)?);
                dice_loss(g, p, q)
            }),
        ),
    ];
    for mode in [NormMode::Train, NormMode::Eval] {
        let (r1, r2) = (rs.clone(), rs.clone());
        let train = mode == NormMode::Train;
        v.push((
            if train {
                "batchnorm/input/train"
            } else {
                "batchnorm/input/eval"
            },
            vec![2, 2, 2, 3],
            Box::new(move |g, x| {
                let gm = g.leaf(Tensor::new(&[2], vec![1.3, -0.6])?);
                let bt = g.leaf(Tensor::new(&[2], vec![0.1, 0.4])?);
                let (y, _) = g.batchnorm2d(x, gm, bt, &r1, mode)?;
                weighted_sum(g, y)
            }),
        ));
        v.push((
            if train {
                "batchnorm/affine/train"
            } else {
                "batchnorm/affine/eval"
            },
            vec![2],
            Box::new(move |g, gm| {
                let x = g.leaf(Tensor::new(
                    &[2, 2, 1, 2],
                    vec![0.5, -1.0, 2.0, 0.3, 1.1, 0.2, -0.7, 0.9],
                )?);
                let (y, _) = g.batchnorm2d(x, gm, gm, &r2, mode)?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y)
            }),
        ));
    }
    v
}

/// `[r, c]` reshaped to `[c, r]` (a reshape, not a transpose).
fn reshape_swapped(g: &mut Graph, y: Var) -> Result<Var> {
    let s = g.shape(y).to_vec();
    g.reshape(y, &[s[1], s[0]])
}

/// Every primitive case on every seed, then the depth-2, 16×16 joint-loss
/// pipeline on every seed.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<GradCheckEntry>> {
    let mut out = Vec::new();
    for (name, shape, f) in cases() {
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            let x = Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
            out.push(GradCheckEntry {
                name: name.to_string(),
                seed,
                max_rel_err: grad_check(&f, &x, STEP)?,
                tol: PRIMITIVE_TOL,
            });
        }
    }
    let config = UNetConfig {
        depth: 2,
        base_channels: 2,
        input_size: 16,
        ..UNetConfig::default()
    };
    for &seed in seeds {
        let r = model_grad_check(config, seed, 64, STEP)?;
        out.push(GradCheckEntry {
            name: "joint-pipeline".into(),
            seed,
            max_rel_err: r.max_rel_err,
            tol: PIPELINE_TOL,
        });
    }
    Ok(out)
}

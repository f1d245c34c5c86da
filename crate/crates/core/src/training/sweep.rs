use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{train_with, EpochReport, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalRecord, ReportRow, Routing};
use crate::network::{Model, UNetConfig};
use crate::synth::ScanSample;

/// Default ablation grid, largest λ first.
pub const ABLATION_LAMBDAS: [f64; 12] = [1.0, 0.8, 0.6, 0.4, 0.2, 0.1, 0.05, 0.025, 0.01, 0.001, 1e-5, 0.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub unet: UNetConfig,
    /// `lambda` is overwritten per run; everything else, seed included, is shared.
    pub template: TrainConfig,
    pub eval: EvalOptions,
    /// Worker threads; 0 or 1 runs sequentially.
    pub jobs: usize,
}

/// Everything one λ produced.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub lambda: f64,
    pub model: Model,
    pub history: Vec<EpochReport>,
    pub records: Vec<EvalRecord>,
    pub row: ReportRow,
}

/// Routing used for `lambda`: λ = 0 leaves the classifier at its random
/// init, so it always routes by the true class.
pub fn routing_for(lambda: f64, routing: Routing) -> Routing {
    if lambda == 0.0 {
        Routing::TrueClass
    } else {
        routing
    }
}

/// Fresh model from `cfg.seed`, trained on `train` and evaluated on `test`.
pub fn train_and_evaluate(
    unet: UNetConfig,
    cfg: &TrainConfig,
    train: &[&ScanSample],
    val: &[&ScanSample],
    test: &[&ScanSample],
    eval: &EvalOptions,
) -> Result<SweepRun> {
    let mut model = Model::new(unet, cfg.seed)?;
    let history = train_with(&mut model, train, val, cfg, |_| {})?;
    let opts = EvalOptions {
        lambda: cfg.lambda,
        ..*eval
    };
    let (records, row) = evaluate(&model, test, &opts)?;
    Ok(SweepRun {
        lambda: cfg.lambda,
        model,
        history,
        records,
        row,
    })
}

/// One independent training + evaluation per λ, all from the same seed.
/// Runs come back in the order of `lambdas`; the first failure is returned
/// tagged with its λ.
pub fn lambda_sweep(
    train: &[&ScanSample],
    val: &[&ScanSample],
    test: &[&ScanSample],
    lambdas: &[f64],
    opts: &SweepOptions,
) -> Result<Vec<SweepRun>> {
    if lambdas.is_empty() {
        return Err(Error::invalid("empty lambda list"));
    }
    let run_one = |lambda: f64| -> Result<SweepRun> {
        let cfg = TrainConfig {
            lambda,
            ..opts.template
        };
        let eval = EvalOptions {
            routing: routing_for(lambda, opts.eval.routing),
            ..opts.eval
        };
        train_and_evaluate(opts.unet, &cfg, train, val, test, &eval).map_err(|e| Error::Sweep {
            lambda,
            source: Box::new(e),
        })
    };
    // reject a bad grid before spending time on any training
    for &l in lambdas {
        super::LossWeights::new(l).map_err(|e| Error::Sweep {
            lambda: l,
            source: Box::new(e),
        })?;
    }
    let jobs = opts.jobs.clamp(1, lambdas.len());
    if jobs == 1 {
        return lambdas.iter().map(|&l| run_one(l)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<SweepRun>>>> = Mutex::new((0..lambdas.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= lambdas.len() {
                    break;
                }
                let r = run_one(lambdas[i]);
                slots.lock().expect("sweep worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("sweep worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

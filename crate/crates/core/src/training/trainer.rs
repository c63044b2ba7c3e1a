use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, LinearSchedule};
use super::metrics::EvalReport;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, GateFormer};
use crate::numerics::{ParamStore, Tape};
use crate::scalar::Scalar;
use crate::text::{Impression, ImpressionSample, TokenSequence};

/// Salt offset that keeps evaluation draws of the RANDOM gate apart from
/// training draws.
const EVAL_SALT: u64 = 1 << 48;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub eval_interval: usize,
    pub log_interval: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub k_neg: usize,
    pub seed: u64,
    /// Evaluation worker cap.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup: 100,
            eval_interval: 200,
            log_interval: 50,
            grad_clip: 5.0,
            k_neg: 4,
            seed: 1,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(Error::Config("train.peak_lr must be a finite non-negative number".into()));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::Config("train.grad_clip must be finite and >= 0".into()));
        }
        if self.k_neg == 0 {
            return Err(Error::Config("train.k_neg must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("train.threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// One metrics-history row. `loss` is the mean training loss since the
/// previous row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub rows: Vec<MetricsRow>,
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
    pub best_step: usize,
    pub best: EvalReport,
    pub best_store: ParamStore<T>,
    pub last: EvalReport,
}

pub const METRICS_HEADER: &str = "step,loss,auc,mrr,ndcg5,ndcg10";

impl<T> TrainOutcome<T> {
    pub fn metrics_csv(&self, fingerprint: &str) -> String {
        let mut s = format!("# config {fingerprint}\n{METRICS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.step, r.loss, r.report.auc, r.report.mrr, r.report.ndcg5, r.report.ndcg10
            );
        }
        s
    }
}

/// Scores every candidate of every impression and averages the ranking
/// metrics. Impressions are split across at most `threads` workers.
pub fn evaluate<T: Scalar>(model: &GateFormer<T>, impressions: &[Impression], threads: usize) -> Result<EvalReport> {
    let scored = score_impressions(model, impressions, threads)?;
    Ok(EvalReport::from_impressions(
        scored.iter().map(|(s, l)| (s.as_slice(), l.as_slice())),
    ))
}

pub type ScoredImpression = (Vec<f64>, Vec<bool>);

pub fn score_impressions<T: Scalar>(
    model: &GateFormer<T>,
    impressions: &[Impression],
    threads: usize,
) -> Result<Vec<ScoredImpression>> {
    let score_one = |i: usize, imp: &Impression| -> Result<ScoredImpression> {
        let cands: Vec<&TokenSequence> = imp.candidates.iter().map(|c| &c.tokens).collect();
        let scores = model.score_candidates(&imp.history, &cands, EVAL_SALT + i as u64)?;
        Ok((scores, imp.candidates.iter().map(|c| c.clicked).collect()))
    };
    let threads = threads.clamp(1, impressions.len().max(1));
    if threads == 1 {
        return impressions.iter().enumerate().map(|(i, imp)| score_one(i, imp)).collect();
    }
    let chunk = impressions.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = impressions
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, imp)| score_one(c * chunk + j, imp))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(impressions.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Mini-batch training with Adam. Evaluates on `dev` every
/// `eval_interval` steps and after the last step; the best-AUC weights are
/// kept and, with `out_dir`, written as a checkpoint together with
/// `metrics.csv`.
pub fn train<T: Scalar>(
    model: &mut GateFormer<T>,
    samples: &[ImpressionSample],
    dev: &[Impression],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    fingerprint: &str,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::usage("no training samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        &model.store,
        LinearSchedule {
            peak: cfg.peak_lr,
            warmup: cfg.warmup,
            total: cfg.steps,
        },
    );
    let eval = |m: &GateFormer<T>| -> Result<EvalReport> {
        if dev.is_empty() {
            Ok(EvalReport::default())
        } else {
            evaluate(m, dev, cfg.threads)
        }
    };
    let initial = eval(model)?;
    info!("step 0: {initial}");
    let mut outcome = TrainOutcome {
        rows: Vec::new(),
        losses: Vec::with_capacity(cfg.steps),
        best_step: 0,
        best: initial,
        best_store: model.store.clone(),
        last: initial,
    };
    let save_best = |m: &GateFormer<T>, step: usize| -> Result<()> {
        match out_dir {
            Some(dir) => save_checkpoint(m, &dir.join("checkpoint"), step as u64),
            None => Ok(()),
        }
    };
    save_best(model, 0)?;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut window = (0.0, 0usize);
    let scale = T::one() / T::lit(cfg.batch_size as f64);
    for step in 1..=cfg.steps {
        model.store.zero_grad();
        let mut batch_loss = 0.0;
        for b in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let sample = &samples[order[cursor]];
            cursor += 1;
            let mut tape = Tape::new();
            let salt = (step * cfg.batch_size + b) as u64;
            let loss = model.sample_loss(&mut tape, sample, salt)?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            batch_loss += value;
            let grads = tape.backward(loss)?;
            grads.accumulate_into(&tape, &mut model.store, scale);
        }
        batch_loss /= cfg.batch_size as f64;
        outcome.losses.push(batch_loss);
        window.0 += batch_loss;
        window.1 += 1;
        if cfg.grad_clip > 0.0 {
            model.store.clip_grad_norm(T::lit(cfg.grad_clip));
        }
        let lr = adam.step(&mut model.store)?;
        if cfg.log_interval > 0 && step % cfg.log_interval == 0 {
            info!("step {step}: loss {batch_loss:.4} lr {lr:.2e}");
        }
        let at_eval = (cfg.eval_interval > 0 && step % cfg.eval_interval == 0) || step == cfg.steps;
        if at_eval {
            let report = eval(model)?;
            info!("step {step}: {report}");
            outcome.rows.push(MetricsRow {
                step,
                loss: window.0 / window.1 as f64,
                report,
            });
            window = (0.0, 0);
            outcome.last = report;
            if dev.is_empty() || report.auc > outcome.best.auc {
                outcome.best = report;
                outcome.best_step = step;
                outcome.best_store = model.store.clone();
                save_best(model, step)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("metrics.csv");
        fs::write(&path, outcome.metrics_csv(fingerprint)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(outcome)
}

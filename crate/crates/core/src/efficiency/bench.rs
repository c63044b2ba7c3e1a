use std::fmt::Write as _;
use std::time::Instant;

use super::stats::{chi_square_uniform, spearman, TestResult};
use super::{flops_encode, flops_gate};
use crate::error::{Error, Result};
use crate::gating::GateMethod;
use crate::model::GateFormer;
use crate::numerics::Tape;
use crate::scalar::Scalar;
use crate::text::{Impression, UserHistory};
use crate::training::evaluate;

pub const BENCH_HEADER: &str = "k,wall_us_per_user,full_wall_us_per_user,flops_per_user,full_flops_per_user,auc";

/// Minimum number of timed user encodings.
const MIN_TIMED: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    /// Median wall time of one gated user encoding, microseconds.
    pub wall_us: f64,
    /// Same for the ungated encoding over every history token.
    pub full_wall_us: f64,
    /// Mean analytic cost of one gated user encoding.
    pub flops: f64,
    pub full_flops: f64,
    pub auc: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.full_wall_us / self.wall_us
    }

    pub fn flops_ratio(&self) -> f64 {
        self.flops / self.full_flops
    }
}

pub fn bench_csv(rows: &[BenchRow], fingerprint: &str) -> String {
    let mut s = format!("# config {fingerprint}\n{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.3},{:.3},{:.1},{:.1},{}",
            r.k, r.wall_us, r.full_wall_us, r.flops, r.full_flops, r.auc
        );
    }
    s
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median wall time in microseconds of encoding users drawn cyclically
/// from `histories`, after one warm pass. `full` times the ungated
/// encoder.
pub fn median_user_time<T: Scalar>(model: &GateFormer<T>, histories: &[UserHistory], reps: usize, full: bool) -> Result<f64> {
    if histories.is_empty() {
        return Err(Error::usage("no histories to time"));
    }
    let run = |h: &UserHistory, salt: u64| -> Result<()> {
        let mut tape = Tape::new();
        if full {
            model.encode_user_full(&mut tape, h)?;
        } else {
            model.encode_user(&mut tape, h, salt)?;
        }
        Ok(())
    };
    for (i, h) in histories.iter().take(MIN_TIMED).enumerate() {
        run(h, i as u64)?;
    }
    let reps = reps.max(MIN_TIMED);
    let mut times = Vec::with_capacity(reps);
    for i in 0..reps {
        let h = &histories[i % histories.len()];
        let t0 = Instant::now();
        run(h, i as u64)?;
        times.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    Ok(median(times))
}

/// Analytic cost of one gated and one ungated user encoding. Heuristic
/// selectors are charged nothing.
fn user_flops<T: Scalar>(model: &GateFormer<T>, h: &UserHistory) -> (f64, f64) {
    let cfg = &model.config;
    let items: Vec<(usize, usize)> = h
        .items()
        .iter()
        .map(|s| (s.len(), s.first_occurrences().len().min(cfg.gate.k)))
        .collect();
    let selected: usize = items.iter().map(|x| x.1).sum();
    let gate = match cfg.gate.method {
        GateMethod::Learned => flops_gate(&cfg.gate, cfg.model.d, &items),
        _ => 0,
    };
    let gated = gate + flops_encode(&cfg.model, selected);
    (gated as f64, flops_encode(&cfg.model, h.total_tokens()) as f64)
}

/// One bench row for a trained model: timing over `histories`, analytic
/// cost, and AUC on `dev`.
pub fn bench_model<T: Scalar>(
    model: &GateFormer<T>,
    histories: &[UserHistory],
    dev: &[Impression],
    reps: usize,
) -> Result<BenchRow> {
    let wall_us = median_user_time(model, histories, reps, false)?;
    let full_wall_us = median_user_time(model, histories, reps, true)?;
    let n = histories.len() as f64;
    let (flops, full_flops) = histories.iter().map(|h| user_flops(model, h)).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let auc = if dev.is_empty() { f64::NAN } else { evaluate(model, dev, 1)?.auc };
    Ok(BenchRow {
        k: model.config.gate.k,
        wall_us,
        full_wall_us,
        flops: flops / n,
        full_flops: full_flops / n,
        auc,
    })
}

/// Selected-token counts by original position.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionHistogram {
    pub counts: Vec<u64>,
}

impl PositionHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let t = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }

    /// Rank correlation between position and selection count.
    pub fn spearman(&self) -> Option<TestResult> {
        let pos: Vec<f64> = (0..self.counts.len()).map(|p| p as f64).collect();
        let cnt: Vec<f64> = self.counts.iter().map(|&c| c as f64).collect();
        spearman(&pos, &cnt)
    }

    pub fn chi_square(&self) -> Option<TestResult> {
        chi_square_uniform(&self.counts)
    }

    pub fn to_csv(&self, fingerprint: &str) -> String {
        let mut s = format!("# config {fingerprint}\nposition,count,frequency\n");
        for (p, (c, f)) in self.counts.iter().zip(self.frequencies()).enumerate() {
            let _ = writeln!(s, "{p},{c},{f}");
        }
        s
    }
}

/// Counts the positions the gate keeps over `histories`, one salt per
/// history. Bins cover `0..L_max`.
pub fn keyword_position_histogram<T: Scalar>(model: &GateFormer<T>, histories: &[UserHistory]) -> Result<PositionHistogram> {
    let l_max = histories
        .iter()
        .flat_map(|h| h.items().iter().map(|s| s.len()))
        .max()
        .unwrap_or(0);
    let mut counts = vec![0u64; l_max];
    for (i, h) in histories.iter().enumerate() {
        for sel in model.selections(h, i as u64)? {
            for p in sel.positions {
                counts[p] += 1;
            }
        }
    }
    Ok(PositionHistogram { counts })
}

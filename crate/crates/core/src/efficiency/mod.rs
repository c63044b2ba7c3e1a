//! Analytic cost model, acceleration ratio, timing harness and keyword
//! position analysis.
//!
//! Counts follow the tape's instrumented convention (see
//! [`crate::numerics::cost`]): a multiply-add is two operations, other
//! elementwise work one per element, softmax 3 and layer norm 5 per
//! element.
//!
//! Gate, per item of `L` tokens with `K_eff` selections:
//!
//! ```text
//! conv       L·F·(2·(2w+1)·d + 1)
//! relu       L·F
//! pooling    4·L·F + 3·L
//! scoring    L·(4F + 2) + 2F
//! word avg   2·L²                      (word granularity only)
//! select     2·K·L·d + 2·K·L + 3·K + K·d
//! ```
//!
//! plus the user encoder: `16F² + 17F` per item for the LSTM, or
//! `4NF + 3N` for attention pooling over `N` items.
//!
//! Transformer over `n` tokens with `h` heads: `n·d` for positions, then
//! per layer `24nd² + 4n²d + 4hn² + 25nd`; pooling adds `4nd + 3n`.

mod bench;
mod stats;

pub use bench::{
    bench_csv, bench_model, keyword_position_histogram, median_user_time, BenchRow, PositionHistogram, BENCH_HEADER,
};
pub use stats::{chi_square_uniform, spearman, TestResult};

use crate::error::{Error, Result};
use crate::gating::{GateConfig, Granularity, UserEncoder};
use crate::model::ModelConfig;
use crate::numerics::cost;
use crate::transformer::TransformerConfig;

/// Gate cost of one history; `items` holds `(L, K_eff)` per item.
pub fn flops_gate(cfg: &GateConfig, d: usize, items: &[(usize, usize)]) -> u64 {
    let f = cfg.filters as u64;
    let d64 = d as u64;
    let mut total = 0u64;
    for &(l, k) in items {
        if l == 0 {
            continue;
        }
        let (l, k) = (l as u64, k as u64);
        total += cost::conv1d(l as usize, d, cfg.filters, cfg.window);
        total += l * f;
        total += 4 * l * f + 3 * l;
        total += l * (4 * f + 2) + 2 * f;
        if cfg.granularity == Granularity::Word {
            total += 2 * l * l;
        }
        total += 2 * k * l * d64 + 2 * k * l + 3 * k + k * d64;
    }
    let n = items.iter().filter(|(l, _)| *l > 0).count() as u64;
    total
        + match cfg.user_encoder {
            UserEncoder::Lstm => n * (16 * f * f + 17 * f),
            UserEncoder::Attn => 4 * n * f + 3 * n,
        }
}

/// Encoder cost over `n` tokens, positions included, pooling excluded.
pub fn flops_transformer(cfg: &TransformerConfig, n: usize) -> u64 {
    let (n, d, h) = (n as u64, cfg.d as u64, cfg.heads as u64);
    let per_layer = 24 * n * d * d + 4 * n * n * d + 4 * h * n * n + 25 * n * d;
    n * d + cfg.layers as u64 * per_layer
}

pub fn flops_pool(d: usize, n: usize) -> u64 {
    (4 * n * d + 3 * n) as u64
}

/// Encoder plus pooling.
pub fn flops_encode(cfg: &TransformerConfig, n: usize) -> u64 {
    if n == 0 {
        return 0;
    }
    flops_transformer(cfg, n) + flops_pool(cfg.d, n)
}

/// Token counts and costs entering the acceleration ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    /// |I_org|
    pub i_org: f64,
    /// |I_flt|
    pub i_flt: f64,
    /// T_gate(I_org)
    pub gate: f64,
    /// T_trans(I_org)
    pub trans_org: f64,
    /// T_trans(I_flt)
    pub trans_flt: f64,
}

impl CostModel {
    /// Costs linear in the token count with unit costs `λ1` (gate) and `λ2`
    /// (transformer).
    pub fn linear(lambda1: f64, lambda2: f64, i_org: f64, i_flt: f64) -> Result<Self> {
        let cm = Self {
            i_org,
            i_flt,
            gate: lambda1 * i_org,
            trans_org: lambda2 * i_org,
            trans_flt: lambda2 * i_flt,
        };
        cm.validate()?;
        Ok(cm)
    }

    /// Analytic costs of one history with item lengths `lens`, assuming
    /// distinct tokens so that `K_eff = min(K, L)`.
    pub fn from_config(cfg: &ModelConfig, lens: &[usize]) -> Result<Self> {
        cfg.validate()?;
        let items: Vec<(usize, usize)> = lens.iter().map(|&l| (l, l.min(cfg.gate.k))).collect();
        let i_org: usize = lens.iter().sum();
        let i_flt: usize = items.iter().map(|x| x.1).sum();
        let cm = Self {
            i_org: i_org as f64,
            i_flt: i_flt as f64,
            gate: flops_gate(&cfg.gate, cfg.model.d, &items) as f64,
            trans_org: flops_encode(&cfg.model, i_org) as f64,
            trans_flt: flops_encode(&cfg.model, i_flt) as f64,
        };
        cm.validate()?;
        Ok(cm)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.i_org > 0.0
            && self.i_flt > 0.0
            && self.i_flt <= self.i_org
            && self.gate >= 0.0
            && self.trans_org > 0.0
            && self.trans_flt > 0.0;
        if ok && [self.i_org, self.i_flt, self.gate, self.trans_org, self.trans_flt].iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::usage(format!("invalid cost model {self:?}")))
        }
    }

    pub fn lambda1(&self) -> f64 {
        self.gate / self.i_org
    }

    pub fn lambda2(&self) -> f64 {
        self.trans_org / self.i_org
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Acceleration {
    /// γ
    pub gamma: f64,
    /// `1 / (λ1/λ2 + |I_flt|/|I_org|)`
    pub bound: f64,
    /// `|I_org| / |I_flt|`
    pub compression: f64,
}

pub fn acceleration_ratio(cm: &CostModel) -> Acceleration {
    Acceleration {
        gamma: cm.trans_org / (cm.gate + cm.trans_flt),
        bound: 1.0 / (cm.lambda1() / cm.lambda2() + cm.i_flt / cm.i_org),
        compression: cm.i_org / cm.i_flt,
    }
}

#[cfg(test)]
mod tests;

use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gating::GateMethod;
use crate::model::GateFormer;
use crate::numerics::{Tape, Tensor};
use crate::text::{TokenSequence, UserHistory};
use crate::transformer::{encode_sequence, TransformerParams};

fn model_cfg(d: usize, layers: usize, heads: usize, gate: GateConfig) -> ModelConfig {
    ModelConfig {
        model: TransformerConfig {
            d,
            layers,
            heads,
            max_positions: 256,
        },
        gate,
    }
}

/// Items of distinct ids, so `K_eff = min(K, L)`.
fn history(lens: &[usize], vocab: usize, seed: u64) -> UserHistory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = lens
        .iter()
        .map(|&l| {
            let mut ids: Vec<usize> = (2..vocab).collect();
            for i in 0..l {
                let j = rng.gen_range(i..ids.len());
                ids.swap(i, j);
            }
            ids.truncate(l);
            TokenSequence::from_ids(ids)
        })
        .collect();
    UserHistory::new(items, 50).unwrap()
}

#[test]
fn empty_input_costs_nothing() {
    let g = GateConfig::default();
    assert_eq!(flops_gate(&g, 16, &[]), 0);
    assert_eq!(flops_gate(&g, 16, &[(0, 0)]), 0);
    assert_eq!(flops_encode(&TransformerConfig::default(), 0), 0);
}

#[test]
fn conv_term_is_linear_in_tokens() {
    assert_eq!(cost::conv1d(40, 16, 8, 1), 2 * cost::conv1d(20, 16, 8, 1));
    let g = GateConfig::default();
    // Everything but the per-item constants scales with L at K fixed at 0.
    let one = flops_gate(&g, 16, &[(10, 0)]);
    let two = flops_gate(&g, 16, &[(10, 0), (10, 0)]);
    assert_eq!(two, 2 * one);
}

#[test]
fn gate_count_matches_instrumented_tape() {
    let variants = [
        GateConfig {
            k: 3,
            filters: 8,
            ..GateConfig::default()
        },
        GateConfig {
            k: 2,
            filters: 6,
            window: 2,
            user_encoder: UserEncoder::Attn,
            ..GateConfig::default()
        },
        GateConfig {
            k: 4,
            filters: 5,
            granularity: Granularity::Word,
            ..GateConfig::default()
        },
    ];
    let lens = [7, 12, 3, 9];
    let h = history(&lens, 60, 1);
    for g in variants {
        let cfg = model_cfg(8, 1, 2, g.clone());
        let model = GateFormer::<f64>::new(60, &cfg, 3).unwrap();
        let mut tape = Tape::new();
        let sel = model.gate_user(&mut tape, &h, 0).unwrap();
        let items: Vec<(usize, usize)> = lens.iter().zip(&sel).map(|(&l, s)| (l, s.len())).collect();
        let analytic = flops_gate(&g, 8, &items) as f64;
        let measured = tape.flops() as f64;
        assert!((analytic - measured).abs() / measured < 0.05, "{g:?}: {analytic} vs {measured}");
        assert_eq!(analytic, measured);
    }
}

#[test]
fn one_token_one_layer_hand_expansion() {
    let d = 16u64;
    let cfg = TransformerConfig {
        d: 16,
        layers: 1,
        heads: 4,
        max_positions: 8,
    };
    // positions d; qkv 6d²+3d; scores/probs/mix 2·2d + 4h; out 2d²+d;
    // ffn 16d²+5d; gelu 4d; two norms 10d; two residuals 2d.
    let expect = d + (6 * d * d + 3 * d) + (4 * d + 4 * 4) + (2 * d * d + d) + (16 * d * d + 5 * d) + 4 * d + 10 * d + 2 * d;
    assert_eq!(flops_transformer(&cfg, 1), expect);
}

#[test]
fn transformer_count_matches_instrumented_tape() {
    for (d, layers, heads, n) in [(16, 2, 4, 8), (8, 1, 1, 5), (12, 3, 3, 11)] {
        let cfg = TransformerConfig {
            d,
            layers,
            heads,
            max_positions: 32,
        };
        let mut store = crate::numerics::ParamStore::new();
        let emb = store.add("e", Tensor::<f64>::zeros(&[4, d]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = TransformerParams::init(&mut store, emb, &cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n, d], (0..n * d).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        encode_sequence(&mut tape, &store, &p, x).unwrap();
        let analytic = flops_transformer(&cfg, n) as f64;
        let measured = tape.flops() as f64;
        assert!((analytic - measured).abs() / measured < 0.05, "{analytic} vs {measured}");
    }
}

#[test]
fn attention_term_is_quadratic() {
    let cfg = TransformerConfig::default();
    let quad = |n: usize| {
        let (n, d, h) = (n as u64, cfg.d as u64, cfg.heads as u64);
        cfg.layers as u64 * (4 * n * n * d + 4 * h * n * n)
    };
    let linear = |n: usize| flops_transformer(&cfg, n) - quad(n);
    for n in [1, 5, 30, 150] {
        assert_eq!(quad(2 * n), 4 * quad(n));
        assert_eq!(linear(2 * n), 2 * linear(n));
        assert!(flops_transformer(&cfg, 2 * n) > 2 * flops_transformer(&cfg, n));
    }
}

#[test]
fn linear_costs_meet_the_bound_exactly() {
    let cm = CostModel::linear(0.01, 1.0, 150.0, 15.0).unwrap();
    let a = acceleration_ratio(&cm);
    assert_relative_eq!(a.bound, 1.0 / 0.11, epsilon = 1e-12);
    assert_relative_eq!(a.gamma, a.bound, epsilon = 1e-12);
    assert_relative_eq!(a.compression, 10.0, epsilon = 1e-12);

    let near_free = CostModel::linear(1e-12, 1.0, 100.0, 100.0).unwrap();
    assert_relative_eq!(acceleration_ratio(&near_free).gamma, 1.0, epsilon = 1e-9);

    assert!(CostModel::linear(0.1, 1.0, 10.0, 20.0).is_err());
    assert!(CostModel::linear(0.1, 1.0, 0.0, 0.0).is_err());
}

#[test]
fn superlinear_configs_beat_the_bound() {
    let configs = [
        (64, 2, 4, 3, vec![30; 50]),
        (64, 2, 4, 3, vec![30; 5]),
        (16, 1, 2, 1, vec![12, 30, 7]),
        (32, 4, 8, 5, vec![30; 20]),
        (128, 2, 8, 10, vec![30; 50]),
    ];
    for (d, layers, heads, k, lens) in configs {
        let g = GateConfig {
            k,
            ..GateConfig::default()
        };
        let cm = CostModel::from_config(&model_cfg(d, layers, heads, g), &lens).unwrap();
        assert!(cm.lambda1() > 0.0 && cm.lambda2() > 0.0);
        let a = acceleration_ratio(&cm);
        assert!(a.gamma > a.bound, "d={d} k={k}: {a:?}");
    }
}

#[test]
fn three_of_thirty_compresses_tenfold() {
    let cfg = model_cfg(64, 2, 4, GateConfig::default());
    let cm = CostModel::from_config(&cfg, &[30; 50]).unwrap();
    assert_eq!(acceleration_ratio(&cm).compression, 10.0);
}

#[test]
fn first_gate_histogram_covers_only_first_k() {
    let cfg = model_cfg(
        8,
        1,
        2,
        GateConfig {
            k: 3,
            method: GateMethod::First,
            ..GateConfig::default()
        },
    );
    let model = GateFormer::<f64>::new(80, &cfg, 1).unwrap();
    let hs: Vec<UserHistory> = (0..20).map(|s| history(&[30, 30, 30], 80, s)).collect();
    let hist = keyword_position_histogram(&model, &hs).unwrap();
    assert_eq!(hist.counts.len(), 30);
    assert_eq!(hist.counts[..3], [60, 60, 60]);
    assert!(hist.counts[3..].iter().all(|&c| c == 0));
    let csv = hist.to_csv("abc");
    assert!(csv.starts_with("# config abc\nposition,count,frequency\n0,60,"));
}

#[test]
fn random_gate_histogram_is_roughly_uniform() {
    let cfg = model_cfg(
        8,
        1,
        2,
        GateConfig {
            k: 3,
            method: GateMethod::Random,
            ..GateConfig::default()
        },
    );
    let model = GateFormer::<f64>::new(80, &cfg, 2).unwrap();
    let hs: Vec<UserHistory> = (0..200).map(|s| history(&[30, 30, 30, 30, 30], 80, s)).collect();
    let hist = keyword_position_histogram(&model, &hs).unwrap();
    assert_eq!(hist.total(), 3000);
    let chi = hist.chi_square().unwrap();
    assert!(chi.p_value > 0.001, "{chi:?}");
    assert!(hist.spearman().unwrap().p_value > 0.001);
}

#[test]
fn bench_rows_and_monotone_flops() {
    let hs: Vec<UserHistory> = (0..4).map(|s| history(&[20, 20, 20], 60, s)).collect();
    let mut last = 0.0;
    let mut rows = Vec::new();
    for k in [1, 2, 3, 5, 10] {
        let g = GateConfig {
            k,
            filters: 4,
            ..GateConfig::default()
        };
        let model = GateFormer::<f64>::new(60, &model_cfg(8, 1, 2, g), 1).unwrap();
        let row = bench_model(&model, &hs, &[], 30).unwrap();
        assert_eq!(row.k, k);
        assert!(row.flops >= last);
        assert!(row.flops_ratio() < 1.0);
        assert!(row.wall_us > 0.0 && row.full_wall_us > 0.0);
        last = row.flops;
        rows.push(row);
    }
    let csv = bench_csv(&rows, "fp");
    assert_eq!(csv.lines().count(), 2 + 5);
    assert_eq!(csv.lines().nth(1), Some(BENCH_HEADER));
}

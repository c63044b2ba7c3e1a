use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gating::{select_topk, GateSelection};
use crate::numerics::gradcheck::check_leaves;

type Mat = Vec<Vec<f64>>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Fixture {
    store: ParamStore<f64>,
    p: TransformerParams,
}

fn fixture(vocab: usize, cfg: TransformerConfig, seed: u64) -> Fixture {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let emb = store.add("emb", normal_init(&mut r, &[vocab, cfg.d], 0.5));
    let p = TransformerParams::init(&mut store, emb, &cfg, &mut r).unwrap();
    // Perturb every weight so biases and norms are not at their identity init.
    for param in store.iter_mut() {
        for x in param.value.data_mut() {
            *x += r.gen_range(-0.2..0.2);
        }
    }
    Fixture { store, p }
}

fn small(layers: usize, heads: usize) -> TransformerConfig {
    TransformerConfig {
        d: 8,
        layers,
        heads,
        max_positions: 16,
    }
}

fn seq(ids: &[usize]) -> TokenSequence {
    TokenSequence::from_ids(ids.to_vec())
}

fn mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().enumerate().map(|(k, x)| x * b[k][j]).sum()).collect())
        .collect()
}

fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn ln(a: &Mat, g: &[f64], b: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let m = r.iter().sum::<f64>() / n;
            let v = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            r.iter().enumerate().map(|(k, x)| (x - m) / (v + 1e-5).sqrt() * g[k] + b[k]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

// Plain-loop encoder + pooling.
fn oracle_encode(s: &ParamStore<f64>, p: &TransformerParams, inputs: &Mat) -> Vec<f64> {
    let n = inputs.len();
    let (d, dh) = (p.d, p.d / p.heads);
    let pos = mat(s.value(p.positions));
    let mut x: Mat = (0..n).map(|i| inputs[i].iter().zip(&pos[i]).map(|(a, b)| a + b).collect()).collect();
    let v = |id| s.value(id).data().to_vec();
    for l in &p.layers {
        let a = ln(&x, &v(l.ln1_gamma), &v(l.ln1_beta));
        let qkv = add_bias(&matmul(&a, &mat(s.value(l.w_qkv))), &v(l.b_qkv));
        let mut o = vec![vec![0.0; d]; n];
        for h in 0..p.heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|c| qkv[i][h * dh + c] * qkv[j][d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let w = softmax(&logits);
                for c in 0..dh {
                    o[i][h * dh + c] = (0..n).map(|j| w[j] * qkv[j][2 * d + h * dh + c]).sum();
                }
            }
        }
        x = add(&x, &add_bias(&matmul(&o, &mat(s.value(l.w_out))), &v(l.b_out)));
        let b = ln(&x, &v(l.ln2_gamma), &v(l.ln2_beta));
        let f: Mat = add_bias(&matmul(&b, &mat(s.value(l.w_ff1))), &v(l.b_ff1))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        x = add(&x, &add_bias(&matmul(&f, &mat(s.value(l.w_ff2))), &v(l.b_ff2)));
    }
    let q = v(p.query);
    let alpha = softmax(&x.iter().map(|r| r.iter().zip(&q).map(|(a, b)| a * b).sum()).collect::<Vec<_>>());
    (0..d).map(|k| (0..n).map(|i| alpha[i] * x[i][k]).sum()).collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_relative_eq!(*x, *y, epsilon = tol);
    }
}

fn full_selection(t: &mut Tape<f64>, s: &ParamStore<f64>, p: &TransformerParams, ids: &[usize], scores: &[f64]) -> GateSelection {
    let tokens = t.embed(s, p.embeddings, ids).unwrap();
    let r = t.constant(Tensor::vector(scores.to_vec()));
    select_topk(t, &seq(ids), r, tokens, ids.len()).unwrap()
}

#[test]
fn click_loss_examples() {
    let mut t = Tape::<f64>::new();
    let u = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let c = t.constant(Tensor::vector(vec![0.5, -0.5]));
    let loss = click_loss(&mut t, u, c, &[c, c, c, c]).unwrap();
    assert_relative_eq!(t.value(loss).item(), 1.6094379124341003, epsilon = 1e-12);

    let zs: Vec<Var> = [800.0, 1.0, -2.0].iter().map(|&z| t.constant(Tensor::vector(vec![z]))).collect();
    let loss = scores_loss(&mut t, &zs).unwrap();
    assert!(t.value(loss).item() < 1e-300);
    assert!(click_loss(&mut t, u, c, &[]).is_err());

    let mut g = rng(1);
    for _ in 0..100 {
        let z: Vec<f64> = (0..5).map(|_| g.gen_range(-5.0..5.0)).collect();
        let zs: Vec<Var> = z.iter().map(|&x| t.constant(Tensor::vector(vec![x]))).collect();
        let loss = scores_loss(&mut t, &zs).unwrap();
        let want = -(z[0].exp() / z.iter().map(|x| x.exp()).sum::<f64>()).ln();
        assert_relative_eq!(t.value(loss).item(), want, epsilon = 1e-12);
    }
}

#[test]
fn loss_is_monotone_in_scores() {
    let mut g = rng(2);
    for _ in 0..50 {
        let z: Vec<f64> = (0..5).map(|_| g.gen_range(-3.0..3.0)).collect();
        let eval = |z: &[f64]| {
            let mut t = Tape::<f64>::new();
            let zs: Vec<Var> = z.iter().map(|&x| t.constant(Tensor::vector(vec![x]))).collect();
            let l = scores_loss(&mut t, &zs).unwrap();
            t.value(l).item()
        };
        let h = 1e-6;
        for i in 0..5 {
            let mut up = z.clone();
            up[i] += h;
            let slope = (eval(&up) - eval(&z)) / h;
            if i == 0 {
                assert!(slope < 0.0);
            } else {
                assert!(slope > 0.0);
            }
        }
    }
}

#[test]
fn score_examples() {
    let mut t = Tape::<f64>::new();
    let mut e = vec![0.0; 64];
    e[5] = 1.0;
    let u = t.constant(Tensor::vector(e.clone()));
    let z = score(&mut t, u, u).unwrap();
    assert_eq!(t.value(z).item(), 0.125);
    let mut f = vec![0.0; 64];
    f[6] = 1.0;
    let c = t.constant(Tensor::vector(f));
    let z = score(&mut t, u, c).unwrap();
    assert_eq!(t.value(z).item(), 0.0);

    let mut g = rng(3);
    let a: Vec<f64> = (0..10).map(|_| g.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..10).map(|_| g.gen_range(-1.0..1.0)).collect();
    let (ua, ub) = (t.constant(Tensor::vector(a.clone())), t.constant(Tensor::vector(b.clone())));
    let z = score(&mut t, ua, ub).unwrap();
    let want = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / 10f64.sqrt();
    assert_relative_eq!(t.value(z).item(), want, epsilon = 1e-15);
}

#[test]
fn candidate_matches_plain_loop_oracle() {
    for (layers, heads) in [(1, 1), (2, 2), (2, 4)] {
        let fx = fixture(20, small(layers, heads), 4 + layers as u64 * 10 + heads as u64);
        let ids = [3, 7, 1, 12, 9];
        let mut t = Tape::new();
        let c = encode_candidate(&mut t, &fx.store, &fx.p, &seq(&ids)).unwrap();
        let inputs: Mat = ids.iter().map(|&i| fx.store.value(fx.p.embeddings).row(i).to_vec()).collect();
        assert_close(t.value(c).data(), &oracle_encode(&fx.store, &fx.p, &inputs), 1e-12);
    }
}

#[test]
fn single_position_examples() {
    let fx = fixture(20, small(2, 2), 5);
    let mut t = Tape::new();
    let c = encode_candidate(&mut t, &fx.store, &fx.p, &seq(&[4])).unwrap();
    let e = t.embed(&fx.store, fx.p.embeddings, &[4]).unwrap();
    let h = encode_sequence(&mut t, &fx.store, &fx.p, e).unwrap();
    assert_eq!(t.value(c).data(), t.value(h).row(0));

    let sel = full_selection(&mut t, &fx.store, &fx.p, &[4], &[0.3]);
    let u = encode_user(&mut t, &fx.store, &fx.p, &[sel]).unwrap();
    // β = 1 for a single token
    assert_eq!(t.value(u).data(), t.value(c).data());
}

#[test]
fn zero_layer_encoder_pools_inputs() {
    let fx = fixture(20, small(0, 2), 6);
    let mut t = Tape::new();
    let sel = full_selection(&mut t, &fx.store, &fx.p, &[2, 5, 8], &[0.1, 0.7, 0.4]);
    let gathered = mat(t.value(sel.gathered));
    let u = encode_user(&mut t, &fx.store, &fx.p, &[sel]).unwrap();
    let pos = mat(fx.store.value(fx.p.positions));
    let x: Mat = gathered.iter().enumerate().map(|(i, r)| r.iter().zip(&pos[i]).map(|(a, b)| a + b).collect()).collect();
    let q = fx.store.value(fx.p.query).data();
    let alpha = softmax(&x.iter().map(|r| r.iter().zip(q).map(|(a, b)| a * b).sum()).collect::<Vec<_>>());
    let want: Vec<f64> = (0..8).map(|k| (0..3).map(|i| alpha[i] * x[i][k]).sum()).collect();
    assert_close(t.value(u).data(), &want, 1e-14);
}

#[test]
fn user_encoding_matches_assembly_oracle() {
    let fx = fixture(30, small(2, 2), 7);
    let mut t = Tape::new();
    let items: [(&[usize], &[f64]); 2] = [(&[4, 9, 2], &[0.2, 0.9, 0.5]), (&[11, 3, 17, 6], &[0.8, -0.1, 0.3, 0.95])];
    let sels: Vec<GateSelection> = items
        .iter()
        .map(|(ids, r)| {
            let tokens = t.embed(&fx.store, fx.p.embeddings, ids).unwrap();
            let rv = t.constant(Tensor::vector(r.to_vec()));
            select_topk(&mut t, &seq(ids), rv, tokens, 2).unwrap()
        })
        .collect();
    let u = encode_user(&mut t, &fx.store, &fx.p, &sels).unwrap();

    // Hand assembly: item 0 keeps 9 then 2, item 1 keeps 6 then 11.
    let emb = fx.store.value(fx.p.embeddings);
    let b0 = softmax(&[0.9, 0.5]);
    let b1 = softmax(&[0.95, 0.8]);
    let rows = [(9, b0[0]), (2, b0[1]), (6, b1[0]), (11, b1[1])];
    let inputs: Mat = rows.iter().map(|&(id, b)| emb.row(id).iter().map(|x| x * b).collect()).collect();
    assert_close(t.value(u).data(), &oracle_encode(&fx.store, &fx.p, &inputs), 1e-12);
    assert!(encode_user(&mut t, &fx.store, &fx.p, &[]).is_err());
}

#[test]
fn candidate_equals_unscaled_full_selection() {
    let fx = fixture(20, small(2, 2), 8);
    let ids = [5, 1, 9, 14];
    let mut t = Tape::new();
    let c = encode_candidate(&mut t, &fx.store, &fx.p, &seq(&ids)).unwrap();
    // Selection over the whole item with β forced to 1 and text order kept.
    let gathered = t.embed(&fx.store, fx.p.embeddings, &ids).unwrap();
    let weights = t.constant(Tensor::filled(&[4], 1.0));
    let sel = GateSelection {
        positions: vec![0, 1, 2, 3],
        token_ids: ids.to_vec(),
        scores: vec![0.0; 4],
        beta: vec![1.0; 4],
        raw_scores: None,
        weights,
        gathered,
    };
    let u = encode_user(&mut t, &fx.store, &fx.p, &[sel]).unwrap();
    assert_eq!(t.value(u).data(), t.value(c).data());
    let c2 = encode_candidate(&mut t, &fx.store, &fx.p, &seq(&ids)).unwrap();
    assert_eq!(t.value(c2).data(), t.value(c).data());
}

#[test]
fn parameters_are_shared_between_towers() {
    let mut fx = fixture(20, small(1, 2), 9);
    let eval = |store: &ParamStore<f64>, p: &TransformerParams| {
        let mut t = Tape::new();
        let c = encode_candidate(&mut t, store, p, &seq(&[1, 2, 3])).unwrap();
        let sel = full_selection(&mut t, store, p, &[4, 5], &[0.2, 0.1]);
        let u = encode_user(&mut t, store, p, &[sel]).unwrap();
        (t.value(u).to_f64_vec(), t.value(c).to_f64_vec())
    };
    let (u0, c0) = eval(&fx.store, &fx.p);
    fx.store.value_mut(fx.p.layers[0].w_ff2).data_mut()[0] += 0.5;
    let (u1, c1) = eval(&fx.store, &fx.p);
    assert_ne!(u0, u1);
    assert_ne!(c0, c1);
}

#[test]
fn attention_rows_sum_to_one_and_shape_is_kept() {
    let fx = fixture(20, small(1, 4), 10);
    let mut t = Tape::new();
    let e = t.embed(&fx.store, fx.p.embeddings, &[1, 2, 3, 4, 5, 6]).unwrap();
    let (y, probs) = encoder_layer(&mut t, &fx.store, &fx.p.layers[0], e, 8, 4).unwrap();
    assert_eq!(t.shape(y), &[6, 8]);
    assert_eq!(probs.len(), 4);
    for p in probs {
        for i in 0..6 {
            assert!((t.value(p).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn long_sequences_are_rejected() {
    let fx = fixture(20, small(1, 1), 11);
    let mut t = Tape::new();
    let ids: Vec<usize> = (1..18).collect();
    assert!(encode_candidate(&mut t, &fx.store, &fx.p, &seq(&ids)).is_err());
    assert!(encode_candidate(&mut t, &fx.store, &fx.p, &seq(&[])).is_err());
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let fx = fixture(20, small(2, 2), 12);
    let mut g = rng(13);
    let x = normal_init::<f64, _>(&mut g, &[4, 8], 1.0);
    let report = check_leaves(&[x], 1e-5, |t, v| {
        let h = encode_sequence(t, &fx.store, &fx.p, v[0])?;
        let u = pool(t, &fx.store, &fx.p, h)?;
        Ok(t.sum(u))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn config_validation() {
    assert!(TransformerConfig { d: 10, heads: 4, ..small(1, 1) }.validate().is_err());
    assert!(TransformerConfig::default().validate().is_ok());
}

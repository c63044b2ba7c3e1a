use approx::assert_relative_eq;

use super::*;
use crate::numerics::gradcheck::check_params;

fn tiny(method: GateMethod) -> ModelConfig {
    ModelConfig {
        model: TransformerConfig {
            d: 8,
            layers: 1,
            heads: 2,
            max_positions: 32,
        },
        gate: GateConfig {
            k: 2,
            filters: 4,
            method,
            ..GateConfig::default()
        },
    }
}

fn seq(ids: &[usize]) -> TokenSequence {
    TokenSequence::from_ids(ids.to_vec())
}

fn sample() -> ImpressionSample {
    ImpressionSample {
        user_id: "U1".into(),
        history: UserHistory::new(vec![seq(&[2, 3, 4, 5]), seq(&[6, 7, 8]), seq(&[9, 10, 11, 12, 13])], 50).unwrap(),
        positive: seq(&[14, 15, 16]),
        negatives: vec![seq(&[17, 18]), seq(&[19, 2, 20]), seq(&[21, 22, 23, 3]), seq(&[24])],
    }
}

#[test]
fn heuristic_models_have_no_gate_weights() {
    let learned = GateFormer::<f64>::new(30, &tiny(GateMethod::Learned), 1).unwrap();
    let first = GateFormer::<f64>::new(30, &tiny(GateMethod::First), 1).unwrap();
    assert!(learned.gate.is_some());
    assert!(first.gate.is_none());
    assert!(first.store.iter().all(|(_, p)| !p.name.starts_with("gate.")));
    assert!(learned.store.num_scalars() > first.store.num_scalars());
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let mut model = GateFormer::<f64>::new(30, &tiny(GateMethod::Learned), 2).unwrap();
    // keep conv rows off zero so no score ties
    let b = model.gate.unwrap().bias;
    model.store.value_mut(b).data_mut().fill(0.5);
    let s = sample();
    let report = check_params(&model.store, 1e-6, 3, |t, store| {
        let m = GateFormer {
            store: store.clone(),
            ..model.clone()
        };
        let loss = m.sample_loss(t, &s, 0)?;
        let sig = m.gate_user(&mut Tape::new(), &s.history, 0)?.into_iter().flat_map(|x| x.positions).collect();
        Ok((loss, sig))
    })
    .unwrap();
    assert!(report.checked > 300, "{report:?}");
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn forward_backward_is_bit_reproducible() {
    let run = || {
        let mut model = GateFormer::<f64>::new(30, &tiny(GateMethod::Learned), 3).unwrap();
        let mut t = Tape::new();
        let loss = model.sample_loss(&mut t, &sample(), 0).unwrap();
        let g = t.backward(loss).unwrap();
        g.accumulate_into(&t, &mut model.store, 1.0);
        let grads: Vec<u64> = model
            .store
            .iter()
            .flat_map(|(_, p)| p.grad.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect();
        (t.value(loss).item().to_bits(), grads)
    };
    assert_eq!(run(), run());
}

#[test]
fn random_heuristic_depends_on_salt_only() {
    let model = GateFormer::<f64>::new(30, &tiny(GateMethod::Random), 4).unwrap();
    let h = sample().history;
    let a = model.selections(&h, 7).unwrap();
    let b = model.selections(&h, 7).unwrap();
    assert_eq!(
        a.iter().map(|s| &s.positions).collect::<Vec<_>>(),
        b.iter().map(|s| &s.positions).collect::<Vec<_>>()
    );
    let scores = model.score_candidates(&h, &[&seq(&[1, 2]), &seq(&[3])], 7).unwrap();
    assert!(scores.iter().all(|x| x.is_finite()));
}

#[test]
fn bm25_model_needs_corpus() {
    let mut model = GateFormer::<f64>::new(30, &tiny(GateMethod::Bm25), 5).unwrap();
    let h = sample().history;
    assert!(model.selections(&h, 0).is_err());
    let docs = [seq(&[2, 3]), seq(&[4, 5, 6])];
    model.set_corpus(InvertedIndex::build(["a", "b"].into_iter().zip(&docs)).unwrap());
    assert_eq!(model.selections(&h, 0).unwrap().len(), 3);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = GateFormer::<f64>::new(30, &tiny(GateMethod::Learned), 6).unwrap();
    save_checkpoint(&model, dir.path(), 12).unwrap();
    let (back, manifest) = load_checkpoint::<f64>(dir.path()).unwrap();
    assert_eq!(manifest.step, 12);
    assert_eq!(manifest.config, model.config);
    for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let bytes1 = std::fs::read(dir.path().join("weights.bin")).unwrap();
    let m1 = std::fs::read(dir.path().join("manifest.toml")).unwrap();
    save_checkpoint(&back, dir.path(), 12).unwrap();
    assert_eq!(std::fs::read(dir.path().join("weights.bin")).unwrap(), bytes1);
    assert_eq!(std::fs::read(dir.path().join("manifest.toml")).unwrap(), m1);
    let h = sample().history;
    assert_eq!(model.user_vector(&h, 0).unwrap(), back.user_vector(&h, 0).unwrap());

    std::fs::write(dir.path().join("weights.bin"), &bytes1[..bytes1.len() - 8]).unwrap();
    assert!(load_checkpoint::<f64>(dir.path()).is_err());
    assert!(load_checkpoint::<f64>(&dir.path().join("missing")).is_err());
}

#[test]
fn f32_model_tracks_f64() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = GateFormer::<f64>::new(30, &tiny(GateMethod::Learned), 8).unwrap();
    // Away from near-ties in the top-K scores, where rounding could flip a selection.
    let b = model.gate.unwrap().bias;
    model.store.value_mut(b).data_mut().fill(0.5);
    save_checkpoint(&model, dir.path(), 0).unwrap();
    let (m32, _) = load_checkpoint::<f32>(dir.path()).unwrap();
    let s = sample();
    let mut t64 = Tape::new();
    let l64 = model.sample_loss(&mut t64, &s, 0).unwrap();
    let mut t32 = Tape::new();
    let l32 = m32.sample_loss(&mut t32, &s, 0).unwrap();
    assert_relative_eq!(t64.value(l64).item(), f64::from(t32.value(l32).item()), max_relative = 1e-4);
}

#[test]
fn full_input_encoding_sees_every_token() {
    let model = GateFormer::<f64>::new(30, &tiny(GateMethod::Learned), 9).unwrap();
    let h = sample().history;
    let mut t = Tape::new();
    let u = model.encode_user_full(&mut t, &h).unwrap();
    assert_eq!(t.shape(u), &[8]);
}


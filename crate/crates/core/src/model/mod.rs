//! Gate plus transformer, wired end to end.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry, CHECKPOINT_FORMAT, MANIFEST_FILE, WEIGHTS_FILE,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{gate_history, heuristic_gate, GateConfig, GateMethod, GateParams, GateSelection};
use crate::numerics::nn::normal_init;
use crate::numerics::{ParamId, ParamStore, Tape, Var};
use crate::recall::InvertedIndex;
use crate::scalar::Scalar;
use crate::text::{ImpressionSample, TokenSequence, UserHistory};
use crate::transformer::{self, TransformerConfig, TransformerParams};

/// Architecture settings: the `[model]` and `[gate]` config sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub model: TransformerConfig,
    pub gate: GateConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gate.validate()
    }
}

/// The full recommender. Gate weights exist only for the learned method.
#[derive(Clone, Debug)]
pub struct GateFormer<T> {
    pub store: ParamStore<T>,
    pub gate: Option<GateParams>,
    pub trans: TransformerParams,
    pub embeddings: ParamId,
    pub config: ModelConfig,
    pub vocab_size: usize,
    /// Seeds the RANDOM heuristic.
    pub seed: u64,
    corpus: Option<InvertedIndex>,
}

impl<T: Scalar> GateFormer<T> {
    pub fn new(vocab_size: usize, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size < 2 {
            return Err(Error::Config("vocabulary needs at least [PAD] and [UNK]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.model.d;
        let embeddings = store.add("embeddings", normal_init(&mut rng, &[vocab_size, d], 0.1));
        let gate = match config.gate.method {
            GateMethod::Learned => Some(GateParams::init(&mut store, embeddings, &config.gate, &mut rng)?),
            _ => None,
        };
        let trans = TransformerParams::init(&mut store, embeddings, &config.model, &mut rng)?;
        Ok(Self {
            store,
            gate,
            trans,
            embeddings,
            config: config.clone(),
            vocab_size,
            seed,
            corpus: None,
        })
    }

    pub fn method(&self) -> GateMethod {
        self.config.gate.method
    }

    /// Corpus statistics for the BM25 heuristic.
    pub fn set_corpus(&mut self, index: InvertedIndex) {
        self.corpus = Some(index);
    }

    pub fn corpus(&self) -> Option<&InvertedIndex> {
        self.corpus.as_ref()
    }

    /// Selects keywords for every history item. `salt` decorrelates the
    /// RANDOM heuristic across calls while keeping it reproducible.
    pub fn gate_user(&self, tape: &mut Tape<T>, history: &UserHistory, salt: u64) -> Result<Vec<GateSelection>> {
        match (&self.gate, self.method()) {
            (Some(p), GateMethod::Learned) => Ok(gate_history(tape, &self.store, p, &self.config.gate, history)?.selections),
            (_, GateMethod::Learned) => Err(Error::usage("learned gate has no parameters")),
            (_, method) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                heuristic_gate(
                    tape,
                    &self.store,
                    self.embeddings,
                    history,
                    method,
                    self.config.gate.k,
                    self.corpus.as_ref(),
                    &mut rng,
                )
            }
        }
    }

    pub fn encode_user(&self, tape: &mut Tape<T>, history: &UserHistory, salt: u64) -> Result<(Var, Vec<GateSelection>)> {
        let selections = self.gate_user(tape, history, salt)?;
        let u = transformer::encode_user(tape, &self.store, &self.trans, &selections)?;
        Ok((u, selections))
    }

    /// Ungated user encoding over every history token.
    pub fn encode_user_full(&self, tape: &mut Tape<T>, history: &UserHistory) -> Result<Var> {
        let ids: Vec<usize> = history.items().iter().flat_map(|s| s.ids().iter().copied()).collect();
        let e = tape.embed(&self.store, self.embeddings, &ids)?;
        let h = transformer::encode_sequence(tape, &self.store, &self.trans, e)?;
        transformer::pool(tape, &self.store, &self.trans, h)
    }

    pub fn encode_candidate(&self, tape: &mut Tape<T>, seq: &TokenSequence) -> Result<Var> {
        transformer::encode_candidate(tape, &self.store, &self.trans, seq)
    }

    /// Click loss of one training sample.
    pub fn sample_loss(&self, tape: &mut Tape<T>, sample: &ImpressionSample, salt: u64) -> Result<Var> {
        let (u, _) = self.encode_user(tape, &sample.history, salt)?;
        let pos = self.encode_candidate(tape, &sample.positive)?;
        let negs = sample
            .negatives
            .iter()
            .map(|s| self.encode_candidate(tape, s))
            .collect::<Result<Vec<_>>>()?;
        transformer::click_loss(tape, u, pos, &negs)
    }

    pub fn user_vector(&self, history: &UserHistory, salt: u64) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (u, _) = self.encode_user(&mut tape, history, salt)?;
        Ok(tape.value(u).to_f64_vec())
    }

    pub fn candidate_vector(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let c = self.encode_candidate(&mut tape, seq)?;
        Ok(tape.value(c).to_f64_vec())
    }

    /// Scaled inner-product scores of `candidates` for one user.
    pub fn score_candidates(&self, history: &UserHistory, candidates: &[&TokenSequence], salt: u64) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (u, _) = self.encode_user(&mut tape, history, salt)?;
        candidates
            .iter()
            .map(|c| {
                let cv = self.encode_candidate(&mut tape, c)?;
                let z = transformer::score(&mut tape, u, cv)?;
                Ok(tape.value(z).item().as_f64())
            })
            .collect()
    }

    /// Selections with values read off the tape, for inspection.
    pub fn selections(&self, history: &UserHistory, salt: u64) -> Result<Vec<GateSelection>> {
        let mut tape = Tape::new();
        self.gate_user(&mut tape, history, salt)
    }
}

#[cfg(test)]
mod tests;

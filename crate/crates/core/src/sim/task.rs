//! Synthetic speech-transcription proxy task.
//!
//! Every word has an embedding; a spoken word is its embedding plus
//! Gaussian noise. A set of hard words sits right next to an acoustically
//! similar confusion word. The incumbent transcriber is exact except on hard
//! words, which it replaces by their confusion word with a per-word error
//! rate. Users who see an error either fix the transcript, garble it, or
//! leave it alone.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::client::{valid_corrections, ClientExample};
use crate::error::{Error, Result};
use crate::model::WordId;
use crate::stats::{CorrectedWordList, LabeledUtterance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub embedding_seed: u64,
    /// Standard deviation of the per-dimension feature noise.
    pub feature_noise: f64,
    /// Zipf exponent of the word distribution.
    pub zipf_exponent: f64,
    /// Number of hard words.
    pub hard_words: usize,
    /// Hard words are drawn from this frequency-rank range `[lo, hi)`.
    pub hard_rank_range: [usize; 2],
    /// Distance between a hard word's embedding and its confusion word's.
    pub confusion_distance: f64,
    /// Mean incumbent error rate on hard words.
    pub p_err: f64,
    /// Per-word error rates are uniform in `p_err ± p_err_spread`.
    pub p_err_spread: f64,
    /// Utterance length range in words, inclusive.
    pub utterance_len: [usize; 2],
    pub clients: usize,
    pub examples_per_client: usize,
    /// Probability a user fixes an erroneous transcript to the truth.
    pub fix_prob: f64,
    /// Probability a user garbles an erroneous transcript.
    pub garble_prob: f64,
    /// Number of words a garbled edit adds, inclusive range.
    pub garble_extra_words: [usize; 2],
    /// Held-out utterances for general and target WER.
    pub eval_utterances: usize,
    /// Held-out utterances the server uses to measure incumbent accuracy.
    pub accuracy_utterances: usize,
    /// Central utterances for warm-starting the server model.
    pub pretrain_utterances: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size < 2 || self.feature_dim == 0 {
            return cfg("vocab_size must be >= 2 and feature_dim positive");
        }
        let [lo, hi] = self.hard_rank_range;
        if lo >= hi || hi > self.vocab_size {
            return cfg("hard_rank_range must be a non-empty range inside the vocabulary");
        }
        if self.hard_words > hi - lo || 2 * self.hard_words > self.vocab_size {
            return cfg("too many hard words for the rank range or vocabulary");
        }
        for (name, p) in [
            ("p_err", self.p_err),
            ("fix_prob", self.fix_prob),
            ("garble_prob", self.garble_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.fix_prob + self.garble_prob > 1.0 + 1e-12 {
            return cfg("fix_prob + garble_prob must not exceed 1");
        }
        if self.p_err_spread < 0.0 {
            return cfg("p_err_spread must be non-negative");
        }
        if self.utterance_len[0] == 0 || self.utterance_len[0] > self.utterance_len[1] {
            return cfg("utterance_len must be a range of positive lengths");
        }
        if self.garble_extra_words[0] > self.garble_extra_words[1] {
            return cfg("garble_extra_words must be an ordered range");
        }
        if !(self.feature_noise >= 0.0) || !(self.zipf_exponent >= 0.0) {
            return cfg("feature_noise and zipf_exponent must be non-negative");
        }
        if self.clients == 0 || self.examples_per_client == 0 || self.eval_utterances == 0 {
            return cfg("clients, examples_per_client and eval_utterances must be positive");
        }
        if self.accuracy_utterances == 0 {
            return cfg("accuracy_utterances must be positive");
        }
        Ok(())
    }
}

/// The frozen on-device transcriber that produced the original transcripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incumbent {
    /// Hard word to its confusion word.
    pub confusion: BTreeMap<WordId, WordId>,
    /// Hard word to its error rate.
    pub error_rate: BTreeMap<WordId, f64>,
}

impl Incumbent {
    pub fn transcribe<R: Rng + ?Sized>(&self, truth: &[WordId], rng: &mut R) -> Vec<WordId> {
        truth
            .iter()
            .map(|&w| match self.confusion.get(&w) {
                Some(&c) if rng.random_bool(self.error_rate[&w]) => c,
                _ => w,
            })
            .collect()
    }

    pub fn hard_words(&self) -> BTreeSet<WordId> {
        self.confusion.keys().copied().collect()
    }
}

/// Word embeddings, word distribution and the incumbent.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: TaskSpec,
    pub embeddings: Vec<Vec<f32>>,
    /// Word ids ordered by frequency rank.
    pub by_rank: Vec<WordId>,
    pub word_probs: Vec<f64>,
    pub incumbent: Incumbent,
    sampler: WeightedAliasIndex<f64>,
}

/// Builds the embeddings, word distribution and incumbent. Deterministic in
/// `spec.embedding_seed`.
pub fn build_world(spec: &TaskSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.embedding_seed);
    let v = spec.vocab_size;
    let unit = Normal::new(0.0, 1.0).unwrap();

    let mut by_rank: Vec<WordId> = (0..v as WordId).collect();
    by_rank.shuffle(&mut rng);
    let mut word_probs = vec![0.0; v];
    for (rank, &w) in by_rank.iter().enumerate() {
        word_probs[w as usize] = 1.0 / ((rank + 1) as f64).powf(spec.zipf_exponent);
    }
    let total: f64 = word_probs.iter().sum();
    word_probs.iter_mut().for_each(|p| *p /= total);

    let mut embeddings: Vec<Vec<f32>> = (0..v)
        .map(|_| (0..spec.feature_dim).map(|_| unit.sample(&mut rng) as f32).collect())
        .collect();

    // Hard words from the rank band, each paired with a distinct easy word.
    let [lo, hi] = spec.hard_rank_range;
    let mut band: Vec<WordId> = by_rank[lo..hi].to_vec();
    band.shuffle(&mut rng);
    let hard: Vec<WordId> = band[..spec.hard_words].to_vec();
    let hard_set: BTreeSet<WordId> = hard.iter().copied().collect();
    let mut easy: Vec<WordId> = by_rank
        .iter()
        .copied()
        .filter(|w| !hard_set.contains(w))
        .collect();
    // Confusion targets come from the frequent half of the easy words.
    easy.truncate((easy.len() / 2).max(spec.hard_words));
    easy.shuffle(&mut rng);

    let mut confusion = BTreeMap::new();
    let mut error_rate = BTreeMap::new();
    let scale = spec.confusion_distance / (spec.feature_dim as f64).sqrt();
    for (i, &w) in hard.iter().enumerate() {
        let target = easy[i];
        confusion.insert(w, target);
        let lo = (spec.p_err - spec.p_err_spread).max(0.0);
        let hi = (spec.p_err + spec.p_err_spread).min(1.0);
        let p = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        error_rate.insert(w, p);
        embeddings[w as usize] = embeddings[target as usize]
            .iter()
            .map(|&x| x + (scale * unit.sample(&mut rng)) as f32)
            .collect();
    }

    let sampler = WeightedAliasIndex::new(word_probs.clone())
        .map_err(|e| Error::Config(format!("word distribution: {e}")))?;
    Ok(World {
        spec: spec.clone(),
        embeddings,
        by_rank,
        word_probs,
        incumbent: Incumbent {
            confusion,
            error_rate,
        },
        sampler,
    })
}

impl World {
    pub fn sample_sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<WordId> {
        let [lo, hi] = self.spec.utterance_len;
        let len = rng.random_range(lo..=hi);
        (0..len).map(|_| self.sampler.sample(rng) as WordId).collect()
    }

    pub fn features<R: Rng + ?Sized>(&self, words: &[WordId], rng: &mut R) -> Vec<Vec<f32>> {
        let noise = Normal::new(0.0, self.spec.feature_noise).unwrap();
        words
            .iter()
            .map(|&w| {
                self.embeddings[w as usize]
                    .iter()
                    .map(|&x| x + noise.sample(rng) as f32)
                    .collect()
            })
            .collect()
    }

    pub fn utterance<R: Rng + ?Sized>(&self, rng: &mut R) -> LabeledUtterance {
        let truth = self.sample_sentence(rng);
        LabeledUtterance {
            features: self.features(&truth, rng),
            truth,
        }
    }

    /// One on-device example including the user's reaction to errors.
    pub fn client_example<R: Rng + ?Sized>(&self, rng: &mut R) -> ClientExample {
        let LabeledUtterance { features, truth } = self.utterance(rng);
        let incumbent = self.incumbent.transcribe(&truth, rng);
        let final_transcript = if incumbent == truth {
            incumbent.clone()
        } else {
            let u: f64 = rng.random();
            if u < self.spec.fix_prob {
                truth.clone()
            } else if u < self.spec.fix_prob + self.spec.garble_prob {
                self.garble(&truth, &incumbent, rng)
            } else {
                incumbent.clone()
            }
        };
        ClientExample::new(features, truth, incumbent, final_transcript)
            .expect("features follow the transcript")
    }

    /// A botched edit: the first misrecognized word is replaced by a random
    /// word and extra random words are appended.
    fn garble<R: Rng + ?Sized>(
        &self,
        truth: &[WordId],
        incumbent: &[WordId],
        rng: &mut R,
    ) -> Vec<WordId> {
        let mut out = incumbent.to_vec();
        if let Some(k) = truth.iter().zip(incumbent).position(|(a, b)| a != b) {
            out[k] = rng.random_range(0..self.spec.vocab_size) as WordId;
        }
        let [lo, hi] = self.spec.garble_extra_words;
        for _ in 0..rng.random_range(lo..=hi) {
            out.push(rng.random_range(0..self.spec.vocab_size) as WordId);
        }
        out
    }
}

/// Generated client pool and server-side held-out data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub clients: Vec<Vec<ClientExample>>,
    pub eval: Vec<LabeledUtterance>,
    /// `(truth, incumbent output)` pairs for the accuracy table.
    pub accuracy_eval: Vec<(Vec<WordId>, Vec<WordId>)>,
    /// Central warm-start data labeled by the incumbent.
    pub pretrain: Vec<(Vec<Vec<f32>>, Vec<WordId>)>,
    pub corrected_words: CorrectedWordList,
}

/// Generates clients and held-out sets. `max_word_len_diff` decides which
/// edits count as real corrections when building the corrected word list.
pub fn generate_clients(world: &World, seed: u64, max_word_len_diff: usize) -> Dataset {
    let spec = &world.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clients: Vec<Vec<ClientExample>> = (0..spec.clients)
        .map(|_| {
            (0..spec.examples_per_client)
                .map(|_| world.client_example(&mut rng))
                .collect()
        })
        .collect();
    let eval = (0..spec.eval_utterances)
        .map(|_| world.utterance(&mut rng))
        .collect();
    let accuracy_eval = (0..spec.accuracy_utterances)
        .map(|_| {
            let truth = world.sample_sentence(&mut rng);
            let out = world.incumbent.transcribe(&truth, &mut rng);
            (truth, out)
        })
        .collect();
    let pretrain = (0..spec.pretrain_utterances)
        .map(|_| {
            let truth = world.sample_sentence(&mut rng);
            let features = world.features(&truth, &mut rng);
            let labels = world.incumbent.transcribe(&truth, &mut rng);
            (features, labels)
        })
        .collect();
    let corrected_words = CorrectedWordList::new(
        clients
            .iter()
            .flat_map(|c| valid_corrections(c, max_word_len_diff))
            .flat_map(|e| e.corrected_tokens()),
    );
    Dataset {
        clients,
        eval,
        accuracy_eval,
        pretrain,
        corrected_words,
    }
}

/// Per-client corrected word tokens from valid corrections, the input of the
/// noisy histogram.
pub fn client_correction_words(
    clients: &[Vec<ClientExample>],
    max_word_len_diff: usize,
) -> Vec<Vec<WordId>> {
    clients
        .iter()
        .map(|c| {
            valid_corrections(c, max_word_len_diff)
                .flat_map(|e| e.corrected_tokens())
                .collect()
        })
        .collect()
}

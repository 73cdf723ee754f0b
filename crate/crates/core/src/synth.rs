//! Seeded separable corpus: relevant passages contain a marker word that
//! never appears elsewhere.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ir_eval::{Qrels, RunEntry};
use crate::model::Vocab;
use crate::train::Triplet;

pub const MARKER: &str = "mk";
/// Filler word types; together with the marker and the reserved tokens the
/// vocabulary has 100 entries.
pub const N_FILLER: usize = 95;
pub const RELEVANT_GRADE: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_triplets: usize,
    pub n_eval_queries: usize,
    pub candidates_per_query: usize,
    pub relevant_per_query: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 12,
            n_triplets: 1000,
            n_eval_queries: 20,
            candidates_per_query: 50,
            relevant_per_query: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub triplets: Vec<Triplet>,
    pub queries: BTreeMap<String, String>,
    pub passages: BTreeMap<String, String>,
    /// First-stage candidates with random scores, tag `first-stage`.
    pub candidates: Vec<RunEntry>,
    pub qrels: Qrels,
}

pub fn filler_words() -> Vec<String> {
    (0..N_FILLER).map(|i| format!("w{i:02}")).collect()
}

/// The full vocabulary, independent of which words a sample happens to use.
pub fn synthetic_vocab() -> Vocab {
    Vocab::from_tokens(filler_words().into_iter().chain([MARKER.to_string()]))
}

struct Sampler {
    rng: ChaCha8Rng,
    filler: Vec<String>,
}

impl Sampler {
    fn fillers(&mut self, n: usize) -> Vec<String> {
        (0..n)
            .map(|_| self.filler.choose(&mut self.rng).unwrap().clone())
            .collect()
    }

    fn query(&mut self) -> String {
        let n = self.rng.gen_range(3..=5);
        self.fillers(n).join(" ")
    }

    fn passage(&mut self, relevant: bool) -> String {
        let n = self.rng.gen_range(6..=10);
        let mut words = self.fillers(n);
        if relevant {
            let at = self.rng.gen_range(0..n);
            words[at] = MARKER.to_string();
        }
        words.join(" ")
    }
}

pub fn generate(config: &SynthConfig) -> SynthCorpus {
    assert!(config.relevant_per_query <= config.candidates_per_query);
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        filler: filler_words(),
    };

    let triplets = (0..config.n_triplets)
        .map(|_| Triplet {
            query: s.query(),
            positive: s.passage(true),
            negative: s.passage(false),
        })
        .collect();

    let mut queries = BTreeMap::new();
    let mut passages = BTreeMap::new();
    let mut candidates = Vec::new();
    let mut qrels = Qrels::new();
    for q in 0..config.n_eval_queries {
        let qid = format!("q{q:03}");
        queries.insert(qid.clone(), s.query());
        let mut docs = Vec::with_capacity(config.candidates_per_query);
        for d in 0..config.candidates_per_query {
            let docid = format!("{qid}-p{d:03}");
            let relevant = d < config.relevant_per_query;
            passages.insert(docid.clone(), s.passage(relevant));
            qrels.insert(&qid, &docid, if relevant { RELEVANT_GRADE } else { 0 });
            docs.push((docid, s.rng.gen_range(0.0..30.0f64)));
        }
        docs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| b.0.cmp(&a.0)));
        candidates.extend(docs.into_iter().enumerate().map(|(i, (docid, score))| RunEntry {
            qid: qid.clone(),
            docid,
            rank: i + 1,
            score: (score * 1e6).round() / 1e6,
            tag: "first-stage".into(),
        }));
    }

    SynthCorpus {
        triplets,
        queries,
        passages,
        candidates,
        qrels,
    }
}

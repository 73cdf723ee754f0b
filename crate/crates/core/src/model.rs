//! Toy cross-encoder.
//!
//! A query and a passage are joined into one sequence
//! `[CLS] query [SEP] passage [SEP] [PAD]…`, run through a small pre-norm
//! transformer encoder, and the final hidden state at the `[CLS]` position is
//! mapped through a linear head and a sigmoid to a relevance score in (0, 1).

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Gradients, Parameter, Tape, Tensor, TensorError, Var};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["[CLS]", "[SEP]", "[PAD]", "[UNK]"];

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Probability clamp applied before taking logs in the BCE objective.
pub const BCE_EPS: f64 = 1e-12;

const POSITION_INIT_SCALE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence has length {got}, model expects {expected}")]
    SequenceLength { expected: usize, got: usize },
    #[error("vocabulary has {vocab} entries but the model embeds {model}")]
    VocabMismatch { vocab: usize, model: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Lower-cased whitespace tokens.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Token vocabulary. Ids 0..4 are reserved; the rest are assigned in
/// lexicographic token order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let sorted: BTreeSet<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_string())
            .filter(|t| !t.is_empty() && !RESERVED_TOKENS.contains(&t.as_str()))
            .collect();
        let tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).chain(sorted).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Builds a vocabulary from every word in `texts`.
    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut all = BTreeSet::new();
        for t in texts {
            all.extend(words(t.as_ref()));
        }
        Self::from_tokens(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `token`, or `UNK`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED_TOKENS.len()..]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of unmasked positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Encodes `[CLS] query [SEP] passage [SEP]`, padded or truncated to
/// `max_len`. Over-long inputs lose tokens from the end of whichever side is
/// longer (the passage on ties).
///
/// Panics if `max_len < 4`.
pub fn tokenize_pair(vocab: &Vocab, query: &str, passage: &str, max_len: usize) -> TokenSequence {
    assert!(max_len >= 4, "max_len must leave room for CLS, two SEPs and a token");
    let mut q: Vec<usize> = words(query).map(|w| vocab.id(&w)).collect();
    let mut p: Vec<usize> = words(passage).map(|w| vocab.id(&w)).collect();
    let budget = max_len - 3;
    while q.len() + p.len() > budget {
        if q.len() > p.len() {
            q.pop();
        } else {
            p.pop();
        }
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(q);
    ids.push(SEP);
    ids.extend(p);
    ids.push(SEP);
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(max_len, 0);
    TokenSequence { ids, attention_mask }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossEncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl CrossEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.vocab_size < RESERVED_TOKENS.len() {
            return Err(ModelError::InvalidConfig(format!(
                "vocab_size {} cannot hold the reserved tokens",
                self.vocab_size
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 8 {
            return Err(ModelError::InvalidConfig(format!(
                "max_len must be at least 8, got {}",
                self.max_len
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("embed.token".to_string(), vec![self.vocab_size, d]),
            ("embed.position".to_string(), vec![self.max_len, d]),
        ];
        for l in 0..self.n_layers {
            let block: [(&str, Vec<usize>); LAYER_PARAMS] = [
                ("ln1.gain", vec![d]),
                ("ln1.bias", vec![d]),
                ("attn.wq", vec![d, d]),
                ("attn.bq", vec![d]),
                ("attn.wk", vec![d, d]),
                ("attn.bk", vec![d]),
                ("attn.wv", vec![d, d]),
                ("attn.bv", vec![d]),
                ("attn.wo", vec![d, d]),
                ("attn.bo", vec![d]),
                ("ln2.gain", vec![d]),
                ("ln2.bias", vec![d]),
                ("ff.w1", vec![d, f]),
                ("ff.b1", vec![f]),
                ("ff.w2", vec![f, d]),
                ("ff.b2", vec![d]),
            ];
            out.extend(block.into_iter().map(|(n, s)| (format!("layer{l}.{n}"), s)));
        }
        out.push(("final_ln.gain".into(), vec![d]));
        out.push(("final_ln.bias".into(), vec![d]));
        out.push(("head.weight".into(), vec![d, 1]));
        out.push(("head.bias".into(), vec![1]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

const LAYER_PARAMS: usize = 16;

// Offsets within a layer block, matching `layout`.
mod slot {
    pub const LN1_GAIN: usize = 0;
    pub const LN1_BIAS: usize = 1;
    pub const WQ: usize = 2;
    pub const BQ: usize = 3;
    pub const WK: usize = 4;
    pub const BK: usize = 5;
    pub const WV: usize = 6;
    pub const BV: usize = 7;
    pub const WO: usize = 8;
    pub const BO: usize = 9;
    pub const LN2_GAIN: usize = 10;
    pub const LN2_BIAS: usize = 11;
    pub const W1: usize = 12;
    pub const B1: usize = 13;
    pub const W2: usize = 14;
    pub const B2: usize = 15;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEncoder {
    config: CrossEncoderConfig,
    params: Vec<Parameter>,
}

/// Deterministically initialises a model from `config.seed`.
pub fn init_params(config: CrossEncoderConfig) -> Result<CrossEncoder> {
    CrossEncoder::new(config)
}

impl CrossEncoder {
    /// Weight matrices are uniform in ±1/√fan_in, position embeddings are
    /// uniform in ±0.02, layer-norm gains are 1 and every bias is 0.
    pub fn new(config: CrossEncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if name.ends_with(".gain") {
                    vec![1.0; n]
                } else if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    let bound = if name == "embed.position" {
                        POSITION_INIT_SCALE
                    } else if name == "embed.token" {
                        1.0 / (shape[1] as f64).sqrt()
                    } else {
                        1.0 / (shape[0] as f64).sqrt()
                    };
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                Parameter::new(name, Tensor::new(&shape, data).expect("layout shapes"))
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Assembles a model from named parameters, checking them against the
    /// layout implied by `config`.
    pub fn from_params(config: CrossEncoderConfig, params: Vec<Parameter>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "parameter `{}` {:?} does not match expected `{name}` {shape:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &CrossEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Fails if `vocab` cannot be embedded by this model.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if vocab.len() > self.config.vocab_size {
            return Err(ModelError::VocabMismatch {
                vocab: vocab.len(),
                model: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn bind_const(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect()
    }

    fn bind_tracked(&mut self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter_mut().map(|p| tape.watch(&mut p.tensor)).collect()
    }

    fn accumulate(&mut self, grads: &Gradients) {
        for p in &mut self.params {
            grads.accumulate(&mut p.tensor);
        }
    }

    fn check_len(&self, seq: &TokenSequence) -> Result<()> {
        if seq.ids.len() != self.config.max_len || seq.attention_mask.len() != seq.ids.len() {
            return Err(ModelError::SequenceLength {
                expected: self.config.max_len,
                got: seq.ids.len(),
            });
        }
        Ok(())
    }

    /// Records the forward pass for one sequence of any length up to
    /// `max_len`; returns the `[1×1]` score.
    fn forward(&self, tape: &mut Tape, p: &[Var], ids: &[usize], mask: &[u8]) -> Result<Var> {
        let cfg = &self.config;
        let len = ids.len();
        let head_dim = cfg.d_model / cfg.n_heads;
        let positions: Vec<usize> = (0..len).collect();

        let tok = tape.embedding(p[0], ids)?;
        let pos = tape.embedding(p[1], &positions)?;
        let mut x = tape.add(tok, pos)?;
        let additive: Vec<f64> = mask
            .iter()
            .map(|&m| if m == 1 { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        let key_mask = tape.constant(Tensor::vector(additive));
        let inv_sqrt = 1.0 / (head_dim as f64).sqrt();

        for l in 0..cfg.n_layers {
            let w = |s: usize| p[2 + l * LAYER_PARAMS + s];
            let h = tape.layer_norm(x, w(slot::LN1_GAIN), w(slot::LN1_BIAS), LAYER_NORM_EPS)?;
            let mut proj = |weight, bias| -> Result<Var> {
                let y = tape.matmul(h, weight)?;
                Ok(tape.add(y, bias)?)
            };
            let q = proj(w(slot::WQ), w(slot::BQ))?;
            let k = proj(w(slot::WK), w(slot::BK))?;
            let v = proj(w(slot::WV), w(slot::BV))?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, hd * head_dim, head_dim)?;
                let kh = tape.slice_cols(k, hd * head_dim, head_dim)?;
                let vh = tape.slice_cols(v, hd * head_dim, head_dim)?;
                let kt = tape.transpose(kh)?;
                let logits = tape.matmul(qh, kt)?;
                let logits = tape.scale(logits, inv_sqrt);
                let logits = tape.add(logits, key_mask)?;
                let attn = tape.softmax(logits, 1)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let joined = tape.concat_cols(&heads)?;
            let o = tape.matmul(joined, w(slot::WO))?;
            let o = tape.add(o, w(slot::BO))?;
            x = tape.add(x, o)?;

            let h2 = tape.layer_norm(x, w(slot::LN2_GAIN), w(slot::LN2_BIAS), LAYER_NORM_EPS)?;
            let f = tape.matmul(h2, w(slot::W1))?;
            let f = tape.add(f, w(slot::B1))?;
            let f = tape.relu(f);
            let f = tape.matmul(f, w(slot::W2))?;
            let f = tape.add(f, w(slot::B2))?;
            x = tape.add(x, f)?;
        }

        let tail = 2 + cfg.n_layers * LAYER_PARAMS;
        let x = tape.layer_norm(x, p[tail], p[tail + 1], LAYER_NORM_EPS)?;
        let cls = tape.select_row(x, 0)?;
        let logit = tape.matmul(cls, p[tail + 2])?;
        let logit = tape.add(logit, p[tail + 3])?;
        Ok(tape.sigmoid(logit))
    }

    /// Relevance score in (0, 1). The sequence must have length `max_len`.
    pub fn score(&self, seq: &TokenSequence) -> Result<f64> {
        self.check_len(seq)?;
        self.score_tokens(&seq.ids, &seq.attention_mask)
    }

    fn score_tokens(&self, ids: &[usize], mask: &[u8]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.bind_const(&mut tape);
        let s = self.forward(&mut tape, &p, ids, mask)?;
        Ok(tape.value(s)[0])
    }

    /// Scores every sequence, in order.
    pub fn score_batch(&self, seqs: &[TokenSequence]) -> Result<Vec<f64>> {
        seqs.iter().map(|s| self.score(s)).collect()
    }

    /// Scores `seq` and adds d(score)/d(parameter) into every gradient slot.
    pub fn score_with_grad(&mut self, seq: &TokenSequence) -> Result<f64> {
        self.check_len(seq)?;
        let mut tape = Tape::new();
        let p = self.bind_tracked(&mut tape);
        let s = self.forward(&mut tape, &p, &seq.ids, &seq.attention_mask)?;
        let loss = tape.sum(s);
        let grads = tape.backward(loss)?;
        self.accumulate(&grads);
        Ok(tape.value(s)[0])
    }

    /// Mean BCE of the batch against 0/1 `labels`; adds the loss gradient into
    /// every parameter's gradient slot (callers zero them between steps).
    pub fn bce_with_grad(&mut self, batch: &[TokenSequence], labels: &[f64]) -> Result<f64> {
        for seq in batch {
            self.check_len(seq)?;
        }
        let mut tape = Tape::new();
        let p = self.bind_tracked(&mut tape);
        let scores = batch
            .iter()
            .map(|seq| self.forward(&mut tape, &p, &seq.ids, &seq.attention_mask))
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat_rows(&scores)?;
        let loss = tape.bce(stacked, labels, BCE_EPS)?;
        let grads = tape.backward(loss)?;
        self.accumulate(&grads);
        Ok(tape.value(loss)[0])
    }

    /// Mean BCE without touching gradients.
    pub fn bce(&self, batch: &[TokenSequence], labels: &[f64]) -> Result<f64> {
        let scores = self.score_batch(batch)?;
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(scores));
        let loss = tape.bce(s, labels, BCE_EPS)?;
        Ok(tape.value(loss)[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error};
    use proptest::prelude::*;

    fn abc() -> Vocab {
        Vocab::from_tokens(["c", "a", "b"])
    }

    fn tiny(seed: u64) -> CrossEncoderConfig {
        CrossEncoderConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 16,
            seed,
        }
    }

    #[test]
    fn vocab_is_sorted_after_reserved_ids() {
        let v = abc();
        assert_eq!(v.len(), 7);
        assert_eq!((v.id("a"), v.id("b"), v.id("c")), (4, 5, 6));
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.token(CLS), Some("[CLS]"));
        let v2 = Vocab::from_texts(["B a", "c C"]);
        assert_eq!(v2, v);
    }

    #[test]
    fn tokenize_examples() {
        let v = abc();
        let seq = tokenize_pair(&v, "a b", "c", 8);
        assert_eq!(seq.ids, vec![0, 4, 5, 1, 6, 1, 2, 2]);
        assert_eq!(seq.attention_mask, vec![1, 1, 1, 1, 1, 1, 0, 0]);

        let seq = tokenize_pair(&v, "", "", 8);
        assert_eq!(seq.ids, vec![CLS, SEP, SEP, PAD, PAD, PAD, PAD, PAD]);
        assert_eq!(seq.real_len(), 3);

        let long = vec!["b"; 100].join(" ");
        let seq = tokenize_pair(&v, "A", &long, 8);
        assert_eq!(seq.ids, vec![0, 4, 1, 5, 5, 5, 5, 1]);
    }

    #[test]
    fn truncation_trims_the_longer_side() {
        let v = abc();
        let seq = tokenize_pair(&v, "a a a a a a", "b b", 8);
        // Budget 5: query shrinks to 3 before the passage loses anything.
        assert_eq!(seq.ids, vec![0, 4, 4, 4, 1, 5, 5, 1]);
    }

    #[test]
    fn config_validation() {
        assert!(tiny(0).validate().is_ok());
        let bad = CrossEncoderConfig { n_heads: 3, ..tiny(0) };
        assert!(matches!(CrossEncoder::new(bad), Err(ModelError::InvalidConfig(_))));
        let bad = CrossEncoderConfig { max_len: 7, ..tiny(0) };
        assert!(CrossEncoder::new(bad).is_err());
        let bad = CrossEncoderConfig { d_ff: 0, ..tiny(0) };
        assert!(CrossEncoder::new(bad).is_err());
    }

    #[test]
    fn parameter_count_closed_form() {
        let cfg = CrossEncoderConfig {
            vocab_size: 50,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 32,
            seed: 0,
        };
        // token 50·16 + position 32·16
        // + layer: 2 norms (4·16) + 4 projections (4·(16·16+16)) + ff (16·32+32+32·16+16)
        // + final norm 2·16 + head 16+1
        let expected = 800 + 512 + (64 + 4 * 272 + 1072) + 32 + 17;
        assert_eq!(expected, 3585);
        assert_eq!(CrossEncoder::new(cfg).unwrap().param_count(), expected);
        assert_eq!(cfg.param_count(), expected);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = CrossEncoder::new(tiny(7)).unwrap();
        let b = CrossEncoder::new(tiny(7)).unwrap();
        let c = CrossEncoder::new(tiny(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let names: Vec<&str> = a.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[0], "embed.token");
        assert_eq!(*names.last().unwrap(), "head.bias");
        assert!(a
            .params()
            .iter()
            .filter(|p| p.name.ends_with("bias") || p.name.contains(".b"))
            .all(|p| p.tensor.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn zero_head_scores_sigmoid_of_bias() {
        let mut m = CrossEncoder::new(tiny(1)).unwrap();
        let n = m.params().len();
        m.params_mut()[n - 2].tensor.data_mut().fill(0.0);
        let seq = tokenize_pair(&abc(), "a", "b c", 16);
        assert_eq!(m.score(&seq).unwrap(), 0.5);
        m.params_mut()[n - 1].tensor.data_mut()[0] = 1.3;
        assert_eq!(m.score(&seq).unwrap(), crate::tensor::sigmoid(1.3));
    }

    #[test]
    fn score_is_deterministic_and_checks_length() {
        let m = CrossEncoder::new(tiny(2)).unwrap();
        let seq = tokenize_pair(&abc(), "a b", "c a", 16);
        assert_eq!(m.score(&seq).unwrap().to_bits(), m.score(&seq).unwrap().to_bits());
        let short = tokenize_pair(&abc(), "a", "b", 8);
        assert_eq!(
            m.score(&short),
            Err(ModelError::SequenceLength { expected: 16, got: 8 })
        );
    }

    #[test]
    fn padding_matches_unpadded_computation() {
        let m = CrossEncoder::new(tiny(3)).unwrap();
        let seq = tokenize_pair(&abc(), "a b", "c c a", 16);
        let n = seq.real_len();
        let unpadded = m.score_tokens(&seq.ids[..n], &seq.attention_mask[..n]).unwrap();
        assert!((m.score(&seq).unwrap() - unpadded).abs() < 1e-12);
    }

    #[test]
    fn batch_matches_items() {
        let m = CrossEncoder::new(tiny(4)).unwrap();
        let v = abc();
        let seqs: Vec<_> = ["a", "b c", "c c c", "a b c a"]
            .iter()
            .map(|p| tokenize_pair(&v, "a b", p, 16))
            .collect();
        let batch = m.score_batch(&seqs).unwrap();
        let mut halves = m.score_batch(&seqs[..2]).unwrap();
        halves.extend(m.score_batch(&seqs[2..]).unwrap());
        assert_eq!(batch, halves);
        for (s, seq) in batch.iter().zip(&seqs) {
            assert!((s - m.score(seq).unwrap()).abs() < 1e-12);
        }
        assert_eq!(m.score_batch(&seqs[..1]).unwrap(), vec![m.score(&seqs[0]).unwrap()]);
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let mut model = CrossEncoder::new(tiny(9)).unwrap();
        let vocab = Vocab::from_tokens((0..16).map(|i| format!("t{i}")));
        let seq = tokenize_pair(&vocab, "t1 t2 t3", "t4 t1 t9 t15 t0", 16);
        model.zero_grad();
        model.score_with_grad(&seq).unwrap();
        for idx in 0..model.params().len() {
            let fd = finite_diff_grad(
                |t| {
                    let mut probe = model.clone();
                    probe.params_mut()[idx].tensor.data_mut().copy_from_slice(t.data());
                    probe.score(&seq).unwrap()
                },
                &model.params()[idx].tensor,
                1e-5,
            );
            let p = &model.params()[idx];
            for (a, b) in p.tensor.grad().unwrap().iter().zip(fd.data()) {
                assert!(relative_error(*a, *b, 1e-8) < 1e-4, "{}: {a} vs {b}", p.name);
            }
        }
    }

    proptest! {
        #[test]
        fn pad_content_is_invisible(
            seed in 0u64..50,
            filler in prop::collection::vec(0usize..20, 16),
        ) {
            let m = CrossEncoder::new(tiny(seed)).unwrap();
            let vocab = Vocab::from_tokens((0..16).map(|i| format!("t{i}")));
            let seq = tokenize_pair(&vocab, "t3 t5", "t7 t11 t2", 16);
            let mut noisy = seq.clone();
            let real = seq.real_len();
            noisy.ids[real..].copy_from_slice(&filler[real..]);
            let a = m.score(&seq).unwrap();
            let b = m.score(&noisy).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a > 0.0 && a < 1.0);
        }

        #[test]
        fn tokenization_respects_layout(
            q in "[a-d ]{0,30}",
            p in "[a-d ]{0,60}",
            max_len in 4usize..24,
        ) {
            let v = Vocab::from_tokens(["a", "b", "c"]);
            let seq = tokenize_pair(&v, &q, &p, max_len);
            prop_assert_eq!(seq.len(), max_len);
            prop_assert_eq!(seq.ids[0], CLS);
            prop_assert!(seq.ids.iter().all(|&id| id < v.len()));
            let real = seq.real_len();
            prop_assert_eq!(seq.ids[..real].iter().filter(|&&i| i == SEP).count(), 2);
            prop_assert_eq!(seq.ids[real - 1], SEP);
            prop_assert!(seq.ids[real..].iter().all(|&i| i == PAD));
        }
    }
}

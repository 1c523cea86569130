//! Instructions, hashed tokenization and the toy text encoder.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{init_weight, normal_tensor, seeded};
use crate::tensor::Tensor;

/// Task family of a synthetic instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    /// Fine-grained local recolouring ("change the color to yellow").
    LocalTranslation,
    /// Whole-image style transfer ("turn it into cartoon style").
    GlobalStyle,
    /// Local insertion ("add fireworks into the sky").
    LocalEdit,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::LocalTranslation, Family::GlobalStyle, Family::LocalEdit];

    pub fn label(self) -> &'static str {
        match self {
            Family::LocalTranslation => "local-translation",
            Family::GlobalStyle => "global-style",
            Family::LocalEdit => "local-edit",
        }
    }

    pub fn from_label(label: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.label() == label)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_global(self) -> bool {
        self == Family::GlobalStyle
    }
}

/// A human editing instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    text: String,
    family: Option<Family>,
}

impl Instruction {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Input("instruction text is empty".into()));
        }
        Ok(Self { text, family: None })
    }

    pub fn labeled(text: impl Into<String>, family: Family) -> Result<Self> {
        Ok(Self {
            family: Some(family),
            ..Self::new(text)?
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn family(&self) -> Option<Family> {
        self.family
    }
}

/// Reserved id of the begin token.
pub const BOS: usize = 0;

/// FNV-1a, 64 bit. Stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased words split on whitespace and punctuation.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Hash of a word into `1..vocab` (id 0 is the begin token).
pub fn word_id(word: &str, vocab: usize) -> usize {
    1 + (fnv1a(word.as_bytes()) % (vocab as u64 - 1)) as usize
}

/// Begin token followed by hashed word ids, at most `max_len` ids in total.
pub fn tokenize(y: &Instruction, vocab: usize, max_len: usize) -> Result<Vec<usize>> {
    let words = words(y.text());
    if words.is_empty() {
        return Err(Error::Input(format!("instruction {:?} has no word tokens", y.text())));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(words.iter().take(max_len.saturating_sub(1)).map(|w| word_id(w, vocab)));
    Ok(ids)
}

/// Token features `[L, d]` produced by the encoder (or the controller).
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeature(Tensor);

impl TextFeature {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "text_feature",
                left: t.shape().to_vec(),
                right: alloc::vec![2],
            });
        }
        if !t.is_finite() {
            return Err(Error::Numeric("non-finite text feature".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn token(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub dim: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab: 4096,
            dim: 32,
            max_len: 16,
        }
    }
}

/// Hashed embedding table, sinusoidal positions and one residual
/// self-attention block.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    config: EncoderConfig,
    embedding: ParamId,
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, seed: u64) -> Result<Self> {
        if config.vocab < 2 || config.dim == 0 || config.max_len < 2 {
            return Err(Error::Config(format!("bad encoder config {config:?}")));
        }
        let mut rng = seeded(seed);
        let d = config.dim;
        let embedding = store.add("encoder.embedding", normal_tensor(&mut rng, &[config.vocab, d]))?;
        let query = store.add("encoder.query", init_weight(&mut rng, &[d, d], d))?;
        let key = store.add("encoder.key", init_weight(&mut rng, &[d, d], d))?;
        let value = store.add("encoder.value", init_weight(&mut rng, &[d, d], d))?;
        Ok(Self {
            config,
            embedding,
            query,
            key,
            value,
        })
    }

    /// Re-attaches to parameters already present in `store` (e.g. after
    /// loading a checkpoint).
    pub fn attach(store: &ParamStore, config: EncoderConfig) -> Result<Self> {
        let find = |n: &str| store.id_of(n).ok_or_else(|| Error::State(format!("missing parameter {n}")));
        Ok(Self {
            config,
            embedding: find("encoder.embedding")?,
            query: find("encoder.query")?,
            key: find("encoder.key")?,
            value: find("encoder.value")?,
        })
    }

    pub fn config(&self) -> EncoderConfig {
        self.config
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.embedding, self.query, self.key, self.value]
    }

    pub fn tokenize(&self, y: &Instruction) -> Result<Vec<usize>> {
        tokenize(y, self.config.vocab, self.config.max_len)
    }

    /// Records `x = encoder(y)` on the tape, shape `[L, d]`.
    pub fn encode(&self, tape: &mut Tape<'_>, y: &Instruction) -> Result<Var> {
        let ids = self.tokenize(y)?;
        let d = self.config.dim;
        let table = tape.param(self.embedding);
        let tokens = tape.gather_rows(table, &ids)?;
        let pos = tape.constant(positions(ids.len(), d));
        let x = tape.add(tokens, pos)?;

        let (wq, wk, wv) = (tape.param(self.query), tape.param(self.key), tape.param(self.value));
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let scores = tape.matmul_bt(q, k)?;
        let scores = tape.scale(scores, 1.0 / libm::sqrt(d as f64));
        let attn = tape.softmax_rows(scores);
        let mixed = tape.matmul(attn, v)?;
        tape.add(x, mixed)
    }

    /// Encodes without keeping the tape around.
    pub fn encode_value(&self, store: &ParamStore, y: &Instruction) -> Result<TextFeature> {
        let mut tape = Tape::new(store);
        let x = self.encode(&mut tape, y)?;
        TextFeature::new(tape.value(x).clone())
    }
}

/// Sinusoidal position signal `[len, d]`.
pub fn positions(len: usize, d: usize) -> Tensor {
    let data: Vec<f64> = (0..len).flat_map(|p| (0..d).map(move |i| sinusoid(p, i, d))).collect();
    Tensor::new(&[len, d], data).expect("positive extents")
}

/// Sinusoidal embedding of a scalar timestep, length `d`.
pub fn timestep_embedding(t: usize, d: usize) -> Tensor {
    Tensor::vector((0..d).map(|i| sinusoid(t, i, d)).collect())
}

fn sinusoid(p: usize, i: usize, d: usize) -> f64 {
    let freq = libm::pow(10_000.0, -((i / 2 * 2) as f64) / d as f64);
    let angle = p as f64 * freq;
    if i.is_multiple_of(2) {
        libm::sin(angle)
    } else {
        libm::cos(angle)
    }
}

impl core::fmt::Display for Instruction {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.text)
    }
}

impl TryFrom<&str> for Instruction {
    type Error = Error;

    fn try_from(s: &str) -> Result<Self> {
        Instruction::new(s.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, EncoderConfig::default(), 7).unwrap();
        (store, enc)
    }

    #[test]
    fn tokenize_prepends_bos_and_hashes_words() {
        let y = Instruction::new("Make it comic style").unwrap();
        let ids = tokenize(&y, 4096, 16).unwrap();
        let expected: Vec<usize> = ["make", "it", "comic", "style"].iter().map(|w| word_id(w, 4096)).collect();
        assert_eq!(ids[0], BOS);
        assert_eq!(&ids[1..], &expected[..]);
        assert!(ids[1..].iter().all(|&i| (1..4096).contains(&i)));
    }

    #[test]
    fn punctuation_and_case_are_ignored() {
        let a = tokenize(&Instruction::new("Add fireworks, into the SKY!").unwrap(), 4096, 16).unwrap();
        let b = tokenize(&Instruction::new("add fireworks into the sky").unwrap(), 4096, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_instruction_rejected() {
        assert!(matches!(Instruction::new(""), Err(Error::Input(_))));
        assert!(matches!(Instruction::new("   \t"), Err(Error::Input(_))));
        let punct = Instruction::new("?!").unwrap();
        assert!(matches!(tokenize(&punct, 4096, 16), Err(Error::Input(_))));
    }

    #[test]
    fn truncates_to_max_len() {
        let long = Instruction::new("a b c d e f g h i j k l m n o p q r s t").unwrap();
        assert_eq!(tokenize(&long, 4096, 16).unwrap().len(), 16);
    }

    #[test]
    fn encode_is_deterministic_and_shaped() {
        let (store, enc) = encoder();
        let y = Instruction::new("turn it into cartoon style").unwrap();
        let a = enc.encode_value(&store, &y).unwrap();
        let b = enc.encode_value(&store, &y).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.len(), a.width()), (6, 32));
        let single = enc.encode_value(&store, &Instruction::new("sketch").unwrap()).unwrap();
        assert_eq!(single.len(), 2);
    }

    #[test]
    fn one_word_changes_the_feature() {
        let (store, enc) = encoder();
        let a = enc
            .encode_value(&store, &Instruction::new("change the color to yellow").unwrap())
            .unwrap();
        let b = enc
            .encode_value(&store, &Instruction::new("change the color to purple").unwrap())
            .unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()).unwrap() > 1e-3);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (s1, _) = encoder();
        let (s2, _) = encoder();
        assert_eq!(s1, s2);
    }

    #[test]
    fn family_labels_round_trip() {
        for f in Family::ALL {
            assert_eq!(Family::from_label(f.label()), Some(f));
        }
        assert_eq!(Family::from_label("global"), None);
    }
}

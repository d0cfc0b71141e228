//! Word-level vocabulary, pair encoding, word truncation and MLM masking.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::Document;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

/// Word truncation limit applied to each biography before pairing.
pub const TRUNCATE_WORDS: usize = 255;

/// Label value for positions that do not contribute to the MLM loss.
pub const IGNORE: i64 = -100;

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIAL
}

/// Lowercases and splits on whitespace; runs of alphanumerics form words
/// and every other character stands alone.
pub fn normalize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
            continue;
        }
        if !current.is_empty() {
            words.push(std::mem::take(&mut current));
        }
        if !ch.is_whitespace() {
            words.push(ch.to_lowercase().collect());
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (id, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*special) {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary line {id} must be {special}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("invalid token {t:?} at line {id}")));
            }
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Specials first, then words with frequency ≥ `min_freq` ordered by
    /// descending frequency and lexicographically within ties, until the
    /// total size reaches `max_size`.
    pub fn build(corpus: &[Document], max_size: usize, min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("cannot build a vocabulary from an empty corpus".into()));
        }
        if max_size < NUM_SPECIAL {
            return Err(Error::InvalidArgument(format!(
                "max_size {max_size} leaves no room for the {NUM_SPECIAL} special tokens"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for w in normalize(&doc.text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .take(max_size)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> EncodedSequence {
        let ids: Vec<usize> = normalize(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect();
        EncodedSequence {
            attention_mask: vec![1; ids.len()],
            ids,
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| {
                self.token(id)
                    .ok_or(Error::TokenOutOfRange { id, size: self.len() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// `[CLS] segA [SEP] segB [SEP]` padded to `max_len`. Each biography is
    /// first cut to [`TRUNCATE_WORDS`] words, then each side to
    /// `(max_len - 3) / 2` tokens.
    pub fn encode_pair(&self, bio_a: &str, bio_b: &str, max_len: usize) -> Result<EncodedPair> {
        if max_len < 7 {
            return Err(Error::InvalidArgument(format!("max_len {max_len} below minimum of 7")));
        }
        let budget = (max_len - 3) / 2;
        let side = |bio: &str, which: &str| -> Result<Vec<usize>> {
            let mut ids = self.encode(&truncate_words(bio, TRUNCATE_WORDS)).ids;
            if ids.is_empty() {
                return Err(Error::InvalidArgument(format!("biography {which} is empty after normalization")));
            }
            ids.truncate(budget);
            Ok(ids)
        };
        let a = side(bio_a, "a")?;
        let b = side(bio_b, "b")?;

        let mut ids = Vec::with_capacity(max_len);
        let mut segment_ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend_from_slice(&a);
        ids.push(SEP);
        segment_ids.resize(ids.len(), 0);
        ids.extend_from_slice(&b);
        ids.push(SEP);
        segment_ids.resize(ids.len(), 1);
        let real = ids.len();
        ids.resize(max_len, PAD);
        segment_ids.resize(max_len, 0);
        let mut attention_mask = vec![1; real];
        attention_mask.resize(max_len, 0);
        Ok(EncodedPair {
            ids,
            segment_ids,
            attention_mask,
        })
    }

    /// `[CLS] text [SEP]` chunks of at most `max_len` tokens, unpadded.
    pub fn encode_document(&self, text: &str, max_len: usize) -> Vec<EncodedPair> {
        assert!(max_len >= 3, "max_len must leave room for content");
        let ids = self.encode(text).ids;
        ids.chunks(max_len - 2)
            .map(|chunk| {
                let mut seq = Vec::with_capacity(chunk.len() + 2);
                seq.push(CLS);
                seq.extend_from_slice(chunk);
                seq.push(SEP);
                EncodedPair {
                    segment_ids: vec![0; seq.len()],
                    attention_mask: vec![1; seq.len()],
                    ids: seq,
                }
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(raw.lines().map(str::to_string).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

/// Packed model input. Single sequences use segment 0 throughout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub ids: Vec<usize>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
}

impl EncodedPair {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of leading real (non-PAD) positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().take_while(|&&m| m == 1).count()
    }

    /// Drops trailing padding; outputs at real positions are unaffected.
    pub fn trimmed(&self) -> EncodedPair {
        let n = self.real_len();
        EncodedPair {
            ids: self.ids[..n].to_vec(),
            segment_ids: self.segment_ids[..n].to_vec(),
            attention_mask: self.attention_mask[..n].to_vec(),
        }
    }
}

impl From<EncodedSequence> for EncodedPair {
    fn from(seq: EncodedSequence) -> Self {
        EncodedPair {
            segment_ids: vec![0; seq.ids.len()],
            ids: seq.ids,
            attention_mask: seq.attention_mask,
        }
    }
}

/// First `max_words` whitespace-delimited words joined by single spaces.
pub fn truncate_words(text: &str, max_words: usize) -> String {
    text.split_whitespace()
        .take(max_words.max(1))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub input: EncodedPair,
    pub mlm_labels: Vec<i64>,
}

impl MaskedBatch {
    pub fn num_masked(&self) -> usize {
        self.mlm_labels.iter().filter(|&&l| l != IGNORE).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingConfig {
    pub rate: f64,
    /// Of the selected positions, 10 % become a random word and 10 % stay
    /// unchanged instead of `[MASK]`.
    pub bert_style: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            bert_style: false,
        }
    }
}

/// Eligible positions: attended and not one of the reserved ids.
pub fn eligible_positions(seq: &EncodedPair) -> impl Iterator<Item = usize> + '_ {
    seq.ids
        .iter()
        .zip(&seq.attention_mask)
        .enumerate()
        .filter(|(_, (&id, &m))| m == 1 && !is_special(id))
        .map(|(i, _)| i)
}

pub fn mask_tokens(seq: &EncodedPair, config: MaskingConfig, vocab_size: usize, seed: u64) -> Result<MaskedBatch> {
    if !(0.0..=1.0).contains(&config.rate) {
        return Err(Error::InvalidArgument(format!("mask rate {} outside [0,1]", config.rate)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input = seq.clone();
    let mut mlm_labels = vec![IGNORE; seq.len()];
    let eligible: Vec<usize> = eligible_positions(seq).collect();
    for pos in eligible {
        if !rng.gen_bool(config.rate) {
            continue;
        }
        mlm_labels[pos] = seq.ids[pos] as i64;
        if config.bert_style && vocab_size > NUM_SPECIAL {
            let roll: f64 = rng.gen();
            if roll < 0.8 {
                input.ids[pos] = MASK;
            } else if roll < 0.9 {
                input.ids[pos] = rng.gen_range(NUM_SPECIAL..vocab_size);
            }
        } else {
            input.ids[pos] = MASK;
        }
    }
    Ok(MaskedBatch { input, mlm_labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn docs(texts: &[&str]) -> Vec<Document> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document {
                doc_id: i.to_string(),
                text: t.to_string(),
            })
            .collect()
    }

    #[test]
    fn normalization_splits_punctuation() {
        assert_eq!(normalize("Born in 1992, Abidjan."), ["born", "in", "1992", ",", "abidjan", "."]);
        assert_eq!(normalize("Sun Xun's"), ["sun", "xun", "'", "s"]);
        assert!(normalize("  ").is_empty());
    }

    #[test]
    fn vocab_frequency_order_and_cutoff() {
        let v = Vocabulary::build(&docs(&["a a b"]), 100, 1).unwrap();
        assert_eq!(v.len(), 7);
        assert!(v.id("a").unwrap() < v.id("b").unwrap());
        assert_eq!(v.id("a"), Some(5));
        let v = Vocabulary::build(&docs(&["a a b"]), 100, 2).unwrap();
        assert_eq!(v.tokens()[5..], ["a".to_string()]);
        let v = Vocabulary::build(&docs(&["c b a"]), 7, 1).unwrap();
        assert_eq!(v.tokens()[5..], ["a".to_string(), "b".to_string()]);
        assert!(Vocabulary::build(&[], 10, 1).is_err());
    }

    #[test]
    fn vocab_file_round_trip_and_validation() {
        let v = Vocabulary::build(&docs(&["the cat sat on the mat"]), 100, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().nth(4), Some("[MASK]"));
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        fs::write(&p, "[PAD]\n[UNK]\n[SEP]\n[CLS]\n[MASK]\n").unwrap();
        assert!(Vocabulary::load(&p).is_err());
        fs::write(&p, "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nx\nx\n").unwrap();
        assert!(Vocabulary::load(&p).is_err());
    }

    #[test]
    fn encode_and_decode() {
        let v = Vocabulary::build(&docs(&["born in 1992"]), 100, 1).unwrap();
        assert!(v.encode("").ids.is_empty());
        assert_eq!(v.encode("zebra quokka").ids, vec![UNK, UNK]);
        let e = v.encode("Born in 1992");
        assert_eq!(e.ids.len(), 3);
        assert_eq!(v.decode(&e.ids).unwrap(), "born in 1992");
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert_eq!(v.decode(&[CLS]).unwrap(), "[CLS]");
        assert!(matches!(v.decode(&[99]), Err(Error::TokenOutOfRange { id: 99, .. })));
    }

    #[test]
    fn truncation_rules() {
        let words: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
        let text = words.join(" ");
        let t = truncate_words(&text, 255);
        assert_eq!(t.split(' ').count(), 255);
        assert!(text.starts_with(&t));
        let ten = words[..10].join("  \n ");
        assert_eq!(truncate_words(&ten, 255), words[..10].join(" "));
        let t256 = words[..256].join(" ");
        assert_eq!(truncate_words(&t256, 255), words[..255].join(" "));
    }

    #[test]
    fn minimal_pair_layout() {
        let v = Vocabulary::build(&docs(&["x y"]), 100, 1).unwrap();
        let (x, y) = (v.id("x").unwrap(), v.id("y").unwrap());
        let p = v.encode_pair("x", "y", 8).unwrap();
        assert_eq!(p.ids, vec![CLS, x, SEP, y, SEP, PAD, PAD, PAD]);
        assert_eq!(p.segment_ids, vec![0, 0, 0, 1, 1, 0, 0, 0]);
        assert_eq!(p.attention_mask, vec![1, 1, 1, 1, 1, 0, 0, 0]);
        assert_eq!(p.trimmed().len(), 5);
        assert!(v.encode_pair("x", "!", 6).is_err());
        assert!(v.encode_pair("", "y", 8).is_err());
        assert!(v.encode_pair("x", "   ", 8).is_err());
    }

    #[test]
    fn long_pair_budget() {
        let words: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
        let text = words.join(" ");
        let v = Vocabulary::build(&docs(&[&text]), 1000, 1).unwrap();
        let p = v.encode_pair(&text, &text, 512).unwrap();
        let first_sep = p.ids.iter().position(|&i| i == SEP).unwrap();
        let second_sep = p.ids.iter().rposition(|&i| i == SEP).unwrap();
        // Length accounting: 1 + a + 1 + b + 1 with both sides capped at 254.
        let a = first_sep - 1;
        let b = second_sep - first_sep - 1;
        assert!(a <= 254 && b <= 254);
        assert_eq!((a, b), (254, 254));
        assert_eq!(p.real_len(), a + b + 3);
        assert!(p.real_len() <= 512);
        assert_eq!(p.len(), 512);
    }

    #[test]
    fn pair_symmetry_of_content() {
        let v = Vocabulary::build(&docs(&["a b c d e f"]), 100, 1).unwrap();
        let ab = v.encode_pair("a b", "c d e", 16).unwrap();
        let ba = v.encode_pair("c d e", "a b", 16).unwrap();
        let content = |p: &EncodedPair| {
            let mut c: Vec<usize> = p.ids.iter().copied().filter(|&i| !is_special(i)).collect();
            c.sort();
            c
        };
        assert_eq!(content(&ab), content(&ba));
        // segment B carries the trailing [SEP]
        assert_eq!(ab.segment_ids.iter().filter(|&&s| s == 1).count(), 4);
        assert_eq!(ba.segment_ids.iter().filter(|&&s| s == 1).count(), 3);
    }

    #[test]
    fn masking_extremes() {
        let v = Vocabulary::build(&docs(&["a b c d"]), 100, 1).unwrap();
        let p = v.encode_pair("a b", "c d", 10).unwrap();
        let none = mask_tokens(&p, MaskingConfig { rate: 0.0, bert_style: false }, v.len(), 1).unwrap();
        assert_eq!(none.input, p);
        assert_eq!(none.num_masked(), 0);
        let all = mask_tokens(&p, MaskingConfig { rate: 1.0, bert_style: false }, v.len(), 1).unwrap();
        assert_eq!(all.num_masked(), 4);
        for pos in eligible_positions(&p) {
            assert_eq!(all.input.ids[pos], MASK);
            assert_eq!(all.mlm_labels[pos], p.ids[pos] as i64);
        }
        assert!(mask_tokens(&p, MaskingConfig { rate: 1.5, bert_style: false }, v.len(), 1).is_err());
    }

    #[test]
    fn bert_style_keeps_labels_at_selected_positions() {
        let text: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        let v = Vocabulary::build(&docs(&[&text.join(" ")]), 1000, 1).unwrap();
        let seq: EncodedPair = v.encode(&text.join(" ")).into();
        let m = mask_tokens(&seq, MaskingConfig { rate: 1.0, bert_style: true }, v.len(), 3).unwrap();
        assert_eq!(m.num_masked(), 200);
        let masked = m.input.ids.iter().filter(|&&i| i == MASK).count();
        assert!(masked > 120 && masked < 190, "{masked}");
    }

    #[test]
    fn vocab_oracle_on_synthetic_corpus() {
        let corpus = crate::synth::art_corpus(&crate::synth::SynthConfig::default(), 100, 11);
        let v = Vocabulary::build(&corpus, 2000, 2).unwrap();
        assert!(v.len() <= 2000);
        let mut counts: HashMap<String, usize> = HashMap::new();
        for d in &corpus {
            for w in d.text.to_lowercase().split(|c: char| !c.is_alphanumeric()) {
                if !w.is_empty() {
                    *counts.entry(w.to_string()).or_default() += 1;
                }
            }
        }
        for t in &v.tokens()[NUM_SPECIAL..] {
            if t.chars().all(char::is_alphanumeric) {
                assert!(counts[t] >= 2, "{t}");
            }
        }
        let expected = counts.values().filter(|&&c| c >= 2).count();
        let alnum = v.tokens()[NUM_SPECIAL..].iter().filter(|t| t.chars().all(char::is_alphanumeric)).count();
        if v.len() < 2000 {
            assert_eq!(alnum, expected);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn truncate_idempotent(words in proptest::collection::vec("[a-z]{1,6}", 0..40), max in 1usize..30) {
                let text = words.join(" ");
                let once = truncate_words(&text, max);
                prop_assert_eq!(truncate_words(&once, max), once.clone());
                prop_assert!(once.split_whitespace().count() <= max);
            }

            #[test]
            fn pair_invariants(a in "[a-e ,.]{0,40}", b in "[a-e ,.]{0,40}", max_len in 7usize..40) {
                let v = Vocabulary::build(&docs(&["a b c"]), 100, 1).unwrap();
                let Ok(p) = v.encode_pair(&a, &b, max_len) else {
                    prop_assume!(false);
                    unreachable!()
                };
                prop_assert_eq!(p.len(), max_len);
                prop_assert_eq!(p.ids[0], CLS);
                let real = p.real_len();
                prop_assert_eq!(p.ids[..real].iter().filter(|&&i| i == SEP).count(), 2);
                prop_assert!(p.ids[real..].iter().all(|&i| i == PAD));
                prop_assert!(p.ids[..real].iter().all(|&i| i != PAD));
                let first_sep = p.ids.iter().position(|&i| i == SEP).unwrap();
                let switches = p.segment_ids[..real].windows(2).filter(|w| w[0] != w[1]).count();
                prop_assert_eq!(switches, 1);
                prop_assert_eq!(p.segment_ids[first_sep], 0);
                prop_assert_eq!(p.segment_ids[first_sep + 1], 1);
            }

            #[test]
            fn masking_never_touches_specials(seed in any::<u64>(), rate in 0.0f64..=1.0) {
                let v = Vocabulary::build(&docs(&["a b c d e"]), 100, 1).unwrap();
                let p = v.encode_pair("a b zz c", "d e", 16).unwrap();
                let m = mask_tokens(&p, MaskingConfig { rate, bert_style: false }, v.len(), seed).unwrap();
                for i in 0..p.len() {
                    if is_special(p.ids[i]) || p.attention_mask[i] == 0 {
                        prop_assert_eq!(m.input.ids[i], p.ids[i]);
                        prop_assert_eq!(m.mlm_labels[i], IGNORE);
                    } else if m.mlm_labels[i] != IGNORE {
                        prop_assert_eq!(m.input.ids[i], MASK);
                    }
                }
                prop_assert_eq!(m.clone(), mask_tokens(&p, MaskingConfig { rate, bert_style: false }, v.len(), seed).unwrap());
            }

            #[test]
            fn vocab_deterministic(texts in proptest::collection::vec("[a-d ]{1,20}", 1..6)) {
                let d: Vec<Document> = texts.iter().enumerate()
                    .map(|(i, t)| Document { doc_id: i.to_string(), text: t.clone() }).collect();
                let a = Vocabulary::build(&d, 8, 1).unwrap();
                let b = Vocabulary::build(&d, 8, 1).unwrap();
                prop_assert_eq!(a.tokens(), b.tokens());
                prop_assert!(a.len() <= 8);
            }

            #[test]
            fn decode_round_trip(words in proptest::collection::vec("[a-f]{1,4}", 0..20)) {
                let text = words.join(" ");
                let v = Vocabulary::build(&docs(&[&words.join(" "), "x"]), 1000, 1).unwrap();
                let e = v.encode(&text);
                prop_assert_eq!(v.decode(&e.ids).unwrap(), text);
            }
        }
    }
}

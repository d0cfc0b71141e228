//! Non-fine-tuned baselines: random guessing, static-embedding theme tagging
//! and contextual-embedding similarity linking.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data_io::{BiographyPair, Document};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, confusion_matrix, f1_score};
use crate::model::EncoderModel;
use crate::tokenizer::{is_special, normalize, truncate_words, EncodedPair, Vocabulary, CLS, SEP, TRUNCATE_WORDS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub theme: String,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThemeLexicon {
    themes: Vec<LexiconEntry>,
}

impl ThemeLexicon {
    /// Keywords are lowercased. Theme names must be unique and every theme
    /// needs at least one keyword.
    pub fn new(themes: Vec<(String, Vec<String>)>) -> Result<Self> {
        if themes.is_empty() {
            return Err(Error::InvalidArgument("theme lexicon is empty".into()));
        }
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(themes.len());
        for (theme, keywords) in themes {
            if !seen.insert(theme.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate theme {theme:?}")));
            }
            let keywords: Vec<String> = keywords
                .iter()
                .map(|k| k.trim().to_lowercase())
                .filter(|k| !k.is_empty())
                .collect();
            if keywords.is_empty() {
                return Err(Error::InvalidArgument(format!("theme {theme:?} has no keywords")));
            }
            entries.push(LexiconEntry { theme, keywords });
        }
        Ok(Self { themes: entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut themes = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: LexiconEntry = serde_json::from_str(line).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            themes.push((e.theme, e.keywords));
        }
        Self::new(themes)
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.themes
    }

    pub fn len(&self) -> usize {
        self.themes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.themes.is_empty()
    }
}

/// Each pair is labeled 0 with probability `p0`.
pub fn random_guess(pairs: &[BiographyPair], p0: f64, seed: u64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&p0) {
        return Err(Error::InvalidArgument(format!("p0 {p0} outside [0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pairs.iter().map(|_| u8::from(rng.gen::<f64>() >= p0)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StaticConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub min_count: usize,
    pub seed: u64,
}

impl Default for StaticConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            min_count: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticEmbeddings {
    pub dim: usize,
    index: HashMap<String, usize>,
    vectors: Vec<Vec<f32>>,
}

impl StaticEmbeddings {
    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.index.get(word).map(|&i| self.vectors[i].as_slice())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

fn is_word(token: &str) -> bool {
    token.chars().all(char::is_alphanumeric)
}

fn words_of(text: &str) -> Vec<String> {
    normalize(text).into_iter().filter(|w| is_word(w)).collect()
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Skip-gram with negative sampling. Returns the embeddings and the mean
/// per-update loss of each epoch.
pub fn train_static_embeddings(corpus: &[Document], config: &StaticConfig) -> Result<(StaticEmbeddings, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("embedding corpus is empty".into()));
    }
    if config.dim == 0 || config.window == 0 || config.epochs == 0 {
        return Err(Error::InvalidConfig("dim, window and epochs must be positive".into()));
    }
    let docs: Vec<Vec<String>> = corpus.iter().map(|d| words_of(&d.text)).collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in docs.iter().flatten() {
        *counts.entry(w.as_str()).or_default() += 1;
    }
    let vocab: Vec<&str> = counts
        .iter()
        .filter(|(_, &c)| c >= config.min_count)
        .map(|(w, _)| *w)
        .collect();
    if vocab.is_empty() {
        return Err(Error::InvalidArgument("no words reach min_count".into()));
    }
    let index: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, w)| (w.to_string(), i)).collect();
    let noise = WeightedIndex::new(vocab.iter().map(|w| (counts[w] as f64).powf(0.75)))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let sentences: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| d.iter().filter_map(|w| index.get(w).copied()).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.dim;
    let init = Normal::new(0.0f32, 0.5 / dim as f32).expect("valid normal");
    let mut input: Vec<Vec<f32>> = (0..vocab.len()).map(|_| (0..dim).map(|_| init.sample(&mut rng)).collect()).collect();
    let mut output = vec![vec![0f32; dim]; vocab.len()];

    let total_tokens: usize = sentences.iter().map(Vec::len).sum::<usize>().max(1);
    let total_steps = (total_tokens * config.epochs) as f64;
    let mut step = 0usize;
    let mut losses = Vec::with_capacity(config.epochs);
    let mut grad = vec![0f32; dim];
    for _ in 0..config.epochs {
        let (mut loss_sum, mut updates) = (0f64, 0usize);
        for sent in &sentences {
            for (pos, &center) in sent.iter().enumerate() {
                let lr = (config.learning_rate * (1.0 - step as f64 / total_steps)).max(config.learning_rate * 1e-4) as f32;
                step += 1;
                let reach = rng.gen_range(1..=config.window);
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(sent.len() - 1);
                for (ctx_pos, &context) in sent.iter().enumerate().take(hi + 1).skip(lo) {
                    if ctx_pos == pos {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    for n in 0..=config.negatives {
                        let (target, label) = if n == 0 {
                            (context, 1.0f32)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let out = &mut output[target];
                        let dot: f32 = input[center].iter().zip(out.iter()).map(|(a, b)| a * b).sum();
                        let s = sigmoid(dot);
                        loss_sum -= if label == 1.0 {
                            (s.max(1e-7) as f64).ln()
                        } else {
                            ((1.0 - s).max(1e-7) as f64).ln()
                        };
                        let g = lr * (label - s);
                        for k in 0..dim {
                            grad[k] += g * out[k];
                            out[k] += g * input[center][k];
                        }
                    }
                    for k in 0..dim {
                        input[center][k] += grad[k];
                    }
                    updates += 1;
                }
            }
        }
        losses.push(if updates == 0 { 0.0 } else { loss_sum / updates as f64 });
    }
    if input.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("static embeddings".into()));
    }
    Ok((
        StaticEmbeddings {
            dim,
            index,
            vectors: input,
        },
        losses,
    ))
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("dimension mismatch {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

/// Themes whose keywords occur verbatim in `bio`, or whose keyword vectors
/// reach `threshold` cosine similarity with some biography word.
pub fn tag_biography(
    embeddings: &StaticEmbeddings,
    lexicon: &ThemeLexicon,
    bio: &str,
    threshold: f64,
) -> Result<BTreeSet<String>> {
    if lexicon.is_empty() {
        return Err(Error::InvalidArgument("theme lexicon is empty".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0,1]")));
    }
    let words: BTreeSet<String> = words_of(bio).into_iter().collect();
    let vectors: Vec<&[f32]> = words.iter().filter_map(|w| embeddings.get(w)).collect();
    let mut tags = BTreeSet::new();
    'themes: for entry in lexicon.entries() {
        for kw in &entry.keywords {
            if words.contains(kw) {
                tags.insert(entry.theme.clone());
                continue 'themes;
            }
        }
        for kw in &entry.keywords {
            let Some(kv) = embeddings.get(kw) else { continue };
            for v in &vectors {
                if cosine(kv, v).unwrap_or(0.0) >= threshold {
                    tags.insert(entry.theme.clone());
                    continue 'themes;
                }
            }
        }
    }
    Ok(tags)
}

/// 1 iff the tag sets intersect.
pub fn static_link(tags_a: &BTreeSet<String>, tags_b: &BTreeSet<String>) -> u8 {
    u8::from(!tags_a.is_disjoint(tags_b))
}

/// Static baseline predictions for every pair.
pub fn static_predictions(
    embeddings: &StaticEmbeddings,
    lexicon: &ThemeLexicon,
    pairs: &[BiographyPair],
    threshold: f64,
) -> Result<Vec<u8>> {
    pairs
        .iter()
        .map(|p| {
            let a = tag_biography(embeddings, lexicon, &p.bio_a, threshold)?;
            let b = tag_biography(embeddings, lexicon, &p.bio_b, threshold)?;
            Ok(static_link(&a, &b))
        })
        .collect()
}

/// Mean last-layer hidden vector over the biography's non-special tokens.
pub fn contextual_embedding(model: &EncoderModel<f32>, vocab: &Vocabulary, bio: &str) -> Result<Vec<f32>> {
    let mut ids = vocab.encode(&truncate_words(bio, TRUNCATE_WORDS)).ids;
    ids.truncate(model.config.max_positions.saturating_sub(2));
    if !ids.iter().any(|&i| !is_special(i)) {
        return Err(Error::InvalidArgument("biography has no known tokens".into()));
    }
    let mut seq = Vec::with_capacity(ids.len() + 2);
    seq.push(CLS);
    seq.extend_from_slice(&ids);
    seq.push(SEP);
    let input = EncodedPair {
        segment_ids: vec![0; seq.len()],
        attention_mask: vec![1; seq.len()],
        ids: seq,
    };
    let hidden = model.forward_encoder(&input)?;
    let mut mean = vec![0f64; hidden.cols];
    let mut n = 0usize;
    for (r, &id) in input.ids.iter().enumerate() {
        if is_special(id) {
            continue;
        }
        n += 1;
        for (m, &h) in mean.iter_mut().zip(hidden.row(r)) {
            *m += h as f64;
        }
    }
    Ok(mean.into_iter().map(|m| (m / n as f64) as f32).collect())
}

/// 1 iff cosine similarity reaches `threshold`.
pub fn similarity_link(a: &[f32], b: &[f32], threshold: f64) -> Result<u8> {
    Ok(u8::from(cosine(a, b)? >= threshold))
}

/// Cosine similarity of the two biographies of each pair.
pub fn contextual_similarities(model: &EncoderModel<f32>, vocab: &Vocabulary, pairs: &[BiographyPair]) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    pairs
        .par_iter()
        .map(|p| {
            let a = contextual_embedding(model, vocab, &p.bio_a)?;
            let b = contextual_embedding(model, vocab, &p.bio_b)?;
            cosine(&a, &b)
        })
        .collect()
}

/// Candidate thresholds 0.05, 0.10, ..., 0.95.
pub fn threshold_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Grid threshold maximising F1 of `similarity >= t` against `labels`;
/// the smallest threshold wins ties.
pub fn calibrate_threshold(similarities: &[f64], labels: &[u8]) -> Result<f64> {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in threshold_grid() {
        let preds: Vec<u8> = similarities.iter().map(|&s| u8::from(s >= t)).collect();
        let f1 = f1_score(&confusion_matrix(&preds, labels)?);
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    Ok(best.1)
}

/// Whole-dataset accuracy and F1 of hard predictions.
pub fn evaluate_predictions(predictions: &[u8], pairs: &[BiographyPair]) -> Result<(f64, f64)> {
    let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    let cm = confusion_matrix(predictions, &labels)?;
    Ok((accuracy(&cm)?, f1_score(&cm)))
}

//! Synthetic corpora and labeled pairs for desk-scale experiments.
//!
//! The world has a fixed generic vocabulary shared by every corpus, a set of
//! art themes, each owning a pool of theme words that only appear in art
//! texts and biographies, and a pool of distractor pseudo-words that appear
//! in biographies only. Pair labels depend on theme words alone: either "both
//! artists are affiliated with a theme" ([`affiliation_pairs`]) or "both share
//! their theme" ([`theme_pairs`]).

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::ThemeLexicon;
use crate::data_io::{BiographyPair, Document};

const NOUNS: &[&str] = &[
    "house", "city", "river", "garden", "street", "school", "friend", "family", "window", "table", "road",
    "market", "morning", "evening", "winter", "summer", "village", "station", "letter", "book", "teacher",
    "child", "door", "kitchen", "field", "train", "bridge", "harbor", "office", "year",
];
const VERBS: &[&str] = &[
    "visits", "builds", "finds", "leaves", "opens", "watches", "remembers", "follows", "reaches", "crosses",
    "keeps", "carries", "writes", "reads", "shares", "moves",
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "small", "bright", "long", "busy", "warm", "cold", "early", "late", "green", "narrow",
    "open", "distant",
];
const CITIES: &[&str] = &[
    "paris", "berlin", "lagos", "beijing", "london", "tokyo", "lima", "cairo", "seoul", "oslo", "dakar", "mumbai",
];
const THEME_NAMES: &[&str] = &[
    "landscape", "identity", "memory", "migration", "spirituality", "technology", "body", "politics",
];
// Everyday themes whose keywords never occur in synthetic text.
const EXTRA_LEXICON_THEMES: &[(&str, &[&str])] = &[
    ("nature", &["tree", "flower", "animal", "ocean"]),
    ("family", &["mother", "father", "sibling"]),
    ("childhood", &["toy", "playground", "infancy"]),
    ("travel", &["journey", "voyage", "passport"]),
    ("abstraction", &["abstract", "geometry", "colour"]),
    ("portraiture", &["portrait", "face", "likeness"]),
    ("history", &["history", "archive", "war"]),
    ("light", &["light", "shadow", "glow"]),
    ("music", &["music", "rhythm", "song"]),
    ("religion", &["faith", "ritual", "temple"]),
    ("labour", &["work", "factory", "craft"]),
    ("sea", &["sea", "wave", "shore"]),
];
const SYLLABLE_CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const SYLLABLE_VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_themes: usize,
    pub words_per_theme: usize,
    /// Theme words drawn from the artist's own theme per biography.
    pub theme_words_per_bio: usize,
    /// Words drawn from other themes per biography.
    pub noise_words_per_bio: usize,
    /// Filler sentences per biography.
    pub filler_sentences: usize,
    /// Fraction of art-corpus sentences that carry theme words.
    pub art_theme_density: f64,
    /// Keywords per world theme in the generated lexicon.
    pub lexicon_keywords: usize,
    /// Extra distractor words per biography, on top of the ones standing in
    /// for theme words in unaffiliated biographies.
    pub distractor_words_per_bio: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_themes: 4,
            words_per_theme: 100,
            theme_words_per_bio: 4,
            noise_words_per_bio: 1,
            filler_sentences: 2,
            art_theme_density: 0.8,
            lexicon_keywords: 30,
            distractor_words_per_bio: 0,
        }
    }
}

/// Fixed vocabulary of a synthetic world.
#[derive(Debug, Clone)]
pub struct World {
    pub config: SynthConfig,
    pub theme_names: Vec<String>,
    /// Theme words; index 0 of each list is the theme name itself.
    pub theme_words: Vec<Vec<String>>,
    /// Biography-only pseudo-words, as many as there are theme words. They
    /// never occur in a corpus, so pretraining cannot tell them apart from
    /// theme words.
    pub distractors: Vec<String>,
}

impl World {
    pub fn new(config: &SynthConfig) -> Self {
        assert!(config.num_themes >= 2 && config.num_themes <= THEME_NAMES.len());
        assert!(config.words_per_theme >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_a27);
        let mut taken: HashSet<String> = NOUNS
            .iter()
            .chain(VERBS)
            .chain(ADJECTIVES)
            .chain(CITIES)
            .chain(THEME_NAMES)
            .map(|s| s.to_string())
            .collect();
        let theme_names: Vec<String> = THEME_NAMES[..config.num_themes].iter().map(|s| s.to_string()).collect();
        let theme_words: Vec<Vec<String>> = theme_names
            .iter()
            .map(|name| {
                let mut words = vec![name.clone()];
                while words.len() < config.words_per_theme {
                    let w = pseudo_word(&mut rng);
                    if taken.insert(w.clone()) {
                        words.push(w);
                    }
                }
                words
            })
            .collect();
        let pool = config.num_themes * config.words_per_theme;
        let mut distractors = Vec::with_capacity(pool);
        while distractors.len() < pool {
            let w = pseudo_word(&mut rng);
            if taken.insert(w.clone()) {
                distractors.push(w);
            }
        }
        Self {
            config: config.clone(),
            theme_names,
            theme_words,
            distractors,
        }
    }

    fn filler_sentence(&self, rng: &mut ChaCha8Rng) -> String {
        let n1 = NOUNS.choose(rng).unwrap();
        let n2 = NOUNS.choose(rng).unwrap();
        let v = VERBS.choose(rng).unwrap();
        let a = ADJECTIVES.choose(rng).unwrap();
        format!("the {n1} {v} the {a} {n2} .")
    }

    /// Sentence mixing filler structure with the given theme words.
    fn theme_sentence(&self, rng: &mut ChaCha8Rng, words: &[String]) -> String {
        let n1 = NOUNS.choose(rng).unwrap();
        let v = VERBS.choose(rng).unwrap();
        format!("the {n1} {v} {} .", words.join(" and "))
    }

    fn distractor(&self, rng: &mut ChaCha8Rng) -> String {
        self.distractors.choose(rng).expect("distractor pool is empty").clone()
    }

    fn theme_word(&self, rng: &mut ChaCha8Rng, theme: usize) -> String {
        self.theme_words[theme].choose(rng).unwrap().clone()
    }

    /// Themed biographies draw from their theme (plus noise from other
    /// themes); unaffiliated ones draw the same number of distractors.
    fn biography(&self, rng: &mut ChaCha8Rng, theme: Option<usize>) -> String {
        let cfg = &self.config;
        let mut words: Vec<String> = Vec::new();
        match theme {
            Some(theme) => {
                words.extend((0..cfg.theme_words_per_bio).map(|_| self.theme_word(rng, theme)));
                for _ in 0..cfg.noise_words_per_bio {
                    let other = loop {
                        let t = rng.gen_range(0..cfg.num_themes);
                        if t != theme {
                            break t;
                        }
                    };
                    words.push(self.theme_word(rng, other));
                }
            }
            None => {
                let n = cfg.theme_words_per_bio + cfg.noise_words_per_bio;
                words.extend((0..n).map(|_| self.distractor(rng)));
            }
        }
        words.extend((0..cfg.distractor_words_per_bio).map(|_| self.distractor(rng)));
        words.shuffle(rng);
        let year = rng.gen_range(1950..2000);
        let city = CITIES.choose(rng).unwrap();
        let mut sentences = vec![format!("born in {year} in {city} .")];
        let mut art: Vec<String> = words.chunks(2).map(|c| self.theme_sentence(rng, c)).collect();
        for _ in 0..cfg.filler_sentences {
            art.push(self.filler_sentence(rng));
        }
        art.shuffle(rng);
        sentences.extend(art);
        sentences.join(" ")
    }

    /// Lexicon listing the first `lexicon_keywords` words of each world
    /// theme alongside everyday themes that never match.
    pub fn lexicon(&self) -> ThemeLexicon {
        let mut themes: Vec<(String, Vec<String>)> = self
            .theme_names
            .iter()
            .zip(&self.theme_words)
            .map(|(name, words)| (name.clone(), words[..self.config.lexicon_keywords.clamp(1, words.len())].to_vec()))
            .collect();
        themes.extend(
            EXTRA_LEXICON_THEMES
                .iter()
                .map(|(t, k)| (t.to_string(), k.iter().map(|s| s.to_string()).collect())),
        );
        ThemeLexicon::new(themes).expect("static lexicon is valid")
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*SYLLABLE_CONSONANTS.choose(rng).unwrap());
        w.push(*SYLLABLE_VOWELS.choose(rng).unwrap());
    }
    w
}

/// Everyday text without any theme words.
pub fn generic_corpus(config: &SynthConfig, n_docs: usize, seed: u64) -> Vec<Document> {
    let world = World::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|i| {
            let n = rng.gen_range(3..7);
            let text = (0..n).map(|_| world.filler_sentence(&mut rng)).collect::<Vec<_>>().join(" ");
            Document {
                doc_id: format!("generic-{i:04}"),
                text,
            }
        })
        .collect()
}

/// Art articles, each about one theme.
pub fn art_corpus(config: &SynthConfig, n_docs: usize, seed: u64) -> Vec<Document> {
    let world = World::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|i| {
            let theme = i % config.num_themes;
            let n = rng.gen_range(4..8);
            let text = (0..n)
                .map(|_| {
                    if rng.gen_bool(config.art_theme_density.clamp(0.0, 1.0)) {
                        let k = rng.gen_range(2..5);
                        let words: Vec<String> = (0..k).map(|_| world.theme_word(&mut rng, theme)).collect();
                        world.theme_sentence(&mut rng, &words)
                    } else {
                        world.filler_sentence(&mut rng)
                    }
                })
                .collect::<Vec<_>>()
                .join(" ");
            Document {
                doc_id: format!("art-{i:04}"),
                text,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Artist {
    pub id: String,
    pub theme: usize,
    pub bio: String,
}

pub fn artists(config: &SynthConfig, n_artists: usize, seed: u64) -> Vec<Artist> {
    let world = World::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_artists)
        .map(|i| {
            let theme = i % config.num_themes;
            Artist {
                id: format!("artist-{i:03}"),
                theme,
                bio: world.biography(&mut rng, Some(theme)),
            }
        })
        .collect()
}

/// Balanced pairs over distinct artist pairs; label 1 iff same theme.
pub fn theme_pairs(config: &SynthConfig, n_artists: usize, n_pairs: usize, seed: u64) -> Vec<BiographyPair> {
    let roster = artists(config, n_artists, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut used = BTreeSet::new();
    let mut pairs = Vec::with_capacity(n_pairs);
    let max_attempts = n_pairs * 1000;
    let mut attempts = 0;
    while pairs.len() < n_pairs {
        attempts += 1;
        assert!(attempts < max_attempts, "not enough distinct artist pairs");
        let want = (pairs.len() % 2) as u8;
        let i = rng.gen_range(0..roster.len());
        let j = rng.gen_range(0..roster.len());
        if i == j || used.contains(&(i.min(j), i.max(j))) {
            continue;
        }
        let label = (roster[i].theme == roster[j].theme) as u8;
        if label != want {
            continue;
        }
        used.insert((i.min(j), i.max(j)));
        pairs.push(BiographyPair {
            artist_a: roster[i].id.clone(),
            artist_b: roster[j].id.clone(),
            bio_a: roster[i].bio.clone(),
            bio_b: roster[j].bio.clone(),
            label,
        });
    }
    pairs
}

/// Balanced pairs of fresh artists; label 1 iff both artists are
/// affiliated with a theme. Negatives mix one or two unaffiliated artists.
pub fn affiliation_pairs(config: &SynthConfig, n_pairs: usize, seed: u64) -> Vec<BiographyPair> {
    let world = World::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_pairs)
        .map(|i| {
            let label = (i % 2) as u8;
            let (aff_a, aff_b) = match (label, rng.gen_range(0..3)) {
                (1, _) => (true, true),
                (_, 0) => (true, false),
                (_, 1) => (false, true),
                _ => (false, false),
            };
            let mut bio = |affiliated: bool| {
                let theme = affiliated.then(|| rng.gen_range(0..config.num_themes));
                world.biography(&mut rng, theme)
            };
            let bio_a = bio(aff_a);
            let bio_b = bio(aff_b);
            BiographyPair {
                artist_a: format!("artist-{i:04}-a"),
                artist_b: format!("artist-{i:04}-b"),
                bio_a,
                bio_b,
                label,
            }
        })
        .collect()
}

pub const PLANTED_KEYWORD: &str = "vermilion";

/// Pairs whose label is 1 exactly when one of the biographies contains
/// [`PLANTED_KEYWORD`]. Every pair uses two fresh artists.
pub fn planted_pairs(n_pairs: usize, seed: u64) -> Vec<BiographyPair> {
    let world = World::new(&SynthConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_pairs)
        .map(|i| {
            let label = (i % 2) as u8;
            let mut bio = || {
                (0..2)
                    .map(|_| world.filler_sentence(&mut rng))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let mut bio_a = bio();
            let mut bio_b = bio();
            if label == 1 {
                let target = if rng.gen_bool(0.5) { &mut bio_a } else { &mut bio_b };
                *target = format!("{target} the {PLANTED_KEYWORD} {} .", NOUNS.choose(&mut rng).unwrap());
            }
            BiographyPair {
                artist_a: format!("planted-{i:04}-a"),
                artist_b: format!("planted-{i:04}-b"),
                bio_a,
                bio_b,
                label,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theme_words_stay_out_of_generic_text() {
        let cfg = SynthConfig::default();
        let world = World::new(&cfg);
        let art: HashSet<&str> = world.theme_words.iter().flatten().map(String::as_str).collect();
        for d in generic_corpus(&cfg, 50, 1) {
            assert!(d.text.split_whitespace().all(|w| !art.contains(w)));
        }
        let n_art_tokens: usize = art_corpus(&cfg, 20, 1)
            .iter()
            .map(|d| d.text.split_whitespace().filter(|w| art.contains(w)).count())
            .sum();
        assert!(n_art_tokens > 0);
    }

    #[test]
    fn pairs_are_balanced_and_distinct() {
        let pairs = theme_pairs(&SynthConfig::default(), 40, 100, 5);
        assert_eq!(pairs.iter().filter(|p| p.label == 1).count(), 50);
        let keys: HashSet<_> = pairs.iter().map(BiographyPair::key).collect();
        assert_eq!(keys.len(), pairs.len());
        assert_eq!(theme_pairs(&SynthConfig::default(), 40, 100, 5), pairs);
    }

    #[test]
    fn planted_label_matches_keyword() {
        for p in planted_pairs(40, 2) {
            let has = p.bio_a.contains(PLANTED_KEYWORD) || p.bio_b.contains(PLANTED_KEYWORD);
            assert_eq!(has, p.label == 1);
        }
    }

    #[test]
    fn affiliation_label_tracks_theme_words() {
        let cfg = SynthConfig::default();
        let world = World::new(&cfg);
        let art: HashSet<&str> = world.theme_words.iter().flatten().map(String::as_str).collect();
        let themed = |bio: &str| bio.split_whitespace().any(|w| art.contains(w));
        let pairs = affiliation_pairs(&cfg, 120, 4);
        assert_eq!(pairs.iter().filter(|p| p.label == 1).count(), 60);
        let keys: HashSet<_> = pairs.iter().map(BiographyPair::key).collect();
        assert_eq!(keys.len(), pairs.len());
        for p in &pairs {
            assert_eq!(p.label == 1, themed(&p.bio_a) && themed(&p.bio_b));
        }
        assert_eq!(affiliation_pairs(&cfg, 120, 4), pairs);
    }

    #[test]
    fn distractors_and_everyday_keywords_stay_out_of_corpora() {
        let cfg = SynthConfig::default();
        let world = World::new(&cfg);
        let mut banned: HashSet<&str> = world.distractors.iter().map(String::as_str).collect();
        banned.extend(EXTRA_LEXICON_THEMES.iter().flat_map(|(_, k)| k.iter().copied()));
        let docs = generic_corpus(&cfg, 50, 1).into_iter().chain(art_corpus(&cfg, 50, 2));
        for d in docs {
            assert!(d.text.split_whitespace().all(|w| !banned.contains(w)), "{}", d.text);
        }
        let lex = world.lexicon();
        assert_eq!(lex.entries()[0].keywords.len(), cfg.lexicon_keywords);
    }
}

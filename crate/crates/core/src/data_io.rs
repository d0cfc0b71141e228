//! Corpus and labeled-pair loading, dataset statistics and k-fold splits.
//!
//! Both file kinds are JSON Lines: one object per line with named fields.
//! Blank lines are skipped; anything else that fails to parse is reported
//! with its 1-based line number.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

/// One annotated record: two artists, their biographies and whether they
/// are connected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiographyPair {
    pub artist_a: String,
    pub artist_b: String,
    pub bio_a: String,
    pub bio_b: String,
    pub label: u8,
}

impl BiographyPair {
    /// Order-independent identity of the artist pair.
    pub fn key(&self) -> (String, String) {
        pair_key(&self.artist_a, &self.artist_b)
    }
}

pub(crate) fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count_total: usize,
    pub count_label0: usize,
    pub count_label1: usize,
    pub word_count_total: usize,
    pub word_count_label0: usize,
    pub word_count_label1: usize,
}

/// Assignment of every record index to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub assignment: Vec<usize>,
}

/// Index sets for one cross-validation round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold(&self, f: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == f)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    /// Test = fold `f`, validation = fold `(f + 1) % k`, train = the rest.
    pub fn split(&self, f: usize) -> FoldSplit {
        let val_fold = (f + 1) % self.k;
        let mut split = FoldSplit {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (i, &a) in self.assignment.iter().enumerate() {
            if a == f {
                split.test.push(i);
            } else if a == val_fold {
                split.val.push(i);
            } else {
                split.train.push(i);
            }
        }
        split
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(raw
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn malformed(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn string_field(obj: &serde_json::Map<String, Value>, name: &str) -> std::result::Result<String, String> {
    match obj.get(name) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(format!("field `{name}` must be a string")),
        None => Err(format!("missing field `{name}`")),
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let mut docs = Vec::new();
    for (line, raw) in read_lines(path)? {
        let doc: Document = serde_json::from_str(&raw).map_err(|e| malformed(path, line, e.to_string()))?;
        if doc.text.trim().is_empty() {
            return Err(malformed(path, line, "empty text field"));
        }
        docs.push(doc);
    }
    Ok(docs)
}

fn parse_label(v: Option<&Value>) -> std::result::Result<u8, String> {
    let n = match v {
        None => return Err("missing field `label`".into()),
        Some(Value::Number(n)) => n.as_i64().ok_or_else(|| format!("label {n} is not an integer"))?,
        Some(Value::String(s)) => s
            .trim()
            .parse::<i64>()
            .map_err(|_| format!("label {s:?} is not an integer"))?,
        Some(other) => return Err(format!("label {other} is not an integer")),
    };
    match n {
        0 | 1 => Ok(n as u8),
        _ => Err(format!("label {n} outside {{0,1}}")),
    }
}

pub(crate) fn parse_pair(raw: &str) -> std::result::Result<BiographyPair, String> {
    let value: Value = serde_json::from_str(raw).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("record is not an object")?;
    let pair = BiographyPair {
        artist_a: string_field(obj, "artist_a")?,
        artist_b: string_field(obj, "artist_b")?,
        bio_a: string_field(obj, "bio_a")?,
        bio_b: string_field(obj, "bio_b")?,
        label: parse_label(obj.get("label"))?,
    };
    if pair.bio_a.trim().is_empty() || pair.bio_b.trim().is_empty() {
        return Err("empty biography".into());
    }
    if pair.artist_a == pair.artist_b {
        return Err(format!("artist {:?} paired with itself", pair.artist_a));
    }
    Ok(pair)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<BiographyPair>> {
    let path = path.as_ref();
    read_lines(path)?
        .into_iter()
        .map(|(line, raw)| parse_pair(&raw).map_err(|m| malformed(path, line, m)))
        .collect()
}

/// Writes records as JSON Lines.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn compute_stats(pairs: &[BiographyPair]) -> DatasetStats {
    let mut stats = DatasetStats::default();
    for p in pairs {
        let words = word_count(&p.bio_a) + word_count(&p.bio_b);
        stats.count_total += 1;
        stats.word_count_total += words;
        if p.label == 0 {
            stats.count_label0 += 1;
            stats.word_count_label0 += words;
        } else {
            stats.count_label1 += 1;
            stats.word_count_label1 += words;
        }
    }
    stats
}

/// Seeded permutation of the indices dealt round-robin into `k` folds.
pub fn kfold_split<T>(records: &[T], k: usize, seed: u64) -> Result<FoldAssignment> {
    let n_records = records.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if n_records < k {
        return Err(Error::InvalidArgument(format!(
            "{n_records} records cannot fill {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_records).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n_records];
    for (slot, &idx) in order.iter().enumerate() {
        assignment[idx] = slot % k;
    }
    Ok(FoldAssignment { k, assignment })
}

/// Fails if any artist pair occurs in both index sets.
pub fn check_disjoint(pairs: &[BiographyPair], a: &[usize], b: &[usize], what: &str) -> Result<()> {
    let seen: HashSet<usize> = a.iter().copied().collect();
    if let Some(i) = b.iter().find(|i| seen.contains(i)) {
        return Err(Error::Leakage(format!("record {i} appears in both {what}")));
    }
    let keys: HashSet<(String, String)> = a.iter().map(|&i| pairs[i].key()).collect();
    if let Some(&i) = b.iter().find(|&&i| keys.contains(&pairs[i].key())) {
        let (x, y) = pairs[i].key();
        return Err(Error::Leakage(format!("artist pair ({x}, {y}) appears in both {what}")));
    }
    Ok(())
}

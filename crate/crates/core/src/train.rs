//! Losses, optimizers and the two training loops: masked-LM pretraining and
//! pair fine-tuning with best-epoch selection on validation F1.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, PROB_CLAMP};
use crate::checkpoint::{Checkpoint, Stage};
use crate::data_io::{check_disjoint, BiographyPair, Document};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, confusion_matrix, f1_score, predict_label};
use crate::model::EncoderModel;
use crate::tokenizer::{mask_tokens, EncodedPair, MaskedBatch, MaskingConfig, Vocabulary, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Token budget per packed sequence.
    pub max_len: usize,
    pub mask_rate: f64,
    pub bert_style_masking: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            epochs: 3,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            max_len: 512,
            mask_rate: 0.15,
            bert_style_masking: false,
        }
    }
}

impl TrainConfig {
    pub fn pretraining() -> Self {
        Self::default()
    }

    pub fn finetuning() -> Self {
        Self {
            epochs: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.max_len < 7 {
            return Err(Error::InvalidConfig(format!("max_len {} below minimum of 7", self.max_len)));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::InvalidConfig(format!("mask_rate {} outside [0,1]", self.mask_rate)));
        }
        Ok(())
    }

    fn masking(&self) -> MaskingConfig {
        MaskingConfig {
            rate: self.mask_rate,
            bert_style: self.bert_style_masking,
        }
    }
}

/// `-[y log p + (1 - y) log(1 - p)]` with `p` clamped away from 0 and 1.
pub fn pair_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Sum of [`pair_loss`] over `(probability, label)` pairs.
pub fn batch_pair_loss(items: &[(f64, u8)]) -> f64 {
    items.iter().map(|&(p, y)| pair_loss(p, y)).sum()
}

/// Sum over labelled positions of `-log softmax(logits[row])[label]`.
pub fn mlm_loss<T: Real>(logits: &Tensor<T>, labels: &[i64]) -> Result<f64> {
    if labels.len() != logits.rows {
        return Err(Error::InvalidArgument("one label per logits row required".into()));
    }
    let mut total = 0.0;
    let mut any = false;
    for (r, &label) in labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        any = true;
        let row: Vec<f64> = logits.row(r).iter().map(|x| x.as_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[label as usize];
    }
    if !any {
        return Err(Error::InvalidArgument("no masked positions; resample the mask".into()));
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    step: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(model: &EncoderModel<T>) -> Self {
        Self {
            step: 0,
            moments: model
                .params
                .iter()
                .map(|p| (vec![T::zero(); p.tensor.data.len()], vec![T::zero(); p.tensor.data.len()]))
                .collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Applies one update. Nothing is modified when any gradient is non-finite.
pub fn optimizer_step<T: Real>(
    model: &mut EncoderModel<T>,
    gradients: &[Tensor<T>],
    config: &TrainConfig,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if gradients.len() != model.params.len() {
        return Err(Error::InvalidArgument("one gradient per parameter tensor required".into()));
    }
    for (p, g) in model.params.iter().zip(gradients) {
        if g.shape() != p.tensor.shape() {
            return Err(Error::InvalidArgument(format!("gradient shape mismatch for {}", p.name)));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    let lr = T::of(config.learning_rate);
    state.step += 1;
    match config.optimizer {
        OptimizerKind::Sgd => {
            for (p, g) in model.params.iter_mut().zip(gradients) {
                for (w, &d) in p.tensor.data.iter_mut().zip(&g.data) {
                    *w -= lr * d;
                }
            }
        }
        OptimizerKind::Adam => {
            let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
            let t = state.step as i32;
            let c1 = T::one() - T::of(ADAM_BETA1.powi(t));
            let c2 = T::one() - T::of(ADAM_BETA2.powi(t));
            let eps = T::of(ADAM_EPS);
            for ((p, g), (m, v)) in model.params.iter_mut().zip(gradients).zip(state.moments.iter_mut()) {
                for i in 0..g.data.len() {
                    let d = g.data[i];
                    m[i] = b1 * m[i] + (T::one() - b1) * d;
                    v[i] = b2 * v[i] + (T::one() - b2) * d * d;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    p.tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_f1: Option<f64>,
}

/// Plain-text epoch log, one tab-separated record per epoch.
pub fn format_epoch_log(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch\ttrain_loss\tval_accuracy\tval_f1\n");
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
    for e in log {
        let _ = writeln!(out, "{}\t{:.6}\t{}\t{}", e.epoch, e.train_loss, fmt(e.val_accuracy), fmt(e.val_f1));
    }
    out
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn gradients_of(model: &EncoderModel<f32>, tape: &Tape<f32>, bound: &crate::model::Bound, loss: crate::autodiff::Var) -> Result<Vec<Tensor<f32>>> {
    let grads = tape.backward(loss)?;
    Ok(bound
        .vars
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| {
            let g = grads.get(v);
            debug_assert_eq!(g.shape(), p.tensor.shape());
            g
        })
        .collect())
}

fn check_vocab(model: &EncoderModel<f32>, vocab: &Vocabulary) -> Result<()> {
    if model.config.vocab_size != vocab.len() {
        return Err(Error::InvalidConfig(format!(
            "model expects a vocabulary of {} tokens, got {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

/// Masks `seq`, retrying with fresh seeds when nothing was selected.
fn mask_nonempty(seq: &EncodedPair, masking: MaskingConfig, vocab_size: usize, seed: u64) -> Result<Option<MaskedBatch>> {
    for attempt in 0..32 {
        let m = mask_tokens(seq, masking, vocab_size, mix_seed(&[seed, attempt]))?;
        if m.num_masked() > 0 {
            return Ok(Some(m));
        }
    }
    Ok(None)
}

fn masked_rows(batch: &MaskedBatch) -> (Vec<usize>, Vec<Option<usize>>) {
    batch
        .mlm_labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != IGNORE)
        .map(|(i, &l)| (i, Some(l as usize)))
        .unzip()
}

fn mlm_sequences(model: &EncoderModel<f32>, vocab: &Vocabulary, corpus: &[Document], config: &TrainConfig) -> Vec<EncodedPair> {
    let max_len = config.max_len.min(model.config.max_positions);
    corpus
        .iter()
        .flat_map(|d| vocab.encode_document(&d.text, max_len))
        .collect()
}

/// Per-sequence masked-LM loss averaged over `docs`, with deterministic masks.
pub fn mlm_eval_loss(model: &EncoderModel<f32>, vocab: &Vocabulary, docs: &[Document], config: &TrainConfig, seed: u64) -> Result<f64> {
    check_vocab(model, vocab)?;
    let seqs = mlm_sequences(model, vocab, docs, config);
    let losses: Vec<Option<f64>> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, seq)| -> Result<Option<f64>> {
            let Some(m) = mask_nonempty(seq, config.masking(), vocab.len(), mix_seed(&[seed, i as u64]))? else {
                return Ok(None);
            };
            Ok(Some(mlm_loss(&model.forward_mlm(&m)?, &m.mlm_labels)?))
        })
        .collect::<Result<_>>()?;
    let valid: Vec<f64> = losses.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument("no maskable positions in evaluation corpus".into()));
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Masked-LM training over `corpus`; each epoch reshuffles and remasks.
pub fn pretrain_mlm(
    model: &EncoderModel<f32>,
    vocab: &Vocabulary,
    corpus: &[Document],
    config: &TrainConfig,
    stage: Stage,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("pretraining corpus is empty".into()));
    }
    check_vocab(model, vocab)?;
    let seqs = mlm_sequences(model, vocab, corpus, config);
    let mut model = model.clone();
    let mut state = OptimizerState::new(&model);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let epoch_seed = mix_seed(&[config.seed, epoch as u64, 0x6d6c6d]);
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(epoch_seed ^ 1);
        let mut batch_losses = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut total = None;
            let mut count = 0usize;
            for &i in chunk {
                let Some(masked) = mask_nonempty(&seqs[i], config.masking(), vocab.len(), mix_seed(&[epoch_seed, i as u64]))? else {
                    continue;
                };
                let (rows, targets) = masked_rows(&masked);
                let hidden = model.encode_on(&mut tape, &bound, &masked.input, Some(&mut dropout_rng))?;
                let logits = model.mlm_logits_on(&mut tape, &bound, hidden, Some(&rows))?;
                let loss = tape.cross_entropy(logits, &targets);
                total = Some(match total {
                    Some(t) => tape.add(t, loss),
                    None => loss,
                });
                count += 1;
            }
            let Some(total) = total else { continue };
            let loss = tape.scale(total, 1.0 / count as f32);
            batch_losses.push(tape.value(loss).data[0] as f64);
            let grads = gradients_of(&model, &tape, &bound, loss)?;
            optimizer_step(&mut model, &grads, config, &mut state)?;
        }
        if batch_losses.is_empty() {
            return Err(Error::InvalidArgument("no sequence had a maskable position".into()));
        }
        log.push(EpochLog {
            epoch,
            train_loss: batch_losses.iter().sum::<f64>() / batch_losses.len() as f64,
            val_accuracy: None,
            val_f1: None,
        });
    }
    let last = log.last().expect("at least one epoch").train_loss;
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            model,
            stage,
            epoch: (config.epochs - 1) as u32,
            metrics: vec![("train_loss".into(), last)],
        },
        log,
    })
}

pub fn encode_pairs(vocab: &Vocabulary, pairs: &[BiographyPair], max_len: usize) -> Result<Vec<EncodedPair>> {
    pairs
        .iter()
        .map(|p| vocab.encode_pair(&p.bio_a, &p.bio_b, max_len).map(|e| e.trimmed()))
        .collect()
}

/// Connection probabilities for already-encoded pairs, evaluated in parallel.
pub fn predict_encoded(model: &EncoderModel<f32>, encoded: &[EncodedPair]) -> Result<Vec<f64>> {
    encoded
        .par_iter()
        .map(|e| model.forward_pair(e).map(|o| o.probability))
        .collect()
}

pub fn predict_pairs(model: &EncoderModel<f32>, vocab: &Vocabulary, pairs: &[BiographyPair], max_len: usize) -> Result<Vec<f64>> {
    check_vocab(model, vocab)?;
    predict_encoded(model, &encode_pairs(vocab, pairs, max_len.min(model.config.max_positions))?)
}

/// Incremental pair fine-tuning; one call to [`PairTrainer::train_epoch`]
/// per pass over the training set.
pub struct PairTrainer {
    pub model: EncoderModel<f32>,
    state: OptimizerState<f32>,
    config: TrainConfig,
    encoded: Vec<EncodedPair>,
    labels: Vec<u8>,
    epoch: usize,
}

impl PairTrainer {
    pub fn new(model: &EncoderModel<f32>, vocab: &Vocabulary, train: &[BiographyPair], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        check_vocab(model, vocab)?;
        if train.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        let max_len = config.max_len.min(model.config.max_positions);
        Ok(Self {
            model: model.clone(),
            state: OptimizerState::new(model),
            config: config.clone(),
            encoded: encode_pairs(vocab, train, max_len)?,
            labels: train.iter().map(|p| p.label).collect(),
            epoch: 0,
        })
    }

    /// Runs one epoch and returns the mean batch loss.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let epoch_seed = mix_seed(&[self.config.seed, self.epoch as u64, 0x7061_6972]);
        self.epoch += 1;
        let mut order: Vec<usize> = (0..self.encoded.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(epoch_seed ^ 1);
        let mut losses = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape);
            let mut total = None;
            for &i in chunk {
                let h = self.model.encode_on(&mut tape, &bound, &self.encoded[i], Some(&mut dropout_rng))?;
                let logits = self.model.pair_logits_on(&mut tape, &bound, h)?;
                let l = tape.pair_nll(logits, &[self.labels[i]]);
                total = Some(match total {
                    Some(t) => tape.add(t, l),
                    None => l,
                });
            }
            let total = total.expect("non-empty chunk");
            let loss = tape.scale(total, 1.0 / chunk.len() as f32);
            losses.push(tape.value(loss).data[0] as f64);
            let grads = gradients_of(&self.model, &tape, &bound, loss)?;
            optimizer_step(&mut self.model, &grads, &self.config, &mut self.state)?;
        }
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }

    pub fn train_accuracy(&self) -> Result<f64> {
        let probs = predict_encoded(&self.model, &self.encoded)?;
        let preds: Vec<u8> = probs.iter().map(|&p| predict_label(p)).collect::<Result<_>>()?;
        accuracy(&confusion_matrix(&preds, &self.labels)?)
    }
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    /// Parameters from the epoch with the highest validation F1 (earliest on ties).
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

pub fn finetune_pairs(
    model: &EncoderModel<f32>,
    vocab: &Vocabulary,
    train: &[BiographyPair],
    val: &[BiographyPair],
    config: &TrainConfig,
) -> Result<FineTuneOutcome> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let combined: Vec<BiographyPair> = train.iter().chain(val).cloned().collect();
    let train_idx: Vec<usize> = (0..train.len()).collect();
    let val_idx: Vec<usize> = (train.len()..combined.len()).collect();
    check_disjoint(&combined, &train_idx, &val_idx, "train and validation")?;

    let mut trainer = PairTrainer::new(model, vocab, train, config)?;
    let max_len = config.max_len.min(model.config.max_positions);
    let val_encoded = encode_pairs(vocab, val, max_len)?;
    let val_labels: Vec<u8> = val.iter().map(|p| p.label).collect();

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, f64, EncoderModel<f32>)> = None;
    for epoch in 0..config.epochs {
        let train_loss = trainer.train_epoch()?;
        let probs = predict_encoded(&trainer.model, &val_encoded)?;
        let preds: Vec<u8> = probs.iter().map(|&p| predict_label(p)).collect::<Result<_>>()?;
        let cm = confusion_matrix(&preds, &val_labels)?;
        let (acc, f1) = (accuracy(&cm)?, f1_score(&cm));
        log.push(EpochLog {
            epoch,
            train_loss,
            val_accuracy: Some(acc),
            val_f1: Some(f1),
        });
        if best.as_ref().map_or(true, |b| f1 > b.1) {
            best = Some((epoch, f1, acc, trainer.model.clone()));
        }
    }
    let (best_epoch, f1, acc, model) = best.expect("at least one epoch");
    let train_loss = log[best_epoch].train_loss;
    Ok(FineTuneOutcome {
        checkpoint: Checkpoint {
            model,
            stage: Stage::FineTuned,
            epoch: best_epoch as u32,
            metrics: vec![
                ("val_f1".into(), f1),
                ("val_accuracy".into(), acc),
                ("train_loss".into(), train_loss),
            ],
        },
        best_epoch,
        log,
    })
}

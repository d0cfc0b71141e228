//! Indicator predictions, confusion-matrix metrics and k-fold cross-validation.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::data_io::{check_disjoint, kfold_split, BiographyPair};
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;
use crate::train::{finetune_pairs, mix_seed, predict_pairs, TrainConfig};

/// `1` iff `p > 0.5`.
pub fn predict_label(p: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0,1]")));
    }
    Ok(u8::from(p > 0.5))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }
}

/// Label 1 is the positive class.
pub fn confusion_matrix(predictions: &[u8], labels: &[u8]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        if p > 1 || y > 1 {
            return Err(Error::InvalidArgument(format!("labels must be 0 or 1, got ({p}, {y})")));
        }
        match (p, y) {
            (1, 1) => cm.tp += 1,
            (0, 1) => cm.fn_ += 1,
            (1, 0) => cm.fp += 1,
            _ => cm.tn += 1,
        }
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::InvalidArgument("accuracy of an empty confusion matrix".into()));
    }
    Ok((cm.tp + cm.tn) as f64 / cm.total() as f64)
}

/// `2tp / (2tp + fp + fn)`, or 0 when the denominator is 0.
pub fn f1_score(cm: &ConfusionMatrix) -> f64 {
    let denom = 2 * cm.tp + cm.fp + cm.fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * cm.tp) as f64 / denom as f64
    }
}

/// Mean and population standard deviation.
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Scores probabilities against the labels of `pairs`.
pub fn score(probabilities: &[f64], labels: &[u8]) -> Result<(ConfusionMatrix, f64, f64)> {
    let preds: Vec<u8> = probabilities.iter().map(|&p| predict_label(p)).collect::<Result<_>>()?;
    let cm = confusion_matrix(&preds, labels)?;
    Ok((cm, accuracy(&cm)?, f1_score(&cm)))
}

/// Uniform output record for model and baseline predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub artist_a: String,
    pub artist_b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    pub prediction: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

impl PredictionRecord {
    pub fn new(pair: &BiographyPair, prediction: u8, probability: Option<f64>) -> Self {
        Self {
            artist_a: pair.artist_a.clone(),
            artist_b: pair.artist_b.clone(),
            probability,
            prediction,
            label: Some(pair.label),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: ConfusionMatrix,
    pub best_epoch: usize,
    pub minutes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub model: String,
    pub folds: Vec<FoldResult>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub minutes_per_fold: f64,
}

impl CVReport {
    pub fn from_folds(model: impl Into<String>, folds: Vec<FoldResult>) -> Result<Self> {
        let accs: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let f1s: Vec<f64> = folds.iter().map(|f| f.f1).collect();
        let minutes: Vec<f64> = folds.iter().map(|f| f.minutes).collect();
        let (accuracy_mean, accuracy_std) = aggregate(&accs)?;
        let (f1_mean, f1_std) = aggregate(&f1s)?;
        Ok(Self {
            model: model.into(),
            folds,
            accuracy_mean,
            accuracy_std,
            f1_mean,
            f1_std,
            minutes_per_fold: aggregate(&minutes)?.0,
        })
    }

    pub fn row(&self) -> ReportRow {
        ReportRow {
            model: self.model.clone(),
            accuracy: (self.accuracy_mean, Some(self.accuracy_std)),
            f1: (self.f1_mean, Some(self.f1_std)),
            minutes_per_fold: Some(self.minutes_per_fold),
        }
    }
}

/// Table row name for a model fine-tuned from a checkpoint of `stage`.
pub fn model_name(stage: Stage, encoder: &str) -> String {
    match stage {
        Stage::ArtPretrained => format!("FT-Art-{encoder}"),
        _ => format!("FT-Base-{encoder}"),
    }
}

/// One line of the results table. Baselines carry no std or timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub accuracy: (f64, Option<f64>),
    pub f1: (f64, Option<f64>),
    pub minutes_per_fold: Option<f64>,
}

impl ReportRow {
    pub fn single(model: impl Into<String>, accuracy: f64, f1: f64) -> Self {
        Self {
            model: model.into(),
            accuracy: (accuracy, None),
            f1: (f1, None),
            minutes_per_fold: None,
        }
    }
}

pub fn format_table(rows: &[ReportRow]) -> String {
    let cell = |(m, s): (f64, Option<f64>)| match s {
        Some(s) => format!("{m:.3} ± {s:.3}"),
        None => format!("{m:.3}"),
    };
    let width = rows.iter().map(|r| r.model.chars().count()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}  {:<15}  {:<15}  {}\n", "Model", "Accuracy", "F1", "Fine-tuning time (min/fold)");
    for r in rows {
        let time = r.minutes_per_fold.map_or_else(|| "-".to_string(), |m| format!("{m:.2}"));
        let _ = writeln!(out, "{:<width$}  {:<15}  {:<15}  {}", r.model, cell(r.accuracy), cell(r.f1), time);
    }
    out
}

/// Fine-tunes one model per fold from `base` and scores it on the held-out
/// fold. Fold `f` is the test set, fold `(f + 1) % k` the validation set.
pub fn cross_validate(
    pairs: &[BiographyPair],
    k: usize,
    base: &Checkpoint,
    vocab: &Vocabulary,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<FoldResult>> {
    if k < 3 {
        return Err(Error::InvalidArgument(format!("k = {k}: need at least 3 folds for train, val and test")));
    }
    let folds = kfold_split(pairs, k, seed)?;
    (0..k)
        .into_par_iter()
        .map(|f| {
            let split = folds.split(f);
            check_disjoint(pairs, &split.train, &split.test, "train and test")?;
            check_disjoint(pairs, &split.val, &split.test, "validation and test")?;
            let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
            let (train, val, test) = (pick(&split.train), pick(&split.val), pick(&split.test));
            let fold_config = TrainConfig {
                seed: mix_seed(&[config.seed, f as u64]),
                ..config.clone()
            };
            let start = Instant::now();
            let tuned = finetune_pairs(&base.model, vocab, &train, &val, &fold_config)?;
            let minutes = start.elapsed().as_secs_f64() / 60.0;
            let probs = predict_pairs(&tuned.checkpoint.model, vocab, &test, config.max_len)?;
            let labels: Vec<u8> = test.iter().map(|p| p.label).collect();
            let (confusion, accuracy, f1) = score(&probs, &labels)?;
            Ok(FoldResult {
                fold_index: f,
                accuracy,
                f1,
                confusion,
                best_epoch: tuned.best_epoch,
                minutes,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn indicator_examples() {
        assert_eq!(predict_label(0.7).unwrap(), 1);
        assert_eq!(predict_label(0.5).unwrap(), 0);
        assert_eq!(predict_label(0.3).unwrap(), 0);
        assert!(predict_label(1.2).is_err());
        assert!(predict_label(f64::NAN).is_err());
    }

    #[test]
    fn confusion_examples() {
        let cm = confusion_matrix(&[1, 0], &[1, 0]).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 1, fn_: 0, fp: 0, tn: 1 });
        let cm = confusion_matrix(&[0, 0], &[1, 0]).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 0, fn_: 1, fp: 0, tn: 1 });
        assert!(confusion_matrix(&[1], &[1, 0]).is_err());
        assert!(confusion_matrix(&[], &[]).is_err());
    }

    #[test]
    fn metric_examples() {
        let cm = ConfusionMatrix { tp: 3, tn: 2, fp: 1, fn_: 1 };
        assert!((accuracy(&cm).unwrap() - 5.0 / 7.0).abs() < 1e-15);
        assert_eq!(f1_score(&cm), 0.75);
        let all_neg = ConfusionMatrix { tp: 0, fn_: 50, fp: 0, tn: 50 };
        assert_eq!(accuracy(&all_neg).unwrap(), 0.5);
        assert_eq!(f1_score(&all_neg), 0.0);
        assert_eq!(f1_score(&ConfusionMatrix { tn: 4, ..Default::default() }), 0.0);
        assert!(accuracy(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let (m, s) = aggregate(&[0.8; 5]).unwrap();
        assert!((m - 0.8).abs() < 1e-15 && s.abs() < 1e-15);
        assert_eq!(aggregate(&[0.0, 1.0]).unwrap(), (0.5, 0.5));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn table_layout() {
        let t = format_table(&[
            ReportRow::single("Random Guess - 1", 0.526, 0.0),
            ReportRow {
                model: "FT-Art-Mini".into(),
                accuracy: (0.9, Some(0.01)),
                f1: (0.88, Some(0.02)),
                minutes_per_fold: Some(0.5),
            },
        ]);
        let header = t.lines().next().unwrap();
        assert!(header.contains("Accuracy") && header.contains("F1") && header.contains("Fine-tuning time"));
        assert!(t.contains("0.900 ± 0.010"));
        assert_eq!(model_name(Stage::ArtPretrained, "Mini"), "FT-Art-Mini");
        assert_eq!(model_name(Stage::Base, "Mini"), "FT-Base-Mini");
    }

    #[test]
    fn prediction_record_round_trip() {
        let r = PredictionRecord {
            artist_a: "a".into(),
            artist_b: "b".into(),
            probability: Some(0.25),
            prediction: 0,
            label: None,
        };
        let text = serde_json::to_string(&r).unwrap();
        assert!(!text.contains("label"));
        assert_eq!(serde_json::from_str::<PredictionRecord>(&text).unwrap(), r);
    }

    proptest! {
        #[test]
        fn metrics_bounded(preds in prop::collection::vec(0u8..2, 1..200), seed in any::<u64>()) {
            let labels: Vec<u8> = preds.iter().enumerate().map(|(i, _)| ((seed >> (i % 64)) & 1) as u8).collect();
            let cm = confusion_matrix(&preds, &labels).unwrap();
            prop_assert_eq!(cm.total(), preds.len());
            let acc = accuracy(&cm).unwrap();
            let f1 = f1_score(&cm);
            prop_assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&f1));
            prop_assert_eq!(acc == 1.0, cm.fp == 0 && cm.fn_ == 0);
        }

        #[test]
        fn indicator_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(predict_label(lo).unwrap() <= predict_label(hi).unwrap());
        }

        #[test]
        fn aggregate_matches_two_pass(values in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let n = values.len() as f64;
            let mut sum = 0.0;
            for v in &values { sum += v; }
            let mean = sum / n;
            let mut ss = 0.0;
            for v in &values { ss += (v - mean) * (v - mean); }
            let (m, s) = aggregate(&values).unwrap();
            prop_assert!((m - mean).abs() < 1e-12);
            prop_assert!((s - (ss / n).sqrt()).abs() < 1e-12);
        }
    }
}

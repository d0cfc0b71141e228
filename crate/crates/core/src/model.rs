//! Transformer encoder with a masked-LM head and a pair-classification head.
//!
//! Post-norm (BERT-style) blocks: token, position and segment embeddings are
//! summed and normalized, then each layer applies multi-head self-attention
//! and a GELU feed-forward network, each wrapped in a residual connection and
//! layer normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{two_class_probability, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tokenizer::{EncodedPair, MaskedBatch};

pub const INIT_STD: f64 = 0.02;
const PARAMS_PER_LAYER: usize = 16;
const EMBEDDING_PARAMS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Default desk-scale shape for a given vocabulary.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_positions: 512,
            hidden_dim: 128,
            num_layers: 4,
            num_heads: 8,
            ffn_dim: 512,
            dropout_rate: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (h, f, v) = (self.hidden_dim, self.ffn_dim, self.vocab_size);
        let mut shapes = vec![
            ("embeddings.token".to_string(), (v, h)),
            ("embeddings.position".to_string(), (self.max_positions, h)),
            ("embeddings.segment".to_string(), (2, h)),
            ("embeddings.norm.gain".to_string(), (1, h)),
            ("embeddings.norm.bias".to_string(), (1, h)),
        ];
        for l in 0..self.num_layers {
            let p = format!("layers.{l}");
            for proj in ["query", "key", "value", "output"] {
                shapes.push((format!("{p}.attention.{proj}.weight"), (h, h)));
                shapes.push((format!("{p}.attention.{proj}.bias"), (1, h)));
            }
            shapes.push((format!("{p}.attention.norm.gain"), (1, h)));
            shapes.push((format!("{p}.attention.norm.bias"), (1, h)));
            shapes.push((format!("{p}.ffn.input.weight"), (h, f)));
            shapes.push((format!("{p}.ffn.input.bias"), (1, f)));
            shapes.push((format!("{p}.ffn.output.weight"), (f, h)));
            shapes.push((format!("{p}.ffn.output.bias"), (1, h)));
            shapes.push((format!("{p}.ffn.norm.gain"), (1, h)));
            shapes.push((format!("{p}.ffn.norm.bias"), (1, h)));
        }
        shapes.push(("mlm_head.weight".to_string(), (h, v)));
        shapes.push(("mlm_head.bias".to_string(), (1, v)));
        shapes.push(("pair_head.weight".to_string(), (h, 2)));
        shapes.push(("pair_head.bias".to_string(), (1, 2)));
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T = f32> {
    pub config: ModelConfig,
    pub params: Vec<NamedTensor<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOutput {
    /// Class-1 (connected) probability.
    pub probability: f64,
    pub logits: [f64; 2],
}

/// Parameters of one model registered on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

struct LayerIdx {
    base: usize,
}

impl LayerIdx {
    fn proj(&self, which: usize) -> (usize, usize) {
        (self.base + 2 * which, self.base + 2 * which + 1)
    }
    fn attn_norm(&self) -> (usize, usize) {
        (self.base + 8, self.base + 9)
    }
    fn ffn_in(&self) -> (usize, usize) {
        (self.base + 10, self.base + 11)
    }
    fn ffn_out(&self) -> (usize, usize) {
        (self.base + 12, self.base + 13)
    }
    fn ffn_norm(&self) -> (usize, usize) {
        (self.base + 14, self.base + 15)
    }
}

/// Numerically stable softmax of a vector.
pub fn softmax<T: Real>(z: &[T]) -> Result<Vec<T>> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = z.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().map(|v| v.as_f64()).sum();
    Ok(exps.into_iter().map(|e| T::of(e.as_f64() / total)).collect())
}

/// Inverted-dropout source: `None` disables dropout (evaluation mode).
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

impl<T: Real> EncoderModel<T> {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, (r, c))| {
                let tensor = if name.ends_with(".gain") {
                    Tensor::filled(r, c, T::one())
                } else if name.ends_with(".bias") {
                    Tensor::zeros(r, c)
                } else {
                    Tensor::new(r, c, (0..r * c).map(|_| T::of(normal.sample(&mut rng))).collect())
                };
                NamedTensor { name, tensor }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Checks names and shapes against the configuration.
    pub fn validate_shapes(&self) -> Result<()> {
        let expected = self.config.parameter_shapes();
        if expected.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&self.params) {
            if *name != p.name || *shape != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {name} with shape {shape:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.tensor.clone())).collect(),
        }
    }

    /// Registers parameters as constants; nothing will flow back into them.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect(),
        }
    }

    fn check_input(&self, seq: &EncodedPair) -> Result<()> {
        let n = seq.ids.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty input sequence".into()));
        }
        if n != seq.segment_ids.len() || n != seq.attention_mask.len() {
            return Err(Error::InvalidArgument("ids, segment ids and attention mask differ in length".into()));
        }
        if n > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_positions,
            });
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        if seq.segment_ids.iter().any(|&s| s > 1) {
            return Err(Error::InvalidArgument("segment ids must be 0 or 1".into()));
        }
        if !seq.attention_mask.contains(&1) {
            return Err(Error::InvalidArgument("attention mask selects no position".into()));
        }
        Ok(())
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, rng: &mut DropoutRng<'_>) -> Var {
        let p = self.config.dropout_rate;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = T::of(1.0 / (1.0 - p));
                let len = tape.value(x).data.len();
                let mask = (0..len).map(|_| if rng.gen_bool(p) { T::zero() } else { keep }).collect();
                tape.mul_const(x, mask)
            }
            _ => x,
        }
    }

    fn linear(&self, tape: &mut Tape<T>, b: &Bound, x: Var, (w, bias): (usize, usize)) -> Var {
        let y = tape.matmul(x, b.vars[w]);
        tape.add_row(y, b.vars[bias])
    }

    fn norm(&self, tape: &mut Tape<T>, b: &Bound, x: Var, (g, bias): (usize, usize)) -> Var {
        tape.layer_norm(x, b.vars[g], b.vars[bias])
    }

    /// Last-layer hidden states, one row per position.
    pub fn encode_on(&self, tape: &mut Tape<T>, b: &Bound, seq: &EncodedPair, mut rng: DropoutRng<'_>) -> Result<Var> {
        self.check_input(seq)?;
        let cfg = &self.config;
        let n = seq.ids.len();
        let positions: Vec<usize> = (0..n).collect();
        let segments: Vec<usize> = seq.segment_ids.iter().map(|&s| s as usize).collect();
        let tok = tape.gather(b.vars[0], &seq.ids)?;
        let pos = tape.gather(b.vars[1], &positions)?;
        let seg = tape.gather(b.vars[2], &segments)?;
        let x = tape.add(tok, pos);
        let x = tape.add(x, seg);
        let x = self.norm(tape, b, x, (3, 4));
        let mut x = self.dropout(tape, x, &mut rng);

        let key_mask: Vec<bool> = seq.attention_mask.iter().map(|&m| m == 1).collect();
        let dh = cfg.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        for l in 0..cfg.num_layers {
            let idx = LayerIdx {
                base: EMBEDDING_PARAMS + PARAMS_PER_LAYER * l,
            };
            let q = self.linear(tape, b, x, idx.proj(0));
            let k = self.linear(tape, b, x, idx.proj(1));
            let v = self.linear(tape, b, x, idx.proj(2));
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for h in 0..cfg.num_heads {
                let qh = tape.col_slice(q, h * dh, dh);
                let kh = tape.col_slice(k, h * dh, dh);
                let vh = tape.col_slice(v, h * dh, dh);
                let scores = tape.matmul_bt(qh, kh);
                let scores = tape.scale(scores, scale);
                let attn = tape.masked_softmax(scores, &key_mask);
                heads.push(tape.matmul(attn, vh));
            }
            let ctx = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let attn_out = self.linear(tape, b, ctx, idx.proj(3));
            let attn_out = self.dropout(tape, attn_out, &mut rng);
            let x1 = tape.add(x, attn_out);
            let x1 = self.norm(tape, b, x1, idx.attn_norm());

            let hidden = self.linear(tape, b, x1, idx.ffn_in());
            let hidden = tape.gelu(hidden);
            let ffn_out = self.linear(tape, b, hidden, idx.ffn_out());
            let ffn_out = self.dropout(tape, ffn_out, &mut rng);
            let x2 = tape.add(x1, ffn_out);
            x = self.norm(tape, b, x2, idx.ffn_norm());
        }
        debug_assert_eq!(tape.value(x).shape(), (n, cfg.hidden_dim));
        Ok(x)
    }

    fn head_index(&self) -> usize {
        EMBEDDING_PARAMS + PARAMS_PER_LAYER * self.config.num_layers
    }

    /// Vocabulary logits for the selected rows of `hidden` (all rows when
    /// `rows` is `None`).
    pub fn mlm_logits_on(&self, tape: &mut Tape<T>, b: &Bound, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
        let h = match rows {
            Some(rows) => tape.gather(hidden, rows)?,
            None => hidden,
        };
        let i = self.head_index();
        Ok(self.linear(tape, b, h, (i, i + 1)))
    }

    /// `1 x 2` logits from the position-0 (`[CLS]`) hidden vector.
    pub fn pair_logits_on(&self, tape: &mut Tape<T>, b: &Bound, hidden: Var) -> Result<Var> {
        let cls = tape.gather(hidden, &[0])?;
        let i = self.head_index() + 2;
        Ok(self.linear(tape, b, cls, (i, i + 1)))
    }

    pub fn forward_encoder(&self, seq: &EncodedPair) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let h = self.encode_on(&mut tape, &b, seq, None)?;
        Ok(tape.value(h).clone())
    }

    pub fn forward_mlm(&self, batch: &MaskedBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let h = self.encode_on(&mut tape, &b, &batch.input, None)?;
        let logits = self.mlm_logits_on(&mut tape, &b, h, None)?;
        Ok(tape.value(logits).clone())
    }

    pub fn forward_pair(&self, pair: &EncodedPair) -> Result<PairOutput> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let h = self.encode_on(&mut tape, &b, pair, None)?;
        let z = self.pair_logits_on(&mut tape, &b, h)?;
        let z = &tape.value(z).data;
        Ok(PairOutput {
            probability: two_class_probability(z[0], z[1]).as_f64(),
            logits: [z[0].as_f64(), z[1].as_f64()],
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{MaskingConfig, CLS, PAD, SEP};

    fn small(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            max_positions: 32,
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 32,
            dropout_rate: 0.1,
            seed: 3,
        }
    }

    fn pair(ids: &[usize], pad: usize) -> EncodedPair {
        let sep = ids.iter().position(|&i| i == SEP).unwrap();
        let mut p = EncodedPair {
            ids: ids.to_vec(),
            segment_ids: (0..ids.len()).map(|i| (i > sep) as u8).collect(),
            attention_mask: vec![1; ids.len()],
        };
        p.ids.extend(std::iter::repeat(PAD).take(pad));
        p.segment_ids.extend(std::iter::repeat(0).take(pad));
        p.attention_mask.extend(std::iter::repeat(0).take(pad));
        p
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let cfg = small(20);
        let a = EncoderModel::<f32>::init(&cfg).unwrap();
        let b = EncoderModel::<f32>::init(&cfg).unwrap();
        assert_eq!(a, b);
        a.validate_shapes().unwrap();
        let mut toy = ModelConfig::toy(100);
        assert_eq!(toy.head_dim(), 16);
        toy.validate().unwrap();
        toy.hidden_dim = 130;
        let err = toy.validate().unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
        let gain = a.param_index("layers.1.ffn.norm.gain").unwrap();
        assert!(a.params[gain].tensor.data.iter().all(|&g| g == 1.0));
        let bias = a.param_index("layers.0.attention.query.bias").unwrap();
        assert!(a.params[bias].tensor.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0f64, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-1e4, 0.0, 3.5, 1e4] {
            for p in softmax(&[c, c, c]).unwrap() {
                assert!((p - 1.0f64 / 3.0).abs() < 1e-15);
            }
        }
        // Direct evaluation of e^z_i / sum_j e^z_j for z = [1, 2, 3].
        let direct: Vec<f64> = {
            let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|z| z.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        };
        let got = softmax(&[1.0f64, 2.0, 3.0]).unwrap();
        for (g, d) in got.iter().zip(&direct) {
            assert!((g - d).abs() < 1e-15);
        }
        for (g, want) in got.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((g - want).abs() < 5e-6);
        }
        assert!(softmax::<f64>(&[]).is_err());
        assert!(matches!(softmax(&[1.0f32, f32::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn encoder_shapes_and_errors() {
        let m = EncoderModel::<f32>::init(&small(20)).unwrap();
        let p = pair(&[CLS, 7, 8, SEP, 9, SEP], 3);
        let h = m.forward_encoder(&p).unwrap();
        assert_eq!(h.shape(), (9, 16));
        let masked = crate::tokenizer::mask_tokens(&p, MaskingConfig::default(), 20, 1).unwrap();
        let logits = m.forward_mlm(&masked).unwrap();
        assert_eq!(logits.shape(), (9, 20));
        for r in 0..9 {
            let s: f64 = softmax(logits.row(r)).unwrap().iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let bad = pair(&[CLS, 25, SEP, 9, SEP], 0);
        assert!(matches!(m.forward_encoder(&bad), Err(Error::TokenOutOfRange { id: 25, .. })));
        let long = pair(&[CLS, 5, SEP, 6, SEP], 40);
        assert!(matches!(m.forward_encoder(&long), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn padding_does_not_leak() {
        let m = EncoderModel::<f32>::init(&small(20)).unwrap();
        let a = pair(&[CLS, 7, 8, SEP, 9, SEP], 3);
        let mut b = a.clone();
        b.ids[7] = 13;
        b.ids[8] = 5;
        let ha = m.forward_encoder(&a).unwrap();
        let hb = m.forward_encoder(&b).unwrap();
        for r in 0..6 {
            assert_eq!(ha.row(r), hb.row(r));
        }
        let trimmed = m.forward_encoder(&a.trimmed()).unwrap();
        for r in 0..6 {
            assert_eq!(ha.row(r), trimmed.row(r));
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let m = EncoderModel::<f32>::init(&small(20)).unwrap();
        let p = pair(&[CLS, 7, SEP, 9, SEP], 0);
        assert_eq!(m.forward_pair(&p).unwrap(), m.forward_pair(&p).unwrap());
        let out = m.forward_pair(&p).unwrap();
        assert!((0.0..=1.0).contains(&out.probability));
    }

    #[test]
    fn zeroed_pair_head_gives_half() {
        let mut m = EncoderModel::<f32>::init(&small(20)).unwrap();
        let w = m.param_index("pair_head.weight").unwrap();
        m.params[w].tensor.data.iter_mut().for_each(|x| *x = 0.0);
        let out = m.forward_pair(&pair(&[CLS, 7, SEP, 9, SEP], 2)).unwrap();
        assert_eq!(out.logits, [0.0, 0.0]);
        assert_eq!(out.probability, 0.5);
    }

    #[test]
    fn dropout_changes_training_outputs() {
        let m = EncoderModel::<f32>::init(&small(20)).unwrap();
        let p = pair(&[CLS, 7, 8, SEP, 9, SEP], 0);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = m.encode_on(&mut tape, &b, &p, Some(&mut rng)).unwrap();
        assert_ne!(tape.value(h), &m.forward_encoder(&p).unwrap());
    }
}

//! Central finite-difference verification of the autodiff primitives and of
//! end-to-end pair-loss gradients.
//!
//! Each check compares the analytic vector-Jacobian product against
//! `(L(x + h) - L(x - h)) / (2h)` with `h = 1e-3 * max(1, |x|)`, where `L` is a
//! fixed random projection of the primitive's output accumulated in `f64`.
//! The reported error for an input tensor is
//! `||analytic - numeric|| / max(||analytic||, ||numeric||)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig};
use crate::tokenizer::EncodedPair;

pub const TOLERANCE_F32: f64 = 1e-3;
pub const TOLERANCE_F64: f64 = 1e-5;
/// Central-difference step: large enough for f32 rounding, small enough
/// that f64 truncation error stays far below the f64 tolerance.
const STEP_F32: f64 = 1e-3;
const STEP_F64: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => TOLERANCE_F32,
            Precision::F64 => TOLERANCE_F64,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub precision: Precision,
    pub relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Scales the analytic gradient of the named check by 1.1; used to
    /// prove the harness notices wrong gradients.
    pub corrupt: Option<String>,
}

type Builder<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Var>;

struct Primitive<T> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    build: Builder<T>,
}

fn random<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect(),
    )
}

fn primitives<T: Real>(rng: &mut ChaCha8Rng) -> Vec<Primitive<T>> {
    let mask_factors: Vec<T> = (0..12).map(|i| T::of(if i % 3 == 0 { 0.0 } else { 1.25 })).collect();
    let key_mask = vec![true, true, false, true, false];
    let targets = vec![Some(2), None, Some(0), Some(3)];
    vec![
        Primitive {
            name: "matmul",
            inputs: vec![random(rng, 3, 4), random(rng, 4, 2)],
            build: Box::new(|t, v| t.matmul(v[0], v[1])),
        },
        Primitive {
            name: "matmul_bt",
            inputs: vec![random(rng, 3, 4), random(rng, 5, 4)],
            build: Box::new(|t, v| t.matmul_bt(v[0], v[1])),
        },
        Primitive {
            name: "add",
            inputs: vec![random(rng, 2, 3), random(rng, 2, 3)],
            build: Box::new(|t, v| t.add(v[0], v[1])),
        },
        Primitive {
            name: "add_row",
            inputs: vec![random(rng, 3, 4), random(rng, 1, 4)],
            build: Box::new(|t, v| t.add_row(v[0], v[1])),
        },
        Primitive {
            name: "scale",
            inputs: vec![random(rng, 2, 3)],
            build: Box::new(|t, v| t.scale(v[0], T::of(-0.7))),
        },
        Primitive {
            name: "mul_const",
            inputs: vec![random(rng, 3, 4)],
            build: Box::new(move |t, v| t.mul_const(v[0], mask_factors.clone())),
        },
        Primitive {
            name: "gelu",
            inputs: vec![random(rng, 3, 4)],
            build: Box::new(|t, v| t.gelu(v[0])),
        },
        Primitive {
            name: "layer_norm",
            inputs: vec![random(rng, 3, 5), random(rng, 1, 5), random(rng, 1, 5)],
            build: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
        },
        Primitive {
            name: "masked_softmax",
            inputs: vec![random(rng, 3, 5)],
            build: Box::new(move |t, v| t.masked_softmax(v[0], &key_mask)),
        },
        Primitive {
            name: "col_slice",
            inputs: vec![random(rng, 3, 6)],
            build: Box::new(|t, v| t.col_slice(v[0], 2, 3)),
        },
        Primitive {
            name: "concat_cols",
            inputs: vec![random(rng, 2, 3), random(rng, 2, 1), random(rng, 2, 2)],
            build: Box::new(|t, v| t.concat_cols(&[v[0], v[1], v[2]])),
        },
        Primitive {
            name: "gather",
            inputs: vec![random(rng, 5, 3)],
            build: Box::new(|t, v| t.gather(v[0], &[4, 0, 4, 2]).expect("rows in range")),
        },
        Primitive {
            name: "cross_entropy",
            inputs: vec![random(rng, 4, 6)],
            build: Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
        },
        Primitive {
            name: "pair_nll",
            inputs: vec![random(rng, 4, 2)],
            build: Box::new(|t, v| t.pair_nll(v[0], &[1, 0, 0, 1])),
        },
        Primitive {
            name: "sum",
            inputs: vec![random(rng, 3, 3)],
            build: Box::new(|t, v| t.sum(v[0])),
        },
    ]
}

fn projected<T: Real>(out: &Tensor<T>, weights: &[f64]) -> f64 {
    out.data.iter().zip(weights).map(|(&o, &w)| o.as_f64() * w).sum()
}

/// Norm-based relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Perturbs `x` by `±h` and returns `(x_plus, x_minus, actual_step)` where the
/// step is measured after rounding to `T`.
fn perturb<T: Real>(x: T) -> (T, T, f64) {
    let step = if T::epsilon().as_f64() < 1e-10 { STEP_F64 } else { STEP_F32 };
    let h = T::of(step * x.as_f64().abs().max(1.0));
    let plus = x + h;
    let minus = x - h;
    (plus, minus, plus.as_f64() - minus.as_f64())
}

fn check_primitive<T: Real>(p: &Primitive<T>, precision: Precision, rng: &mut ChaCha8Rng, corrupt: bool) -> CheckResult {
    let eval = |inputs: &[Tensor<T>]| -> (Tape<T>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = (p.build)(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = eval(&p.inputs);
    let out_len = tape.value(out).data.len();
    let weights: Vec<f64> = (0..out_len).map(|_| rng.sample(StandardNormal)).collect();
    let seed_t = Tensor::new(
        tape.value(out).rows,
        tape.value(out).cols,
        weights.iter().map(|&w| T::of(w)).collect(),
    );
    let grads = tape.backward_with(out, seed_t).expect("output recorded on tape");

    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let mut analytic: Vec<f64> = grads.get(*var).data.iter().map(|g| g.as_f64()).collect();
        if corrupt {
            analytic.iter_mut().for_each(|g| *g *= 1.1);
        }
        let mut numeric = Vec::with_capacity(analytic.len());
        for e in 0..p.inputs[k].data.len() {
            let (plus, minus, step) = perturb(p.inputs[k].data[e]);
            let mut inputs = p.inputs.clone();
            inputs[k].data[e] = plus;
            let (t, _, o) = eval(&inputs);
            let lp = projected(t.value(o), &weights);
            inputs[k].data[e] = minus;
            let (t, _, o) = eval(&inputs);
            let lm = projected(t.value(o), &weights);
            numeric.push((lp - lm) / step);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    CheckResult {
        name: p.name.to_string(),
        precision,
        relative_error: worst,
        tolerance: precision.tolerance(),
        passed: worst <= precision.tolerance(),
    }
}

fn run_primitives<T: Real>(precision: Precision, opts: &GradcheckOptions, out: &mut Vec<CheckResult>) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for p in primitives::<T>(&mut rng) {
        let corrupt = opts.corrupt.as_deref() == Some(p.name);
        out.push(check_primitive(&p, precision, &mut rng, corrupt));
    }
}

/// Two-layer model and pair used by the end-to-end spot check.
pub fn spot_check_fixture(seed: u64) -> (ModelConfig, EncodedPair, u8) {
    let config = ModelConfig {
        vocab_size: 12,
        max_positions: 16,
        hidden_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 16,
        dropout_rate: 0.0,
        seed,
    };
    let pair = EncodedPair {
        ids: vec![2, 7, 9, 5, 3, 11, 6, 3, 0, 0],
        segment_ids: vec![0, 0, 0, 0, 0, 1, 1, 1, 0, 0],
        attention_mask: vec![1, 1, 1, 1, 1, 1, 1, 1, 0, 0],
    };
    (config, pair, 1)
}

fn pair_loss_value<T: Real>(model: &EncoderModel<T>, pair: &EncodedPair, label: u8) -> Result<f64> {
    let mut tape = Tape::new();
    let b = model.bind_frozen(&mut tape);
    let h = model.encode_on(&mut tape, &b, pair, None)?;
    let z = model.pair_logits_on(&mut tape, &b, h)?;
    let l = tape.pair_nll(z, &[label]);
    Ok(tape.value(l).data[0].as_f64())
}

/// Parameter entries that can influence the pair loss for `pair`.
fn reachable_entries<T: Real>(model: &EncoderModel<T>, pair: &EncodedPair) -> Vec<(usize, usize)> {
    let mut entries = Vec::new();
    let h = model.config.hidden_dim;
    for (pi, p) in model.params.iter().enumerate() {
        if p.name.starts_with("mlm_head") {
            continue;
        }
        let rows: Vec<usize> = match p.name.as_str() {
            "embeddings.token" => pair.ids.clone(),
            "embeddings.position" => (0..pair.ids.len()).collect(),
            "embeddings.segment" => pair.segment_ids.iter().map(|&s| s as usize).collect(),
            _ => (0..p.tensor.rows).collect(),
        };
        let mut rows: Vec<usize> = rows.into_iter().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        if p.name.starts_with("embeddings.") && !p.name.contains("norm") {
            rows.retain(|&r| r < p.tensor.rows);
            for r in rows {
                entries.extend((0..h).map(|c| (pi, r * h + c)));
            }
        } else {
            entries.extend((0..p.tensor.data.len()).map(|e| (pi, e)));
        }
    }
    entries
}

/// Finite-difference check of the pair-loss gradient at `samples` randomly
/// chosen parameter entries of a freshly initialised two-layer model. The
/// analytic gradient is taken in `T`; the central differences are always
/// evaluated in f64 at the same parameter point, since f32 differences of a
/// loss near ln 2 carry more rounding noise than the f32 tolerance allows.
pub fn end_to_end_check<T: Real>(precision: Precision, seed: u64, samples: usize) -> Result<CheckResult> {
    let (config, pair, label) = spot_check_fixture(seed);
    let base = EncoderModel::<f32>::init(&config)?;
    let model: EncoderModel<T> = base.cast();

    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let h = model.encode_on(&mut tape, &b, &pair, None)?;
    let z = model.pair_logits_on(&mut tape, &b, h)?;
    let loss = tape.pair_nll(z, &[label]);
    let grads = tape.backward(loss)?;

    let reference: EncoderModel<f64> = model.cast();
    let entries = reachable_entries(&model, &pair);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut analytic = Vec::with_capacity(samples);
    let mut numeric = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (pi, e) = entries[rng.gen_range(0..entries.len())];
        analytic.push(grads.get(b.vars[pi]).data[e].as_f64());
        let (plus, minus, step) = perturb(reference.params[pi].tensor.data[e]);
        let mut m = reference.clone();
        m.params[pi].tensor.data[e] = plus;
        let lp = pair_loss_value(&m, &pair, label)?;
        m.params[pi].tensor.data[e] = minus;
        let lm = pair_loss_value(&m, &pair, label)?;
        numeric.push((lp - lm) / step);
    }
    if analytic.iter().all(|&g| g == 0.0) {
        return Err(Error::NonFinite("end-to-end check sampled only zero gradients".into()));
    }
    let err = relative_error(&analytic, &numeric);
    Ok(CheckResult {
        name: format!("end_to_end_pair_loss[{samples} params]"),
        precision,
        relative_error: err,
        tolerance: precision.tolerance(),
        passed: err <= precision.tolerance(),
    })
}

/// Every primitive in both precisions plus the end-to-end spot check.
pub fn run_suite(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    run_primitives::<f32>(Precision::F32, opts, &mut results);
    run_primitives::<f64>(Precision::F64, opts, &mut results);
    results.push(end_to_end_check::<f64>(Precision::F64, opts.seed, 20)?);
    results.push(end_to_end_check::<f32>(Precision::F32, opts.seed, 20)?);
    Ok(GradcheckReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn corruption_is_detected() {
        let opts = GradcheckOptions {
            seed: 1,
            corrupt: Some("layer_norm".into()),
        };
        let mut results = Vec::new();
        run_primitives::<f64>(Precision::F64, &opts, &mut results);
        let bad: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert_eq!(bad, ["layer_norm"]);
    }
}

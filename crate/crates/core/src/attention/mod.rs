//! Full-precision reference attention, rotary embeddings, and trace replay.

mod replay;

pub use replay::{
    replay, Aggregate, HeadSummary, ReplayOptions, RunReport, StepMetrics, REPORT_SCHEMA_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::cache::Tier;
use crate::error::{Error, Result};

pub const DEFAULT_ROPE_THETA: f64 = 10_000.0;

/// `1/sqrt(head_dim)`.
pub fn default_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

/// One attention step over a set of cached tokens.
///
/// Per-token vectors are ordered by ascending token index regardless of how
/// the tokens are stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnStepResult {
    pub output: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub tokens: Vec<usize>,
    pub tiers: Vec<Tier>,
    pub argmax_token: usize,
}

impl AttnStepResult {
    pub(crate) fn assemble(
        tokens: Vec<usize>,
        tiers: Vec<Tier>,
        logits: Vec<f64>,
        probs: Vec<f64>,
        output: Vec<f64>,
    ) -> Self {
        let argmax_token = tokens[argmax(&probs)];
        Self {
            output,
            logits,
            probs,
            tokens,
            tiers,
            argmax_token,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prob_of(&self, token: usize) -> Option<f64> {
        self.tokens
            .binary_search(&token)
            .ok()
            .map(|i| self.probs[i])
    }

    /// Copy keeping only `keep` (ascending token indices present in `self`).
    pub fn restricted_to(&self, keep: &[usize]) -> Result<Self> {
        let mut idx = Vec::with_capacity(keep.len());
        for t in keep {
            match self.tokens.binary_search(t) {
                Ok(i) => idx.push(i),
                Err(_) => return Err(Error::invalid(format!("token {t} not in result"))),
            }
        }
        Ok(Self {
            output: self.output.clone(),
            logits: idx.iter().map(|&i| self.logits[i]).collect(),
            probs: idx.iter().map(|&i| self.probs[i]).collect(),
            tokens: keep.to_vec(),
            tiers: idx.iter().map(|&i| self.tiers[i]).collect(),
            argmax_token: self.argmax_token,
        })
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the later index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v >= values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn weighted_sum<V: AsRef<[f32]>>(probs: &[f64], values: &[V], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (p, v) in probs.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v.as_ref()) {
            *o += p * f64::from(*x);
        }
    }
    out
}

/// Rotary embedding pairing channel `2i` with `2i+1` at angle
/// `position * theta_base^(-2i/d)`.
pub fn apply_rope(x: &[f32], position: usize, theta_base: f64) -> Result<Vec<f32>> {
    let d = x.len();
    if !d.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "rope needs an even head_dim, got {d}"
        )));
    }
    let mut out = vec![0.0f32; d];
    for i in 0..d / 2 {
        let freq = theta_base.powf(-2.0 * i as f64 / d as f64);
        let (sin, cos) = (position as f64 * freq).sin_cos();
        let (a, b) = (f64::from(x[2 * i]), f64::from(x[2 * i + 1]));
        out[2 * i] = (a * cos - b * sin) as f32;
        out[2 * i + 1] = (a * sin + b * cos) as f32;
    }
    Ok(out)
}

/// Plain softmax attention; token indices are the row positions of `keys`.
pub fn reference_attend<K: AsRef<[f32]>, V: AsRef<[f32]>>(
    q: &[f32],
    keys: &[K],
    values: &[V],
    scale: f64,
) -> Result<AttnStepResult> {
    if keys.is_empty() {
        return Err(Error::InvalidState("attention over an empty cache".into()));
    }
    if keys.len() != values.len() {
        return Err(Error::invalid(format!(
            "{} keys but {} values",
            keys.len(),
            values.len()
        )));
    }
    let dim = values[0].as_ref().len();
    for (i, (k, v)) in keys.iter().zip(values).enumerate() {
        if k.as_ref().len() != q.len() || v.as_ref().len() != dim {
            return Err(Error::invalid(format!(
                "token {i} has mismatched dimensions"
            )));
        }
    }
    let logits: Vec<f64> = keys.iter().map(|k| scale * dot(q, k.as_ref())).collect();
    let probs = softmax(&logits);
    let output = weighted_sum(&probs, values, dim);
    Ok(AttnStepResult::assemble(
        (0..keys.len()).collect(),
        vec![Tier::Importance; keys.len()],
        logits,
        probs,
        output,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm(x: &[f32]) -> f64 {
        dot(x, x).sqrt()
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = [0.3f32, -1.2, 2.0, 0.7];
        assert_eq!(apply_rope(&x, 0, DEFAULT_ROPE_THETA).unwrap(), x.to_vec());
    }

    #[test]
    fn rope_rejects_odd_dim() {
        assert!(matches!(
            apply_rope(&[1.0, 2.0, 3.0], 1, DEFAULT_ROPE_THETA),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn rope_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = rng.gen_range(0..4096);
            let y = apply_rope(&x, p, DEFAULT_ROPE_THETA).unwrap();
            assert!((norm(&x) - norm(&y)).abs() < 1e-6 * norm(&x).max(1.0));
        }
    }

    #[test]
    fn rope_relative_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let q: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = rng.gen_range(0..500);
            let m = n + rng.gen_range(0..500);
            let lhs = dot(
                &apply_rope(&q, m, DEFAULT_ROPE_THETA).unwrap(),
                &apply_rope(&k, n, DEFAULT_ROPE_THETA).unwrap(),
            );
            let rhs = dot(&apply_rope(&q, m - n, DEFAULT_ROPE_THETA).unwrap(), &k);
            assert!((lhs - rhs).abs() < 1e-5, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn single_token() {
        let r = reference_attend(&[1.0, 2.0], &[vec![0.5, 0.5]], &[vec![3.0, -1.0]], 1.0).unwrap();
        assert_eq!(r.probs, vec![1.0]);
        assert_eq!(r.output, vec![3.0, -1.0]);
        assert_eq!(r.argmax_token, 0);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let k = vec![vec![1.0f32, 0.0], vec![1.0, 0.0]];
        let v = vec![vec![1.0f32, 0.0], vec![0.0, 1.0]];
        let r = reference_attend(&[2.0, 1.0], &k, &v, 1.0).unwrap();
        assert_eq!(r.probs, vec![0.5, 0.5]);
        assert_eq!(r.output, vec![0.5, 0.5]);
    }

    #[test]
    fn three_token_softmax() {
        let p = softmax(&[1.0, 0.0, -1.0]);
        let expect = [0.665_240_955_8, 0.244_728_471_1, 0.090_030_573_2];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
        // same through attention: q.k gives the logits directly
        let k = vec![vec![1.0f32], vec![0.0], vec![-1.0]];
        let r = reference_attend(&[1.0], &k, &k, 1.0).unwrap();
        assert!((r.probs[0] - 0.6652).abs() < 1e-4);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&[1e4, -1e4, 9999.0, 0.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_cache_is_invalid_state() {
        let keys: Vec<Vec<f32>> = vec![];
        assert!(matches!(
            reference_attend(&[1.0], &keys, &keys, 1.0),
            Err(Error::InvalidState(_))
        ));
    }
}

//! Query/key channel balancing.
//!
//! Keys carry systematic outlier channels that blow up per-token quantization
//! ranges. A per-channel factor `b = sqrt(max|q| / max|k|)`, measured once
//! over the prefill, multiplies keys before quantization and divides queries,
//! so `(q / b) . (k * b) = q . k` while the stored keys lose most of their
//! outlier magnitude.

use std::io::Write;

use serde::Serialize;

use crate::attention::apply_rope;
use crate::cache::ModelDims;
use crate::error::{Error, Result};
use crate::trace::Trace;

/// Floor applied to both channel maxima.
pub const DEFAULT_EPSILON: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelBalancer {
    n_layers: usize,
    n_kv_heads: usize,
    head_dim: usize,
    epsilon: f32,
    factors: Vec<f32>,
}

/// Factors for one KV head. `queries` pools every query head mapped onto it.
pub fn head_factors<Q: AsRef<[f32]>, K: AsRef<[f32]>>(
    queries: &[Q],
    keys: &[K],
    head_dim: usize,
    epsilon: f32,
) -> Result<Vec<f32>> {
    if keys.is_empty() || queries.is_empty() {
        return Err(Error::invalid("balancer needs at least one prefill token"));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!(
            "epsilon {epsilon} must be positive"
        )));
    }
    let channel_max = |rows: &mut dyn Iterator<Item = &[f32]>| -> Result<Vec<f32>> {
        let mut m = vec![0.0f32; head_dim];
        for row in rows {
            if row.len() != head_dim {
                return Err(Error::invalid(format!(
                    "prefill row has {} channels, expected {head_dim}",
                    row.len()
                )));
            }
            for (a, x) in m.iter_mut().zip(row) {
                *a = a.max(x.abs());
            }
        }
        Ok(m)
    };
    let q_max = channel_max(&mut queries.iter().map(|r| r.as_ref()))?;
    let k_max = channel_max(&mut keys.iter().map(|r| r.as_ref()))?;
    Ok(q_max
        .iter()
        .zip(&k_max)
        .map(|(&q, &k)| {
            let ratio = f64::from(q.max(epsilon)) / f64::from(k.max(epsilon));
            ratio.sqrt() as f32
        })
        .collect())
}

impl ChannelBalancer {
    /// Measures the balancer over the prefill of `trace`.
    ///
    /// When the trace is not yet rotated, queries and keys are rotated first
    /// so the factors describe the tensors attention actually sees.
    pub fn compute(trace: &Trace, epsilon: f32, theta_base: f64) -> Result<Self> {
        let dims = trace.dims();
        let prefill = trace.n_prefill();
        if prefill == 0 {
            return Err(Error::invalid("balancer needs a non-empty prefill"));
        }
        let group = dims.group_factor();
        let rotate = |x: &[f32], pos: usize| -> Result<Vec<f32>> {
            if trace.header.rope_applied {
                Ok(x.to_vec())
            } else {
                apply_rope(x, pos, theta_base)
            }
        };
        let mut factors = Vec::with_capacity(dims.n_layers * dims.n_kv_heads * dims.head_dim);
        for layer in 0..dims.n_layers {
            for kv in 0..dims.n_kv_heads {
                let mut queries = Vec::with_capacity(prefill * group);
                let mut keys = Vec::with_capacity(prefill);
                for t in 0..prefill {
                    for h in kv * group..(kv + 1) * group {
                        queries.push(rotate(trace.q(t, layer, h), t)?);
                    }
                    keys.push(rotate(trace.k(t, layer, kv), t)?);
                }
                factors.extend(head_factors(&queries, &keys, dims.head_dim, epsilon)?);
            }
        }
        Ok(Self {
            n_layers: dims.n_layers,
            n_kv_heads: dims.n_kv_heads,
            head_dim: dims.head_dim,
            epsilon,
            factors,
        })
    }

    pub fn from_factors(dims: ModelDims, epsilon: f32, factors: Vec<f32>) -> Result<Self> {
        let expect = dims.n_layers * dims.n_kv_heads * dims.head_dim;
        if factors.len() != expect {
            return Err(Error::invalid(format!(
                "balancer has {} factors, dims need {expect}",
                factors.len()
            )));
        }
        if let Some(bad) = factors.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(Error::invalid(format!(
                "balancer factor {bad} must be positive"
            )));
        }
        Ok(Self {
            n_layers: dims.n_layers,
            n_kv_heads: dims.n_kv_heads,
            head_dim: dims.head_dim,
            epsilon,
            factors,
        })
    }

    pub fn factors(&self, layer: usize, kv_head: usize) -> &[f32] {
        assert!(layer < self.n_layers && kv_head < self.n_kv_heads);
        let start = (layer * self.n_kv_heads + kv_head) * self.head_dim;
        &self.factors[start..start + self.head_dim]
    }

    pub fn epsilon(&self) -> f32 {
        self.epsilon
    }

    pub fn matches(&self, dims: &ModelDims) -> bool {
        self.n_layers == dims.n_layers
            && self.n_kv_heads == dims.n_kv_heads
            && self.head_dim == dims.head_dim
    }

    /// Storage at 16 bits per factor.
    pub fn storage_bytes(&self) -> usize {
        self.factors.len() * 2
    }
}

pub fn balance_key(k: &[f32], b: &[f32]) -> Result<Vec<f32>> {
    if k.len() != b.len() {
        return Err(Error::invalid(format!(
            "key has {} channels, balancer {}",
            k.len(),
            b.len()
        )));
    }
    Ok(k.iter().zip(b).map(|(x, s)| x * s).collect())
}

pub fn balance_query(q: &[f32], b: &[f32]) -> Result<Vec<f32>> {
    if q.len() != b.len() {
        return Err(Error::invalid(format!(
            "query has {} channels, balancer {}",
            q.len(),
            b.len()
        )));
    }
    Ok(q.iter().zip(b).map(|(x, s)| x / s).collect())
}

/// Per-channel magnitude maxima over every token in a trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChannelStats {
    pub layer: usize,
    /// KV head; `max_abs_q` pools the query heads that share it.
    pub head: usize,
    pub channel: usize,
    pub max_abs_q: f32,
    pub max_abs_k: f32,
    pub max_abs_v: f32,
}

pub fn analyze_outliers(trace: &Trace) -> Vec<ChannelStats> {
    let dims = trace.dims();
    let group = dims.group_factor();
    let d = dims.head_dim;
    let mut out = Vec::with_capacity(dims.n_layers * dims.n_kv_heads * d);
    for layer in 0..dims.n_layers {
        for kv in 0..dims.n_kv_heads {
            let mut q = vec![0.0f32; d];
            let mut k = vec![0.0f32; d];
            let mut v = vec![0.0f32; d];
            for step in 0..trace.n_steps() {
                for h in kv * group..(kv + 1) * group {
                    fold_max(&mut q, trace.q(step, layer, h));
                }
                fold_max(&mut k, trace.k(step, layer, kv));
                fold_max(&mut v, trace.v(step, layer, kv));
            }
            out.extend((0..d).map(|c| ChannelStats {
                layer,
                head: kv,
                channel: c,
                max_abs_q: q[c],
                max_abs_k: k[c],
                max_abs_v: v[c],
            }));
        }
    }
    out
}

fn fold_max(acc: &mut [f32], row: &[f32]) {
    for (a, x) in acc.iter_mut().zip(row) {
        *a = a.max(x.abs());
    }
}

/// CSV with header `layer,head,channel,max_abs_q,max_abs_k,max_abs_v`.
pub fn write_outlier_csv(stats: &[ChannelStats], sink: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for s in stats {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Channels whose key maximum exceeds `ratio` times the head's median key maximum.
pub fn flag_key_outliers(stats: &[ChannelStats], ratio: f32) -> Vec<(usize, usize, usize)> {
    let mut flagged = Vec::new();
    for head in stats.chunk_by(|a, b| a.layer == b.layer && a.head == b.head) {
        let mut maxima: Vec<f32> = head.iter().map(|s| s.max_abs_k).collect();
        maxima.sort_by(|a, b| a.total_cmp(b));
        let median = maxima[maxima.len() / 2];
        flagged.extend(
            head.iter()
                .filter(|s| s.max_abs_k > ratio * median)
                .map(|s| (s.layer, s.head, s.channel)),
        );
    }
    flagged
}

//! Offline replay of a captured trace through a cache policy.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply_rope, default_scale, reference_attend, DEFAULT_ROPE_THETA};
use crate::balance::{ChannelBalancer, DEFAULT_EPSILON};
use crate::cache::{error_metrics, ErrorMetrics, HeadCache, MemoryReport, ModelDims};
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::trace::{AnswerKey, Trace};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayOptions {
    /// Logit scale; `1/sqrt(head_dim)` when unset.
    pub scale: Option<f64>,
    pub theta_base: f64,
    pub balancer_epsilon: f32,
    /// Expected argmax token per generation step, for retrieval fidelity.
    pub answers: Option<AnswerKey>,
    /// Recorded in the report only.
    pub seed: u64,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            scale: None,
            theta_base: DEFAULT_ROPE_THETA,
            balancer_epsilon: DEFAULT_EPSILON,
            answers: None,
            seed: 0,
        }
    }
}

/// Averages over every `(layer, query head)` at one generation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub cosine: f64,
    pub logit_mse: f64,
    pub argmax_agreement: f64,
    pub retrieval_hit: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub layer: usize,
    pub head: usize,
    pub kv_head: usize,
    pub mean_cosine: f64,
    pub mean_logit_mse: f64,
    pub argmax_agreement: f64,
    pub retrieval_fidelity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_cosine: f64,
    pub min_cosine: f64,
    pub mean_logit_mse: f64,
    pub mean_l2_rel_error: f64,
    pub argmax_agreement: f64,
    pub retrieval_fidelity: Option<f64>,
    pub demotions: usize,
    pub evictions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub dims: ModelDims,
    pub n_prefill: usize,
    pub n_gen: usize,
    pub policy: PolicyConfig,
    pub seed: u64,
    pub steps: Vec<StepMetrics>,
    pub heads: Vec<HeadSummary>,
    pub aggregate: Aggregate,
    pub memory: MemoryReport,
}

impl RunReport {
    /// One row per generation step.
    pub fn write_steps_csv(&self, sink: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        for s in &self.steps {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per query head, per generation step.
#[derive(Clone, Copy, Debug)]
struct Sample {
    metrics: ErrorMetrics,
    hit: Option<bool>,
}

struct ShardOutcome {
    /// `samples[h][g]` for the shard's query heads in order.
    samples: Vec<Vec<Sample>>,
    cache: HeadCache,
}

/// Replays `trace` through `policy`, comparing each generation-step
/// attention against full-precision attention over the same tokens.
///
/// Prefill tokens are scored with causal full-precision attention and the
/// policy runs once at the end of prefill, then after every generation step.
pub fn replay(
    trace: &Trace,
    policy: &PolicyConfig,
    dims: &ModelDims,
    options: &ReplayOptions,
) -> Result<RunReport> {
    let td = trace.dims();
    if td != *dims {
        return Err(Error::Mismatch(format!(
            "trace dims {td:?} differ from configured dims {dims:?}"
        )));
    }
    policy.validate_for(dims.head_dim)?;
    if trace.n_prefill() == 0 && trace.n_gen() == 0 {
        return Err(Error::invalid("trace has no steps"));
    }
    let scale = options
        .scale
        .unwrap_or_else(|| default_scale(dims.head_dim));
    let balancer = if policy.outlier_aware {
        Some(ChannelBalancer::compute(
            trace,
            options.balancer_epsilon,
            options.theta_base,
        )?)
    } else {
        None
    };

    let shards: Vec<(usize, usize)> = (0..dims.n_layers)
        .flat_map(|l| (0..dims.n_kv_heads).map(move |g| (l, g)))
        .collect();
    let outcomes: Vec<ShardOutcome> = shards
        .par_iter()
        .map(|&(layer, kv)| {
            replay_shard(trace, policy, layer, kv, scale, balancer.as_ref(), options)
        })
        .collect::<Result<_>>()?;

    Ok(summarize(trace, policy, options, outcomes))
}

fn replay_shard(
    trace: &Trace,
    policy: &PolicyConfig,
    layer: usize,
    kv: usize,
    scale: f64,
    balancer: Option<&ChannelBalancer>,
    options: &ReplayOptions,
) -> Result<ShardOutcome> {
    let dims = trace.dims();
    let group = dims.group_factor();
    let heads = kv * group..(kv + 1) * group;
    let rotate = |x: &[f32], pos: usize| -> Result<Vec<f32>> {
        if trace.header.rope_applied {
            Ok(x.to_vec())
        } else {
            apply_rope(x, pos, options.theta_base)
        }
    };

    let mut cache = HeadCache::new(dims.head_dim, policy.clone())?;
    if let Some(b) = balancer {
        cache.set_balancer(b.factors(layer, kv).to_vec())?;
    }
    let mut keys: Vec<Vec<f32>> = Vec::with_capacity(trace.n_steps());
    let mut values: Vec<Vec<f32>> = Vec::with_capacity(trace.n_steps());
    let p = trace.n_prefill();

    for t in 0..p {
        let k = rotate(trace.k(t, layer, kv), t)?;
        let v = trace.v(t, layer, kv).to_vec();
        cache.append(&k, &v, t)?;
        keys.push(k);
        values.push(v);
        let tokens: Vec<usize> = (0..=t).collect();
        let mut summed = vec![0.0; t + 1];
        for h in heads.clone() {
            let q = rotate(trace.q(t, layer, h), t)?;
            let r = reference_attend(&q, &keys, &values, scale)?;
            for (s, pr) in summed.iter_mut().zip(&r.probs) {
                *s += pr;
            }
        }
        cache.accumulate(&tokens, &summed)?;
    }
    if p > 0 {
        cache.maintain(p - 1)?;
    }

    let mut samples = vec![Vec::with_capacity(trace.n_gen()); group];
    for g in 0..trace.n_gen() {
        let t = p + g;
        let k = rotate(trace.k(t, layer, kv), t)?;
        let v = trace.v(t, layer, kv).to_vec();
        cache.append(&k, &v, t)?;
        keys.push(k);
        values.push(v);
        let needle = options.answers.as_ref().and_then(|a| a.needle(g));
        let mut tokens = Vec::new();
        let mut summed = Vec::new();
        for (slot, h) in heads.clone().enumerate() {
            let q = rotate(trace.q(t, layer, h), t)?;
            let mixed = cache.attend(&q, scale)?;
            let mut reference = reference_attend(&q, &keys, &values, scale)?;
            if mixed.len() != reference.len() {
                reference = reference.restricted_to(&mixed.tokens)?;
            }
            samples[slot].push(Sample {
                metrics: error_metrics(&mixed, &reference)?,
                hit: needle.map(|n| mixed.argmax_token == n),
            });
            if summed.is_empty() {
                tokens = mixed.tokens.clone();
                summed = vec![0.0; mixed.len()];
            }
            for (s, pr) in summed.iter_mut().zip(&mixed.probs) {
                *s += pr;
            }
        }
        cache.accumulate(&tokens, &summed)?;
        cache.maintain(t)?;
    }
    Ok(ShardOutcome { samples, cache })
}

fn mean<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let (sum, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn hit_rate<'a, I: IntoIterator<Item = &'a Sample>>(xs: I) -> Option<f64> {
    let hits: Vec<bool> = xs.into_iter().filter_map(|s| s.hit).collect();
    if hits.is_empty() {
        None
    } else {
        Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    }
}

fn agreement<'a, I: IntoIterator<Item = &'a Sample>>(xs: I) -> f64 {
    mean(
        xs.into_iter()
            .map(|s| f64::from(u8::from(s.metrics.argmax_agree))),
    )
}

fn summarize(
    trace: &Trace,
    policy: &PolicyConfig,
    options: &ReplayOptions,
    outcomes: Vec<ShardOutcome>,
) -> RunReport {
    let dims = trace.dims();
    let group = dims.group_factor();
    let n_gen = trace.n_gen();

    let mut heads = Vec::with_capacity(dims.n_layers * dims.n_heads);
    for (i, o) in outcomes.iter().enumerate() {
        let layer = i / dims.n_kv_heads;
        let kv = i % dims.n_kv_heads;
        for (slot, s) in o.samples.iter().enumerate() {
            heads.push(HeadSummary {
                layer,
                head: kv * group + slot,
                kv_head: kv,
                mean_cosine: mean(s.iter().map(|x| x.metrics.cosine)),
                mean_logit_mse: mean(s.iter().map(|x| x.metrics.logit_mse)),
                argmax_agreement: agreement(s),
                retrieval_fidelity: hit_rate(s),
            });
        }
    }

    let all: Vec<&Sample> = outcomes
        .iter()
        .flat_map(|o| o.samples.iter().flatten())
        .collect();
    let steps = (0..n_gen)
        .map(|g| {
            let at: Vec<&Sample> = outcomes
                .iter()
                .flat_map(|o| o.samples.iter().map(move |s| &s[g]))
                .collect();
            StepMetrics {
                step: trace.n_prefill() + g,
                cosine: mean(at.iter().map(|x| x.metrics.cosine)),
                logit_mse: mean(at.iter().map(|x| x.metrics.logit_mse)),
                argmax_agreement: agreement(at.iter().copied()),
                retrieval_hit: hit_rate(at.iter().copied()),
            }
        })
        .collect();

    let demotions = outcomes.iter().map(|o| o.cache.demotion_log().len()).sum();
    let evictions = outcomes
        .iter()
        .map(|o| o.cache.evicted_tokens().len())
        .sum();
    let aggregate = Aggregate {
        mean_cosine: mean(all.iter().map(|x| x.metrics.cosine)),
        min_cosine: all
            .iter()
            .map(|x| x.metrics.cosine)
            .fold(if all.is_empty() { 1.0 } else { f64::INFINITY }, f64::min),
        mean_logit_mse: mean(all.iter().map(|x| x.metrics.logit_mse)),
        mean_l2_rel_error: mean(all.iter().map(|x| x.metrics.l2_rel_error)),
        argmax_agreement: agreement(all.iter().copied()),
        retrieval_fidelity: hit_rate(all.iter().copied()),
        demotions,
        evictions,
    };
    RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        dims,
        n_prefill: trace.n_prefill(),
        n_gen,
        policy: policy.clone(),
        seed: options.seed,
        steps,
        heads,
        aggregate,
        memory: MemoryReport::sum(outcomes.iter().map(|o| o.cache.memory_report())),
    }
}

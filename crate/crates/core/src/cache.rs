//! The two-tier mixed-precision KV cache.
//!
//! Every `(layer, kv_head)` owns a [`HeadCache`] holding an importance tier
//! (importance precision, full by default) and a retained tier (low-bit
//! quantized). New tokens always enter the importance tier; the policy later
//! demotes them. Under the retaining policies no token is ever dropped.
//!
//! Storage is grouped by tier: slots `0..importance_len` hold the importance
//! tier, the remaining slots the retained tier. Attention is permutation
//! invariant, so [`HeadCache::attend`] re-associates every slot with its token
//! index and computes the softmax in token order.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{dot, softmax, AttnStepResult};
use crate::balance::{balance_key, balance_query, ChannelBalancer};
use crate::error::{Error, Result};
use crate::policy::{
    select_demotions, update_scores, PolicyConfig, PolicyKind, Precision, TokenScore,
};
use crate::quant::{self, dequantize, quantize, QuantizedBlock, PARAM_BITS};

/// Width of an uncompressed cache element in memory accounting.
pub const FULL_PRECISION_BITS: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl ModelDims {
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        n_kv_heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let d = Self {
            n_layers,
            n_heads,
            n_kv_heads,
            head_dim,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::invalid(format!(
                "model dims must be positive: {self:?}"
            )));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::invalid(format!(
                "n_kv_heads {} does not divide n_heads {}",
                self.n_kv_heads, self.n_heads
            )));
        }
        Ok(())
    }

    /// Named shapes: `llama2-7b`, `llama2-13b`, `llama2-70b`, `mistral-7b`.
    pub fn preset(name: &str) -> Result<Self> {
        let (l, h, g) = match name.to_ascii_lowercase().as_str() {
            "llama2-7b" => (32, 32, 32),
            "llama2-13b" => (40, 40, 40),
            "llama2-70b" => (80, 64, 8),
            "mistral-7b" => (32, 32, 8),
            other => return Err(Error::invalid(format!("unknown model preset {other:?}"))),
        };
        Self::new(l, h, g, 128)
    }

    pub const PRESETS: [&'static str; 4] = ["llama2-7b", "llama2-13b", "llama2-70b", "mistral-7b"];

    /// Query heads per KV head.
    pub fn group_factor(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn kv_head_for(&self, head: usize) -> usize {
        head / self.group_factor()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Importance,
    Retained,
}

#[derive(Clone, Debug)]
enum Stored {
    Full(Vec<f32>),
    Quant(QuantizedBlock),
}

impl Stored {
    fn encode(x: Vec<f32>, precision: Precision) -> Result<Self> {
        Ok(match precision {
            Precision::Full => Stored::Full(x),
            Precision::Quant(spec) => Stored::Quant(quantize(&x, spec)?),
        })
    }

    fn decode(&self) -> Result<Vec<f32>> {
        match self {
            Stored::Full(x) => Ok(x.clone()),
            Stored::Quant(b) => dequantize(b),
        }
    }

    fn payload_bytes(&self) -> f64 {
        match self {
            Stored::Full(x) => x.len() as f64 * f64::from(FULL_PRECISION_BITS) / 8.0,
            Stored::Quant(b) => b.code_bytes() as f64,
        }
    }

    fn param_bytes(&self) -> f64 {
        match self {
            Stored::Full(_) => 0.0,
            Stored::Quant(b) => b.param_bytes() as f64,
        }
    }
}

#[derive(Clone, Debug)]
struct Entry {
    token: usize,
    key: Stored,
    value: Stored,
}

impl Entry {
    fn bytes(&self) -> (f64, f64) {
        (
            self.key.payload_bytes() + self.value.payload_bytes(),
            self.key.param_bytes() + self.value.param_bytes(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemotionRecord {
    pub step: usize,
    pub token_index: usize,
    pub evicted: bool,
}

/// Cache for one `(layer, kv_head)`. Single writer; distinct heads are independent.
#[derive(Clone, Debug)]
pub struct HeadCache {
    head_dim: usize,
    policy: PolicyConfig,
    balancer: Option<Vec<f32>>,
    importance: Vec<Entry>,
    retained: Vec<Entry>,
    retained_first: bool,
    scores: Vec<TokenScore>,
    evicted: Vec<usize>,
    demotion_log: Vec<DemotionRecord>,
    appended: usize,
    last_token: Option<usize>,
}

impl HeadCache {
    pub fn new(head_dim: usize, policy: PolicyConfig) -> Result<Self> {
        policy.validate_for(head_dim)?;
        Ok(Self {
            head_dim,
            policy,
            balancer: None,
            importance: Vec::new(),
            retained: Vec::new(),
            retained_first: false,
            scores: Vec::new(),
            evicted: Vec::new(),
            demotion_log: Vec::new(),
            appended: 0,
            last_token: None,
        })
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    /// Installs the frozen balancer. Must happen before the first append.
    pub fn set_balancer(&mut self, factors: Vec<f32>) -> Result<()> {
        if factors.len() != self.head_dim {
            return Err(Error::invalid(format!(
                "balancer has {} factors, head_dim is {}",
                factors.len(),
                self.head_dim
            )));
        }
        if self.appended > 0 {
            return Err(Error::InvalidState(
                "balancer must be set before tokens are cached".into(),
            ));
        }
        self.balancer = Some(factors);
        Ok(())
    }

    pub fn balancer(&self) -> Option<&[f32]> {
        self.balancer.as_deref()
    }

    fn check_dim(&self, what: &str, x: &[f32]) -> Result<()> {
        if x.len() != self.head_dim {
            return Err(Error::invalid(format!(
                "{what} has length {}, head_dim is {}",
                x.len(),
                self.head_dim
            )));
        }
        Ok(())
    }

    fn active_balancer(&self) -> Result<Option<&[f32]>> {
        match (self.policy.outlier_aware, self.balancer.as_deref()) {
            (false, _) => Ok(None),
            (true, Some(b)) => Ok(Some(b)),
            (true, None) => Err(Error::InvalidState(
                "outlier-aware cache used before its balancer was set".into(),
            )),
        }
    }

    pub fn append(&mut self, k: &[f32], v: &[f32], token_index: usize) -> Result<()> {
        self.check_dim("key", k)?;
        self.check_dim("value", v)?;
        if let Some(last) = self.last_token {
            if token_index <= last {
                return Err(Error::invalid(format!(
                    "token index {token_index} not after previous {last}"
                )));
            }
        }
        let key = match self.active_balancer()? {
            Some(b) => balance_key(k, b)?,
            None => k.to_vec(),
        };
        if self.policy.kind == PolicyKind::UniformRtn {
            let spec = Precision::Quant(self.policy.retained_precision);
            self.retained.push(Entry {
                token: token_index,
                key: Stored::encode(key, spec)?,
                value: Stored::encode(v.to_vec(), spec)?,
            });
        } else {
            let p = self.policy.importance_precision;
            self.importance.push(Entry {
                token: token_index,
                key: Stored::encode(key, p)?,
                value: Stored::encode(v.to_vec(), p)?,
            });
            self.scores.push(TokenScore::new(token_index));
        }
        self.appended += 1;
        self.last_token = Some(token_index);
        Ok(())
    }

    /// Moves tokens from the importance tier to the retained tier (or drops
    /// them under the evicting policy).
    pub fn demote(&mut self, tokens: &[usize], step: usize) -> Result<()> {
        let wanted: HashSet<usize> = tokens.iter().copied().collect();
        let present: HashSet<usize> = self.importance.iter().map(|e| e.token).collect();
        if let Some(missing) = tokens.iter().find(|t| !present.contains(t)) {
            return Err(Error::invalid(format!(
                "token {missing} is not in the importance tier"
            )));
        }
        let evict = self.policy.evicts();
        let spec = Precision::Quant(self.policy.retained_precision);
        let (moving, staying): (Vec<Entry>, Vec<Entry>) = std::mem::take(&mut self.importance)
            .into_iter()
            .partition(|e| wanted.contains(&e.token));
        self.importance = staying;
        self.scores.retain(|s| !wanted.contains(&s.token_index));
        for e in moving {
            self.demotion_log.push(DemotionRecord {
                step,
                token_index: e.token,
                evicted: evict,
            });
            if evict {
                self.evicted.push(e.token);
                continue;
            }
            self.retained.push(Entry {
                token: e.token,
                key: Stored::encode(e.key.decode()?, spec)?,
                value: Stored::encode(e.value.decode()?, spec)?,
            });
        }
        Ok(())
    }

    /// Attention over both tiers. Retained entries are dequantized on read.
    pub fn attend(&self, q: &[f32], scale: f64) -> Result<AttnStepResult> {
        self.check_dim("query", q)?;
        if self.is_empty() {
            return Err(Error::InvalidState("attention over an empty cache".into()));
        }
        let q = match self.active_balancer()? {
            Some(b) => balance_query(q, b)?,
            None => q.to_vec(),
        };
        let mut rows: Vec<(usize, Tier, f64, Vec<f32>)> = Vec::with_capacity(self.len());
        for (entry, tier) in self.slots() {
            let k = entry.key.decode()?;
            rows.push((
                entry.token,
                tier,
                scale * dot(&q, &k),
                entry.value.decode()?,
            ));
        }
        rows.sort_by_key(|r| r.0);
        let logits: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let probs = softmax(&logits);
        let values: Vec<&[f32]> = rows.iter().map(|r| r.3.as_slice()).collect();
        let output = crate::attention::weighted_sum(&probs, &values, self.head_dim);
        Ok(AttnStepResult::assemble(
            rows.iter().map(|r| r.0).collect(),
            rows.iter().map(|r| r.1).collect(),
            logits,
            probs,
            output,
        ))
    }

    /// Adds attention probabilities to the importance-tier scores. `tokens`
    /// and `probs` are parallel; tokens outside the importance tier are skipped.
    pub fn accumulate(&mut self, tokens: &[usize], probs: &[f64]) -> Result<()> {
        if tokens.len() != probs.len() {
            return Err(Error::invalid("tokens and probabilities differ in length"));
        }
        let mut sub = Vec::with_capacity(self.scores.len());
        let mut j = 0;
        for s in &self.scores {
            while j < tokens.len() && tokens[j] < s.token_index {
                j += 1;
            }
            sub.push(if j < tokens.len() && tokens[j] == s.token_index {
                probs[j]
            } else {
                0.0
            });
        }
        update_scores(&mut self.scores, &sub)
    }

    /// One maintenance pass: select and demote. Returns the demoted tokens.
    pub fn maintain(&mut self, step: usize) -> Result<Vec<usize>> {
        let demote = select_demotions(&self.scores, &self.policy, self.appended);
        self.demote(&demote, step)?;
        Ok(demote)
    }

    fn slots(&self) -> impl Iterator<Item = (&Entry, Tier)> {
        let imp = self.importance.iter().map(|e| (e, Tier::Importance));
        let ret = self.retained.iter().map(|e| (e, Tier::Retained));
        let (first, second): (Box<dyn Iterator<Item = _>>, Box<dyn Iterator<Item = _>>) =
            if self.retained_first {
                (Box::new(ret), Box::new(imp))
            } else {
                (Box::new(imp), Box::new(ret))
            };
        first.chain(second)
    }

    /// Storage slot -> token index.
    pub fn permutation(&self) -> Vec<usize> {
        self.slots().map(|(e, _)| e.token).collect()
    }

    /// Reorders storage arbitrarily, keeping each tier contiguous.
    pub fn shuffle_storage<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.importance.shuffle(rng);
        self.retained.shuffle(rng);
        self.retained_first = rng.gen();
    }

    pub fn len(&self) -> usize {
        self.importance.len() + self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn appended(&self) -> usize {
        self.appended
    }

    pub fn importance_tokens(&self) -> Vec<usize> {
        sorted(self.importance.iter().map(|e| e.token))
    }

    pub fn retained_tokens(&self) -> Vec<usize> {
        sorted(self.retained.iter().map(|e| e.token))
    }

    pub fn evicted_tokens(&self) -> &[usize] {
        &self.evicted
    }

    pub fn scores(&self) -> &[TokenScore] {
        &self.scores
    }

    pub fn demotion_log(&self) -> &[DemotionRecord] {
        &self.demotion_log
    }

    /// Byte accounting of what is stored right now.
    pub fn memory_report(&self) -> MemoryReport {
        let mut b = MemoryBreakdown::default();
        for e in &self.importance {
            let (payload, params) = e.bytes();
            b.importance_bytes += payload;
            b.scales_zeros_bytes += params;
        }
        for e in &self.retained {
            let (payload, params) = e.bytes();
            b.retained_bytes += payload;
            b.scales_zeros_bytes += params;
        }
        if let (true, Some(f)) = (self.policy.outlier_aware, &self.balancer) {
            b.balancer_bytes = f.len() as f64 * f64::from(PARAM_BITS) / 8.0;
        }
        let full =
            self.appended as f64 * 2.0 * self.head_dim as f64 * f64::from(FULL_PRECISION_BITS)
                / 8.0;
        MemoryReport::from_breakdown(full, b)
    }
}

fn sorted(it: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = it.collect();
    v.sort_unstable();
    v
}

/// Caches for every `(layer, kv_head)` of a model.
#[derive(Clone, Debug)]
pub struct MixedKVCache {
    dims: ModelDims,
    heads: Vec<HeadCache>,
}

impl MixedKVCache {
    pub fn new(dims: ModelDims, policy: PolicyConfig) -> Result<Self> {
        dims.validate()?;
        let head = HeadCache::new(dims.head_dim, policy)?;
        Ok(Self {
            dims,
            heads: vec![head; dims.n_layers * dims.n_kv_heads],
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    fn index(&self, layer: usize, kv_head: usize) -> Result<usize> {
        if layer >= self.dims.n_layers || kv_head >= self.dims.n_kv_heads {
            return Err(Error::invalid(format!(
                "no cache for layer {layer} kv head {kv_head}"
            )));
        }
        Ok(layer * self.dims.n_kv_heads + kv_head)
    }

    pub fn head(&self, layer: usize, kv_head: usize) -> Result<&HeadCache> {
        Ok(&self.heads[self.index(layer, kv_head)?])
    }

    pub fn head_mut(&mut self, layer: usize, kv_head: usize) -> Result<&mut HeadCache> {
        let i = self.index(layer, kv_head)?;
        Ok(&mut self.heads[i])
    }

    /// Layer-major: `heads()[layer * n_kv_heads + kv_head]`.
    pub fn heads(&self) -> &[HeadCache] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [HeadCache] {
        &mut self.heads
    }

    pub fn set_balancer(&mut self, balancer: &ChannelBalancer) -> Result<()> {
        if !balancer.matches(&self.dims) {
            return Err(Error::invalid("balancer dims do not match the cache"));
        }
        for layer in 0..self.dims.n_layers {
            for kv in 0..self.dims.n_kv_heads {
                let f = balancer.factors(layer, kv).to_vec();
                self.head_mut(layer, kv)?.set_balancer(f)?;
            }
        }
        Ok(())
    }

    pub fn append(
        &mut self,
        layer: usize,
        kv_head: usize,
        k: &[f32],
        v: &[f32],
        token_index: usize,
    ) -> Result<()> {
        self.head_mut(layer, kv_head)?.append(k, v, token_index)
    }

    pub fn demote(
        &mut self,
        layer: usize,
        kv_head: usize,
        tokens: &[usize],
        step: usize,
    ) -> Result<()> {
        self.head_mut(layer, kv_head)?.demote(tokens, step)
    }

    /// Attention for query head `head`, served by its KV head.
    pub fn attend(
        &self,
        layer: usize,
        head: usize,
        q: &[f32],
        scale: f64,
    ) -> Result<AttnStepResult> {
        if head >= self.dims.n_heads {
            return Err(Error::invalid(format!("no query head {head}")));
        }
        self.head(layer, self.dims.kv_head_for(head))?
            .attend(q, scale)
    }

    pub fn memory_report(&self) -> MemoryReport {
        MemoryReport::sum(self.heads.iter().map(HeadCache::memory_report))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub importance_bytes: f64,
    pub retained_bytes: f64,
    pub scales_zeros_bytes: f64,
    pub balancer_bytes: f64,
}

impl MemoryBreakdown {
    pub fn total(&self) -> f64 {
        self.importance_bytes + self.retained_bytes + self.scales_zeros_bytes + self.balancer_bytes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub full_cache_bytes: f64,
    pub compressed_bytes: f64,
    pub ratio_percent: f64,
    pub breakdown: MemoryBreakdown,
}

impl MemoryReport {
    pub fn from_breakdown(full_cache_bytes: f64, breakdown: MemoryBreakdown) -> Self {
        let compressed_bytes = breakdown.total();
        let ratio_percent = if full_cache_bytes > 0.0 {
            100.0 * compressed_bytes / full_cache_bytes
        } else {
            0.0
        };
        Self {
            full_cache_bytes,
            compressed_bytes,
            ratio_percent,
            breakdown,
        }
    }

    pub fn sum(reports: impl IntoIterator<Item = MemoryReport>) -> Self {
        let mut full = 0.0;
        let mut b = MemoryBreakdown::default();
        for r in reports {
            full += r.full_cache_bytes;
            b.importance_bytes += r.breakdown.importance_bytes;
            b.retained_bytes += r.breakdown.retained_bytes;
            b.scales_zeros_bytes += r.breakdown.scales_zeros_bytes;
            b.balancer_bytes += r.breakdown.balancer_bytes;
        }
        Self::from_breakdown(full, b)
    }
}

/// Storage precision of one tier in analytic accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierPrecision {
    Full,
    Int(u8),
    Evicted,
}

/// Inputs for closed-form memory accounting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryParams {
    pub dims: ModelDims,
    pub seq_len: usize,
    pub batch: usize,
    pub importance_ratio: f64,
    pub importance: TierPrecision,
    pub retained: TierPrecision,
    pub group_size: usize,
    pub outlier_aware: bool,
    /// Bits of one uncompressed element.
    pub element_bits: u32,
}

impl MemoryParams {
    pub fn new(
        dims: ModelDims,
        importance_ratio: f64,
        importance: TierPrecision,
        retained: TierPrecision,
    ) -> Self {
        Self {
            dims,
            seq_len: 4096,
            batch: 1,
            importance_ratio,
            importance,
            retained,
            group_size: dims.head_dim / 2,
            outlier_aware: false,
            element_bits: FULL_PRECISION_BITS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if !(0.0..=1.0).contains(&self.importance_ratio) {
            return Err(Error::invalid("importance ratio must lie in [0, 1]"));
        }
        if self.group_size == 0 || self.seq_len == 0 || self.batch == 0 || self.element_bits == 0 {
            return Err(Error::invalid(
                "group size, seq len, batch and element bits must be positive",
            ));
        }
        for t in [self.importance, self.retained] {
            if let TierPrecision::Int(bits) = t {
                quant::check_bits(bits)?;
            }
        }
        if self.importance == TierPrecision::Evicted {
            return Err(Error::invalid("the importance tier cannot be evicted"));
        }
        Ok(())
    }
}

/// Closed-form footprint: `r * eff(importance) + (1 - r) * eff(retained)` bits
/// per element, with `eff(N) = N + 32 / group_size` for integer tiers.
pub fn memory_report(p: &MemoryParams) -> Result<MemoryReport> {
    p.validate()?;
    let d = &p.dims;
    let per_seq = (d.n_layers * d.n_kv_heads * d.head_dim) as f64;
    let elements = p.batch as f64 * p.seq_len as f64 * per_seq * 2.0;
    let full = elements * f64::from(p.element_bits) / 8.0;
    let overhead = 2.0 * f64::from(PARAM_BITS) / p.group_size as f64;

    let mut b = MemoryBreakdown::default();
    let tier = |precision: TierPrecision, share: f64| -> (f64, f64) {
        let n = elements * share;
        match precision {
            TierPrecision::Full => (n * f64::from(p.element_bits) / 8.0, 0.0),
            TierPrecision::Int(bits) => (n * f64::from(bits) / 8.0, n * overhead / 8.0),
            TierPrecision::Evicted => (0.0, 0.0),
        }
    };
    let (imp, imp_params) = tier(p.importance, p.importance_ratio);
    let (ret, ret_params) = tier(p.retained, 1.0 - p.importance_ratio);
    b.importance_bytes = imp;
    b.retained_bytes = ret;
    b.scales_zeros_bytes = imp_params + ret_params;
    if p.outlier_aware {
        b.balancer_bytes = p.batch as f64 * per_seq * f64::from(PARAM_BITS) / 8.0;
    }
    Ok(MemoryReport::from_breakdown(full, b))
}

/// Comparison of a compressed attention step against the reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub logit_mse: f64,
    pub cosine: f64,
    pub l2_rel_error: f64,
    pub argmax_agree: bool,
}

pub fn error_metrics(result: &AttnStepResult, reference: &AttnStepResult) -> Result<ErrorMetrics> {
    if result.logits.len() != reference.logits.len() {
        return Err(Error::invalid(format!(
            "{} logits vs {} in the reference",
            result.logits.len(),
            reference.logits.len()
        )));
    }
    if result.output.len() != reference.output.len() {
        return Err(Error::invalid("outputs differ in dimension"));
    }
    let n = result.logits.len().max(1) as f64;
    let logit_mse = result
        .logits
        .iter()
        .zip(&reference.logits)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let dot: f64 = result
        .output
        .iter()
        .zip(&reference.output)
        .map(|(a, b)| a * b)
        .sum();
    let na = result.output.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = reference.output.iter().map(|b| b * b).sum::<f64>().sqrt();
    let cosine = match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (false, false) => dot / (na * nb),
        _ => 0.0,
    };
    let diff = result
        .output
        .iter()
        .zip(&reference.output)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let l2_rel_error = if nb > 0.0 { diff / nb } else { diff };
    Ok(ErrorMetrics {
        logit_mse,
        cosine,
        l2_rel_error,
        argmax_agree: result.argmax_token == reference.argmax_token,
    })
}

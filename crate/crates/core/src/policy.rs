//! Importance selection: which cached tokens stay in the high-precision tier.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{dot, softmax, weighted_sum, AttnStepResult};
use crate::cache::Tier;
use crate::error::{Error, Result};
use crate::quant::{self, QuantSpec};

pub const DEFAULT_RECENT_WINDOW: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Rank by accumulated attention, demote the rest to the retained tier.
    HeavyHitter,
    /// Keep the newest tokens, demote the rest.
    RecencyOnly,
    /// Everything at retained precision from the moment it is appended.
    UniformRtn,
    /// Heavy-hitter ranking, but losers are dropped.
    EvictHeavyHitter,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::HeavyHitter => "heavy_hitter",
            PolicyKind::RecencyOnly => "recency_only",
            PolicyKind::UniformRtn => "uniform_rtn",
            PolicyKind::EvictHeavyHitter => "evict_heavy_hitter",
        })
    }
}

/// Storage precision of the importance tier.
///
/// Serialized as `"full"` (alias `"fp16"`) or `{"bits": N, "group_size": G}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PrecisionRepr", into = "PrecisionRepr")]
pub enum Precision {
    #[default]
    Full,
    Quant(QuantSpec),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PrecisionRepr {
    Name(String),
    Spec(QuantSpec),
}

impl TryFrom<PrecisionRepr> for Precision {
    type Error = Error;

    fn try_from(r: PrecisionRepr) -> Result<Self> {
        match r {
            PrecisionRepr::Spec(s) => Ok(Precision::Quant(s)),
            PrecisionRepr::Name(n) if n == "full" || n == "fp16" => Ok(Precision::Full),
            PrecisionRepr::Name(n) => Err(Error::invalid(format!(
                "unknown precision '{n}', expected \"full\" or {{bits, group_size}}"
            ))),
        }
    }
}

impl From<Precision> for PrecisionRepr {
    fn from(p: Precision) -> Self {
        match p {
            Precision::Full => PrecisionRepr::Name("full".into()),
            Precision::Quant(s) => PrecisionRepr::Spec(s),
        }
    }
}

fn default_window() -> usize {
    DEFAULT_RECENT_WINDOW
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub importance_ratio: f64,
    #[serde(default = "default_window")]
    pub recent_window: usize,
    #[serde(default)]
    pub importance_precision: Precision,
    /// Unused by the evicting policy, which keeps nothing it demotes.
    pub retained_precision: QuantSpec,
    #[serde(default)]
    pub outlier_aware: bool,
}

impl PolicyConfig {
    /// Heavy-hitter importance tier at full precision, retained tier at `retained_bits`.
    pub fn mixed(
        importance_ratio: f64,
        retained_bits: u8,
        head_dim: usize,
        outlier_aware: bool,
    ) -> Result<Self> {
        let cfg = Self {
            kind: PolicyKind::HeavyHitter,
            importance_ratio,
            recent_window: DEFAULT_RECENT_WINDOW,
            importance_precision: Precision::Full,
            retained_precision: QuantSpec::for_head_dim(retained_bits, head_dim)?,
            outlier_aware,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn evict(importance_ratio: f64, head_dim: usize) -> Result<Self> {
        Ok(Self {
            kind: PolicyKind::EvictHeavyHitter,
            ..Self::mixed(importance_ratio, 2, head_dim, false)?
        })
    }

    pub fn rtn(bits: u8, head_dim: usize, outlier_aware: bool) -> Result<Self> {
        Ok(Self {
            kind: PolicyKind::UniformRtn,
            importance_ratio: 0.0,
            recent_window: 0,
            ..Self::mixed(0.0, bits, head_dim, outlier_aware)?
        })
    }

    /// No compression at all.
    pub fn full(head_dim: usize) -> Result<Self> {
        Self::mixed(1.0, 8, head_dim, false)
    }

    pub fn with_window(mut self, recent_window: usize) -> Self {
        self.recent_window = recent_window;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.importance_ratio) {
            return Err(Error::invalid(format!(
                "importance_ratio {} outside [0, 1]",
                self.importance_ratio
            )));
        }
        Ok(())
    }

    pub fn validate_for(&self, head_dim: usize) -> Result<()> {
        self.validate()?;
        self.retained_precision.validate_for(head_dim)?;
        if let Precision::Quant(s) = self.importance_precision {
            s.validate_for(head_dim)?;
        }
        Ok(())
    }

    pub fn evicts(&self) -> bool {
        self.kind == PolicyKind::EvictHeavyHitter
    }

    pub fn effective_ratio(&self) -> f64 {
        match self.kind {
            PolicyKind::UniformRtn => 0.0,
            _ => self.importance_ratio,
        }
    }

    pub fn effective_window(&self) -> usize {
        match self.kind {
            PolicyKind::UniformRtn => 0,
            _ => self.recent_window,
        }
    }

    /// `min(len, max(window, ceil(ratio * len)))`.
    pub fn budget(&self, current_len: usize) -> usize {
        // guard against 0.1 * 30 = 3.0000000000000004 style overshoot
        let share = (self.effective_ratio() * current_len as f64 - 1e-9)
            .ceil()
            .max(0.0) as usize;
        share.max(self.effective_window()).min(current_len)
    }

    /// Bits per element of the retained tier, for reporting.
    pub fn retained_effective_bits(&self) -> f64 {
        quant::effective_bits(
            self.retained_precision.bits(),
            self.retained_precision.group_size(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_index: usize,
    pub accumulated_score: f64,
}

impl TokenScore {
    pub fn new(token_index: usize) -> Self {
        Self {
            token_index,
            accumulated_score: 0.0,
        }
    }
}

/// Adds this step's attention probability to each scored token.
///
/// `attn_probs[i]` belongs to `scores[i]`. Callers that score only part of
/// the cache pass that part's probabilities, which then need not sum to one.
pub fn update_scores(scores: &mut [TokenScore], attn_probs: &[f64]) -> Result<()> {
    if scores.len() != attn_probs.len() {
        return Err(Error::invalid(format!(
            "{} scored tokens but {} probabilities",
            scores.len(),
            attn_probs.len()
        )));
    }
    for (s, p) in scores.iter_mut().zip(attn_probs) {
        s.accumulated_score += p.max(0.0);
    }
    Ok(())
}

/// Tokens to push out of the importance tier, ascending.
///
/// The newest `recent_window` tokens always stay. The rest of the budget goes
/// to the highest accumulated scores (or the newest tokens for
/// `recency_only`); ties favour the later token.
pub fn select_demotions(
    scores: &[TokenScore],
    config: &PolicyConfig,
    current_len: usize,
) -> Vec<usize> {
    let budget = config.budget(current_len.max(1));
    if scores.len() <= budget {
        return Vec::new();
    }
    let mut by_recency: Vec<&TokenScore> = scores.iter().collect();
    by_recency.sort_by_key(|s| std::cmp::Reverse(s.token_index));
    let window = config.effective_window().min(budget);
    let (_, rest) = by_recency.split_at(window.min(by_recency.len()));
    let mut rest = rest.to_vec();
    if config.kind != PolicyKind::RecencyOnly {
        rest.sort_by(|a, b| {
            b.accumulated_score
                .partial_cmp(&a.accumulated_score)
                .unwrap_or(Ordering::Equal)
                .then(b.token_index.cmp(&a.token_index))
        });
    }
    let mut demote: Vec<usize> = rest[budget - window..]
        .iter()
        .map(|s| s.token_index)
        .collect();
    demote.sort_unstable();
    demote
}

/// Hypothetical eviction with perfect foresight: full attention first, then
/// only the `k` most probable tokens survive and are renormalized.
pub fn oracle_topk_attend<K: AsRef<[f32]>, V: AsRef<[f32]>>(
    q: &[f32],
    keys: &[K],
    values: &[V],
    k: usize,
    scale: f64,
) -> Result<AttnStepResult> {
    let n = keys.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("top-k of {k} over {n} tokens")));
    }
    if values.len() != n {
        return Err(Error::invalid(format!(
            "{n} keys but {} values",
            values.len()
        )));
    }
    let logits: Vec<f64> = keys
        .iter()
        .map(|key| scale * dot(q, key.as_ref()))
        .collect();
    let full = softmax(&logits);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        full[b]
            .partial_cmp(&full[a])
            .unwrap_or(Ordering::Equal)
            .then(b.cmp(&a))
    });
    let mut probs = vec![0.0; n];
    let kept: f64 = order[..k].iter().map(|&i| full[i]).sum();
    for &i in &order[..k] {
        probs[i] = full[i] / kept;
    }
    let dim = values[0].as_ref().len();
    let output = weighted_sum(&probs, values, dim);
    Ok(AttnStepResult::assemble(
        (0..n).collect(),
        vec![Tier::Importance; n],
        logits,
        probs,
        output,
    ))
}

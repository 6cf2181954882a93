//! Drive one head of the two-tier cache by hand and compare against
//! full-precision attention as tokens are demoted.
//!
//!     cargo run --example mixed_cache

use mikv::attention::{default_scale, reference_attend};
use mikv::cache::{error_metrics, HeadCache};
use mikv::policy::PolicyConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> mikv::Result<()> {
    let d = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut sample = || -> Vec<f32> { (0..d).map(|_| StandardNormal.sample(&mut rng)).collect() };

    let policy = PolicyConfig::mixed(0.25, 2, d, false)?.with_window(4);
    let mut cache = HeadCache::new(d, policy)?;
    let (mut keys, mut values) = (Vec::new(), Vec::new());
    for t in 0..64 {
        let (k, v, q) = (sample(), sample(), sample());
        cache.append(&k, &v, t)?;
        keys.push(k);
        values.push(v);
        let mixed = cache.attend(&q, default_scale(d))?;
        let reference = reference_attend(&q, &keys, &values, default_scale(d))?;
        cache.accumulate(&mixed.tokens, &mixed.probs)?;
        cache.maintain(t)?;
        if t % 16 == 15 {
            let m = error_metrics(&mixed, &reference)?;
            println!(
                "t={t:>2} importance={:>2} retained={:>2} cosine={:.5} memory={:.1}%",
                cache.importance_tokens().len(),
                cache.retained_tokens().len(),
                m.cosine,
                cache.memory_report().ratio_percent
            );
        }
    }
    Ok(())
}

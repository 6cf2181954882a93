//! Heavy-hitter scoring, demotion selection and the oracle top-k bound.
//!
//!     cargo run --example heavy_hitter_policy

use mikv::policy::{oracle_topk_attend, select_demotions, update_scores, PolicyConfig, TokenScore};

fn main() -> mikv::Result<()> {
    let mut scores: Vec<TokenScore> = (0..8).map(TokenScore::new).collect();
    for probs in [
        [0.40, 0.05, 0.05, 0.20, 0.05, 0.05, 0.10, 0.10],
        [0.30, 0.05, 0.05, 0.30, 0.05, 0.05, 0.10, 0.10],
    ] {
        update_scores(&mut scores, &probs)?;
    }
    let policy = PolicyConfig::mixed(0.5, 2, 128, false)?.with_window(2);
    println!("budget at 8 tokens: {}", policy.budget(8));
    println!("demote: {:?}", select_demotions(&scores, &policy, 8));

    let q = [1.0f32, 0.5];
    let keys = [[1.0f32, 0.0], [0.0, 1.0], [2.0, 1.0], [-1.0, 0.0]];
    let values = [[1.0f32, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]];
    for k in 1..=4 {
        let r = oracle_topk_attend(&q, &keys, &values, k, 1.0)?;
        let probs: Vec<String> = r.probs.iter().map(|p| format!("{p:.3}")).collect();
        println!("top-{k}: probs [{}]", probs.join(", "));
    }
    Ok(())
}

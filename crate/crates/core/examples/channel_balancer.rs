//! Measure the channel balancer on a trace with a planted key outlier and
//! show how it shrinks the key range the quantizer sees.
//!
//!     cargo run --example channel_balancer

use mikv::balance::{
    analyze_outliers, balance_key, flag_key_outliers, ChannelBalancer, DEFAULT_EPSILON,
};
use mikv::cache::ModelDims;
use mikv::trace::{synth_random, OutlierSpec};

fn main() -> mikv::Result<()> {
    let dims = ModelDims::new(1, 2, 1, 64)?;
    let trace = synth_random(dims, 32, 0, 3, &[OutlierSpec::key(0, 7, 50.0)])?;

    let flagged = flag_key_outliers(&analyze_outliers(&trace), 10.0);
    println!("flagged (layer, kv head, channel): {flagged:?}");

    let balancer = ChannelBalancer::compute(&trace, DEFAULT_EPSILON, 10_000.0)?;
    let b = balancer.factors(0, 0);
    println!("b[7] = {:.4}, median b = {:.4}", b[7], {
        let mut s = b.to_vec();
        s.sort_by(f32::total_cmp);
        s[s.len() / 2]
    });

    let k = trace.k(0, 0, 0);
    let range = |v: &[f32]| {
        let lo = v.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        hi - lo
    };
    println!(
        "key range before {:.2}, after {:.2}",
        range(k),
        range(&balance_key(k, b)?)
    );
    Ok(())
}

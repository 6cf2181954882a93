//! Line-retrieval comparison: full cache, mixed precision at several widths,
//! and plain eviction, all at a 20% importance ratio.
//!
//!     cargo run --release --example retrieval_replay [seed]

use mikv::attention::{replay, ReplayOptions};
use mikv::cache::ModelDims;
use mikv::policy::PolicyConfig;
use mikv::trace::{synth_retrieval, OutlierSpec, RetrievalSpec, Trace};

fn main() -> mikv::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(7);
    let dims = ModelDims::new(1, 4, 2, 128)?;
    let (trace, answers) = synth_retrieval(dims, &RetrievalSpec::default(), seed)?;
    let options = ReplayOptions {
        answers: Some(answers),
        seed,
        ..ReplayOptions::default()
    };
    println!("plain keys");
    table(&trace, dims, &options)?;

    // four x50 key channels per kv head
    let outliers = (0..dims.n_kv_heads)
        .flat_map(|h| [3, 17, 64, 101].map(|c| OutlierSpec::key(h, c, 50.0)))
        .collect();
    let spec = RetrievalSpec {
        outliers,
        ..RetrievalSpec::default()
    };
    let (trace, answers) = synth_retrieval(dims, &spec, seed)?;
    let options = ReplayOptions {
        answers: Some(answers),
        ..options
    };
    println!("\nwith key outliers");
    table(&trace, dims, &options)
}

fn table(trace: &Trace, dims: ModelDims, options: &ReplayOptions) -> mikv::Result<()> {
    let d = dims.head_dim;
    let runs = [
        ("full", PolicyConfig::full(d)?),
        ("mixed int8", PolicyConfig::mixed(0.2, 8, d, true)?),
        ("mixed int4", PolicyConfig::mixed(0.2, 4, d, true)?),
        ("mixed int3", PolicyConfig::mixed(0.2, 3, d, true)?),
        ("mixed int2 aware", PolicyConfig::mixed(0.2, 2, d, true)?),
        ("mixed int2", PolicyConfig::mixed(0.2, 2, d, false)?),
        ("evict", PolicyConfig::evict(0.2, d)?),
    ];
    println!(
        "{:<18} {:>9} {:>9} {:>9}",
        "policy", "fidelity", "cosine", "memory"
    );
    for (name, policy) in runs {
        let r = replay(trace, &policy, &dims, options)?;
        println!(
            "{:<18} {:>8.1}% {:>9.5} {:>8.1}%",
            name,
            100.0 * r.aggregate.retrieval_fidelity.unwrap_or(0.0),
            r.aggregate.mean_cosine,
            r.memory.ratio_percent
        );
    }
    Ok(())
}

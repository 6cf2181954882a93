//! Analytic cache footprints for a few common configurations.
//!
//!     cargo run --example memory_tables

use mikv::cache::{memory_report, MemoryParams, ModelDims, TierPrecision};

fn main() -> mikv::Result<()> {
    let dims = ModelDims::preset("llama2-7b")?;
    println!(
        "{:>6} {:>10} {:>10} {:>6} {:>8}",
        "ratio", "important", "retained", "aware", "size"
    );
    for ratio in [0.5, 0.25, 0.2] {
        for retained in [
            TierPrecision::Int(4),
            TierPrecision::Int(3),
            TierPrecision::Int(2),
            TierPrecision::Evicted,
        ] {
            row(MemoryParams::new(
                dims,
                ratio,
                TierPrecision::Full,
                retained,
            ))?;
        }
    }
    println!();
    for importance in [
        TierPrecision::Full,
        TierPrecision::Int(8),
        TierPrecision::Int(4),
        TierPrecision::Int(2),
    ] {
        row(MemoryParams {
            outlier_aware: true,
            ..MemoryParams::new(dims, 0.2, importance, TierPrecision::Int(2))
        })?;
    }

    println!("\nfull cache at batch 8, seq 4096, 32-bit elements:");
    for name in ModelDims::PRESETS {
        let p = MemoryParams {
            batch: 8,
            element_bits: 32,
            ..MemoryParams::new(
                ModelDims::preset(name)?,
                1.0,
                TierPrecision::Full,
                TierPrecision::Full,
            )
        };
        println!(
            "  {name:<11} {:>6.2} GB",
            memory_report(&p)?.full_cache_bytes / 1e9
        );
    }
    Ok(())
}

fn row(p: MemoryParams) -> mikv::Result<()> {
    let r = memory_report(&p)?;
    println!(
        "{:>6} {:>10} {:>10} {:>6} {:>7.1}%",
        p.importance_ratio,
        format!("{:?}", p.importance),
        format!("{:?}", p.retained),
        p.outlier_aware,
        r.ratio_percent
    );
    Ok(())
}

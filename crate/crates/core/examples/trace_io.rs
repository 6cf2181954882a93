//! Write a synthetic trace to disk, read it back and inspect the header.
//!
//!     cargo run --example trace_io [path]

use mikv::cache::ModelDims;
use mikv::trace::{synth_random, Trace};

fn main() -> mikv::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("example.mikv"));
    let dims = ModelDims::new(2, 8, 2, 64)?;
    let trace = synth_random(dims, 16, 4, 42, &[])?;
    trace.save(&path)?;

    let back = Trace::load(&path)?;
    let h = &back.header;
    println!(
        "{}: {} bytes",
        path.display(),
        std::fs::metadata(&path)?.len()
    );
    println!(
        "version {} layers {} heads {} kv heads {} head dim {} prefill {} gen {} rope {}",
        h.version,
        h.n_layers,
        h.n_heads,
        h.n_kv_heads,
        h.head_dim,
        h.n_prefill,
        h.n_gen,
        h.rope_applied
    );
    println!("bit-identical after round trip: {}", back.bit_eq(&trace));
    println!(
        "q[step 0, layer 1, head 5][..4] = {:?}",
        &back.q(0, 1, 5)[..4]
    );
    Ok(())
}

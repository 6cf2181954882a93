//! Group-wise asymmetric quantization at every supported width.
//!
//!     cargo run --example quantize_roundtrip

use mikv::quant::{dequantize, quantize, QuantSpec, SUPPORTED_BITS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> mikv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Vec<f32> = (0..128).map(|_| StandardNormal.sample(&mut rng)).collect();
    println!(
        "{:>5} {:>10} {:>11} {:>12} {:>10}",
        "bits", "eff bits", "code bytes", "param bytes", "max err"
    );
    for bits in SUPPORTED_BITS {
        let spec = QuantSpec::for_head_dim(bits, x.len())?;
        let block = quantize(&x, spec)?;
        let y = dequantize(&block)?;
        let err = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        println!(
            "{:>5} {:>10.2} {:>11} {:>12} {:>10.5}",
            bits,
            spec.effective_bits(),
            block.code_bytes(),
            block.param_bytes(),
            err
        );
    }
    Ok(())
}

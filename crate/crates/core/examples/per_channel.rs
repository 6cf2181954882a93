//! Per-token versus per-channel grouping on keys with one outlier channel.
//! Per-token groups stretch to cover the outlier and blur every other channel.
//!
//!     cargo run --example per_channel

use mikv::quant::{simulate_per_channel, simulate_per_token, QuantSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const OUTLIER: usize = 9;

/// RMSE over the ordinary channels and over the outlier channel.
fn rmse(a: &[Vec<f32>], b: &[Vec<f32>]) -> (f64, f64) {
    let (mut s, mut n, mut so) = (0.0, 0usize, 0.0);
    for (x, y) in a.iter().zip(b) {
        for (c, (u, v)) in x.iter().zip(y).enumerate() {
            let e = f64::from(u - v).powi(2);
            if c == OUTLIER {
                so += e;
            } else {
                s += e;
                n += 1;
            }
        }
    }
    ((s / n as f64).sqrt(), (so / a.len() as f64).sqrt())
}

fn main() -> mikv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut keys: Vec<Vec<f32>> = (0..128)
        .map(|_| (0..128).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for row in &mut keys {
        row[OUTLIER] *= 50.0;
    }
    for bits in [2u8, 4] {
        let token = simulate_per_token(&keys, QuantSpec::for_head_dim(bits, 128)?)?;
        let channel = simulate_per_channel(&keys, bits)?;
        let (t, to) = rmse(&keys, &token);
        let (c, co) = rmse(&keys, &channel);
        println!("INT{bits}: per-token rmse {t:.4} (outlier {to:.3}), per-channel rmse {c:.4} (outlier {co:.3})");
    }
    Ok(())
}

//! Batch-ensemble layers: every member's weight is the shared matrix times
//! a rank-1 factor, applied without building the member matrices.
//!
//! ```text
//! cargo run --release --example batch_ensemble
//! ```

use bvib::bayes::{be_init, be_layer_forward, be_materialize};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> bvib::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (k, in_dim, out_dim) = (4, 6, 3);
    let mut state = be_init(k, in_dim, out_dim, &mut rng)?;
    state.r.mapv_inplace(|v| v * rng.gen_range(0.5..1.5));

    // Rows are routed round-robin, as during training.
    let x = Array2::from_shape_simple_fn((8, in_dim), || rng.gen_range(-1.0..1.0));
    let members: Vec<usize> = (0..x.nrows()).map(|i| i % k).collect();
    let fast = be_layer_forward(&x, &members, &state)?;

    let mut worst: f64 = 0.0;
    for (i, &m) in members.iter().enumerate() {
        let w = be_materialize(state.shared.view(), state.r.row(m), state.s.row(m))?;
        let y = w.dot(&x.row(i)) + &state.bias;
        worst = worst.max((&y - &fast.row(i)).iter().fold(0.0, |a, d| a.max(d.abs())));
    }
    println!("fast path vs materialized member weights: max difference {worst:.2e}");

    let shared = state.shared.len() + state.bias.len();
    let extra = state.r.len() + state.s.len();
    println!("{k} members: {shared} shared parameters + {extra} fast weights; a naive ensemble stores {}", k * shared);

    state.r.fill(1.0);
    state.s.fill(1.0);
    let unit = be_layer_forward(&x, &members, &state)?;
    let plain = x.dot(&state.shared.t()) + &state.bias;
    println!("unit fast weights reproduce the shared layer: {}", unit == plain);
    Ok(())
}

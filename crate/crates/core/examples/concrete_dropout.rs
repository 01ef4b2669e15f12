//! The concrete relaxation of Bernoulli dropout: sharp gates at low
//! temperature, the KL regularizer, and a gated dense layer.
//!
//! ```text
//! cargo run --release --example concrete_dropout
//! ```

use bvib::bayes::{cd_layer_forward, concrete_gate, ConcreteDropout};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> bvib::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = 20_000;
    println!("   p     t    fraction > 0.5   mean gate");
    for &p in &[0.1, 0.3, 0.5, 0.8] {
        for &t in &[1.0, 0.1, 0.01] {
            let (mut hits, mut sum) = (0usize, 0.0);
            for _ in 0..draws {
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                let z = concrete_gate(p, u, t)?;
                hits += (z > 0.5) as usize;
                sum += z;
            }
            println!("{p:>4.1}  {t:>4.2}   {:>14.4}   {:>9.4}", hits as f64 / draws as f64, sum / draws as f64);
        }
    }

    // The regularizer favours p = 0.5 through its entropy term and small
    // weights through the weight-decay term.
    let weights = vec![0.2; 64];
    for &p in &[0.05, 0.2, 0.5] {
        let cd = ConcreteDropout::new(8, p, 0.1, 1e-3, 300)?;
        println!("regularizer at p = {p}: {:.6}", cd.regularizer(&weights));
    }

    let cd = ConcreteDropout::new(8, 0.3, 0.1, 1e-3, 300)?;
    let x = Array2::from_elem((4, 8), 1.0);
    let w = Array2::from_elem((2, 8), 0.125);
    let b = Array1::zeros(2);
    let y = cd_layer_forward(&x, w.view(), b.view(), &cd, &mut rng)?;
    println!("gated layer outputs (undropped value 1.0):\n{y:.3}");
    Ok(())
}

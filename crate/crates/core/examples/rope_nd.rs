//! Multi-dimensional rotary embedding: derived bases, norm preservation and
//! logits that depend only on relative offsets.

use acdit::numerics::Array;
use acdit::rope::{apply_rope_nd, derive_base, RopeNdConfig};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

fn logit(q: &Array<f64>, k: &Array<f64>, pq: &[usize], pk: &[usize], cfg: &RopeNdConfig) -> acdit::Result<f64> {
    let a = apply_rope_nd(q, &[pq.to_vec()], cfg)?;
    let b = apply_rope_nd(k, &[pk.to_vec()], cfg)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
}

fn main() -> acdit::Result<()> {
    for l in [16, 32, 256, 1024] {
        println!("base for {l:5} positions: {}", derive_base(l));
    }

    let cfg = RopeNdConfig::auto(24, &[8, 16, 16])?;
    println!("\nvideo grid 8x16x16, head dim 24: segments {:?}, bases {:?}", cfg.segment_dims, cfg.bases);

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
    let q = Array::<f64>::randn([1, 24], 1.0, &mut rng);
    let k = Array::<f64>::randn([1, 24], 1.0, &mut rng);
    let rotated = apply_rope_nd(&q, &[vec![5, 3, 11]], &cfg)?;
    let norm = |a: &Array<f64>| a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("norm before {:.12} after {:.12}", norm(&q), norm(&rotated));

    let base = logit(&q, &k, &[1, 2, 3], &[0, 5, 1], &cfg)?;
    for shift in [[0, 0, 0], [2, 4, 6], [6, 9, 12]] {
        let pq: Vec<usize> = [1, 2, 3].iter().zip(shift).map(|(p, s)| p + s).collect();
        let pk: Vec<usize> = [0, 5, 1].iter().zip(shift).map(|(p, s)| p + s).collect();
        let moved = logit(&q, &k, &pq, &pk, &cfg)?;
        println!("shift {shift:?}: logit {moved:+.12} (diff {:.1e})", (moved - base).abs());
    }
    Ok(())
}

//! Attention-cost curve of blockwise generation against full-sequence
//! diffusion, swept over block sizes.

use acdit::analysis::{cost_csv, cost_curve, halving_blocks, saved_fraction, CostParams};

fn main() -> acdit::Result<()> {
    let (l, h, heads) = (1024, 1152, 16);
    let p = CostParams::standard(l, l, h, heads)?;
    let layouts: Vec<(usize, usize)> = halving_blocks(l).into_iter().map(|b| (l, b)).collect();
    print!("{}", cost_csv(&cost_curve(&layouts, &p)?));

    println!("\nsaved fraction as the sequence grows (B = 16, h = 64):");
    for l in [64, 256, 1024, 4096, 16384, 65536] {
        let f = saved_fraction(&CostParams::standard(l, 16, 64, 4)?);
        println!("  L={l:6}  {f:.4}");
    }
    Ok(())
}

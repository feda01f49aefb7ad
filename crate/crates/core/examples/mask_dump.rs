//! Prints the training attention mask for a few block layouts, then the
//! inference-time masks for each noise block of a 2x2-block image.

use acdit::layout::{inference_mask, BlockLayout, ScamMask};

fn main() -> acdit::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (n, b) = match args[..] {
        [n, b, ..] => (n, b),
        _ => (3, 2),
    };
    let mask = ScamMask::from_blocks(n, b);
    println!("N={n} B={b}: rows and columns are [clean | noise], one per token");
    print!("{}", mask.render());
    println!("permitted block pairs {} (N^2 + N = {})", mask.block_pairs(), n * n + n);

    let layout = BlockLayout::square(4, 4, 2)?;
    println!("\n4x4 grid in 2x2 blocks, block of each token:");
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| layout.locate(&[r, c]).map(|(i, _)| i.to_string())).collect::<Result<_, _>>()?;
        println!("  {}", row.join(" "));
    }
    for i in 0..layout.num_blocks() {
        let m = inference_mask(i, &layout)?;
        println!("noise block {i}: {} queries over {} keys", m.query_len(), m.key_len());
    }
    Ok(())
}

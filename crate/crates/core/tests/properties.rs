use acdit::analysis::{
    blockwise_flops, full_flops, qk_pairs_both, saved_fraction, saved_fraction_from_pairs, CostParams,
};
use acdit::cli::RunConfig;
use acdit::engine::{wsd_lr, WsdSchedule};
use acdit::layout::{inference_mask, patchify, sliced_training_mask, unpatchify, BlockLayout, ScamMask};
use acdit::numerics::Array;
use acdit::rope::{apply_rope_nd, RopeNdConfig};
use acdit::schedule::{NoiseSchedule, SamplerConfig, SamplerMode};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn scam_rule(n: usize, b: usize, q: usize, k: usize) -> bool {
    let l = n * b;
    let (qi, kj) = ((q % l) / b, (k % l) / b);
    match (q >= l, k >= l) {
        (false, false) => kj <= qi,
        (false, true) => false,
        (true, false) => kj < qi,
        (true, true) => kj == qi,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scam_follows_the_block_rules(n in 1usize..=8, b in 1usize..=4) {
        let m = ScamMask::from_blocks(n, b);
        prop_assert_eq!(m.side(), 2 * n * b);
        for q in 0..m.side() {
            prop_assert!((0..m.side()).any(|k| m.allowed(q, k)));
            for k in 0..m.side() {
                prop_assert_eq!(m.allowed(q, k), scam_rule(n, b, q, k));
            }
        }
        prop_assert_eq!(m.block_pairs(), n * n + n);
    }

    #[test]
    fn inference_mask_is_the_training_slice(bh in 1usize..=2, bw in 1usize..=2, nh in 1usize..=2, nw in 1usize..=4) {
        let layout = BlockLayout::new(&[bh * nh, bw * nw], &[bh, bw]).unwrap();
        let train = ScamMask::build(&layout);
        for i in 0..layout.num_blocks() {
            let inf = inference_mask(i, &layout).unwrap();
            prop_assert_eq!(inf.as_slice(), &sliced_training_mask(&train, i)[..]);
        }
        prop_assert!(inference_mask(layout.num_blocks(), &layout).is_err());
    }

    #[test]
    fn block_order_is_a_bijection(bh in 1usize..=3, bw in 1usize..=3, nh in 1usize..=3, nw in 1usize..=3) {
        let layout = BlockLayout::new(&[bh * nh, bw * nw], &[bh, bw]).unwrap();
        prop_assert_eq!(layout.num_blocks() * layout.block_size(), layout.seq_len());
        let mut seen = vec![false; layout.seq_len()];
        for r in 0..bh * nh {
            for c in 0..bw * nw {
                let (i, off) = layout.locate(&[r, c]).unwrap();
                let off = off[0] * bw + off[1];
                prop_assert_eq!(layout.coord_of(i, off), vec![r, c]);
                let slot = i * layout.block_size() + off;
                prop_assert!(!seen[slot]);
                seen[slot] = true;
            }
        }
    }

    #[test]
    fn blockify_and_patchify_invert(seed in any::<u64>(), ph in 1usize..=2, pw in 1usize..=2, ch in 1usize..=3) {
        let x = Array::<f32>::randn([4 * ph, 4 * pw, ch], 1.0, &mut rng(seed));
        let p = patchify(&x, &[ph, pw]).unwrap();
        prop_assert_eq!(&unpatchify(&p, &[ph, pw], ch).unwrap(), &x);
        let layout = BlockLayout::square(4, 4, 2).unwrap();
        prop_assert_eq!(&layout.unblockify(&layout.blockify(&p).unwrap()).unwrap(), &p);
    }

    #[test]
    fn rope_preserves_norm(seed in any::<u64>(), r in 0usize..32, c in 0usize..32) {
        let cfg = RopeNdConfig::auto(16, &[32, 32]).unwrap();
        let x = Array::<f64>::randn([1, 32], 1.0, &mut rng(seed));
        let y = apply_rope_nd(&x, &[vec![r, c]], &cfg).unwrap();
        let norm = |a: &Array<f64>| dot(a.data(), a.data()).sqrt();
        prop_assert!((norm(&y) - norm(&x)).abs() < 1e-6);
    }

    #[test]
    fn rope_logits_depend_on_offsets_only(
        seed in any::<u64>(),
        pq in (0usize..16, 0usize..16),
        pk in (0usize..16, 0usize..16),
        shift in (0usize..16, 0usize..16),
    ) {
        let cfg = RopeNdConfig::auto(16, &[32, 32]).unwrap();
        let mut r = rng(seed);
        let q = Array::<f64>::randn([1, 16], 1.0, &mut r);
        let k = Array::<f64>::randn([1, 16], 1.0, &mut r);
        let logit = |a: [usize; 2], b: [usize; 2]| {
            let qr = apply_rope_nd(&q, &[a.to_vec()], &cfg).unwrap();
            let kr = apply_rope_nd(&k, &[b.to_vec()], &cfg).unwrap();
            dot(qr.data(), kr.data())
        };
        let base = logit([pq.0, pq.1], [pk.0, pk.1]);
        let moved = logit([pq.0 + shift.0, pq.1 + shift.1], [pk.0 + shift.0, pk.1 + shift.1]);
        prop_assert!((base - moved).abs() < 1e-5, "{} vs {}", base, moved);
    }

    #[test]
    fn linear_schedule_invariants(t in 1usize..=2000) {
        let s = NoiseSchedule::linear(t).unwrap();
        prop_assert!((s.alpha_bar(1).unwrap() - s.alpha(1).unwrap()).abs() < 1e-15);
        let mut prev = 1.0;
        for step in 1..=t {
            let beta = s.beta(step).unwrap();
            prop_assert!(beta > 0.0 && beta < 1.0);
            let ab = s.alpha_bar(step).unwrap();
            prop_assert!(ab < prev);
            prev = ab;
        }
    }

    #[test]
    fn oracle_eps_reverse_recovers_x0(seed in any::<u64>(), t in 1usize..=1000) {
        let s = NoiseSchedule::linear(t).unwrap();
        let mut r = rng(seed);
        let x0 = Array::<f32>::randn([3, 5], 1.0, &mut r);
        let eps = Array::<f32>::randn([3, 5], 1.0, &mut r);
        let mut x = s.q_sample(&x0, t, &eps).unwrap();
        for step in (1..=t).rev() {
            x = s.reverse_step(&x, &eps, step, step - 1, SamplerMode::Deterministic, &mut r).unwrap();
        }
        prop_assert!(x.max_abs_diff(&x0) < 1e-4);
    }

    #[test]
    fn sampler_steps_decrease_to_one(t in 1usize..=1000, frac in 0.0f64..1.0) {
        let steps = 1 + (frac * (t - 1) as f64) as usize;
        let ts = SamplerConfig { steps, ..SamplerConfig::default() }.timesteps(t).unwrap();
        prop_assert_eq!(ts.len(), steps);
        prop_assert_eq!(*ts.last().unwrap(), 1);
        prop_assert!(ts[0] <= t);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn wsd_is_piecewise_linear(warmup in 0u64..50, extra in 1u64..500, frac in 0.0f64..=1.0, step_frac in 0.0f64..=1.0) {
        let total = warmup + extra;
        let s = WsdSchedule { warmup, total, decay_fraction: frac, peak: 3e-4, floor: 1e-5 };
        let step = (step_frac * total as f64) as u64;
        let lr = wsd_lr(step, &s).unwrap();
        prop_assert!((0.0..=3e-4).contains(&lr));
        if step < warmup {
            prop_assert!((lr - 3e-4 * step as f64 / warmup as f64).abs() < 1e-18);
        } else if (step as f64) <= (1.0 - frac) * total as f64 {
            prop_assert_eq!(lr, 3e-4);
        } else {
            prop_assert!((1e-5..=3e-4).contains(&lr));
        }
        prop_assert!(wsd_lr(total + 1, &s).is_err());
    }

    #[test]
    fn pair_sum_equals_closed_form(n in 1usize..=512, b in 1usize..=64) {
        let (sum, closed) = qk_pairs_both(n * b, b).unwrap();
        prop_assert_eq!(sum, closed);
    }

    #[test]
    fn saved_fraction_is_bounded_and_matches_pairs(
        n in 1usize..=256,
        b in 1usize..=64,
        h in 1usize..=1024,
        heads in 1usize..=16,
        theta_scale in 0.0f64..24.0,
    ) {
        let l = n * b;
        let p = CostParams::new(l, b, h, heads, theta_scale * (h * h) as f64).unwrap();
        let f = saved_fraction(&p);
        prop_assert!((0.0..0.5).contains(&f));
        let from_pairs = saved_fraction_from_pairs(&p).unwrap();
        prop_assert!((f - from_pairs).abs() <= 1e-12 * f.abs().max(1.0));
        prop_assert!(blockwise_flops(&p).unwrap() <= full_flops(&p));
    }

    #[test]
    fn run_config_toml_roundtrip(
        layers in 1usize..6,
        peak in 1e-6f64..1e-1,
        steps in 1u64..10_000,
        scale in 0.0f64..8.0,
        seed in 0..=i64::MAX as u64,
        wide in (i64::MAX as u64 + 1)..=u64::MAX,
    ) {
        let mut cfg = RunConfig::default();
        cfg.model.layers = layers;
        cfg.train.lr.peak = peak;
        cfg.train.steps = steps;
        cfg.train.lr.total = steps;
        cfg.train.seed = seed;
        cfg.sampler.guidance_scale = scale;
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml().unwrap(), text);
        prop_assert!(cfg.validate().is_ok());
        cfg.train.seed = wide;
        prop_assert!(cfg.validate().is_err());
        prop_assert!(cfg.to_toml().is_err());
    }
}

mod common;

use acdit::layout::ScamMask;
use acdit::model::{Acdit, TrainInputs};
use acdit::numerics::{Array, Graph, ParamStore};
use common::*;

fn pred(m: &Acdit, p: &ParamStore<f32>, inputs: &TrainInputs<f32>) -> (Array<f32>, Array<f32>) {
    let mut g = Graph::new();
    let out = m.forward_train(&mut g, p, inputs, &ScamMask::build(m.layout())).unwrap();
    (g.value(out.pred_eps).clone(), g.value(out.clean_hidden).clone())
}

fn perturb_block(x: &mut Array<f32>, l: usize, b: usize, e: usize, j: usize, seed: u64) {
    let tc = x.cols();
    let mut r = rng(seed);
    let noise = Array::<f32>::randn(vec![b * tc], 1.0, &mut r);
    let start = (e * l + j * b) * tc;
    for (v, d) in x.data_mut()[start..start + b * tc].iter_mut().zip(noise.data()) {
        *v += 3.0 * d;
    }
}

#[test]
fn noise_block_ignores_future_clean_and_other_noise_blocks() {
    for n in [1, 2, 4] {
        let (m, p) = random_model::<f32>(tiny_config(n), 11);
        let (l, b) = (m.layout().seq_len(), m.layout().block_size());
        let batch = 2;
        let base = random_inputs::<f32>(&m, batch, false, 5);
        let (p0, _) = pred(&m, &p, &base);
        for i in 0..n {
            let want = block_rows(&p0, l, b, i, batch);
            for j in 0..n {
                if j >= i {
                    let mut x = base.clone();
                    perturb_block(&mut x.clean, l, b, 0, j, 100 + j as u64);
                    assert_eq!(block_rows(&pred(&m, &p, &x).0, l, b, i, batch), want, "clean {j} -> noise {i}");
                }
                if j != i {
                    let mut x = base.clone();
                    perturb_block(&mut x.noise, l, b, 1, j, 200 + j as u64);
                    x.timesteps[n + j] = 1 + (x.timesteps[n + j] % 100);
                    assert_eq!(block_rows(&pred(&m, &p, &x).0, l, b, i, batch), want, "noise {j} -> noise {i}");
                }
            }
            if i > 0 {
                let mut x = base.clone();
                perturb_block(&mut x.clean, l, b, 0, i - 1, 7);
                assert_ne!(block_rows(&pred(&m, &p, &x).0, l, b, i, batch), want);
            }
        }
    }
}

#[test]
fn fresh_model_predicts_zero() {
    let (m, p) = Acdit::new::<f32, _>(tiny_config(4), &mut rng(3)).unwrap();
    let inputs = random_inputs::<f32>(&m, 2, false, 1);
    let (eps, hidden) = pred(&m, &p, &inputs);
    assert!(eps.data().iter().all(|&v| v == 0.0));
    assert!(hidden.data().iter().any(|&v| v != 0.0));
}

#[test]
fn clean_stream_is_independent_of_timesteps_and_labels() {
    let (m, p) = random_model::<f32>(tiny_config(4), 2);
    let a = random_inputs::<f32>(&m, 2, false, 9);
    let mut b = a.clone();
    b.timesteps.iter_mut().for_each(|t| *t = 101 - *t);
    b.labels = vec![3, 0];
    let (ea, ha) = pred(&m, &p, &a);
    let (eb, hb) = pred(&m, &p, &b);
    assert_eq!(ha, hb);
    assert_ne!(ea, eb);
}

fn cached_block_outputs(m: &Acdit, p: &ParamStore<f32>, kv_params: &ParamStore<f32>, x: &TrainInputs<f32>) -> Vec<Array<f32>> {
    let (l, b, n) = (m.layout().seq_len(), m.layout().block_size(), m.layout().num_blocks());
    let batch = x.labels.len();
    let mut cache = m.new_cache(batch);
    (0..n)
        .map(|i| {
            let noise = block_rows(&x.noise, l, b, i, batch);
            let out = m.forward_block_infer(p, &noise, x.timesteps[i], &x.labels, &cache, i).unwrap();
            m.commit_clean_block(kv_params, &block_rows(&x.clean, l, b, i, batch), &mut cache, i).unwrap();
            assert_eq!(cache.committed(), i + 1);
            assert_eq!(cache.len(), (i + 1) * b);
            out
        })
        .collect()
}

#[test]
fn cached_inference_matches_training_pass() {
    for n in [1, 2, 4, 8] {
        for seed in 0..3 {
            let (m, p) = random_model::<f32>(tiny_config(n), seed);
            let (l, b) = (m.layout().seq_len(), m.layout().block_size());
            let x = random_inputs::<f32>(&m, 3, true, seed + 40);
            let (full, _) = pred(&m, &p, &x);
            for (i, out) in cached_block_outputs(&m, &p, &p, &x).iter().enumerate() {
                let d = max_abs(out, &block_rows(&full, l, b, i, 3));
                assert!(d < 1e-5, "n={n} block {i}: {d}");
            }
        }
    }
}

#[test]
fn cache_from_other_weights_is_detected() {
    let (m, p) = random_model::<f32>(tiny_config(4), 8);
    let (l, b) = (m.layout().seq_len(), m.layout().block_size());
    let mut wrong = p.clone();
    let id = wrong.id("layer0.qkv.w").unwrap();
    let w = wrong.get(id).clone();
    let rows = w.rows();
    let permuted: Vec<f32> = (0..rows).rev().flat_map(|r| w.row(r).to_vec()).collect();
    wrong.set(id, Array::new(w.shape().to_vec(), permuted).unwrap()).unwrap();
    let x = random_inputs::<f32>(&m, 2, true, 4);
    let (full, _) = pred(&m, &p, &x);
    let outs = cached_block_outputs(&m, &p, &wrong, &x);
    assert!(max_abs(&outs[0], &block_rows(&full, l, b, 0, 2)) < 1e-5);
    let worst = (1..4).map(|i| max_abs(&outs[i], &block_rows(&full, l, b, i, 2))).fold(0.0, f64::max);
    assert!(worst > 1e-3, "{worst}");
}

#[test]
fn cache_order_is_enforced() {
    let (m, p) = random_model::<f32>(tiny_config(4), 1);
    let b = m.layout().block_size();
    let clean = Array::<f32>::zeros([b, m.config().token_channels()]);
    let mut cache = m.new_cache(1);
    assert!(m.commit_clean_block(&p, &clean, &mut cache, 1).is_err());
    assert!(m.forward_block_infer(&p, &clean, 5, &[0], &cache, 1).is_err());
    m.commit_clean_block(&p, &clean, &mut cache, 0).unwrap();
    assert!(m.forward_block_infer(&p, &clean, 5, &[0], &cache, 0).is_err());
    assert!(m.forward_block_infer(&p, &clean, 0, &[0], &cache, 1).is_err());
    assert!(m.forward_block_infer(&p, &clean, 5, &[4], &cache, 1).is_err());
    assert!(m.forward_block_infer(&p, &clean, 5, &[0], &cache, 1).is_ok());
}

#[test]
fn single_block_training_pass_is_plain_full_sequence_diffusion() {
    let (m, p) = random_model::<f32>(tiny_config(1), 6);
    let x = random_inputs::<f32>(&m, 3, false, 2);
    let (blockwise, _) = pred(&m, &p, &x);
    let mut g = Graph::new();
    let full = m.forward_full_sequence(&mut g, &p, &x.noise, &x.timesteps, &x.labels).unwrap();
    assert!(max_abs(&blockwise, g.value(full)) < 1e-5);
}

use ndarray::Array2;
use polymodel::itf::{loss_and_gradients, ModelConfig, ModelParams, SampleTensor, TrendClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig {
        lookback: 6,
        n_vars: 5,
        d_model: 8,
        n_heads: 2,
        d_head: 4,
        n_layers: 1,
        ff_mult: 4,
    }
}

fn batch(seed: u64, cfg: &ModelConfig) -> Vec<SampleTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3)
        .map(|i| SampleTensor {
            values: Array2::from_shape_simple_fn((cfg.n_vars, cfg.lookback), || rng.random_range(-1.5..1.5)),
            label: TrendClass::from_index(i),
        })
        .collect()
}

fn perturbed(params: &ModelParams, tensor: usize, idx: usize, delta: f64) -> ModelParams {
    let mut p = params.clone();
    let t = p.tensors_mut().into_iter().nth(tensor).unwrap();
    let flat = t.as_slice_mut().unwrap();
    flat[idx] += delta;
    p
}

/// Largest per-tensor relative error ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖).
fn max_relative_error(params: &ModelParams, samples: &[SampleTensor], h: f64) -> (f64, String) {
    let (_, grad) = loss_and_gradients(samples, params).unwrap();
    let mut worst = (0.0, String::new());
    for (ti, (name, g)) in grad.tensors().into_iter().enumerate() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for (idx, &a) in g.as_slice().unwrap().iter().enumerate() {
            let lp = loss_and_gradients(samples, &perturbed(params, ti, idx, h)).unwrap().0;
            let lm = loss_and_gradients(samples, &perturbed(params, ti, idx, -h)).unwrap().0;
            let num = (lp - lm) / (2.0 * h);
            diff2 += (a - num) * (a - num);
            a2 += a * a;
            n2 += num * num;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        let rel = if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale };
        if rel > worst.0 {
            worst = (rel, name);
        }
    }
    worst
}

#[test]
fn backprop_matches_central_differences() {
    let cfg = config();
    let params = ModelParams::init(cfg, 42).unwrap();
    let samples = batch(7, &cfg);
    let (rel, name) = max_relative_error(&params, &samples, 1e-5);
    assert!(rel < 1e-4, "tensor {name}: relative error {rel:e}");
}

#[test]
fn backprop_matches_with_two_layers_and_perturbed_norms() {
    let cfg = ModelConfig {
        n_layers: 2,
        ..config()
    };
    let mut params = ModelParams::init(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for b in params.blocks.iter_mut() {
        for t in [&mut b.ln1_gain, &mut b.ln1_bias, &mut b.ln2_gain, &mut b.ln2_bias, &mut b.bo, &mut b.ff_b1] {
            t.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        }
    }
    let samples = batch(8, &cfg);
    let (rel, name) = max_relative_error(&params, &samples, 1e-5);
    assert!(rel < 1e-4, "tensor {name}: relative error {rel:e}");
}

//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtcnet::{Model, NetworkConfig, Shape, Tensor, UpsampleMode};

pub fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn random_mask(shape: Shape, rng: &mut ChaCha8Rng, p: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Result of comparing backprop against central differences for a sample
/// of weights.
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates dropped because the loss is not smooth within `eps`
    /// (a ReLU or max-pool switch was crossed).
    pub skipped_kinks: usize,
}

fn param_mut(m: &mut Model<f64>, layer: usize, kernel: bool, i: usize) -> &mut f64 {
    let s = &mut m.layers_mut()[layer].spec;
    if kernel {
        &mut s.kernel.data_mut()[i]
    } else {
        &mut s.bias[i]
    }
}

/// Checks `per_layer` random kernel entries and one bias entry of every
/// layer against central differences of the full-network loss.
pub fn network_fd_check(config: NetworkConfig, seed: u64, batch: usize, per_layer: usize, eps: f64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::build(config.clone(), seed).unwrap();
    // Break the zero-bias symmetry so bias gradients are generic.
    for layer in model.layers_mut() {
        for b in &mut layer.spec.bias {
            *b = rng.random_range(-0.05..0.05);
        }
    }
    let x = random_tensor(config.input_shape(batch), &mut rng, 0.0, 1.0);
    let y = random_mask(config.input_shape(batch).with_channels(1), &mut rng, 0.3);
    let weights = (1.0, 2.5);
    let (_, grads) = model.backward(&x, &y, weights).unwrap();

    let loss_at = |m: &Model<f64>| {
        let logits = m.forward(&x, rtcnet::Mode::Train).unwrap();
        rtcnet::ops::softmax_cross_entropy(&logits, &y, weights).unwrap().loss
    };
    let base = loss_at(&model);

    let mut report = FdReport { max_rel_err: 0.0, checked: 0, skipped_kinks: 0 };
    for l in 0..model.layers().len() {
        let klen = model.layers()[l].spec.kernel.len();
        let mut coords: Vec<(bool, usize)> = (0..per_layer).map(|_| (true, rng.random_range(0..klen))).collect();
        coords.push((false, rng.random_range(0..model.layers()[l].spec.bias.len())));
        for (is_kernel, i) in coords {
            let analytic = if is_kernel { grads.params[l].kernel.data()[i] } else { grads.params[l].bias[i] };
            let mut eval = |delta: f64| {
                let orig = *param_mut(&mut model, l, is_kernel, i);
                *param_mut(&mut model, l, is_kernel, i) = orig + delta;
                let v = loss_at(&model);
                *param_mut(&mut model, l, is_kernel, i) = orig;
                v
            };
            let plus = eval(eps);
            let minus = eval(-eps);
            let fwd = (plus - base) / eps;
            let bwd = (base - minus) / eps;
            let central = (plus - minus) / (2.0 * eps);
            // One-sided slopes agree to O(eps) on smooth stretches; a jump
            // means a switch point lies inside the stencil.
            if (fwd - bwd).abs() > 1e-3 * central.abs().max(1e-4) + 50.0 * eps {
                report.skipped_kinks += 1;
                continue;
            }
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic, central));
        }
    }
    report
}

/// Closed-form parameter count, written out independently of `Plan`.
pub fn hand_count(c: &NetworkConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let mut total = 0;
    let mut cin = c.input_c;
    for (&cout, &n) in c.encoder_channels.iter().zip(&c.block_conv_counts) {
        total += conv(cin, cout, 3) + (n - 1) * conv(cout, cout, 3);
        if cin != cout {
            total += conv(cin, cout, 1);
        }
        cin = cout;
    }
    for &cout in &c.decoder_channels {
        total += match c.upsample_mode {
            UpsampleMode::TransposedConv => cin * cout * 16 + cout,
            UpsampleMode::Unpool => conv(cin, cout, 3),
        };
        cin = cout;
    }
    total + conv(cin, c.num_classes, 1)
}

//! Shared numeric test helpers.

use ccreid::autodiff::Arr;
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal tensor via the Box-Muller transform (keeps test deps lean).
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        data.push(r * (2.0 * std::f64::consts::PI * u2).cos());
        if data.len() < n {
            data.push(r * (2.0 * std::f64::consts::PI * u2).sin());
        }
    }
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Central finite-difference gradient of a scalar function of one tensor.
pub fn finite_diff(f: &mut dyn FnMut(&Arr) -> f64, x: &Arr, h: f64) -> Arr {
    let mut grad = Arr::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice_mut().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Asserts `|a - n| <= atol + rtol * max(|a|, |n|)` elementwise.
pub fn assert_grads_close(analytic: &Arr, numeric: &Arr, rtol: f64, atol: f64, what: &str) {
    assert_eq!(analytic.shape(), numeric.shape(), "{what}: shape mismatch");
    let mut worst = 0.0f64;
    let mut worst_pair = (0.0, 0.0);
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let err = (a - n).abs();
        let bound = atol + rtol * a.abs().max(n.abs());
        if err > bound && err - bound > worst {
            worst = err - bound;
            worst_pair = (a, n);
        }
    }
    assert!(
        worst == 0.0,
        "{what}: gradient mismatch, analytic {} vs numeric {} (excess {worst:.3e})",
        worst_pair.0,
        worst_pair.1
    );
}

/// Convenience: gradient-check `build` (a tape program producing a scalar from
/// one parameter tensor) against central finite differences.
pub fn gradcheck(
    what: &str,
    x0: &Arr,
    build: &mut dyn FnMut(
        &Arr,
    ) -> (
        ccreid::autodiff::Tape,
        ccreid::autodiff::Var,
        ccreid::autodiff::ParamId,
    ),
) {
    let (tape, root, pid) = build(x0);
    let grads = tape.backward(root);
    let analytic = grads.get(pid).expect("parameter got no gradient").clone();
    let mut eval = |x: &Arr| {
        let (tape, root, _) = build(x);
        tape.scalar(root)
    };
    let numeric = finite_diff(&mut eval, x0, 1e-5);
    assert_grads_close(&analytic, &numeric, 1e-4, 1e-7, what);
}

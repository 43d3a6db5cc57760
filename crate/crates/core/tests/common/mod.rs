//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use latentmimic::nn::{Activation, DenseNet, InitSpec, OutputHead, Tape};
use latentmimic::prior::LatentGaussian;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// `sum p ln(p / q)` over a finite support.
pub fn discrete_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

pub fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Monte Carlo estimate of `E_a[ln a(x) - ln b(x)]` from `samples` draws,
/// taken as antithetic pairs `mean +- std * e`.
pub fn monte_carlo_kl<R: Rng + ?Sized>(a: &LatentGaussian, b: &LatentGaussian, samples: usize, rng: &mut R) -> f64 {
    let d = a.dim();
    let log_density = |g: &LatentGaussian, x: &[f64]| -> f64 {
        (0..d)
            .map(|i| {
                let z = (x[i] - g.mean()[i]) / g.std()[i];
                -0.5 * z * z - g.std()[i].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .sum()
    };
    let (mut x, mut y) = (vec![0.0; d], vec![0.0; d]);
    let mut total = 0.0;
    let pairs = samples / 2;
    for _ in 0..pairs {
        for i in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            x[i] = a.mean()[i] + a.std()[i] * e;
            y[i] = a.mean()[i] - a.std()[i] * e;
        }
        total += log_density(a, &x) - log_density(b, &x) + log_density(a, &y) - log_density(b, &y);
    }
    total / (2 * pairs) as f64
}

/// Loss used by the gradient check: a fixed random projection of the
/// network outputs (mean and log-std for gaussian heads).
fn projected_loss(net: &DenseNet, x: &Array2<f64>, w_mean: &Array2<f64>, w_std: &Array2<f64>) -> (Tape, f64, latentmimic::nn::Var) {
    let mut tape = Tape::new();
    let input = tape.constant(x.clone());
    let loss = match net.head() {
        OutputHead::Deterministic => {
            let out = net.forward_tape(&mut tape, input).unwrap();
            let w = tape.constant(w_mean.clone());
            let p = tape.mul(out, w).unwrap();
            tape.sum(p)
        }
        _ => {
            let (mean, log_std) = net.gaussian_tape(&mut tape, input).unwrap();
            let wm = tape.constant(w_mean.clone());
            let ws = tape.constant(w_std.clone());
            let a = tape.mul(mean, wm).unwrap();
            let s = tape.exp(log_std);
            let b = tape.mul(s, ws).unwrap();
            let t = tape.add(a, b).unwrap();
            tape.sum(t)
        }
    };
    let v = tape.scalar(loss);
    (tape, v, loss)
}

/// Largest relative error between tape gradients and central differences
/// over every parameter entry of a random small network.
pub fn gradient_check<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let depth = rng.random_range(1..=3);
    let mut sizes = vec![rng.random_range(1..=5)];
    for _ in 0..depth {
        sizes.push(rng.random_range(1..=6));
    }
    let head = [OutputHead::Deterministic, OutputHead::Gaussian, OutputHead::GaussianFreeStd][rng.random_range(0..3)];
    let init = InitSpec {
        initial_log_std: rng.random_range(-1.0..0.5),
        ..InitSpec::default()
    };
    let mut net = DenseNet::new(&sizes, Activation::Elu, head, init, rng).unwrap();
    let rows = rng.random_range(1..=4);
    let out = *sizes.last().unwrap();
    let x = Array2::from_shape_simple_fn((rows, sizes[0]), || rng.random_range(-1.5..1.5));
    let w_mean = Array2::from_shape_simple_fn((rows, out), || rng.random_range(-1.0..1.0));
    let w_std = Array2::from_shape_simple_fn((rows, out), || rng.random_range(-1.0..1.0));

    let (mut tape, _, loss) = projected_loss(&net, &x, &w_mean, &w_std);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Array2<f64>> = net.params().iter().map(|p| grads.get_or_zeros(p)).collect();

    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, g) in analytic.iter().enumerate() {
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let orig = net.params()[k].value[[r, c]];
            net.params_mut()[k].value[[r, c]] = orig + h;
            let (_, up, _) = projected_loss(&net, &x, &w_mean, &w_std);
            net.params_mut()[k].value[[r, c]] = orig - h;
            let (_, down, _) = projected_loss(&net, &x, &w_mean, &w_std);
            net.params_mut()[k].value[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = g[[r, c]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

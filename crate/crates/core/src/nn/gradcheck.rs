//! Central finite-difference verification of [`Mlp::backward`].

use super::Mlp;
use crate::error::Result;

/// Loss used by the check: `0.5 * mean_rows sum_outputs (f(x) - y)^2`.
pub fn half_mse(net: &Mlp, x: &[f64], rows: usize, targets: &[f64]) -> Result<f64> {
    let out = net.forward_batch(x, rows)?.output;
    Ok(0.5 * out.iter().zip(targets).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / rows as f64)
}

/// Result of comparing analytic and numerical gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare the analytic gradient of [`half_mse`] with central differences of
/// step `h` in every trainable parameter.
///
/// The relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// parameters with a vanishing gradient (e.g. biases feeding a batch-norm
/// layer) from dividing rounding noise by zero.
pub fn check(net: &Mlp, x: &[f64], rows: usize, targets: &[f64], h: f64, floor: f64) -> Result<GradCheck> {
    let cache = net.forward_batch(x, rows)?;
    let dout: Vec<f64> = cache
        .output
        .iter()
        .zip(targets)
        .map(|(o, t)| (o - t) / rows as f64)
        .collect();
    let analytic = net.backward(&cache, &dout);
    let mut probe = net.clone();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..analytic.len() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = half_mse(&probe, x, rows, targets)?;
        probe.params_mut()[i] = orig - h;
        let down = half_mse(&probe, x, rows, targets)?;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > worst.max_rel_error {
            worst = GradCheck {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpSpec;
    use crate::rng::{RngStreamKey, StreamFamily};
    use rand::Rng;

    #[test]
    fn backprop_matches_finite_differences() {
        for (i, bn) in [(0u64, true), (1, false)] {
            let mut spec = MlpSpec::new(vec![3, 8, 8, 1]);
            spec.batch_norm = bn;
            let net = Mlp::xavier(spec, RngStreamKey::new(StreamFamily::NetInit, 5, i)).unwrap();
            let mut rng = RngStreamKey::new(StreamFamily::Train, 5, i).rng();
            let x: Vec<f64> = (0..16 * 3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let y: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
            let res = check(&net, &x, 16, &y, 1e-5, 1e-6).unwrap();
            assert!(res.max_rel_error < 1e-4, "{res:?}");
        }
    }
}

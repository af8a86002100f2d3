//! Central finite-difference gradients for checking backpropagation.

/// Step used by every gradient check in the crate.
pub const STEP: f64 = 1e-5;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps vanishing gradients
/// from turning round-off into large ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{loss, Activation, DenseNet};
    use crate::rng;
    use rand::Rng;

    fn check(hidden: Activation, output: Activation) -> f64 {
        let mut r = rng::stream(42, hidden.tag() as u32, output.tag() as u32);
        let mut net = DenseNet::mlp(&mut r, &[4, 7, 5, 3], hidden, output);
        let batch = 3;
        let x: Vec<f64> = (0..batch * 4).map(|_| r.random_range(-1.0..1.0)).collect();
        let labels = [0usize, 2, 1];
        // Softmax heads get cross-entropy, others a fixed linear-quadratic loss.
        let loss_of = |net: &DenseNet| -> (f64, Vec<f64>) {
            let y = net.predict(&x, batch).unwrap();
            if output == Activation::Softmax {
                loss::cross_entropy_batch(&y, &labels, 3).unwrap()
            } else {
                let l = y.iter().enumerate().map(|(i, v)| 0.5 * v * v + 0.1 * i as f64 * v).sum();
                let g = y.iter().enumerate().map(|(i, v)| v + 0.1 * i as f64).collect();
                (l, g)
            }
        };
        let (_, g) = loss_of(&net);
        let trace = net.forward_rows(&x, batch).unwrap();
        net.backward(&trace, &g).unwrap();
        let analytic = net.flat_grads();
        let params = net.flat_params();
        let mut probe = net.clone();
        let numeric = finite_difference(&params, STEP, |p| {
            probe.set_flat_params(p);
            loss_of(&probe).0
        });
        max_relative_error(&analytic, &numeric)
    }

    #[test]
    fn every_activation_passes() {
        use Activation::*;
        for (h, o) in [
            (LeakyRelu, Identity),
            (Sigmoid, Identity),
            (Identity, Identity),
            (LeakyRelu, Sigmoid),
            (LeakyRelu, Softmax),
            (Sigmoid, Softmax),
        ] {
            let err = check(h, o);
            assert!(err < 1e-4, "{h:?}/{o:?}: {err}");
        }
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let g = finite_difference(&[1.0, -2.0], STEP, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }
}

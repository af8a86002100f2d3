use crate::error::{Error, Result};

/// Floor applied inside `log` so confident mistakes stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

fn check_one_hot(z: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in z.iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::NotOneHot);
        }
    }
    hot.ok_or(Error::NotOneHot)
}

/// `-sum z_i log y_i` for a probability vector `y` and one-hot `z`.
pub fn cross_entropy(y: &[f64], z: &[f64]) -> Result<f64> {
    if y.len() != z.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![z.len()],
            got: vec![y.len()],
        });
    }
    let class = check_one_hot(z)?;
    let total: f64 = y.iter().sum();
    if (total - 1.0).abs() > 1e-6 || y.iter().any(|&p| p < 0.0) {
        return Err(Error::Domain(format!("prediction is not a probability vector (sums to {total})")));
    }
    Ok(-y[class].max(LOG_FLOOR).ln())
}

pub fn one_hot(class: usize, n: usize) -> Vec<f64> {
    let mut z = vec![0.0; n];
    z[class] = 1.0;
    z
}

/// Mean cross-entropy over a batch of row-major probabilities and its
/// gradient with respect to the probabilities.
pub fn cross_entropy_batch(probs: &[f64], labels: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if probs.len() != labels.len() * classes {
        return Err(Error::ShapeMismatch {
            expected: vec![labels.len(), classes],
            got: vec![probs.len()],
        });
    }
    let scale = 1.0 / labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for (b, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::IndexOutOfRange { index: c, len: classes });
        }
        let p = probs[b * classes + c];
        loss -= p.max(LOG_FLOOR).ln();
        if p > LOG_FLOOR {
            grad[b * classes + c] = -scale / p;
        }
    }
    Ok((loss * scale, grad))
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

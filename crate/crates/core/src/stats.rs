use serde::Serialize;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Fraction correct with a Wilson score 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Accuracy {
    pub correct: u64,
    pub total: u64,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Accuracy {
    pub fn new(correct: u64, total: u64) -> Self {
        let (ci_low, ci_high) = wilson_interval(correct, total, Z95);
        Accuracy {
            correct,
            total,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            ci_low,
            ci_high,
        }
    }

    pub fn contains(&self, p: f64) -> bool {
        (self.ci_low..=self.ci_high).contains(&p)
    }
}

pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

//! Experiment stages shared by the command line and the test suites.

use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_evaluate, train_classifier, BaselineClassifier, ClassifierTrainConfig, CodecConfig};
use crate::channel::ChannelParams;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::oracle::{empirical_capture_curve, CurvePoint, ParticleSimConfig};
use crate::rng;
use crate::stats::Accuracy;
use crate::surrogate::{
    bucket_stats, fit_channel, generate_pairs, surrogate_samples, FitResult, MomentMatchedGaussian,
    SurrogateTrainConfig,
};
use crate::transceiver::{evaluate_accuracy, train_end_to_end, InputShape, Link, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConfig {
    pub n_particles: usize,
    /// Step override; `None` picks a step from the drift speed.
    pub dt: Option<f64>,
    /// Probe times override; `None` uses [`probe_times`].
    pub times: Option<Vec<f64>>,
    pub tolerance: f64,
    /// Points with a smaller closed-form probability are reported, not checked.
    pub min_analytic: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            n_particles: 100_000,
            dt: None,
            times: None,
            tolerance: 0.15,
            min_analytic: 1e-3,
        }
    }
}

/// Probe instants: a spread over the slot for slow links, and a few steps
/// around the sharp peak for fast ones.
pub fn probe_times(p: &ChannelParams) -> Vec<f64> {
    let peak = p.peak_time();
    let mut t: Vec<f64> = if p.velocity * 1e-3 > p.rx_radius {
        [-2e-4, -1e-4, 0.0, 1e-4, 2e-4].iter().map(|d| peak + d).collect()
    } else {
        vec![0.5, 1.0, peak, 2.0, 4.0]
    };
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

#[derive(Debug, Clone, Serialize)]
pub struct PhysicsReport {
    pub channel: ChannelParams,
    pub sim: ParticleSimConfig,
    pub curve: Vec<CurvePoint>,
    /// Points whose closed-form probability reaches `min_analytic`.
    pub checked: usize,
    /// Checked points outside the tolerance.
    pub breaches: Vec<CurvePoint>,
}

impl PhysicsReport {
    pub fn passed(&self) -> bool {
        self.breaches.is_empty()
    }
}

/// Particle oracle against the closed-form capture probability.
pub fn validate_physics(seed: u64, p: &ChannelParams, cfg: &PhysicsConfig) -> Result<PhysicsReport> {
    let times = cfg.times.clone().unwrap_or_else(|| probe_times(p));
    let mut sim = ParticleSimConfig::for_times(p, times, cfg.n_particles, seed);
    if let Some(dt) = cfg.dt {
        sim.dt = dt;
    }
    let curve = empirical_capture_curve(&sim, p)?;
    let checked: Vec<&CurvePoint> = curve.iter().filter(|c| c.p_analytic >= cfg.min_analytic).collect();
    let breaches = checked.iter().filter(|c| !(c.rel_err <= cfg.tolerance)).map(|c| **c).collect();
    Ok(PhysicsReport {
        channel: p.clone(),
        sim,
        checked: checked.len(),
        curve,
        breaches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BucketFidelity {
    pub bucket: usize,
    pub w_low: f64,
    pub w_high: f64,
    pub sim_mean: f64,
    pub surrogate_mean: f64,
    pub rel_err: f64,
    pub sim_variance: f64,
    pub surrogate_variance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FidelityReport {
    pub held_out_pairs: usize,
    pub surrogate_nll: f64,
    pub gaussian_nll: f64,
    pub buckets: Vec<BucketFidelity>,
}

impl FidelityReport {
    pub fn max_mean_rel_err(&self) -> f64 {
        self.buckets.iter().map(|b| b.rel_err).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidelityConfig {
    pub held_out_pairs: usize,
    /// Equal-width bins of `w_curr`.
    pub buckets: usize,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        FidelityConfig {
            held_out_pairs: 100_000,
            buckets: 10,
        }
    }
}

/// Compares a fitted surrogate with fresh simulator pairs: held-out NLL
/// against a per-bucket moment-matched Gaussian fitted on the training
/// pairs, and per-bucket means and variances of surrogate samples.
pub fn surrogate_fidelity(seed: u64, p: &ChannelParams, fit: &FitResult, cfg: &FidelityConfig) -> Result<FidelityReport> {
    let mut r = rng::stream(seed, rng::HOLDOUT, 0);
    let held = generate_pairs(&mut r, p, cfg.held_out_pairs)?;
    let gaussian = MomentMatchedGaussian::fit(&fit.train_pairs, cfg.buckets)?;
    let samples = surrogate_samples(&mut rng::stream(seed, rng::HOLDOUT, 1), &fit.surrogate, &held, 1)?;
    let sim = bucket_stats(&held, cfg.buckets, |q| q.w_rx);
    let sur = bucket_stats(&samples, cfg.buckets, |q| q.w_rx);
    let width = 1.0 / cfg.buckets as f64;
    let buckets = sim
        .iter()
        .zip(&sur)
        .enumerate()
        .map(|(i, (a, b))| BucketFidelity {
            bucket: i,
            w_low: i as f64 * width,
            w_high: (i + 1) as f64 * width,
            sim_mean: a.mean,
            surrogate_mean: b.mean,
            rel_err: (b.mean - a.mean).abs() / a.mean.abs(),
            sim_variance: a.variance,
            surrogate_variance: b.variance,
        })
        .collect();
    Ok(FidelityReport {
        held_out_pairs: held.len(),
        surrogate_nll: fit.surrogate.mdn_nll(&held)?,
        gaussian_nll: gaussian.nll(&held),
        buckets,
    })
}

/// Everything needed to train and score one budget point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub surrogate: SurrogateTrainConfig,
    pub train: TrainConfig,
    pub codec: CodecConfig,
    pub classifier: ClassifierTrainConfig,
    /// Baseline slot budget as a multiple of the semantic frame length.
    pub expansion_factor: f64,
    pub n_trials: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            surrogate: SurrogateTrainConfig::default(),
            train: TrainConfig::default(),
            codec: CodecConfig::default(),
            classifier: ClassifierTrainConfig::default(),
            expansion_factor: 2.0,
            n_trials: 3,
        }
    }
}

impl ExperimentConfig {
    /// Rejects a codec that needs more slots than the budget allows.
    pub fn check_slot_budget(&self, shape: InputShape) -> Result<usize> {
        let slots = self.codec.slots_per_image(shape)?;
        let budget = (self.train.model.k as f64 * self.expansion_factor).floor() as usize;
        if slots > budget {
            return Err(Error::Config(format!(
                "baseline codec needs {slots} slots per image but the budget is {budget} ({} symbols x {})",
                self.train.model.k, self.expansion_factor
            )));
        }
        Ok(slots)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointResult {
    pub n_m: u64,
    pub semantic: Accuracy,
    pub baseline: Accuracy,
}

/// Stage seeds for one budget point, derived from the run seed and `n_m`
/// so a point does not depend on which other points are in the sweep.
pub fn point_seed(seed: u64, n_m: u64) -> u64 {
    rng::child_seed(seed, rng::SWEEP, n_m.min(u32::MAX as u64) as u32)
}

pub struct TrainedPoint {
    pub channel: ChannelParams,
    pub fit: FitResult,
    pub outcome: TrainOutcome,
}

/// Fits the surrogate at `p` and trains a semantic model through it.
pub fn train_point(seed: u64, p: &ChannelParams, train: &Dataset, cfg: &ExperimentConfig) -> Result<TrainedPoint> {
    let s = point_seed(seed, p.n_m);
    let fit = fit_channel(s, p, &cfg.surrogate)?;
    let outcome = train_end_to_end(s, train, &fit.surrogate, &cfg.train)?;
    Ok(TrainedPoint {
        channel: p.clone(),
        fit,
        outcome,
    })
}

/// Scores a trained point and the baseline through the simulator.
pub fn score_point(
    seed: u64,
    point: &TrainedPoint,
    clf: &BaselineClassifier,
    test: &Dataset,
    n_trials: usize,
) -> Result<PointResult> {
    let s = point_seed(seed, point.channel.n_m);
    let p = &point.channel;
    Ok(PointResult {
        n_m: p.n_m,
        semantic: evaluate_accuracy(s, &point.outcome.model, Link::Simulator(p), test, n_trials)?,
        baseline: baseline_evaluate(s, clf, p, test, n_trials)?,
    })
}

pub fn train_baseline(seed: u64, train: &Dataset, cfg: &ExperimentConfig) -> Result<BaselineClassifier> {
    cfg.check_slot_budget(InputShape::of(train))?;
    train_classifier(seed, &cfg.codec, train, &cfg.classifier)
}

/// One model per budget; every point is trained and scored in turn.
pub fn sweep(
    seed: u64,
    base: &ChannelParams,
    n_m: &[u64],
    train: &Dataset,
    test: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<Vec<PointResult>> {
    if n_m.is_empty() {
        return Err(Error::Config("sweep needs at least one n_m value".into()));
    }
    let clf = train_baseline(seed, train, cfg)?;
    n_m.iter()
        .map(|&n| {
            let point = train_point(seed, &base.clone().with_n_m(n), train, cfg)?;
            score_point(seed, &point, &clf, test, cfg.n_trials)
        })
        .collect()
}

pub fn write_metrics_csv<W: std::io::Write>(out: &mut W, rows: &[PointResult]) -> std::io::Result<()> {
    writeln!(out, "n_m,method,accuracy,ci_low,ci_high")?;
    for r in rows {
        for (method, a) in [("semantic", &r.semantic), ("baseline", &r.baseline)] {
            writeln!(out, "{},{method},{},{},{}", r.n_m, a.accuracy, a.ci_low, a.ci_high)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_times_cover_peak() {
        let s1 = ChannelParams::scenario1();
        let t = probe_times(&s1);
        assert_eq!(t.len(), 5);
        assert!(t.contains(&s1.peak_time()));
        assert_eq!(t[0], 0.5);
        let s2 = ChannelParams::scenario2();
        let t = probe_times(&s2);
        assert_eq!(t.len(), 5);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        assert!((t[2] - s2.peak_time()).abs() < 1e-12);
    }

    #[test]
    fn default_codec_fits_the_budget() {
        let cfg = ExperimentConfig::default();
        let shape = InputShape { height: 16, width: 16, channels: 1 };
        assert_eq!(cfg.check_slot_budget(shape).unwrap(), 28);
        let tight = ExperimentConfig { expansion_factor: 1.0, ..cfg };
        assert!(matches!(tight.check_slot_budget(shape), Err(Error::Config(_))));
    }

    #[test]
    fn point_seeds_depend_only_on_budget() {
        assert_eq!(point_seed(1, 4000), point_seed(1, 4000));
        assert_ne!(point_seed(1, 4000), point_seed(1, 20000));
        assert_ne!(point_seed(1, 4000), point_seed(2, 4000));
    }

    #[test]
    fn metrics_schema() {
        let a = Accuracy::new(3, 4);
        let mut out = Vec::new();
        write_metrics_csv(&mut out, &[PointResult { n_m: 100, semantic: a, baseline: a }]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "n_m,method,accuracy,ci_low,ci_high");
        assert!(lines[1].starts_with("100,semantic,0.75,"));
        assert!(lines[2].starts_with("100,baseline,0.75,"));
    }
}

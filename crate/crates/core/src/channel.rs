//! Closed-form physics of the diffusive molecular link.
//!
//! A point transmitter at the origin releases molecules at the start of each
//! symbol slot; a passive spherical receiver centred at `[R, 0, 0]` counts the
//! molecules inside its volume. Molecules drift along x with speed `v` and
//! diffuse with coefficient `D_c`. Lengths are in micrometres, times in
//! seconds.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Expected count below which `sample_count` draws the exact binomial.
pub const GAUSSIAN_SWITCH_MEAN: f64 = 30.0;

pub const DEFAULT_SIGMA_N: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    #[serde(default = "default_name")]
    pub name: String,
    /// Tx-Rx distance (um).
    #[serde(rename = "R")]
    pub distance: f64,
    /// Receiver radius (um).
    #[serde(rename = "r")]
    pub rx_radius: f64,
    /// Flow speed along x (um/s).
    #[serde(rename = "v")]
    pub velocity: f64,
    /// Symbol slot duration (s).
    #[serde(rename = "t_s")]
    pub slot: f64,
    /// Diffusion coefficient (um^2/s).
    #[serde(rename = "D_c")]
    pub diffusion: f64,
    /// Maximum molecules released per slot.
    pub n_m: u64,
    /// Additive noise standard deviation (molecules).
    #[serde(default = "default_sigma_n")]
    pub sigma_n: f64,
    /// Channel memory in slots.
    #[serde(default = "default_lambda")]
    pub lambda: usize,
    /// Observation offset within a slot; `None` selects `min(peak_time, t_s)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_obs: Option<f64>,
}

fn default_name() -> String {
    "custom".to_string()
}
fn default_sigma_n() -> f64 {
    DEFAULT_SIGMA_N
}
fn default_lambda() -> usize {
    1
}

impl ChannelParams {
    /// Low-drift microfluidic link: ISI dominated.
    pub fn scenario1() -> Self {
        ChannelParams {
            name: "scenario1".into(),
            distance: 100.0,
            rx_radius: 20.0,
            velocity: 50.0,
            slot: 4.0,
            diffusion: 800.0,
            n_m: 20_000,
            sigma_n: DEFAULT_SIGMA_N,
            lambda: 1,
            t_obs: None,
        }
    }

    /// High-drift 60 cm link at 40 cm/s.
    pub fn scenario2() -> Self {
        ChannelParams {
            name: "scenario2".into(),
            distance: 600_000.0,
            rx_radius: 20.0,
            velocity: 400_000.0,
            slot: 3.0,
            diffusion: 800.0,
            n_m: 20_000,
            sigma_n: DEFAULT_SIGMA_N,
            lambda: 1,
            t_obs: None,
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "scenario1" => Ok(Self::scenario1()),
            "scenario2" => Ok(Self::scenario2()),
            other => Err(Error::UnknownScenario(other.to_string())),
        }
    }

    /// Reads a key/value (TOML) scenario file. Keys follow the physical
    /// symbols: `R`, `r`, `v`, `t_s`, `D_c`, `n_m`, and optionally
    /// `sigma_n`, `lambda`, `t_obs`, `name`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: ChannelParams =
            toml::from_str(text).map_err(|e| Error::Config(format!("scenario file: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("channel params serialize")
    }

    pub fn with_n_m(mut self, n_m: u64) -> Self {
        self.n_m = n_m;
        self
    }

    pub fn with_sigma_n(mut self, sigma_n: f64) -> Self {
        self.sigma_n = sigma_n;
        self
    }

    pub fn with_lambda(mut self, lambda: usize) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_t_obs(mut self, t_obs: f64) -> Self {
        self.t_obs = Some(t_obs);
        self
    }

    pub fn with_velocity(mut self, v: f64) -> Self {
        self.velocity = v;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        let finite = [
            self.distance,
            self.rx_radius,
            self.velocity,
            self.slot,
            self.diffusion,
            self.sigma_n,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return bad("all parameters must be finite");
        }
        if self.distance <= 0.0 || self.rx_radius <= 0.0 {
            return bad("R and r must be positive");
        }
        if self.rx_radius >= self.distance {
            return bad("receiver radius must be smaller than the distance");
        }
        if self.velocity < 0.0 {
            return bad("v must be non-negative");
        }
        if self.slot <= 0.0 || self.diffusion <= 0.0 {
            return bad("t_s and D_c must be positive");
        }
        if self.n_m < 1 {
            return bad("n_m must be at least 1");
        }
        if self.sigma_n < 0.0 {
            return bad("sigma_n must be non-negative");
        }
        if let Some(t) = self.t_obs {
            if !(t > 0.0 && t <= self.slot) {
                return bad("t_obs must lie in (0, t_s]");
            }
        }
        Ok(())
    }

    /// Receiver volume `4 pi r^3 / 3`.
    pub fn rx_volume(&self) -> f64 {
        4.0 * PI * self.rx_radius.powi(3) / 3.0
    }

    /// Probability that a molecule released at time 0 is inside the receiver
    /// at time `t`, under the uniform-concentration approximation.
    pub fn capture_probability(&self, t: f64) -> Result<f64> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Domain(format!("capture time must be positive, got {t}")));
        }
        let spread = 4.0 * self.diffusion * t;
        let offset = self.distance - self.velocity * t;
        let value = self.rx_volume() / (PI * spread).powf(1.5) * (-offset * offset / spread).exp();
        if value > 1.0 {
            return Err(Error::InvalidApproximation { t, value });
        }
        Ok(value)
    }

    /// Time at which `capture_probability` peaks: the positive root of
    /// `v^2 t^2 + 6 D t - R^2 = 0`.
    pub fn peak_time(&self) -> f64 {
        let d = self.diffusion;
        let r2 = self.distance * self.distance;
        if self.velocity == 0.0 {
            return r2 / (6.0 * d);
        }
        let v2 = self.velocity * self.velocity;
        // Rationalized root; avoids cancellation when the drift term dominates.
        2.0 * r2 / (6.0 * d + (36.0 * d * d + 4.0 * v2 * r2).sqrt())
    }

    pub fn observation_time(&self) -> f64 {
        self.t_obs.unwrap_or_else(|| self.peak_time().min(self.slot))
    }

    /// Molecules released for a fraction `w` of the budget.
    pub fn released(&self, w: f64) -> u64 {
        (w * self.n_m as f64).round() as u64
    }

    pub fn count_moments(&self, w: f64, t: f64) -> Result<CountMoments> {
        check_fraction(w)?;
        let p = self.capture_probability(t)?;
        Ok(CountMoments::binomial(self.released(w), p))
    }
}

fn check_fraction(w: f64) -> Result<()> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(Error::Domain(format!("release fraction must lie in [0, 1], got {w}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountMoments {
    pub mean: f64,
    pub variance: f64,
}

impl CountMoments {
    pub fn binomial(n: u64, p: f64) -> Self {
        let mean = n as f64 * p;
        CountMoments {
            mean,
            variance: mean * (1.0 - p),
        }
    }
}

/// Count of `n` released molecules observed with per-molecule probability
/// `p`: exact binomial for small expected counts, clamped Gaussian otherwise.
pub fn sample_released<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> f64 {
    if n == 0 || p <= 0.0 {
        return 0.0;
    }
    let m = CountMoments::binomial(n, p);
    if m.mean < GAUSSIAN_SWITCH_MEAN {
        let p = p.min(1.0);
        Binomial::new(n, p).expect("valid binomial").sample(rng) as f64
    } else if m.variance <= 0.0 {
        m.mean
    } else {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        (m.mean + m.variance.sqrt() * z).max(0.0)
    }
}

pub fn sample_count<R: Rng + ?Sized>(rng: &mut R, p: &ChannelParams, w: f64, t: f64) -> Result<f64> {
    check_fraction(w)?;
    let prob = p.capture_probability(t)?;
    Ok(sample_released(rng, p.released(w), prob))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotObservation {
    pub count: f64,
    pub signal_mean: f64,
    pub isi_mean: f64,
    pub w_rx: f64,
}

/// One received slot: current-slot molecules at `t`, residue of the
/// previous `lambda` slots, and additive noise. `prev[0]` is the slot just
/// before the current one; a short window means the frame started recently
/// and missing slots were silent.
pub fn observe_slot<R: Rng + ?Sized>(
    rng: &mut R,
    p: &ChannelParams,
    w_curr: f64,
    prev: &[f64],
    t: f64,
) -> Result<SlotObservation> {
    if !(t > 0.0 && t <= p.slot) {
        return Err(Error::Domain(format!(
            "observation offset must lie in (0, {}], got {t}",
            p.slot
        )));
    }
    let p_now = p.capture_probability(t)?;
    let signal = p.count_moments(w_curr, t)?;
    let mut count = sample_released(rng, p.released(w_curr), p_now);
    let mut isi_mean = 0.0;
    for (i, &w) in prev.iter().take(p.lambda).enumerate() {
        let lag_t = t + (i + 1) as f64 * p.slot;
        let m = p.count_moments(w, lag_t)?;
        isi_mean += m.mean;
        count += sample_released(rng, p.released(w), p.capture_probability(lag_t)?);
    }
    if p.sigma_n > 0.0 {
        count += Normal::new(0.0, p.sigma_n).expect("finite sigma").sample(rng);
    }
    let count = count.max(0.0);
    Ok(SlotObservation {
        count,
        signal_mean: signal.mean,
        isi_mean,
        w_rx: count / (p.n_m as f64 * p_now),
    })
}

/// Transmitter-side release fractions for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolSequence(Vec<f64>);

impl SymbolSequence {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Empty("symbol sequence"));
        }
        for &x in &w {
            check_fraction(x)?;
        }
        Ok(SymbolSequence(w))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Up to `lambda` preceding symbols of slot `j`, most recent first.
    pub fn window(&self, j: usize, lambda: usize) -> Vec<f64> {
        (1..=lambda.min(j)).map(|i| self.0[j - i]).collect()
    }
}

/// Expected ISI contribution at slot `j`, offset `t`.
pub fn isi_mean_at(p: &ChannelParams, w: &SymbolSequence, j: usize, t: f64) -> Result<f64> {
    if j >= w.len() {
        return Err(Error::IndexOutOfRange { index: j, len: w.len() });
    }
    let mut isi = 0.0;
    for (i, prev) in w.window(j, p.lambda).into_iter().enumerate() {
        isi += p.count_moments(prev, t + (i + 1) as f64 * p.slot)?.mean;
    }
    Ok(isi)
}

/// Signal-to-interference ratio on expected counts: current-slot mean over
/// ISI mean plus the noise magnitude. Returns `+inf` when both vanish.
pub fn sir_at(p: &ChannelParams, w: &SymbolSequence, j: usize, t: f64) -> Result<f64> {
    let isi = isi_mean_at(p, w, j, t)?;
    let signal = p.count_moments(w.as_slice()[j], t)?.mean;
    Ok(ratio(signal, isi + p.sigma_n))
}

/// Per-draw variant of [`sir_at`]: counts are sampled and the noise term is
/// the magnitude of one noise draw.
pub fn sir_sampled<R: Rng + ?Sized>(
    rng: &mut R,
    p: &ChannelParams,
    w: &SymbolSequence,
    j: usize,
    t: f64,
) -> Result<f64> {
    if j >= w.len() {
        return Err(Error::IndexOutOfRange { index: j, len: w.len() });
    }
    let signal = sample_count(rng, p, w.as_slice()[j], t)?;
    let mut interference = 0.0;
    for (i, prev) in w.window(j, p.lambda).into_iter().enumerate() {
        interference += sample_count(rng, p, prev, t + (i + 1) as f64 * p.slot)?;
    }
    if p.sigma_n > 0.0 {
        interference += Normal::new(0.0, p.sigma_n).expect("finite sigma").sample(rng).abs();
    }
    Ok(ratio(signal, interference))
}

fn ratio(signal: f64, denom: f64) -> f64 {
    if signal == 0.0 {
        0.0
    } else if denom == 0.0 {
        f64::INFINITY
    } else {
        signal / denom
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SirPoint {
    pub t_global: f64,
    pub slot: usize,
    pub t_local: f64,
    pub signal: f64,
    pub isi: f64,
    pub sir: f64,
}

impl SirPoint {
    pub fn sir_db(&self) -> f64 {
        10.0 * self.sir.log10()
    }
}

/// SIR over every slot of the frame on a grid `dt, 2 dt, ..., t_s` within
/// each slot.
pub fn sir_trace(p: &ChannelParams, w: &SymbolSequence, dt: f64) -> Result<Vec<SirPoint>> {
    if !(dt > 0.0 && dt < p.slot) {
        return Err(Error::Config(format!(
            "trace step must lie in (0, t_s = {}), got {dt}",
            p.slot
        )));
    }
    let per_slot = (p.slot / dt + 1e-9).floor() as usize;
    let mut out = Vec::with_capacity(per_slot * w.len());
    for j in 0..w.len() {
        for m in 1..=per_slot {
            let t_local = m as f64 * dt;
            let signal = p.count_moments(w.as_slice()[j], t_local)?.mean;
            let isi = isi_mean_at(p, w, j, t_local)?;
            out.push(SirPoint {
                t_global: j as f64 * p.slot + t_local,
                slot: j,
                t_local,
                signal,
                isi,
                sir: ratio(signal, isi + p.sigma_n),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotSir {
    pub slot: usize,
    /// SIR at the observation instant, where the slot's own signal peaks.
    pub at_observation: f64,
    /// Largest SIR anywhere in the slot.
    pub max: f64,
}

pub fn slot_sir_summary(p: &ChannelParams, w: &SymbolSequence, trace: &[SirPoint]) -> Result<Vec<SlotSir>> {
    let t_obs = p.observation_time();
    (0..w.len())
        .map(|j| {
            let max = trace
                .iter()
                .filter(|pt| pt.slot == j)
                .map(|pt| pt.sir)
                .fold(0.0, f64::max);
            Ok(SlotSir {
                slot: j,
                at_observation: sir_at(p, w, j, t_obs)?,
                max,
            })
        })
        .collect()
}

pub fn write_sir_csv<W: Write>(out: &mut W, trace: &[SirPoint]) -> std::io::Result<()> {
    writeln!(out, "t_s,sir,sir_db")?;
    for pt in trace {
        writeln!(out, "{:?},{:?},{:?}", pt.t_global, pt.sir, pt.sir_db())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;

    fn s1() -> ChannelParams {
        ChannelParams::scenario1()
    }

    #[test]
    fn capture_probability_point_values() {
        assert_relative_eq!(s1().capture_probability(2.0).unwrap(), 0.011753, max_relative = 1e-4);
        assert_relative_eq!(s1().capture_probability(1.0).unwrap(), 0.015220, max_relative = 1e-4);
        assert!(s1().capture_probability(1e-3).unwrap() < 1e-30);
    }

    #[test]
    fn capture_probability_errors() {
        assert!(matches!(s1().capture_probability(0.0), Err(Error::Domain(_))));
        assert!(matches!(s1().capture_probability(-1.0), Err(Error::Domain(_))));
        // Receiver nearly touching the source with tiny diffusion.
        let p = ChannelParams {
            distance: 1.0,
            rx_radius: 0.9,
            diffusion: 1e-3,
            velocity: 1.0,
            ..s1()
        };
        assert!(matches!(p.capture_probability(1.0), Err(Error::InvalidApproximation { .. })));
    }

    #[test]
    fn peak_time_values() {
        let t = s1().peak_time();
        assert_relative_eq!(t, 1.2585, max_relative = 1e-4);
        assert_relative_eq!(s1().capture_probability(t).unwrap(), 0.016738, max_relative = 1e-4);
        assert_relative_eq!(ChannelParams::scenario2().peak_time(), 1.5, max_relative = 1e-6);
        let still = s1().with_velocity(0.0);
        assert_relative_eq!(still.peak_time(), 100.0 * 100.0 / (6.0 * 800.0), max_relative = 1e-12);
    }

    #[test]
    fn peak_time_is_a_maximum() {
        for p in [s1(), s1().with_velocity(0.0), s1().with_velocity(500.0)] {
            let t = p.peak_time();
            let h = 1e-4 * t;
            let left = p.capture_probability(t).unwrap() - p.capture_probability(t - h).unwrap();
            let right = p.capture_probability(t + h).unwrap() - p.capture_probability(t).unwrap();
            assert!(left > 0.0 && right < 0.0, "no sign change at {t}");
        }
    }

    #[test]
    fn count_moments_values() {
        let m = s1().count_moments(1.0, 1.0).unwrap();
        assert_relative_eq!(m.mean, 304.41, max_relative = 1e-4);
        assert_relative_eq!(m.variance, 299.78, max_relative = 1e-4);
        assert_eq!(s1().count_moments(0.0, 3.0).unwrap(), CountMoments { mean: 0.0, variance: 0.0 });
        assert_relative_eq!(s1().count_moments(0.5, 1.0).unwrap().mean, 152.20, max_relative = 1e-4);
        assert!(s1().count_moments(1.5, 1.0).is_err());
    }

    #[test]
    fn sample_count_edge_cases() {
        let mut r = rng::stream(1, 0, 0);
        for _ in 0..100 {
            assert_eq!(sample_count(&mut r, &s1(), 0.0, 1.0).unwrap(), 0.0);
        }
        // Certain capture: count equals the released number exactly.
        assert_eq!(sample_released(&mut r, 10_000, 1.0), 10_000.0);
        assert_eq!(sample_released(&mut r, 7, 1.0), 7.0);
    }

    #[test]
    fn sample_count_matches_moments() {
        let p = s1();
        let mut r = rng::stream(2, 0, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_count(&mut r, &p, 1.0, 1.0).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert_relative_eq!(mean, 304.41, max_relative = 0.01);
        // Binomial branch.
        let q = p.clone().with_n_m(1000);
        let m = q.count_moments(1.0, 1.0).unwrap();
        assert!(m.mean < GAUSSIAN_SWITCH_MEAN);
        let draws: Vec<f64> = (0..n).map(|_| sample_count(&mut r, &q, 1.0, 1.0).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (m.variance / n as f64).sqrt();
        assert!((mean - m.mean).abs() < 3.0 * se_mean);
        // Variance standard error for a near-Poisson count.
        let se_var = m.variance * (2.0 / n as f64 + 1.0 / (m.mean * n as f64)).sqrt();
        assert!((var - m.variance).abs() < 3.0 * se_var, "{var} vs {}", m.variance);
    }

    #[test]
    fn observe_slot_silent() {
        let p = s1().with_sigma_n(0.0);
        let mut r = rng::stream(3, 0, 0);
        let obs = observe_slot(&mut r, &p, 0.0, &[0.0], p.observation_time()).unwrap();
        assert_eq!(obs.count, 0.0);
        assert_eq!(obs.w_rx, 0.0);
    }

    #[test]
    fn observe_slot_expected_count_with_isi() {
        let p = s1().with_sigma_n(0.0);
        let t = p.observation_time();
        let mut r = rng::stream(4, 0, 0);
        let obs = observe_slot(&mut r, &p, 1.0, &[1.0], t).unwrap();
        assert_relative_eq!(obs.signal_mean, 334.76, max_relative = 1e-4);
        assert_relative_eq!(obs.isi_mean, 11.39, max_relative = 1e-3);
        let n = 20_000;
        let mean = (0..n)
            .map(|_| observe_slot(&mut r, &p, 1.0, &[1.0], t).unwrap().count)
            .sum::<f64>()
            / n as f64;
        assert_relative_eq!(mean, 334.76 + 11.39, max_relative = 0.005);
    }

    #[test]
    fn observe_slot_high_drift_has_no_isi() {
        let p = ChannelParams::scenario2().with_sigma_n(0.0);
        let mut r = rng::stream(5, 0, 0);
        let obs = observe_slot(&mut r, &p, 1.0, &[1.0], p.observation_time()).unwrap();
        assert!(obs.isi_mean < 1e-300);
    }

    #[test]
    fn observe_slot_window_padding_and_range() {
        let p = s1().with_sigma_n(0.0);
        let mut r = rng::stream(6, 0, 0);
        let obs = observe_slot(&mut r, &p, 1.0, &[], 1.0).unwrap();
        assert_eq!(obs.isi_mean, 0.0);
        assert!(observe_slot(&mut r, &p, 1.0, &[], p.slot + 0.1).is_err());
        assert!(observe_slot(&mut r, &p, 1.0, &[], 0.0).is_err());
    }

    #[test]
    fn sir_values() {
        let p = s1().with_sigma_n(0.0);
        let w = SymbolSequence::new(vec![1.0, 1.0]).unwrap();
        let t = p.observation_time();
        assert_relative_eq!(sir_at(&p, &w, 1, t).unwrap(), 29.40, max_relative = 1e-3);
        assert!(sir_at(&p, &w, 0, t).unwrap().is_infinite());
        let zero = SymbolSequence::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(sir_at(&p, &zero, 1, t).unwrap(), 0.0);
        assert!(matches!(sir_at(&p, &w, 2, t), Err(Error::IndexOutOfRange { .. })));

        let q = ChannelParams::scenario2();
        assert_relative_eq!(sir_at(&q, &w, 1, q.observation_time()).unwrap(), 36.19, max_relative = 1e-3);
    }

    #[test]
    fn sir_is_scale_invariant_without_noise() {
        let w = SymbolSequence::new(vec![0.3, 1.0, 0.6]).unwrap();
        let values: Vec<f64> = [1_000u64, 10_000, 100_000]
            .iter()
            .map(|&n| sir_at(&s1().with_sigma_n(0.0).with_n_m(n), &w, 2, 1.3).unwrap())
            .collect();
        assert_relative_eq!(values[0], values[1], max_relative = 1e-2);
        assert_relative_eq!(values[1], values[2], max_relative = 1e-3);
    }

    #[test]
    fn sir_trace_shape() {
        let p = s1();
        let w = SymbolSequence::new(vec![1.0; 5]).unwrap();
        let trace = sir_trace(&p, &w, 0.01).unwrap();
        assert_eq!(trace.len(), 5 * 400);
        assert!(trace.windows(2).all(|pair| pair[1].t_global > pair[0].t_global));
        let zeros = SymbolSequence::new(vec![0.0; 5]).unwrap();
        assert!(sir_trace(&p, &zeros, 0.01).unwrap().iter().all(|pt| pt.sir == 0.0));
        let single = SymbolSequence::new(vec![1.0]).unwrap();
        for pt in sir_trace(&p, &single, 0.5).unwrap() {
            let expected = 20_000.0 * p.capture_probability(pt.t_local).unwrap() / 10.0;
            assert_relative_eq!(pt.sir, expected, max_relative = 1e-12);
        }
        assert!(sir_trace(&p, &w, 4.0).is_err());
        assert!(sir_trace(&p, &w, 0.0).is_err());
    }

    #[test]
    fn config_round_trip_and_validation() {
        let text = "R = 100.0\nr = 20.0\nv = 50.0\nt_s = 4.0\nD_c = 800.0\nn_m = 20000\n";
        let p = ChannelParams::from_toml(text).unwrap();
        assert_eq!(p.sigma_n, DEFAULT_SIGMA_N);
        assert_eq!(p.lambda, 1);
        assert_eq!(ChannelParams::from_toml(&s1().to_toml()).unwrap(), s1());
        assert!(ChannelParams::from_toml("R = 10.0\nr = 20.0\nv = 1.0\nt_s = 1.0\nD_c = 1.0\nn_m = 1\n").is_err());
        assert!(ChannelParams::from_toml("R = 100.0\nr = 20.0\nv = 1.0\nt_s = 1.0\nD_c = 1.0\nn_m = 1\nt_obs = 2.0\n").is_err());
        assert!(matches!(ChannelParams::named("scenario3"), Err(Error::UnknownScenario(_))));
    }
}

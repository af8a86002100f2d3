//! Brownian-dynamics particle simulator used as an independent check on the
//! closed-form capture probability.
//!
//! Particles start at the transmitter and take Euler-Maruyama steps
//! `x += v dt + sqrt(2 D dt) xi` (drift on x only). At each probe time the
//! fraction of particles inside the receiver sphere is recorded; particles
//! are never absorbed.
//!
//! Particles are processed in fixed shards of [`SHARD_SIZE`]. Shard `s` draws
//! from stream `(seed, PARTICLES, s)`, so counts are identical for any number
//! of worker threads.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelParams;
use crate::error::{Error, Result};
use crate::rng;

pub const SHARD_SIZE: usize = 4096;
pub const MIN_PARTICLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSimConfig {
    pub n_particles: usize,
    pub dt: f64,
    pub t_max: f64,
    pub record_times: Vec<f64>,
    pub seed: u64,
}

impl ParticleSimConfig {
    /// Default step: 1 ms for slow links, 0.1 ms when the drift is fast.
    pub fn default_dt(p: &ChannelParams) -> f64 {
        if p.velocity * 1e-3 > p.rx_radius {
            1e-4
        } else {
            1e-3
        }
    }

    pub fn for_times(p: &ChannelParams, record_times: Vec<f64>, n_particles: usize, seed: u64) -> Self {
        let t_max = record_times.iter().cloned().fold(0.0, f64::max);
        ParticleSimConfig {
            n_particles,
            dt: Self::default_dt(p),
            t_max,
            record_times,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < MIN_PARTICLES {
            return Err(Error::Config(format!(
                "need at least {MIN_PARTICLES} particles, got {}",
                self.n_particles
            )));
        }
        if !(self.dt > 0.0) || !(self.t_max > 0.0) {
            return Err(Error::Config("dt and t_max must be positive".into()));
        }
        if self.record_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("record times must be strictly increasing".into()));
        }
        if let Some(&first) = self.record_times.first() {
            if self.dt >= first {
                return Err(Error::Config(format!(
                    "dt = {} must be smaller than the first record time {first}",
                    self.dt
                )));
            }
            if first <= 0.0 || *self.record_times.last().unwrap() > self.t_max {
                return Err(Error::Config("record times must lie in (0, t_max]".into()));
            }
        }
        Ok(())
    }
}

/// Step plan shared by all particles: step sizes, and the indices of steps
/// that end exactly on a record time.
struct Schedule {
    steps: Vec<(f64, f64)>,
    records: Vec<usize>,
}

impl Schedule {
    fn new(cfg: &ParticleSimConfig, p: &ChannelParams) -> Self {
        let mut steps = Vec::new();
        let mut records = Vec::with_capacity(cfg.record_times.len());
        let mut t = 0.0;
        for &target in &cfg.record_times {
            let n = ((target - t) / cfg.dt - 1e-9).ceil().max(1.0) as usize;
            // Uniform sub-steps that land exactly on the record time.
            let h = (target - t) / n as f64;
            let drift = p.velocity * h;
            let sd = (2.0 * p.diffusion * h).sqrt();
            steps.extend(std::iter::repeat_n((drift, sd), n));
            records.push(steps.len() - 1);
            t = target;
        }
        Schedule { steps, records }
    }
}

fn shard_ranges(n: usize) -> Vec<(u32, usize)> {
    (0..n.div_ceil(SHARD_SIZE))
        .map(|s| (s as u32, SHARD_SIZE.min(n - s * SHARD_SIZE)))
        .collect()
}

/// Per record time, the number of particles inside the receiver.
fn presence_counts(cfg: &ParticleSimConfig, p: &ChannelParams) -> Vec<u64> {
    let schedule = Schedule::new(cfg, p);
    let r2 = p.rx_radius * p.rx_radius;
    let n_rec = cfg.record_times.len();
    shard_ranges(cfg.n_particles)
        .into_par_iter()
        .map(|(shard, size)| {
            let mut rng = rng::stream(cfg.seed, rng::PARTICLES, shard);
            let mut counts = vec![0u64; n_rec];
            for _ in 0..size {
                let (mut x, mut y, mut z) = (0.0f64, 0.0f64, 0.0f64);
                let mut next = 0;
                for (i, &(drift, sd)) in schedule.steps.iter().enumerate() {
                    let a: f64 = rng.sample(StandardNormal);
                    let b: f64 = rng.sample(StandardNormal);
                    let c: f64 = rng.sample(StandardNormal);
                    x += drift + sd * a;
                    y += sd * b;
                    z += sd * c;
                    if schedule.records[next] == i {
                        let dx = x - p.distance;
                        if dx * dx + y * y + z * z <= r2 {
                            counts[next] += 1;
                        }
                        next += 1;
                        if next == n_rec {
                            break;
                        }
                    }
                }
            }
            counts
        })
        .reduce(
            || vec![0u64; n_rec],
            |mut acc, c| {
                acc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                acc
            },
        )
}

/// Fraction of particles inside the receiver at each record time.
pub fn simulate_presence(cfg: &ParticleSimConfig, p: &ChannelParams) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    p.validate()?;
    if cfg.record_times.is_empty() {
        return Ok(Vec::new());
    }
    let counts = presence_counts(cfg, p);
    Ok(cfg
        .record_times
        .iter()
        .zip(counts)
        .map(|(&t, c)| (t, c as f64 / cfg.n_particles as f64))
        .collect())
}

/// Particle positions at `t_max` (same stepping and seeding as
/// [`simulate_presence`]).
pub fn final_positions(cfg: &ParticleSimConfig, p: &ChannelParams) -> Result<Vec<[f64; 3]>> {
    cfg.validate()?;
    let plan = ParticleSimConfig {
        record_times: vec![cfg.t_max],
        ..cfg.clone()
    };
    let schedule = Schedule::new(&plan, p);
    let out = shard_ranges(cfg.n_particles)
        .into_par_iter()
        .flat_map_iter(|(shard, size)| {
            let mut rng = rng::stream(cfg.seed, rng::PARTICLES, shard);
            let mut pos = Vec::with_capacity(size);
            for _ in 0..size {
                let mut q = [0.0f64; 3];
                for &(drift, sd) in &schedule.steps {
                    let a: f64 = rng.sample(StandardNormal);
                    let b: f64 = rng.sample(StandardNormal);
                    let c: f64 = rng.sample(StandardNormal);
                    q[0] += drift + sd * a;
                    q[1] += sd * b;
                    q[2] += sd * c;
                }
                pos.push(q);
            }
            pos
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub t: f64,
    pub p_empirical: f64,
    pub p_analytic: f64,
    pub rel_err: f64,
}

impl CurvePoint {
    /// Monte Carlo standard error of the empirical value.
    pub fn std_error(&self, n_particles: usize) -> f64 {
        (self.p_empirical * (1.0 - self.p_empirical) / n_particles as f64).sqrt()
    }
}

/// Empirical presence curve on `cfg.record_times` alongside the closed form.
pub fn empirical_capture_curve(cfg: &ParticleSimConfig, p: &ChannelParams) -> Result<Vec<CurvePoint>> {
    simulate_presence(cfg, p)?
        .into_iter()
        .map(|(t, emp)| {
            let an = p.capture_probability(t)?;
            let rel_err = if an > 0.0 { (emp - an).abs() / an } else { f64::INFINITY };
            Ok(CurvePoint {
                t,
                p_empirical: emp,
                p_analytic: an,
                rel_err,
            })
        })
        .collect()
}

pub fn uniform_grid(t_max: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|i| t_max * i as f64 / n as f64).collect()
}

pub fn write_curve_csv<W: Write>(out: &mut W, curve: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(out, "t_s,p_empirical,p_analytic,rel_err")?;
    for c in curve {
        writeln!(out, "{:?},{:?},{:?},{:?}", c.t, c.p_empirical, c.p_analytic, c.rel_err)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CurveMetadata<'a> {
    pub config: &'a ParticleSimConfig,
    pub channel: &'a ChannelParams,
    pub shard_size: usize,
    pub stream_scheme: &'static str,
}

impl<'a> CurveMetadata<'a> {
    pub fn new(config: &'a ParticleSimConfig, channel: &'a ChannelParams) -> Self {
        CurveMetadata {
            config,
            channel,
            shard_size: SHARD_SIZE,
            stream_scheme: "ChaCha8(seed), stream = (1 << 32) | shard_index",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(times: Vec<f64>, n: usize, seed: u64) -> ParticleSimConfig {
        ParticleSimConfig::for_times(&ChannelParams::scenario1(), times, n, seed)
    }

    #[test]
    fn config_errors() {
        let p = ChannelParams::scenario1();
        let mut c = cfg(vec![0.5, 1.0], 2000, 1);
        c.dt = 0.5;
        assert!(matches!(simulate_presence(&c, &p), Err(Error::Config(_))));
        let c = cfg(vec![1.0, 0.5], 2000, 1);
        assert!(simulate_presence(&c, &p).is_err());
        let c = cfg(vec![1.0], 10, 1);
        assert!(simulate_presence(&c, &p).is_err());
    }

    #[test]
    fn empty_grid_gives_empty_curve() {
        let p = ChannelParams::scenario1();
        let c = ParticleSimConfig {
            n_particles: 2000,
            dt: 1e-3,
            t_max: 1.0,
            record_times: vec![],
            seed: 3,
        };
        assert!(empirical_capture_curve(&c, &p).unwrap().is_empty());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let p = ChannelParams::scenario1();
        let c = cfg(vec![0.5, 1.0, 1.2585], 5000, 11);
        let a = empirical_capture_curve(&c, &p).unwrap();
        let b = empirical_capture_curve(&c, &p).unwrap();
        assert_eq!(a, b);
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let multi = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let x = single.install(|| simulate_presence(&c, &p).unwrap());
        let y = multi.install(|| simulate_presence(&c, &p).unwrap());
        assert_eq!(x, y);
    }

    #[test]
    fn nothing_present_at_early_times() {
        let p = ChannelParams::scenario1().with_velocity(0.0);
        let c = cfg(vec![0.01, 0.05], 5000, 2);
        for (_, emp) in simulate_presence(&c, &p).unwrap() {
            assert_eq!(emp, 0.0);
        }
    }

    #[test]
    fn ballistic_limit_arrives_at_centre() {
        let p = ChannelParams {
            diffusion: 1e-9,
            ..ChannelParams::scenario1()
        };
        let arrival = p.distance / p.velocity;
        let c = cfg(vec![arrival / 2.0, arrival], 2000, 4);
        let out = simulate_presence(&c, &p).unwrap();
        assert_eq!(out[0].1, 0.0);
        assert_eq!(out[1].1, 1.0);
    }

    #[test]
    fn displacement_moments() {
        let p = ChannelParams::scenario1();
        let c = ParticleSimConfig {
            n_particles: 20_000,
            dt: 1e-2,
            t_max: 1.0,
            record_times: vec![1.0],
            seed: 9,
        };
        let pos = final_positions(&c, &p).unwrap();
        let n = pos.len() as f64;
        let var_true = 2.0 * p.diffusion * c.t_max;
        for axis in 0..3 {
            let mean = pos.iter().map(|q| q[axis]).sum::<f64>() / n;
            let expected = if axis == 0 { p.velocity * c.t_max } else { 0.0 };
            assert!((mean - expected).abs() < 3.0 * (var_true / n).sqrt(), "axis {axis} mean {mean}");
            let var = pos.iter().map(|q| (q[axis] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            // Var of the sample variance for Gaussian data is 2 sigma^4 / (n - 1).
            let se = var_true * (2.0 / (n - 1.0)).sqrt();
            assert!((var - var_true).abs() < 3.0 * se, "axis {axis} var {var}");
        }
    }

    #[test]
    fn close_to_closed_form_at_peak() {
        let p = ChannelParams::scenario1();
        let t = p.peak_time();
        let c = cfg(vec![t], 20_000, 5);
        let curve = empirical_capture_curve(&c, &p).unwrap();
        assert_relative_eq!(curve[0].p_empirical, 0.0167, max_relative = 0.15);
    }
}

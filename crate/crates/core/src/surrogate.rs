//! Mixture-density surrogate of the stochastic channel.
//!
//! A five-layer network maps the symbol context `(w_curr, w_prev)` to an
//! `h = 2` component Gaussian mixture over the normalized received value
//! `w_rx`. It is fitted by negative log-likelihood on pairs drawn from the
//! channel simulator, then frozen and used as a differentiable stand-in for
//! the channel while the transceiver trains.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::channel::{observe_slot, ChannelParams};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Checkpoint, ROLE_SURROGATE};
use crate::nn::{softmax_in_place, Activation, DenseNet, Sgd, Trace};
use crate::rng;

/// Number of mixture components.
pub const COMPONENTS: usize = 2;
pub const VAR_MIN: f64 = 1e-6;
pub const VAR_MAX: f64 = 1e2;
/// Density floor applied before taking logs in the NLL.
pub const DENSITY_FLOOR: f64 = 1e-30;
pub const CONTEXT_DIM: usize = 2;
const RAW_DIM: usize = 3 * COMPONENTS;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl MixtureParams {
    pub fn new(pi: Vec<f64>, mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if pi.is_empty() || pi.len() != mu.len() || pi.len() != sigma2.len() {
            return Err(Error::Domain("mixture vectors must be non-empty and equal length".into()));
        }
        if (pi.iter().sum::<f64>() - 1.0).abs() > 1e-6 || pi.iter().any(|&p| p < 0.0) {
            return Err(Error::Domain("mixing weights must be a probability vector".into()));
        }
        if sigma2.iter().any(|&s| !(s >= VAR_MIN)) {
            return Err(Error::Domain(format!("component variances must be at least {VAR_MIN}")));
        }
        Ok(MixtureParams { pi, mu, sigma2 })
    }

    pub fn components(&self) -> usize {
        self.pi.len()
    }

    fn log_terms(&self, w_rx: f64) -> impl Iterator<Item = f64> + '_ {
        (0..self.components()).map(move |i| {
            let d = w_rx - self.mu[i];
            self.pi[i].ln() - 0.5 * (2.0 * PI * self.sigma2[i]).ln() - d * d / (2.0 * self.sigma2[i])
        })
    }

    pub fn pdf(&self, w_rx: f64) -> f64 {
        self.log_terms(w_rx).map(f64::exp).sum()
    }

    /// `log pdf`, with the density floored at [`DENSITY_FLOOR`].
    pub fn log_pdf(&self, w_rx: f64) -> f64 {
        let logs: Vec<f64> = self.log_terms(w_rx).collect();
        log_sum_exp(logs.iter().copied()).max(DENSITY_FLOOR.ln())
    }

    pub fn mean(&self) -> f64 {
        self.pi.iter().zip(&self.mu).map(|(p, m)| p * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        (0..self.components())
            .map(|i| self.pi[i] * (self.sigma2[i] + (self.mu[i] - m).powi(2)))
            .sum()
    }
}

pub fn mixture_pdf(mp: &MixtureParams, w_rx: f64) -> f64 {
    mp.pdf(w_rx)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// One simulated channel use with its Markov context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelPair {
    pub w_curr: f64,
    pub w_prev: f64,
    pub w_rx: f64,
}

/// How gradients cross the sampled mixture component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GradientRoute {
    /// Component index is a constant; gradient flows through its mean and variance.
    PassThrough,
    /// Sampled value, gradient of the mixture mean (straight-through).
    MixtureMean,
    /// Gumbel-softmax relaxation of the component choice.
    Relaxed { temperature: f64 },
}

/// Noise fixed for one surrogate sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateDraw {
    pub component: usize,
    pub eps: f64,
    pub gumbel: [f64; COMPONENTS],
}

impl SurrogateDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, mp: &MixtureParams) -> Self {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut component = mp.components() - 1;
        for (i, p) in mp.pi.iter().enumerate() {
            acc += p;
            if u < acc {
                component = i;
                break;
            }
        }
        let eps = rng.sample(StandardNormal);
        let mut gumbel = [0.0; COMPONENTS];
        for g in gumbel.iter_mut() {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            *g = -(-u.ln()).ln();
        }
        SurrogateDraw { component, eps, gumbel }
    }
}

/// Draws `w_rx ~ p(. | mp)` (component ~ pi, then Gaussian).
pub fn sample_surrogate<R: Rng + ?Sized>(rng: &mut R, mp: &MixtureParams) -> f64 {
    let d = SurrogateDraw::sample(rng, mp);
    mp.mu[d.component] + mp.sigma2[d.component].sqrt() * d.eps
}

/// Value and gradient of one reparameterized sample with respect to the
/// mixture parameters, `(w, d/dlogits, d/dmu, d/dsigma2)`.
pub fn reparameterized(
    mp: &MixtureParams,
    draw: &SurrogateDraw,
    route: GradientRoute,
) -> (f64, [f64; COMPONENTS], [f64; COMPONENTS], [f64; COMPONENTS]) {
    let c = draw.component;
    let mut d_logit = [0.0; COMPONENTS];
    let mut d_mu = [0.0; COMPONENTS];
    let mut d_s2 = [0.0; COMPONENTS];
    let sd = |i: usize| mp.sigma2[i].sqrt();
    match route {
        GradientRoute::PassThrough => {
            d_mu[c] = 1.0;
            d_s2[c] = draw.eps / (2.0 * sd(c));
            (mp.mu[c] + sd(c) * draw.eps, d_logit, d_mu, d_s2)
        }
        GradientRoute::MixtureMean => {
            let mean = mp.mean();
            for i in 0..COMPONENTS {
                d_mu[i] = mp.pi[i];
                d_logit[i] = mp.pi[i] * (mp.mu[i] - mean);
            }
            (mp.mu[c] + sd(c) * draw.eps, d_logit, d_mu, d_s2)
        }
        GradientRoute::Relaxed { temperature } => {
            let mut a: Vec<f64> = (0..COMPONENTS)
                .map(|i| (mp.pi[i].max(DENSITY_FLOOR).ln() + draw.gumbel[i]) / temperature)
                .collect();
            softmax_in_place(&mut a);
            let s: Vec<f64> = (0..COMPONENTS).map(|i| mp.mu[i] + sd(i) * draw.eps).collect();
            let w: f64 = a.iter().zip(&s).map(|(a, s)| a * s).sum();
            for i in 0..COMPONENTS {
                d_mu[i] = a[i];
                d_s2[i] = a[i] * draw.eps / (2.0 * sd(i));
                d_logit[i] = a[i] * (s[i] - w) / temperature;
            }
            (w, d_logit, d_mu, d_s2)
        }
    }
}

/// Affine map from network outputs to mixture parameters. `mu = shift +
/// scale * raw`, `sigma2 = clamp(scale^2 exp(raw), VAR_MIN, VAR_MAX)`; the
/// shift and scale are fixed from the training targets before fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputScaling {
    pub shift: f64,
    pub scale: f64,
}

impl Default for OutputScaling {
    fn default() -> Self {
        OutputScaling { shift: 0.0, scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSurrogate {
    net: DenseNet,
    scaling: OutputScaling,
    frozen: bool,
    /// Channel the surrogate was fitted to, if any.
    pub channel: Option<ChannelParams>,
}

/// Hidden width of the surrogate network.
pub const HIDDEN: usize = 64;

impl ChannelSurrogate {
    /// Fresh five-layer network `2 -> 64 -> 64 -> 64 -> 64 -> 3h`.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, hidden: usize) -> Self {
        let net = DenseNet::mlp(
            rng,
            &[CONTEXT_DIM, hidden, hidden, hidden, hidden, RAW_DIM],
            Activation::LeakyRelu,
            Activation::Identity,
        );
        ChannelSurrogate {
            net,
            scaling: OutputScaling::default(),
            frozen: false,
            channel: None,
        }
    }

    pub fn from_net(net: DenseNet, scaling: OutputScaling) -> Result<Self> {
        if net.input_dim() != CONTEXT_DIM || net.output_dim() != RAW_DIM {
            return Err(Error::ShapeMismatch {
                expected: vec![CONTEXT_DIM, RAW_DIM],
                got: vec![net.input_dim(), net.output_dim()],
            });
        }
        Ok(ChannelSurrogate {
            net,
            scaling,
            frozen: false,
            channel: None,
        })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> Result<&mut DenseNet> {
        if self.frozen {
            return Err(Error::Config("surrogate is frozen".into()));
        }
        Ok(&mut self.net)
    }

    pub fn scaling(&self) -> OutputScaling {
        self.scaling
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Mixture parameters from one raw output row.
    pub fn head(&self, raw: &[f64]) -> MixtureParams {
        let h = COMPONENTS;
        let mut pi = raw[..h].to_vec();
        softmax_in_place(&mut pi);
        let s = self.scaling;
        let mu = raw[h..2 * h].iter().map(|&o| s.shift + s.scale * o).collect();
        let sigma2 = raw[2 * h..]
            .iter()
            .map(|&o| (s.scale * s.scale * o.min(700.0).exp()).clamp(VAR_MIN, VAR_MAX))
            .collect();
        MixtureParams { pi, mu, sigma2 }
    }

    /// Gradient with respect to a raw output row, given gradients with
    /// respect to logits, means and variances of the mixture it produced.
    fn head_backward(&self, mp: &MixtureParams, d_logit: &[f64], d_mu: &[f64], d_s2: &[f64], out: &mut [f64]) {
        let h = COMPONENTS;
        for i in 0..h {
            out[i] = d_logit[i];
            out[h + i] = d_mu[i] * self.scaling.scale;
            let clamped = mp.sigma2[i] <= VAR_MIN || mp.sigma2[i] >= VAR_MAX;
            out[2 * h + i] = if clamped { 0.0 } else { d_s2[i] * mp.sigma2[i] };
        }
    }

    pub fn mdn_forward(&self, w_curr: f64, w_prev: f64) -> MixtureParams {
        let raw = self.net.predict(&[w_curr, w_prev], 1).expect("context shape");
        self.head(&raw)
    }

    /// Batched forward over row-major `[n, 2]` contexts.
    pub fn forward_contexts(&self, contexts: &[f64]) -> Result<(Trace, Vec<MixtureParams>)> {
        let n = contexts.len() / CONTEXT_DIM;
        let trace = self.net.forward_rows(contexts, n)?;
        let mixtures = trace.output().chunks(RAW_DIM).map(|r| self.head(r)).collect();
        Ok((trace, mixtures))
    }

    /// Reparameterized samples for a batch of contexts. `draw` supplies the
    /// noise for sample `i` given its mixture.
    pub fn sample_pass(
        &self,
        contexts: &[f64],
        route: GradientRoute,
        mut draw: impl FnMut(usize, &MixtureParams) -> SurrogateDraw,
    ) -> Result<SurrogatePass> {
        let (trace, mixtures) = self.forward_contexts(contexts)?;
        let mut w_rx = Vec::with_capacity(mixtures.len());
        let mut draws = Vec::with_capacity(mixtures.len());
        let mut d_raw = vec![0.0; mixtures.len() * RAW_DIM];
        for (i, mp) in mixtures.iter().enumerate() {
            let d = draw(i, mp);
            let (w, dl, dm, ds) = reparameterized(mp, &d, route);
            w_rx.push(w);
            draws.push(d);
            self.head_backward(mp, &dl, &dm, &ds, &mut d_raw[i * RAW_DIM..(i + 1) * RAW_DIM]);
        }
        Ok(SurrogatePass {
            trace,
            mixtures,
            draws,
            w_rx,
            dw_draw: d_raw,
        })
    }

    /// dL/d contexts from dL/d w_rx through a recorded pass. Parameters are
    /// never touched.
    pub fn pass_backward(&self, pass: &SurrogatePass, d_wrx: &[f64]) -> Result<Vec<f64>> {
        let grad_raw: Vec<f64> = pass
            .dw_draw
            .chunks(RAW_DIM)
            .zip(d_wrx)
            .flat_map(|(row, &g)| row.iter().map(move |r| r * g))
            .collect();
        self.net.input_gradient(&pass.trace, &grad_raw)
    }

    /// Per-pair NLL and its gradient with respect to the raw output row.
    fn nll_row(&self, raw: &[f64], y: f64, grad: &mut [f64]) -> f64 {
        let mp = self.head(raw);
        let logs: Vec<f64> = mp.log_terms(y).collect();
        let lse = log_sum_exp(logs.iter().copied());
        if lse < DENSITY_FLOOR.ln() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return -DENSITY_FLOOR.ln();
        }
        let mut d_logit = [0.0; COMPONENTS];
        let mut d_mu = [0.0; COMPONENTS];
        let mut d_s2 = [0.0; COMPONENTS];
        for i in 0..COMPONENTS {
            let gamma = (logs[i] - lse).exp();
            let s2 = mp.sigma2[i];
            let d = y - mp.mu[i];
            d_logit[i] = mp.pi[i] - gamma;
            d_mu[i] = -gamma * d / s2;
            d_s2[i] = gamma * (0.5 / s2 - d * d / (2.0 * s2 * s2));
        }
        self.head_backward(&mp, &d_logit, &d_mu, &d_s2, grad);
        -lse
    }

    /// Mean NLL over `pairs`; when `accumulate` is set, adds its gradient to
    /// the network parameters.
    fn nll_impl(&mut self, pairs: &[ChannelPair], accumulate: bool) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Empty("channel pair batch"));
        }
        let contexts: Vec<f64> = pairs.iter().flat_map(|p| [p.w_curr, p.w_prev]).collect();
        let trace = self.net.forward_rows(&contexts, pairs.len())?;
        let scale = 1.0 / pairs.len() as f64;
        let mut grad = vec![0.0; pairs.len() * RAW_DIM];
        let mut total = 0.0;
        for (i, (raw, p)) in trace.output().chunks(RAW_DIM).zip(pairs).enumerate() {
            let g = &mut grad[i * RAW_DIM..(i + 1) * RAW_DIM];
            total += self.nll_row(raw, p.w_rx, g);
            g.iter_mut().for_each(|v| *v *= scale);
        }
        if accumulate {
            self.net.backward(&trace, &grad)?;
        }
        Ok(total * scale)
    }

    /// Mean negative log-likelihood of `pairs`.
    pub fn mdn_nll(&self, pairs: &[ChannelPair]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Empty("channel pair batch"));
        }
        let mut total = 0.0;
        for chunk in pairs.chunks(4096) {
            let contexts: Vec<f64> = chunk.iter().flat_map(|p| [p.w_curr, p.w_prev]).collect();
            let raw = self.net.predict(&contexts, chunk.len())?;
            let mut scratch = [0.0; RAW_DIM];
            for (r, p) in raw.chunks(RAW_DIM).zip(chunk) {
                total += self.nll_row(r, p.w_rx, &mut scratch);
            }
        }
        Ok(total / pairs.len() as f64)
    }

    /// Mean NLL of `pairs` with its parameter gradient accumulated.
    pub fn mdn_nll_backward(&mut self, pairs: &[ChannelPair]) -> Result<f64> {
        if self.frozen {
            return Err(Error::Config("surrogate is frozen".into()));
        }
        self.nll_impl(pairs, true)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(ROLE_SURROGATE);
        ck.meta.insert("components".into(), COMPONENTS.to_string());
        ck.meta.insert("frozen".into(), self.frozen.to_string());
        if let Some(ch) = &self.channel {
            ck.meta.insert("channel".into(), ch.to_toml());
        }
        ck.vectors
            .insert("output_scaling".into(), vec![self.scaling.shift, self.scaling.scale]);
        ck.nets.insert("mdn".into(), self.net.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_role(ROLE_SURROGATE)?;
        let h: usize = ck.meta_value("components")?;
        if h != COMPONENTS {
            return Err(Error::Format(format!("surrogate has {h} components, expected {COMPONENTS}")));
        }
        let s = ck.vector("output_scaling")?;
        if s.len() != 2 {
            return Err(Error::Format("output_scaling must hold shift and scale".into()));
        }
        let mut sur = ChannelSurrogate::from_net(ck.net("mdn")?.clone(), OutputScaling { shift: s[0], scale: s[1] })?;
        sur.frozen = ck.meta_value("frozen")?;
        sur.channel = ck.meta.get("channel").map(|t| ChannelParams::from_toml(t)).transpose()?;
        Ok(sur)
    }
}

/// A recorded batch of surrogate samples.
#[derive(Debug, Clone)]
pub struct SurrogatePass {
    trace: Trace,
    pub mixtures: Vec<MixtureParams>,
    pub draws: Vec<SurrogateDraw>,
    pub w_rx: Vec<f64>,
    /// d w_rx / d raw output, per sample.
    dw_draw: Vec<f64>,
}

/// Pairs with `w_curr, w_prev ~ U[0, 1]` pushed through the simulator at
/// the channel's observation instant.
pub fn generate_pairs<R: Rng + ?Sized>(rng: &mut R, p: &ChannelParams, n: usize) -> Result<Vec<ChannelPair>> {
    if n == 0 {
        return Err(Error::Empty("pair count"));
    }
    let unit = Uniform::new_inclusive(0.0, 1.0).expect("unit interval");
    let t = p.observation_time();
    (0..n)
        .map(|_| {
            let w_curr = unit.sample(rng);
            let w_prev = unit.sample(rng);
            let obs = observe_slot(rng, p, w_curr, &[w_prev], t)?;
            Ok(ChannelPair { w_curr, w_prev, w_rx: obs.w_rx })
        })
        .collect()
}

pub fn write_pairs_csv<W: Write>(out: &mut W, pairs: &[ChannelPair]) -> std::io::Result<()> {
    writeln!(out, "w_curr,w_prev,w_rx")?;
    for p in pairs {
        writeln!(out, "{},{},{}", p.w_curr, p.w_prev, p.w_rx)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateTrainConfig {
    pub n_pairs: usize,
    pub validation_fraction: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: Option<f64>,
    /// Stop when the training NLL improves by less than this fraction over
    /// `patience` epochs.
    pub rel_tol: f64,
    pub patience: usize,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    /// Global gradient-norm bound per step.
    pub clip_norm: Option<f64>,
    pub hidden: usize,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        SurrogateTrainConfig {
            n_pairs: 50_000,
            validation_fraction: 0.1,
            max_epochs: 60,
            batch_size: 128,
            lr: 1e-3,
            momentum: Some(0.9),
            rel_tol: 1e-4,
            patience: 5,
            lr_decay: 0.8,
            clip_norm: Some(10.0),
            hidden: HIDDEN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NllEpoch {
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub surrogate: ChannelSurrogate,
    pub history: Vec<NllEpoch>,
    pub train_pairs: Vec<ChannelPair>,
    pub validation_pairs: Vec<ChannelPair>,
}

/// Generates pairs and fits a surrogate; the result is frozen.
pub fn fit_channel(seed: u64, p: &ChannelParams, cfg: &SurrogateTrainConfig) -> Result<FitResult> {
    let mut pair_rng = rng::stream(seed, rng::PAIRS, 0);
    let pairs = generate_pairs(&mut pair_rng, p, cfg.n_pairs)?;
    let n_val = ((cfg.n_pairs as f64 * cfg.validation_fraction).round() as usize).clamp(1, cfg.n_pairs - 1);
    let (val, train) = pairs.split_at(n_val);
    let mut init_rng = rng::stream(seed, rng::SURROGATE_INIT, 0);
    let mut sur = ChannelSurrogate::new(&mut init_rng, cfg.hidden);
    sur.channel = Some(p.clone());
    let mut train_rng = rng::stream(seed, rng::SURROGATE_TRAIN, 0);
    let history = train_surrogate(&mut train_rng, &mut sur, train, val, cfg)?;
    sur.freeze();
    Ok(FitResult {
        surrogate: sur,
        history,
        train_pairs: train.to_vec(),
        validation_pairs: val.to_vec(),
    })
}

/// Fits `sur` on `train` by minibatch SGD on the NLL, keeping the
/// parameters with the best validation NLL.
pub fn train_surrogate<R: Rng + ?Sized>(
    rng: &mut R,
    sur: &mut ChannelSurrogate,
    train: &[ChannelPair],
    val: &[ChannelPair],
    cfg: &SurrogateTrainConfig,
) -> Result<Vec<NllEpoch>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("surrogate training pairs"));
    }
    if cfg.max_epochs == 0 {
        return Ok(Vec::new());
    }
    let n = train.len() as f64;
    let mean = train.iter().map(|p| p.w_rx).sum::<f64>() / n;
    let sd = (train.iter().map(|p| (p.w_rx - mean).powi(2)).sum::<f64>() / n).sqrt();
    sur.scaling = OutputScaling {
        shift: mean,
        scale: if sd > 0.0 { sd } else { 1.0 },
    };
    let mut opt = Sgd::new(cfg.lr, cfg.momentum).with_clip_norm(cfg.clip_norm);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history: Vec<NllEpoch> = Vec::new();
    let mut last_good = sur.net.clone();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.max_epochs {
        shuffle(rng, &mut order);
        let mut train_total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| train[i]));
            let loss = sur.mdn_nll_backward(&batch)?;
            if !loss.is_finite() {
                return Err(diverged(epoch, &last_good, sur, "training NLL is not finite"));
            }
            train_total += loss * batch.len() as f64;
            opt.step(&mut sur.net);
        }
        opt.lr *= cfg.lr_decay;
        let validation = sur.mdn_nll(val)?;
        if !validation.is_finite() {
            return Err(diverged(epoch, &last_good, sur, "validation NLL is not finite"));
        }
        last_good = sur.net.clone();
        history.push(NllEpoch {
            epoch,
            train: train_total / n,
            validation,
        });
        // Convergence is judged on the epoch-averaged training NLL; the
        // validation NLL can jump by whole nats when a component locks onto
        // the zero-count atom and is only reported.
        if history.len() > cfg.patience {
            let then = history[history.len() - 1 - cfg.patience].train;
            let recent = history[history.len() - cfg.patience..]
                .iter()
                .map(|e| e.train)
                .fold(f64::INFINITY, f64::min);
            if then - recent < cfg.rel_tol * then.abs().max(1e-12) {
                break;
            }
        }
    }
    Ok(history)
}

fn diverged(epoch: usize, last_good: &DenseNet, sur: &ChannelSurrogate, detail: &str) -> Error {
    let mut snapshot = sur.clone();
    snapshot.net = last_good.clone();
    Error::Diverged {
        epoch,
        detail: detail.to_string(),
        last_good: Some(snapshot.to_checkpoint().to_bytes()),
    }
}

pub(crate) fn shuffle<R: Rng + ?Sized>(rng: &mut R, v: &mut [usize]) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

/// Conditional single-Gaussian reference: mean and variance of `w_rx`
/// matched within equal-width bins of `w_curr`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatchedGaussian {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl MomentMatchedGaussian {
    pub fn fit(pairs: &[ChannelPair], bins: usize) -> Result<Self> {
        let stats = bucket_stats(pairs, bins, |p| p.w_rx);
        if stats.iter().any(|s| s.count < 2) {
            return Err(Error::Empty("moment-matching bin"));
        }
        Ok(MomentMatchedGaussian {
            means: stats.iter().map(|s| s.mean).collect(),
            variances: stats.iter().map(|s| s.variance.max(VAR_MIN)).collect(),
        })
    }

    pub fn nll(&self, pairs: &[ChannelPair]) -> f64 {
        let bins = self.means.len();
        pairs
            .iter()
            .map(|p| {
                let b = bucket_of(p.w_curr, bins);
                let (m, v) = (self.means[b], self.variances[b]);
                0.5 * (2.0 * PI * v).ln() + (p.w_rx - m).powi(2) / (2.0 * v)
            })
            .sum::<f64>()
            / pairs.len() as f64
    }
}

pub fn bucket_of(w_curr: f64, bins: usize) -> usize {
    ((w_curr * bins as f64) as usize).min(bins - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BucketStats {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Mean and (sample) variance of `value` within bins of `w_curr`.
pub fn bucket_stats(pairs: &[ChannelPair], bins: usize, value: impl Fn(&ChannelPair) -> f64) -> Vec<BucketStats> {
    let mut sums = vec![(0usize, 0.0f64, 0.0f64); bins];
    for p in pairs {
        let b = &mut sums[bucket_of(p.w_curr, bins)];
        let v = value(p);
        b.0 += 1;
        b.1 += v;
        b.2 += v * v;
    }
    sums.into_iter()
        .map(|(n, s, ss)| {
            if n == 0 {
                return BucketStats::default();
            }
            let mean = s / n as f64;
            let variance = if n > 1 { (ss - n as f64 * mean * mean) / (n - 1) as f64 } else { 0.0 };
            BucketStats { count: n, mean, variance }
        })
        .collect()
}

/// Surrogate samples at the contexts of `pairs` (`draws_per_pair` each),
/// returned as pairs so they can be bucketed like simulator output.
pub fn surrogate_samples<R: Rng + ?Sized>(
    rng: &mut R,
    sur: &ChannelSurrogate,
    pairs: &[ChannelPair],
    draws_per_pair: usize,
) -> Result<Vec<ChannelPair>> {
    let contexts: Vec<f64> = pairs.iter().flat_map(|p| [p.w_curr, p.w_prev]).collect();
    let (_, mixtures) = sur.forward_contexts(&contexts)?;
    let mut out = Vec::with_capacity(pairs.len() * draws_per_pair);
    for (p, mp) in pairs.iter().zip(&mixtures) {
        for _ in 0..draws_per_pair {
            out.push(ChannelPair {
                w_rx: sample_surrogate(rng, mp),
                ..*p
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_difference, max_relative_error, STEP};
    use approx::assert_relative_eq;

    fn mp(pi: [f64; 2], mu: [f64; 2], s2: [f64; 2]) -> MixtureParams {
        MixtureParams::new(pi.to_vec(), mu.to_vec(), s2.to_vec()).unwrap()
    }

    #[test]
    fn mixture_pdf_values() {
        let std_normal = mp([0.5, 0.5], [0.0, 0.0], [1.0, 1.0]);
        assert_relative_eq!(mixture_pdf(&std_normal, 0.0), 0.398942, max_relative = 1e-6);
        let single = mp([1.0, 0.0], [0.3, 5.0], [0.2, 1.0]);
        let g = (-(0.7f64 - 0.3).powi(2) / 0.4).exp() / (2.0 * PI * 0.2).sqrt();
        assert_relative_eq!(mixture_pdf(&single, 0.7), g, max_relative = 1e-12);
        let split = mp([0.5, 0.5], [-1.0, 1.0], [1.0, 1.0]);
        assert_relative_eq!(mixture_pdf(&split, 0.0), 0.241971, max_relative = 1e-5);
    }

    #[test]
    fn mixture_params_validation() {
        assert!(MixtureParams::new(vec![0.6, 0.6], vec![0.0; 2], vec![1.0; 2]).is_err());
        assert!(MixtureParams::new(vec![0.5, 0.5], vec![0.0; 2], vec![1e-9, 1.0]).is_err());
        assert!(MixtureParams::new(vec![1.0], vec![0.0; 2], vec![1.0; 2]).is_err());
    }

    #[test]
    fn zero_output_layer_gives_standard_mixture() {
        let mut r = rng::stream(1, 0, 0);
        let mut sur = ChannelSurrogate::new(&mut r, 8);
        sur.net_mut().unwrap().zero_output_layer();
        let m = sur.mdn_forward(0.3, 0.9);
        assert_eq!(m.pi, vec![0.5, 0.5]);
        assert_eq!(m.mu, vec![0.0, 0.0]);
        assert_eq!(m.sigma2, vec![1.0, 1.0]);
    }

    #[test]
    fn forward_gives_valid_mixtures() {
        let mut r = rng::stream(2, 0, 0);
        let sur = ChannelSurrogate::new(&mut r, 16);
        for i in 0..50 {
            let m = sur.mdn_forward(i as f64 / 49.0, 1.0 - i as f64 / 49.0);
            assert!((m.pi.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(MixtureParams::new(m.pi.clone(), m.mu.clone(), m.sigma2.clone()).is_ok());
        }
    }

    #[test]
    fn nll_values() {
        let mut r = rng::stream(3, 0, 0);
        let mut sur = ChannelSurrogate::new(&mut r, 8);
        let net = sur.net_mut().unwrap();
        net.zero_output_layer();
        // Put all weight on component 0: logit 0 large, logit 1 small.
        let last = net.params_mut().last().unwrap();
        last.values[0] = 40.0;
        last.values[1] = -40.0;
        let pair = ChannelPair { w_curr: 0.4, w_prev: 0.1, w_rx: 0.0 };
        assert_relative_eq!(sur.mdn_nll(&[pair]).unwrap(), 0.918939, max_relative = 1e-6);
        let many = [pair, ChannelPair { w_rx: 1.5, ..pair }];
        let doubled: Vec<_> = many.iter().chain(many.iter()).copied().collect();
        assert_relative_eq!(sur.mdn_nll(&many).unwrap(), sur.mdn_nll(&doubled).unwrap(), max_relative = 1e-12);
        assert!(matches!(sur.mdn_nll(&[]), Err(Error::Empty(_))));
        // Far outlier stays finite.
        assert!(sur.mdn_nll(&[ChannelPair { w_rx: 1e6, ..pair }]).unwrap().is_finite());
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut r = rng::stream(4, 0, 0);
        let mut sur = ChannelSurrogate::new(&mut r, 12);
        sur.scaling = OutputScaling { shift: 0.4, scale: 0.7 };
        let pairs: Vec<ChannelPair> = (0..6)
            .map(|i| ChannelPair {
                w_curr: r.random(),
                w_prev: r.random(),
                w_rx: i as f64 * 0.3 - 0.5,
            })
            .collect();
        sur.mdn_nll_backward(&pairs).unwrap();
        let analytic = sur.net.flat_grads();
        let mut probe = sur.clone();
        let numeric = finite_difference(&sur.net.flat_params(), STEP, |p| {
            probe.net.set_flat_params(p);
            probe.mdn_nll(&pairs).unwrap()
        });
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn sample_pass_gradient_matches_finite_differences() {
        let mut r = rng::stream(5, 0, 0);
        let mut sur = ChannelSurrogate::new(&mut r, 10);
        sur.scaling = OutputScaling { shift: 0.2, scale: 0.5 };
        let contexts: Vec<f64> = (0..8).map(|_| r.random()).collect();
        let (_, mixtures) = sur.forward_contexts(&contexts).unwrap();
        let draws: Vec<_> = mixtures.iter().map(|m| SurrogateDraw::sample(&mut r, m)).collect();
        let weights = [0.3, -1.2, 0.8, 2.0];
        for route in [
            GradientRoute::PassThrough,
            GradientRoute::MixtureMean,
            GradientRoute::Relaxed { temperature: 0.5 },
        ] {
            let pass = sur.sample_pass(&contexts, route, |i, _| draws[i].clone()).unwrap();
            let analytic = sur.pass_backward(&pass, &weights).unwrap();
            let numeric = finite_difference(&contexts, STEP, |c| {
                let (_, ms) = sur.forward_contexts(c).unwrap();
                ms.iter()
                    .zip(&draws)
                    .zip(&weights)
                    .map(|((m, d), w)| {
                        let value = match route {
                            // Straight-through: differentiate the mixture mean.
                            GradientRoute::MixtureMean => m.mean(),
                            _ => reparameterized(m, d, route).0,
                        };
                        w * value
                    })
                    .sum()
            });
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "{route:?}: {err}");
        }
    }

    #[test]
    fn sampling_moments() {
        let mut r = rng::stream(6, 0, 0);
        let m = mp([1.0, 0.0], [0.42, 3.0], [VAR_MIN, 1.0]);
        assert!((sample_surrogate(&mut r, &m) - 0.42).abs() < 0.01);
        let m = mp([0.3, 0.7], [-1.0, 2.0], [0.5, 0.2]);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_surrogate(&mut r, &m)).sum::<f64>() / n as f64;
        let se = (m.variance() / n as f64).sqrt();
        assert!((mean - m.mean()).abs() < 3.0 * se, "{mean} vs {}", m.mean());
    }

    #[test]
    fn reparameterized_mean_gradient_is_one() {
        let m = mp([1.0, 0.0], [0.5, 0.0], [0.04, 1.0]);
        let mut r = rng::stream(7, 0, 0);
        // d E[w] / d mu_1 by finite differences over a common set of draws.
        let draws: Vec<_> = (0..2000).map(|_| SurrogateDraw::sample(&mut r, &m)).collect();
        let expected = |mu0: f64| {
            let m = mp([1.0, 0.0], [mu0, 0.0], [0.04, 1.0]);
            draws.iter().map(|d| reparameterized(&m, d, GradientRoute::PassThrough).0).sum::<f64>() / draws.len() as f64
        };
        let fd = (expected(0.5 + STEP) - expected(0.5 - STEP)) / (2.0 * STEP);
        assert_relative_eq!(fd, 1.0, max_relative = 1e-6);
        let (_, _, d_mu, _) = reparameterized(&m, &draws[0], GradientRoute::PassThrough);
        assert_eq!(d_mu, [1.0, 0.0]);
    }

    #[test]
    fn pairs_are_reproducible_and_silent_when_forced() {
        let p = ChannelParams::scenario1();
        let a = generate_pairs(&mut rng::stream(8, rng::PAIRS, 0), &p, 100).unwrap();
        let b = generate_pairs(&mut rng::stream(8, rng::PAIRS, 0), &p, 100).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|q| (0.0..=1.0).contains(&q.w_curr) && (0.0..=1.0).contains(&q.w_prev)));
        let quiet = p.clone().with_sigma_n(0.0);
        let mut r = rng::stream(9, 0, 0);
        for _ in 0..100 {
            let obs = observe_slot(&mut r, &quiet, 0.0, &[0.0], quiet.observation_time()).unwrap();
            assert_eq!(obs.w_rx, 0.0);
        }
        assert!(generate_pairs(&mut r, &p, 0).is_err());
    }

    #[test]
    fn conditional_mean_of_pairs() {
        let p = ChannelParams::scenario1();
        let pairs = generate_pairs(&mut rng::stream(10, rng::PAIRS, 0), &p, 100_000).unwrap();
        let top: Vec<_> = pairs.iter().filter(|q| q.w_curr >= 0.95).collect();
        let mean = top.iter().map(|q| q.w_rx).sum::<f64>() / top.len() as f64;
        let t = p.observation_time();
        let isi = 0.5 * p.capture_probability(t + p.slot).unwrap() / p.capture_probability(t).unwrap();
        let expected = 0.975 + isi;
        let sd = top.iter().map(|q| (q.w_rx - mean).powi(2)).sum::<f64>() / top.len() as f64;
        assert!((mean - expected).abs() < 3.0 * (sd / top.len() as f64).sqrt() + 1e-3);
    }

    #[test]
    fn zero_epochs_returns_initial_net() {
        let p = ChannelParams::scenario1();
        let pairs = generate_pairs(&mut rng::stream(11, 0, 0), &p, 200).unwrap();
        let mut sur = ChannelSurrogate::new(&mut rng::stream(11, 1, 0), 8);
        let before = sur.clone();
        let cfg = SurrogateTrainConfig { max_epochs: 0, ..Default::default() };
        let hist = train_surrogate(&mut rng::stream(11, 2, 0), &mut sur, &pairs[..150], &pairs[150..], &cfg).unwrap();
        assert!(hist.is_empty());
        assert_eq!(sur, before);
    }

    #[test]
    fn nll_decreases_on_synthetic_gaussian_data() {
        let mut r = rng::stream(12, 0, 0);
        let pairs: Vec<ChannelPair> = (0..2000)
            .map(|_| {
                let w_curr: f64 = r.random();
                let z: f64 = r.sample(StandardNormal);
                ChannelPair { w_curr, w_prev: r.random(), w_rx: 2.0 * w_curr - 0.5 + 0.3 * z }
            })
            .collect();
        let mut sur = ChannelSurrogate::new(&mut r, 16);
        let cfg = SurrogateTrainConfig {
            max_epochs: 10,
            lr: 1e-3,
            patience: 100,
            batch_size: 32,
            lr_decay: 1.0,
            ..Default::default()
        };
        let hist = train_surrogate(&mut r, &mut sur, &pairs[..1600], &pairs[1600..], &cfg).unwrap();
        assert_eq!(hist.len(), 10);
        for w in hist.windows(2) {
            assert!(w[1].train < w[0].train, "{hist:?}");
        }
    }

    #[test]
    fn moment_matched_reference() {
        let pairs: Vec<ChannelPair> = (0..400)
            .map(|i| ChannelPair {
                w_curr: (i % 2) as f64 * 0.9,
                w_prev: 0.0,
                w_rx: (i % 2) as f64 + if i % 4 < 2 { 0.1 } else { -0.1 },
            })
            .collect();
        let g = MomentMatchedGaussian::fit(&pairs, 2).unwrap();
        assert_relative_eq!(g.means[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(g.means[1], 1.0, epsilon = 1e-12);
        let v = 0.01 * 200.0 / 199.0;
        assert_relative_eq!(g.nll(&pairs), 0.5 * (2.0 * PI * v).ln() + 0.01 / (2.0 * v), max_relative = 1e-9);
        assert!(MomentMatchedGaussian::fit(&pairs, 3).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_frozen_guard() {
        let mut r = rng::stream(13, 0, 0);
        let mut sur = ChannelSurrogate::new(&mut r, 8);
        sur.scaling = OutputScaling { shift: 0.1, scale: 2.0 };
        sur.channel = Some(ChannelParams::scenario2());
        sur.freeze();
        assert!(sur.net_mut().is_err());
        assert!(sur.mdn_nll_backward(&[ChannelPair { w_curr: 0.0, w_prev: 0.0, w_rx: 0.0 }]).is_err());
        let back = ChannelSurrogate::from_checkpoint(&Checkpoint::from_bytes(&sur.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, sur);
        let mut wrong = sur.to_checkpoint();
        wrong.role = "semantic_model".into();
        assert!(matches!(ChannelSurrogate::from_checkpoint(&wrong), Err(Error::RoleMismatch { .. })));
    }
}

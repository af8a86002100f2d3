//! Encoder, quantizer and decoder trained end to end through the frozen
//! channel surrogate and evaluated through the channel simulator.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{observe_slot, ChannelParams, SymbolSequence};
use crate::data::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Checkpoint, ROLE_SEMANTIC};
use crate::nn::loss::{argmax, cross_entropy_batch};
use crate::nn::{Activation, DenseNet, Sgd, Tensor, Trace};
use crate::rng;
use crate::stats::Accuracy;
use crate::surrogate::{
    sample_surrogate, ChannelSurrogate, GradientRoute, MixtureParams, SurrogateDraw, SurrogatePass, CONTEXT_DIM,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn of(data: &Dataset) -> Self {
        InputShape {
            height: data.height,
            width: data.width,
            channels: data.channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Symbols per frame.
    pub k: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 16,
            num_classes: 4,
            feature_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticModel {
    pub encoder: DenseNet,
    pub quantizer: DenseNet,
    pub decoder: DenseNet,
    pub k: usize,
    pub num_classes: usize,
    pub input: InputShape,
    pub standardizer: Standardizer,
}

/// What carries the symbols from quantizer to decoder.
#[derive(Debug, Clone, Copy)]
pub enum Link<'a> {
    /// `w_rx = w`.
    Identity,
    Surrogate(&'a ChannelSurrogate, GradientRoute),
    Simulator(&'a ChannelParams),
}

impl SemanticModel {
    /// Encoder `dim -> 128 -> 64 -> 32 -> 32 -> F`, quantizer `F -> 32 -> 32 -> k`
    /// (sigmoid), decoder `k -> 64 -> 32 -> C` (softmax).
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: InputShape, cfg: &ModelConfig) -> Self {
        let leaky = Activation::LeakyRelu;
        let f = cfg.feature_dim;
        SemanticModel {
            encoder: DenseNet::mlp(rng, &[input.dim(), 128, 64, 32, 32, f], leaky, Activation::Identity),
            quantizer: DenseNet::mlp(rng, &[f, 32, 32, cfg.k], leaky, Activation::Sigmoid),
            decoder: DenseNet::mlp(rng, &[cfg.k, 64, 32, cfg.num_classes], leaky, Activation::Softmax),
            k: cfg.k,
            num_classes: cfg.num_classes,
            input,
            standardizer: Standardizer::identity(input.dim()),
        }
    }

    fn check_image(&self, image: &[f64]) -> Result<()> {
        if image.len() != self.input.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.input.dim()],
                got: vec![image.len()],
            });
        }
        Ok(())
    }

    pub fn encode(&self, image: &[f64]) -> Result<SymbolSequence> {
        self.check_image(image)?;
        let f = self.encoder.predict(&self.standardizer.apply(image), 1)?;
        SymbolSequence::new(self.quantizer.predict(&f, 1)?)
    }

    pub fn decode(&self, w_rx: &[f64]) -> Result<Vec<f64>> {
        self.decoder.predict(w_rx, w_rx.len() / self.k.max(1))
    }

    /// Class probabilities for one image sent over `link`.
    pub fn transmit<R: Rng + ?Sized>(&self, rng: &mut R, link: Link<'_>, image: &[f64]) -> Result<Vec<f64>> {
        let w = self.encode(image)?;
        let w_rx = send_frame(rng, link, w.as_slice())?;
        self.decode(&w_rx)
    }

    /// One image through the surrogate, as seen during training.
    pub fn transmit_train<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        surrogate: &ChannelSurrogate,
        image: &[f64],
    ) -> Result<Vec<f64>> {
        if !surrogate.is_frozen() {
            return Err(Error::SurrogateNotFrozen);
        }
        self.transmit(rng, Link::Surrogate(surrogate, GradientRoute::PassThrough), image)
    }

    /// One image through the channel simulator.
    pub fn transmit_eval<R: Rng + ?Sized>(&self, rng: &mut R, p: &ChannelParams, image: &[f64]) -> Result<Vec<f64>> {
        self.transmit(rng, Link::Simulator(p), image)
    }

    fn nets_mut(&mut self) -> [&mut DenseNet; 3] {
        [&mut self.encoder, &mut self.quantizer, &mut self.decoder]
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.encoder
            .params_mut()
            .chain(self.quantizer.params_mut())
            .chain(self.decoder.params_mut())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        [&self.encoder, &self.quantizer, &self.decoder]
            .iter()
            .flat_map(|n| n.flat_params())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for net in self.nets_mut() {
            let n = net.param_count();
            net.set_flat_params(&flat[offset..offset + n]);
            offset += n;
        }
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        [&self.encoder, &self.quantizer, &self.decoder]
            .iter()
            .flat_map(|n| n.flat_grads())
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.nets_mut().into_iter().for_each(DenseNet::zero_grad);
    }

    /// Forward pass over a batch of raw images, recording everything needed
    /// for [`SemanticModel::backward`]. Surrogate noise for the sample at
    /// flat symbol index `i` comes from `draw`.
    pub fn forward_batch(
        &self,
        images: &[f64],
        link: Link<'_>,
        draw: impl FnMut(usize, &MixtureParams) -> SurrogateDraw,
    ) -> Result<Tape> {
        let d = self.input.dim();
        let batch = images.len() / d;
        if batch == 0 || images.len() != batch * d {
            return Err(Error::ShapeMismatch {
                expected: vec![batch.max(1), d],
                got: vec![images.len()],
            });
        }
        let x: Vec<f64> = images.chunks(d).flat_map(|im| self.standardizer.apply(im)).collect();
        let enc = self.encoder.forward_rows(&x, batch)?;
        let quant = self.quantizer.forward_rows(enc.output(), batch)?;
        let w = quant.output();
        let (pass, w_rx) = match link {
            Link::Identity => (None, w.to_vec()),
            Link::Surrogate(sur, route) => {
                let pass = sur.sample_pass(&contexts(w, self.k), route, draw)?;
                let w_rx = pass.w_rx.clone();
                (Some(pass), w_rx)
            }
            Link::Simulator(_) => {
                return Err(Error::Config("the channel simulator is not differentiable".into()));
            }
        };
        let dec = self.decoder.forward_rows(&w_rx, batch)?;
        Ok(Tape {
            batch,
            enc,
            quant,
            pass,
            dec,
        })
    }

    /// Accumulates parameter gradients of a loss whose gradient with respect
    /// to the class probabilities is `grad_probs`. Surrogate parameters are
    /// read, never written.
    pub fn backward(&mut self, tape: &Tape, link: Link<'_>, grad_probs: &[f64]) -> Result<()> {
        let d_wrx = self.decoder.backward(&tape.dec, grad_probs)?;
        let d_w = match (link, &tape.pass) {
            (Link::Surrogate(sur, _), Some(pass)) => {
                let d_ctx = sur.pass_backward(pass, &d_wrx)?;
                let mut d_w = vec![0.0; d_wrx.len()];
                for b in 0..tape.batch {
                    for j in 0..self.k {
                        let i = b * self.k + j;
                        d_w[i] += d_ctx[i * CONTEXT_DIM];
                        if j > 0 {
                            d_w[i - 1] += d_ctx[i * CONTEXT_DIM + 1];
                        }
                    }
                }
                d_w
            }
            (Link::Identity, None) => d_wrx,
            _ => return Err(Error::TraceMismatch),
        };
        let d_f = self.quantizer.backward(&tape.quant, &d_w)?;
        self.encoder.backward(&tape.enc, &d_f)?;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(ROLE_SEMANTIC);
        for (k, v) in [
            ("k", self.k),
            ("num_classes", self.num_classes),
            ("height", self.input.height),
            ("width", self.input.width),
            ("channels", self.input.channels),
        ] {
            ck.meta.insert(k.into(), v.to_string());
        }
        ck.vectors.insert("input_mean".into(), self.standardizer.mean.clone());
        ck.vectors.insert("input_scale".into(), self.standardizer.scale.clone());
        ck.nets.insert("encoder".into(), self.encoder.clone());
        ck.nets.insert("quantizer".into(), self.quantizer.clone());
        ck.nets.insert("decoder".into(), self.decoder.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_role(ROLE_SEMANTIC)?;
        let input = InputShape {
            height: ck.meta_value("height")?,
            width: ck.meta_value("width")?,
            channels: ck.meta_value("channels")?,
        };
        let model = SemanticModel {
            encoder: ck.net("encoder")?.clone(),
            quantizer: ck.net("quantizer")?.clone(),
            decoder: ck.net("decoder")?.clone(),
            k: ck.meta_value("k")?,
            num_classes: ck.meta_value("num_classes")?,
            input,
            standardizer: Standardizer {
                mean: ck.vector("input_mean")?.to_vec(),
                scale: ck.vector("input_scale")?.to_vec(),
            },
        };
        let dims_ok = model.encoder.input_dim() == input.dim()
            && model.encoder.output_dim() == model.quantizer.input_dim()
            && model.quantizer.output_dim() == model.k
            && model.decoder.input_dim() == model.k
            && model.decoder.output_dim() == model.num_classes
            && model.standardizer.mean.len() == input.dim()
            && model.standardizer.scale.len() == input.dim();
        if !dims_ok {
            return Err(Error::Format("semantic model networks have inconsistent shapes".into()));
        }
        Ok(model)
    }
}

/// Recorded forward pass of a batch.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    enc: Trace,
    quant: Trace,
    pass: Option<SurrogatePass>,
    dec: Trace,
}

impl Tape {
    pub fn probs(&self) -> &[f64] {
        self.dec.output()
    }

    pub fn symbols(&self) -> &[f64] {
        self.quant.output()
    }

    pub fn received(&self) -> &[f64] {
        match &self.pass {
            Some(p) => &p.w_rx,
            None => self.quant.output(),
        }
    }
}

/// Surrogate contexts `(w_j, w_{j-1})` for row-major frames of `k`
/// symbols; the first slot of each frame has a silent predecessor.
pub fn contexts(w: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w.len() * CONTEXT_DIM);
    for frame in w.chunks(k) {
        for j in 0..frame.len() {
            out.push(frame[j]);
            out.push(if j > 0 { frame[j - 1] } else { 0.0 });
        }
    }
    out
}

/// Sends one frame of symbols; the slot before the frame is silent.
pub fn send_frame<R: Rng + ?Sized>(rng: &mut R, link: Link<'_>, w: &[f64]) -> Result<Vec<f64>> {
    match link {
        Link::Identity => Ok(w.to_vec()),
        Link::Surrogate(sur, _) => {
            let (_, mixtures) = sur.forward_contexts(&contexts(w, w.len()))?;
            Ok(mixtures.iter().map(|m| sample_surrogate(rng, m)).collect())
        }
        Link::Simulator(p) => {
            let t = p.observation_time();
            let mut prev: Vec<f64> = Vec::with_capacity(p.lambda);
            let mut out = Vec::with_capacity(w.len());
            for (j, &wj) in w.iter().enumerate() {
                prev.clear();
                prev.extend(w[..j].iter().rev().take(p.lambda));
                out.push(observe_slot(rng, p, wj, &prev, t)?.w_rx);
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: Option<f64>,
    pub validation_fraction: f64,
    /// Epochs without a validation improvement of at least `min_delta`
    /// before stopping.
    pub patience: usize,
    pub min_delta: f64,
    /// Epochs trained over the noiseless identity link before the surrogate
    /// link takes over.
    pub pretrain_epochs: usize,
    /// Epochs over which the surrogate's Gaussian noise is ramped up from
    /// zero; best-model tracking and early stopping start once it is full.
    pub noise_warmup: usize,
    pub route: GradientRoute,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 40,
            batch_size: 32,
            lr: 1e-2,
            momentum: Some(0.9),
            validation_fraction: 0.1,
            patience: 5,
            min_delta: 1e-4,
            pretrain_epochs: 3,
            noise_warmup: 5,
            route: GradientRoute::PassThrough,
            model: ModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SemanticModel,
    /// Entry 0 is the untrained model.
    pub history: Vec<EpochStats>,
}

/// Builds and trains a model through a frozen surrogate.
pub fn train_end_to_end(
    seed: u64,
    data: &Dataset,
    surrogate: &ChannelSurrogate,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !surrogate.is_frozen() {
        return Err(Error::SurrogateNotFrozen);
    }
    let init = if cfg.pretrain_epochs > 0 {
        let pre = TrainConfig {
            max_epochs: cfg.pretrain_epochs,
            pretrain_epochs: 0,
            patience: usize::MAX,
            ..cfg.clone()
        };
        Some(train_from(rng::child_seed(seed, rng::MODEL_INIT, 1), data, Link::Identity, &pre, None)?.model)
    } else {
        None
    };
    train_from(seed, data, Link::Surrogate(surrogate, cfg.route), cfg, init)
}

/// Minimizes mean cross-entropy over `data` sent through `link`, keeping
/// the parameters with the lowest validation loss.
pub fn train_with_link(seed: u64, data: &Dataset, link: Link<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(seed, data, link, cfg, None)
}

fn train_from(
    seed: u64,
    data: &Dataset,
    link: Link<'_>,
    cfg: &TrainConfig,
    init: Option<SemanticModel>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let n_val = ((data.len() as f64 * cfg.validation_fraction).round() as usize).min(data.len() - 1);
    let n_train = data.len() - n_val;
    let train = data.take(n_train);
    let val = if n_val > 0 {
        Dataset::new(
            data.height,
            data.width,
            data.channels,
            (n_train..data.len()).flat_map(|i| data.get(i).image.to_vec()).collect(),
            data.labels()[n_train..].to_vec(),
        )?
    } else {
        train.clone()
    };

    let mut model = match init {
        Some(m) => m,
        None => {
            let mut m = SemanticModel::new(&mut rng::stream(seed, rng::MODEL_INIT, 0), InputShape::of(data), &cfg.model);
            m.standardizer = Standardizer::fit(&train)?;
            m
        }
    };
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut shuffle_rng = rng::stream(seed, rng::MODEL_TRAIN, 0);
    let mut noise_rng = rng::stream(seed, rng::MODEL_TRAIN, 1);

    let score = |m: &SemanticModel, d: &Dataset, epoch: usize, which: u32| {
        let mut r = rng::stream(seed, rng::MODEL_TRAIN, 2 + 2 * epoch as u32 + which);
        batch_loss(m, d, link, &mut r, 256)
    };
    let (train_loss, train_accuracy) = score(&model, &train, 0, 0)?;
    let (validation_loss, validation_accuracy) = score(&model, &val, 0, 1)?;
    let mut history = vec![EpochStats {
        epoch: 0,
        train_loss,
        train_accuracy,
        validation_loss,
        validation_accuracy,
    }];
    let mut best = (validation_loss, model.clone());
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..n_train).collect();
    let d = train.dim();
    let mut images = Vec::with_capacity(cfg.batch_size * d);
    let mut labels = Vec::with_capacity(cfg.batch_size);

    let warmup = match link {
        Link::Surrogate(..) => cfg.noise_warmup.min(cfg.max_epochs.saturating_sub(1)),
        _ => 0,
    };
    for epoch in 1..=cfg.max_epochs {
        let noise_scale = if warmup == 0 {
            1.0
        } else {
            ((epoch - 1) as f64 / warmup as f64).min(1.0)
        };
        crate::surrogate::shuffle(&mut shuffle_rng, &mut order);
        let mut total = 0.0;
        let mut correct = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            images.clear();
            labels.clear();
            for &i in idx {
                let s = train.get(i);
                images.extend_from_slice(s.image);
                labels.push(s.label);
            }
            let tape = model.forward_batch(&images, link, |_, m| {
                let mut d = SurrogateDraw::sample(&mut noise_rng, m);
                d.eps *= noise_scale;
                d
            })?;
            let (loss, grad) = cross_entropy_batch(tape.probs(), &labels, model.num_classes)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "training loss is not finite".into(),
                    last_good: Some(best.1.to_checkpoint().to_bytes()),
                });
            }
            total += loss * idx.len() as f64;
            correct += count_correct(tape.probs(), &labels, model.num_classes);
            model.backward(&tape, link, &grad)?;
            opt.step_params(model.params_mut());
        }
        let (validation_loss, validation_accuracy) = score(&model, &val, epoch, 1)?;
        history.push(EpochStats {
            epoch,
            train_loss: total / n_train as f64,
            train_accuracy: correct as f64 / n_train as f64,
            validation_loss,
            validation_accuracy,
        });
        if noise_scale < 1.0 {
            continue;
        }
        if epoch == warmup + 1 || validation_loss < best.0 - cfg.min_delta {
            best = (validation_loss, model.clone());
            since_best = 0;
        } else {
            if validation_loss < best.0 {
                best = (validation_loss, model.clone());
            }
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best.1,
        history,
    })
}

fn count_correct(probs: &[f64], labels: &[usize], classes: usize) -> usize {
    probs
        .chunks(classes)
        .zip(labels)
        .filter(|(p, &l)| argmax(p) == l)
        .count()
}

/// Mean cross-entropy and accuracy of `data` through `link`, without
/// touching gradients.
pub fn batch_loss<R: Rng + ?Sized>(
    model: &SemanticModel,
    data: &Dataset,
    link: Link<'_>,
    rng: &mut R,
    chunk: usize,
) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut correct = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(chunk) {
        let images: Vec<f64> = idx.iter().flat_map(|&i| data.get(i).image.to_vec()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.get(i).label).collect();
        let tape = model.forward_batch(&images, link, |_, m| SurrogateDraw::sample(rng, m))?;
        let (loss, _) = cross_entropy_batch(tape.probs(), &labels, model.num_classes)?;
        total += loss * idx.len() as f64;
        correct += count_correct(tape.probs(), &labels, model.num_classes);
    }
    Ok((total / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Accuracy over `n_trials` independent channel realizations of every
/// test image. Each (trial, image) pair has its own random stream, so the
/// result does not depend on the thread count.
pub fn evaluate_accuracy(
    seed: u64,
    model: &SemanticModel,
    link: Link<'_>,
    test: &Dataset,
    n_trials: usize,
) -> Result<Accuracy> {
    evaluate_with(seed, rng::EVAL_TRIAL, test, n_trials, |r, image| {
        Ok(argmax(&model.transmit(r, link, image)?))
    })
}

/// Shared trial loop: `predict` maps an image to a class using the given
/// stream.
pub fn evaluate_with(
    seed: u64,
    purpose: u32,
    test: &Dataset,
    n_trials: usize,
    predict: impl Fn(&mut rng::Rng, &[f64]) -> Result<usize> + Sync,
) -> Result<Accuracy> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if n_trials == 0 {
        return Err(Error::Config("n_trials must be at least 1".into()));
    }
    let n = test.len();
    let correct = (0..n_trials * n)
        .into_par_iter()
        .map(|i| {
            let s = test.get(i % n);
            let mut r = rng::stream(seed, purpose, i as u32);
            predict(&mut r, s.image).map(|c| (c == s.label) as u64)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(Accuracy::new(correct, (n_trials * n) as u64))
}

/// Bandwidth compression ratio `k / (H W C)`.
pub fn report_bcr(k: usize, input: InputShape) -> f64 {
    k as f64 / input.dim() as f64
}

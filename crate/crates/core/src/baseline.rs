//! Separate source and channel coding over on-off keying: block-average
//! downsampling with uniform quantization, a block channel code, one bit
//! per slot with hard threshold detection, and a classifier trained on
//! clean reconstructions.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{observe_slot, ChannelParams};
use crate::data::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Checkpoint, ROLE_CLASSIFIER};
use crate::nn::loss::{argmax, cross_entropy_batch};
use crate::nn::{Activation, DenseNet, Sgd};
use crate::rng;
use crate::stats::Accuracy;
use crate::transceiver::{evaluate_with, InputShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelCode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "repetition_3")]
    Repetition3,
    #[serde(rename = "hamming_7_4")]
    Hamming74,
}

impl ChannelCode {
    /// `(message bits, coded bits)` per block.
    pub fn block(self) -> (usize, usize) {
        match self {
            ChannelCode::None => (1, 1),
            ChannelCode::Repetition3 => (1, 3),
            ChannelCode::Hamming74 => (4, 7),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelCode::None => "none",
            ChannelCode::Repetition3 => "repetition_3",
            ChannelCode::Hamming74 => "hamming_7_4",
        }
    }
}

impl FromStr for ChannelCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ChannelCode::None),
            "repetition_3" => Ok(ChannelCode::Repetition3),
            "hamming_7_4" => Ok(ChannelCode::Hamming74),
            other => Err(Error::Config(format!(
                "unknown channel code `{other}` (expected none, repetition_3 or hamming_7_4)"
            ))),
        }
    }
}

impl fmt::Display for ChannelCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Detection threshold in molecules, or half the expected count of a one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Auto,
    Molecules(f64),
}

impl Threshold {
    pub fn resolve(self, p: &ChannelParams) -> Result<f64> {
        match self {
            Threshold::Auto => Ok(p.n_m as f64 * p.capture_probability(p.observation_time())? / 2.0),
            Threshold::Molecules(m) => Ok(m),
        }
    }
}

impl FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Threshold::Auto);
        }
        match s.parse::<f64>() {
            Ok(m) if m > 0.0 => Ok(Threshold::Molecules(m)),
            _ => Err(Error::Config(format!("threshold must be `auto` or a positive number, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub downsample_factor: usize,
    pub bits_per_pixel: u32,
    pub channel_code: ChannelCode,
    pub detection_threshold: Threshold,
}

impl Default for CodecConfig {
    /// 4×4 thumbnail at one bit per pixel under Hamming(7,4): 28 slots for
    /// a 16×16 image.
    fn default() -> Self {
        CodecConfig {
            downsample_factor: 4,
            bits_per_pixel: 1,
            channel_code: ChannelCode::Hamming74,
            detection_threshold: Threshold::Auto,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor == 0 {
            return Err(Error::Config("downsample_factor must be at least 1".into()));
        }
        if !(1..=8).contains(&self.bits_per_pixel) {
            return Err(Error::Config("bits_per_pixel must be in 1..=8".into()));
        }
        if let Threshold::Molecules(m) = self.detection_threshold {
            if !(m > 0.0) {
                return Err(Error::Config("detection threshold must be positive".into()));
            }
        }
        Ok(())
    }

    fn thumb_dims(&self, shape: InputShape) -> Result<(usize, usize)> {
        self.validate()?;
        let ds = self.downsample_factor;
        if shape.channels != 1 || !shape.height.is_multiple_of(ds) || !shape.width.is_multiple_of(ds) {
            return Err(Error::Domain(format!(
                "{}x{}x{} image is not divisible by downsample factor {ds}",
                shape.height, shape.width, shape.channels
            )));
        }
        Ok((shape.height / ds, shape.width / ds))
    }

    /// Source bits per image.
    pub fn source_bits(&self, shape: InputShape) -> Result<usize> {
        let (h, w) = self.thumb_dims(shape)?;
        Ok(h * w * self.bits_per_pixel as usize)
    }

    /// Channel slots per image after padding and coding.
    pub fn slots_per_image(&self, shape: InputShape) -> Result<usize> {
        let (m, n) = self.channel_code.block();
        Ok(self.source_bits(shape)?.div_ceil(m) * n)
    }
}

/// Block-averages and quantizes to `bits_per_pixel` bits per thumbnail
/// pixel, most significant bit first.
pub fn source_encode(cfg: &CodecConfig, shape: InputShape, image: &[f64]) -> Result<Vec<u8>> {
    let (th, tw) = cfg.thumb_dims(shape)?;
    if image.len() != shape.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![shape.dim()],
            got: vec![image.len()],
        });
    }
    let ds = cfg.downsample_factor;
    let levels = (1u32 << cfg.bits_per_pixel) - 1;
    let mut bits = Vec::with_capacity(th * tw * cfg.bits_per_pixel as usize);
    for by in 0..th {
        for bx in 0..tw {
            let mut sum = 0.0;
            for y in by * ds..(by + 1) * ds {
                for x in bx * ds..(bx + 1) * ds {
                    sum += image[y * shape.width + x];
                }
            }
            let mean = (sum / (ds * ds) as f64).clamp(0.0, 1.0);
            let q = (mean * levels as f64).round() as u32;
            for b in (0..cfg.bits_per_pixel).rev() {
                bits.push(((q >> b) & 1) as u8);
            }
        }
    }
    Ok(bits)
}

/// Dequantizes and upsamples (nearest neighbour) back to the full image.
pub fn source_decode(cfg: &CodecConfig, shape: InputShape, bits: &[u8]) -> Result<Vec<f64>> {
    let (th, tw) = cfg.thumb_dims(shape)?;
    let bpp = cfg.bits_per_pixel as usize;
    if bits.len() != th * tw * bpp {
        return Err(Error::ShapeMismatch {
            expected: vec![th * tw * bpp],
            got: vec![bits.len()],
        });
    }
    let levels = ((1u32 << bpp) - 1) as f64;
    let thumb: Vec<f64> = bits
        .chunks(bpp)
        .map(|c| c.iter().fold(0u32, |q, &b| (q << 1) | b as u32) as f64 / levels)
        .collect();
    let ds = cfg.downsample_factor;
    Ok((0..shape.height)
        .flat_map(|y| (0..shape.width).map(move |x| (y, x)))
        .map(|(y, x)| thumb[(y / ds) * tw + x / ds])
        .collect())
}

fn check_blocks(len: usize, block: usize) -> Result<()> {
    if !len.is_multiple_of(block) {
        return Err(Error::Domain(format!("bitstream length {len} is not a multiple of block size {block}")));
    }
    Ok(())
}

/// Generator rows laid out as `p1 p2 d1 p3 d2 d3 d4`.
fn hamming_encode(d: &[u8]) -> [u8; 7] {
    let (d1, d2, d3, d4) = (d[0], d[1], d[2], d[3]);
    [d1 ^ d2 ^ d4, d1 ^ d3 ^ d4, d1, d2 ^ d3 ^ d4, d2, d3, d4]
}

fn hamming_decode(c: &[u8]) -> [u8; 4] {
    let mut c: [u8; 7] = c.try_into().expect("block of 7");
    let s1 = c[0] ^ c[2] ^ c[4] ^ c[6];
    let s2 = c[1] ^ c[2] ^ c[5] ^ c[6];
    let s3 = c[3] ^ c[4] ^ c[5] ^ c[6];
    let syndrome = (s1 | (s2 << 1) | (s3 << 2)) as usize;
    if syndrome != 0 {
        c[syndrome - 1] ^= 1;
    }
    [c[2], c[4], c[5], c[6]]
}

pub fn channel_encode(code: ChannelCode, bits: &[u8]) -> Result<Vec<u8>> {
    let (m, _) = code.block();
    check_blocks(bits.len(), m)?;
    Ok(match code {
        ChannelCode::None => bits.to_vec(),
        ChannelCode::Repetition3 => bits.iter().flat_map(|&b| [b, b, b]).collect(),
        ChannelCode::Hamming74 => bits.chunks(4).flat_map(hamming_encode).collect(),
    })
}

pub fn channel_decode(code: ChannelCode, coded: &[u8]) -> Result<Vec<u8>> {
    let (_, n) = code.block();
    check_blocks(coded.len(), n)?;
    Ok(match code {
        ChannelCode::None => coded.to_vec(),
        ChannelCode::Repetition3 => coded.chunks(3).map(|c| (c.iter().sum::<u8>() >= 2) as u8).collect(),
        ChannelCode::Hamming74 => coded.chunks(7).flat_map(hamming_decode).collect(),
    })
}

/// Zero-pads to a whole number of code blocks.
pub fn pad_to_block(code: ChannelCode, bits: &[u8]) -> Vec<u8> {
    let (m, _) = code.block();
    let mut out = bits.to_vec();
    out.resize(bits.len().div_ceil(m) * m, 0);
    out
}

/// One bit per slot: a one releases `n_m` molecules, a zero releases none.
/// The slot before the first bit is silent.
pub fn ook_transmit<R: Rng + ?Sized>(rng: &mut R, p: &ChannelParams, bits: &[u8], threshold: f64) -> Result<Vec<u8>> {
    let t = p.observation_time();
    let w: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
    let mut prev = Vec::with_capacity(p.lambda);
    let mut out = Vec::with_capacity(bits.len());
    for j in 0..w.len() {
        prev.clear();
        prev.extend(w[..j].iter().rev().take(p.lambda));
        let obs = observe_slot(rng, p, w[j], &prev, t)?;
        out.push((obs.count >= threshold) as u8);
    }
    Ok(out)
}

/// Classifier over reconstructed images: `dim -> 64 -> 32 -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineClassifier {
    pub net: DenseNet,
    pub standardizer: Standardizer,
    pub codec: CodecConfig,
    pub input: InputShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: Option<f64>,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-2,
            momentum: Some(0.9),
        }
    }
}

impl BaselineClassifier {
    pub fn predict(&self, image: &[f64]) -> Result<usize> {
        let probs = self.net.predict(&self.standardizer.apply(image), 1)?;
        Ok(argmax(&probs))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(ROLE_CLASSIFIER);
        ck.meta.insert("codec".into(), serde_json::to_string(&self.codec).expect("codec json"));
        ck.meta.insert("input".into(), serde_json::to_string(&self.input).expect("shape json"));
        ck.vectors.insert("input_mean".into(), self.standardizer.mean.clone());
        ck.vectors.insert("input_scale".into(), self.standardizer.scale.clone());
        ck.nets.insert("classifier".into(), self.net.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_role(ROLE_CLASSIFIER)?;
        let json = |key: &str| {
            ck.meta
                .get(key)
                .ok_or_else(|| Error::Format(format!("missing meta `{key}`")))
        };
        let codec: CodecConfig =
            serde_json::from_str(json("codec")?).map_err(|e| Error::Format(format!("codec: {e}")))?;
        let input: InputShape =
            serde_json::from_str(json("input")?).map_err(|e| Error::Format(format!("input: {e}")))?;
        Ok(BaselineClassifier {
            net: ck.net("classifier")?.clone(),
            standardizer: Standardizer {
                mean: ck.vector("input_mean")?.to_vec(),
                scale: ck.vector("input_scale")?.to_vec(),
            },
            codec,
            input,
        })
    }
}

/// The image as the receiver would see it over an error-free link.
pub fn clean_reconstruction(cfg: &CodecConfig, shape: InputShape, image: &[f64]) -> Result<Vec<f64>> {
    source_decode(cfg, shape, &source_encode(cfg, shape, image)?)
}

/// Trains the classifier on clean reconstructions of `data`.
pub fn train_classifier(
    seed: u64,
    codec: &CodecConfig,
    data: &Dataset,
    cfg: &ClassifierTrainConfig,
) -> Result<BaselineClassifier> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let shape = InputShape::of(data);
    let recon = data.map_images(|im| clean_reconstruction(codec, shape, im).unwrap_or_default())?;
    let classes = data.num_classes();
    let mut r = rng::stream(seed, rng::CLASSIFIER, 0);
    let mut clf = BaselineClassifier {
        net: DenseNet::mlp(&mut r, &[shape.dim(), 64, 32, classes], Activation::LeakyRelu, Activation::Softmax),
        standardizer: Standardizer::fit(&recon)?,
        codec: *codec,
        input: shape,
    };
    let x: Vec<Vec<f64>> = recon.iter().map(|s| clf.standardizer.apply(s.image)).collect();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        crate::surrogate::shuffle(&mut r, &mut order);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<f64> = idx.iter().flat_map(|&i| x[i].iter().copied()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.get(i).label).collect();
            let trace = clf.net.forward_rows(&batch, idx.len())?;
            let (loss, grad) = cross_entropy_batch(trace.output(), &labels, classes)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "classifier loss is not finite".into(),
                    last_good: None,
                });
            }
            clf.net.backward(&trace, &grad)?;
            opt.step(&mut clf.net);
        }
    }
    Ok(clf)
}

/// Full pipeline for one image: encode, send, detect, decode, classify.
pub fn baseline_transmit<R: Rng + ?Sized>(
    rng: &mut R,
    clf: &BaselineClassifier,
    p: &ChannelParams,
    threshold: f64,
    image: &[f64],
) -> Result<usize> {
    let cfg = &clf.codec;
    let bits = source_encode(cfg, clf.input, image)?;
    let coded = channel_encode(cfg.channel_code, &pad_to_block(cfg.channel_code, &bits))?;
    let detected = ook_transmit(rng, p, &coded, threshold)?;
    let mut decoded = channel_decode(cfg.channel_code, &detected)?;
    decoded.truncate(bits.len());
    clf.predict(&source_decode(cfg, clf.input, &decoded)?)
}

/// Accuracy of the separate-coding pipeline over `n_trials` channel
/// realizations per test image.
pub fn baseline_evaluate(
    seed: u64,
    clf: &BaselineClassifier,
    p: &ChannelParams,
    test: &Dataset,
    n_trials: usize,
) -> Result<Accuracy> {
    let threshold = clf.codec.detection_threshold.resolve(p)?;
    evaluate_with(seed, rng::BASELINE_TRIAL, test, n_trials, |r, image| {
        baseline_transmit(r, clf, p, threshold, image)
    })
}

/// Accuracy on clean reconstructions (error-free channel).
pub fn clean_accuracy(clf: &BaselineClassifier, test: &Dataset) -> Result<Accuracy> {
    let mut correct = 0;
    for s in test.iter() {
        let recon = clean_reconstruction(&clf.codec, clf.input, s.image)?;
        correct += (clf.predict(&recon)? == s.label) as u64;
    }
    Ok(Accuracy::new(correct, test.len() as u64))
}

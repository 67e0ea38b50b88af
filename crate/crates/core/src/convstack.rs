//! Bias-free multi-block CNN: `[conv -> relu -> conv -> relu]*`, global
//! average pool, linear head.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{conv2d_backward, conv2d_forward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Two conv layers `c_in -> mid -> out`. The first layer's filters are the
/// partition unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub c_in: usize,
    pub mid: usize,
    pub out: usize,
    pub sensitive: bool,
    /// Marks a block that would downsample. Such blocks are always treated as
    /// sensitive; execution stays stride 1.
    pub strided: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvStackSpec {
    pub height: usize,
    pub width: usize,
    pub blocks: Vec<BlockSpec>,
    pub num_classes: usize,
    pub loss: LossKind,
}

impl ConvStackSpec {
    /// Blocks from a channel chain `[c0, c1, ..., c_{2B}]`; block `k` maps
    /// `c_{2k} -> c_{2k+1} -> c_{2k+2}`. The first block and any block listed
    /// in `strided` are sensitive.
    pub fn from_channels(
        channels: &[usize],
        strided: &[usize],
        height: usize,
        width: usize,
        num_classes: usize,
        loss: LossKind,
    ) -> Result<Self> {
        if channels.len() < 3 || channels.len().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "channel chain must have 2B+1 entries, got {}",
                channels.len()
            )));
        }
        let blocks = channels
            .windows(3)
            .step_by(2)
            .enumerate()
            .map(|(k, c)| BlockSpec {
                c_in: c[0],
                mid: c[1],
                out: c[2],
                sensitive: k == 0 || strided.contains(&k),
                strided: strided.contains(&k),
            })
            .collect();
        let spec = ConvStackSpec {
            height,
            width,
            blocks,
            num_classes,
            loss,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Two blocks `c_in -> 8 -> 16 -> 16 -> 32`.
    pub fn desk(c_in: usize, height: usize, width: usize, num_classes: usize, loss: LossKind) -> Self {
        Self::from_channels(&[c_in, 8, 16, 16, 32], &[], height, width, num_classes, loss).expect("desk stack is valid")
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].c_in
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map(|b| b.out).unwrap_or(0)
    }

    pub fn num_layers(&self) -> usize {
        2 * self.blocks.len()
    }

    /// Shape of conv layer `l` (block `l / 2`).
    pub fn layer_shape(&self, l: usize) -> [usize; 4] {
        let b = &self.blocks[l / 2];
        if l.is_multiple_of(2) {
            [b.mid, b.c_in, 3, 3]
        } else {
            [b.out, b.mid, 3, 3]
        }
    }

    pub fn layer_name(l: usize) -> String {
        format!("block{}.conv{}", l / 2, l % 2 + 1)
    }

    pub fn partitionable(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.sensitive)
            .map(|(k, _)| k)
    }

    pub fn param_count(&self) -> usize {
        (0..self.num_layers())
            .map(|l| self.layer_shape(l).iter().product::<usize>())
            .sum::<usize>()
            + self.num_classes * self.feature_channels()
    }

    /// Parameters that every subnetwork carries in full: sensitive blocks and
    /// the head.
    pub fn shared_param_count(&self) -> usize {
        let mut n = self.num_classes * self.feature_channels();
        for (k, b) in self.blocks.iter().enumerate() {
            if b.sensitive {
                n += self.layer_shape(2 * k).iter().product::<usize>()
                    + self.layer_shape(2 * k + 1).iter().product::<usize>();
            }
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("conv stack needs at least one block".into()));
        }
        if self.height == 0 || self.width == 0 || self.num_classes == 0 {
            return Err(Error::Config("image size and class count must be positive".into()));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            if b.c_in == 0 || b.mid == 0 || b.out == 0 {
                return Err(Error::Config(format!("block {k} has an empty layer")));
            }
            if k > 0 && b.c_in != self.blocks[k - 1].out {
                return Err(Error::Config(format!(
                    "block {k} input channels {} do not match previous output {}",
                    b.c_in,
                    self.blocks[k - 1].out
                )));
            }
            if (k == 0 || b.strided) && !b.sensitive {
                return Err(Error::Config(format!(
                    "block {k} must be sensitive (first or strided block)"
                )));
            }
        }
        Ok(())
    }

    /// Divisibility of every partitionable block by `S`.
    pub fn validate_workers(&self, workers: usize) -> Result<()> {
        if workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        for k in self.partitionable() {
            let mid = self.blocks[k].mid;
            if workers > mid {
                return Err(Error::Config(format!(
                    "S={workers} exceeds the {mid} filters of block {k}"
                )));
            }
            if !mid.is_multiple_of(workers) {
                return Err(Error::Config(format!(
                    "block {k} has {mid} filters, not divisible by S={workers}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStackWeights {
    /// Filter banks in layer order, each `[c_out, c_in, 3, 3]`.
    pub layers: Vec<Tensor>,
    /// `[num_classes, feature_channels]`.
    pub head: Tensor,
}

impl ConvStackWeights {
    pub fn zeros(spec: &ConvStackSpec) -> Self {
        ConvStackWeights {
            layers: (0..spec.num_layers())
                .map(|l| Tensor::zeros(&spec.layer_shape(l)))
                .collect(),
            head: Tensor::zeros(&[spec.num_classes, spec.feature_channels()]),
        }
    }

    /// He-normal conv filters, `N(0, 1/fan_in)` head.
    pub fn init(spec: &ConvStackSpec, rng: &mut Rng) -> Self {
        let mut w = Self::zeros(spec);
        for (l, bank) in w.layers.iter_mut().enumerate() {
            let fan_in = spec.layer_shape(l)[1] * 9;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            bank.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        let normal = Normal::new(0.0, (1.0 / spec.feature_channels() as f64).sqrt()).expect("positive std");
        w.head.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
        w
    }

    pub fn check(&self, spec: &ConvStackSpec) -> Result<()> {
        if self.layers.len() != spec.num_layers() {
            return Err(Error::dim("conv stack layers", spec.num_layers(), self.layers.len()));
        }
        for (l, bank) in self.layers.iter().enumerate() {
            if bank.shape() != spec.layer_shape(l) {
                return Err(Error::dim(
                    "conv stack filter bank",
                    format!("{:?}", spec.layer_shape(l)),
                    format!("{:?}", bank.shape()),
                ));
            }
        }
        if self.head.shape() != [spec.num_classes, spec.feature_channels()] {
            return Err(Error::dim(
                "conv stack head",
                format!("[{}, {}]", spec.num_classes, spec.feature_channels()),
                format!("{:?}", self.head.shape()),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Tensor::len).sum::<usize>() + self.head.len()
    }

    /// All parameters, layers in order then the head.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for bank in &self.layers {
            v.extend_from_slice(bank.data());
        }
        v.extend_from_slice(self.head.data());
        v
    }

    pub fn from_flat(spec: &ConvStackSpec, flat: &[f64]) -> Result<Self> {
        let mut w = Self::zeros(spec);
        if flat.len() != w.param_count() {
            return Err(Error::dim("flat weights", w.param_count(), flat.len()));
        }
        let mut off = 0;
        for bank in w.layers.iter_mut().chain(std::iter::once(&mut w.head)) {
            let n = bank.len();
            bank.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(w)
    }

    /// Flat little-endian `f64` serialization, no header.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.flat().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(spec: &ConvStackSpec, bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::Format(format!(
                "{} bytes is not a whole number of f64",
                bytes.len()
            )));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_flat(spec, &flat)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Tensor::is_finite) && self.head.is_finite()
    }

    pub fn axpy(&mut self, alpha: f64, other: &ConvStackWeights) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.axpy(alpha, b)?;
        }
        self.head.axpy(alpha, &other.head)
    }

    pub fn max_abs_diff(&self, other: &ConvStackWeights) -> Result<f64> {
        let mut d = self.head.max_abs_diff(&other.head)?;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            d = d.max(a.max_abs_diff(b)?);
        }
        Ok(d)
    }
}

/// Activations kept for the backward pass of one sample.
#[derive(Debug, Clone)]
pub struct SampleCache {
    /// Input to each conv layer (post-ReLU of the previous one).
    pub inputs: Vec<Tensor>,
    /// Pre-activation output of each conv layer.
    pub pre: Vec<Tensor>,
    /// Pooled features.
    pub features: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub samples: Vec<SampleCache>,
}

fn check_sample(spec: &ConvStackSpec, x: &Tensor) -> Result<()> {
    let expected = [spec.in_channels(), spec.height, spec.width];
    if x.shape() != expected {
        return Err(Error::dim(
            "conv stack input",
            format!("{expected:?}"),
            format!("{:?}", x.shape()),
        ));
    }
    Ok(())
}

fn forward_sample(weights: &ConvStackWeights, spec: &ConvStackSpec, x: &Tensor) -> Result<(Vec<f64>, SampleCache)> {
    check_sample(spec, x)?;
    let mut inputs = Vec::with_capacity(weights.layers.len());
    let mut pre = Vec::with_capacity(weights.layers.len());
    let mut h = x.clone();
    for bank in &weights.layers {
        let z = conv2d_forward(&h, bank)?;
        inputs.push(h);
        h = z.relu();
        pre.push(z);
    }
    let [c, hh, ww] = *h.shape() else { unreachable!() };
    let area = (hh * ww) as f64;
    let features: Vec<f64> = (0..c)
        .map(|k| h.data()[k * hh * ww..(k + 1) * hh * ww].iter().sum::<f64>() / area)
        .collect();
    let logits = (0..spec.num_classes)
        .map(|k| weights.head.row(k).iter().zip(&features).map(|(a, b)| a * b).sum())
        .collect();
    Ok((logits, SampleCache { inputs, pre, features }))
}

/// Logits for every sample of the batch, plus the activation cache.
pub fn convstack_forward(
    weights: &ConvStackWeights,
    spec: &ConvStackSpec,
    batch: &[Tensor],
) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
    weights.check(spec)?;
    let mut logits = Vec::with_capacity(batch.len());
    let mut samples = Vec::with_capacity(batch.len());
    for x in batch {
        let (z, cache) = forward_sample(weights, spec, x)?;
        logits.push(z);
        samples.push(cache);
    }
    Ok((logits, ForwardCache { samples }))
}

/// Per-sample loss and its gradient with respect to the logits.
pub fn loss_and_logit_grad(kind: LossKind, logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    match kind {
        LossKind::Mse => {
            let mut loss = 0.0;
            let grad = logits
                .iter()
                .enumerate()
                .map(|(k, &z)| {
                    let r = z - if k == label { 1.0 } else { 0.0 };
                    loss += r * r;
                    2.0 * r
                })
                .collect();
            (loss, grad)
        }
        LossKind::CrossEntropy => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let loss = total.ln() + max - logits[label];
            let grad = exps
                .iter()
                .enumerate()
                .map(|(k, e)| e / total - if k == label { 1.0 } else { 0.0 })
                .collect();
            (loss, grad)
        }
    }
}

/// Mean batch loss and its gradient.
pub fn loss_and_grad(
    weights: &ConvStackWeights,
    spec: &ConvStackSpec,
    batch: &[Tensor],
    labels: &[usize],
) -> Result<(f64, ConvStackWeights)> {
    if batch.len() != labels.len() || batch.is_empty() {
        return Err(Error::dim("batch labels", batch.len(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::Config(format!(
            "label {bad} outside {} classes",
            spec.num_classes
        )));
    }
    let (logits, cache) = convstack_forward(weights, spec, batch)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = ConvStackWeights::zeros(spec);
    let mut total = 0.0;
    for ((z, sc), &y) in logits.iter().zip(&cache.samples).zip(labels) {
        let (loss, dz) = loss_and_logit_grad(spec.loss, z, y);
        total += loss;
        let c = spec.feature_channels();
        let mut dfeat = vec![0.0; c];
        for (k, &g) in dz.iter().enumerate() {
            let g = g * scale;
            let row = grad.head.row_mut(k);
            for j in 0..c {
                row[j] += g * sc.features[j];
                dfeat[j] += g * weights.head.row(k)[j];
            }
        }
        let area = (spec.height * spec.width) as f64;
        let mut dh = Tensor::zeros(&[c, spec.height, spec.width]);
        for (k, chunk) in dh.data_mut().chunks_mut(spec.height * spec.width).enumerate() {
            chunk.fill(dfeat[k] / area);
        }
        for l in (0..weights.layers.len()).rev() {
            let pre = &sc.pre[l];
            let dz: Vec<f64> = dh
                .data()
                .iter()
                .zip(pre.data())
                .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
                .collect();
            let dz = Tensor::from_vec(pre.shape(), dz)?;
            let (gin, gf) = conv2d_backward(&sc.inputs[l], &weights.layers[l], &dz)?;
            grad.layers[l].axpy(1.0, &gf)?;
            dh = gin;
        }
    }
    Ok((total * scale, grad))
}

/// Classification accuracy in `[0, 1]`.
pub fn accuracy(weights: &ConvStackWeights, spec: &ConvStackSpec, xs: &[Tensor], labels: &[usize]) -> Result<f64> {
    if xs.is_empty() {
        return Ok(0.0);
    }
    let (logits, _) = convstack_forward(weights, spec, xs)?;
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(z, &y)| {
            let best = z.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
            );
            best.0 == y
        })
        .count();
    Ok(correct as f64 / xs.len() as f64)
}

//! Convolutional feature extractor producing C×H'×W' feature maps.
//!
//! Two variants are available: `conv4` (four conv-norm-relu-pool blocks) and
//! `resnet-lite` (three residual blocks with stride-2 downsampling). The same
//! weights can back a trainable encoder or, once frozen, the fixed encoder
//! whose features populate the memory bank.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ndkernel::checkpoint::{self, Dtype};
use crate::ndkernel::{BatchStats, Bound, ParamStore, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const RUNNING_MOMENTUM: f64 = 0.1;
/// Images per forward pass when encoding large sets in eval mode.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Conv4,
    ResnetLite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: Variant,
    /// Pixels per side of the (square) input image.
    pub input_size: usize,
    /// Feature channels C.
    pub channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            variant: Variant::Conv4,
            input_size: 32,
            channels: 64,
        }
    }
}

impl EncoderConfig {
    /// Spatial side H' = W' of the produced feature map.
    pub fn output_spatial(&self) -> usize {
        match self.variant {
            Variant::Conv4 => (0..4).fold(self.input_size, |s, _| s / 2),
            Variant::ResnetLite => (0..3).fold(self.input_size, |s, _| (s - 1) / 2 + 1),
        }
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        let s = self.output_spatial();
        [self.channels, s, s]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("encoder.channels must be positive".into()));
        }
        if self.output_spatial() == 0 {
            return Err(Error::Config(format!(
                "encoder.input_size {} is too small for {:?}",
                self.input_size, self.variant
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    TrainablePhi,
    FrozenPhi0,
}

/// One image's pre-pooling features, shape C×H'×W'.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub provenance: Provenance,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn spatial(&self) -> usize {
        self.tensor.shape()[1] * self.tensor.shape()[2]
    }

    /// Global average pool over the spatial grid.
    pub fn pooled(&self) -> Vec<f64> {
        let hw = self.spatial();
        self.tensor
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect()
    }
}

/// Running-statistics update produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub prefix: String,
    pub stats: BatchStats,
}

/// Encoder weights: trainable parameters plus normalization buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamStore,
    buffers: ParamStore,
}

fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut enc = Encoder {
            config: config.clone(),
            params: ParamStore::new(),
            buffers: ParamStore::new(),
        };
        let c = config.channels;
        match config.variant {
            Variant::Conv4 => {
                let mut c_in = 3;
                for i in 0..4 {
                    let p = format!("encoder.block{i}");
                    enc.add_conv(&format!("{p}.conv"), c, c_in, 3, true, rng);
                    enc.add_norm(&format!("{p}.norm"), c);
                    c_in = c;
                }
            }
            Variant::ResnetLite => {
                let mut c_in = 3;
                for i in 0..3 {
                    let p = format!("encoder.block{i}");
                    enc.add_conv(&format!("{p}.conv1"), c, c_in, 3, true, rng);
                    enc.add_norm(&format!("{p}.norm1"), c);
                    enc.add_conv(&format!("{p}.conv2"), c, c, 3, true, rng);
                    enc.add_norm(&format!("{p}.norm2"), c);
                    enc.add_conv(&format!("{p}.shortcut"), c, c_in, 1, false, rng);
                    enc.add_norm(&format!("{p}.shortcut_norm"), c);
                    c_in = c;
                }
            }
        }
        Ok(enc)
    }

    fn add_conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, bias: bool, rng: &mut impl Rng) {
        let fan_in = c_in * k * k;
        self.params
            .insert(format!("{name}.weight"), kaiming_uniform(vec![c_out, c_in, k, k], fan_in, rng));
        if bias {
            self.params.insert(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        }
    }

    fn add_norm(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::ones(vec![c]));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(vec![c]));
        self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(vec![c]));
        self.buffers.insert(format!("{name}.running_var"), Tensor::ones(vec![c]));
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    /// Parameters and buffers in one store, ready for the checkpoint container.
    pub fn to_store(&self) -> ParamStore {
        let mut s = self.params.clone();
        s.extend(&self.buffers);
        s
    }

    /// Rebuilds an encoder from the `encoder.*` entries of a checkpoint,
    /// checking every tensor shape against `config`.
    pub fn from_store(config: EncoderConfig, store: &ParamStore) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut enc = Encoder::new(config, &mut rng)?;
        for target in [&mut enc.params, &mut enc.buffers] {
            let names: Vec<String> = target.names().map(str::to_string).collect();
            for name in names {
                let t = store.get(&name)?;
                let slot = target.get_mut(&name)?;
                if t.shape() != slot.shape() {
                    return Err(Error::shape("encoder checkpoint", slot.shape(), t.shape()));
                }
                *slot = t.clone();
            }
        }
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_store(), Dtype::F64)
    }

    pub fn load(config: EncoderConfig, path: &Path) -> Result<Self> {
        Self::from_store(config, &checkpoint::load(path)?)
    }

    /// SHA-256 over the canonical checkpoint bytes.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(checkpoint::encode(&self.to_store(), Dtype::F64)))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::InvalidArgument(format!(
                "encoder input: expected B×3×{s}×{s}, got {shape:?}"
            )));
        }
        Ok(())
    }

    fn norm(
        &self,
        tape: &Tape,
        bound: &Bound,
        x: Var,
        prefix: &str,
        mode: Mode,
        updates: &mut Vec<NormUpdate>,
    ) -> Result<Var> {
        let gamma = bound.var(&format!("{prefix}.gamma"))?;
        let beta = bound.var(&format!("{prefix}.beta"))?;
        match mode {
            Mode::Train => {
                let (y, stats) = tape.channel_norm_train(x, gamma, beta, NORM_EPS)?;
                updates.push(NormUpdate {
                    prefix: prefix.to_string(),
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.buffers.get(&format!("{prefix}.running_mean"))?;
                let var = self.buffers.get(&format!("{prefix}.running_var"))?;
                tape.channel_norm_eval(x, gamma, beta, mean.data(), var.data(), NORM_EPS)
            }
        }
    }

    fn conv(&self, tape: &Tape, bound: &Bound, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = bound.var(&format!("{name}.weight"))?;
        let b = bound.var(&format!("{name}.bias")).ok();
        tape.conv2d(x, w, b, stride, pad)
    }

    /// Forward pass on a B×3×S×S batch recorded on `tape`, with parameters
    /// taken from `bound` (trainable or constant). Returns B×C×H'×W' and the
    /// batch statistics to fold into the running estimates (train mode only).
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        images: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<NormUpdate>)> {
        self.check_input(&tape.shape(images))?;
        let mut updates = Vec::new();
        let mut x = images;
        match self.config.variant {
            Variant::Conv4 => {
                for i in 0..4 {
                    let p = format!("encoder.block{i}");
                    x = self.conv(tape, bound, x, &format!("{p}.conv"), 1, 1)?;
                    x = self.norm(tape, bound, x, &format!("{p}.norm"), mode, &mut updates)?;
                    x = tape.relu(x)?;
                    x = tape.max_pool2(x)?;
                }
            }
            Variant::ResnetLite => {
                for i in 0..3 {
                    let p = format!("encoder.block{i}");
                    let mut h = self.conv(tape, bound, x, &format!("{p}.conv1"), 2, 1)?;
                    h = self.norm(tape, bound, h, &format!("{p}.norm1"), mode, &mut updates)?;
                    h = tape.relu(h)?;
                    h = self.conv(tape, bound, h, &format!("{p}.conv2"), 1, 1)?;
                    h = self.norm(tape, bound, h, &format!("{p}.norm2"), mode, &mut updates)?;
                    let mut s = self.conv(tape, bound, x, &format!("{p}.shortcut"), 2, 0)?;
                    s = self.norm(tape, bound, s, &format!("{p}.shortcut_norm"), mode, &mut updates)?;
                    x = tape.add(h, s)?;
                    x = tape.relu(x)?;
                }
            }
        }
        Ok((x, updates))
    }

    /// Folds batch statistics into the running estimates.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate]) -> Result<()> {
        for u in updates {
            let m = self.buffers.get_mut(&format!("{}.running_mean", u.prefix))?;
            for (r, b) in m.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - RUNNING_MOMENTUM) * *r + RUNNING_MOMENTUM * b;
            }
            let v = self.buffers.get_mut(&format!("{}.running_var", u.prefix))?;
            for (r, b) in v.data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - RUNNING_MOMENTUM) * *r + RUNNING_MOMENTUM * b;
            }
        }
        Ok(())
    }

    /// Eval-mode features for a batch of images, without gradients.
    pub fn encode_tensor(&self, images: &Tensor) -> Result<Tensor> {
        self.check_input(images.shape())?;
        let b = images.shape()[0];
        let per: usize = images.shape()[1..].iter().product();
        let mut out: Vec<f64> = Vec::new();
        let mut out_shape = Vec::new();
        for start in (0..b).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(b);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
            let tape = Tape::new();
            let bound = self.params.bind(&tape, false);
            let x = tape.constant(chunk);
            let (y, _) = self.forward(&tape, &bound, x, Mode::Eval)?;
            let v = tape.value(y);
            out_shape = v.shape().to_vec();
            out.extend_from_slice(v.data());
        }
        out_shape[0] = b;
        Tensor::new(out_shape, out)
    }

    /// Eval-mode encoding split into per-image feature maps.
    pub fn encode(&self, images: &Tensor, provenance: Provenance) -> Result<Vec<FeatureMap>> {
        let feats = self.encode_tensor(images)?;
        Ok((0..feats.shape()[0])
            .map(|i| FeatureMap {
                tensor: feats.slice0(i),
                provenance,
            })
            .collect())
    }

    /// Consumes the weights into an immutable encoder.
    pub fn freeze(self) -> FrozenEncoder {
        let fingerprint = self.fingerprint();
        FrozenEncoder {
            inner: self,
            fingerprint,
        }
    }
}

/// The fixed pretrained encoder. Its weights cannot be mutated and it only
/// ever binds them as constants, so it never contributes gradients.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    inner: Encoder,
    fingerprint: String,
}

impl FrozenEncoder {
    pub fn load(config: EncoderConfig, path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "pretrained checkpoint not found"),
            ));
        }
        Ok(Encoder::load(config, path)?.freeze())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.inner.config
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Read-only view of the weights.
    pub fn weights(&self) -> &Encoder {
        &self.inner
    }

    /// A trainable copy initialized from these weights.
    pub fn thaw_copy(&self) -> Encoder {
        self.inner.clone()
    }

    pub fn encode(&self, images: &Tensor) -> Result<Vec<FeatureMap>> {
        self.inner.encode(images, Provenance::FrozenPhi0)
    }

    pub fn encode_tensor(&self, images: &Tensor) -> Result<Tensor> {
        self.inner.encode_tensor(images)
    }

    /// Records an eval-mode forward on `tape` with constant weights.
    pub fn forward(&self, tape: &Tape, images: Var) -> Result<Var> {
        let bound = self.inner.params.bind(tape, false);
        Ok(self.inner.forward(tape, &bound, images, Mode::Eval)?.0)
    }
}

/// Global average pool of a B×C×H×W activation to B×C.
pub fn global_pool(tape: &Tape, x: Var) -> Result<Var> {
    tape.mean_axes(x, &[2, 3])
}

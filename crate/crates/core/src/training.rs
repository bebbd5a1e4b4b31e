//! Training loop and checkpoint files.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "DPBM" | version: u32 | metadata length: u32 | metadata (UTF-8 JSON)
//!        | parameter tensors in declared order, row-major
//! ```
//!
//! Tensors are stored at the model precision recorded in the metadata
//! (32-bit floats for the default `f32` models).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffnet::{adam_step, AdamConfig, AdamState, NamedTensor, Network, ParameterSet, Real, Tensor};
use crate::vae::{loss_and_gradients, Architecture, LossBreakdown, VaeModel};
use crate::video_io::FrameTensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPBM";
pub const CHECKPOINT_VERSION: u32 = 1;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn of<T: Real>() -> Self {
        if T::BITS == 64 {
            Precision::F64
        } else {
            Precision::F32
        }
    }
}

impl TryFrom<u32> for Precision {
    type Error = String;

    fn try_from(bits: u32) -> std::result::Result<Self, String> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        p.bits()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub precision: Precision,
    /// Save a checkpoint to `checkpoint_path` every this many epochs.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
    pub architecture: Architecture,
    /// Preprocessing applied when the frames were loaded; recorded so that
    /// inference can load new frames the same way.
    pub resize: Option<(usize, usize)>,
    pub grayscale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 8,
            batch_size: 140,
            epochs: 200,
            learning_rate: 1e-3,
            seed: 0,
            shuffle: true,
            precision: Precision::F32,
            checkpoint_every: None,
            checkpoint_path: None,
            architecture: Architecture::default(),
            resize: None,
            grayscale: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be at least 1");
        }
        if self.checkpoint_every.is_some() && self.checkpoint_path.is_none() {
            return bad("checkpoint_every needs a checkpoint path");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Frame-weighted mean of the batch losses; `batch_size` holds the
    /// number of frames seen.
    pub loss: LossBreakdown,
    /// Wall-clock time. Not written to checkpoints, which would otherwise
    /// differ between identical runs; reads back as 0.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn first(&self) -> Option<&EpochRecord> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trains a fresh model on every frame of `frames`.
pub fn train<T: Real>(frames: &FrameTensor, config: &TrainConfig) -> Result<(VaeModel<T>, TrainHistory)> {
    train_with_progress(frames, config, |_| {})
}

/// [`train`], calling `on_epoch` after each epoch.
pub fn train_with_progress<T: Real>(
    frames: &FrameTensor,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(VaeModel<T>, TrainHistory)> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::InvalidData("no frames to train on".into()));
    }
    let mut init_rng = stream(config.seed, INIT_STREAM);
    let mut shuffle_rng = stream(config.seed, SHUFFLE_STREAM);
    let mut noise_rng = stream(config.seed, NOISE_STREAM);

    let mut model = VaeModel::<T>::init(
        &config.architecture,
        frames.frame_shape(),
        config.latent_dim,
        &mut init_rng,
    )?;
    let adam = AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut enc_state = AdamState::new(model.encoder_params(), adam);
    let mut dec_state = AdamState::new(model.decoder_params(), adam);

    let d = config.latent_dim;
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut history = TrainHistory::default();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        if config.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let (mut total, mut recon, mut kl) = (0.0, 0.0, 0.0);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let diverged = |source: Error| Error::TrainingDiverged {
                epoch,
                batch: batch_idx + 1,
                source: Box::new(source),
            };
            let batch = frames.gather::<T>(chunk);
            let noise: Vec<T> = (0..chunk.len() * d)
                .map(|_| T::from_f64_lossy(StandardNormal.sample(&mut noise_rng)))
                .collect();
            let noise = Tensor::from_vec(&[chunk.len(), d], noise)?;
            let (loss, grads) = loss_and_gradients(&model, &batch, &noise).map_err(diverged)?;
            let (enc, dec) = model.params_mut();
            adam_step(enc, &grads.encoder, &mut enc_state).map_err(diverged)?;
            adam_step(dec, &grads.decoder, &mut dec_state).map_err(diverged)?;
            let weight = chunk.len() as f64;
            total += loss.total * weight;
            recon += loss.reconstruction_l1 * weight;
            kl += loss.kl * weight;
        }
        let n = frames.len() as f64;
        let record = EpochRecord {
            epoch,
            loss: LossBreakdown {
                total: total / n,
                reconstruction_l1: recon / n,
                kl: kl / n,
                batch_size: frames.len(),
            },
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.epochs.push(record);
        if let (Some(every), Some(path)) = (config.checkpoint_every, config.checkpoint_path.as_ref()) {
            if epoch % every == 0 {
                save_checkpoint(path, &model, &history, Some(config))?;
            }
        }
    }
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMetadata {
    encoder: Network,
    decoder: Network,
    latent_dim: usize,
    input_shape: [usize; 3],
    precision: Precision,
    train_config: Option<TrainConfig>,
    history: TrainHistory,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: VaeModel<T>,
    pub history: TrainHistory,
    pub config: Option<TrainConfig>,
}

/// Serializes a model into checkpoint bytes.
pub fn encode_checkpoint<T: Real>(
    model: &VaeModel<T>,
    history: &TrainHistory,
    config: Option<&TrainConfig>,
) -> Result<Vec<u8>> {
    let joint = model.joint_params();
    let metadata = CheckpointMetadata {
        encoder: model.encoder().clone(),
        decoder: model.decoder().clone(),
        latent_dim: model.latent_dim(),
        input_shape: model.input_shape(),
        precision: Precision::of::<T>(),
        train_config: config.cloned(),
        history: history.clone(),
        tensors: joint
            .iter()
            .map(|e| TensorEntry {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&metadata)?;
    let meta_len = u32::try_from(json.len())
        .map_err(|_| Error::InvalidData("checkpoint metadata exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + joint.scalar_count() * (T::BITS as usize / 8));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&json);
    for e in joint.iter() {
        for &v in e.tensor.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &VaeModel<T>,
    history: &TrainHistory,
    config: Option<&TrainConfig>,
) -> Result<()> {
    let bytes = encode_checkpoint(model, history, config)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn parse_metadata(bytes: &[u8]) -> Result<(CheckpointMetadata, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| Error::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32("metadata length")? as usize;
    let json = r.take(len, "metadata")?;
    let meta: CheckpointMetadata = serde_json::from_slice(json)?;
    Ok((meta, r.pos))
}

/// Parses checkpoint bytes written at precision `T`.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (meta, start) = parse_metadata(bytes)?;
    let expected = Precision::of::<T>();
    if meta.precision != expected {
        return Err(Error::PrecisionMismatch {
            found: meta.precision.bits(),
            expected: expected.bits(),
        });
    }
    let layout: Vec<TensorEntry> = meta
        .encoder
        .param_layout()
        .into_iter()
        .map(|(name, shape)| TensorEntry {
            name: format!("encoder.{name}"),
            shape,
        })
        .chain(
            meta.decoder
                .param_layout()
                .into_iter()
                .map(|(name, shape)| TensorEntry {
                    name: format!("decoder.{name}"),
                    shape,
                }),
        )
        .collect();
    if layout != meta.tensors {
        return Err(Error::ShapeMismatch(
            "checkpoint tensor list does not match its architecture".into(),
        ));
    }

    let width = T::BITS as usize / 8;
    let mut r = Reader { bytes, pos: start };
    let mut read_set = |net: &Network| -> Result<ParameterSet<T>> {
        let mut entries = Vec::new();
        for (name, shape) in net.param_layout() {
            let count: usize = shape.iter().product();
            let raw = r.take(count * width, &format!("tensor {name}"))?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            entries.push(NamedTensor {
                name,
                tensor: Tensor::from_vec(&shape, data)?,
            });
        }
        Ok(ParameterSet::new(entries))
    };
    let encoder_params = read_set(&meta.encoder)?;
    let decoder_params = read_set(&meta.decoder)?;
    if r.pos != bytes.len() {
        return Err(Error::InvalidData(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    let model = VaeModel::new(meta.encoder, encoder_params, meta.decoder, decoder_params)?;
    if model.latent_dim() != meta.latent_dim || model.input_shape() != meta.input_shape {
        return Err(Error::ShapeMismatch(format!(
            "metadata declares d={} input {:?}, architecture gives d={} input {:?}",
            meta.latent_dim,
            meta.input_shape,
            model.latent_dim(),
            model.input_shape()
        )));
    }
    Ok(Checkpoint {
        model,
        history: meta.history,
        config: meta.train_config,
    })
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Precision a checkpoint was written at, read from its header.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_metadata(&bytes)?.0.precision)
}

//! Background subtraction end to end.
//!
//! The background of a frame is the decoded posterior mean,
//! `decode(encode(f).mu)`; no sampling happens at inference. Masks are the
//! pixels whose frame/background difference exceeds a threshold. The latent
//! dimension should follow the scene: more dimensions for dynamic
//! backgrounds (wind, rain, illumination changes), fewer for near-static ones
//! so the model does not start encoding the foreground.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffnet::{Real, Tensor};
use crate::rpca::{rpca_decompose, ObservationMatrix, RpcaParams, RpcaResult};
use crate::training::{train, TrainConfig, TrainHistory};
use crate::vae::VaeModel;
use crate::video_io::{FrameTensor, Mask};
use crate::{Error, Result};

/// Frames per inference batch.
const INFERENCE_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelRule {
    /// Largest absolute per-channel difference.
    MaxChannel,
    /// Absolute luma (0.299 R + 0.587 G + 0.114 B) of the difference.
    Luma,
}

impl std::str::FromStr for ChannelRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-channel" => Ok(ChannelRule::MaxChannel),
            "luma" => Ok(ChannelRule::Luma),
            other => Err(Error::InvalidConfig(format!(
                "channel rule must be max-channel or luma, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtractConfig {
    /// Foreground where the difference is strictly above this, in `(0, 1]`.
    pub threshold: f32,
    pub channel_rule: ChannelRule,
    /// Leading fraction of a long video used for training.
    pub long_video_fraction: f64,
}

impl Default for SubtractConfig {
    fn default() -> Self {
        SubtractConfig {
            threshold: 0.1,
            channel_rule: ChannelRule::MaxChannel,
            long_video_fraction: 0.2,
        }
    }
}

impl SubtractConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold must be in (0, 1], got {}",
                self.threshold
            )));
        }
        if !(self.long_video_fraction > 0.0 && self.long_video_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "long-video fraction must be in (0, 1], got {}",
                self.long_video_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    DeepPbm,
    Rpca,
}

/// Per-frame foreground masks and the backgrounds they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSequence {
    pub masks: Vec<Mask>,
    pub backgrounds: Option<FrameTensor>,
    pub threshold: f32,
    pub method: Method,
    /// Source index of the first frame.
    pub frame_index_offset: usize,
}

impl MaskSequence {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Fraction of all mask pixels marked foreground.
    pub fn foreground_rate(&self) -> f64 {
        let (on, total) = self
            .masks
            .iter()
            .fold((0, 0), |(on, total), m| (on + m.count(), total + m.data().len()));
        if total == 0 {
            0.0
        } else {
            on as f64 / total as f64
        }
    }
}

fn check_model_frames<T: Real>(model: &VaeModel<T>, frames: &FrameTensor) -> Result<()> {
    if frames.frame_shape() != model.input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "model expects {:?} frames, got {:?}",
            model.input_shape(),
            frames.frame_shape()
        )));
    }
    Ok(())
}

/// `decode(encode(f).mu)` for every frame.
pub fn estimate_background<T: Real>(model: &VaeModel<T>, frames: &FrameTensor) -> Result<FrameTensor> {
    check_model_frames(model, frames)?;
    let mut parts = Vec::new();
    let indices: Vec<usize> = (0..frames.len()).collect();
    for chunk in indices.chunks(INFERENCE_CHUNK) {
        let batch = frames.gather::<T>(chunk);
        let decoded = model.decode(&model.encode_mean(&batch)?)?;
        parts.push(FrameTensor::from_tensor(&decoded, frames.frame_index_offset() + chunk[0])?);
    }
    FrameTensor::concat(&parts)
}

/// Thresholds `|frame - background|` of one `[C, H, W]` frame.
pub fn extract_mask(
    frame: &[f32],
    background: &[f32],
    frame_shape: [usize; 3],
    config: &SubtractConfig,
) -> Result<Mask> {
    let [c, h, w] = frame_shape;
    let plane = h * w;
    if frame.len() != c * plane || background.len() != c * plane {
        return Err(Error::ShapeMismatch(format!(
            "frame ({}) and background ({}) must both hold {c}x{h}x{w} values",
            frame.len(),
            background.len()
        )));
    }
    const LUMA: [f32; 3] = [0.299, 0.587, 0.114];
    let data = (0..plane)
        .map(|i| {
            let diff = |ch: usize| frame[ch * plane + i] - background[ch * plane + i];
            let d = match (config.channel_rule, c) {
                (ChannelRule::Luma, 3) => (0..3).map(|ch| LUMA[ch] * diff(ch)).sum::<f32>().abs(),
                _ => (0..c).map(|ch| diff(ch).abs()).fold(0.0, f32::max),
            };
            u8::from(d > config.threshold)
        })
        .collect();
    Mask::from_vec(h, w, data)
}

/// [`extract_mask`] for every frame/background pair.
pub fn extract_masks(frames: &FrameTensor, backgrounds: &FrameTensor, config: &SubtractConfig) -> Result<Vec<Mask>> {
    config.validate()?;
    if frames.shape() != backgrounds.shape() {
        return Err(Error::ShapeMismatch(format!(
            "frames {:?} vs backgrounds {:?}",
            frames.shape(),
            backgrounds.shape()
        )));
    }
    (0..frames.len())
        .map(|i| extract_mask(frames.frame(i), backgrounds.frame(i), frames.frame_shape(), config))
        .collect()
}

/// Masks for every frame using a trained model.
pub fn run_deeppbm<T: Real>(
    frames: &FrameTensor,
    model: &VaeModel<T>,
    config: &SubtractConfig,
) -> Result<MaskSequence> {
    config.validate()?;
    let backgrounds = estimate_background(model, frames)?;
    let masks = extract_masks(frames, &backgrounds, config)?;
    Ok(MaskSequence {
        masks,
        backgrounds: Some(backgrounds),
        threshold: config.threshold,
        method: Method::DeepPbm,
        frame_index_offset: frames.frame_index_offset(),
    })
}

/// Short-video protocol: train on all frames, then subtract on all frames.
pub fn train_and_run_deeppbm<T: Real>(
    frames: &FrameTensor,
    train_config: &TrainConfig,
    config: &SubtractConfig,
) -> Result<(MaskSequence, VaeModel<T>, TrainHistory)> {
    config.validate()?;
    let (model, history) = train::<T>(frames, train_config)?;
    let masks = run_deeppbm(frames, &model, config)?;
    Ok((masks, model, history))
}

/// Number of leading frames used for training under the long-video protocol.
pub fn long_video_training_len(frames: usize, fraction: f64) -> usize {
    (fraction * frames as f64).floor() as usize
}

#[derive(Clone, Debug)]
pub struct LongVideoRun<T> {
    pub masks: MaskSequence,
    pub model: VaeModel<T>,
    pub history: TrainHistory,
    pub training_frames: usize,
}

/// Long-video protocol: train on the leading `long_video_fraction` of the
/// frames only, then subtract on every frame.
pub fn run_long_video<T: Real>(
    frames: &FrameTensor,
    train_config: &TrainConfig,
    config: &SubtractConfig,
) -> Result<LongVideoRun<T>> {
    config.validate()?;
    let training_frames = long_video_training_len(frames.len(), config.long_video_fraction);
    if training_frames == 0 {
        return Err(Error::InvalidConfig(format!(
            "long-video fraction {} of {} frames selects no training frames",
            config.long_video_fraction,
            frames.len()
        )));
    }
    let (model, history) = train::<T>(&frames.slice(0..training_frames)?, train_config)?;
    let masks = run_deeppbm(frames, &model, config)?;
    Ok(LongVideoRun {
        masks,
        model,
        history,
        training_frames,
    })
}

/// Baseline: backgrounds are the columns of the low-rank part.
pub fn run_rpca_bs(
    frames: &FrameTensor,
    params: &RpcaParams,
    config: &SubtractConfig,
) -> Result<(MaskSequence, RpcaResult)> {
    config.validate()?;
    let observation = ObservationMatrix::from_frames(frames);
    let result = rpca_decompose(&observation.matrix, params)?;
    let backgrounds = observation.columns_to_frames(&result.low_rank)?;
    let masks = extract_masks(frames, &backgrounds, config)?;
    Ok((
        MaskSequence {
            masks,
            backgrounds: Some(backgrounds),
            threshold: config.threshold,
            method: Method::Rpca,
            frame_index_offset: frames.frame_index_offset(),
        },
        result,
    ))
}

#[derive(Clone, Copy, Debug)]
pub enum GenerateMode<'a> {
    /// Decode `z ~ N(0, I)`.
    PriorSample,
    /// Decode `mu(frame) + scale * eps` for the first frame of `frame`.
    Perturb { frame: &'a FrameTensor, scale: f64 },
}

/// Draws `count` synthetic backgrounds from the model.
pub fn generate_backgrounds<T: Real>(
    model: &VaeModel<T>,
    mode: GenerateMode<'_>,
    count: usize,
    seed: u64,
) -> Result<FrameTensor> {
    if count == 0 {
        return Err(Error::InvalidConfig("nothing to generate".into()));
    }
    let d = model.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = || -> T { T::from_f64_lossy(StandardNormal.sample(&mut rng)) };
    let z: Vec<T> = match mode {
        GenerateMode::PriorSample => (0..count * d).map(|_| noise()).collect(),
        GenerateMode::Perturb { frame, scale } => {
            check_model_frames(model, frame)?;
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(Error::InvalidConfig(format!("scale must be >= 0, got {scale}")));
            }
            let mu = model.encode_mean(&frame.gather::<T>(&[0]))?;
            let scale = T::from_f64_lossy(scale);
            (0..count)
                .flat_map(|_| mu.data().to_vec())
                .map(|m| m + scale * noise())
                .collect()
        }
    };
    let out = model.decode(&Tensor::from_vec(&[count, d], z)?)?;
    FrameTensor::from_tensor(&out, 0)
}

/// A single synthetic background.
pub fn generate_background<T: Real>(model: &VaeModel<T>, mode: GenerateMode<'_>, seed: u64) -> Result<FrameTensor> {
    generate_backgrounds(model, mode, 1, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::Architecture;
    use proptest::prelude::*;

    fn shape() -> [usize; 3] {
        [1, 8, 8]
    }

    #[test]
    fn identical_frame_and_background_give_empty_mask() {
        let f = vec![0.3f32; 64];
        let m = extract_mask(&f, &f, shape(), &SubtractConfig::default()).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn single_differing_pixel_is_flagged() {
        let b = vec![0.2f32; 64];
        let mut f = b.clone();
        f[19] = 0.7;
        let m = extract_mask(&f, &b, shape(), &SubtractConfig::default()).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(2, 3));
    }

    #[test]
    fn channel_rules_differ_on_color() {
        let b = vec![0.5f32; 3 * 64];
        let mut f = b.clone();
        f[64] = 0.8; // green +0.3 at pixel 0
        let max = extract_mask(&f, &b, [3, 8, 8], &SubtractConfig::default()).unwrap();
        let luma = SubtractConfig {
            channel_rule: ChannelRule::Luma,
            ..SubtractConfig::default()
        };
        let l = extract_mask(&f, &b, [3, 8, 8], &luma).unwrap();
        assert!(max.get(0, 0));
        assert!(l.get(0, 0)); // 0.587 * 0.3 = 0.176 > 0.1
        let mut f2 = b.clone();
        f2[2 * 64] = 0.8; // blue +0.3: luma 0.034
        assert!(extract_mask(&f2, &b, [3, 8, 8], &SubtractConfig::default()).unwrap().get(0, 0));
        assert!(!extract_mask(&f2, &b, [3, 8, 8], &luma).unwrap().get(0, 0));
    }

    #[test]
    fn threshold_validation() {
        for t in [0.0, -0.1, 1.5, f32::NAN] {
            let c = SubtractConfig {
                threshold: t,
                ..SubtractConfig::default()
            };
            assert!(c.validate().is_err());
        }
        let c = SubtractConfig {
            long_video_fraction: 0.0,
            ..SubtractConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn long_video_training_length_floors() {
        assert_eq!(long_video_training_len(100, 0.2), 20);
        assert_eq!(long_video_training_len(99, 0.2), 19);
        assert_eq!(long_video_training_len(4, 0.2), 0);
        assert_eq!(long_video_training_len(7, 1.0), 7);
    }

    #[test]
    fn generation_modes() {
        use rand::SeedableRng;
        let model = VaeModel::<f32>::init(
            &Architecture {
                widths: vec![2],
                ..Architecture::default()
            },
            shape(),
            3,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        let frames = FrameTensor::new((0..64).map(|i| i as f32 / 64.0).collect(), [1, 1, 8, 8], 0).unwrap();
        let zero = generate_background(&model, GenerateMode::Perturb { frame: &frames, scale: 0.0 }, 9).unwrap();
        assert_eq!(zero, estimate_background(&model, &frames).unwrap());
        let a = generate_background(&model, GenerateMode::PriorSample, 1).unwrap();
        let b = generate_background(&model, GenerateMode::PriorSample, 2).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, generate_background(&model, GenerateMode::PriorSample, 1).unwrap());
        assert_eq!(generate_backgrounds(&model, GenerateMode::PriorSample, 3, 1).unwrap().len(), 3);
    }

    proptest! {
        #[test]
        fn masks_shrink_as_threshold_grows(
            frame in prop::collection::vec(0f32..=1.0, 3 * 64),
            background in prop::collection::vec(0f32..=1.0, 3 * 64),
            t1 in 0.001f32..=1.0,
            t2 in 0.001f32..=1.0,
            luma in any::<bool>(),
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let rule = if luma { ChannelRule::Luma } else { ChannelRule::MaxChannel };
            let cfg = |threshold| SubtractConfig { threshold, channel_rule: rule, ..SubtractConfig::default() };
            let loose = extract_mask(&frame, &background, [3, 8, 8], &cfg(lo)).unwrap();
            let tight = extract_mask(&frame, &background, [3, 8, 8], &cfg(hi)).unwrap();
            prop_assert!(loose.contains(&tight));
        }
    }
}

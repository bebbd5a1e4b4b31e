//! The probabilistic background model: a convolutional VAE with a diagonal
//! Gaussian posterior, standard normal prior and an L1 reconstruction term.
//!
//! The encoder maps a frame to `2d` values, the first `d` being the posterior
//! mean and the last `d` the log-variance. The decoder ends with a sigmoid so
//! reconstructions stay in `[0, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{
    check_parameter_gradients, GradCheckConfig, GradCheckReport, LayerSpec, NamedTensor, Network, ParameterSet,
    Real, Tensor,
};
use crate::{Error, Result};

/// Per-frame posterior `q(z | f) = N(mu, diag(exp(log_var)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian<T> {
    pub mu: Vec<T>,
    pub log_var: Vec<T>,
}

impl<T: Real> LatentGaussian<T> {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Convolutional encoder/decoder layout. Each entry of `widths` adds one
/// stride-`stride` convolution to the encoder and a mirrored transposed
/// convolution to the decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            widths: vec![32, 64, 128],
            kernel: 4,
            stride: 2,
            padding: 1,
        }
    }
}

impl Architecture {
    /// Builds `(encoder, decoder)` for frames of shape `[C, H, W]`.
    pub fn build(&self, input_shape: [usize; 3], latent_dim: usize) -> Result<(Network, Network)> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidArchitecture("widths must be non-empty and positive".into()));
        }
        if latent_dim == 0 {
            return Err(Error::InvalidArchitecture("latent dimension must be at least 1".into()));
        }
        let [channels, ..] = input_shape;
        let mut enc = Vec::new();
        let mut prev = channels;
        for &w in &self.widths {
            enc.push(LayerSpec::Conv2d {
                in_channels: prev,
                out_channels: w,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
            });
            enc.push(LayerSpec::Relu);
            prev = w;
        }
        let convs = Network::new(&input_shape, enc.clone())?;
        let feature_shape = convs.output_shape().to_vec();
        let features: usize = feature_shape.iter().product();
        enc.push(LayerSpec::Flatten);
        enc.push(LayerSpec::Dense {
            in_features: features,
            out_features: 2 * latent_dim,
        });
        let encoder = Network::new(&input_shape, enc)?;

        let mut dec = vec![
            LayerSpec::Dense {
                in_features: latent_dim,
                out_features: features,
            },
            LayerSpec::Relu,
            LayerSpec::Reshape {
                shape: feature_shape,
            },
        ];
        let mut outs: Vec<usize> = self.widths.iter().rev().skip(1).copied().collect();
        outs.push(channels);
        let mut prev = *self.widths.last().unwrap();
        for (i, &out) in outs.iter().enumerate() {
            dec.push(LayerSpec::TransposedConv2d {
                in_channels: prev,
                out_channels: out,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
            });
            dec.push(if i + 1 == outs.len() {
                LayerSpec::Sigmoid
            } else {
                LayerSpec::Relu
            });
            prev = out;
        }
        let decoder = Network::new(&[latent_dim], dec)?;
        if decoder.output_shape() != input_shape {
            return Err(Error::InvalidArchitecture(format!(
                "decoder produces {:?} for {:?} input; frame size must be divisible by {}",
                decoder.output_shape(),
                input_shape,
                self.stride.pow(self.widths.len() as u32)
            )));
        }
        Ok((encoder, decoder))
    }
}

/// Encoder parameters (phi), decoder parameters (theta) and their layer lists.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel<T> {
    encoder: Network,
    encoder_params: ParameterSet<T>,
    decoder: Network,
    decoder_params: ParameterSet<T>,
    latent_dim: usize,
    input_shape: [usize; 3],
}

/// Parameter gradients of [`loss_and_gradients`].
#[derive(Clone, Debug)]
pub struct VaeGradients<T> {
    pub encoder: ParameterSet<T>,
    pub decoder: ParameterSet<T>,
}

impl<T: Real> VaeGradients<T> {
    /// Laid out like [`VaeModel::joint_params`].
    pub fn joint(&self) -> ParameterSet<T> {
        join_sets(&self.encoder, &self.decoder)
    }
}

fn join_sets<T: Real>(encoder: &ParameterSet<T>, decoder: &ParameterSet<T>) -> ParameterSet<T> {
    let prefixed = |prefix: &str, set: &ParameterSet<T>| {
        set.iter()
            .map(|e| NamedTensor {
                name: format!("{prefix}.{}", e.name),
                tensor: e.tensor.clone(),
            })
            .collect::<Vec<_>>()
    };
    let mut all = prefixed("encoder", encoder);
    all.extend(prefixed("decoder", decoder));
    ParameterSet::new(all)
}

impl<T: Real> VaeModel<T> {
    pub fn new(
        encoder: Network,
        encoder_params: ParameterSet<T>,
        decoder: Network,
        decoder_params: ParameterSet<T>,
    ) -> Result<Self> {
        let input_shape: [usize; 3] = encoder.input_shape().try_into().map_err(|_| {
            Error::InvalidArchitecture(format!(
                "encoder input must be [C, H, W], got {:?}",
                encoder.input_shape()
            ))
        })?;
        let latent_dim = match *encoder.output_shape() {
            [w] if w >= 2 && w % 2 == 0 => w / 2,
            ref s => {
                return Err(Error::InvalidArchitecture(format!(
                    "encoder output must be [2d], got {s:?}"
                )))
            }
        };
        if decoder.input_shape() != [latent_dim] {
            return Err(Error::InvalidArchitecture(format!(
                "decoder input must be [{latent_dim}], got {:?}",
                decoder.input_shape()
            )));
        }
        if decoder.output_shape() != input_shape {
            return Err(Error::InvalidArchitecture(format!(
                "decoder output {:?} does not match input shape {:?}",
                decoder.output_shape(),
                input_shape
            )));
        }
        if decoder.layers().last() != Some(&LayerSpec::Sigmoid) {
            return Err(Error::InvalidArchitecture("decoder must end with a sigmoid".into()));
        }
        encoder.check_params(&encoder_params)?;
        decoder.check_params(&decoder_params)?;
        Ok(VaeModel {
            encoder,
            encoder_params,
            decoder,
            decoder_params,
            latent_dim,
            input_shape,
        })
    }

    /// Freshly initialized model (Glorot-uniform weights, zero biases).
    pub fn init<R: Rng + ?Sized>(
        architecture: &Architecture,
        input_shape: [usize; 3],
        latent_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (encoder, decoder) = architecture.build(input_shape, latent_dim)?;
        let encoder_params = encoder.init_params(rng);
        let decoder_params = decoder.init_params(rng);
        VaeModel::new(encoder, encoder_params, decoder, decoder_params)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn decoder(&self) -> &Network {
        &self.decoder
    }

    pub fn encoder_params(&self) -> &ParameterSet<T> {
        &self.encoder_params
    }

    pub fn decoder_params(&self) -> &ParameterSet<T> {
        &self.decoder_params
    }

    pub(crate) fn params_mut(&mut self) -> (&mut ParameterSet<T>, &mut ParameterSet<T>) {
        (&mut self.encoder_params, &mut self.decoder_params)
    }

    /// Encoder then decoder parameters as one set, names prefixed with
    /// `encoder.` / `decoder.`.
    pub fn joint_params(&self) -> ParameterSet<T> {
        join_sets(&self.encoder_params, &self.decoder_params)
    }

    /// Copy of this model with parameters taken from a [`joint_params`](Self::joint_params)-shaped set.
    pub fn with_joint_params(&self, joint: &ParameterSet<T>) -> Result<Self> {
        let split = self.encoder_params.len();
        if joint.len() != split + self.decoder_params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter tensors, got {}",
                split + self.decoder_params.len(),
                joint.len()
            )));
        }
        let strip = |range: std::ops::Range<usize>, like: &ParameterSet<T>| {
            ParameterSet::new(
                range
                    .zip(like.iter())
                    .map(|(i, e)| NamedTensor {
                        name: e.name.clone(),
                        tensor: joint.get(i).tensor.clone(),
                    })
                    .collect(),
            )
        };
        let enc = strip(0..split, &self.encoder_params);
        let dec = strip(split..joint.len(), &self.decoder_params);
        VaeModel::new(self.encoder.clone(), enc, self.decoder.clone(), dec)
    }

    pub fn cast<U: Real>(&self) -> VaeModel<U> {
        VaeModel {
            encoder: self.encoder.clone(),
            encoder_params: self.encoder_params.cast(),
            decoder: self.decoder.clone(),
            decoder_params: self.decoder_params.cast(),
            latent_dim: self.latent_dim,
            input_shape: self.input_shape,
        }
    }

    fn check_frames(&self, frames: &Tensor<T>) -> Result<usize> {
        let s = frames.shape();
        if s.len() != 4 || s[1..] != self.input_shape || s[0] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "model expects frames [N, {}, {}, {}], got {:?}",
                self.input_shape[0], self.input_shape[1], self.input_shape[2], s
            )));
        }
        Ok(s[0])
    }

    /// Raw encoder output `[N, 2d]`.
    pub fn encode_raw(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_frames(frames)?;
        self.encoder.infer(&self.encoder_params, frames)
    }

    /// One posterior per frame.
    pub fn encode(&self, frames: &Tensor<T>) -> Result<Vec<LatentGaussian<T>>> {
        let raw = self.encode_raw(frames)?;
        let d = self.latent_dim;
        Ok((0..raw.batch())
            .map(|i| {
                let row = raw.sample(i);
                LatentGaussian {
                    mu: row[..d].to_vec(),
                    log_var: row[d..].to_vec(),
                }
            })
            .collect())
    }

    /// Posterior means as a `[N, d]` tensor.
    pub fn encode_mean(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let raw = self.encode_raw(frames)?;
        let d = self.latent_dim;
        let n = raw.batch();
        let mut mu = Vec::with_capacity(n * d);
        for i in 0..n {
            mu.extend_from_slice(&raw.sample(i)[..d]);
        }
        Tensor::from_vec(&[n, d], mu)
    }

    /// Decodes a `[N, d]` batch of latents into `[N, C, H, W]` frames in `[0, 1]`.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.shape().len() != 2 || z.shape()[1] != self.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "latents must be [N, {}], got {:?}",
                self.latent_dim,
                z.shape()
            )));
        }
        self.decoder.infer(&self.decoder_params, z)
    }
}

/// `z = mu + exp(log_var / 2) * noise`.
pub fn reparameterize<T: Real>(latent: &LatentGaussian<T>, noise: &[T]) -> Vec<T> {
    let half = T::from_f64_lossy(0.5);
    latent
        .mu
        .iter()
        .zip(&latent.log_var)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect()
}

/// Closed-form `KL(q || N(0, I)) = -1/2 * sum(1 + log_var - mu^2 - exp(log_var))`.
pub fn kl_divergence<T: Real>(latent: &LatentGaussian<T>) -> T {
    kl_terms(&latent.mu, &latent.log_var)
}

// Written as (e^lv - 1 - lv) + mu^2 with expm1 so that rounding can never
// make a term negative.
fn kl_terms<T: Real>(mu: &[T], log_var: &[T]) -> T {
    let half = T::from_f64_lossy(0.5);
    let sum = mu
        .iter()
        .zip(log_var)
        .fold(T::zero(), |acc, (&m, &lv)| acc + ((lv.exp_m1() - lv) + m * m));
    half * sum
}

/// Sum of absolute pixel differences per frame, averaged over the batch.
pub fn l1_reconstruction<T: Real>(frames: &Tensor<T>, reconstructed: &Tensor<T>) -> Result<T> {
    if frames.shape() != reconstructed.shape() || frames.batch() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction {:?} does not match frames {:?}",
            reconstructed.shape(),
            frames.shape()
        )));
    }
    let n = frames.batch();
    let total = (0..n).fold(T::zero(), |acc, i| {
        acc + frames
            .sample(i)
            .iter()
            .zip(reconstructed.sample(i))
            .fold(T::zero(), |s, (&a, &b)| s + (a - b).abs())
    });
    Ok(total / T::from_usize(n).unwrap())
}

/// Batch-mean loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction_l1: f64,
    pub kl: f64,
    pub batch_size: usize,
}

fn finish_loss<T: Real>(recon: T, kl: T, batch_size: usize) -> Result<LossBreakdown> {
    if !recon.is_finite() {
        return Err(Error::NonFinite("reconstruction term of the loss".into()));
    }
    if !kl.is_finite() {
        return Err(Error::NonFinite("KL term of the loss".into()));
    }
    Ok(LossBreakdown {
        total: (recon + kl).to_f64_lossy(),
        reconstruction_l1: recon.to_f64_lossy(),
        kl: kl.to_f64_lossy(),
        batch_size,
    })
}

fn check_noise<T: Real>(noise: &Tensor<T>, n: usize, d: usize) -> Result<()> {
    if noise.shape() != [n, d] {
        return Err(Error::ShapeMismatch(format!(
            "noise must be [{n}, {d}], got {:?}",
            noise.shape()
        )));
    }
    Ok(())
}

/// Batch-mean of per-frame `L1 + KL` with one noise draw per frame.
pub fn total_loss<T: Real>(
    model: &VaeModel<T>,
    frames: &Tensor<T>,
    noise: &Tensor<T>,
) -> Result<LossBreakdown> {
    let n = model.check_frames(frames)?;
    let d = model.latent_dim;
    check_noise(noise, n, d)?;
    let latents = model.encode(frames)?;
    let mut z = Vec::with_capacity(n * d);
    let mut kl = T::zero();
    for (i, latent) in latents.iter().enumerate() {
        z.extend(reparameterize(latent, noise.sample(i)));
        kl = kl + kl_divergence(latent);
    }
    let recon = model.decode(&Tensor::from_vec(&[n, d], z)?)?;
    let l1 = l1_reconstruction(frames, &recon)?;
    finish_loss(l1, kl / T::from_usize(n).unwrap(), n)
}

/// [`total_loss`] together with its gradient with respect to every encoder
/// and decoder parameter, differentiating through the reparameterization.
pub fn loss_and_gradients<T: Real>(
    model: &VaeModel<T>,
    frames: &Tensor<T>,
    noise: &Tensor<T>,
) -> Result<(LossBreakdown, VaeGradients<T>)> {
    let n = model.check_frames(frames)?;
    let d = model.latent_dim;
    check_noise(noise, n, d)?;
    let half = T::from_f64_lossy(0.5);
    let inv_n = T::one() / T::from_usize(n).unwrap();

    let (stats, enc_tape) = model.encoder.forward(&model.encoder_params, frames)?;
    let mut z = vec![T::zero(); n * d];
    let mut kl = T::zero();
    for i in 0..n {
        let row = stats.sample(i);
        let (mu, log_var) = row.split_at(d);
        for k in 0..d {
            z[i * d + k] = mu[k] + (half * log_var[k]).exp() * noise.sample(i)[k];
        }
        kl = kl + kl_terms(mu, log_var);
    }
    let z = Tensor::from_vec(&[n, d], z)?;
    let (recon, dec_tape) = model.decoder.forward(&model.decoder_params, &z)?;
    let l1 = l1_reconstruction(frames, &recon)?;
    let breakdown = finish_loss(l1, kl * inv_n, n)?;

    // d|r - f| / dr = sign(r - f), zero at ties
    let mut recon_grad = Tensor::zeros(recon.shape());
    for ((g, &r), &f) in recon_grad
        .data_mut()
        .iter_mut()
        .zip(recon.data())
        .zip(frames.data())
    {
        *g = if r > f {
            inv_n
        } else if r < f {
            -inv_n
        } else {
            T::zero()
        };
    }
    let dec = model
        .decoder
        .backward(&model.decoder_params, &dec_tape, &recon_grad, true)?;
    let dz = dec.input.expect("input gradient requested");

    let mut stats_grad = Tensor::zeros(stats.shape());
    for i in 0..n {
        let row = stats.sample(i);
        let eps = noise.sample(i);
        let dz_row = dz.sample(i);
        let out = &mut stats_grad.data_mut()[i * 2 * d..(i + 1) * 2 * d];
        for k in 0..d {
            let (mu, lv) = (row[k], row[d + k]);
            let sigma = (half * lv).exp();
            out[k] = dz_row[k] + mu * inv_n;
            out[d + k] = dz_row[k] * eps[k] * half * sigma + half * (lv.exp() - T::one()) * inv_n;
        }
    }
    let enc = model
        .encoder
        .backward(&model.encoder_params, &enc_tape, &stats_grad, false)?;
    Ok((
        breakdown,
        VaeGradients {
            encoder: enc.params,
            decoder: dec.params,
        },
    ))
}

/// Finite-difference check of [`loss_and_gradients`] over every encoder and
/// decoder parameter, with `noise` held fixed.
pub fn check_loss_gradients<T: Real>(
    model: &VaeModel<T>,
    frames: &Tensor<T>,
    noise: &Tensor<T>,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_gradients(model, frames, noise)?;
    check_parameter_gradients(
        &model.joint_params(),
        &grads.joint(),
        |p| {
            let probe = model.with_joint_params(p)?;
            Ok(T::from_f64_lossy(total_loss(&probe, frames, noise)?.total))
        },
        config,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn latent(mu: &[f64], log_var: &[f64]) -> LatentGaussian<f64> {
        LatentGaussian {
            mu: mu.to_vec(),
            log_var: log_var.to_vec(),
        }
    }

    fn tiny_model(seed: u64) -> VaeModel<f64> {
        let arch = Architecture {
            widths: vec![2, 3],
            ..Architecture::default()
        };
        VaeModel::init(&arch, [1, 8, 8], 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl_divergence(&latent(&[0.0], &[0.0])), 0.0);
        assert_eq!(kl_divergence(&latent(&[1.0], &[0.0])), 0.5);
        let v = kl_divergence(&latent(&[0.0], &[1.0]));
        assert!((v - (std::f64::consts::E - 2.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn reparameterize_cases() {
        let l = latent(&[1.0, 2.0], &[0.0, 4f64.ln()]);
        assert_eq!(reparameterize(&l, &[0.0, 0.0]), vec![1.0, 2.0]);
        let z = reparameterize(&l, &[1.0, 1.0]);
        assert!((z[0] - 2.0).abs() < 1e-15 && (z[1] - 4.0).abs() < 1e-15);
        assert_eq!(reparameterize(&latent(&[0.0], &[0.0]), &[0.37]), vec![0.37]);
    }

    #[test]
    fn l1_cases() {
        let f = Tensor::filled(&[1, 1, 2, 2], 0.5f64);
        let g = Tensor::filled(&[1, 1, 2, 2], 0.25f64);
        assert_eq!(l1_reconstruction(&f, &f).unwrap(), 0.0);
        assert_eq!(l1_reconstruction(&f, &g).unwrap(), 1.0);
        assert_eq!(l1_reconstruction(&g, &f).unwrap(), 1.0);
        assert!(l1_reconstruction(&f, &Tensor::zeros(&[1, 1, 2, 3])).is_err());
    }

    #[test]
    fn default_architecture_shapes() {
        let (enc, dec) = Architecture::default().build([3, 64, 64], 4).unwrap();
        assert_eq!(enc.output_shape(), &[8]);
        assert_eq!(dec.output_shape(), &[3, 64, 64]);
        assert!(Architecture::default().build([1, 60, 60], 4).is_err());
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let model = tiny_model(3);
        let frame: Vec<f64> = (0..64).map(|i| (i as f64 / 64.0).sqrt()).collect();
        let mut data = frame.clone();
        data.extend(&frame);
        data.extend((0..64).map(|i| 1.0 - i as f64 / 64.0));
        let frames = Tensor::from_vec(&[3, 1, 8, 8], data).unwrap();
        let latents = model.encode(&frames).unwrap();
        assert_eq!(latents.len(), 3);
        assert!(latents.iter().all(|l| l.dim() == 2 && l.log_var.len() == 2));
        assert_eq!(latents[0], latents[1]);
        assert!(model.encode(&Tensor::zeros(&[1, 1, 4, 4])).is_err());
    }

    #[test]
    fn decode_range_and_shape() {
        let model = tiny_model(4);
        let z = Tensor::from_vec(&[2, 2], vec![30.0, -30.0, 0.1, 2.0]).unwrap();
        let out = model.decode(&z).unwrap();
        assert_eq!(out.shape(), &[2, 1, 8, 8]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(model.decode(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn loss_decomposes_exactly() {
        let model = tiny_model(5).cast::<f32>();
        let frames = Tensor::from_vec(&[2, 1, 8, 8], (0..128).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let noise = Tensor::from_vec(&[2, 2], vec![0.3, -1.2, 0.8, 0.05]).unwrap();
        let loss = total_loss(&model, &frames, &noise).unwrap();
        assert_eq!(loss.total as f32, loss.reconstruction_l1 as f32 + loss.kl as f32);
        assert!(loss.kl >= 0.0 && loss.reconstruction_l1 >= 0.0);
        let (again, _) = loss_and_gradients(&model, &frames, &noise).unwrap();
        assert_eq!(loss, again);
    }

    #[test]
    fn joint_params_round_trip() {
        let model = tiny_model(6);
        let joint = model.joint_params();
        assert!(joint.get(0).name.starts_with("encoder."));
        assert_eq!(model.with_joint_params(&joint).unwrap(), model);
    }
}

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::ConvGeometry;
use super::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Samples per gradient-reduction chunk. Partial parameter gradients are
/// accumulated per chunk and then summed in chunk order, so results do not
/// depend on the number of worker threads.
const GRAD_CHUNK: usize = 8;

/// One layer of a feed-forward network. Shapes exclude the batch axis.
///
/// Convolution weights are `[out, in, k, k]`; transposed-convolution weights
/// are `[in, out, k, k]`; dense weights are `[out, in]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    TransposedConv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    /// Output shape for `input`, or a description of why they do not compose.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = expect_chw(input)?;
                if c != in_channels {
                    return Err(format!("expects {in_channels} channels, got {c}"));
                }
                let g = ConvGeometry::new(c, h, w, kernel, stride, padding)
                    .ok_or_else(|| format!("kernel {kernel} does not fit {h}x{w}"))?;
                Ok(vec![out_channels, g.out_h, g.out_w])
            }
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = expect_chw(input)?;
                if c != in_channels {
                    return Err(format!("expects {in_channels} channels, got {c}"));
                }
                if stride == 0 || kernel == 0 {
                    return Err("stride and kernel must be positive".into());
                }
                let out = |size: usize| {
                    ((size - 1) * stride + kernel)
                        .checked_sub(2 * padding)
                        .filter(|&s| s > 0)
                };
                match (out(h), out(w)) {
                    (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                    _ => Err(format!("padding {padding} too large for {h}x{w}")),
                }
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if input != [in_features] {
                    return Err(format!("expects [{in_features}], got {input:?}"));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Reshape { ref shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(format!("cannot reshape {input:?} into {shape:?}"));
                }
                Ok(shape.clone())
            }
        }
    }

    /// `(weight shape, bias shape, fan_in + fan_out)` for layers with parameters.
    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
                (in_channels + out_channels) * kernel * kernel,
            )),
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![in_channels, out_channels, kernel, kernel],
                vec![out_channels],
                (in_channels + out_channels) * kernel * kernel,
            )),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some((
                vec![out_features, in_features],
                vec![out_features],
                in_features + out_features,
            )),
            _ => None,
        }
    }
}

fn expect_chw(shape: &[usize]) -> std::result::Result<[usize; 3], String> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(format!("expects a [C, H, W] input, got {shape:?}")),
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered parameter tensors of a [`Network`]: weight then bias for every
/// layer that has parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    entries: Vec<NamedTensor<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new(entries: Vec<NamedTensor<T>>) -> Self {
        ParameterSet { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor<T>> {
        self.entries.iter_mut()
    }

    pub fn get(&self, i: usize) -> &NamedTensor<T> {
        &self.entries[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut NamedTensor<T> {
        &mut self.entries[i]
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    tensor: Tensor::zeros(e.tensor.shape()),
                })
                .collect(),
        }
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| !e.tensor.is_finite())
            .map(|e| e.name.as_str())
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }
}

/// Intermediate activations retained by [`Network::forward`]:
/// `activations[0]` is the input and `activations[i + 1]` the output of layer `i`.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    activations: Vec<Tensor<T>>,
}

impl<T: Real> Tape<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().expect("tape holds at least the input")
    }
}

/// Gradients produced by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: ParameterSet<T>,
    pub input: Option<Tensor<T>>,
}

#[derive(Serialize, Deserialize)]
struct NetworkDesc {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

/// A validated layer list: every layer's output shape is the next layer's
/// input shape, so forward passes never fail on internal shapes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "NetworkDesc", into = "NetworkDesc")]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    /// Index of each parameterized layer's weight in the [`ParameterSet`].
    slots: Vec<Option<usize>>,
}

impl TryFrom<NetworkDesc> for Network {
    type Error = Error;

    fn try_from(desc: NetworkDesc) -> Result<Self> {
        Network::new(&desc.input_shape, desc.layers)
    }
}

impl From<Network> for NetworkDesc {
    fn from(net: Network) -> Self {
        NetworkDesc {
            input_shape: net.input_shape,
            layers: net.layers,
        }
    }
}

impl Network {
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidArchitecture(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        let mut shapes = vec![input_shape.to_vec()];
        let mut slots = Vec::with_capacity(layers.len());
        let mut next_slot = 0;
        for (i, layer) in layers.iter().enumerate() {
            let out = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|msg| Error::InvalidArchitecture(format!("layer {i} ({layer:?}): {msg}")))?;
            shapes.push(out);
            if layer.param_shapes().is_some() {
                slots.push(Some(next_slot));
                next_slot += 2;
            } else {
                slots.push(None);
            }
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            shapes,
            slots,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// `(name, shape)` of every parameter tensor in declared order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((w, b, _)) = layer.param_shapes() {
                layout.push((format!("{i}.weight"), w));
                layout.push((format!("{i}.bias"), b));
            }
        }
        layout
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet<T> {
        let mut entries = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((w, b, fans)) = layer.param_shapes() {
                let limit = (6.0 / fans as f64).sqrt();
                let n: usize = w.iter().product();
                let data = (0..n)
                    .map(|_| T::from_f64_lossy(rng.random_range(-limit..limit)))
                    .collect();
                entries.push(NamedTensor {
                    name: format!("{i}.weight"),
                    tensor: Tensor::from_vec(&w, data).unwrap(),
                });
                entries.push(NamedTensor {
                    name: format!("{i}.bias"),
                    tensor: Tensor::zeros(&b),
                });
            }
        }
        ParameterSet { entries }
    }

    /// Checks that `params` has exactly this network's parameter layout.
    pub fn check_params<T: Real>(&self, params: &ParameterSet<T>) -> Result<()> {
        let layout = self.param_layout();
        if layout.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "network has {} parameter tensors, parameter set has {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), entry) in layout.iter().zip(params.iter()) {
            if entry.tensor.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: expected {shape:?}, got {:?}",
                    entry.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_batch<T: Real>(&self, t: &Tensor<T>, expected: &[usize], what: &str) -> Result<usize> {
        let shape = t.shape();
        if shape.len() != expected.len() + 1 || &shape[1..] != expected || shape[0] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected [N, {}], got {shape:?}",
                expected
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        Ok(shape[0])
    }

    /// Forward pass without retaining intermediates.
    pub fn infer<T: Real>(&self, params: &ParameterSet<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_params(params)?;
        self.check_batch(input, &self.input_shape, "network input")?;
        let mut x = input.clone();
        for i in 0..self.layers.len() {
            x = self.layer_forward(i, params, &x);
        }
        Ok(x)
    }

    /// Forward pass retaining every activation for [`backward`](Self::backward).
    pub fn forward<T: Real>(
        &self,
        params: &ParameterSet<T>,
        input: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_params(params)?;
        self.check_batch(input, &self.input_shape, "network input")?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for i in 0..self.layers.len() {
            let next = self.layer_forward(i, params, activations.last().unwrap());
            activations.push(next);
        }
        let output = activations.last().unwrap().clone();
        Ok((output, Tape { activations }))
    }

    /// Reverse-mode pass. Parameter gradients are summed over the batch.
    /// The input gradient is only computed when `need_input_grad` is set.
    pub fn backward<T: Real>(
        &self,
        params: &ParameterSet<T>,
        tape: &Tape<T>,
        output_grad: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<Gradients<T>> {
        self.check_params(params)?;
        if tape.activations.len() != self.layers.len() + 1 {
            return Err(Error::ShapeMismatch("tape does not belong to this network".into()));
        }
        if output_grad.shape() != tape.output().shape() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} does not match output {:?}",
                output_grad.shape(),
                tape.output().shape()
            )));
        }
        let mut grads = params.zeros_like();
        let mut upstream = output_grad.clone();
        for i in (0..self.layers.len()).rev() {
            let want_dx = i > 0 || need_input_grad;
            upstream = self.layer_backward(i, params, tape, &upstream, &mut grads, want_dx);
        }
        Ok(Gradients {
            params: grads,
            input: need_input_grad.then_some(upstream),
        })
    }

    fn batch_shape(&self, layer_boundary: usize, n: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend_from_slice(&self.shapes[layer_boundary]);
        s
    }

    fn layer_forward<T: Real>(&self, i: usize, params: &ParameterSet<T>, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        let out_shape = self.batch_shape(i + 1, n);
        match self.layers[i] {
            LayerSpec::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            LayerSpec::Sigmoid => x.map(sigmoid),
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
                x.clone().reshaped(&out_shape).expect("validated reshape")
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let slot = self.slots[i].unwrap();
                let w = params.get(slot).tensor.data();
                let b = params.get(slot + 1).tensor.data();
                let mut y = Tensor::zeros(&out_shape);
                T::gemm(false, true, n, out_features, in_features, x.data(), w, T::zero(), y.data_mut());
                for row in y.data_mut().chunks_mut(out_features) {
                    for (v, &bias) in row.iter_mut().zip(b) {
                        *v = *v + bias;
                    }
                }
                y
            }
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let [c, h, w] = expect_chw(&self.shapes[i]).unwrap();
                let g = ConvGeometry::new(c, h, w, kernel, stride, padding).unwrap();
                let slot = self.slots[i].unwrap();
                let weight = params.get(slot).tensor.data();
                let bias = params.get(slot + 1).tensor.data();
                let mut y = Tensor::zeros(&out_shape);
                let spatial = g.col_cols();
                y.data_mut()
                    .par_chunks_mut(out_channels * spatial)
                    .zip(x.data().par_chunks(c * h * w))
                    .for_each_init(
                        || vec![T::zero(); g.col_rows() * spatial],
                        |col, (yo, xi)| {
                            g.im2col(xi, col);
                            T::gemm(false, false, out_channels, spatial, g.col_rows(), weight, col, T::zero(), yo);
                            add_channel_bias(yo, bias, spatial);
                        },
                    );
                y
            }
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [_, hin, win] = expect_chw(&self.shapes[i]).unwrap();
                let [_, hout, wout] = expect_chw(&self.shapes[i + 1]).unwrap();
                let g = ConvGeometry::new(out_channels, hout, wout, kernel, stride, padding).unwrap();
                debug_assert_eq!((g.out_h, g.out_w), (hin, win));
                let slot = self.slots[i].unwrap();
                let weight = params.get(slot).tensor.data();
                let bias = params.get(slot + 1).tensor.data();
                let mut y = Tensor::zeros(&out_shape);
                let spatial_in = hin * win;
                y.data_mut()
                    .par_chunks_mut(out_channels * hout * wout)
                    .zip(x.data().par_chunks(in_channels * spatial_in))
                    .for_each_init(
                        || vec![T::zero(); g.col_rows() * spatial_in],
                        |col, (yo, xi)| {
                            T::gemm(true, false, g.col_rows(), spatial_in, in_channels, weight, xi, T::zero(), col);
                            g.col2im(col, yo);
                            add_channel_bias(yo, bias, hout * wout);
                        },
                    );
                y
            }
        }
    }

    /// Propagates `dy` through layer `i`, accumulating parameter gradients,
    /// and returns the gradient with respect to the layer input (zeros when
    /// `want_dx` is false).
    fn layer_backward<T: Real>(
        &self,
        i: usize,
        params: &ParameterSet<T>,
        tape: &Tape<T>,
        dy: &Tensor<T>,
        grads: &mut ParameterSet<T>,
        want_dx: bool,
    ) -> Tensor<T> {
        let x = &tape.activations[i];
        let n = x.batch();
        match self.layers[i] {
            LayerSpec::Relu => {
                let mut dx = dy.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v <= T::zero() {
                        *g = T::zero();
                    }
                }
                dx
            }
            LayerSpec::Sigmoid => {
                let y = &tape.activations[i + 1];
                let mut dx = dy.clone();
                for (g, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                    *g = *g * s * (T::one() - s);
                }
                dx
            }
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => dy
                .clone()
                .reshaped(x.shape())
                .expect("validated reshape"),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let slot = self.slots[i].unwrap();
                let w = params.get(slot).tensor.data();
                T::gemm(
                    true,
                    false,
                    out_features,
                    in_features,
                    n,
                    dy.data(),
                    x.data(),
                    T::one(),
                    grads.get_mut(slot).tensor.data_mut(),
                );
                let db = grads.get_mut(slot + 1).tensor.data_mut();
                for row in dy.data().chunks(out_features) {
                    for (acc, &g) in db.iter_mut().zip(row) {
                        *acc = *acc + g;
                    }
                }
                let mut dx = Tensor::zeros(x.shape());
                if want_dx {
                    T::gemm(false, false, n, in_features, out_features, dy.data(), w, T::zero(), dx.data_mut());
                }
                dx
            }
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let [c, h, w] = expect_chw(&self.shapes[i]).unwrap();
                let g = ConvGeometry::new(c, h, w, kernel, stride, padding).unwrap();
                let slot = self.slots[i].unwrap();
                let weight = params.get(slot).tensor.data();
                let spatial = g.col_cols();
                let in_len = c * h * w;
                let out_len = out_channels * spatial;
                let wlen = weight.len();
                let mut dx = Tensor::zeros(x.shape());
                let partials: Vec<(Vec<T>, Vec<T>)> = dx
                    .data_mut()
                    .par_chunks_mut(GRAD_CHUNK * in_len)
                    .zip(dy.data().par_chunks(GRAD_CHUNK * out_len))
                    .zip(x.data().par_chunks(GRAD_CHUNK * in_len))
                    .map(|((dxc, dyc), xc)| {
                        let mut dw = vec![T::zero(); wlen];
                        let mut db = vec![T::zero(); out_channels];
                        let mut col = vec![T::zero(); g.col_rows() * spatial];
                        for ((dxi, dyi), xi) in dxc
                            .chunks_mut(in_len)
                            .zip(dyc.chunks(out_len))
                            .zip(xc.chunks(in_len))
                        {
                            g.im2col(xi, &mut col);
                            T::gemm(false, true, out_channels, g.col_rows(), spatial, dyi, &col, T::one(), &mut dw);
                            accumulate_channel_sums(&mut db, dyi, spatial);
                            if want_dx {
                                T::gemm(true, false, g.col_rows(), spatial, out_channels, weight, dyi, T::zero(), &mut col);
                                g.col2im(&col, dxi);
                            }
                        }
                        (dw, db)
                    })
                    .collect();
                reduce_partials(grads, slot, partials);
                dx
            }
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [_, hin, win] = expect_chw(&self.shapes[i]).unwrap();
                let [_, hout, wout] = expect_chw(&self.shapes[i + 1]).unwrap();
                let g = ConvGeometry::new(out_channels, hout, wout, kernel, stride, padding).unwrap();
                let slot = self.slots[i].unwrap();
                let weight = params.get(slot).tensor.data();
                let spatial_in = hin * win;
                let in_len = in_channels * spatial_in;
                let out_len = out_channels * hout * wout;
                let wlen = weight.len();
                let mut dx = Tensor::zeros(x.shape());
                let partials: Vec<(Vec<T>, Vec<T>)> = dx
                    .data_mut()
                    .par_chunks_mut(GRAD_CHUNK * in_len)
                    .zip(dy.data().par_chunks(GRAD_CHUNK * out_len))
                    .zip(x.data().par_chunks(GRAD_CHUNK * in_len))
                    .map(|((dxc, dyc), xc)| {
                        let mut dw = vec![T::zero(); wlen];
                        let mut db = vec![T::zero(); out_channels];
                        let mut col = vec![T::zero(); g.col_rows() * spatial_in];
                        for ((dxi, dyi), xi) in dxc
                            .chunks_mut(in_len)
                            .zip(dyc.chunks(out_len))
                            .zip(xc.chunks(in_len))
                        {
                            g.im2col(dyi, &mut col);
                            T::gemm(false, true, in_channels, g.col_rows(), spatial_in, xi, &col, T::one(), &mut dw);
                            accumulate_channel_sums(&mut db, dyi, hout * wout);
                            if want_dx {
                                T::gemm(false, false, in_channels, spatial_in, g.col_rows(), weight, &col, T::zero(), dxi);
                            }
                        }
                        (dw, db)
                    })
                    .collect();
                reduce_partials(grads, slot, partials);
                dx
            }
        }
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn add_channel_bias<T: Real>(y: &mut [T], bias: &[T], spatial: usize) {
    for (plane, &b) in y.chunks_mut(spatial).zip(bias) {
        for v in plane {
            *v = *v + b;
        }
    }
}

fn accumulate_channel_sums<T: Real>(acc: &mut [T], dy: &[T], spatial: usize) {
    for (a, plane) in acc.iter_mut().zip(dy.chunks(spatial)) {
        *a = plane.iter().fold(*a, |s, &v| s + v);
    }
}

fn reduce_partials<T: Real>(grads: &mut ParameterSet<T>, slot: usize, partials: Vec<(Vec<T>, Vec<T>)>) {
    for (dw, db) in partials {
        for (acc, v) in grads.get_mut(slot).tensor.data_mut().iter_mut().zip(dw) {
            *acc = *acc + v;
        }
        for (acc, v) in grads.get_mut(slot + 1).tensor.data_mut().iter_mut().zip(db) {
            *acc = *acc + v;
        }
    }
}

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use super::activation::{dropout, relu, relu_backward, softmax, softmax_backward, DropoutMask};
use super::conv::{conv2d_backward, conv2d_forward_cached, ConvCache, ConvSpec, Pad};
use super::dense::{fc_backward, fc_forward};
use super::pool::{pool_backward, pool_forward, PoolCache, PoolSpec};
use crate::error::{Error, Result};
use crate::gemm::TileConfig;
use crate::model::{LayerSpec, ModelConfig, Padding};
use crate::tensor::Tensor;

/// A compiled layer. Parameterised layers hold the index of their weight
/// tensor; the bias sits at the following index.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { spec: ConvSpec, param: usize },
    Relu,
    Pool(PoolSpec),
    Flatten,
    Fc { param: usize },
    Dropout { p: f64 },
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Cache {
    Conv(ConvCache),
    Relu(Tensor),
    Pool(PoolCache),
    Flatten(Vec<usize>),
    Fc(Tensor),
    Dropout(DropoutMask),
    Softmax(Tensor),
}

/// Per-layer forward state kept for backpropagation. Empty in eval mode.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    caches: Vec<Option<Cache>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    input: [usize; 3],
    /// Per-sample output shape after each layer.
    shapes: Vec<Vec<usize>>,
    param_shapes: Vec<Vec<usize>>,
    gemm: TileConfig,
}

fn same_padding(len: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(len);
    (total / 2, total - total / 2)
}

impl Network {
    /// Validates the layer chain statically and lays out parameter shapes.
    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        let [c, h, w] = config.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::DegenerateShape(config.input.to_vec()));
        }
        let mut shape = config.input.to_vec();
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut shapes = Vec::with_capacity(config.layers.len());
        let mut param_shapes = Vec::new();
        for (i, spec) in config.layers.iter().enumerate() {
            let at = |msg: String| Error::Geometry(format!("layer {i} ({spec:?}): {msg}"));
            let layer = match spec {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let [ch, h, w] = shape[..] else {
                        return Err(at(format!("convolution needs a C×H×W input, got {shape:?}")));
                    };
                    let pad = match padding {
                        Padding::Same => {
                            let (top, bottom) = same_padding(h, kernel[0], *stride);
                            let (left, right) = same_padding(w, kernel[1], *stride);
                            Pad { top, bottom, left, right }
                        }
                        Padding::Valid => Pad::default(),
                        Padding::Explicit(p) => *p,
                    };
                    let conv = ConvSpec::with_pad(*filters, (kernel[0], kernel[1]), *stride, pad)?;
                    let (oh, ow) = conv.output_hw(h, w).map_err(|e| at(e.to_string()))?;
                    let param = param_shapes.len();
                    param_shapes.push(vec![*filters, ch, kernel[0], kernel[1]]);
                    param_shapes.push(vec![*filters]);
                    shape = vec![*filters, oh, ow];
                    Layer::Conv { spec: conv, param }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Pool { window, stride, mode } => {
                    let [ch, h, w] = shape[..] else {
                        return Err(at(format!("pooling needs a C×H×W input, got {shape:?}")));
                    };
                    let pool = PoolSpec {
                        window: (window[0], window[1]),
                        stride: *stride,
                        mode: *mode,
                    };
                    let (oh, ow) = pool.output_hw(h, w).map_err(|e| at(e.to_string()))?;
                    shape = vec![ch, oh, ow];
                    Layer::Pool(pool)
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
                LayerSpec::Fc { units } => {
                    let [d_in] = shape[..] else {
                        return Err(at(format!("dense layer needs a flat input, got {shape:?}; add a flatten")));
                    };
                    if *units == 0 {
                        return Err(at("dense layer needs at least one unit".into()));
                    }
                    let param = param_shapes.len();
                    param_shapes.push(vec![d_in, *units]);
                    param_shapes.push(vec![*units]);
                    shape = vec![*units];
                    Layer::Fc { param }
                }
                LayerSpec::Dropout { p } => {
                    if !(0.0..1.0).contains(p) {
                        return Err(at(format!("dropout probability {p} outside [0, 1)")));
                    }
                    Layer::Dropout { p: *p }
                }
                LayerSpec::Softmax => {
                    if shape.len() != 1 || shape[0] < 2 {
                        return Err(at(format!("softmax needs a flat input of width ≥ 2, got {shape:?}")));
                    }
                    Layer::Softmax
                }
            };
            layers.push(layer);
            shapes.push(shape.clone());
        }
        Ok(Network {
            layers,
            input: config.input,
            shapes,
            param_shapes,
            gemm: TileConfig::default(),
        })
    }

    pub fn with_gemm(mut self, cfg: TileConfig) -> Self {
        self.gemm = cfg;
        self
    }

    pub fn gemm(&self) -> TileConfig {
        self.gemm
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    /// Per-sample output shape of the whole network.
    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map(Vec::as_slice).unwrap_or(&self.input)
    }

    /// Per-sample shape after each layer.
    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.param_shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Zero-mean Gaussian weights with std `sqrt(2/fan_in)`, or `sqrt(1/fan_in)`
    /// for the final dense layer; zero biases.
    pub fn init_params(&self, rng: &mut dyn RngCore) -> Result<Vec<Tensor>> {
        let last_fc = self
            .layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Fc { param } => Some(*param),
                _ => None,
            });
        let mut params = Vec::with_capacity(self.param_shapes.len());
        for (idx, shape) in self.param_shapes.iter().enumerate() {
            if idx % 2 == 1 {
                params.push(Tensor::zeros(shape)?);
                continue;
            }
            let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
            let gain = if Some(idx) == last_fc { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt())
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            params.push(Tensor::from_fn(shape, |_| normal.sample(rng))?);
        }
        Ok(params)
    }

    fn check_params(&self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.param_shapes.len()
            || params.iter().zip(&self.param_shapes).any(|(p, s)| p.shape() != s.as_slice())
        {
            return Err(Error::DimensionMismatch(format!(
                "parameter shapes {:?} do not match the network ({:?})",
                params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>(),
                self.param_shapes
            )));
        }
        Ok(())
    }

    /// Runs the stack on an N×C×H×W batch. In training mode the returned
    /// trace holds everything `backward` needs; dropout draws from `rng`.
    pub fn forward(&self, params: &[Tensor], x: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<(Tensor, Trace)> {
        self.check_params(params)?;
        if x.ndim() != 4 || x.shape()[1..] != self.input {
            return Err(Error::DimensionMismatch(format!(
                "input batch has shape {:?}, expected N×{:?}",
                x.shape(),
                self.input
            )));
        }
        let training = mode == Mode::Train;
        let gemm = self.gemm;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Conv { spec, param } => {
                    let (y, c) = conv2d_forward_cached(&act, &params[*param], &params[param + 1], spec, gemm)?;
                    (y, Cache::Conv(c))
                }
                Layer::Relu => {
                    let y = relu(&act);
                    (y.clone(), Cache::Relu(y))
                }
                Layer::Pool(spec) => {
                    let (y, c) = pool_forward(&act, spec)?;
                    (y, Cache::Pool(c))
                }
                Layer::Flatten => {
                    let n = act.shape()[0];
                    let in_shape = act.shape().to_vec();
                    let d = act.len() / n;
                    (act.reshape(&[n, d])?, Cache::Flatten(in_shape))
                }
                Layer::Fc { param } => {
                    let y = fc_forward(&act, &params[*param], &params[param + 1], gemm)?;
                    (y, Cache::Fc(act))
                }
                Layer::Dropout { p } => {
                    let (y, mask) = dropout(&act, *p, rng, training)?;
                    (y, Cache::Dropout(mask))
                }
                Layer::Softmax => {
                    let y = softmax(&act)?;
                    (y.clone(), Cache::Softmax(y))
                }
            };
            caches.push(training.then_some(cache));
            act = next;
        }
        Ok((act, Trace { caches }))
    }

    /// Gradients of every parameter given dL/d(network output).
    pub fn backward(&self, params: &[Tensor], trace: &Trace, d_output: &Tensor) -> Result<Vec<Tensor>> {
        self.backward_through(params, trace, d_output, self.layers.len())
    }

    /// Gradients given dL/d(logits), skipping the final softmax. Pair with
    /// [`crate::nn::softmax_cross_entropy_grad`] for the fused loss gradient.
    pub fn backward_from_logits(&self, params: &[Tensor], trace: &Trace, d_logits: &Tensor) -> Result<Vec<Tensor>> {
        match self.layers.last() {
            Some(Layer::Softmax) => self.backward_through(params, trace, d_logits, self.layers.len() - 1),
            _ => Err(Error::InvalidConfig("network does not end in softmax".into())),
        }
    }

    fn backward_through(&self, params: &[Tensor], trace: &Trace, upstream: &Tensor, end: usize) -> Result<Vec<Tensor>> {
        self.check_params(params)?;
        if trace.caches.len() != self.layers.len() {
            return Err(Error::MissingCache { layer: trace.caches.len() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; params.len()];
        let first_param_layer = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Conv { .. } | Layer::Fc { .. }))
            .unwrap_or(0);
        let gemm = self.gemm;
        let mut g = upstream.clone();
        for idx in (0..end).rev() {
            let cache = trace.caches[idx].as_ref().ok_or(Error::MissingCache { layer: idx })?;
            let need_input = idx > first_param_layer;
            g = match (&self.layers[idx], cache) {
                (Layer::Conv { spec, param }, Cache::Conv(c)) => {
                    let r = conv2d_backward(c, &params[*param], spec, &g, need_input, gemm)?;
                    grads[*param] = Some(r.d_weights);
                    grads[param + 1] = Some(r.d_bias);
                    match r.d_input {
                        Some(d) => d,
                        None => break,
                    }
                }
                (Layer::Relu, Cache::Relu(y)) => relu_backward(y, &g)?,
                (Layer::Pool(_), Cache::Pool(c)) => pool_backward(c, &g)?,
                (Layer::Flatten, Cache::Flatten(shape)) => g.reshape(shape)?,
                (Layer::Fc { param }, Cache::Fc(x)) => {
                    let r = fc_backward(x, &params[*param], &g, need_input, gemm)?;
                    grads[*param] = Some(r.d_weights);
                    grads[param + 1] = Some(r.d_bias);
                    match r.d_input {
                        Some(d) => d,
                        None => break,
                    }
                }
                (Layer::Dropout { .. }, Cache::Dropout(mask)) => mask.apply(&g)?,
                (Layer::Softmax, Cache::Softmax(p)) => softmax_backward(p, &g)?,
                _ => return Err(Error::MissingCache { layer: idx }),
            };
        }
        grads
            .into_iter()
            .zip(&self.param_shapes)
            .map(|(g, s)| g.map_or_else(|| Tensor::zeros(s), Ok))
            .collect()
    }
}

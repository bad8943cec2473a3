//! The 9-layer deringing network: conv+ReLU, seven conv+BN+ReLU blocks and a
//! final conv+BN+tanh, with two additive skip connections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp;
use crate::error::{Error, Result};
use crate::synthetics::Gather;
use crate::tensor_core::{
    activation_backward, activation_forward, batchnorm_backward, batchnorm_forward,
    batchnorm_infer, conv2d_backward, conv2d_forward, Activation, BatchNormParams, BnCache,
    ConvParams, Mode, Param, Tensor4,
};

pub const NUM_LAYERS: usize = 9;
pub const FEATURE_MAPS: usize = 32;
pub const KERNEL_SIZE: usize = 3;
/// Initial gamma of the output layer's batch normalization. In train mode it
/// pins the batch standard deviation of the pre-tanh output, and max-abs
/// normalized labels are sparse with an RMS near 0.1.
pub const OUTPUT_GAMMA_INIT: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub batch_norm: bool,
    pub activation: Activation,
}

/// Adds the output of layer `source` to the input of layer `destination`
/// (1-based layer numbers).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Skip {
    pub source: usize,
    pub destination: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub kernel: usize,
    pub skips: Vec<Skip>,
}

impl ModelSpec {
    /// Layer 1 conv+ReLU (1 -> 32), layers 2-8 conv+BN+ReLU (32 -> 32),
    /// layer 9 conv+BN+tanh (32 -> 1); skips 1 -> 5 and 5 -> 9.
    pub fn deringing() -> Self {
        let mut layers = Vec::with_capacity(NUM_LAYERS);
        layers.push(LayerSpec {
            c_in: 1,
            c_out: FEATURE_MAPS,
            batch_norm: false,
            activation: Activation::Relu,
        });
        for _ in 2..NUM_LAYERS {
            layers.push(LayerSpec {
                c_in: FEATURE_MAPS,
                c_out: FEATURE_MAPS,
                batch_norm: true,
                activation: Activation::Relu,
            });
        }
        layers.push(LayerSpec {
            c_in: FEATURE_MAPS,
            c_out: 1,
            batch_norm: true,
            activation: Activation::Tanh,
        });
        Self {
            layers,
            kernel: KERNEL_SIZE,
            skips: vec![
                Skip {
                    source: 1,
                    destination: 5,
                },
                Skip {
                    source: 5,
                    destination: 9,
                },
            ],
        }
    }

    pub fn without_skips(&self) -> Self {
        Self {
            skips: Vec::new(),
            ..self.clone()
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Side length of the square region of input that influences one output sample.
    pub fn receptive_field(&self) -> usize {
        1 + self.layers.len() * (self.kernel - 1)
    }

    /// Structural consistency: channel chaining, odd kernel, skip compatibility.
    pub fn validate(&self) -> Result<()> {
        let arch = |reason: String| Error::IncompatibleArchitecture { reason };
        if self.layers.is_empty() {
            return Err(arch("no layers".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::EvenKernel {
                kh: self.kernel,
                kw: self.kernel,
            });
        }
        if self.layers[0].c_in != 1 || self.layers.last().map(|l| l.c_out) != Some(1) {
            return Err(arch("network must map 1 channel to 1 channel".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].c_out != pair[1].c_in {
                return Err(arch(format!(
                    "layer {} outputs {} channels but layer {} expects {}",
                    i + 1,
                    pair[0].c_out,
                    i + 2,
                    pair[1].c_in
                )));
            }
        }
        for s in &self.skips {
            if s.source == 0 || s.source >= s.destination || s.destination > self.layers.len() {
                return Err(arch(format!(
                    "invalid skip {} -> {}",
                    s.source, s.destination
                )));
            }
            if self.layers[s.source - 1].c_out != self.layers[s.destination - 1].c_in {
                return Err(arch(format!(
                    "skip {} -> {} joins {} channels into {}",
                    s.source,
                    s.destination,
                    self.layers[s.source - 1].c_out,
                    self.layers[s.destination - 1].c_in
                )));
            }
        }
        Ok(())
    }

    /// Checks the fixed deringing architecture on top of [`ModelSpec::validate`].
    pub fn audit(&self) -> Result<()> {
        self.validate()?;
        let fail = |reason: &str| {
            Err(Error::IncompatibleArchitecture {
                reason: reason.to_string(),
            })
        };
        if self.layers.len() != NUM_LAYERS {
            return fail("expected 9 layers");
        }
        if self.layers[0].batch_norm {
            return fail("first layer must not use batch normalization");
        }
        if self.layers.iter().filter(|l| l.batch_norm).count() != NUM_LAYERS - 1 {
            return fail("layers 2-9 must use batch normalization");
        }
        let (last, hidden) = self.layers.split_last().expect("non-empty");
        if last.activation != Activation::Tanh
            || hidden.iter().any(|l| l.activation != Activation::Relu)
        {
            return fail("activations must be ReLU on layers 1-8 and tanh on layer 9");
        }
        if hidden.iter().any(|l| l.c_out != FEATURE_MAPS) {
            return fail("hidden layers must have 32 feature maps");
        }
        if self.skips.len() != 2 {
            return fail("expected exactly 2 skip connections");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub conv: ConvParams,
    pub bn: Option<BatchNormParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// Kernels ~ N(0, 1/fan_in), zero biases, beta 0, gamma 1 except
    /// [`OUTPUT_GAMMA_INIT`] on the last layer.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = spec.kernel;
        let mut layers = spec
            .layers
            .iter()
            .map(|l| {
                let mut conv = ConvParams::new(l.c_out, l.c_in, k, k)?;
                let std = 1.0 / ((l.c_in * k * k) as f64).sqrt();
                for w in conv.kernels.value.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *w = (z * std) as f32;
                }
                let bn = l.batch_norm.then(|| BatchNormParams::new(l.c_out));
                Ok(LayerParams { conv, bn })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(bn) = layers.last_mut().and_then(|l| l.bn.as_mut()) {
            bn.gamma.value.fill(OUTPUT_GAMMA_INIT);
        }
        Ok(Self { layers })
    }

    /// Learnable arrays in a fixed order: per layer kernels, biases, then gamma, beta.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.conv.kernels);
            out.push(&mut l.conv.biases);
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.conv.kernels);
            out.push(&l.conv.biases);
            if let Some(bn) = &l.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn num_learnable(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            let conv_ok = l
                .conv
                .kernels
                .value
                .iter()
                .chain(&l.conv.biases.value)
                .all(|v| v.is_finite());
            let bn_ok = l.bn.as_ref().is_none_or(|b| {
                b.gamma
                    .value
                    .iter()
                    .chain(&b.beta.value)
                    .chain(&b.running_mean)
                    .chain(&b.running_var)
                    .all(|v| v.is_finite())
            });
            conv_ok && bn_ok
        })
    }

    /// Checks that the parameter shapes realize `spec`.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let fail = |reason: String| Err(Error::IncompatibleArchitecture { reason });
        if self.layers.len() != spec.layers.len() {
            return fail(format!(
                "{} layers in parameters, {} in architecture",
                self.layers.len(),
                spec.layers.len()
            ));
        }
        for (i, (p, s)) in self.layers.iter().zip(&spec.layers).enumerate() {
            let c = &p.conv;
            if c.c_in != s.c_in || c.c_out != s.c_out || c.kh != spec.kernel || c.kw != spec.kernel
            {
                return fail(format!("layer {} convolution shape differs", i + 1));
            }
            match (&p.bn, s.batch_norm) {
                (Some(bn), true) if bn.channels() == s.c_out => {}
                (None, false) => {}
                _ => return fail(format!("layer {} batch normalization differs", i + 1)),
            }
        }
        Ok(())
    }
}

pub fn build_model(seed: u64) -> Result<Network> {
    let spec = ModelSpec::deringing();
    let params = ModelParams::init(&spec, seed)?;
    Network::new(spec, params)
}

struct LayerCache {
    input: Tensor4,
    bn: Option<BnCache>,
    pre_activation: Tensor4,
}

/// Per-layer values retained by a train-mode forward pass.
pub struct ForwardCache {
    id: u64,
    layers: Vec<LayerCache>,
}

/// Gradients produced by [`Network::backward_traced`].
pub struct BackwardTrace {
    pub input_grad: Tensor4,
    /// Gradient with respect to each layer's activation output.
    pub output_grads: Vec<Tensor4>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: ModelSpec,
    pub params: ModelParams,
    forward_count: u64,
    // id of the train-mode forward whose cache may still be consumed
    pending: Option<u64>,
}

impl Network {
    pub fn new(spec: ModelSpec, params: ModelParams) -> Result<Self> {
        spec.validate()?;
        params.check_against(&spec)?;
        Ok(Self {
            spec,
            params,
            forward_count: 0,
            pending: None,
        })
    }

    fn check_input(&self, input: &Tensor4) -> Result<()> {
        if input.dims().c != 1 {
            return Err(Error::shape("model input", input.dims(), "(n, 1, h, w)"));
        }
        Ok(())
    }

    fn layer_input(
        &self,
        layer: usize,
        prev: Tensor4,
        outputs: &[Option<Tensor4>],
    ) -> Result<Tensor4> {
        let mut x = prev;
        for s in self
            .spec
            .skips
            .iter()
            .filter(|s| s.destination == layer + 1)
        {
            let src = outputs[s.source - 1]
                .as_ref()
                .expect("skip source computed earlier");
            x.add_assign(src)?;
        }
        Ok(x)
    }

    fn is_skip_source(&self, layer: usize) -> bool {
        self.spec.skips.iter().any(|s| s.source == layer + 1)
    }

    /// Train mode uses batch statistics, updates BN running statistics and
    /// returns a cache for [`Network::backward`].
    pub fn forward(
        &mut self,
        input: &Tensor4,
        mode: Mode,
    ) -> Result<(Tensor4, Option<ForwardCache>)> {
        match mode {
            Mode::Infer => Ok((self.infer(input)?, None)),
            Mode::Train => {
                let (y, c) = self.forward_train(input)?;
                Ok((y, Some(c)))
            }
        }
    }

    pub fn forward_train(&mut self, input: &Tensor4) -> Result<(Tensor4, ForwardCache)> {
        self.check_input(input)?;
        let n = self.spec.layers.len();
        let mut outputs: Vec<Option<Tensor4>> = vec![None; n];
        let mut caches = Vec::with_capacity(n);
        let mut x = input.clone();
        for l in 0..n {
            let layer_in = self.layer_input(l, x, &outputs)?;
            let act = self.spec.layers[l].activation;
            let lp = &mut self.params.layers[l];
            let z = conv2d_forward(&layer_in, &lp.conv)?;
            let (pre, bn) = match &mut lp.bn {
                Some(bn) => batchnorm_forward(&z, bn, Mode::Train)?,
                None => (z, None),
            };
            let out = activation_forward(&pre, act);
            finite(&out, || format!("layer {} output", l + 1))?;
            if self.is_skip_source(l) {
                outputs[l] = Some(out.clone());
            }
            caches.push(LayerCache {
                input: layer_in,
                bn,
                pre_activation: pre,
            });
            x = out;
        }
        self.forward_count += 1;
        let id = self.forward_count;
        self.pending = Some(id);
        Ok((x, ForwardCache { id, layers: caches }))
    }

    /// Inference with running BN statistics; does not touch the parameters.
    pub fn infer(&self, input: &Tensor4) -> Result<Tensor4> {
        self.check_input(input)?;
        let n = self.spec.layers.len();
        let mut outputs: Vec<Option<Tensor4>> = vec![None; n];
        let mut x = input.clone();
        for l in 0..n {
            let layer_in = self.layer_input(l, x, &outputs)?;
            let lp = &self.params.layers[l];
            let z = conv2d_forward(&layer_in, &lp.conv)?;
            drop(layer_in);
            let pre = match &lp.bn {
                Some(bn) => batchnorm_infer(&z, bn)?,
                None => z,
            };
            let out = activation_forward(&pre, self.spec.layers[l].activation);
            finite(&out, || format!("layer {} output", l + 1))?;
            if self.is_skip_source(l) {
                outputs[l] = Some(out.clone());
            }
            x = out;
        }
        Ok(x)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: ForwardCache, loss_grad: &Tensor4) -> Result<Tensor4> {
        Ok(self.backward_impl(cache, loss_grad, false)?.input_grad)
    }

    /// Like [`Network::backward`] but also returns every layer's output gradient.
    pub fn backward_traced(
        &mut self,
        cache: ForwardCache,
        loss_grad: &Tensor4,
    ) -> Result<BackwardTrace> {
        self.backward_impl(cache, loss_grad, true)
    }

    fn backward_impl(
        &mut self,
        cache: ForwardCache,
        loss_grad: &Tensor4,
        keep: bool,
    ) -> Result<BackwardTrace> {
        let n = self.spec.layers.len();
        if self.pending != Some(cache.id) || cache.layers.len() != n {
            return Err(Error::MissingCache {
                layer: "model (stale cache)".into(),
            });
        }
        self.pending = None;
        let mut grads: Vec<Option<Tensor4>> = vec![None; n];
        grads[n - 1] = Some(loss_grad.clone());
        let mut kept = vec![None; n];
        let mut input_grad = None;
        for (l, lc) in cache.layers.into_iter().enumerate().rev() {
            let g_out = grads[l].take().ok_or_else(|| Error::MissingCache {
                layer: format!("layer {} received no gradient", l + 1),
            })?;
            let g_pre =
                activation_backward(&lc.pre_activation, self.spec.layers[l].activation, &g_out)?;
            if keep {
                kept[l] = Some(g_out);
            }
            let lp = &mut self.params.layers[l];
            let g_z = match (&mut lp.bn, &lc.bn) {
                (Some(bn), Some(bc)) => batchnorm_backward(bc, bn, &g_pre)?,
                (Some(_), None) => {
                    return Err(Error::MissingCache {
                        layer: format!("batchnorm of layer {}", l + 1),
                    })
                }
                _ => g_pre,
            };
            let g_in = conv2d_backward(&lc.input, &mut lp.conv, &g_z)?;
            finite(&g_in, || format!("layer {} input gradient", l + 1))?;
            for s in self.spec.skips.iter().filter(|s| s.destination == l + 1) {
                accumulate(&mut grads[s.source - 1], &g_in)?;
            }
            if l == 0 {
                input_grad = Some(g_in);
            } else {
                accumulate(&mut grads[l - 1], &g_in)?;
            }
        }
        Ok(BackwardTrace {
            input_grad: input_grad.expect("at least one layer"),
            output_grads: kept.into_iter().flatten().collect(),
        })
    }

    /// Whole-gather inference: max-abs normalize, one fully convolutional
    /// forward pass, rescale. All-zero gathers are returned unchanged.
    pub fn predict_gather(&self, gather: &Gather) -> Result<Gather> {
        let rf = self.spec.receptive_field();
        if gather.n_t() < rf || gather.n_x() < rf {
            return Err(Error::GatherTooSmall {
                n_t: gather.n_t(),
                n_x: gather.n_x(),
                need_t: rf,
                need_x: rf,
            });
        }
        let (normed, scale) = dsp::normalize_gather(gather);
        if scale == 0.0 {
            return Ok(gather.clone());
        }
        let y = self.infer(&normed.to_tensor())?;
        let out = Gather::from_tensor(&y, gather.dt, gather.dx)?;
        Ok(dsp::denormalize_gather(&out, scale))
    }
}

fn finite(t: &Tensor4, location: impl FnOnce() -> String) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            location: location(),
        })
    }
}

fn accumulate(slot: &mut Option<Tensor4>, g: &Tensor4) -> Result<()> {
    match slot {
        Some(t) => t.add_assign(g),
        None => {
            *slot = Some(g.clone());
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::reference::{self, Arr};
    use crate::tensor_core::testutil::random_tensor;
    use crate::tensor_core::{mse_loss, Dims, Mode, DEFAULT_BN_EPS};

    fn small_net(seed: u64) -> Network {
        build_model(seed).unwrap()
    }

    #[test]
    fn parameter_count() {
        // conv 1->32; seven conv 32->32 with BN; conv 32->1 with BN
        let first = 9 + 32 * 9 + 32 - 9;
        let hidden = 7 * (32 * 32 * 9 + 32 + 2 * 32);
        let last = 32 * 9 + 1 + 2;
        assert_eq!(first + hidden + last, 65795);
        assert_eq!(small_net(0).params.num_learnable(), 65795);
    }

    #[test]
    fn architecture_audit() {
        let spec = ModelSpec::deringing();
        spec.audit().unwrap();
        assert!(!spec.layers[0].batch_norm);
        assert!(spec.layers[1..].iter().all(|l| l.batch_norm));
        assert_eq!(spec.receptive_field(), 19);
        let mut bad = spec.clone();
        bad.layers[0].batch_norm = true;
        assert!(bad.audit().is_err());
        assert!(spec.without_skips().audit().is_err());
        let mut bad = spec.clone();
        bad.skips[0].destination = 1;
        assert!(bad.validate().is_err());
        let mut bad = spec;
        bad.kernel = 4;
        assert!(matches!(bad.validate(), Err(Error::EvenKernel { .. })));
    }

    #[test]
    fn initial_batch_norm_parameters() {
        let p = small_net(0).params;
        for (i, l) in p.layers.iter().enumerate().skip(1) {
            let bn = l.bn.as_ref().unwrap();
            let gamma = if i == 8 { OUTPUT_GAMMA_INIT } else { 1.0 };
            assert!(bn.gamma.value.iter().all(|&g| g == gamma));
            assert!(bn.beta.value.iter().all(|&b| b == 0.0));
        }
        assert!(p
            .layers
            .iter()
            .all(|l| l.conv.biases.value.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn seed_determinism() {
        assert_eq!(small_net(7).params, small_net(7).params);
        assert_ne!(small_net(7).params, small_net(8).params);
    }

    #[test]
    fn train_forward_matches_reference() {
        let mut net = small_net(3);
        let x = random_tensor(Dims::new(2, 1, 12, 10), 11);
        let (y, _) = net.forward_train(&x).unwrap();
        let params: Vec<Vec<f64>> = net
            .params
            .params()
            .iter()
            .map(|p| p.value.iter().map(|&v| v as f64).collect())
            .collect();
        let xr = Arr::new(x.dims(), x.data().iter().map(|&v| v as f64).collect());
        let yr = reference::model_forward(&net.spec, &params, &xr, DEFAULT_BN_EPS as f64);
        for (a, b) in y.data().iter().zip(&yr.data) {
            assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert!(y.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn skips_change_the_output() {
        let net = small_net(4);
        let plain = Network::new(net.spec.without_skips(), net.params.clone()).unwrap();
        let x = random_tensor(Dims::new(1, 1, 20, 20), 5);
        let a = net.infer(&x).unwrap();
        let b = plain.infer(&x).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .any(|(p, q)| (p - q).abs() > 1e-4));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let mut net = small_net(5);
        let x = random_tensor(Dims::new(2, 1, 10, 10), 6);
        let (y, cache) = net.forward_train(&x).unwrap();
        let g = net.backward(cache, &Tensor4::zeros(y.dims())).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(net
            .params
            .params()
            .iter()
            .all(|p| p.grad.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn traced_backward_gradients() {
        let mut net = small_net(6);
        let x = random_tensor(Dims::new(2, 1, 10, 10), 7);
        let label = random_tensor(x.dims(), 8);
        let (y, cache) = net.forward_train(&x).unwrap();
        let (_, g) = mse_loss(&y, &label).unwrap();
        let trace = net.backward_traced(cache, &g).unwrap();
        assert_eq!(trace.output_grads.len(), 9);
        assert_eq!(trace.output_grads[8], g);
        assert_eq!(trace.input_grad.dims(), x.dims());
    }

    #[test]
    fn skip_source_gradient_is_sum_of_both_paths() {
        // toy net: 1 -> 2 (relu) -> 2 (relu) -> 1 (tanh), skip from layer 1 into layer 3
        let relu = |c_in, c_out| LayerSpec {
            c_in,
            c_out,
            batch_norm: false,
            activation: Activation::Relu,
        };
        let spec = ModelSpec {
            layers: vec![
                relu(1, 2),
                relu(2, 2),
                LayerSpec {
                    activation: Activation::Tanh,
                    ..relu(2, 1)
                },
            ],
            kernel: 3,
            skips: vec![Skip {
                source: 1,
                destination: 3,
            }],
        };
        let params = ModelParams::init(&spec, 21).unwrap();
        let mut net = Network::new(spec, params.clone()).unwrap();
        let x = random_tensor(Dims::new(2, 1, 6, 5), 22);
        let (y, cache) = net.forward_train(&x).unwrap();
        let g = random_tensor(y.dims(), 23);
        let trace = net.backward_traced(cache, &g).unwrap();

        // hand-assembled forward and backward with the raw layer functions
        let mut p = params;
        let out1 = activation_forward(
            &conv2d_forward(&x, &p.layers[0].conv).unwrap(),
            Activation::Relu,
        );
        let pre2 = conv2d_forward(&out1, &p.layers[1].conv).unwrap();
        let out2 = activation_forward(&pre2, Activation::Relu);
        let in3 = out2.add(&out1).unwrap();
        let pre3 = conv2d_forward(&in3, &p.layers[2].conv).unwrap();
        let g_pre3 = activation_backward(&pre3, Activation::Tanh, &g).unwrap();
        let g_in3 = conv2d_backward(&in3, &mut p.layers[2].conv, &g_pre3).unwrap();
        let g_pre2 = activation_backward(&pre2, Activation::Relu, &g_in3).unwrap();
        let direct = conv2d_backward(&out1, &mut p.layers[1].conv, &g_pre2).unwrap();
        let expected = direct.add(&g_in3).unwrap();
        for (a, b) in trace.output_grads[0].data().iter().zip(expected.data()) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
        assert!(g_in3.max_abs() > 0.0 && direct.max_abs() > 0.0);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut net = small_net(1);
        let x = random_tensor(Dims::new(2, 1, 6, 6), 2);
        let (_, c1) = net.forward_train(&x).unwrap();
        let (y, c2) = net.forward_train(&x).unwrap();
        let g = Tensor4::zeros(y.dims());
        assert!(matches!(
            net.backward(c1, &g),
            Err(Error::MissingCache { .. })
        ));
        net.backward(c2, &g).unwrap();
    }

    #[test]
    fn inference_is_local_to_receptive_field() {
        let net = small_net(12);
        let mut x = random_tensor(Dims::new(1, 1, 40, 40), 13);
        let a = net.infer(&x).unwrap();
        let (y0, x0) = (20, 20);
        let i = x.index(0, 0, y0, x0);
        x.data_mut()[i] += 1.0;
        let b = net.infer(&x).unwrap();
        let half = (net.spec.receptive_field() / 2) as isize;
        for y in 0..40 {
            for xx in 0..40 {
                let far = (y as isize - y0 as isize).abs() > half
                    || (xx as isize - x0 as isize).abs() > half;
                if far {
                    assert_eq!(a.at(0, 0, y, xx), b.at(0, 0, y, xx), "({y},{xx})");
                }
            }
        }
        assert_ne!(a.at(0, 0, y0, x0), b.at(0, 0, y0, x0));
    }

    fn test_gather(n_t: usize, n_x: usize, seed: u64) -> Gather {
        let t = random_tensor(Dims::new(1, 1, n_t, n_x), seed);
        Gather::from_tensor(&t, 0.002, 3.125).unwrap()
    }

    #[test]
    fn predict_gather_scale_equivariant() {
        let net = small_net(2);
        let g = test_gather(24, 30, 3);
        let base = net.predict_gather(&g).unwrap();
        let scaled = net.predict_gather(&g.map(|v| v * 4.0).unwrap()).unwrap();
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert_eq!(a * 4.0, *b);
        }
        let scaled = net.predict_gather(&g.map(|v| v * 3.0).unwrap()).unwrap();
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert!((a * 3.0 - b).abs() <= 1e-5 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn predict_gather_edge_cases() {
        let net = small_net(2);
        let zero = Gather::zeros(30, 30, 0.002, 3.125).unwrap();
        assert_eq!(net.predict_gather(&zero).unwrap(), zero);
        assert!(matches!(
            net.predict_gather(&test_gather(18, 40, 1)),
            Err(Error::GatherTooSmall { .. })
        ));
        assert!(matches!(
            net.predict_gather(&test_gather(40, 18, 1)),
            Err(Error::GatherTooSmall { .. })
        ));
        let out = net.predict_gather(&test_gather(19, 19, 1)).unwrap();
        assert_eq!((out.n_t(), out.n_x()), (19, 19));
    }

    #[test]
    fn non_finite_weights_are_reported_by_layer() {
        let mut net = small_net(2);
        net.params.layers[2].conv.kernels.value[0] = f32::NAN;
        let x = random_tensor(Dims::new(2, 1, 8, 8), 1);
        match net.infer(&x) {
            Err(Error::NonFinite { location }) => assert_eq!(location, "layer 3 output"),
            other => panic!("{other:?}"),
        }
        match net.forward_train(&x) {
            Err(Error::NonFinite { location }) => assert_eq!(location, "layer 3 output"),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
        assert!(!net.params.is_finite());
    }

    #[test]
    fn inference_leaves_state_untouched_training_updates_running_stats() {
        let mut net = small_net(2);
        let before = net.params.clone();
        let x = random_tensor(Dims::new(2, 1, 8, 8), 1);
        net.infer(&x).unwrap();
        assert_eq!(net.params, before);
        net.forward(&x, Mode::Train).unwrap();
        let bn = net.params.layers[1].bn.as_ref().unwrap();
        assert_ne!(
            bn.running_mean,
            before.layers[1].bn.as_ref().unwrap().running_mean
        );
        assert!(net.forward(&x, Mode::Infer).unwrap().1.is_none());
    }
}

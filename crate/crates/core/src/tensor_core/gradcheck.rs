//! Central finite-difference verification of the analytic gradients.
//!
//! Each check builds a scalar objective `L = sum r_i y_i` (`r` fixed random
//! weights) and compares the single-precision production backward pass with
//! central differences of an independent double-precision reference forward
//! pass evaluated at the same parameter values. Differencing the f32 forward
//! itself would be dominated by rounding noise at a 1e-3 step. The f32
//! forward output is compared with the reference as its own group.
//!
//! The per-entry relative error is `|a - n| / max(|a|, |n|, floor)` where
//! `floor = FLOOR_FRACTION * max |n|` over the whole check, so entries whose
//! true gradient vanishes (conv biases feeding batch normalization) are judged
//! against the module's gradient scale.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::activation::{activation_backward, activation_forward, Activation};
use super::batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormParams, Mode};
use super::conv::{conv2d_backward, conv2d_forward, ConvParams};
use super::loss::mse_loss;
use super::reference::{self, Arr};
use super::tensor::{Dims, Tensor4};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelSpec, Network};

pub const DEFAULT_STEP: f64 = 1e-3;
/// A 1e-3 step moves some of the model's ReLU inputs across zero and the
/// difference quotient then measures the kink, not the derivative.
pub const MODEL_STEP: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-3;
pub const MODEL_TOLERANCE: f64 = 1e-2;
pub const FLOOR_FRACTION: f64 = 1e-3;
const MAX_ENTRIES_PER_GROUP: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Conv,
    BatchNorm,
    /// Batch normalization with gamma = 0 (degenerate scale).
    BatchNormZeroGamma,
    Relu,
    Tanh,
    Mse,
    Model,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Conv => "conv2d",
            Target::BatchNorm => "batchnorm",
            Target::BatchNormZeroGamma => "batchnorm(gamma=0)",
            Target::Relu => "relu",
            Target::Tanh => "tanh",
            Target::Mse => "mse",
            Target::Model => "model",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub target: Target,
    pub input: Dims,
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
    /// Set when the check could not run (e.g. a non-finite value).
    pub failure: Option<String>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.groups.iter().all(|g| g.max_rel_err <= self.tolerance)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} {:<20} input {} max rel err {:.3e} (tol {:.0e})",
            self.target.name(),
            self.input,
            self.max_rel_err(),
            self.tolerance
        )?;
        if let Some(msg) = &self.failure {
            write!(f, ": {msg}")?;
        }
        Ok(())
    }
}

/// A differentiable system with a flat list of perturbable value groups.
/// Group 0 is always the input.
trait Probe {
    fn group_names(&self) -> Vec<String>;
    /// f32 production forward output and analytic gradients, one per group.
    fn production(&self, vals: &[Vec<f64>]) -> Result<(Vec<f32>, Vec<Vec<f32>>)>;
    /// Objective and output of the f64 reference forward.
    fn reference(&self, vals: &[Vec<f64>]) -> (f64, Vec<f64>);
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn tensor(dims: Dims, v: &[f64]) -> Result<Tensor4> {
    Tensor4::from_vec(dims, to_f32(v))
}

fn dot(y: &[f64], r: &[f64]) -> f64 {
    y.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn finite_or(t: &Tensor4, layer: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            location: layer.to_string(),
        })
    }
}

/// Uniform [-1, 1) values drawn in f32 so the f32 and f64 paths start from
/// identical numbers.
fn uniform(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len)
        .map(|_| rng.random_range(-1.0f32..1.0) as f64)
        .collect()
}

struct ConvProbe {
    input: Dims,
    c_out: usize,
    r: Vec<f64>,
}

impl Probe for ConvProbe {
    fn group_names(&self) -> Vec<String> {
        vec!["input".into(), "kernels".into(), "biases".into()]
    }
    fn production(&self, vals: &[Vec<f64>]) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
        let x = tensor(self.input, &vals[0])?;
        let mut p = ConvParams::from_values(
            self.c_out,
            self.input.c,
            3,
            3,
            to_f32(&vals[1]),
            to_f32(&vals[2]),
        )?;
        let y = conv2d_forward(&x, &p)?;
        finite_or(&y, "conv2d")?;
        let gx = conv2d_backward(&x, &mut p, &tensor(y.dims(), &self.r)?)?;
        Ok((
            y.into_vec(),
            vec![gx.into_vec(), p.kernels.grad, p.biases.grad],
        ))
    }
    fn reference(&self, vals: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let y = reference::conv(
            &Arr::new(self.input, vals[0].clone()),
            &vals[1],
            &vals[2],
            self.c_out,
            3,
            3,
        );
        (dot(&y.data, &self.r), y.data)
    }
}

struct BnProbe {
    input: Dims,
    r: Vec<f64>,
}

impl Probe for BnProbe {
    fn group_names(&self) -> Vec<String> {
        vec!["input".into(), "gamma".into(), "beta".into()]
    }
    fn production(&self, vals: &[Vec<f64>]) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
        let x = tensor(self.input, &vals[0])?;
        let mut p = BatchNormParams::new(self.input.c);
        p.gamma.value = to_f32(&vals[1]);
        p.beta.value = to_f32(&vals[2]);
        let (y, cache) = batchnorm_forward(&x, &mut p, Mode::Train)?;
        finite_or(&y, "batchnorm")?;
        let cache = cache.ok_or_else(|| Error::MissingCache {
            layer: "batchnorm".into(),
        })?;
        let gx = batchnorm_backward(&cache, &mut p, &tensor(y.dims(), &self.r)?)?;
        Ok((y.into_vec(), vec![gx.into_vec(), p.gamma.grad, p.beta.grad]))
    }
    fn reference(&self, vals: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let eps = BatchNormParams::new(1).eps as f64;
        let y = reference::batchnorm_train(
            &Arr::new(self.input, vals[0].clone()),
            &vals[1],
            &vals[2],
            eps,
        );
        (dot(&y.data, &self.r), y.data)
    }
}

struct ActProbe {
    input: Dims,
    kind: Activation,
    r: Vec<f64>,
}

impl Probe for ActProbe {
    fn group_names(&self) -> Vec<String> {
        vec!["input".into()]
    }
    fn production(&self, vals: &[Vec<f64>]) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
        let x = tensor(self.input, &vals[0])?;
        let y = activation_forward(&x, self.kind);
        finite_or(&y, "activation")?;
        let gx = activation_backward(&x, self.kind, &tensor(self.input, &self.r)?)?;
        Ok((y.into_vec(), vec![gx.into_vec()]))
    }
    fn reference(&self, vals: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let mut y = Arr::new(self.input, vals[0].clone());
        reference::activate(&mut y, self.kind);
        (dot(&y.data, &self.r), y.data)
    }
}

struct MseProbe {
    input: Dims,
    label: Vec<f64>,
}

impl Probe for MseProbe {
    fn group_names(&self) -> Vec<String> {
        vec!["output".into()]
    }
    fn production(&self, vals: &[Vec<f64>]) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
        let (loss, g) = mse_loss(
            &tensor(self.input, &vals[0])?,
            &tensor(self.input, &self.label)?,
        )?;
        Ok((vec![loss as f32], vec![g.into_vec()]))
    }
    fn reference(&self, vals: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let l = reference::mse(&vals[0], &self.label);
        (l, vec![l])
    }
}

struct ModelProbe {
    net: Network,
    input: Dims,
    r: Vec<f64>,
}

impl Probe for ModelProbe {
    fn group_names(&self) -> Vec<String> {
        let mut names = vec!["input".to_string()];
        for (i, l) in self.net.params.layers.iter().enumerate() {
            names.push(format!("layer{}.kernels", i + 1));
            names.push(format!("layer{}.biases", i + 1));
            if l.bn.is_some() {
                names.push(format!("layer{}.gamma", i + 1));
                names.push(format!("layer{}.beta", i + 1));
            }
        }
        names
    }
    fn production(&self, vals: &[Vec<f64>]) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
        let mut net = self.net.clone();
        for (p, v) in net.params.params_mut().into_iter().zip(&vals[1..]) {
            p.value = to_f32(v);
        }
        net.params.zero_grad();
        let (y, cache) = net.forward_train(&tensor(self.input, &vals[0])?)?;
        finite_or(&y, "model")?;
        let gx = net.backward(cache, &tensor(self.input, &self.r)?)?;
        let mut grads = vec![gx.into_vec()];
        grads.extend(net.params.params().into_iter().map(|p| p.grad.clone()));
        Ok((y.into_vec(), grads))
    }
    fn reference(&self, vals: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let eps = BatchNormParams::new(1).eps as f64;
        let y = reference::model_forward(
            &self.net.spec,
            &vals[1..],
            &Arr::new(self.input, vals[0].clone()),
            eps,
        );
        (dot(&y.data, &self.r), y.data)
    }
}

fn run_probe(
    probe: &dyn Probe,
    mut vals: Vec<Vec<f64>>,
    step: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GroupResult>> {
    let (y32, analytic) = probe.production(&vals)?;
    let (_, y64) = probe.reference(&vals);
    let names = probe.group_names();
    let mut samples: Vec<(usize, f64, f64)> = Vec::new();
    for (g, grad) in analytic.iter().enumerate() {
        let len = grad.len();
        let picks: Vec<usize> = if len <= MAX_ENTRIES_PER_GROUP {
            (0..len).collect()
        } else {
            let mut v = sample(rng, len, MAX_ENTRIES_PER_GROUP).into_vec();
            v.sort_unstable();
            v
        };
        for i in picks {
            let orig = vals[g][i];
            vals[g][i] = orig + step;
            let (plus, _) = probe.reference(&vals);
            vals[g][i] = orig - step;
            let (minus, _) = probe.reference(&vals);
            vals[g][i] = orig;
            samples.push((g, grad[i] as f64, (plus - minus) / (2.0 * step)));
        }
    }
    let scale = samples.iter().map(|s| s.2.abs()).fold(0.0, f64::max);
    let floor = (FLOOR_FRACTION * scale).max(f64::MIN_POSITIVE);
    let mut groups: Vec<GroupResult> = names
        .into_iter()
        .map(|group| GroupResult {
            group,
            checked: 0,
            max_rel_err: 0.0,
        })
        .collect();
    for (g, a, n) in samples {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        let gr = &mut groups[g];
        gr.checked += 1;
        gr.max_rel_err = gr.max_rel_err.max(rel);
    }
    let y_scale = y64
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let y_err = y32
        .iter()
        .zip(&y64)
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0, f64::max);
    groups.push(GroupResult {
        group: "forward".into(),
        checked: y64.len(),
        max_rel_err: y_err / y_scale,
    });
    Ok(groups)
}

/// Checks one module at the given input shape. Every dimension should be
/// small (at most 6 for layer checks) to keep runtime bounded; the model
/// check uses single-channel inputs of any modest size.
pub fn gradcheck(target: Target, input: Dims, tolerance: f64, seed: u64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let result = build_and_run(target, input, &mut rng);
    let (groups, failure) = match result {
        Ok(g) => (g, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    GradcheckReport {
        target,
        input,
        tolerance,
        groups,
        failure,
    }
}

fn build_and_run(target: Target, input: Dims, rng: &mut ChaCha8Rng) -> Result<Vec<GroupResult>> {
    let step = if target == Target::Model {
        MODEL_STEP
    } else {
        DEFAULT_STEP
    };
    let len = input.len();
    match target {
        Target::Conv => {
            let c_out = 3;
            let x = uniform(len, rng);
            let k = uniform(c_out * input.c * 9, rng);
            let b = uniform(c_out, rng);
            let r = uniform(input.n * c_out * input.h * input.w, rng);
            run_probe(&ConvProbe { input, c_out, r }, vec![x, k, b], step, rng)
        }
        Target::BatchNorm | Target::BatchNormZeroGamma => {
            let gamma = if target == Target::BatchNormZeroGamma {
                vec![0.0; input.c]
            } else {
                (0..input.c)
                    .map(|_| rng.random_range(0.5f32..1.5) as f64)
                    .collect()
            };
            let beta = uniform(input.c, rng);
            let x = uniform(len, rng);
            let r = uniform(len, rng);
            run_probe(&BnProbe { input, r }, vec![x, gamma, beta], step, rng)
        }
        Target::Relu | Target::Tanh => {
            let kind = if target == Target::Relu {
                Activation::Relu
            } else {
                Activation::Tanh
            };
            let mut x = uniform(len, rng);
            // keep ReLU inputs away from the kink
            for v in &mut x {
                if v.abs() < 0.05 {
                    *v = if *v < 0.0 { -0.05 } else { 0.05 };
                }
            }
            let r = uniform(len, rng);
            run_probe(&ActProbe { input, kind, r }, vec![x], step, rng)
        }
        Target::Mse => {
            let out = uniform(len, rng);
            let label = uniform(len, rng);
            run_probe(&MseProbe { input, label }, vec![out], step, rng)
        }
        Target::Model => {
            let spec = ModelSpec::deringing();
            let params = ModelParams::init(&spec, rng.random())?;
            let net = Network::new(spec, params)?;
            let mut vals = vec![uniform(len, rng)];
            for (p, bn_scale) in net.params.params().into_iter().zip(bn_param_kinds(&net)) {
                // non-trivial BN affine parameters
                vals.push(match bn_scale {
                    Some(true) => (0..p.len())
                        .map(|_| rng.random_range(0.5f32..1.5) as f64)
                        .collect(),
                    Some(false) => (0..p.len())
                        .map(|_| rng.random_range(-0.5f32..0.5) as f64)
                        .collect(),
                    None => p.value.iter().map(|&v| v as f64).collect(),
                });
            }
            let r = uniform(len, rng);
            run_probe(&ModelProbe { net, input, r }, vals, step, rng)
        }
    }
}

/// Per parameter group: `Some(true)` for gamma, `Some(false)` for beta,
/// `None` for convolution arrays.
fn bn_param_kinds(net: &Network) -> Vec<Option<bool>> {
    let mut kinds = Vec::new();
    for l in &net.params.layers {
        kinds.extend([None, None]);
        if l.bn.is_some() {
            kinds.extend([Some(true), Some(false)]);
        }
    }
    kinds
}

/// The full verification suite: every layer type at small shapes against
/// 1e-3, the degenerate-gamma BN case, and the 9-layer model on a 16x16 input
/// against 1e-2.
pub fn gradcheck_suite(seed: u64) -> Vec<GradcheckReport> {
    let cases = [
        (Target::Conv, Dims::new(1, 1, 4, 4), LAYER_TOLERANCE),
        (Target::Conv, Dims::new(2, 3, 5, 4), LAYER_TOLERANCE),
        (Target::BatchNorm, Dims::new(2, 3, 4, 4), LAYER_TOLERANCE),
        (
            Target::BatchNormZeroGamma,
            Dims::new(2, 3, 4, 4),
            LAYER_TOLERANCE,
        ),
        (Target::Relu, Dims::new(2, 2, 4, 4), LAYER_TOLERANCE),
        (Target::Tanh, Dims::new(2, 2, 4, 4), LAYER_TOLERANCE),
        (Target::Mse, Dims::new(2, 1, 5, 5), LAYER_TOLERANCE),
        (Target::Model, Dims::new(1, 1, 16, 16), MODEL_TOLERANCE),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(i, &(t, d, tol))| gradcheck(t, d, tol, seed.wrapping_add(i as u64)))
        .collect()
}

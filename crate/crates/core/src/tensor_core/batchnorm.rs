use super::tensor::{Param, Tensor4};
use crate::error::{Error, Result};

pub const DEFAULT_BN_EPS: f32 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel batch normalization.
///
/// Running statistics follow `running = momentum * running + (1 - momentum) * batch`
/// and use the biased batch variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn zero_grad(&mut self) {
        self.gamma.zero_grad();
        self.beta.zero_grad();
    }
}

/// State saved by a train-mode forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor4,
    inv_std: Vec<f32>,
}

/// Normalizes `input` per channel. In train mode the batch moments are used,
/// running statistics are updated and a cache is returned.
pub fn batchnorm_forward(
    input: &Tensor4,
    params: &mut BatchNormParams,
    mode: Mode,
) -> Result<(Tensor4, Option<BnCache>)> {
    check(input, params)?;
    if mode == Mode::Infer {
        return Ok((batchnorm_infer(input, params)?, None));
    }
    let d = input.dims();
    let c = params.channels();
    let count = d.n * d.plane();
    if count < 2 {
        return Err(Error::BatchTooSmall { count });
    }
    let mut mean = vec![0.0f32; c];
    let mut inv_std = vec![0.0f32; c];
    for ch in 0..c {
        let (m, v) = channel_moments(input, ch);
        mean[ch] = m as f32;
        inv_std[ch] = (1.0 / (v + params.eps as f64).sqrt()) as f32;
        let mo = params.momentum;
        params.running_mean[ch] = mo * params.running_mean[ch] + (1.0 - mo) * m as f32;
        params.running_var[ch] = mo * params.running_var[ch] + (1.0 - mo) * v as f32;
    }
    let xhat = standardize(input, &mean, &inv_std);
    let out = affine(&xhat, params);
    Ok((out, Some(BnCache { xhat, inv_std })))
}

/// Inference-mode normalization with the running statistics.
pub fn batchnorm_infer(input: &Tensor4, params: &BatchNormParams) -> Result<Tensor4> {
    check(input, params)?;
    let inv_std: Vec<f32> = params
        .running_var
        .iter()
        .map(|&v| 1.0 / (v.max(0.0) + params.eps).sqrt())
        .collect();
    let xhat = standardize(input, &params.running_mean, &inv_std);
    Ok(affine(&xhat, params))
}

fn check(input: &Tensor4, params: &BatchNormParams) -> Result<()> {
    let c = params.channels();
    if input.dims().c != c {
        return Err(Error::shape(
            "batchnorm",
            input.dims(),
            format!("{c} channels"),
        ));
    }
    if !(params.eps > 0.0) {
        return Err(Error::config("eps", "must be positive"));
    }
    Ok(())
}

fn standardize(input: &Tensor4, mean: &[f32], inv_std: &[f32]) -> Tensor4 {
    let d = input.dims();
    let plane = d.plane();
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
        let ch = i % d.c;
        let (m, s) = (mean[ch], inv_std[ch]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
    }
    out
}

fn affine(xhat: &Tensor4, params: &BatchNormParams) -> Tensor4 {
    let d = xhat.dims();
    let plane = d.plane();
    let mut out = xhat.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
        let ch = i % d.c;
        let (g, b) = (params.gamma.value[ch], params.beta.value[ch]);
        chunk.iter_mut().for_each(|v| *v = g * *v + b);
    }
    out
}

fn channel_moments(input: &Tensor4, ch: usize) -> (f64, f64) {
    let d = input.dims();
    let plane = d.plane();
    let count = (d.n * plane) as f64;
    let slices = (0..d.n).map(|n| {
        let off = (n * d.c + ch) * plane;
        &input.data()[off..off + plane]
    });
    let sum: f64 = slices.clone().flatten().map(|&v| v as f64).sum();
    let mean = sum / count;
    let var = slices
        .flatten()
        .map(|&v| {
            let e = v as f64 - mean;
            e * e
        })
        .sum::<f64>()
        / count;
    (mean, var)
}

/// Gradient of the batch-statistics normalization; accumulates into gamma/beta grads.
pub fn batchnorm_backward(
    cache: &BnCache,
    params: &mut BatchNormParams,
    upstream: &Tensor4,
) -> Result<Tensor4> {
    let d = cache.xhat.dims();
    if upstream.dims() != d {
        return Err(Error::shape("batchnorm_backward", upstream.dims(), d));
    }
    let c = d.c;
    if params.channels() != c {
        return Err(Error::shape(
            "batchnorm_backward",
            d,
            format!("{} channels", params.channels()),
        ));
    }
    let plane = d.plane();
    let count = (d.n * plane) as f64;
    let mut grad = Tensor4::zeros(d);
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for n in 0..d.n {
            let off = (n * c + ch) * plane;
            let dy = &upstream.data()[off..off + plane];
            let xh = &cache.xhat.data()[off..off + plane];
            for (&g, &h) in dy.iter().zip(xh) {
                sum_dy += g as f64;
                sum_dy_xhat += g as f64 * h as f64;
            }
        }
        params.beta.grad[ch] += sum_dy as f32;
        params.gamma.grad[ch] += sum_dy_xhat as f32;
        let scale = params.gamma.value[ch] as f64 * cache.inv_std[ch] as f64 / count;
        let mean_dy = sum_dy / count;
        let mean_dy_xhat = sum_dy_xhat / count;
        for n in 0..d.n {
            let off = (n * c + ch) * plane;
            let dy = &upstream.data()[off..off + plane];
            let xh = &cache.xhat.data()[off..off + plane];
            let dx = &mut grad.data_mut()[off..off + plane];
            for ((o, &g), &h) in dx.iter_mut().zip(dy).zip(xh) {
                *o = (scale * count * (g as f64 - mean_dy - h as f64 * mean_dy_xhat)) as f32;
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::tensor::Dims;
    use crate::tensor_core::testutil::random_tensor;

    fn per_channel_moments(t: &Tensor4) -> Vec<(f64, f64)> {
        (0..t.dims().c).map(|ch| channel_moments(t, ch)).collect()
    }

    #[test]
    fn standardized_input_is_unchanged() {
        let raw = random_tensor(Dims::new(3, 2, 4, 5), 1);
        let mut p = BatchNormParams::new(2);
        let (std_in, _) = batchnorm_forward(&raw, &mut p, Mode::Train).unwrap();
        let mut p2 = BatchNormParams::new(2);
        let (out, _) = batchnorm_forward(&std_in, &mut p2, Mode::Train).unwrap();
        for (a, b) in out.data().iter().zip(std_in.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_gamma_gives_beta_everywhere() {
        let x = random_tensor(Dims::new(2, 3, 4, 4), 2);
        let mut p = BatchNormParams::new(3);
        p.gamma.value = vec![0.0; 3];
        p.beta.value = vec![3.0; 3];
        let (y, _) = batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn output_moments_follow_gamma_beta() {
        let mut x = random_tensor(Dims::new(2, 3, 6, 5), 3);
        x.scale(7.0);
        x.data_mut().iter_mut().for_each(|v| *v += 2.5);
        let mut p = BatchNormParams::new(3);
        p.gamma.value = vec![2.0; 3];
        p.beta.value = vec![3.0; 3];
        let (y, _) = batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        for (m, v) in per_channel_moments(&y) {
            assert!((m - 3.0).abs() < 1e-5, "mean {m}");
            assert!((v - 4.0).abs() < 1e-3, "var {v}");
        }
    }

    #[test]
    fn train_mode_needs_two_values() {
        let x = random_tensor(Dims::new(1, 1, 1, 1), 4);
        let mut p = BatchNormParams::new(1);
        assert!(matches!(
            batchnorm_forward(&x, &mut p, Mode::Train).unwrap_err(),
            Error::BatchTooSmall { count: 1 }
        ));
        assert!(batchnorm_forward(&x, &mut p, Mode::Infer).is_ok());
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let x = Tensor4::from_vec(Dims::new(1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut p = BatchNormParams::new(1);
        batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        assert!((p.running_mean[0] - 0.1 * 2.5).abs() < 1e-6);
        assert!((p.running_var[0] - (0.9 + 0.1 * 1.25)).abs() < 1e-6);

        let (y, cache) = batchnorm_forward(&x, &mut p, Mode::Infer).unwrap();
        assert!(cache.is_none());
        let s = 1.0 / (p.running_var[0] + p.eps).sqrt();
        assert!((y.data()[3] - (4.0 - p.running_mean[0]) * s).abs() < 1e-6);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = random_tensor(Dims::new(2, 2, 3, 3), 5);
        let mut p = BatchNormParams::new(2);
        let (_, cache) = batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        let g = batchnorm_backward(&cache.unwrap(), &mut p, &Tensor4::zeros(x.dims())).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(p.gamma.grad.iter().chain(&p.beta.grad).all(|&v| v == 0.0));
    }

    #[test]
    fn constant_upstream_is_absorbed() {
        let x = random_tensor(Dims::new(2, 2, 4, 4), 6);
        let mut p = BatchNormParams::new(2);
        p.gamma.value = vec![1.5, -0.7];
        let (_, cache) = batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        let mut up = Tensor4::zeros(x.dims());
        for n in 0..2 {
            for ch in 0..2 {
                for i in 0..16 {
                    let idx = (n * 2 + ch) * 16 + i;
                    up.data_mut()[idx] = if ch == 0 { 0.8 } else { -2.0 };
                }
            }
        }
        let g = batchnorm_backward(&cache.unwrap(), &mut p, &up).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-6), "{:?}", g.data());
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::tensor_core::reference::{batchnorm_train, Arr};
        let x = random_tensor(Dims::new(2, 2, 3, 3), 7);
        let r = random_tensor(x.dims(), 8);
        let mut p = BatchNormParams::new(2);
        p.gamma.value = vec![1.3, 0.6];
        p.beta.value = vec![0.2, -0.4];
        let (_, cache) = batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        let gx = batchnorm_backward(&cache.unwrap(), &mut p, &r).unwrap();
        // central differences of the f64 reference at the same values
        let wide = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
        let base = [wide(x.data()), wide(&p.gamma.value), wide(&p.beta.value)];
        let eps = p.eps as f64;
        let objective = |v: &[Vec<f64>; 3]| -> f64 {
            let y = batchnorm_train(&Arr::new(x.dims(), v[0].clone()), &v[1], &v[2], eps);
            y.data
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * *b as f64)
                .sum()
        };
        let h = 1e-3;
        let analytic = [
            gx.data().to_vec(),
            p.gamma.grad.clone(),
            p.beta.grad.clone(),
        ];
        for g in 0..3 {
            for i in 0..base[g].len() {
                let mut vp = base.clone();
                vp[g][i] += h;
                let mut vm = base.clone();
                vm[g][i] -= h;
                let fd = (objective(&vp) - objective(&vm)) / (2.0 * h);
                let a = analytic[g][i] as f64;
                assert!(
                    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3) < 1e-3,
                    "group {g} entry {i}: {a} vs {fd}"
                );
            }
        }
    }
}

//! Double-precision reference forward passes written as direct loops. They
//! share no code with the production kernels and serve as the numerical side
//! of gradient checks and as forward oracles in tests.

use super::activation::Activation;
use super::tensor::Dims;
use crate::model::ModelSpec;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Arr {
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(dims: Dims, data: Vec<f64>) -> Self {
        assert_eq!(dims.len(), data.len());
        Arr { dims, data }
    }
}

/// Same-padded stride-1 cross-correlation. Kernels are laid out
/// `[c_out][c_in][kh][kw]`.
pub(crate) fn conv(
    x: &Arr,
    kernels: &[f64],
    biases: &[f64],
    c_out: usize,
    kh: usize,
    kw: usize,
) -> Arr {
    let Dims { n, c, h, w } = x.dims;
    assert_eq!(kernels.len(), c_out * c * kh * kw);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; n * c_out * h * w];
    for s in 0..n {
        for co in 0..c_out {
            let o = &mut out[(s * c_out + co) * h * w..][..h * w];
            o.iter_mut().for_each(|v| *v = biases[co]);
            for ci in 0..c {
                let xin = &x.data[(s * c + ci) * h * w..][..h * w];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let k = kernels[((co * c + ci) * kh + dy) * kw + dx];
                        for y in 0..h {
                            let sy = y as isize + dy as isize - ph as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let row = &xin[sy as usize * w..][..w];
                            let orow = &mut o[y * w..][..w];
                            for (xo, out) in orow.iter_mut().enumerate() {
                                let sx = xo as isize + dx as isize - pw as isize;
                                if sx >= 0 && sx < w as isize {
                                    *out += k * row[sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Arr::new(Dims::new(n, c_out, h, w), out)
}

/// Train-mode batch normalization with biased batch variance.
pub(crate) fn batchnorm_train(x: &Arr, gamma: &[f64], beta: &[f64], eps: f64) -> Arr {
    let Dims { n, c, h, w } = x.dims;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut out = x.data.clone();
    for ch in 0..c {
        let idx = |s: usize, i: usize| (s * c + ch) * plane + i;
        let mut mean = 0.0;
        for s in 0..n {
            for i in 0..plane {
                mean += x.data[idx(s, i)];
            }
        }
        mean /= count;
        let mut var = 0.0;
        for s in 0..n {
            for i in 0..plane {
                var += (x.data[idx(s, i)] - mean).powi(2);
            }
        }
        var /= count;
        let inv = 1.0 / (var + eps).sqrt();
        for s in 0..n {
            for i in 0..plane {
                let k = idx(s, i);
                out[k] = gamma[ch] * (x.data[k] - mean) * inv + beta[ch];
            }
        }
    }
    Arr::new(x.dims, out)
}

pub(crate) fn activate(x: &mut Arr, kind: Activation) {
    for v in &mut x.data {
        *v = match kind {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        };
    }
}

pub(crate) fn mse(out: &[f64], label: &[f64]) -> f64 {
    out.iter()
        .zip(label)
        .map(|(o, l)| (o - l).powi(2))
        .sum::<f64>()
        / out.len() as f64
}

/// Train-mode model forward. `params` lists the learnable arrays in the order
/// of `ModelParams::params`: per layer kernels, biases, then gamma and beta
/// when the layer has batch normalization.
pub(crate) fn model_forward(spec: &ModelSpec, params: &[Vec<f64>], x: &Arr, eps: f64) -> Arr {
    let mut it = params.iter();
    let mut outputs: Vec<Option<Arr>> = vec![None; spec.layers.len()];
    let mut cur = x.clone();
    for (l, ls) in spec.layers.iter().enumerate() {
        for s in spec.skips.iter().filter(|s| s.destination == l + 1) {
            let src = outputs[s.source - 1]
                .as_ref()
                .expect("skip source precedes destination");
            cur.data
                .iter_mut()
                .zip(&src.data)
                .for_each(|(a, b)| *a += b);
        }
        let k = it.next().expect("kernels");
        let b = it.next().expect("biases");
        let mut z = conv(&cur, k, b, ls.c_out, spec.kernel, spec.kernel);
        if ls.batch_norm {
            let g = it.next().expect("gamma");
            let be = it.next().expect("beta");
            z = batchnorm_train(&z, g, be, eps);
        }
        activate(&mut z, ls.activation);
        outputs[l] = Some(z.clone());
        cur = z;
    }
    cur
}

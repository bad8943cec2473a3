use super::tensor::Tensor4;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f32) -> f32 {
        match self {
            // NaN passes through so non-finite checks downstream see it
            Activation::Relu => {
                if x < 0.0 {
                    0.0
                } else {
                    x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at the pre-activation value `x`.
    #[inline]
    fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

pub fn activation_forward(input: &Tensor4, kind: Activation) -> Tensor4 {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = kind.apply(*v));
    out
}

/// `input` is the cached forward input (pre-activation).
pub fn activation_backward(
    input: &Tensor4,
    kind: Activation,
    upstream: &Tensor4,
) -> Result<Tensor4> {
    input.ensure_same_dims(upstream, "activation_backward")?;
    let mut grad = upstream.clone();
    for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
        *g *= kind.derivative(x);
    }
    Ok(grad)
}

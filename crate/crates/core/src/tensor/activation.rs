use rand::Rng;

use super::{check_finite, invalid, Mode, Real, Result, Tensor};

pub fn relu<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_finite("relu")?;
    Ok(x.map(|v| v.max(T::zero())))
}

/// Takes the forward *output*; the derivative at 0 is taken as 0.
pub fn relu_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape("relu_backward", y.shape())?;
    let dx = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(y.shape().to_vec(), dx)
}

/// Logistic function, clamped so the output stays strictly inside (0, 1).
pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_finite("sigmoid")?;
    let below_one = T::one() - T::epsilon() / T::lit(2.0);
    Ok(x.map(|v| {
        let s = if v >= T::zero() {
            (T::one() + (-v).exp()).recip()
        } else {
            let e = v.exp();
            e / (T::one() + e)
        };
        s.max(T::min_positive_value()).min(below_one)
    }))
}

/// Takes the forward *output*.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape("sigmoid_backward", y.shape())?;
    let dx = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::new(y.shape().to_vec(), dx)
}

/// Per-element scale applied by inverted dropout: 0 or `1 / (1 - rate)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<T: Real> {
    scale: Vec<T>,
}

impl<T: Real> DropoutMask<T> {
    pub fn kept(&self) -> usize {
        self.scale.iter().filter(|&&s| s != T::zero()).count()
    }
}

/// Inverted dropout. Returns no mask when the op is the identity
/// (infer mode or zero rate).
pub fn dropout<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<DropoutMask<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
    }
    x.check_finite("dropout")?;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let scale: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let y = x.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
    Ok((Tensor::new(x.shape().to_vec(), y)?, Some(DropoutMask { scale })))
}

pub fn dropout_backward<T: Real>(
    mask: Option<&DropoutMask<T>>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_finite(grad_out.data(), "dropout_backward")?;
    let Some(mask) = mask else {
        return Ok(grad_out.clone());
    };
    if mask.scale.len() != grad_out.len() {
        return Err(invalid("dropout_backward", "mask does not match gradient"));
    }
    let dx = grad_out
        .data()
        .iter()
        .zip(&mask.scale)
        .map(|(&g, &s)| g * s)
        .collect();
    Tensor::new(grad_out.shape().to_vec(), dx)
}

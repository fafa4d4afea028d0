use super::{invalid, Real, Result};

/// One RMSProp update in place:
/// `s <- rho*s + (1-rho)*g^2`, `p <- p - lr*g/sqrt(s + eps)`.
pub fn rmsprop_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    accum: &mut [T],
    lr: f64,
    rho: f64,
    eps: f64,
) -> Result<()> {
    const OP: &str = "rmsprop_step";
    if !(lr > 0.0) {
        return Err(invalid(OP, format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&rho) || eps < 0.0 {
        return Err(invalid(OP, format!("rho {rho} / eps {eps} out of range")));
    }
    if params.len() != grads.len() || params.len() != accum.len() {
        return Err(invalid(OP, "params, grads and accumulators differ in length"));
    }
    let (lr, rho, eps) = (T::lit(lr), T::lit(rho), T::lit(eps));
    let fresh = T::one() - rho;
    for ((p, &g), s) in params.iter_mut().zip(grads).zip(accum.iter_mut()) {
        *s = rho * *s + fresh * g * g;
        if g != T::zero() {
            *p -= lr * g / (*s + eps).sqrt();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = [1.5f64, -2.0];
        let mut s = [0.3, 0.0];
        rmsprop_step(&mut p, &[0.0, 0.0], &mut s, 0.1, 0.9, 1e-7).unwrap();
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn first_step_without_memory_is_sign_step() {
        let mut p = [1.0f64, 1.0];
        let mut s = [0.0, 0.0];
        rmsprop_step(&mut p, &[3.0, -0.25], &mut s, 0.1, 0.0, 0.0).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
        assert!((p[1] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut p = [0.0f32];
        assert!(rmsprop_step(&mut p, &[1.0], &mut [0.0], 0.0, 0.9, 1e-7).is_err());
        assert!(rmsprop_step(&mut p, &[1.0], &mut [0.0], -1.0, 0.9, 1e-7).is_err());
    }

    #[test]
    fn descends_quadratic() {
        // f(p) = p^2 from p = 3, lr 0.01, rho 0.9
        let mut p = [3.0f64];
        let mut s = [0.0];
        let mut trace = vec![p[0]];
        for _ in 0..100 {
            let g = [2.0 * p[0]];
            rmsprop_step(&mut p, &g, &mut s, 0.01, 0.9, 1e-7).unwrap();
            trace.push(p[0]);
        }
        // scalar simulation of the update rule, written out independently
        let (mut q, mut acc) = (3.0f64, 0.0f64);
        for (step, &got) in trace.iter().enumerate().skip(1) {
            let g = 2.0 * q;
            acc = 0.9 * acc + 0.1 * g * g;
            q -= 0.01 * g / (acc + 1e-7).sqrt();
            assert!((got - q).abs() < 1e-12, "step {step}");
        }
        for w in trace[1..].windows(2) {
            assert!(w[1].abs() < w[0].abs());
        }
    }
}

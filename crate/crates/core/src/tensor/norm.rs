use super::{check_finite, invalid, Mode, Real, Result, Tensor, TensorError};

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T: Real> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Weight of the old running value in each update.
    pub momentum: T,
    pub eps: T,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(momentum),
            eps: T::lit(eps),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// What [`batchnorm_backward`] needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Real> {
    mode: Mode,
    shape: Vec<usize>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T: Real> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn check_inputs<T: Real>(
    op: &'static str,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BatchNormState<T>,
) -> Result<usize> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| invalid(op, "scalar input"))?;
    if x.is_empty() {
        return Err(invalid(op, "empty batch"));
    }
    for t in [gamma, beta] {
        t.expect_shape(op, &[c])?;
    }
    if state.channels() != c {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: vec![state.channels()],
            actual: vec![c],
        });
    }
    x.check_finite(op)?;
    Ok(c)
}

fn affine<T: Real>(xhat: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
    let c = gamma.len();
    xhat.iter()
        .enumerate()
        .map(|(i, &v)| v * gamma[i % c] + beta[i % c])
        .collect()
}

/// Normalizes with batch statistics over every axis but the last and folds
/// them into the running statistics.
pub fn batchnorm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = check_inputs("batchnorm", x, gamma, beta, state)?;
    let data = x.data();
    let count = data.len() / c;
    let m = T::lit(count as f64);

    // Statistics of `x - x[0]`, which makes a constant channel normalize
    // to exactly zero.
    let shift: Vec<T> = data[..c].to_vec();
    let mut mean = vec![T::zero(); c];
    for row in data.chunks_exact(c) {
        for ((acc, &v), &s) in mean.iter_mut().zip(row).zip(&shift) {
            *acc += v - s;
        }
    }
    mean.iter_mut().for_each(|v| *v = *v / m);
    let mut var = vec![T::zero(); c];
    for row in data.chunks_exact(c) {
        for (j, &v) in row.iter().enumerate() {
            let d = (v - shift[j]) - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = *v / m);
    let inv_std: Vec<T> = var.iter().map(|&v| (v + state.eps).sqrt().recip()).collect();

    let xhat: Vec<T> = data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let j = i % c;
            ((v - shift[j]) - mean[j]) * inv_std[j]
        })
        .collect();
    let y = affine(&xhat, gamma.data(), beta.data());

    let keep = state.momentum;
    let fresh = T::one() - keep;
    for j in 0..c {
        state.running_mean[j] = keep * state.running_mean[j] + fresh * (shift[j] + mean[j]);
        state.running_var[j] = keep * state.running_var[j] + fresh * var[j];
    }
    let cache = BatchNormCache {
        mode: Mode::Train,
        shape: x.shape().to_vec(),
        xhat,
        inv_std,
    };
    Ok((Tensor::new(x.shape().to_vec(), y)?, cache))
}

/// Normalizes with the running statistics only.
pub fn batchnorm_infer<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BatchNormState<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = check_inputs("batchnorm", x, gamma, beta, state)?;
    let inv_std: Vec<T> = state
        .running_var
        .iter()
        .map(|&v| (v + state.eps).sqrt().recip())
        .collect();
    let xhat: Vec<T> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - state.running_mean[i % c]) * inv_std[i % c])
        .collect();
    let y = affine(&xhat, gamma.data(), beta.data());
    let cache = BatchNormCache {
        mode: Mode::Infer,
        shape: x.shape().to_vec(),
        xhat,
        inv_std,
    };
    Ok((Tensor::new(x.shape().to_vec(), y)?, cache))
}

pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    const OP: &str = "batchnorm_backward";
    grad_out.expect_shape(OP, &cache.shape)?;
    let c = cache.inv_std.len();
    gamma.expect_shape(OP, &[c])?;
    check_finite(grad_out.data(), OP)?;
    let dy = grad_out.data();
    let g = gamma.data();

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (row_dy, row_xh) in dy.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for j in 0..c {
            dgamma[j] += row_dy[j] * row_xh[j];
            dbeta[j] += row_dy[j];
        }
    }

    let dx: Vec<T> = match cache.mode {
        Mode::Infer => dy
            .iter()
            .enumerate()
            .map(|(i, &d)| d * g[i % c] * cache.inv_std[i % c])
            .collect(),
        Mode::Train => {
            let m = T::lit((dy.len() / c) as f64);
            dy.iter()
                .zip(&cache.xhat)
                .enumerate()
                .map(|(i, (&d, &xh))| {
                    let j = i % c;
                    g[j] * cache.inv_std[j] / m * (m * d - dbeta[j] - xh * dgamma[j])
                })
                .collect()
        }
    };
    Ok(BatchNormGrads {
        input: Tensor::new(cache.shape.clone(), dx)?,
        gamma: Tensor::new([c], dgamma)?,
        beta: Tensor::new([c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standardized_input_passes_through() {
        // per channel values {-1, 1}: mean 0, biased variance 1
        let x = Tensor::new([2, 1, 2, 2], vec![-1.0f64, 1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0]).unwrap();
        let mut st = BatchNormState::new(2, 0.9, 1e-5);
        let (y, _) =
            batchnorm_train(&x, &Tensor::full([2], 1.0), &Tensor::zeros([2]), &mut st).unwrap();
        // eps shrinks unit values by 1 - 1/sqrt(1 + 1e-5), about 5e-6
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::full([3, 2, 2, 1], 0.1f32);
        let beta = Tensor::new([1], vec![0.25f32]).unwrap();
        let mut st = BatchNormState::new(1, 0.9, 1e-5);
        let (y, _) = batchnorm_train(&x, &Tensor::full([1], 3.0), &beta, &mut st).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::new([4, 1], vec![1.0f64, 3.0, 5.0, 7.0]).unwrap();
        let mut st = BatchNormState::new(1, 0.9, 1e-5);
        batchnorm_train(&x, &Tensor::full([1], 1.0), &Tensor::zeros([1]), &mut st).unwrap();
        assert!((st.running_mean[0] - 0.4).abs() < 1e-12);
        assert!((st.running_var[0] - (0.9 + 0.1 * 5.0)).abs() < 1e-12);
    }

    #[test]
    fn rejects_empty_and_channel_mismatch() {
        let mut st = BatchNormState::<f32>::new(3, 0.9, 1e-5);
        let g = Tensor::full([3], 1.0);
        let b = Tensor::zeros([3]);
        assert!(batchnorm_train(&Tensor::zeros([0, 2, 2, 3]), &g, &b, &mut st).is_err());
        assert!(batchnorm_train(&Tensor::zeros([1, 2, 2, 2]), &g, &b, &mut st).is_err());
    }

    fn gradcheck(mode: Mode, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [2, 4, 4, 3];
        let x = Tensor::<f64>::from_fn(shape, |_| rng.random_range(-2.0..2.0));
        let gamma = Tensor::from_fn([3], |_| rng.random_range(0.5..1.5));
        let beta = Tensor::from_fn([3], |_| rng.random_range(-0.5..0.5));
        let proj = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let mut state = BatchNormState::new(3, 0.9, 1e-5);
        state.running_mean = vec![0.1, -0.2, 0.3];
        state.running_var = vec![0.5, 1.5, 2.0];
        let run = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            let mut st = state.clone();
            match mode {
                Mode::Train => batchnorm_train(x, g, b, &mut st).unwrap(),
                Mode::Infer => batchnorm_infer(x, g, b, &st).unwrap(),
            }
        };
        let (_, cache) = run(&x, &gamma, &beta);
        let grads = batchnorm_backward(&cache, &gamma, &proj).unwrap();
        let loss = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| run(x, g, b).0.dot(&proj).unwrap();
        let ex = finite_diff_gradcheck(
            |v| loss(&Tensor::new(shape, v.to_vec()).unwrap(), &gamma, &beta),
            x.data(),
            grads.input.data(),
            1e-5,
        );
        let eg = finite_diff_gradcheck(
            |v| loss(&x, &Tensor::new([3], v.to_vec()).unwrap(), &beta),
            gamma.data(),
            grads.gamma.data(),
            1e-5,
        );
        let eb = finite_diff_gradcheck(
            |v| loss(&x, &gamma, &Tensor::new([3], v.to_vec()).unwrap()),
            beta.data(),
            grads.beta.data(),
            1e-5,
        );
        ex.max(eg).max(eb)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let e = gradcheck(Mode::Train, seed);
            assert!(e < 1e-5, "train {e}");
            let e = gradcheck(Mode::Infer, seed);
            assert!(e < 1e-5, "infer {e}");
        }
    }
}

//! Double-precision finite-difference checks of every differentiable op and
//! of the reduced network end to end. Each check differentiates the scalar
//! `sum(r * y)` for a random cotangent `r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{ModelConfig, PolarNet};
use crate::tensor::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, bilinear_upsample, bilinear_upsample_backward,
    concat_channels, conv2d, conv2d_backward, dropout, dropout_backward, finite_diff_gradcheck,
    finite_diff_gradcheck_floor, relu, relu_backward, sigmoid, sigmoid_backward, split_channels,
    transposed_conv2d, transposed_conv2d_backward, BatchNormState, ConvSpec, Mode, Tensor,
};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
/// Denominator floor for the end-to-end check, see [`end_to_end`].
const END_TO_END_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks are never crossed.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn weighted(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn with(t: &Tensor<f64>, v: &[f64]) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), v.to_vec()).expect("same length")
}

/// Max relative error of `grad` against central differences of
/// `f(v) = sum(r * y(v))`.
fn check(x: &Tensor<f64>, grad: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> Tensor<f64>, r: &Tensor<f64>) -> f64 {
    finite_diff_gradcheck(|v| weighted(&f(&with(x, v)), r), x.data(), grad.data(), EPS)
}

fn conv_checks(rng: &mut ChaCha8Rng, transposed: bool) -> f64 {
    let specs = [
        ConvSpec::new((3, 1), (2, 1), 2, 3),
        ConvSpec::new((1, 3), (1, 2), 3, 2),
        ConvSpec::new((2, 2), (1, 1), 2, 2),
    ];
    let mut worst = 0.0f64;
    for spec in specs {
        let wshape = if transposed {
            spec.transposed_weight_shape()
        } else {
            spec.conv_weight_shape()
        };
        let x = random(rng, &[2, 5, 4, spec.in_channels]);
        let w = random(rng, &wshape);
        let b = random(rng, &[spec.out_channels]);
        let fwd = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            if transposed {
                transposed_conv2d(x, w, b, &spec).expect("valid conv")
            } else {
                conv2d(x, w, b, &spec).expect("valid conv")
            }
        };
        let y = fwd(&x, &w, &b);
        let r = random(rng, y.shape());
        let g = if transposed {
            transposed_conv2d_backward(&x, &w, &spec, &r)
        } else {
            conv2d_backward(&x, &w, &spec, &r)
        }
        .expect("valid conv");
        worst = worst
            .max(check(&x, &g.input, |v| fwd(v, &w, &b), &r))
            .max(check(&w, &g.weight, |v| fwd(&x, v, &b), &r))
            .max(check(&b, &g.bias, |v| fwd(&x, &w, v), &r));
    }
    worst
}

fn batchnorm_check(rng: &mut ChaCha8Rng, mode: Mode) -> f64 {
    let c = 3;
    let x = random(rng, &[2, 3, 4, c]);
    let gamma = random(rng, &[c]);
    let beta = random(rng, &[c]);
    let mut state = BatchNormState::new(c, 0.9, 1e-5);
    state.running_mean = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    state.running_var = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
    let fwd = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
        let mut s = state.clone();
        match mode {
            Mode::Train => batchnorm_train(x, g, b, &mut s),
            Mode::Infer => batchnorm_infer(x, g, b, &s),
        }
        .expect("valid batchnorm")
    };
    let (y, cache) = fwd(&x, &gamma, &beta);
    let r = random(rng, y.shape());
    let g = batchnorm_backward(&cache, &gamma, &r).expect("valid batchnorm");
    check(&x, &g.input, |v| fwd(v, &gamma, &beta).0, &r)
        .max(check(&gamma, &g.gamma, |v| fwd(&x, v, &beta).0, &r))
        .max(check(&beta, &g.beta, |v| fwd(&x, &gamma, v).0, &r))
}

fn activation_checks(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let x = off_zero(rng, &[2, 3, 3, 2]);
    let r = random(rng, x.shape());
    let y = relu(&x).expect("finite");
    let relu_err = check(&x, &relu_backward(&y, &r).expect("shape"), |v| relu(v).expect("finite"), &r);
    let y = sigmoid(&x).expect("finite");
    let sig_err = check(&x, &sigmoid_backward(&y, &r).expect("shape"), |v| sigmoid(v).expect("finite"), &r);
    (relu_err, sig_err)
}

fn dropout_check(rng: &mut ChaCha8Rng) -> f64 {
    let x = random(rng, &[1, 4, 4, 3]);
    let seed = rng.random::<u64>();
    let fwd = |v: &Tensor<f64>| {
        dropout(v, 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid rate")
    };
    let (y, mask) = fwd(&x);
    let r = random(rng, y.shape());
    let g = dropout_backward(mask.as_ref(), &r).expect("shape");
    check(&x, &g, |v| fwd(v).0, &r)
}

fn upsample_check(rng: &mut ChaCha8Rng) -> f64 {
    let x = random(rng, &[2, 3, 4, 2]);
    let fwd = |v: &Tensor<f64>| bilinear_upsample(v, 7, 9).expect("growing size");
    let y = fwd(&x);
    let r = random(rng, y.shape());
    let g = bilinear_upsample_backward(&r, 3, 4).expect("shape");
    check(&x, &g, fwd, &r)
}

fn concat_check(rng: &mut ChaCha8Rng) -> f64 {
    let a = random(rng, &[2, 3, 3, 2]);
    let b = random(rng, &[2, 3, 3, 3]);
    let y = concat_channels(&a, &b).expect("same grid");
    let r = random(rng, y.shape());
    let (ga, gb) = split_channels(&r, 2).expect("split");
    check(&a, &ga, |v| concat_channels(v, &b).expect("same grid"), &r)
        .max(check(&b, &gb, |v| concat_channels(&a, v).expect("same grid"), &r))
}

/// Per-op worst relative error over `seeds` random draws.
pub fn op_checks(seeds: u64) -> Vec<GradCheck> {
    let mut worst = [0.0f64; 9];
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (relu_err, sig_err) = activation_checks(&mut rng);
        let errs = [
            conv_checks(&mut rng, false),
            conv_checks(&mut rng, true),
            batchnorm_check(&mut rng, Mode::Train),
            batchnorm_check(&mut rng, Mode::Infer),
            relu_err,
            sig_err,
            dropout_check(&mut rng),
            upsample_check(&mut rng),
            concat_check(&mut rng),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    let names = [
        "conv2d",
        "transposed_conv2d",
        "batchnorm_train",
        "batchnorm_infer",
        "relu",
        "sigmoid",
        "dropout",
        "bilinear_upsample",
        "concat_channels",
    ];
    names
        .iter()
        .zip(worst)
        .map(|(n, e)| GradCheck {
            name: (*n).into(),
            max_rel_err: e,
            tolerance: OP_TOLERANCE,
        })
        .collect()
}

/// Reduced 16x16 network in train mode (fixed dropout stream), four sampled
/// coordinates per parameter tensor and seed. Biases start random so no
/// unit sits exactly on a ReLU kink; the relative-error floor absorbs
/// rounding on gradients that batch norm drives to ~1e-7.
pub fn end_to_end(seeds: u64) -> GradCheck {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut net = PolarNet::<f64>::new(ModelConfig::reduced(16, 1), &mut rng).expect("valid config");
        for p in net.params_mut().iter_mut().filter(|p| p.name.ends_with("/bias")) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        let x = random(&mut rng, &[2, 16, 16, 1]);
        let dropout_seed = rng.random::<u64>();
        let cache = net
            .forward_cached(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(dropout_seed))
            .expect("finite forward");
        let r = random(&mut rng, cache.probs().shape());
        net.zero_grads();
        net.backward(&cache, &r).expect("shapes match");
        for pi in 0..net.params().len() {
            let analytic = net.params()[pi].tensor.grad().expect("filled").to_vec();
            let values = net.params()[pi].tensor.data().to_vec();
            let picks: Vec<usize> = (0..4).map(|_| rng.random_range(0..values.len())).collect();
            let mut probe = net.clone();
            let err = finite_diff_gradcheck_floor(
                |v: &[f64]| {
                    probe.params_mut()[pi].tensor.data_mut().copy_from_slice(v);
                    let c = probe
                        .forward_cached(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(dropout_seed))
                        .expect("finite forward");
                    weighted(c.probs(), &r)
                },
                &values,
                &analytic,
                EPS,
                &picks,
                END_TO_END_FLOOR,
            );
            worst = worst.max(err);
        }
    }
    GradCheck {
        name: "polarnet_reduced".into(),
        max_rel_err: worst,
        tolerance: END_TO_END_TOLERANCE,
    }
}

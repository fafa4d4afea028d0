use serde::{Deserialize, Serialize};

use super::{check_finite, invalid, spatial_shape, Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output is `ceil(input / stride)`; the kernel is anchored at
    /// `(k - 1) / 2`, so an even kernel gets its extra zero row/column at
    /// the bottom/right.
    Same,
    Valid,
}

/// Geometry of a 2-D convolution. Weights are `[kh, kw, cin, cout]` for
/// [`conv2d`] and `[kh, kw, cout, cin]` for [`transposed_conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_rows: usize,
    pub kernel_cols: usize,
    pub stride_rows: usize,
    pub stride_cols: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), cin: usize, cout: usize) -> Self {
        Self {
            kernel_rows: kernel.0,
            kernel_cols: kernel.1,
            stride_rows: stride.0,
            stride_cols: stride.1,
            in_channels: cin,
            out_channels: cout,
            padding: Padding::Same,
        }
    }

    /// `k x 1` kernel sliding down each column.
    pub fn column_wise(k: usize, stride: usize, cin: usize, cout: usize) -> Self {
        Self::new((k, 1), (stride, 1), cin, cout)
    }

    /// `1 x k` kernel sliding along each row.
    pub fn row_wise(k: usize, stride: usize, cin: usize, cout: usize) -> Self {
        Self::new((1, k), (1, stride), cin, cout)
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn is_column_wise(&self) -> bool {
        self.kernel_cols == 1
    }

    pub fn is_row_wise(&self) -> bool {
        self.kernel_rows == 1
    }

    pub fn weight_len(&self) -> usize {
        self.kernel_rows * self.kernel_cols * self.in_channels * self.out_channels
    }

    pub fn conv_weight_shape(&self) -> [usize; 4] {
        [
            self.kernel_rows,
            self.kernel_cols,
            self.in_channels,
            self.out_channels,
        ]
    }

    pub fn transposed_weight_shape(&self) -> [usize; 4] {
        [
            self.kernel_rows,
            self.kernel_cols,
            self.out_channels,
            self.in_channels,
        ]
    }

    pub fn validate(&self, op: &'static str) -> Result<()> {
        let fields = [
            self.kernel_rows,
            self.kernel_cols,
            self.stride_rows,
            self.stride_cols,
            self.in_channels,
            self.out_channels,
        ];
        if fields.contains(&0) {
            return Err(invalid(op, format!("all sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Output spatial size of the forward convolution.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let axis = |len: usize, k: usize, s: usize| match self.padding {
            Padding::Same => Some(len.div_ceil(s)),
            Padding::Valid => (len >= k).then(|| (len - k) / s + 1),
        };
        Some((
            axis(h, self.kernel_rows, self.stride_rows)?,
            axis(w, self.kernel_cols, self.stride_cols)?,
        ))
    }

    /// Output spatial size of the transposed convolution.
    pub fn transposed_output_size(&self, h: usize, w: usize) -> (usize, usize) {
        match self.padding {
            Padding::Same => (h * self.stride_rows, w * self.stride_cols),
            Padding::Valid => (
                (h - 1) * self.stride_rows + self.kernel_rows,
                (w - 1) * self.stride_cols + self.kernel_cols,
            ),
        }
    }

    fn pad_before(&self) -> (usize, usize) {
        match self.padding {
            Padding::Same => ((self.kernel_rows - 1) / 2, (self.kernel_cols - 1) / 2),
            Padding::Valid => (0, 0),
        }
    }
}

/// Sizes of a forward convolution from an `[n, h, w, cin]` image to an
/// `[n, ho, wo, cout]` image.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    ho: usize,
    wo: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Geometry {
    fn new(spec: &ConvSpec, n: usize, h: usize, w: usize, op: &'static str) -> Result<Self> {
        spec.validate(op)?;
        let (ho, wo) = spec
            .output_size(h, w)
            .ok_or_else(|| invalid(op, format!("input {h}x{w} smaller than kernel")))?;
        let (ph, pw) = spec.pad_before();
        Ok(Self {
            n,
            h,
            w,
            cin: spec.in_channels,
            ho,
            wo,
            cout: spec.out_channels,
            kh: spec.kernel_rows,
            kw: spec.kernel_cols,
            sh: spec.stride_rows,
            sw: spec.stride_cols,
            ph,
            pw,
        })
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Input row for output row `o` and kernel tap `k`, if inside the image.
    fn in_row(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.sh + k).checked_sub(self.ph).filter(|&r| r < self.h)
    }

    fn in_col(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.sw + k).checked_sub(self.pw).filter(|&c| c < self.w)
    }

    fn is_identity_patch(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1
    }

    /// Unfolds `x` into `[n*ho*wo, kh*kw*cin]` patches.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let patch = self.patch();
        let mut col = vec![T::zero(); self.rows() * patch];
        let cin = self.cin;
        let mut row = 0;
        for b in 0..self.n {
            let img = &x[b * self.h * self.w * cin..(b + 1) * self.h * self.w * cin];
            for oh in 0..self.ho {
                for ow in 0..self.wo {
                    let dst = &mut col[row * patch..(row + 1) * patch];
                    for ki in 0..self.kh {
                        let Some(ih) = self.in_row(oh, ki) else {
                            continue;
                        };
                        for kj in 0..self.kw {
                            let Some(iw) = self.in_col(ow, kj) else {
                                continue;
                            };
                            let src = (ih * self.w + iw) * cin;
                            let off = (ki * self.kw + kj) * cin;
                            dst[off..off + cin].copy_from_slice(&img[src..src + cin]);
                        }
                    }
                    row += 1;
                }
            }
        }
        col
    }

    /// Adjoint of [`Geometry::im2col`]: scatters patches back, accumulating.
    fn col2im<T: Real>(&self, col: &[T], x: &mut [T]) {
        let patch = self.patch();
        let cin = self.cin;
        let mut row = 0;
        for b in 0..self.n {
            let img = &mut x[b * self.h * self.w * cin..(b + 1) * self.h * self.w * cin];
            for oh in 0..self.ho {
                for ow in 0..self.wo {
                    let src = &col[row * patch..(row + 1) * patch];
                    for ki in 0..self.kh {
                        let Some(ih) = self.in_row(oh, ki) else {
                            continue;
                        };
                        for kj in 0..self.kw {
                            let Some(iw) = self.in_col(ow, kj) else {
                                continue;
                            };
                            let dst = (ih * self.w + iw) * cin;
                            let off = (ki * self.kw + kj) * cin;
                            for (d, &s) in img[dst..dst + cin].iter_mut().zip(&src[off..off + cin]) {
                                *d += s;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// `y[n*ho*wo, cout] = patches(x) * w`.
    fn forward<T: Real>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.rows() * self.cout];
        if self.is_identity_patch() {
            T::gemm(self.rows(), self.patch(), self.cout, x, false, w, false, &mut y, false);
        } else {
            let col = self.im2col(x);
            T::gemm(self.rows(), self.patch(), self.cout, &col, false, w, false, &mut y, false);
        }
        y
    }

    /// Gradient of `<y, forward(x, w)>` with respect to `x`.
    fn input_grad<T: Real>(&self, w: &[T], dy: &[T]) -> Vec<T> {
        let mut dcol = vec![T::zero(); self.rows() * self.patch()];
        T::gemm(self.rows(), self.cout, self.patch(), dy, false, w, true, &mut dcol, false);
        if self.is_identity_patch() {
            return dcol;
        }
        let mut dx = vec![T::zero(); self.n * self.h * self.w * self.cin];
        self.col2im(&dcol, &mut dx);
        dx
    }

    /// Gradient of `<y, forward(x, w)>` with respect to `w`.
    fn weight_grad<T: Real>(&self, x: &[T], dy: &[T]) -> Vec<T> {
        let mut dw = vec![T::zero(); self.patch() * self.cout];
        if self.is_identity_patch() {
            T::gemm(self.patch(), self.rows(), self.cout, x, true, dy, false, &mut dw, false);
        } else {
            let col = self.im2col(x);
            T::gemm(self.patch(), self.rows(), self.cout, &col, true, dy, false, &mut dw, false);
        }
        dw
    }
}

fn add_bias<T: Real>(y: &mut [T], b: &[T]) {
    for row in y.chunks_exact_mut(b.len()) {
        for (v, &bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
}

fn bias_grad<T: Real>(dy: &[T], channels: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for row in dy.chunks_exact(channels) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    db
}

fn check_params<T: Real>(
    op: &'static str,
    w: &Tensor<T>,
    w_shape: [usize; 4],
    b: Option<&Tensor<T>>,
    bias_len: usize,
) -> Result<()> {
    w.expect_shape(op, &w_shape)?;
    if let Some(b) = b {
        b.expect_shape(op, &[bias_len])?;
    }
    Ok(())
}

fn check_channels(op: &'static str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: vec![expected],
            actual: vec![got],
        });
    }
    Ok(())
}

/// Cross-correlation of `x` (`[N,H,W,Cin]` or `[H,W,Cin]`) with
/// `w` (`[kh,kw,Cin,Cout]`) plus bias.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    let (n, h, wd, c) = x.nhwc(OP)?;
    check_channels(OP, c, spec.in_channels)?;
    check_params(OP, w, spec.conv_weight_shape(), Some(b), spec.out_channels)?;
    x.check_finite(OP)?;
    let g = Geometry::new(spec, n, h, wd, OP)?;
    let mut y = g.forward(x.data(), w.data());
    add_bias(&mut y, b.data());
    Tensor::new(spatial_shape(x.shape(), n, g.ho, g.wo, g.cout), y)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T: Real> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of a scalar loss through [`conv2d`], given `dL/dy`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (input, weight, bias) = conv2d_backward_with(x, w, spec, grad_out, true)?;
    Ok(ConvGrads {
        input: input.expect("input gradient requested"),
        weight,
        bias,
    })
}

/// [`conv2d_backward`] that can skip the input gradient (first layer).
pub(crate) fn conv2d_backward_with<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    const OP: &str = "conv2d_backward";
    let (n, h, wd, c) = x.nhwc(OP)?;
    check_channels(OP, c, spec.in_channels)?;
    check_params(OP, w, spec.conv_weight_shape(), None, 0)?;
    let g = Geometry::new(spec, n, h, wd, OP)?;
    grad_out.expect_shape(OP, &spatial_shape(x.shape(), n, g.ho, g.wo, g.cout))?;
    check_finite(grad_out.data(), OP)?;
    let dy = grad_out.data();
    let dx = if want_input {
        Some(Tensor::new(x.shape().to_vec(), g.input_grad(w.data(), dy))?)
    } else {
        None
    };
    let dw = Tensor::new(w.shape().to_vec(), g.weight_grad(x.data(), dy))?;
    let db = Tensor::new([g.cout], bias_grad(dy, g.cout))?;
    Ok((dx, dw, db))
}

/// Geometry of the forward convolution whose adjoint is the transposed
/// convolution of an `[n, h, w, spec.in_channels]` input.
fn transposed_geometry(spec: &ConvSpec, n: usize, h: usize, w: usize, op: &'static str) -> Result<Geometry> {
    spec.validate(op)?;
    let (ho, wo) = spec.transposed_output_size(h, w);
    let adjoint = ConvSpec {
        in_channels: spec.out_channels,
        out_channels: spec.in_channels,
        ..*spec
    };
    let g = Geometry::new(&adjoint, n, ho, wo, op)?;
    debug_assert_eq!((g.ho, g.wo), (h, w));
    Ok(g)
}

/// Transposed convolution: the adjoint of the strided [`conv2d`] with the
/// same kernel. `w` is `[kh, kw, Cout, Cin]`; with same padding the output
/// is the input scaled by the stride along each axis.
pub fn transposed_conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    const OP: &str = "transposed_conv2d";
    let (n, h, wd, c) = x.nhwc(OP)?;
    check_channels(OP, c, spec.in_channels)?;
    check_params(OP, w, spec.transposed_weight_shape(), Some(b), spec.out_channels)?;
    x.check_finite(OP)?;
    let g = transposed_geometry(spec, n, h, wd, OP)?;
    let mut y = g.input_grad(w.data(), x.data());
    add_bias(&mut y, b.data());
    Tensor::new(spatial_shape(x.shape(), n, g.h, g.w, spec.out_channels), y)
}

pub fn transposed_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (input, weight, bias) = transposed_conv2d_backward_with(x, w, spec, grad_out, true)?;
    Ok(ConvGrads {
        input: input.expect("input gradient requested"),
        weight,
        bias,
    })
}

pub(crate) fn transposed_conv2d_backward_with<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    const OP: &str = "transposed_conv2d_backward";
    let (n, h, wd, c) = x.nhwc(OP)?;
    check_channels(OP, c, spec.in_channels)?;
    check_params(OP, w, spec.transposed_weight_shape(), None, 0)?;
    let g = transposed_geometry(spec, n, h, wd, OP)?;
    grad_out.expect_shape(OP, &spatial_shape(x.shape(), n, g.h, g.w, spec.out_channels))?;
    check_finite(grad_out.data(), OP)?;
    let dy = grad_out.data();
    // y = col2im(x * w^T): dx = patches(dy) * w, dw^T = x^T * patches(dy).
    let dx = if want_input {
        Some(Tensor::new(x.shape().to_vec(), g.forward(dy, w.data()))?)
    } else {
        None
    };
    let dw = Tensor::new(w.shape().to_vec(), g.weight_grad(dy, x.data()))?;
    let db = Tensor::new([spec.out_channels], bias_grad(dy, spec.out_channels))?;
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct seven-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: &ConvSpec) -> Vec<f64> {
        let (n, h, wd, cin) = x.nhwc("naive").unwrap();
        let (ho, wo) = spec.output_size(h, wd).unwrap();
        let (ph, pw) = spec.pad_before();
        let cout = spec.out_channels;
        let mut y = vec![0.0; n * ho * wo * cout];
        for b_ in 0..n {
            for oh in 0..ho {
                for ow in 0..wo {
                    for co in 0..cout {
                        let mut acc = b.data()[co];
                        for ki in 0..spec.kernel_rows {
                            for kj in 0..spec.kernel_cols {
                                let ih = (oh * spec.stride_rows + ki) as isize - ph as isize;
                                let iw = (ow * spec.stride_cols + kj) as isize - pw as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xv = x.data()[((b_ * h + ih as usize) * wd + iw as usize) * cin + ci];
                                    let wv = w.data()[((ki * spec.kernel_cols + kj) * cin + ci) * cout + co];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y[((b_ * ho + oh) * wo + ow) * cout + co] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn single_pixel() {
        let spec = ConvSpec::new((1, 1), (1, 1), 1, 1);
        let x = Tensor::new([1, 1, 1], vec![3.0f32]).unwrap();
        let w = Tensor::new([1, 1, 1, 1], vec![2.0f32]).unwrap();
        let b = Tensor::new([1], vec![1.0f32]).unwrap();
        assert_eq!(conv2d(&x, &w, &b, &spec).unwrap().data(), &[7.0]);
    }

    #[test]
    fn strided_column_same_padding() {
        let spec = ConvSpec::column_wise(3, 2, 1, 1);
        let x = Tensor::new([4, 1, 1], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new([3, 1, 1, 1], vec![1.0; 3]).unwrap();
        let b = Tensor::zeros([1]);
        let y = conv2d(&x, &w, &b, &spec).unwrap();
        assert_eq!(y.shape(), &[2, 1, 1]);
        assert_eq!(y.data(), &[3.0, 9.0]);
    }

    #[test]
    fn strides_halve_one_axis_each() {
        let x = Tensor::<f32>::zeros([1, 128, 128, 1]);
        let col = ConvSpec::column_wise(9, 2, 1, 1);
        let row = ConvSpec::row_wise(5, 2, 1, 1);
        let y = conv2d(&x, &Tensor::zeros(col.conv_weight_shape()), &Tensor::zeros([1]), &col).unwrap();
        assert_eq!(y.shape(), &[1, 64, 128, 1]);
        let z = conv2d(&y, &Tensor::zeros(row.conv_weight_shape()), &Tensor::zeros([1]), &row).unwrap();
        assert_eq!(z.shape(), &[1, 64, 64, 1]);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in [
            ConvSpec::new((3, 3), (1, 1), 2, 3),
            ConvSpec::new((5, 2), (1, 1), 3, 2),
            ConvSpec::new((4, 1), (2, 1), 2, 2),
            ConvSpec::new((3, 3), (2, 2), 1, 2).with_padding(Padding::Valid),
        ] {
            let x = random(&[2, 7, 6, spec.in_channels], &mut rng);
            let w = random(&spec.conv_weight_shape(), &mut rng);
            let b = random(&[spec.out_channels], &mut rng);
            let y = conv2d(&x, &w, &b, &spec).unwrap();
            for (a, e) in y.data().iter().zip(naive_conv(&x, &w, &b, &spec)) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_single_pixel() {
        let spec = ConvSpec::column_wise(2, 2, 1, 1);
        let x = Tensor::new([1, 1, 1], vec![5.0f64]).unwrap();
        let w = Tensor::new([2, 1, 1, 1], vec![1.0; 2]).unwrap();
        let y = transposed_conv2d(&x, &w, &Tensor::zeros([1]), &spec).unwrap();
        assert_eq!(y.shape(), &[2, 1, 1]);
        assert_eq!(y.data(), &[5.0, 5.0]);
    }

    #[test]
    fn transposed_is_adjoint_of_strided_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for spec in [
            ConvSpec::new((3, 3), (2, 2), 2, 3),
            ConvSpec::row_wise(4, 2, 3, 2),
            ConvSpec::column_wise(5, 2, 2, 2),
        ] {
            // conv: [6,6,out] -> [3,3,in] in transposed terms
            let adj = ConvSpec {
                in_channels: spec.out_channels,
                out_channels: spec.in_channels,
                ..spec
            };
            let big = random(&[6, 6, spec.out_channels], &mut rng);
            let w = random(&spec.transposed_weight_shape(), &mut rng);
            let small_shape = {
                let (h, w_) = adj.output_size(6, 6).unwrap();
                [h, w_, spec.in_channels]
            };
            let small = random(&small_shape, &mut rng);
            let zero_in = Tensor::zeros([spec.in_channels]);
            let zero_out = Tensor::zeros([spec.out_channels]);
            let lhs = conv2d(&big, &w, &zero_in, &adj).unwrap().dot(&small).unwrap();
            let rhs = big
                .dot(&transposed_conv2d(&small, &w, &zero_out, &spec).unwrap())
                .unwrap();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    fn check_grads(transposed: bool, spec: ConvSpec, in_shape: &[usize], seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(in_shape, &mut rng);
        let wshape = if transposed {
            spec.transposed_weight_shape()
        } else {
            spec.conv_weight_shape()
        };
        let w = random(&wshape, &mut rng);
        let b = random(&[spec.out_channels], &mut rng);
        let fwd = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            if transposed {
                transposed_conv2d(x, w, b, &spec).unwrap()
            } else {
                conv2d(x, w, b, &spec).unwrap()
            }
        };
        let y0 = fwd(&x, &w, &b);
        let proj = random(y0.shape(), &mut rng);
        let grads = if transposed {
            transposed_conv2d_backward(&x, &w, &spec, &proj).unwrap()
        } else {
            conv2d_backward(&x, &w, &spec, &proj).unwrap()
        };
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| fwd(x, w, b).dot(&proj).unwrap();
        let ex = finite_diff_gradcheck(
            |v| loss(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), &w, &b),
            x.data(),
            grads.input.data(),
            1e-5,
        );
        let ew = finite_diff_gradcheck(
            |v| loss(&x, &Tensor::new(w.shape().to_vec(), v.to_vec()).unwrap(), &b),
            w.data(),
            grads.weight.data(),
            1e-5,
        );
        let eb = finite_diff_gradcheck(
            |v| loss(&x, &w, &Tensor::new(b.shape().to_vec(), v.to_vec()).unwrap()),
            b.data(),
            grads.bias.data(),
            1e-5,
        );
        ex.max(ew).max(eb)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let err = check_grads(false, ConvSpec::new((3, 3), (1, 1), 2, 4), &[8, 8, 2], 5);
        assert!(err < 1e-6, "{err}");
        let err = check_grads(false, ConvSpec::column_wise(4, 2, 2, 3), &[2, 8, 5, 2], 6);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn transposed_gradients_match_finite_differences() {
        let err = check_grads(true, ConvSpec::row_wise(4, 2, 3, 2), &[2, 3, 4, 3], 7);
        assert!(err < 1e-6, "{err}");
        let err = check_grads(true, ConvSpec::new((3, 3), (2, 2), 2, 2), &[3, 3, 2], 8);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_shapes_and_non_finite() {
        let spec = ConvSpec::new((3, 3), (1, 1), 2, 1);
        let x = Tensor::<f32>::zeros([4, 4, 3]);
        let w = Tensor::zeros(spec.conv_weight_shape());
        let b = Tensor::zeros([1]);
        assert!(matches!(conv2d(&x, &w, &b, &spec), Err(TensorError::ShapeMismatch { .. })));
        let mut x = Tensor::<f32>::zeros([4, 4, 2]);
        x.data_mut()[5] = f32::INFINITY;
        assert!(matches!(conv2d(&x, &w, &b, &spec), Err(TensorError::NonFinite { index: 5, .. })));
    }
}

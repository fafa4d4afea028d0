use super::{check_finite, invalid, spatial_shape, Real, Result, Tensor, TensorError};

/// Source index pairs and weights for an align-corners linear resize of one
/// axis from `from` to `to` samples.
fn axis_taps(from: usize, to: usize) -> Vec<(usize, usize, f64)> {
    (0..to)
        .map(|i| {
            if to == 1 || from == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (from - 1) as f64 / (to - 1) as f64;
            let lo = (pos.floor() as usize).min(from - 1);
            let hi = (lo + 1).min(from - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear resize with align-corners sampling: output corners reproduce
/// the input corners exactly.
pub fn bilinear_upsample<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    const OP: &str = "bilinear_upsample";
    let (n, h, w, c) = x.nhwc(OP)?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid(OP, "zero-size output"));
    }
    if out_h < h || out_w < w {
        return Err(invalid(OP, format!("cannot shrink {h}x{w} to {out_h}x{out_w}")));
    }
    x.check_finite(OP)?;
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let src = x.data();
    let mut out = vec![T::zero(); n * out_h * out_w * c];
    for b in 0..n {
        let img = &src[b * h * w * c..];
        for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
            let fr = T::lit(fr);
            for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                let fc = T::lit(fc);
                let w00 = (T::one() - fr) * (T::one() - fc);
                let w01 = (T::one() - fr) * fc;
                let w10 = fr * (T::one() - fc);
                let w11 = fr * fc;
                let dst = ((b * out_h + oi) * out_w + oj) * c;
                let (p00, p01) = ((r0 * w + c0) * c, (r0 * w + c1) * c);
                let (p10, p11) = ((r1 * w + c0) * c, (r1 * w + c1) * c);
                for k in 0..c {
                    out[dst + k] = w00 * img[p00 + k]
                        + w01 * img[p01 + k]
                        + w10 * img[p10 + k]
                        + w11 * img[p11 + k];
                }
            }
        }
    }
    Tensor::new(spatial_shape(x.shape(), n, out_h, out_w, c), out)
}

/// Adjoint of [`bilinear_upsample`] back onto an `in_h x in_w` grid.
pub fn bilinear_upsample_backward<T: Real>(
    grad_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "bilinear_upsample_backward";
    let (n, out_h, out_w, c) = grad_out.nhwc(OP)?;
    if in_h == 0 || in_w == 0 || in_h > out_h || in_w > out_w {
        return Err(invalid(OP, "input grid must be non-empty and not larger than output"));
    }
    check_finite(grad_out.data(), OP)?;
    let rows = axis_taps(in_h, out_h);
    let cols = axis_taps(in_w, out_w);
    let g = grad_out.data();
    let mut dx = vec![T::zero(); n * in_h * in_w * c];
    for b in 0..n {
        let img = &mut dx[b * in_h * in_w * c..(b + 1) * in_h * in_w * c];
        for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
            let fr = T::lit(fr);
            for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                let fc = T::lit(fc);
                let weights = [
                    ((r0 * in_w + c0) * c, (T::one() - fr) * (T::one() - fc)),
                    ((r0 * in_w + c1) * c, (T::one() - fr) * fc),
                    ((r1 * in_w + c0) * c, fr * (T::one() - fc)),
                    ((r1 * in_w + c1) * c, fr * fc),
                ];
                let src = ((b * out_h + oi) * out_w + oj) * c;
                for (pos, wt) in weights {
                    for k in 0..c {
                        img[pos + k] += wt * g[src + k];
                    }
                }
            }
        }
    }
    Tensor::new(spatial_shape(grad_out.shape(), n, in_h, in_w, c), dx)
}

/// Joins `a` and `b` along the channel (last) axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let (na, ha, wa, ca) = a.nhwc(OP)?;
    let (nb, hb, wb, cb) = b.nhwc(OP)?;
    if (na, ha, wa) != (nb, hb, wb) || a.shape().len() != b.shape().len() {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    Tensor::new(spatial_shape(a.shape(), na, ha, wa, ca + cb), out)
}

/// Inverse of [`concat_channels`]: the first `first` channels, then the rest.
pub fn split_channels<T: Real>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    const OP: &str = "split_channels";
    let (n, h, w, c) = x.nhwc(OP)?;
    if first > c {
        return Err(invalid(OP, format!("cannot take {first} of {c} channels")));
    }
    let mut a = Vec::with_capacity(n * h * w * first);
    let mut b = Vec::with_capacity(n * h * w * (c - first));
    for row in x.data().chunks_exact(c) {
        a.extend_from_slice(&row[..first]);
        b.extend_from_slice(&row[first..]);
    }
    Ok((
        Tensor::new(spatial_shape(x.shape(), n, h, w, first), a)?,
        Tensor::new(spatial_shape(x.shape(), n, h, w, c - first), b)?,
    ))
}

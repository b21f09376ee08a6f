//! Forward and adjoint kernels. Every reduction sums in ascending index
//! order so results are reproducible bit for bit.

use super::{shape_err, Scalar, Tensor, TensorError};

/// `out[m x p] = a[m x n] * b[n x p]`
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for l in 0..n {
            let av = a[i * n + l];
            let brow = &b[l * p..(l + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m x p] = a[m x n] * b[p x n]^T`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * p + j] = acc;
        }
    }
    out
}

/// `out[m x p] = a[n x m]^T * b[n x p]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    for l in 0..n {
        let brow = &b[l * p..(l + 1) * p];
        for i in 0..m {
            let av = a[l * m + i];
            let row = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn dims2<T>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, n) = dims2(a, "matmul")?;
    let (n2, p) = dims2(b, "matmul")?;
    if n != n2 {
        return Err(shape_err("matmul", format!("{m}x{n} * {n2}x{p}")));
    }
    Tensor::new([m, p], gemm(a.data(), b.data(), m, n, p))
}

/// Adjoints of `a * b` given upstream `g`: `(g * b^T, a^T * g)`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let (m, n) = dims2(a, "matmul_backward")?;
    let (_, p) = dims2(b, "matmul_backward")?;
    if g.shape() != [m, p] {
        return Err(shape_err("matmul_backward", format!("upstream {:?}", g.shape())));
    }
    let da = Tensor::new([m, n], gemm_nt(g.data(), b.data(), m, p, n))?;
    let db = Tensor::new([n, p], gemm_tn(a.data(), g.data(), m, n, p))?;
    Ok((da, db))
}

/// Output spatial extent of a 3x3, stride 2, pad 1 convolution.
pub fn conv_out_dim(d: usize) -> usize {
    d.div_ceil(2)
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims<T>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<ConvDims, TensorError> {
    let [c_in, h, w] = *input.shape() else {
        return Err(shape_err("conv2d", format!("input shape {:?}", input.shape())));
    };
    let [c_out, kc, 3, 3] = *kernel.shape() else {
        return Err(shape_err("conv2d", format!("kernel shape {:?}", kernel.shape())));
    };
    if kc != c_in {
        return Err(shape_err("conv2d", format!("kernel expects {kc} input channels, got {c_in}")));
    }
    if bias.shape() != [c_out] {
        return Err(shape_err("conv2d", format!("bias shape {:?}", bias.shape())));
    }
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        oh: conv_out_dim(h),
        ow: conv_out_dim(w),
    })
}

/// Unfold zero-padded 3x3/stride-2 windows into a `(c_in*9) x (oh*ow)` matrix.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims) -> Vec<T> {
    let npix = d.oh * d.ow;
    let mut cols = vec![T::zero(); d.c_in * 9 * npix];
    for c in 0..d.c_in {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * npix..][..npix];
                for oy in 0..d.oh {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix >= 0 && ix < d.w as isize {
                            row[oy * d.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], d: &ConvDims) -> Vec<T> {
    let npix = d.oh * d.ow;
    let mut x = vec![T::zero(); d.c_in * d.h * d.w];
    for c in 0..d.c_in {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * npix..][..npix];
                for oy in 0..d.oh {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix >= 0 && ix < d.w as isize {
                            plane[iy as usize * d.w + ix as usize] += row[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 3x3 cross-correlation, stride 2, zero padding 1, plus per-channel bias.
///
/// `input` is `c_in x h x w`, `kernel` is `c_out x c_in x 3 x 3`, `bias` is
/// `c_out`; the result is `c_out x ceil(h/2) x ceil(w/2)`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let d = conv_dims(input, kernel, bias)?;
    let npix = d.oh * d.ow;
    let cols = im2col(input.data(), &d);
    let mut out = gemm(kernel.data(), &cols, d.c_out, d.c_in * 9, npix);
    for (o, chan) in out.chunks_exact_mut(npix).enumerate() {
        let b = bias.data()[o];
        for v in chan {
            *v += b;
        }
    }
    Tensor::new([d.c_out, d.oh, d.ow], out)
}

/// Adjoints of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let d = conv_dims(input, kernel, bias)?;
    if g.shape() != [d.c_out, d.oh, d.ow] {
        return Err(shape_err("conv2d_backward", format!("upstream {:?}", g.shape())));
    }
    let npix = d.oh * d.ow;
    let k9 = d.c_in * 9;
    let cols = im2col(input.data(), &d);
    let dk = gemm_nt(g.data(), &cols, d.c_out, npix, k9);
    let dcols = gemm_tn(kernel.data(), g.data(), d.c_out, k9, npix);
    let dx = col2im(&dcols, &d);
    let db = g
        .data()
        .chunks_exact(npix)
        .map(|chan| chan.iter().copied().sum())
        .collect();
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::new([d.c_out], db)?,
    ))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if x.shape() != g.shape() {
        return Err(shape_err("relu_backward", format!("{:?} vs {:?}", x.shape(), g.shape())));
    }
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Spatial mean per channel of a `c x h x w` tensor.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let [c, h, w] = *x.shape() else {
        return Err(shape_err("global_avg_pool", format!("shape {:?}", x.shape())));
    };
    let n = T::from_f64((h * w) as f64);
    let data = x
        .data()
        .chunks_exact(h * w)
        .map(|chan| chan.iter().copied().sum::<T>() / n)
        .collect();
    Tensor::new([c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    g: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let [c, h, w] = *input_shape else {
        return Err(shape_err("global_avg_pool_backward", format!("shape {input_shape:?}")));
    };
    if g.shape() != [c] {
        return Err(shape_err("global_avg_pool_backward", format!("upstream {:?}", g.shape())));
    }
    let n = T::from_f64((h * w) as f64);
    let mut data = Vec::with_capacity(c * h * w);
    for &gv in g.data() {
        data.extend(std::iter::repeat_n(gv / n, h * w));
    }
    Tensor::new([c, h, w], data)
}

/// Affine map `x * W + b` for a vector `x` of length `n`, `W` of shape
/// `n x m` and `b` of length `m`.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n, m) = dims2(w, "linear")?;
    if x.len() != n || b.shape() != [m] {
        return Err(shape_err(
            "linear",
            format!("x {:?}, W {n}x{m}, b {:?}", x.shape(), b.shape()),
        ));
    }
    let mut y = b.data().to_vec();
    for (i, &xv) in x.data().iter().enumerate() {
        for (o, &wv) in y.iter_mut().zip(&w.data()[i * m..(i + 1) * m]) {
            *o += xv * wv;
        }
    }
    Tensor::new([m], y)
}

/// Adjoints of [`linear`]: `(dx, dW, db)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let (n, m) = dims2(w, "linear_backward")?;
    if x.len() != n || g.len() != m {
        return Err(shape_err("linear_backward", format!("x {:?}, g {:?}", x.shape(), g.shape())));
    }
    let dx = gemm_nt(g.data(), w.data(), 1, m, n);
    let dw = gemm(x.data(), g.data(), n, 1, m);
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new([n, m], dw)?,
        Tensor::new([m], g.data().to_vec())?,
    ))
}

fn same_len<T>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean over all elements of `(a - b)^2`.
pub fn mean_squared_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T, TensorError> {
    same_len(a, b, "mean_squared_diff")?;
    let n = T::from_f64(a.len() as f64);
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        / n)
}

/// Gradient of [`mean_squared_diff`] with respect to `a`; the gradient with
/// respect to `b` is its negation.
pub fn mean_squared_diff_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: T,
) -> Result<Tensor<T>, TensorError> {
    same_len(a, b, "mean_squared_diff_backward")?;
    let s = T::from_f64(2.0) * g / T::from_f64(a.len() as f64);
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| s * (x - y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Mean over all elements of `|a - b|`.
pub fn mean_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T, TensorError> {
    same_len(a, b, "mean_abs_diff")?;
    let n = T::from_f64(a.len() as f64);
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n)
}

/// Subgradient of [`mean_abs_diff`] with respect to `a` (zero where `a == b`).
pub fn mean_abs_diff_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: T,
) -> Result<Tensor<T>, TensorError> {
    same_len(a, b, "mean_abs_diff_backward")?;
    let s = g / T::from_f64(a.len() as f64);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            if x > y {
                s
            } else if x < y {
                -s
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

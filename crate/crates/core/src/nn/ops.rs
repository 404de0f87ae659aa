use super::Tensor;
use crate::error::{Error, Result};

/// `y = x Wᵀ + b` over the last axis of `x`.
pub fn affine_forward(weight: &Tensor, bias: &Tensor, x: &Tensor) -> Result<Tensor> {
    let &[out_dim, in_dim] = weight.shape() else {
        return Err(Error::shape(format!("affine weight must be 2-D, found {:?}", weight.shape())));
    };
    bias.expect_shape(&[out_dim], "affine bias")?;
    let Some((&last, lead)) = x.shape().split_last() else {
        return Err(Error::shape("affine input must have at least one axis"));
    };
    if last != in_dim {
        return Err(Error::shape(format!("affine input width {last} != weight input {in_dim}")));
    }
    let rows = x.len() / in_dim.max(1);
    let w = weight.data();
    let b = bias.data();
    let mut out = Vec::with_capacity(rows * out_dim);
    for row in x.data().chunks(in_dim.max(1)).take(rows) {
        for o in 0..out_dim {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            out.push(b[o] + wr.iter().zip(row).map(|(a, c)| a * c).sum::<f64>());
        }
    }
    let mut shape = lead.to_vec();
    shape.push(out_dim);
    Tensor::new(shape, out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

#[inline]
pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Per-channel mean over every spatial cell of a `[C, ...]` tensor.
pub fn global_avg_pool(v: &Tensor) -> Result<Tensor> {
    let Some((&c, spatial)) = v.shape().split_first() else {
        return Err(Error::shape("GAP input must have a channel axis"));
    };
    let cells: usize = spatial.iter().product();
    if cells == 0 {
        return Err(Error::shape("GAP needs at least one spatial cell"));
    }
    let data = v
        .data()
        .chunks(cells)
        .map(|ch| ch.iter().sum::<f64>() / cells as f64)
        .collect();
    Tensor::new(vec![c], data)
}

/// Output length of a strided, padded convolution along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::shape(format!(
            "conv: ({input} + 2*{padding} - {kernel}) / {stride} is not a whole number"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvGeom {
    c_out: usize,
    c_in: usize,
    k: [usize; 3],
    inp: [usize; 3],
    out: [usize; 3],
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new(kernel: &Tensor, bias: &Tensor, input: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let &[c_out, c_in, kd, kh, kw] = kernel.shape() else {
            return Err(Error::shape(format!("conv kernel must be 5-D, found {:?}", kernel.shape())));
        };
        bias.expect_shape(&[c_out], "conv bias")?;
        let &[ci, d, h, w] = input.shape() else {
            return Err(Error::shape(format!("conv input must be [C, D, H, W], found {:?}", input.shape())));
        };
        if ci != c_in {
            return Err(Error::shape(format!("conv input has {ci} channels, kernel expects {c_in}")));
        }
        let out = [
            conv_output_len(d, kd, stride, padding)?,
            conv_output_len(h, kh, stride, padding)?,
            conv_output_len(w, kw, stride, padding)?,
        ];
        Ok(Self {
            c_out,
            c_in,
            k: [kd, kh, kw],
            inp: [d, h, w],
            out,
            stride,
            padding,
        })
    }

    /// Output positions `o` along an axis whose input `o*stride + tap - padding` is in range.
    fn valid(&self, axis: usize, tap: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (s, p, n) = (self.stride, self.padding, self.inp[axis]);
        (0..self.out[axis]).filter_map(move |o| {
            let i = (o * s + tap).checked_sub(p)?;
            (i < n).then_some((o, i))
        })
    }

    /// Calls `f(o, i, kernel_flat, out_flat_row, in_flat_row)` for every
    /// (output row, input row) pair along the innermost axis.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, &[(usize, usize)])) {
        let [kd, kh, kw] = self.k;
        let [_, ih, iw] = self.inp;
        let [_, oh, ow] = self.out;
        let w_pairs: Vec<Vec<(usize, usize)>> = (0..kw).map(|c| self.valid(2, c).collect()).collect();
        for o in 0..self.c_out {
            for i in 0..self.c_in {
                for a in 0..kd {
                    for (od, id) in self.valid(0, a) {
                        for b in 0..kh {
                            for (ohh, ihh) in self.valid(1, b) {
                                let out_row = (o * self.out[0] + od) * oh + ohh;
                                let in_row = (i * self.inp[0] + id) * ih + ihh;
                                for (c, pairs) in w_pairs.iter().enumerate() {
                                    let kidx = (((o * self.c_in + i) * kd + a) * kh + b) * kw + c;
                                    f(o, kidx, out_row * ow, in_row * iw, c, pairs);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense 3D cross-correlation of a `[C_in, D, H, W]` volume.
///
/// Lowered to a matrix product: every kernel tap gathers its shifted input
/// into one row of a column matrix, and each output channel accumulates
/// weighted rows.
pub fn conv3d_forward(kernel: &Tensor, bias: &Tensor, input: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(kernel, bias, input, stride, padding)?;
    let [kd, kh, kw] = g.k;
    let [_, ih, iw] = g.inp;
    let [od, oh, ow] = g.out;
    let cells = od * oh * ow;
    let taps = g.c_in * kd * kh * kw;
    let xd = input.data();

    let mut cols = vec![0.0; taps * cells];
    let mut row = 0;
    for i in 0..g.c_in {
        for a in 0..kd {
            let zs: Vec<(usize, usize)> = g.valid(0, a).collect();
            for b in 0..kh {
                let ys: Vec<(usize, usize)> = g.valid(1, b).collect();
                for c in 0..kw {
                    let dst = &mut cols[row * cells..(row + 1) * cells];
                    for &(oz, iz) in &zs {
                        for &(oy, iy) in &ys {
                            let src = ((i * g.inp[0] + iz) * ih + iy) * iw;
                            let out_row = (oz * oh + oy) * ow;
                            for (ox, ix) in g.valid(2, c) {
                                dst[out_row + ox] = xd[src + ix];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    let kd_all = kernel.data();
    let mut out = vec![0.0; g.c_out * cells];
    for (o, dst) in out.chunks_mut(cells.max(1)).enumerate().take(g.c_out) {
        dst.fill(bias.data()[o]);
        for (t, col) in cols.chunks(cells.max(1)).enumerate().take(taps) {
            let wv = kd_all[o * taps + t];
            if wv == 0.0 {
                continue;
            }
            for (y, x) in dst.iter_mut().zip(col) {
                *y += wv * x;
            }
        }
    }
    Tensor::new(vec![g.c_out, od, oh, ow], out)
}

/// Gradients of a scalar loss through [`conv3d_forward`].
#[derive(Debug, Clone)]
pub struct Conv3dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv3d_backward(
    kernel: &Tensor,
    bias: &Tensor,
    input: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Conv3dGrads> {
    let g = ConvGeom::new(kernel, bias, input, stride, padding)?;
    grad_out.expect_shape(&[g.c_out, g.out[0], g.out[1], g.out[2]], "conv grad_out")?;
    let kd = kernel.data();
    let xd = input.data();
    let gd = grad_out.data();
    let mut g_in = vec![0.0; input.len()];
    let mut g_k = vec![0.0; kernel.len()];
    g.for_each_row(|_, kidx, out_base, in_base, _, pairs| {
        let wv = kd[kidx];
        let mut acc = 0.0;
        for &(ow, iw) in pairs {
            let go = gd[out_base + ow];
            g_in[in_base + iw] += wv * go;
            acc += go * xd[in_base + iw];
        }
        g_k[kidx] += acc;
    });
    let cells: usize = g.out.iter().product();
    let g_b = gd.chunks(cells.max(1)).take(g.c_out).map(|c| c.iter().sum()).collect();
    Ok(Conv3dGrads {
        input: Tensor::new(input.shape().to_vec(), g_in)?,
        kernel: Tensor::new(kernel.shape().to_vec(), g_k)?,
        bias: Tensor::new(vec![g.c_out], g_b)?,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Nested-loop reference convolution with explicit bounds checks.
    fn naive_conv(k: &Tensor, b: &Tensor, x: &Tensor, s: usize, p: usize) -> Tensor {
        let [co, ci, kd, kh, kw] = k.shape().try_into().unwrap();
        let [_, d, h, w] = x.shape().try_into().unwrap();
        let od = (d + 2 * p - kd) / s + 1;
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (w + 2 * p - kw) / s + 1;
        let at = |c: usize, z: isize, y: isize, xx: isize| -> f64 {
            if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= w as isize {
                0.0
            } else {
                x.data()[((c * d + z as usize) * h + y as usize) * w + xx as usize]
            }
        };
        let mut out = Tensor::zeros(&[co, od, oh, ow]);
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let wv = k.data()[(((o * ci + c) * kd + a) * kh + bb) * kw + cc];
                                        acc += wv
                                            * at(
                                                c,
                                                (z * s + a) as isize - p as isize,
                                                (y * s + bb) as isize - p as isize,
                                                (xx * s + cc) as isize - p as isize,
                                            );
                                    }
                                }
                            }
                        }
                        out.data_mut()[((o * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn affine_identity_and_constant() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let y = affine_forward(&Tensor::eye(3, 3), &Tensor::zeros(&[3]), &x).unwrap();
        assert_eq!(y, x);
        let y = affine_forward(&Tensor::zeros(&[2, 3]), &Tensor::new(vec![2], vec![4.0, -1.0]).unwrap(), &x).unwrap();
        assert_eq!(y.data(), &[4.0, -1.0, 4.0, -1.0]);
        assert!(matches!(
            affine_forward(&Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2]), &x),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn affine_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(&[4, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let x = random(&[3], &mut rng);
        let y = affine_forward(&w, &b, &x).unwrap();
        assert_eq!(y.shape(), &[4]);
        for o in 0..4 {
            let mut acc = b.data()[o];
            for i in 0..3 {
                acc += w.data()[o * 3 + i] * x.data()[i];
            }
            assert!((y.data()[o] - acc).abs() <= 1e-12);
        }
    }

    #[test]
    fn activations() {
        let x = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(20.0) - 1.0).abs() < 1e-8);
        assert!(sigmoid_scalar(-20.0).abs() < 1e-8);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
    }

    #[test]
    fn gap_examples() {
        assert_eq!(global_avg_pool(&Tensor::full(&[2, 2, 2, 2], 3.5)).unwrap().data(), &[3.5, 3.5]);
        let v = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(global_avg_pool(&v).unwrap().data(), &[1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = random(&[3, 2, 2, 2], &mut rng);
        let g = global_avg_pool(&v).unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            for i in 0..8 {
                s += v.data()[c * 8 + i];
            }
            assert!((g.data()[c] - s / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_identity_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 3, 4, 5], &mut rng);
        let k = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        assert_eq!(conv3d_forward(&k, &Tensor::zeros(&[1]), &x, 1, 0).unwrap(), x);

        let k = Tensor::zeros(&[2, 1, 3, 3, 3]);
        let y = conv3d_forward(&k, &Tensor::new(vec![2], vec![0.25, -1.0]).unwrap(), &x, 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 5]);
        assert!(y.data()[..60].iter().all(|v| *v == 0.25));
        assert!(y.data()[60..].iter().all(|v| *v == -1.0));
    }

    #[test]
    fn conv_rejects_fractional_output() {
        let x = Tensor::zeros(&[1, 5, 5, 5]);
        let k = Tensor::zeros(&[1, 1, 2, 2, 2]);
        assert!(matches!(conv3d_forward(&k, &Tensor::zeros(&[1]), &x, 2, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn stride_two_downsample_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[1, 12, 12, 12], &mut rng);
        let k = random(&[1, 1, 2, 2, 2], &mut rng);
        let b = random(&[1], &mut rng);
        let y = conv3d_forward(&k, &b, &x, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 6, 6, 6]);
        assert!(y.max_abs_diff(&naive_conv(&k, &b, &x, 2, 0)) <= 1e-12);
    }

    #[test]
    fn centered_delta_kernel_preserves_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&[2, 4, 4, 4], &mut rng);
        let mut k = Tensor::zeros(&[2, 2, 3, 3, 3]);
        // Identity mapping: channel c reads channel c at the kernel center.
        k.data_mut()[13] = 1.0;
        k.data_mut()[(2 + 1) * 27 + 13] = 1.0;
        let y = conv3d_forward(&k, &Tensor::zeros(&[2]), &x, 1, 1).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs_diff(&x) == 0.0);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&[2, 3, 3, 4], &mut rng);
        let k = random(&[3, 2, 3, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let up = random(&[3, 3, 3, 4], &mut rng);
        let loss = |k: &Tensor, b: &Tensor, x: &Tensor| -> f64 {
            let y = conv3d_forward(k, b, x, 1, 1).unwrap();
            y.data().iter().zip(up.data()).map(|(a, c)| a * c).sum()
        };
        let grads = conv3d_backward(&k, &b, &x, &up, 1, 1).unwrap();
        let eps = 1e-5;
        for idx in [0, 7, 20, 71] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&k, &b, &xp) - loss(&k, &b, &xm)) / (2.0 * eps);
            assert!((fd - grads.input.data()[idx]).abs() < 1e-7);
        }
        for idx in [0, 33, 100, 161] {
            let mut kp = k.clone();
            kp.data_mut()[idx] += eps;
            let mut km = k.clone();
            km.data_mut()[idx] -= eps;
            let fd = (loss(&kp, &b, &x) - loss(&km, &b, &x)) / (2.0 * eps);
            assert!((fd - grads.kernel.data()[idx]).abs() < 1e-7);
        }
        let sum_up: f64 = up.data()[..36].iter().sum();
        assert!((grads.bias.data()[0] - sum_up).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn gap_is_linear(alpha in -10.0f64..10.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random(&[4, 3, 3, 3], &mut rng);
            let a = global_avg_pool(&v.scale(alpha)).unwrap();
            let b = global_avg_pool(&v).unwrap().scale(alpha);
            prop_assert!(a.max_abs_diff(&b) <= 1e-7);
        }

        #[test]
        fn conv_matches_naive(seed in 0u64..1000, stride in 1usize..3, padding in 0usize..2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[2, 5, 4, 5], &mut rng);
            let k = random(&[3, 2, 3, 2, 3], &mut rng);
            let b = random(&[3], &mut rng);
            if let Ok(y) = conv3d_forward(&k, &b, &x, stride, padding) {
                let r = naive_conv(&k, &b, &x, stride, padding);
                prop_assert!(y.max_abs_diff(&r) <= 1e-6 * (1.0 + r.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))));
            }
        }
    }
}

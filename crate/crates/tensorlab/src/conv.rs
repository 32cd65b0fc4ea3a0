//! 3D convolution through im2col + GEMM, and nearest-neighbour upsampling.
//!
//! Activations are `[c, w, h, d]`, kernels `[c_out, c_in, k, k, k]`.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub extent: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out: [usize; 3],
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(TensorError::invalid(
                "conv3d",
                format!("input must be [c, w, h, d], got {input:?}"),
            ));
        }
        if kernel.len() != 5 || kernel[2] != kernel[3] || kernel[3] != kernel[4] {
            return Err(TensorError::invalid(
                "conv3d",
                format!("kernel must be [c_out, c_in, k, k, k], got {kernel:?}"),
            ));
        }
        if kernel[1] != input[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d (kernel c_in vs input channels)",
                expected: vec![input[0]],
                got: vec![kernel[1]],
            });
        }
        let k = kernel[2];
        if k % 2 == 0 {
            return Err(TensorError::invalid("conv3d", format!("kernel size {k} is even")));
        }
        if !(1..=2).contains(&stride) {
            return Err(TensorError::invalid("conv3d", format!("stride {stride} not in {{1, 2}}")));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            let e = input[a + 1] + 2 * pad;
            if e < k {
                return Err(TensorError::invalid(
                    "conv3d",
                    format!("padded extent {e} smaller than kernel {k}"),
                ));
            }
            out[a] = (e - k) / stride + 1;
        }
        Ok(Self {
            c_in: input[0],
            c_out: kernel[0],
            extent: [input[1], input[2], input[3]],
            k,
            stride,
            pad,
            out,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.c_out, self.out[0], self.out[1], self.out[2]]
    }

    fn n_out(&self) -> usize {
        self.out.iter().product()
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }

    fn use_direct(&self) -> bool {
        self.stride == 1 && self.c_out <= 2 && self.k <= 7 && !self.is_pointwise()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input coordinate for output index `o` and kernel tap `kk` along one axis.
    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + kk) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// Output indices `o` along one axis whose tap `kk` lands inside `0..extent`,
/// as a half-open range, together with the source index of the first one.
#[inline]
fn valid_range(g: &ConvGeom, kk: usize, extent: usize, n_out: usize) -> (usize, usize, usize) {
    // o * stride + kk - pad in [0, extent)
    let lo = g.pad.saturating_sub(kk).div_ceil(g.stride);
    let hi_excl = {
        let limit = extent + g.pad; // o * stride + kk < limit
        if limit <= kk {
            0
        } else {
            ((limit - kk - 1) / g.stride + 1).min(n_out)
        }
    };
    let lo = lo.min(hi_excl);
    let src0 = (lo * g.stride + kk).saturating_sub(g.pad);
    (lo, hi_excl, src0)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let [w, h, d] = g.extent;
    let [ow, oh, od] = g.out;
    let n = g.n_out();
    let k = g.k;
    let s = g.stride;
    for ci in 0..g.c_in {
        let xc = &x[ci * w * h * d..(ci + 1) * w * h * d];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let row = ((ci * k + kx) * k + ky) * k + kz;
                    let dst = &mut col[row * n..(row + 1) * n];
                    let (zlo, zhi, iz0) = valid_range(g, kz, d, od);
                    for ox in 0..ow {
                        let sx = g.src(ox, kx, w);
                        for oy in 0..oh {
                            let base = (ox * oh + oy) * od;
                            let out = &mut dst[base..base + od];
                            let (Some(ix), Some(iy)) = (sx, g.src(oy, ky, h)) else {
                                out.fill(T::zero());
                                continue;
                            };
                            let line = &xc[(ix * h + iy) * d..(ix * h + iy + 1) * d];
                            out[..zlo].fill(T::zero());
                            out[zhi..].fill(T::zero());
                            if s == 1 {
                                out[zlo..zhi].copy_from_slice(&line[iz0..iz0 + (zhi - zlo)]);
                            } else {
                                for (j, o) in out[zlo..zhi].iter_mut().enumerate() {
                                    *o = line[iz0 + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let [w, h, d] = g.extent;
    let [ow, oh, od] = g.out;
    let n = g.n_out();
    let k = g.k;
    let s = g.stride;
    for ci in 0..g.c_in {
        let xc = &mut dx[ci * w * h * d..(ci + 1) * w * h * d];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let row = ((ci * k + kx) * k + ky) * k + kz;
                    let src = &col[row * n..(row + 1) * n];
                    let (zlo, zhi, iz0) = valid_range(g, kz, d, od);
                    for ox in 0..ow {
                        let Some(ix) = g.src(ox, kx, w) else { continue };
                        for oy in 0..oh {
                            let Some(iy) = g.src(oy, ky, h) else { continue };
                            let base = (ox * oh + oy) * od;
                            let line = &mut xc[(ix * h + iy) * d..(ix * h + iy + 1) * d];
                            let vals = &src[base + zlo..base + zhi];
                            if s == 1 {
                                for (l, &v) in line[iz0..iz0 + vals.len()].iter_mut().zip(vals) {
                                    *l += v;
                                }
                            } else {
                                for (j, &v) in vals.iter().enumerate() {
                                    line[iz0 + j * s] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn columns<'a, T: Real>(x: &'a Tensor<T>, g: &ConvGeom, scratch: &'a mut Vec<T>) -> &'a [T] {
    if g.is_pointwise() {
        return x.data();
    }
    scratch.clear();
    scratch.resize(g.rows() * g.n_out(), T::zero());
    im2col(x.data(), g, scratch);
    scratch
}

pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), stride, pad)?;
    if let Some(b) = bias {
        b.expect_shape("conv3d bias", &[g.c_out])?;
    }
    let n = g.n_out();
    let rows = g.rows();
    let mut out = Tensor::zeros(&g.out_shape());
    if let Some(b) = bias {
        for (c, &bv) in b.data().iter().enumerate() {
            out.channel_mut(c).fill(bv);
        }
    }
    if g.use_direct() {
        direct_forward(x.data(), kernel.data(), &g, out.data_mut());
        return Ok(out);
    }
    let mut scratch = Vec::new();
    let col = columns(x, &g, &mut scratch);
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        g.c_out,
        rows,
        n,
        T::one(),
        kernel.data(),
        (rows as isize, 1),
        col,
        (n as isize, 1),
        beta,
        out.data_mut(),
        (n as isize, 1),
    );
    Ok(out)
}

/// Stride-1 convolution by shifted line updates, for layers with so few output
/// channels that the column matrix would dwarf the work.
fn direct_forward<T: Real>(x: &[T], kernel: &[T], g: &ConvGeom, out: &mut [T]) {
    let [w, h, d] = g.extent;
    let [ow, oh, od] = g.out;
    let (k, vol, n) = (g.k, w * h * d, g.n_out());
    for co in 0..g.c_out {
        let yc = &mut out[co * n..(co + 1) * n];
        for ci in 0..g.c_in {
            let xc = &x[ci * vol..(ci + 1) * vol];
            for kx in 0..k {
                let (xlo, xhi, ix0) = valid_range(g, kx, w, ow);
                for ky in 0..k {
                    let (ylo, yhi, iy0) = valid_range(g, ky, h, oh);
                    let taps = &kernel[(((co * g.c_in + ci) * k + kx) * k + ky) * k..][..k];
                    for ox in xlo..xhi {
                        let ix = ix0 + ox - xlo;
                        for oy in ylo..yhi {
                            let iy = iy0 + oy - ylo;
                            let line = &xc[(ix * h + iy) * d..][..d];
                            let dst = &mut yc[(ox * oh + oy) * od..][..od];
                            for (kz, &wv) in taps.iter().enumerate() {
                                let (zlo, zhi, iz0) = valid_range(g, kz, d, od);
                                for (y, &v) in dst[zlo..zhi].iter_mut().zip(&line[iz0..]) {
                                    *y += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn direct_kernel_grad<T: Real>(x: &[T], grad_out: &[T], g: &ConvGeom, gk: &mut [T]) {
    let [w, h, d] = g.extent;
    let [ow, oh, od] = g.out;
    let (k, vol, n) = (g.k, w * h * d, g.n_out());
    for co in 0..g.c_out {
        let gy = &grad_out[co * n..(co + 1) * n];
        for ci in 0..g.c_in {
            let xc = &x[ci * vol..(ci + 1) * vol];
            for kx in 0..k {
                let (xlo, xhi, ix0) = valid_range(g, kx, w, ow);
                for ky in 0..k {
                    let (ylo, yhi, iy0) = valid_range(g, ky, h, oh);
                    let mut acc = [0.0f64; 7];
                    for ox in xlo..xhi {
                        let ix = ix0 + ox - xlo;
                        for oy in ylo..yhi {
                            let iy = iy0 + oy - ylo;
                            let line = &xc[(ix * h + iy) * d..][..d];
                            let src = &gy[(ox * oh + oy) * od..][..od];
                            for (kz, a) in acc.iter_mut().enumerate().take(k) {
                                let (zlo, zhi, iz0) = valid_range(g, kz, d, od);
                                let mut dot = T::zero();
                                for (&gv, &v) in src[zlo..zhi].iter().zip(&line[iz0..]) {
                                    dot += gv * v;
                                }
                                *a += dot.as_f64();
                            }
                        }
                    }
                    let taps = &mut gk[(((co * g.c_in + ci) * k + kx) * k + ky) * k..][..k];
                    for (t, a) in taps.iter_mut().zip(acc) {
                        *t = T::lit(a);
                    }
                }
            }
        }
    }
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), stride, pad)?;
    grad_out.expect_shape("conv3d backward", &g.out_shape())?;
    let n = g.n_out();
    let rows = g.rows();
    let [want_x, want_k, want_b] = want;

    let kernel_grad = if want_k && g.use_direct() {
        let mut gk = Tensor::zeros(kernel.shape());
        direct_kernel_grad(x.data(), grad_out.data(), &g, gk.data_mut());
        Some(gk)
    } else if want_k {
        let mut scratch = Vec::new();
        let col = columns(x, &g, &mut scratch);
        let mut gk = Tensor::zeros(kernel.shape());
        // dK = dY · colᵀ
        T::gemm(
            g.c_out,
            n,
            rows,
            T::one(),
            grad_out.data(),
            (n as isize, 1),
            col,
            (1, n as isize),
            T::zero(),
            gk.data_mut(),
            (rows as isize, 1),
        );
        Some(gk)
    } else {
        None
    };

    let input_grad = if want_x {
        let mut gx = Tensor::zeros(x.shape());
        if g.stride == 1 && g.c_out < g.c_in && !g.is_pointwise() {
            // Full correlation of dY with the spatially flipped, channel-swapped
            // kernel; im2col over c_out channels instead of c_in.
            gx = conv3d_forward(grad_out, &flip_kernel(kernel), None, 1, g.k - 1 - g.pad)?;
        } else if g.is_pointwise() {
            T::gemm(
                rows,
                g.c_out,
                n,
                T::one(),
                kernel.data(),
                (1, rows as isize),
                grad_out.data(),
                (n as isize, 1),
                T::zero(),
                gx.data_mut(),
                (n as isize, 1),
            );
        } else {
            let mut dcol = vec![T::zero(); rows * n];
            // dcol = Kᵀ · dY
            T::gemm(
                rows,
                g.c_out,
                n,
                T::one(),
                kernel.data(),
                (1, rows as isize),
                grad_out.data(),
                (n as isize, 1),
                T::zero(),
                &mut dcol,
                (n as isize, 1),
            );
            col2im(&dcol, &g, gx.data_mut());
        }
        Some(gx)
    } else {
        None
    };

    let bias_grad = want_b.then(|| {
        let sums = (0..g.c_out)
            .map(|c| T::lit(grad_out.channel(c).iter().map(|v| v.as_f64()).sum()))
            .collect();
        Tensor::new(&[g.c_out], sums).expect("bias grad shape")
    });

    Ok(ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias: bias_grad,
    })
}

/// `[c_out, c_in, k, k, k]` -> `[c_in, c_out, k, k, k]` with every spatial axis reversed.
fn flip_kernel<T: Real>(kernel: &Tensor<T>) -> Tensor<T> {
    let s = kernel.shape();
    let (co, ci, k) = (s[0], s[1], s[2]);
    let k3 = k * k * k;
    let src = kernel.data();
    let mut out = Tensor::zeros(&[ci, co, k, k, k]);
    let dst = out.data_mut();
    for o in 0..co {
        for i in 0..ci {
            let from = &src[(o * ci + i) * k3..][..k3];
            let to = &mut dst[(i * co + o) * k3..][..k3];
            for (t, f) in to.iter_mut().zip(from.iter().rev()) {
                *t = *f;
            }
        }
    }
    out
}

/// Nearest-neighbour x2 upsampling along the three spatial axes.
pub fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::invalid("upsample", format!("expected [c, w, h, d], got {s:?}")));
    }
    let (c, w, h, d) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[c, 2 * w, 2 * h, 2 * d]);
    let src = x.data();
    let dst = out.data_mut();
    let (h2, d2) = (2 * h, 2 * d);
    for ch in 0..c {
        for ox in 0..2 * w {
            for oy in 0..h2 {
                let line = &src[((ch * w + ox / 2) * h + oy / 2) * d..][..d];
                let out_line = &mut dst[((ch * 2 * w + ox) * h2 + oy) * d2..][..d2];
                for (oz, o) in out_line.iter_mut().enumerate() {
                    *o = line[oz / 2];
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample2_backward<T: Real>(grad_out: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (c, w, h, d) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let mut gx = Tensor::zeros(in_shape);
    let src = grad_out.data();
    let dst = gx.data_mut();
    let (h2, d2) = (2 * h, 2 * d);
    for ch in 0..c {
        for ox in 0..2 * w {
            for oy in 0..h2 {
                let line = &src[((ch * 2 * w + ox) * h2 + oy) * d2..][..d2];
                let acc = &mut dst[((ch * w + ox / 2) * h + oy / 2) * d..][..d];
                for (oz, &v) in line.iter().enumerate() {
                    acc[oz / 2] += v;
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct six-deep loop, used as the reference for im2col.
    fn conv_naive(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let g = ConvGeom::new(x.shape(), k.shape(), stride, pad).unwrap();
        let [w, h, d] = g.extent;
        let mut out = Tensor::zeros(&g.out_shape());
        let [ow, oh, od] = g.out;
        for co in 0..g.c_out {
            for ox in 0..ow {
                for oy in 0..oh {
                    for oz in 0..od {
                        let mut acc = 0.0;
                        for ci in 0..g.c_in {
                            for kx in 0..g.k {
                                for ky in 0..g.k {
                                    for kz in 0..g.k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let iz = (oz * stride + kz) as isize - pad as isize;
                                        if ix < 0 || iy < 0 || iz < 0 {
                                            continue;
                                        }
                                        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
                                        if ix >= w || iy >= h || iz >= d {
                                            continue;
                                        }
                                        let xv = x.data()[((ci * w + ix) * h + iy) * d + iz];
                                        let kv = k.data()
                                            [(((co * g.c_in + ci) * g.k + kx) * g.k + ky) * g.k + kz];
                                        acc += xv * kv;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((co * ow + ox) * oh + oy) * od + oz] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = Rng::new(11);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 0, 1), (2, 2, 5)] {
            let x = Tensor::<f64>::randn(&[2, 5, 4, 6], &mut rng);
            let kern = Tensor::<f64>::randn(&[3, 2, k, k, k], &mut rng);
            let fast = conv3d_forward(&x, &kern, None, stride, pad).unwrap();
            let slow = conv_naive(&x, &kern, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn direct_path_matches_columns() {
        let mut rng = Rng::new(13);
        let x = Tensor::<f64>::randn(&[3, 5, 4, 6], &mut rng);
        let kern = Tensor::<f64>::randn(&[2, 3, 3, 3, 3], &mut rng);
        let gy = Tensor::<f64>::randn(&[2, 5, 4, 6], &mut rng);
        let g = ConvGeom::new(x.shape(), kern.shape(), 1, 1).unwrap();
        assert!(g.use_direct());
        let mut col = vec![0.0; g.rows() * g.n_out()];
        im2col(x.data(), &g, &mut col);
        let (rows, n) = (g.rows(), g.n_out());
        let mut y = vec![0.0; 2 * n];
        f64::gemm(2, rows, n, 1.0, kern.data(), (rows as isize, 1), &col, (n as isize, 1), 0.0, &mut y, (n as isize, 1));
        let direct = conv3d_forward(&x, &kern, None, 1, 1).unwrap();
        assert!(direct.max_abs_diff(&Tensor::new(direct.shape(), y).unwrap()) < 1e-12);
        let mut gk = vec![0.0; 2 * rows];
        f64::gemm(2, n, rows, 1.0, gy.data(), (n as isize, 1), &col, (1, n as isize), 0.0, &mut gk, (rows as isize, 1));
        let dk = conv3d_backward(&x, &kern, &gy, 1, 1, [false, true, false]).unwrap().kernel.unwrap();
        assert!(dk.max_abs_diff(&Tensor::new(dk.shape(), gk).unwrap()) < 1e-12);
    }

    #[test]
    fn input_grad_paths_agree() {
        let mut rng = Rng::new(12);
        let x = Tensor::<f64>::randn(&[4, 5, 3, 4], &mut rng);
        let kern = Tensor::<f64>::randn(&[2, 4, 3, 3, 3], &mut rng);
        let gy = Tensor::<f64>::randn(&[2, 5, 3, 4], &mut rng);
        let flipped = conv3d_backward(&x, &kern, &gy, 1, 1, [true, false, false])
            .unwrap()
            .input
            .unwrap();
        // Same quantity through the generic col2im route.
        let g = ConvGeom::new(x.shape(), kern.shape(), 1, 1).unwrap();
        let (rows, n) = (g.rows(), g.n_out());
        let mut dcol = vec![0.0; rows * n];
        f64::gemm(rows, 2, n, 1.0, kern.data(), (1, rows as isize), gy.data(), (n as isize, 1), 0.0, &mut dcol, (n as isize, 1));
        let mut direct = Tensor::zeros(x.shape());
        col2im(&dcol, &g, direct.data_mut());
        assert!(flipped.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn output_extent_formula() {
        let g = ConvGeom::new(&[1, 32, 32, 16], &[8, 1, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.out, [16, 16, 8]);
        let g = ConvGeom::new(&[1, 7, 7, 7], &[8, 1, 3, 3, 3], 1, 0).unwrap();
        assert_eq!(g.out, [5, 5, 5]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let err = ConvGeom::new(&[2, 4, 4, 4], &[1, 3, 3, 3, 3], 1, 1).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
        assert!(ConvGeom::new(&[2, 4, 4, 4], &[1, 2, 2, 2, 2], 1, 1).is_err());
        assert!(ConvGeom::new(&[2, 4, 4, 4], &[1, 2, 3, 3, 3], 3, 1).is_err());
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 1, 1], |i| i as f64 + 1.0);
        let y = upsample2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 2, 2]);
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[15], 2.0);
        let gx = upsample2_backward(&Tensor::<f64>::ones(y.shape()), x.shape());
        assert_eq!(gx.data(), &[8.0, 8.0]);
    }
}

//! 2-D cross-correlation via im2col and a packed GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Border handling for [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Zero padding of the given width on every side.
    Zero(usize),
    /// Mirror padding (edge sample not repeated) of the given width.
    Reflect(usize),
}

impl Padding {
    pub fn width(self) -> usize {
        match self {
            Padding::Zero(p) | Padding::Reflect(p) => p,
        }
    }
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Geometry of a single convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: Padding,
    pub hp: usize,
    pub wp: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: Padding) -> Result<Self> {
        let (c_in, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape("conv2d", format!("input must be C×H×W, got {input:?}"))),
        };
        let (c_out, kc, kh, kw) = match *kernel {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be C_out×C_in×k×k, got {kernel:?}"),
                ))
            }
        };
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square with odd size, got {kh}×{kw}"),
            ));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        let p = pad.width();
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        if hp < kh || wp < kw {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {hp}×{wp} smaller than kernel {kh}×{kw}"),
            ));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            hp,
            wp,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn pad_input(g: &ConvGeom, input: &[f32]) -> Vec<f32> {
    let p = g.pad.width();
    if p == 0 {
        return input.to_vec();
    }
    let mut out = vec![0.0; g.c_in * g.hp * g.wp];
    for c in 0..g.c_in {
        let src = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        let dst = &mut out[c * g.hp * g.wp..(c + 1) * g.hp * g.wp];
        for y in 0..g.hp {
            let sy = y as isize - p as isize;
            for x in 0..g.wp {
                let sx = x as isize - p as isize;
                dst[y * g.wp + x] = match g.pad {
                    Padding::Zero(_) => {
                        if sy >= 0 && sx >= 0 && (sy as usize) < g.h && (sx as usize) < g.w {
                            src[sy as usize * g.w + sx as usize]
                        } else {
                            0.0
                        }
                    }
                    Padding::Reflect(_) => {
                        src[reflect_index(sy, g.h) * g.w + reflect_index(sx, g.w)]
                    }
                };
            }
        }
    }
    out
}

/// Adjoint of `pad_input`: folds padded-domain gradients back onto the input.
fn unpad_grad(g: &ConvGeom, padded: &[f32]) -> Vec<f32> {
    let p = g.pad.width();
    if p == 0 {
        return padded.to_vec();
    }
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let src = &padded[c * g.hp * g.wp..(c + 1) * g.hp * g.wp];
        let dst = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for y in 0..g.hp {
            let sy = y as isize - p as isize;
            for x in 0..g.wp {
                let sx = x as isize - p as isize;
                let v = src[y * g.wp + x];
                match g.pad {
                    Padding::Zero(_) => {
                        if sy >= 0 && sx >= 0 && (sy as usize) < g.h && (sx as usize) < g.w {
                            dst[sy as usize * g.w + sx as usize] += v;
                        }
                    }
                    Padding::Reflect(_) => {
                        dst[reflect_index(sy, g.h) * g.w + reflect_index(sx, g.w)] += v;
                    }
                }
            }
        }
    }
    out
}

fn im2col(g: &ConvGeom, padded: &[f32]) -> Vec<f32> {
    let npos = g.positions();
    let mut cols = vec![0.0; g.rows() * npos];
    for c in 0..g.c_in {
        let plane = &padded[c * g.hp * g.wp..(c + 1) * g.hp * g.wp];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let iy = oy * g.stride + ki;
                    let line = &plane[iy * g.wp..(iy + 1) * g.wp];
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        out.copy_from_slice(&line[kj..kj + g.wo]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            *o = line[ox * g.stride + kj];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(g: &ConvGeom, cols: &[f32]) -> Vec<f32> {
    let npos = g.positions();
    let mut padded = vec![0.0; g.c_in * g.hp * g.wp];
    for c in 0..g.c_in {
        let plane = &mut padded[c * g.hp * g.wp..(c + 1) * g.hp * g.wp];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let iy = oy * g.stride + ki;
                    for ox in 0..g.wo {
                        plane[iy * g.wp + ox * g.stride + kj] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
    padded
}

/// `c[m×n] = a[m×k] · b[k×n]` with arbitrary strides on `a` and `b`; `c` is
/// dense row-major and overwritten.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward pass. Returns the output and the im2col buffer needed by
/// [`conv2d_backward`].
pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f32], kernel: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let padded = pad_input(g, input);
    let cols = im2col(g, &padded);
    let (r, npos) = (g.rows(), g.positions());
    let mut out = vec![0.0; g.c_out * npos];
    gemm(g.c_out, r, npos, kernel, r, 1, &cols, npos, 1, &mut out);
    (out, cols)
}

/// Gradients with respect to input and kernel, each only if requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    cols: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (r, npos) = (g.rows(), g.positions());
    let grad_kernel = want_kernel.then(|| {
        let mut gk = vec![0.0; g.c_out * r];
        gemm(g.c_out, npos, r, grad_out, npos, 1, cols, 1, npos, &mut gk);
        gk
    });
    let grad_input = want_input.then(|| {
        let mut gcols = vec![0.0; r * npos];
        gemm(r, g.c_out, npos, kernel, 1, r, grad_out, npos, 1, &mut gcols);
        unpad_grad(g, &col2im(g, &gcols))
    });
    (grad_input, grad_kernel)
}

/// Plain convolution without gradient bookkeeping.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: Padding) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    let (out, _) = conv2d_forward(&g, input.data(), kernel.data());
    Ok(Tensor::from_parts(vec![g.c_out, g.ho, g.wo], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(input: &Tensor, kernel: &Tensor, stride: usize, pad: Padding) -> Vec<f32> {
        let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad).unwrap();
        let padded = pad_input(&g, input.data());
        let mut out = vec![0.0f32; g.c_out * g.ho * g.wo];
        for o in 0..g.c_out {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = 0.0f64;
                    for c in 0..g.c_in {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let x = padded[(c * g.hp + oy * stride + ki) * g.wp + ox * stride + kj];
                                let k = kernel.data()[((o * g.c_in + c) * g.k + ki) * g.k + kj];
                                acc += x as f64 * k as f64;
                            }
                        }
                    }
                    out[(o * g.ho + oy) * g.wo + ox] = acc as f32;
                }
            }
        }
        out
    }

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w).map(|i| ((i * 7919) % 97) as f32 / 97.0 - 0.5).collect();
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let x = ramp(1, 5, 6);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, Padding::Zero(0)).unwrap(), x);
    }

    #[test]
    fn all_ones_on_constant_image() {
        let x = Tensor::full(&[1, 6, 6], 0.25);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, Padding::Zero(0)).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 9.0 * 0.25));
    }

    #[test]
    fn sobel_x_on_unit_ramp() {
        let data = (0..36).map(|i| (i % 6) as f32).collect();
        let x = Tensor::new(vec![1, 6, 6], data).unwrap();
        let k = Tensor::new(
            vec![1, 1, 3, 3],
            vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
        )
        .unwrap();
        let y = conv2d(&x, &k, 1, Padding::Zero(0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn matches_naive_loop() {
        for (stride, pad) in [
            (1, Padding::Zero(1)),
            (2, Padding::Zero(1)),
            (1, Padding::Reflect(1)),
            (2, Padding::Reflect(2)),
        ] {
            let x = ramp(3, 7, 8);
            let k = ramp(4 * 3, 3, 3).reshape(vec![4, 3, 3, 3]).unwrap();
            let y = conv2d(&x, &k, stride, pad).unwrap();
            let want = naive(&x, &k, stride, pad);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let x = ramp(2, 4, 4);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, 1, Padding::Zero(1)).unwrap_err().to_string();
        assert!(err.contains("3 input channels") && err.contains("has 2"), "{err}");
        let even = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&x, &even, 1, Padding::Zero(1)).is_err());
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), y> == <x, conv^T(y)> for both padding modes.
        for pad in [Padding::Zero(1), Padding::Reflect(1)] {
            let x = ramp(2, 5, 5);
            let k = ramp(3 * 2, 3, 3).reshape(vec![3, 2, 3, 3]).unwrap();
            let g = ConvGeom::new(x.shape(), k.shape(), 2, pad).unwrap();
            let (out, cols) = conv2d_forward(&g, x.data(), k.data());
            let dy: Vec<f32> = (0..out.len()).map(|i| (i as f32 * 0.37).sin()).collect();
            let (dx, dk) = conv2d_backward(&g, &cols, k.data(), &dy, true, true);
            let lhs: f64 = out.iter().zip(&dy).map(|(a, b)| *a as f64 * *b as f64).sum();
            let rhs_x: f64 = x.data().iter().zip(dx.unwrap().iter()).map(|(a, b)| *a as f64 * *b as f64).sum();
            let rhs_k: f64 = k.data().iter().zip(dk.unwrap().iter()).map(|(a, b)| *a as f64 * *b as f64).sum();
            assert!((lhs - rhs_x).abs() < 1e-4, "{lhs} vs {rhs_x}");
            assert!((lhs - rhs_k).abs() < 1e-4, "{lhs} vs {rhs_k}");
        }
    }
}

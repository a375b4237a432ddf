//! im2col-based stride-1 "same" convolution.

use super::kernels::{dims4, gemm};
use super::Tensor;
use crate::error::{Error, Result};

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
}

impl Geometry {
    fn of(x: &Tensor, weight: &Tensor) -> Result<Self> {
        let [n, c, h, w] = dims4(x, "conv2d")?;
        let [o, wc, kh, kw] = dims4(weight, "conv2d weight")?;
        if wc != c || kh != kw || kh % 2 == 0 {
            return Err(Error::shape("conv2d", x.shape(), weight.shape()));
        }
        Ok(Self { n, c, h, w, o, k: kh })
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Unfold `[N, C, H, W]` into a `[C*k*k, N*H*W]` patch matrix.
pub(crate) fn im2col(x: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let cols_n = n * hw;
    let mut cols = vec![0.0; c * k * k * cols_n];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for ni in 0..n {
                    let src = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    let dst = &mut dst_row[ni * hw..(ni + 1) * hw];
                    for i in 0..h {
                        let si = i as isize + di;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let j_lo = (-dj).max(0) as usize;
                        let j_hi = (w as isize - dj).min(w as isize) as usize;
                        if j_lo >= j_hi {
                            continue;
                        }
                        let s0 = si as usize * w;
                        let d0 = i * w;
                        let sj_lo = (j_lo as isize + dj) as usize;
                        dst[d0 + j_lo..d0 + j_hi].copy_from_slice(&src[s0 + sj_lo..s0 + sj_lo + (j_hi - j_lo)]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back to `[N, C, H, W]`.
pub(crate) fn col2im(cols: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let cols_n = n * hw;
    let mut x = vec![0.0; n * c * hw];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for ni in 0..n {
                    let dst = &mut x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    let src = &src_row[ni * hw..(ni + 1) * hw];
                    for i in 0..h {
                        let si = i as isize + di;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let j_lo = (-dj).max(0) as usize;
                        let j_hi = (w as isize - dj).min(w as isize) as usize;
                        if j_lo >= j_hi {
                            continue;
                        }
                        let s0 = si as usize * w;
                        let d0 = i * w;
                        let sj_lo = (j_lo as isize + dj) as usize;
                        for (dv, &sv) in dst[s0 + sj_lo..s0 + sj_lo + (j_hi - j_lo)]
                            .iter_mut()
                            .zip(&src[d0 + j_lo..d0 + j_hi])
                        {
                            *dv += sv;
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let g = Geometry::of(x, weight)?;
    if let Some(b) = bias {
        if b.shape() != [g.o] {
            return Err(Error::shape("conv2d bias", weight.shape(), b.shape()));
        }
    }
    let hw = g.hw();
    let cols = im2col(x.data(), g.n, g.c, g.h, g.w, g.k);
    let mut out_mat = vec![0.0; g.o * g.n * hw];
    gemm(
        g.o,
        g.ckk(),
        g.n * hw,
        weight.data(),
        false,
        &cols,
        false,
        &mut out_mat,
        0.0,
    );
    let mut out = vec![0.0; g.n * g.o * hw];
    for ni in 0..g.n {
        for oi in 0..g.o {
            let b = bias.map_or(0.0, |b| b.data()[oi]);
            let src = &out_mat[oi * g.n * hw + ni * hw..oi * g.n * hw + (ni + 1) * hw];
            let dst = &mut out[(ni * g.o + oi) * hw..(ni * g.o + oi + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.o, g.h, g.w], out))
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Gradients of `conv2d` given the upstream gradient `grad_out: [N, O, H, W]`.
/// Only the requested gradients are computed.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> Result<ConvGrads> {
    let g = Geometry::of(x, weight)?;
    let hw = g.hw();
    let nhw = g.n * hw;
    let mut gmat = vec![0.0; g.o * nhw];
    for ni in 0..g.n {
        for oi in 0..g.o {
            let src = &grad_out.data()[(ni * g.o + oi) * hw..(ni * g.o + oi + 1) * hw];
            gmat[oi * nhw + ni * hw..oi * nhw + (ni + 1) * hw].copy_from_slice(src);
        }
    }

    let bias = want_bias.then(|| {
        let db = (0..g.o).map(|oi| gmat[oi * nhw..(oi + 1) * nhw].iter().sum()).collect();
        Tensor::from_parts(vec![g.o], db)
    });

    let weight_grad = want_weight.then(|| {
        let cols = im2col(x.data(), g.n, g.c, g.h, g.w, g.k);
        let mut dw = vec![0.0; g.o * g.ckk()];
        gemm(g.o, nhw, g.ckk(), &gmat, false, &cols, true, &mut dw, 0.0);
        Tensor::from_parts(weight.shape().to_vec(), dw)
    });

    let input = want_input.then(|| {
        let mut dcols = vec![0.0; g.ckk() * nhw];
        gemm(g.ckk(), g.o, nhw, weight.data(), true, &gmat, false, &mut dcols, 0.0);
        let dx = col2im(&dcols, g.n, g.c, g.h, g.w, g.k);
        Tensor::from_parts(x.shape().to_vec(), dx)
    });

    Ok(ConvGrads {
        input,
        weight: weight_grad,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct summation over the zero-padded neighbourhood.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let s = x.shape();
        let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
        let ws = w.shape();
        let (o, k) = (ws[0], ws[2]);
        let p = (k / 2) as i64;
        let mut out = vec![0.0; n * o * h * wd];
        for ni in 0..n {
            for oi in 0..o {
                for i in 0..h as i64 {
                    for j in 0..wd as i64 {
                        let mut acc = b.data()[oi];
                        for ci in 0..c {
                            for ki in 0..k as i64 {
                                for kj in 0..k as i64 {
                                    let (si, sj) = (i + ki - p, j + kj - p);
                                    if si < 0 || sj < 0 || si >= h as i64 || sj >= wd as i64 {
                                        continue;
                                    }
                                    let xv = x.data()[((ni * c + ci) * h + si as usize) * wd + sj as usize];
                                    let wv = w.data()[((oi * c + ci) * k + ki as usize) * k + kj as usize];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((ni * o + oi) * h + i as usize) * wd + j as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ramp_with_averaging_kernel_matches_direct_sum() {
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let got = x.conv2d(&w, Some(&b)).unwrap();
        let want = conv_oracle(&x, &w, &b);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        // corner sees only 4 in-bounds pixels: (0 + 1 + 4 + 5) / 9
        assert!((got.data()[0] - 10.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn random_multichannel_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(n, c, o, h, w, k) in &[(2, 3, 4, 5, 6, 3), (1, 2, 2, 4, 4, 1), (3, 1, 2, 7, 5, 5)] {
            let x = Tensor::uniform(&[n, c, h, w], -1.0, 1.0, &mut rng).unwrap();
            let wt = Tensor::uniform(&[o, c, k, k], -1.0, 1.0, &mut rng).unwrap();
            let b = Tensor::uniform(&[o], -1.0, 1.0, &mut rng).unwrap();
            let got = x.conv2d(&wt, Some(&b)).unwrap();
            let want = conv_oracle(&x, &wt, &b);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, c, h, w, k) = (2, 3, 5, 4, 3);
        let x = Tensor::uniform(&[n, c, h, w], -1.0, 1.0, &mut rng).unwrap();
        let y = Tensor::uniform(&[c * k * k, n * h * w], -1.0, 1.0, &mut rng).unwrap();
        let ax = im2col(x.data(), n, c, h, w, k);
        let aty = col2im(y.data(), n, c, h, w, k);
        let lhs: f64 = ax.iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn rejects_even_kernel_and_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]).unwrap();
        assert!(x.conv2d(&Tensor::zeros(&[1, 2, 2, 2]).unwrap(), None).is_err());
        assert!(x.conv2d(&Tensor::zeros(&[1, 3, 3, 3]).unwrap(), None).is_err());
    }
}

use super::array::NdArray;
use super::graph::{Node, Op, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct ConvRecord {
    x: usize,
    kernel: usize,
    bias: Option<usize>,
    geom: ConvGeom,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ks: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Geometry(format!(
                "conv2d expects rank-4 input and kernel, got {xs:?} and {ks:?}"
            )));
        }
        let (c, h, w) = (xs[1], xs[2], xs[3]);
        let (k, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return Err(Error::shape(xs, ks));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Geometry(format!("kernel {kh}x{kw} must have odd extents")));
        }
        if stride == 0 {
            return Err(Error::Geometry("stride must be positive".into()));
        }
        let (sh, sw) = (h + 2 * pad, w + 2 * pad);
        if sh < kh || sw < kw || (sh - kh) % stride != 0 || (sw - kw) % stride != 0 {
            return Err(Error::Geometry(format!(
                "input {h}x{w} with padding {pad} does not tile kernel {kh}x{kw} at stride {stride}"
            )));
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            ho: (sh - kh) / stride + 1,
            wo: (sw - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfold one sample `[C,H,W]` into `[C*kh*kw, Ho*Wo]`.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let hw = self.out_hw();
        for ci in 0..self.c {
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = ((ci * self.kh + dy) * self.kw + dx) * hw;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + dy) as isize - self.pad as isize;
                        let dst = &mut col[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + dx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-add columns back onto `[C,H,W]`.
    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let hw = self.out_hw();
        for ci in 0..self.c {
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = ((ci * self.kh + dy) * self.kw + dx) * hw;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + dy) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        let src = &col[row + oy * self.wo..row + (oy + 1) * self.wo];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + dx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = a·b + beta·c` with optional transposition of either factor.
/// `a` is `[m,k]` (or `[k,m]` when `ta`), `b` is `[k,n]` (or `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds above cover every element addressed by these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'g> Tensor<'g> {
    /// 2D cross-correlation of `[N,C,H,W]` with `[K,C,kh,kw]` plus per-channel
    /// bias, symmetric zero padding.
    pub fn conv2d(
        self,
        kernel: Tensor<'g>,
        bias: Option<Tensor<'g>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<'g>> {
        let xv = self.value();
        let kv = kernel.value();
        let geom = ConvGeom::new(xv.shape(), kv.shape(), stride, padding)?;
        let bv = match bias {
            Some(b) => {
                let b = b.value();
                if b.shape() != [geom.k] {
                    return Err(Error::shape(b.shape(), &[geom.k]));
                }
                Some(b.data().to_vec())
            }
            None => None,
        };
        let n = xv.shape()[0];
        let (patch, hw) = (geom.patch(), geom.out_hw());
        let in_len = geom.c * geom.h * geom.w;
        let mut out = vec![0.0; n * geom.k * hw];
        let mut col = vec![0.0; patch * hw];
        for s in 0..n {
            geom.im2col(&xv.data()[s * in_len..(s + 1) * in_len], &mut col);
            let dst = &mut out[s * geom.k * hw..(s + 1) * geom.k * hw];
            if let Some(b) = &bv {
                for (kk, chunk) in dst.chunks_mut(hw).enumerate() {
                    chunk.fill(b[kk]);
                }
            }
            gemm(geom.k, patch, hw, kv.data(), false, &col, false, 1.0, dst);
        }
        let value = NdArray::from_vec(&[n, geom.k, geom.ho, geom.wo], out)?;
        drop((xv, kv));
        let rg = self.requires_grad()
            || kernel.requires_grad()
            || bias.is_some_and(|b| b.requires_grad());
        let rec = ConvRecord {
            x: self.id,
            kernel: kernel.id,
            bias: bias.map(|b| b.id),
            geom,
        };
        Ok(self.graph.push(value, Op::Conv2d(rec), rg))
    }
}

pub(crate) fn conv2d_vjp(nodes: &[Node], rec: &ConvRecord, g: &NdArray) -> Vec<(usize, NdArray)> {
    let geom = rec.geom;
    let x = &nodes[rec.x].value;
    let kv = &nodes[rec.kernel].value;
    let n = x.shape()[0];
    let (patch, hw) = (geom.patch(), geom.out_hw());
    let in_len = geom.c * geom.h * geom.w;
    let want_x = nodes[rec.x].requires_grad;
    let want_k = nodes[rec.kernel].requires_grad;
    let mut gx = NdArray::zeros(x.shape());
    let mut gk = NdArray::zeros(kv.shape());
    let mut col = vec![0.0; patch * hw];
    for s in 0..n {
        let gs = &g.data()[s * geom.k * hw..(s + 1) * geom.k * hw];
        if want_k {
            geom.im2col(&x.data()[s * in_len..(s + 1) * in_len], &mut col);
            // dK[K,patch] += g[K,hw] · colᵀ
            gemm(geom.k, hw, patch, gs, false, &col, true, 1.0, gk.data_mut());
        }
        if want_x {
            // dcol[patch,hw] = Kᵀ · g
            gemm(patch, geom.k, hw, kv.data(), true, gs, false, 0.0, &mut col);
            geom.col2im(&col, &mut gx.data_mut()[s * in_len..(s + 1) * in_len]);
        }
    }
    let mut out = vec![(rec.x, gx), (rec.kernel, gk)];
    if let Some(b) = rec.bias {
        let mut gb = NdArray::zeros(&[geom.k]);
        for s in 0..n {
            for kk in 0..geom.k {
                let base = (s * geom.k + kk) * hw;
                gb.data_mut()[kk] += g.data()[base..base + hw].iter().sum::<f64>();
            }
        }
        out.push((b, gb));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn one_by_one_identity_kernel() {
        let g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| i as f64 * 0.1).collect();
        let x = g.constant(NdArray::from_vec(&[2, 3, 4, 4], data).unwrap());
        let mut k = NdArray::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            k.set(&[c, c, 0, 0], 1.0);
        }
        let y = x
            .conv2d(g.constant(k), Some(g.constant(NdArray::zeros(&[3]))), 1, 0)
            .unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn constant_field_ones_kernel() {
        let g = Graph::new();
        let x = g.constant(NdArray::full(&[1, 1, 5, 5], 2.5));
        let y = x
            .conv2d(g.constant(NdArray::ones(&[1, 1, 3, 3])), None, 1, 1)
            .unwrap();
        assert_eq!(y.shape(), vec![1, 1, 5, 5]);
        assert_eq!(y.value().at(&[0, 0, 2, 2]), 9.0 * 2.5);
        // corner sees a 2x2 window of the image
        assert_eq!(y.value().at(&[0, 0, 0, 0]), 4.0 * 2.5);
    }

    #[test]
    fn strided_output_geometry() {
        let g = Graph::new();
        let x = g.constant(NdArray::ones(&[1, 1, 7, 7]));
        let y = x
            .conv2d(g.constant(NdArray::ones(&[2, 1, 3, 3])), None, 2, 1)
            .unwrap();
        assert_eq!(y.shape(), vec![1, 2, 4, 4]);
    }

    #[test]
    fn geometry_errors() {
        let g = Graph::new();
        let x = g.constant(NdArray::ones(&[1, 1, 6, 6]));
        let even = g.constant(NdArray::ones(&[1, 1, 2, 2]));
        assert!(matches!(x.conv2d(even, None, 1, 0), Err(Error::Geometry(_))));
        let k = g.constant(NdArray::ones(&[1, 1, 3, 3]));
        // (6 + 2 - 3) = 5 is not divisible by stride 2
        assert!(matches!(x.conv2d(k, None, 2, 1), Err(Error::Geometry(_))));
        let wrong_c = g.constant(NdArray::ones(&[1, 2, 3, 3]));
        assert!(matches!(x.conv2d(wrong_c, None, 1, 1), Err(Error::ShapeMismatch { .. })));
    }
}

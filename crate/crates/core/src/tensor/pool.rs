use super::array::NdArray;
use super::graph::{Op, Tensor};
use crate::error::{Error, Result};

fn nchw(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Geometry(format!("{op} expects [N,C,H,W], got {shape:?}"))),
    }
}

impl<'g> Tensor<'g> {
    /// 2×2 max pooling at stride 2. Odd spatial extents are rejected.
    pub fn maxpool2(self) -> Result<Tensor<'g>> {
        let xv = self.value();
        let (n, c, h, w) = nchw(xv.shape(), "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Geometry(format!("maxpool2 needs even extents, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let d = xv.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let value = NdArray::from_vec(&[n, c, ho, wo], out)?;
        drop(xv);
        let rg = self.requires_grad();
        Ok(self.graph.push(value, Op::MaxPool2 { x: self.id, argmax }, rg))
    }

    /// Mean over H and W, shape `[N,C,1,1]`.
    pub fn avgpool_global(self) -> Result<Tensor<'g>> {
        let xv = self.value();
        let (n, c, h, w) = nchw(xv.shape(), "avgpool_global")?;
        let hw = h * w;
        let out = xv
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = NdArray::from_vec(&[n, c, 1, 1], out)?;
        drop(xv);
        let rg = self.requires_grad();
        Ok(self.graph.push(value, Op::AvgPoolGlobal(self.id), rg))
    }

    /// Nearest-neighbour ×2 upsampling of H and W.
    pub fn upsample_nearest2(self) -> Result<Tensor<'g>> {
        let xv = self.value();
        let (n, c, h, w) = nchw(xv.shape(), "upsample_nearest2")?;
        let (ho, wo) = (2 * h, 2 * w);
        let d = xv.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            for oy in 0..ho {
                let src = &d[plane * h * w + (oy / 2) * w..][..w];
                let dst = &mut out[plane * ho * wo + oy * wo..][..wo];
                for (ox, v) in dst.iter_mut().enumerate() {
                    *v = src[ox / 2];
                }
            }
        }
        let value = NdArray::from_vec(&[n, c, ho, wo], out)?;
        drop(xv);
        let rg = self.requires_grad();
        Ok(self.graph.push(value, Op::UpsampleNearest2(self.id), rg))
    }

    /// Channel concatenation of two `[N,·,H,W]` tensors.
    pub fn concat_channels(self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        let (sa, sb) = (self.shape(), other.shape());
        nchw(&sa, "concat_channels")?;
        nchw(&sb, "concat_channels")?;
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(&sa, &sb));
        }
        self.concat(other, 1)
    }
}

pub(crate) fn maxpool2_vjp(shape: &[usize], argmax: &[usize], g: &NdArray) -> NdArray {
    let mut out = NdArray::zeros(shape);
    let d = out.data_mut();
    for (&i, &gv) in argmax.iter().zip(g.data()) {
        d[i] += gv;
    }
    out
}

pub(crate) fn avgpool_global_vjp(shape: &[usize], g: &NdArray) -> NdArray {
    let hw = shape[2] * shape[3];
    let scale = 1.0 / hw as f64;
    let data = g
        .data()
        .iter()
        .flat_map(|&gv| std::iter::repeat_n(gv * scale, hw))
        .collect();
    NdArray::from_vec(shape, data).unwrap()
}

pub(crate) fn upsample_nearest2_vjp(shape: &[usize], g: &NdArray) -> NdArray {
    let (h, w) = (shape[2], shape[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = NdArray::zeros(shape);
    let planes = shape[0] * shape[1];
    let d = out.data_mut();
    for plane in 0..planes {
        for oy in 0..ho {
            let src = &g.data()[plane * ho * wo + oy * wo..][..wo];
            let row = plane * h * w + (oy / 2) * w;
            for (ox, &gv) in src.iter().enumerate() {
                d[row + ox / 2] += gv;
            }
        }
    }
    out
}

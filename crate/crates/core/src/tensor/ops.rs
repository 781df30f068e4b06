use super::array::{broadcast_offsets, broadcast_shape, reduced_shape, NdArray};
use super::graph::{Op, Tensor};
use crate::error::{Error, Result};

impl<'g> Tensor<'g> {
    fn unary(self, value: NdArray, op: Op) -> Tensor<'g> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn binary(
        self,
        other: Tensor<'g>,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor<'g>> {
        assert!(std::ptr::eq(self.graph, other.graph), "operands from different graphs");
        let value = broadcast_binary(&self.value(), &other.value(), f)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(value, op, rg))
    }

    pub fn add(self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Elementwise quotient; a zero anywhere in the divisor is a domain error.
    pub fn div(self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        if let Some(&v) = other.value().data().iter().find(|v| **v == 0.0 || !v.is_finite()) {
            return Err(Error::Domain {
                op: "div",
                detail: format!("divisor contains {v}"),
            });
        }
        self.binary(other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn neg(self) -> Tensor<'g> {
        let v = self.value().map(|x| -x);
        self.unary(v, Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Tensor<'g> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Tensor<'g> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Tensor<'g> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    /// Natural log; non-positive input is a domain error.
    pub fn log(self) -> Result<Tensor<'g>> {
        if let Some(&v) = self.value().data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument contains {v}"),
            });
        }
        let v = self.value().map(f64::ln);
        Ok(self.unary(v, Op::Log(self.id)))
    }

    pub fn abs(self) -> Tensor<'g> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    pub fn square(self) -> Tensor<'g> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Result<Tensor<'g>> {
        if let Some(&v) = self.value().data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("argument contains {v}"),
            });
        }
        let v = self.value().map(f64::sqrt);
        Ok(self.unary(v, Op::Sqrt(self.id)))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Tensor<'g> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp { x: self.id, lo, hi })
    }

    pub fn relu(self) -> Tensor<'g> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Tensor<'g> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn softmax(self, axis: usize) -> Result<Tensor<'g>> {
        let v = softmax(&self.value(), axis)?;
        Ok(self.unary(v, Op::Softmax { x: self.id, axis }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Tensor<'g>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Tensor<'g>> {
        let v = narrow(&self.value(), axis, start, len)?;
        Ok(self.unary(v, Op::Narrow { x: self.id, axis, start }))
    }

    pub fn concat(self, other: Tensor<'g>, axis: usize) -> Result<Tensor<'g>> {
        let v = concat(&self.value(), &other.value(), axis)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(
            v,
            Op::Concat {
                a: self.id,
                b: other.id,
                axis,
            },
            rg,
        ))
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum_all(self) -> Tensor<'g> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        let v = NdArray::scalar(self.value().sum());
        self.unary(v, Op::Sum { x: self.id, axes })
    }

    pub fn mean_all(self) -> Tensor<'g> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        let v = NdArray::scalar(self.value().mean());
        self.unary(v, Op::Mean { x: self.id, axes })
    }

    /// Sum over `axes`, keeping them as singleton extents when `keepdim`.
    pub fn sum_axes(self, axes: &[usize], keepdim: bool) -> Result<Tensor<'g>> {
        let (v, axes) = reduce_axes(&self.value(), axes, keepdim, 1.0)?;
        Ok(self.unary(v, Op::Sum { x: self.id, axes }))
    }

    pub fn mean_axes(self, axes: &[usize], keepdim: bool) -> Result<Tensor<'g>> {
        let shape = self.shape();
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        let (v, axes) = reduce_axes(&self.value(), axes, keepdim, 1.0 / count as f64)?;
        Ok(self.unary(v, Op::Mean { x: self.id, axes }))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_binary(a: &NdArray, b: &NdArray, f: impl Fn(f64, f64) -> f64) -> Result<NdArray> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let full = broadcast_shape(a.shape(), b.shape())?;
    let ma = broadcast_offsets(&full, a.shape());
    let mb = broadcast_offsets(&full, b.shape());
    let (da, db) = (a.data(), b.data());
    let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
    NdArray::from_vec(&full, data)
}

/// `g` weighted elementwise by `w(a, b)` and summed back onto each operand.
fn binary_vjp(
    a: &NdArray,
    b: &NdArray,
    g: &NdArray,
    wa: impl Fn(f64, f64) -> f64,
    wb: impl Fn(f64, f64) -> f64,
) -> (NdArray, NdArray) {
    let mut ga = NdArray::zeros(a.shape());
    let mut gb = NdArray::zeros(b.shape());
    let (da, db, dg) = (a.data(), b.data(), g.data());
    if a.shape() == b.shape() {
        let (oa, ob) = (ga.data_mut(), gb.data_mut());
        for i in 0..dg.len() {
            oa[i] = dg[i] * wa(da[i], db[i]);
            ob[i] = dg[i] * wb(da[i], db[i]);
        }
    } else {
        let ma = broadcast_offsets(g.shape(), a.shape());
        let mb = broadcast_offsets(g.shape(), b.shape());
        for (k, (&i, &j)) in ma.iter().zip(&mb).enumerate() {
            ga.data_mut()[i] += dg[k] * wa(da[i], db[j]);
            gb.data_mut()[j] += dg[k] * wb(da[i], db[j]);
        }
    }
    (ga, gb)
}

pub(crate) fn add_vjp(a: &NdArray, b: &NdArray, g: &NdArray) -> (NdArray, NdArray) {
    binary_vjp(a, b, g, |_, _| 1.0, |_, _| 1.0)
}

pub(crate) fn mul_vjp(a: &NdArray, b: &NdArray, g: &NdArray) -> (NdArray, NdArray) {
    binary_vjp(a, b, g, |_, y| y, |x, _| x)
}

pub(crate) fn div_vjp(a: &NdArray, b: &NdArray, g: &NdArray) -> (NdArray, NdArray) {
    binary_vjp(a, b, g, |_, y| 1.0 / y, |x, y| -x / (y * y))
}

/// Split `shape` into (outer, extent, inner) around `axis`.
fn around(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax(x: &NdArray, axis: usize) -> Result<NdArray> {
    let (outer, len, inner) = around(x.shape(), axis)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len)
                .map(|k| d[base + k * inner])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (d[base + k * inner] - max).exp();
                d[base + k * inner] = e;
                total += e;
            }
            for k in 0..len {
                d[base + k * inner] /= total;
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_vjp(s: &NdArray, g: &NdArray, axis: usize) -> NdArray {
    let (outer, len, inner) = around(s.shape(), axis).expect("validated in forward");
    let mut out = NdArray::zeros(s.shape());
    let (ds, dg) = (s.data(), g.data());
    let o_data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len)
                .map(|k| ds[base + k * inner] * dg[base + k * inner])
                .sum();
            for k in 0..len {
                let idx = base + k * inner;
                o_data[idx] = ds[idx] * (dg[idx] - dot);
            }
        }
    }
    out
}

fn narrow(x: &NdArray, axis: usize, start: usize, len: usize) -> Result<NdArray> {
    let (outer, extent, inner) = around(x.shape(), axis)?;
    if len == 0 || start + len > extent {
        return Err(Error::Geometry(format!(
            "narrow [{start}, {}) outside extent {extent} of axis {axis}",
            start + len
        )));
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    NdArray::from_vec(&shape, data)
}

pub(crate) fn narrow_vjp(shape: &[usize], g: &NdArray, axis: usize, start: usize) -> NdArray {
    let (outer, extent, inner) = around(shape, axis).expect("validated in forward");
    let len = g.shape()[axis];
    let mut out = NdArray::zeros(shape);
    for o in 0..outer {
        let dst = (o * extent + start) * inner;
        let src = o * len * inner;
        out.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    out
}

pub(crate) fn concat(a: &NdArray, b: &NdArray, axis: usize) -> Result<NdArray> {
    let (sa, sb) = (a.shape(), b.shape());
    let compatible = sa.len() == sb.len()
        && axis < sa.len()
        && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
    if !compatible {
        return Err(Error::shape(sa, sb));
    }
    let (outer, la, inner) = around(sa, axis)?;
    let lb = sb[axis];
    let mut shape = sa.to_vec();
    shape[axis] = la + lb;
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * la * inner..(o + 1) * la * inner]);
        data.extend_from_slice(&b.data()[o * lb * inner..(o + 1) * lb * inner]);
    }
    NdArray::from_vec(&shape, data)
}

pub(crate) fn concat_vjp(
    sa: &[usize],
    sb: &[usize],
    g: &NdArray,
    axis: usize,
) -> (NdArray, NdArray) {
    let (outer, la, inner) = around(sa, axis).expect("validated in forward");
    let lb = sb[axis];
    let mut ga = Vec::with_capacity(outer * la * inner);
    let mut gb = Vec::with_capacity(outer * lb * inner);
    let row = (la + lb) * inner;
    for o in 0..outer {
        let base = o * row;
        ga.extend_from_slice(&g.data()[base..base + la * inner]);
        gb.extend_from_slice(&g.data()[base + la * inner..base + row]);
    }
    (
        NdArray::from_vec(sa, ga).unwrap(),
        NdArray::from_vec(sb, gb).unwrap(),
    )
}

fn reduce_axes(
    x: &NdArray,
    axes: &[usize],
    keepdim: bool,
    factor: f64,
) -> Result<(NdArray, Vec<usize>)> {
    let rank = x.rank();
    let mut axes = axes.to_vec();
    axes.sort_unstable();
    axes.dedup();
    if let Some(&bad) = axes.iter().find(|&&a| a >= rank) {
        return Err(Error::Axis { axis: bad, rank });
    }
    let kept = reduced_shape(x.shape(), &axes);
    let map = broadcast_offsets(x.shape(), &kept);
    let mut acc = vec![0.0; kept.iter().product()];
    for (&o, &v) in map.iter().zip(x.data()) {
        acc[o] += v;
    }
    for v in &mut acc {
        *v *= factor;
    }
    let shape = if keepdim {
        kept
    } else {
        let s: Vec<usize> = x
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        if s.is_empty() {
            vec![1]
        } else {
            s
        }
    };
    Ok((NdArray::from_vec(&shape, acc)?, axes))
}

pub(crate) fn sum_vjp(shape: &[usize], axes: &[usize], g: &NdArray, factor: f64) -> NdArray {
    let kept = reduced_shape(shape, axes);
    let map = broadcast_offsets(shape, &kept);
    let dg = g.data();
    let data = map.iter().map(|&o| dg[o] * factor).collect();
    NdArray::from_vec(shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn arr(shape: &[usize], v: &[f64]) -> NdArray {
        NdArray::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_and_identity_mul() {
        let g = Graph::new();
        let a = g.constant(arr(&[2], &[1.0, 2.0]));
        let b = g.constant(arr(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let ones = g.constant(NdArray::ones(&[2]));
        assert_eq!(a.mul(ones).unwrap().value().data(), a.value().data());
    }

    #[test]
    fn exp_derivative_at_zero() {
        let g = Graph::new();
        let x = g.variable(NdArray::scalar(0.0));
        x.exp().backward().unwrap();
        assert_eq!(x.grad().unwrap().item(), 1.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::new();
        let a = g.constant(NdArray::zeros(&[2, 3]));
        let b = g.constant(NdArray::zeros(&[4]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn log_and_div_domain_errors() {
        let g = Graph::new();
        let z = g.constant(arr(&[2], &[1.0, 0.0]));
        assert!(matches!(z.log(), Err(Error::Domain { op: "log", .. })));
        let one = g.constant(NdArray::ones(&[2]));
        assert!(matches!(one.div(z), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn activations() {
        let g = Graph::new();
        let x = g.constant(arr(&[3], &[0.0, -3.0, 3.0]));
        assert_eq!(x.sigmoid().value().at(&[0]), 0.5);
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 3.0]);
        let s = g.constant(arr(&[3], &[0.7, 0.7, 0.7])).softmax(0).unwrap();
        for &v in s.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(x.softmax(1).is_err());
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        for x in [-30.0, -5.0, 0.0, 5.0, 30.0] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "{x} -> {s}");
        }
    }

    #[test]
    fn reductions() {
        let g = Graph::new();
        let x = g.variable(NdArray::ones(&[2, 3]));
        assert_eq!(x.sum_all().item(), 6.0);
        let m = g.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = m.sum_axes(&[0], false).unwrap();
        assert_eq!(s.shape(), vec![2]);
        assert_eq!(s.value().data(), &[4.0, 6.0]);
        x.mean_all().backward().unwrap();
        for &v in x.grad().unwrap().data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_sum_and_square() {
        let g = Graph::new();
        let x = g.variable(arr(&[2], &[1.0, 2.0]));
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0]);
        g.zero_grad();
        x.mul(x).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let g = Graph::new();
        let x = g.variable(arr(&[2], &[1.0, 2.0]));
        let loss = x.sum_all();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_backward_is_an_error() {
        let g = Graph::new();
        let x = g.variable(NdArray::ones(&[2]));
        assert!(matches!(x.exp().backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn broadcast_grad_equals_tiled_reduction() {
        let g = Graph::new();
        let w = arr(&[1, 3, 1, 1], &[0.5, -1.0, 2.0]);
        let xs: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.constant(arr(&[2, 3, 2, 2], &xs));
        let wb = g.variable(w.clone());
        x.mul(wb).unwrap().square().sum_all().backward().unwrap();
        // tiled route: expand w explicitly and reduce the elementwise gradient
        let tiled = crate::tensor::array::expand(&w, &[2, 3, 2, 2]);
        let g2 = Graph::new();
        let wt = g2.variable(tiled);
        g2.constant(arr(&[2, 3, 2, 2], &xs))
            .mul(wt)
            .unwrap()
            .square()
            .sum_all()
            .backward()
            .unwrap();
        let reduced = crate::tensor::array::reduce_to(&wt.grad().unwrap(), &[1, 3, 1, 1]);
        assert!(reduced.max_abs_diff(&wb.grad().unwrap()) < 1e-12);
    }

    #[test]
    fn narrow_concat_round_trip() {
        let g = Graph::new();
        let x = g.constant(arr(&[1, 3, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let a = x.narrow(1, 0, 1).unwrap();
        let b = x.narrow(1, 1, 2).unwrap();
        assert_eq!(b.value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let c = a.concat(b, 1).unwrap();
        assert_eq!(c.value().data(), x.value().data());
    }
}

use crate::error::{Error, Result};

/// Dense row-major array of `f64`. Values only; graph bookkeeping lives in
/// [`super::Graph`].
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Geometry(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn zeros_like(other: &NdArray) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element array.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for extent {d}");
                acc * d + i
            })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape arrays.
    pub fn zip_map(&self, other: &NdArray, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &NdArray) {
        assert_eq!(self.shape, other.shape, "add_assign shapes");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs_diff(&self, other: &NdArray) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast shape of two operands, aligning trailing axes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(a, b)),
        };
    }
    Ok(out)
}

/// For every linear index of `full`, the linear index into an operand of
/// shape `sub` that broadcasts to it.
pub(crate) fn broadcast_offsets(full: &[usize], sub: &[usize]) -> Vec<usize> {
    let rank = full.len();
    let pad = rank - sub.len();
    let sub_strides = strides(sub);
    // stride per full axis, zero on broadcast axes
    let eff: Vec<usize> = (0..rank)
        .map(|i| {
            if i < pad || sub[i - pad] == 1 {
                0
            } else {
                sub_strides[i - pad]
            }
        })
        .collect();
    let numel: usize = full.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(off);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            off += eff[ax];
            if counter[ax] < full[ax] {
                break;
            }
            off -= eff[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    out
}

/// Materialize `a` at the (larger) broadcast shape `full`.
#[cfg(test)]
pub(crate) fn expand(a: &NdArray, full: &[usize]) -> NdArray {
    if a.shape() == full {
        return a.clone();
    }
    let map = broadcast_offsets(full, a.shape());
    NdArray {
        shape: full.to_vec(),
        data: map.iter().map(|&o| a.data[o]).collect(),
    }
}

/// Sum `g` (of broadcast shape) back down to `target`.
#[cfg(test)]
pub(crate) fn reduce_to(g: &NdArray, target: &[usize]) -> NdArray {
    if g.shape() == target {
        return g.clone();
    }
    let map = broadcast_offsets(g.shape(), target);
    let mut out = NdArray::zeros(target);
    for (&o, &v) in map.iter().zip(&g.data) {
        out.data[o] += v;
    }
    out
}

/// Shape left after reducing `axes` with singleton retention.
pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

//! Exact signed Euclidean distance of lesion masks and the heat-map weights
//! derived from it.
//!
//! Sign convention: negative on foreground (distance to the nearest
//! background pixel), positive on background (distance to the nearest
//! foreground pixel). Pixel centres sit on the integer grid, so `|sdf| >= 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::NdArray;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LesionMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl LesionMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Geometry(format!(
                "mask {height}x{width} cannot hold {} values",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// From a `[H,W]` array holding only 0 and 1.
    pub fn from_array(a: &NdArray) -> Result<Self> {
        let &[h, w] = a.shape() else {
            return Err(Error::Geometry(format!("mask must be [H,W], got {:?}", a.shape())));
        };
        let values = a
            .data()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                other => Err(Error::Input(format!("mask value {other} is not binary"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(h, w, values)
    }

    /// `p > threshold` per pixel.
    pub fn threshold(a: &NdArray, threshold: f64) -> Result<Self> {
        let &[h, w] = a.shape() else {
            return Err(Error::Geometry(format!("mask must be [H,W], got {:?}", a.shape())));
        };
        Self::new(h, w, a.data().iter().map(|&v| v > threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn to_array(&self) -> NdArray {
        NdArray::from_vec(
            &[self.height, self.width],
            self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask shape")
    }
}

/// Squared distance along one line to the nearest site (`Some(0.0)` entries
/// in `f`, or finite costs from an earlier pass). Lower envelope of parabolas.
fn edt_1d(f: &[Option<f64>], out: &mut [Option<f64>]) {
    let sites: Vec<(usize, f64)> = f
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|c| (i, c)))
        .collect();
    if sites.is_empty() {
        out.fill(None);
        return;
    }
    let key = |(q, c): (usize, f64)| c + (q * q) as f64;
    // intersection abscissa of the parabolas rooted at sites a and b (a < b)
    let meet = |a: (usize, f64), b: (usize, f64)| (key(b) - key(a)) / (2.0 * (b.0 as f64 - a.0 as f64));
    let mut hull: Vec<(usize, f64)> = Vec::with_capacity(sites.len());
    let mut bounds: Vec<f64> = Vec::with_capacity(sites.len());
    for &s in &sites {
        while let Some(&top) = hull.last() {
            let z = meet(top, s);
            match bounds.last() {
                Some(&prev) if z <= prev => {
                    hull.pop();
                    bounds.pop();
                }
                _ => {
                    bounds.push(z);
                    break;
                }
            }
        }
        hull.push(s);
    }
    // bounds[i] separates hull[i] and hull[i + 1]
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k < bounds.len() && bounds[k] < p as f64 {
            k += 1;
        }
        let (q, c) = hull[k];
        let d = p as f64 - q as f64;
        *o = Some(d * d + c);
    }
}

/// Squared Euclidean distance from every pixel to the nearest pixel where
/// `is_site` holds; `None` when there is no site at all.
fn squared_edt(h: usize, w: usize, is_site: impl Fn(usize) -> bool) -> Vec<Option<f64>> {
    let mut cols = vec![None; h * w];
    let mut line = vec![None; h];
    let mut buf = vec![None; h];
    for x in 0..w {
        for y in 0..h {
            line[y] = is_site(y * w + x).then_some(0.0);
        }
        edt_1d(&line, &mut buf);
        for y in 0..h {
            cols[y * w + x] = buf[y];
        }
    }
    let mut out = vec![None; h * w];
    for y in 0..h {
        edt_1d(&cols[y * w..(y + 1) * w], &mut out[y * w..(y + 1) * w]);
    }
    out
}

/// Signed distance field `[H,W]`.
///
/// A mask without foreground yields `+∞` everywhere, one without background
/// `−∞` everywhere.
pub fn signed_distance(mask: &LesionMask) -> NdArray {
    let (h, w) = (mask.height, mask.width);
    let fg = squared_edt(h, w, |i| mask.values[i]);
    let bg = squared_edt(h, w, |i| !mask.values[i]);
    let data = (0..h * w)
        .map(|i| {
            if mask.values[i] {
                bg[i].map_or(f64::NEG_INFINITY, |d| -d.sqrt())
            } else {
                fg[i].map_or(f64::INFINITY, f64::sqrt)
            }
        })
        .collect();
    NdArray::from_vec(&[h, w], data).expect("mask shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapMode {
    /// Peak `1 + w0` on the lesion boundary, Gaussian decay on both sides.
    #[default]
    Boundary,
    /// `1 + w0` on the whole lesion, Gaussian decay outside.
    Inside,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapParams {
    pub w0: f64,
    pub sigma: f64,
    #[serde(default)]
    pub mode: HeatmapMode,
}

impl HeatmapParams {
    pub fn paper() -> Self {
        Self {
            w0: 4.0,
            sigma: 10.0,
            mode: HeatmapMode::Boundary,
        }
    }

    pub fn desk() -> Self {
        Self {
            sigma: 3.0,
            ..Self::paper()
        }
    }
}

/// Strictly positive per-pixel weights in `[1, 1 + w0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapW {
    pub weights: NdArray,
}

pub fn heatmap_from_sdf(sdf: &NdArray, params: HeatmapParams) -> Result<HeatmapW> {
    let HeatmapParams { w0, sigma, mode } = params;
    if !(w0 > 0.0) || !(sigma > 0.0) {
        return Err(Error::Config(format!("heatmap needs w0 > 0 and sigma > 0, got {w0}, {sigma}")));
    }
    let denom = 2.0 * sigma * sigma;
    let weights = sdf.map(|d| {
        if !d.is_finite() {
            return 1.0;
        }
        match mode {
            HeatmapMode::Inside if d < 0.0 => 1.0 + w0,
            _ => 1.0 + w0 * (-(d * d) / denom).exp(),
        }
    });
    Ok(HeatmapW { weights })
}

/// `heatmap_from_sdf(signed_distance(mask))`.
pub fn heatmap(mask: &LesionMask, params: HeatmapParams) -> Result<HeatmapW> {
    heatmap_from_sdf(&signed_distance(mask), params)
}

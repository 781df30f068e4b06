//! CT perfusion front end: whole-slice time-density curve, window-5
//! smoothing, onset/peak/end detection and uniform frame sampling.

use log::warn;

use crate::error::{Error, Result};
use crate::nn::{NormMode, UNet};
use crate::tensor::{sigmoid, Graph, NdArray};

pub const MIN_FRAMES: usize = 8;
pub const SMOOTHING_WINDOW: usize = 5;
pub const SAMPLED_FRAMES: usize = 6;
/// Fraction of the peak enhancement above baseline marking onset and end.
pub const ENHANCEMENT_FRACTION: f64 = 0.1;

/// Time series `[T,H,W]` of attenuation values for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct CtpVolume {
    frames: NdArray,
    /// Seconds between frames.
    pub frame_interval: f64,
}

impl CtpVolume {
    pub fn new(frames: NdArray, frame_interval: f64) -> Result<Self> {
        let shape = frames.shape();
        if shape.len() != 3 {
            return Err(Error::Input(format!("CTP volume must be [T,H,W], got {shape:?}")));
        }
        if shape[0] < MIN_FRAMES {
            return Err(Error::Input(format!(
                "CTP volume has {} frames, need at least {MIN_FRAMES}",
                shape[0]
            )));
        }
        if frames.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("CTP volume contains non-finite values".into()));
        }
        if !(frame_interval > 0.0) {
            return Err(Error::Input(format!("frame interval {frame_interval} must be positive")));
        }
        Ok(Self {
            frames,
            frame_interval,
        })
    }

    pub fn frames(&self) -> &NdArray {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let hw = self.height() * self.width();
        &self.frames.data()[t * hw..(t + 1) * hw]
    }

    /// Temporal mean frame `[H,W]`.
    pub fn mean_frame(&self) -> NdArray {
        let (t, hw) = (self.n_frames(), self.height() * self.width());
        let mut acc = vec![0.0; hw];
        for f in 0..t {
            for (a, v) in acc.iter_mut().zip(self.frame(f)) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= t as f64;
        }
        NdArray::from_vec(&[self.height(), self.width()], acc).expect("frame shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimePoints {
    pub onset: usize,
    pub peak: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeDensityCurve {
    pub values: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub points: TimePoints,
}

/// Per-frame sum over all voxels.
pub fn time_density_curve(v: &CtpVolume) -> Vec<f64> {
    (0..v.n_frames()).map(|t| v.frame(t).iter().sum()).collect()
}

/// Centred moving average of width 5 with replicated edges.
pub fn smooth_curve(c: &[f64]) -> Result<Vec<f64>> {
    if c.len() < SMOOTHING_WINDOW {
        return Err(Error::Input(format!(
            "curve of length {} is shorter than the smoothing window {SMOOTHING_WINDOW}",
            c.len()
        )));
    }
    let half = (SMOOTHING_WINDOW / 2) as isize;
    let last = c.len() as isize - 1;
    Ok((0..c.len() as isize)
        .map(|i| {
            (-half..=half)
                .map(|d| c[(i + d).clamp(0, last) as usize])
                .sum::<f64>()
                / SMOOTHING_WINDOW as f64
        })
        .collect())
}

/// Onset, peak and end of enhancement on a smoothed curve.
///
/// The threshold sits 10% of the way from the pre-bolus baseline (mean of
/// the first `max(3, T/10)` frames) to the peak. Onset is the first frame at
/// or before the peak above threshold; end the first frame after the peak
/// below it, or the last frame.
pub fn detect_time_points(smoothed: &[f64]) -> Result<TimePoints> {
    let t = smoothed.len();
    if t < 3 {
        return Err(Error::Input(format!("curve of length {t} too short for detection")));
    }
    let n_base = (t / 10).max(3).min(t);
    let baseline = smoothed[..n_base].iter().sum::<f64>() / n_base as f64;
    let (peak, &peak_value) = smoothed
        .iter()
        .enumerate()
        .fold((0, &smoothed[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
    if !(peak_value > baseline) {
        return Err(Error::NoEnhancement {
            peak: peak_value,
            baseline,
        });
    }
    let threshold = baseline + ENHANCEMENT_FRACTION * (peak_value - baseline);
    let onset = (0..=peak).find(|&i| smoothed[i] > threshold).unwrap_or(peak);
    let end = (peak + 1..t).find(|&i| smoothed[i] < threshold).unwrap_or(t - 1);
    Ok(TimePoints { onset, peak, end })
}

/// Full curve analysis. A curve without enhancement falls back to the whole
/// acquisition `[0, T-1]`; the second value reports whether that happened.
pub fn analyze_curve(v: &CtpVolume) -> Result<(TimeDensityCurve, bool)> {
    let values = time_density_curve(v);
    let smoothed = smooth_curve(&values)?;
    let (points, fallback) = match detect_time_points(&smoothed) {
        Ok(p) => (p, false),
        Err(e @ Error::NoEnhancement { .. }) => {
            warn!("time point detection failed ({e}); sampling the full range");
            let last = values.len() - 1;
            let peak = smoothed
                .iter()
                .enumerate()
                .fold(0, |b, (i, &x)| if x > smoothed[b] { i } else { b });
            (
                TimePoints {
                    onset: 0,
                    peak,
                    end: last,
                },
                true,
            )
        }
        Err(e) => return Err(e),
    };
    Ok((
        TimeDensityCurve {
            values,
            smoothed,
            points,
        },
        fallback,
    ))
}

/// `n` frame indices evenly spread over `[onset, end]`, rounded.
pub fn sample_indices(onset: usize, end: usize, n: usize) -> Vec<usize> {
    assert!(onset <= end, "onset {onset} after end {end}");
    if n == 1 {
        return vec![onset];
    }
    let span = (end - onset) as f64;
    (0..n)
        .map(|k| onset + (span * k as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// Stack of `n` frames sampled uniformly between onset and end, `[n,H,W]`.
pub fn sample_frames(v: &CtpVolume, onset: usize, end: usize, n: usize) -> Result<NdArray> {
    if onset > end || end >= v.n_frames() {
        return Err(Error::Input(format!(
            "sampling interval [{onset}, {end}] invalid for {} frames",
            v.n_frames()
        )));
    }
    let mut data = Vec::with_capacity(n * v.height() * v.width());
    for idx in sample_indices(onset, end, n) {
        data.extend_from_slice(v.frame(idx));
    }
    NdArray::from_vec(&[n, v.height(), v.width()], data)
}

/// Shift and scale to zero mean and unit variance. Constant input is only
/// centred.
pub fn zscore(a: &NdArray) -> NdArray {
    let mean = a.mean();
    let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.numel() as f64;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    a.map(|v| (v - mean) / sd)
}

/// Preprocessed extractor input `[6,H,W]`: detected interval, uniform
/// sampling, per-case z-score.
pub fn extractor_input(v: &CtpVolume) -> Result<NdArray> {
    let (curve, _) = analyze_curve(v)?;
    let frames = sample_frames(v, curve.points.onset, curve.points.end, SAMPLED_FRAMES)?;
    Ok(zscore(&frames))
}

/// Run a trained extractor on one case: `(map_pre, map_prob)`, each `[H,W]`,
/// with `map_prob = sigmoid(map_pre)`.
pub fn extract_features(v: &CtpVolume, extractor: &UNet) -> Result<(NdArray, NdArray)> {
    let input = extractor_input(v)?;
    let (h, w) = (v.height(), v.width());
    let g = Graph::new();
    let ctx = extractor.ctx(&g, false, NormMode::Eval);
    let x = g.constant(input.reshape(&[1, SAMPLED_FRAMES, h, w])?);
    let out = extractor.forward(&ctx, x)?;
    let shape = out.shape();
    if shape != [1, 1, h, w] {
        return Err(Error::Geometry(format!(
            "extractor produced {shape:?}, expected [1, 1, {h}, {w}]"
        )));
    }
    let map_pre = out.to_array().reshape(&[h, w])?;
    let map_prob = map_pre.map(sigmoid);
    Ok((map_pre, map_prob))
}

//! Synthetic perfusion phantoms.
//!
//! Each case is a brain ellipse with a disk-shaped infarct core and a
//! penumbra ring around it. The core has reduced CBF/CBV, prolonged
//! MTT/Tmax, a delayed and attenuated contrast bolus and a hyperintense DWI
//! signal. The penumbra shows prolonged MTT/Tmax and mildly reduced CBF but
//! normal CBV and DWI. The contrast bolus rises from `onset_frame`, peaks at
//! `peak_frame` and washes out symmetrically. Perfusion maps carry
//! `map_noise_factor` times the relative noise of the raw frames, mimicking
//! deconvolution noise gain, and are blurred by `map_blur` pixels, mimicking
//! the spatial filtering of map estimation. Raw frames stay sharp.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::case::{CaseLoader, CaseRecord, PerfusionMaps};
use crate::error::{Error, Result};
use crate::geometry::LesionMask;
use crate::perfusion::{CtpVolume, MIN_FRAMES};
use crate::tensor::NdArray;

/// Normal-tissue reference values.
const CBF_REF: f64 = 50.0;
const CBV_REF: f64 = 4.0;
const MTT_REF: f64 = 4.8;
const TMAX_REF: f64 = 2.0;
const TISSUE_HU: f64 = 30.0;
const DWI_TISSUE: f64 = 0.3;
/// Bolus width as a fraction of the onset-to-peak span.
const BOLUS_WIDTH: f64 = 0.4;
/// Amplitude of the smooth tissue heterogeneity.
const TEXTURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastCurve {
    pub onset_frame: usize,
    pub peak_frame: usize,
    /// Peak enhancement of normal tissue above baseline.
    pub peak_height: f64,
}

/// Multiplicative (maps) and additive (DWI) changes inside the core.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LesionEffects {
    pub cbf: f64,
    pub cbv: f64,
    pub mtt: f64,
    pub tmax: f64,
    pub dwi: f64,
}

impl Default for LesionEffects {
    fn default() -> Self {
        Self {
            cbf: 0.4,
            cbv: 0.4,
            mtt: 2.0,
            tmax: 2.0,
            dwi: 0.5,
        }
    }
}

/// Changes inside the penumbra ring.
const PENUMBRA: LesionEffects = LesionEffects {
    cbf: 0.8,
    cbv: 1.0,
    mtt: 1.5,
    tmax: 1.6,
    dwi: 0.0,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub n_cases: usize,
    pub image_size: usize,
    pub n_frames: usize,
    /// Seconds per frame.
    pub frame_interval: f64,
    /// Core radius bounds in pixels.
    pub lesion_radius_range: (f64, f64),
    pub contrast_curve_params: ContrastCurve,
    /// Relative noise level: absolute on the DWI scale, times `peak_height`
    /// on CTP frames, times reference value and `map_noise_factor` on maps.
    pub noise_sigma: f64,
    pub seed: u64,
    pub effects: LesionEffects,
    /// Width of the penumbra ring in pixels; 0 disables it.
    pub penumbra_width: f64,
    pub map_noise_factor: f64,
    /// Gaussian blur (standard deviation in pixels) of the perfusion maps;
    /// 0 disables it.
    pub map_blur: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_cases: 40,
            image_size: 64,
            n_frames: 20,
            frame_interval: 1.0,
            lesion_radius_range: (4.0, 9.0),
            contrast_curve_params: ContrastCurve {
                onset_frame: 4,
                peak_frame: 10,
                peak_height: 40.0,
            },
            noise_sigma: 0.1,
            seed: 0,
            effects: LesionEffects::default(),
            penumbra_width: 3.0,
            map_noise_factor: 3.0,
            map_blur: 3.0,
        }
    }
}

/// Smallest brain semi-axis as a fraction of the image size.
const MIN_SEMI_AXIS: f64 = 0.30;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let c = &self.contrast_curve_params;
        if self.image_size < 16 {
            return err(format!("image_size {} below 16", self.image_size));
        }
        if self.n_frames < MIN_FRAMES {
            return err(format!("n_frames {} below {MIN_FRAMES}", self.n_frames));
        }
        if !(self.frame_interval > 0.0) {
            return err(format!("frame_interval {} must be positive", self.frame_interval));
        }
        if c.peak_frame < c.onset_frame + 2 || c.peak_frame + 3 >= self.n_frames {
            return err(format!(
                "bolus onset {} / peak {} do not leave room for rise and decay in {} frames",
                c.onset_frame, c.peak_frame, self.n_frames
            ));
        }
        if !(c.peak_height > 0.0) {
            return err(format!("peak_height {} must be positive", c.peak_height));
        }
        let (lo, hi) = self.lesion_radius_range;
        if !(lo > 0.0 && lo <= hi) {
            return err(format!("lesion radius range ({lo}, {hi}) invalid"));
        }
        let semi = MIN_SEMI_AXIS * self.image_size as f64;
        if hi + 1.0 > semi {
            return err(format!(
                "lesion radius {hi} does not fit in a brain ellipse of semi-axis {semi}"
            ));
        }
        if [self.noise_sigma, self.map_noise_factor, self.penumbra_width, self.map_blur]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return err("noise levels, penumbra width and map blur must be non-negative".into());
        }
        let e = &self.effects;
        if [e.cbf, e.cbv, e.mtt, e.tmax].iter().any(|v| !(*v > 0.0)) {
            return err("map effect factors must be positive".into());
        }
        Ok(())
    }

    pub fn case_id(&self, case_index: usize) -> String {
        format!("phantom_{:04}", case_index)
    }
}

/// First-pass bolus: zero before `tau = 0`, Gaussian of width `sigma`
/// peaking at 1 when `tau = tp`. Symmetric about the peak, so window
/// smoothing of a sum of such curves keeps the dominant peak in place.
fn bolus(tau: f64, tp: f64, sigma: f64) -> f64 {
    if tau <= 0.0 {
        return 0.0;
    }
    let x = (tau - tp) / sigma;
    (-0.5 * x * x).exp()
}

/// Ground-truth geometry of one generated case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomLayout {
    pub brain_center: (f64, f64),
    pub brain_axes: (f64, f64),
    pub lesion_center: (f64, f64),
    pub lesion_radius: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Zone {
    Outside,
    Normal,
    Penumbra,
    Core,
}

fn layout(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<PhantomLayout> {
    let s = spec.image_size as f64;
    let mid = s / 2.0 - 0.5;
    let brain_center = (mid + rng.random_range(-2.0..2.0), mid + rng.random_range(-2.0..2.0));
    let brain_axes = (
        s * rng.random_range(0.36..0.42),
        s * rng.random_range(MIN_SEMI_AXIS..0.36),
    );
    let (lo, hi) = spec.lesion_radius_range;
    let lesion_radius = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let inside = |x: f64, y: f64| {
        ((x - brain_center.0) / brain_axes.0).powi(2) + ((y - brain_center.1) / brain_axes.1).powi(2) <= 1.0
    };
    let reach = lesion_radius + 1.0;
    for _ in 0..10_000 {
        let c = (
            brain_center.0 + rng.random_range(-brain_axes.0..brain_axes.0),
            brain_center.1 + rng.random_range(-brain_axes.1..brain_axes.1),
        );
        let fits = (0..64).all(|k| {
            let a = 2.0 * PI * k as f64 / 64.0;
            inside(c.0 + reach * a.cos(), c.1 + reach * a.sin())
        });
        if fits {
            return Ok(PhantomLayout {
                brain_center,
                brain_axes,
                lesion_center: c,
                lesion_radius,
            });
        }
    }
    Err(Error::Config(format!(
        "could not place a lesion of radius {lesion_radius} inside the brain ellipse"
    )))
}

/// Pure function of `(spec, case_index)`.
pub fn generate_phantom_case(spec: &PhantomSpec, case_index: usize) -> Result<CaseRecord> {
    Ok(generate_with_layout(spec, case_index)?.0)
}

pub fn generate_with_layout(spec: &PhantomSpec, case_index: usize) -> Result<(CaseRecord, PhantomLayout)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(case_index as u64);
    let geo = layout(spec, &mut rng)?;
    let n = spec.image_size;
    let t_len = spec.n_frames;
    let curve = spec.contrast_curve_params;

    let freq = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
    let phase = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let texture = |x: f64, y: f64| {
        1.0 + TEXTURE
            * (2.0 * PI * freq.0 * x / n as f64 + phase.0).sin()
            * (2.0 * PI * freq.1 * y / n as f64 + phase.1).sin()
    };

    let mut zones = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64, y as f64);
            let e = ((fx - geo.brain_center.0) / geo.brain_axes.0).powi(2)
                + ((fy - geo.brain_center.1) / geo.brain_axes.1).powi(2);
            let d = (fx - geo.lesion_center.0).hypot(fy - geo.lesion_center.1);
            zones.push(if d <= geo.lesion_radius {
                Zone::Core
            } else if e > 1.0 {
                Zone::Outside
            } else if d <= geo.lesion_radius + spec.penumbra_width {
                Zone::Penumbra
            } else {
                Zone::Normal
            });
        }
    }

    let unit = LesionEffects {
        cbf: 1.0,
        cbv: 1.0,
        mtt: 1.0,
        tmax: 1.0,
        dwi: 0.0,
    };
    let mut cbf = vec![0.0; n * n];
    let mut cbv = vec![0.0; n * n];
    let mut mtt = vec![0.0; n * n];
    let mut tmax = vec![0.0; n * n];
    let mut dwi = vec![0.0; n * n];
    let mut frames = vec![0.0; t_len * n * n];
    let tp = (curve.peak_frame - curve.onset_frame) as f64;
    for (i, zone) in zones.iter().enumerate() {
        let eff = match zone {
            Zone::Outside => continue,
            Zone::Normal => unit,
            Zone::Penumbra => PENUMBRA,
            Zone::Core => spec.effects,
        };
        let h = texture((i % n) as f64, (i / n) as f64);
        cbf[i] = CBF_REF * h * eff.cbf;
        cbv[i] = CBV_REF * h * eff.cbv;
        mtt[i] = MTT_REF * eff.mtt;
        tmax[i] = TMAX_REF * eff.tmax;
        dwi[i] = DWI_TISSUE * (1.0 + 0.5 * (h - 1.0)) + eff.dwi;
        let amplitude = curve.peak_height * h * eff.cbv;
        let delay = (tmax[i] - TMAX_REF) / spec.frame_interval;
        let sigma = BOLUS_WIDTH * tp * eff.mtt.sqrt();
        for t in 0..t_len {
            let tau = t as f64 - curve.onset_frame as f64 - delay;
            frames[t * n * n + i] = TISSUE_HU * h + amplitude * bolus(tau, tp, sigma);
        }
    }

    if spec.map_blur > 0.0 {
        for map in [&mut cbf, &mut cbv, &mut mtt, &mut tmax] {
            gaussian_blur(map, n, spec.map_blur);
        }
    }

    if spec.noise_sigma > 0.0 {
        let unit_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let sigma = spec.noise_sigma;
        for v in frames.iter_mut() {
            *v += sigma * curve.peak_height * unit_normal.sample(&mut rng);
        }
        let map_sigma = sigma * spec.map_noise_factor;
        for (map, reference) in [(&mut cbf, CBF_REF), (&mut cbv, CBV_REF), (&mut mtt, MTT_REF), (&mut tmax, TMAX_REF)] {
            for (v, zone) in map.iter_mut().zip(&zones) {
                if *zone != Zone::Outside {
                    *v += map_sigma * reference * unit_normal.sample(&mut rng);
                }
            }
        }
        for v in dwi.iter_mut() {
            *v += sigma * unit_normal.sample(&mut rng);
        }
    }

    let plane = |v: Vec<f64>| NdArray::from_vec(&[n, n], v).expect("plane shape");
    let ctp = CtpVolume::new(NdArray::from_vec(&[t_len, n, n], frames)?, spec.frame_interval)?;
    let maps = PerfusionMaps {
        cbf: plane(cbf),
        cbv: plane(cbv),
        mtt: plane(mtt),
        tmax: plane(tmax),
    };
    let mask = LesionMask::new(n, n, zones.iter().map(|z| *z == Zone::Core).collect())?;
    let case = CaseRecord::new(spec.case_id(case_index), ctp, maps, Some(plane(dwi)), Some(mask))?;
    Ok((case, geo))
}

/// Separable Gaussian blur of an `n×n` plane, truncated at 3σ and
/// renormalised at the borders.
fn gaussian_blur(plane: &mut [f64], n: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let pass = |src: &[f64], stride: (usize, usize)| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (j, w) in kernel.iter().enumerate() {
                    let c = b as isize + j as isize - radius;
                    if (0..n as isize).contains(&c) {
                        acc += w * src[a * stride.0 + c as usize * stride.1];
                        norm += w;
                    }
                }
                out[a * stride.0 + b * stride.1] = acc / norm;
            }
        }
        out
    };
    let rows = pass(plane, (n, 1));
    let cols = pass(&rows, (1, n));
    plane.copy_from_slice(&cols);
}

/// Manifest attributes describing a generated case.
pub fn phantom_attributes(spec: &PhantomSpec, case_index: usize, geo: &PhantomLayout) -> BTreeMap<String, serde_json::Value> {
    let mut m = BTreeMap::new();
    m.insert("source".into(), serde_json::json!("phantom"));
    m.insert("case_index".into(), serde_json::json!(case_index));
    m.insert("seed".into(), serde_json::json!(spec.seed));
    m.insert("layout".into(), serde_json::to_value(geo).expect("layout serializes"));
    m.insert("spec".into(), serde_json::to_value(spec).expect("spec serializes"));
    m
}

/// Generates cases on demand; ids are `phantom_0000`, `phantom_0001`, ...
#[derive(Debug, Clone)]
pub struct PhantomLoader {
    pub spec: PhantomSpec,
}

impl CaseLoader for PhantomLoader {
    fn case_ids(&self) -> Result<Vec<String>> {
        Ok((0..self.spec.n_cases).map(|i| self.spec.case_id(i)).collect())
    }

    fn load(&self, case_id: &str) -> Result<CaseRecord> {
        let index = case_id
            .strip_prefix("phantom_")
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&i| i < self.spec.n_cases)
            .ok_or_else(|| Error::Input(format!("unknown phantom case {case_id}")))?;
        generate_phantom_case(&self.spec, index)
    }
}

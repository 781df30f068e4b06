use crate::case::{CaseRecord, PerfusionMaps};
use crate::error::{Error, Result};
use crate::geometry::{heatmap, LesionMask};
use crate::perfusion::{analyze_curve, sample_frames, zscore, SAMPLED_FRAMES};
use crate::tensor::{NdArray, Tensor};

use super::config::{InputChannel, TrainConfig};

/// Added to the variance when standardising in-graph channels.
pub const ZSCORE_EPS: f64 = 1e-8;

/// Fixed order of the default generator input.
pub const GENERATOR_CHANNELS: [InputChannel; 7] = [
    InputChannel::MapPre,
    InputChannel::MapProb,
    InputChannel::Cbf,
    InputChannel::Cbv,
    InputChannel::Mtt,
    InputChannel::Tmax,
    InputChannel::CtpMean,
];

/// Stable tag of an input layout; stored with checkpoints so a reordered
/// layout cannot silently load weights trained on another order.
pub fn layout_tag(layout: &[InputChannel]) -> String {
    layout
        .iter()
        .map(|c| match c {
            InputChannel::MapPre => "map_pre",
            InputChannel::MapProb => "map_prob",
            InputChannel::Cbf => "cbf",
            InputChannel::Cbv => "cbv",
            InputChannel::Mtt => "mtt",
            InputChannel::Tmax => "tmax",
            InputChannel::CtpMean => "ctp_mean",
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn stack(planes: &[&NdArray]) -> Result<NdArray> {
    let shape = planes
        .first()
        .map(|p| p.shape().to_vec())
        .ok_or_else(|| Error::Input("nothing to stack".into()))?;
    let mut data = Vec::with_capacity(planes.len() * planes[0].numel());
    for p in planes {
        if p.shape() != shape {
            return Err(Error::shape(&shape, p.shape()));
        }
        data.extend_from_slice(p.data());
    }
    let mut out_shape = vec![planes.len()];
    out_shape.extend(shape);
    NdArray::from_vec(&out_shape, data)
}

/// `[map_pre, map_prob, CBF, CBV, MTT, Tmax, ctp_mean]`, each `[H,W]`
/// standardised over the case, stacked to `[7,H,W]`.
pub fn assemble_generator_input(
    map_pre: &NdArray,
    map_prob: &NdArray,
    maps: &PerfusionMaps,
    ctp_mean: &NdArray,
) -> Result<NdArray> {
    let planes = [map_pre, map_prob, &maps.cbf, &maps.cbv, &maps.mtt, &maps.tmax, ctp_mean];
    let normed: Vec<NdArray> = planes.iter().map(|p| zscore(p)).collect();
    stack(&normed.iter().collect::<Vec<_>>())
}

/// Min-max scale to `[0,1]`; constant input maps to 0.
pub fn minmax(a: &NdArray) -> NdArray {
    let lo = a.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = a.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    a.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
}

/// Everything a case contributes to training or inference, precomputed once.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCase {
    pub case_id: String,
    pub height: usize,
    pub width: usize,
    /// Sampled, standardised CTP frames `[6,H,W]`, when an extractor runs.
    pub extractor_input: Option<NdArray>,
    /// Standardised non-extractor channels in layout order, `[H,W]` each.
    pub static_channels: Vec<(InputChannel, NdArray)>,
    /// Time-point detection fell back to the full acquisition.
    pub fallback: bool,
    pub targets: Option<Targets>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// DWI scaled to `[0,1]`.
    pub dwi: NdArray,
    pub mask: LesionMask,
    /// Heat-map weights of the mask.
    pub weights: NdArray,
}

pub fn prepare_case(case: &CaseRecord, cfg: &TrainConfig) -> Result<PreparedCase> {
    let (h, w) = (case.height(), case.width());
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Input(format!(
            "case {} is {h}x{w}, configuration expects {1}x{1}",
            case.case_id, cfg.image_size
        )));
    }
    let needs_extractor = cfg.variant.has_extractor();
    let (extractor_input, fallback) = if needs_extractor {
        let (curve, fallback) = analyze_curve(&case.ctp)?;
        let frames = sample_frames(&case.ctp, curve.points.onset, curve.points.end, SAMPLED_FRAMES)?;
        (Some(zscore(&frames)), fallback)
    } else {
        (None, false)
    };
    let static_channels = cfg
        .input_channels
        .iter()
        .filter(|c| !c.needs_extractor())
        .map(|&c| {
            let plane = match c {
                InputChannel::Cbf => case.maps.cbf.clone(),
                InputChannel::Cbv => case.maps.cbv.clone(),
                InputChannel::Mtt => case.maps.mtt.clone(),
                InputChannel::Tmax => case.maps.tmax.clone(),
                InputChannel::CtpMean => case.ctp.mean_frame(),
                InputChannel::MapPre | InputChannel::MapProb => unreachable!("filtered"),
            };
            (c, zscore(&plane))
        })
        .collect();
    let targets = match (&case.dwi, &case.mask) {
        (Some(dwi), Some(mask)) => Some(Targets {
            dwi: minmax(dwi),
            mask: mask.clone(),
            weights: heatmap(mask, cfg.heatmap)?.weights,
        }),
        _ => None,
    };
    Ok(PreparedCase {
        case_id: case.case_id.clone(),
        height: h,
        width: w,
        extractor_input,
        static_channels,
        fallback,
        targets,
    })
}

/// A minibatch in network layout.
#[derive(Debug, Clone)]
pub struct Batch {
    pub case_ids: Vec<String>,
    pub layout: Vec<InputChannel>,
    /// `[B,6,H,W]`.
    pub extractor_input: Option<NdArray>,
    /// `[B,1,H,W]` per static channel, keyed by layout position.
    pub static_channels: Vec<(InputChannel, NdArray)>,
    /// `[B,1,H,W]` each.
    pub dwi: Option<NdArray>,
    pub mask: Option<NdArray>,
    pub weights: Option<NdArray>,
    /// `[B,2,H,W]`.
    pub one_hot: Option<NdArray>,
}

impl Batch {
    pub fn new(cases: &[&PreparedCase], layout: &[InputChannel]) -> Result<Self> {
        let first = cases.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let (b, h, w) = (cases.len(), first.height, first.width);
        let planar = |planes: Vec<&NdArray>| -> Result<NdArray> { stack(&planes)?.reshape(&[b, 1, h, w]) };
        let extractor_input = match &first.extractor_input {
            Some(_) => Some(stack(
                &cases
                    .iter()
                    .map(|c| {
                        c.extractor_input
                            .as_ref()
                            .ok_or_else(|| Error::Input(format!("case {} lacks extractor input", c.case_id)))
                    })
                    .collect::<Result<Vec<_>>>()?,
            )?),
            None => None,
        };
        let mut static_channels = Vec::new();
        for (k, (channel, _)) in first.static_channels.iter().enumerate() {
            let planes = cases.iter().map(|c| &c.static_channels[k].1).collect();
            static_channels.push((*channel, planar(planes)?));
        }
        let all_targets: Option<Vec<&Targets>> = cases.iter().map(|c| c.targets.as_ref()).collect();
        let (dwi, mask, weights, one_hot) = match all_targets {
            Some(t) => {
                let masks: Vec<NdArray> = t.iter().map(|t| t.mask.to_array()).collect();
                let mask = planar(masks.iter().collect())?;
                let one_hot = crate::losses::one_hot(&mask)?;
                (
                    Some(planar(t.iter().map(|t| &t.dwi).collect())?),
                    Some(mask),
                    Some(planar(t.iter().map(|t| &t.weights).collect())?),
                    Some(one_hot),
                )
            }
            None => (None, None, None, None),
        };
        Ok(Self {
            case_ids: cases.iter().map(|c| c.case_id.clone()).collect(),
            layout: layout.to_vec(),
            extractor_input,
            static_channels,
            dwi,
            mask,
            weights,
            one_hot,
        })
    }

    pub fn len(&self) -> usize {
        self.case_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.case_ids.is_empty()
    }

    pub fn has_targets(&self) -> bool {
        self.mask.is_some()
    }
}

/// Per-sample standardisation of a `[B,1,H,W]` tensor over its spatial axes.
pub fn zscore_tensor(x: Tensor<'_>) -> Result<Tensor<'_>> {
    let centred = x.sub(x.mean_axes(&[2, 3], true)?)?;
    let sd = centred.square().mean_axes(&[2, 3], true)?.add_scalar(ZSCORE_EPS).sqrt()?;
    centred.div(sd)
}

/// Concatenate the layout's channels into `[B,C,H,W]`; `map_pre`/`map_prob`
/// are standardised in-graph so gradients reach the extractor.
pub fn assemble_input<'g>(
    batch: &Batch,
    map_pre: Option<Tensor<'g>>,
    map_prob: Option<Tensor<'g>>,
    graph: &'g crate::tensor::Graph,
) -> Result<Tensor<'g>> {
    let mut parts: Vec<Tensor<'g>> = Vec::with_capacity(batch.layout.len());
    for channel in &batch.layout {
        let t = match channel {
            InputChannel::MapPre => zscore_tensor(map_pre.ok_or_else(|| Error::Config("layout needs map_pre".into()))?)?,
            InputChannel::MapProb => zscore_tensor(map_prob.ok_or_else(|| Error::Config("layout needs map_prob".into()))?)?,
            other => {
                let (_, a) = batch
                    .static_channels
                    .iter()
                    .find(|(c, _)| c == other)
                    .ok_or_else(|| Error::Config(format!("batch lacks channel {other:?}")))?;
                graph.constant(a.clone())
            }
        };
        parts.push(t);
    }
    let mut it = parts.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Config("empty layout".into()))?;
    for t in it {
        acc = acc.concat_channels(t)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom_case, PhantomSpec};
    use crate::pipeline::Variant;
    use crate::tensor::Graph;

    fn spec() -> PhantomSpec {
        PhantomSpec {
            n_cases: 3,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn generator_input_layout() {
        let case = generate_phantom_case(&spec(), 0).unwrap();
        let pre = NdArray::from_vec(&[64, 64], (0..4096).map(|i| (i % 7) as f64).collect()).unwrap();
        let prob = pre.map(crate::tensor::sigmoid);
        let mean = case.ctp.mean_frame();
        let x = assemble_generator_input(&pre, &prob, &case.maps, &mean).unwrap();
        assert_eq!(x.shape(), &[7, 64, 64]);
        let cbf = zscore(&case.maps.cbf);
        assert_eq!(&x.data()[2 * 4096..3 * 4096], cbf.data());
        for c in 0..7 {
            let plane = &x.data()[c * 4096..(c + 1) * 4096];
            let m = plane.iter().sum::<f64>() / 4096.0;
            assert!(m.abs() < 1e-10);
        }
    }

    #[test]
    fn layout_tag_detects_permutation() {
        let mut layout = GENERATOR_CHANNELS.to_vec();
        let tag = layout_tag(&layout);
        layout.swap(2, 3);
        assert_ne!(layout_tag(&layout), tag);
        assert_eq!(tag, "map_pre,map_prob,cbf,cbv,mtt,tmax,ctp_mean");
    }

    #[test]
    fn in_graph_assembly_matches_offline() {
        let cfg = TrainConfig::desk();
        let case = generate_phantom_case(&spec(), 1).unwrap();
        let prep = prepare_case(&case, &cfg).unwrap();
        let batch = Batch::new(&[&prep], &cfg.input_channels).unwrap();
        let pre = NdArray::from_vec(&[64, 64], (0..4096).map(|i| ((i * 31) % 17) as f64 * 0.1).collect()).unwrap();
        let prob = pre.map(crate::tensor::sigmoid);
        let g = Graph::new();
        let x = assemble_input(
            &batch,
            Some(g.constant(pre.reshape(&[1, 1, 64, 64]).unwrap())),
            Some(g.constant(prob.reshape(&[1, 1, 64, 64]).unwrap())),
            &g,
        )
        .unwrap()
        .to_array();
        let offline = assemble_generator_input(&pre, &prob, &case.maps, &case.ctp.mean_frame()).unwrap();
        assert_eq!(x.shape(), &[1, 7, 64, 64]);
        assert!(x.reshape(&[7, 64, 64]).unwrap().max_abs_diff(&offline) < 1e-6);
    }

    #[test]
    fn prepared_targets_and_variants() {
        let case = generate_phantom_case(&spec(), 2).unwrap();
        let full = prepare_case(&case, &TrainConfig::desk()).unwrap();
        assert_eq!(full.extractor_input.as_ref().unwrap().shape(), &[6, 64, 64]);
        assert_eq!(full.static_channels.len(), 5);
        let t = full.targets.as_ref().unwrap();
        assert!(t.dwi.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(t.weights.data().iter().all(|v| *v >= 1.0));
        let seg = prepare_case(&case, &TrainConfig::desk().with_variant(Variant::SegOnly)).unwrap();
        assert!(seg.extractor_input.is_none());
        assert_eq!(seg.static_channels.len(), 4);
        let wrong = TrainConfig {
            image_size: 128,
            ..TrainConfig::desk()
        };
        assert!(prepare_case(&case, &wrong).is_err());
    }
}

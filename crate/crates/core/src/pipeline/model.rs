use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LesionMask;
use crate::losses::{extractor_loss, generator_loss, pr_loss};
use crate::nn::{build_unet, xavier_init, Checkpoint, Ctx, NormMode, PassOutput, UNet};
use crate::tensor::{Graph, NdArray, Tensor};

use super::config::{TrainConfig, Variant};
use super::data::{assemble_input, layout_tag, Batch, PreparedCase};
use super::optim::RmsProp;

/// Foreground probability above which a pixel is labelled lesion.
pub const MASK_THRESHOLD: f64 = 0.5;

/// SplitMix64 finaliser; derives independent seeds from one base seed.
pub fn derive_seed(seed: u64, salt: &[u64]) -> u64 {
    let mut z = seed;
    for &s in salt {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(s);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Per-component values of one loss evaluation (0 for absent stages).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub extractor: f64,
    pub generator: f64,
    pub segmentor: f64,
}

/// Graph outputs of one forward pass, each `[B,·,H,W]`.
pub struct Outputs<'g> {
    pub map_pre: Option<Tensor<'g>>,
    pub map_prob: Option<Tensor<'g>>,
    pub dwi_g: Option<Tensor<'g>>,
    pub seg_prob: Tensor<'g>,
}

/// Loss tensors; `total` is the plain sum of the present components.
pub struct Losses<'g> {
    pub total: Tensor<'g>,
    pub extractor: Option<Tensor<'g>>,
    pub generator: Option<Tensor<'g>>,
    pub segmentor: Tensor<'g>,
}

impl Losses<'_> {
    pub fn values(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.total.item(),
            extractor: self.extractor.map_or(0.0, |t| t.item()),
            generator: self.generator.map_or(0.0, |t| t.item()),
            segmentor: self.segmentor.item(),
        }
    }
}

/// Parameter bindings of all present networks for one graph.
pub struct Bindings<'g, 's> {
    pub extractor: Option<Ctx<'g, 's>>,
    pub generator: Option<Ctx<'g, 's>>,
    pub segmentor: Ctx<'g, 's>,
    /// Segmentor parameters as constants, batch statistics not recorded.
    pub features: Ctx<'g, 's>,
}

/// Result of running a trained pipeline on one case.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub case_id: String,
    pub map_pre: Option<NdArray>,
    pub map_prob: Option<NdArray>,
    pub dwi_g: Option<NdArray>,
    /// `[2,H,W]` background/lesion probabilities.
    pub seg_prob: NdArray,
    pub mask: LesionMask,
}

/// Networks, optimizer state and progress of one training run.
#[derive(Debug, Clone)]
pub struct PipelineState {
    pub config: TrainConfig,
    pub fold: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub extractor: Option<UNet>,
    pub generator: Option<UNet>,
    pub segmentor: UNet,
    opt_extractor: Option<RmsProp>,
    opt_generator: Option<RmsProp>,
    opt_segmentor: RmsProp,
}

const NETS: [&str; 3] = ["extractor", "generator", "segmentor"];

impl PipelineState {
    /// Freshly initialised networks; initial weights depend on
    /// `(config.seed, fold)` only.
    pub fn new(config: &TrainConfig, fold: usize) -> Result<Self> {
        config.validate()?;
        let make = |spec, k: u64| -> Result<UNet> {
            let mut net = build_unet(spec)?;
            xavier_init(&mut net, derive_seed(config.seed, &[fold as u64, k]));
            Ok(net)
        };
        let extractor = config
            .variant
            .has_extractor()
            .then(|| make(config.extractor_spec(), 0))
            .transpose()?;
        let generator = config
            .variant
            .has_generator()
            .then(|| make(config.generator_spec(), 1))
            .transpose()?;
        let segmentor = make(config.segmentor_spec(), 2)?;
        let opt = |n: &UNet| RmsProp::new(n.params(), config.rmsprop_rho, config.rmsprop_eps);
        Ok(Self {
            config: config.clone(),
            fold,
            epoch: 0,
            opt_extractor: extractor.as_ref().map(opt),
            opt_generator: generator.as_ref().map(opt),
            opt_segmentor: opt(&segmentor),
            extractor,
            generator,
            segmentor,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.networks().iter().map(|(_, n)| n.params().num_scalars()).sum()
    }

    fn networks(&self) -> Vec<(&'static str, &UNet)> {
        let mut out = Vec::new();
        if let Some(n) = &self.extractor {
            out.push((NETS[0], n));
        }
        if let Some(n) = &self.generator {
            out.push((NETS[1], n));
        }
        out.push((NETS[2], &self.segmentor));
        out
    }

    pub fn bind<'g, 's>(&'s self, graph: &'g Graph, train: bool) -> Bindings<'g, 's> {
        let mode = if train { NormMode::Train } else { NormMode::Eval };
        let feature_mode = if train { NormMode::TrainFrozen } else { NormMode::Eval };
        Bindings {
            extractor: self.extractor.as_ref().map(|n| n.ctx(graph, train, mode)),
            generator: self.generator.as_ref().map(|n| n.ctx(graph, train, mode)),
            segmentor: self.segmentor.ctx(graph, train, mode),
            features: self.segmentor.ctx(graph, false, feature_mode),
        }
    }

    /// Extractor → generator → segmentor on `batch`.
    pub fn forward<'g>(&self, graph: &'g Graph, binds: &Bindings<'g, '_>, batch: &Batch) -> Result<Outputs<'g>> {
        let detach = self.config.detach_stages;
        let (map_pre, map_prob) = match (&self.extractor, &binds.extractor) {
            (Some(net), Some(ctx)) => {
                let x = batch
                    .extractor_input
                    .as_ref()
                    .ok_or_else(|| Error::Input("batch lacks extractor input".into()))?;
                let pre = net.forward(ctx, graph.constant(x.clone()))?;
                (Some(pre), Some(pre.sigmoid()))
            }
            _ => (None, None),
        };
        let stop = |t: Option<Tensor<'g>>| if detach { t.map(|t| t.detach()) } else { t };
        let input = assemble_input(batch, stop(map_pre), stop(map_prob), graph)?;
        let (dwi_g, seg_input) = match (&self.generator, &binds.generator) {
            (Some(net), Some(ctx)) => {
                let d = net.forward(ctx, input)?;
                (Some(d), if detach { d.detach() } else { d })
            }
            _ => (None, input),
        };
        let seg_prob = self.segmentor.forward(&binds.segmentor, seg_input)?;
        Ok(Outputs {
            map_pre,
            map_prob,
            dwi_g,
            seg_prob,
        })
    }

    /// `L_e + L_g + L_s` for the stages present in this variant.
    pub fn total_loss<'g>(&self, out: &Outputs<'g>, binds: &Bindings<'g, '_>, batch: &Batch) -> Result<Losses<'g>> {
        let cfg = &self.config;
        let w = &cfg.loss_weights;
        let missing = || Error::Input(format!("batch {:?} lacks dwi/mask targets", batch.case_ids));
        let mask = batch.mask.as_ref().ok_or_else(missing)?;
        let weights = batch.weights.as_ref().ok_or_else(missing)?;
        let one_hot = batch.one_hot.as_ref().ok_or_else(missing)?;
        let extractor = out.map_prob.map(|p| extractor_loss(p, mask, w.alpha)).transpose()?;
        let generator = match out.dwi_g {
            Some(d) => {
                let dwi = batch.dwi.as_ref().ok_or_else(missing)?;
                let stages = cfg.feature_stages;
                let features = |x: Tensor<'g>| self.segmentor.encoder_features(&binds.features, x, stages);
                Some(generator_loss(d, dwi, weights, features, w.beta, w.gamma, cfg.image_distance)?)
            }
            None => None,
        };
        let segmentor = pr_loss(out.seg_prob, one_hot, weights, w.delta, cfg.gd_eps)?;
        let mut total = segmentor;
        for t in [extractor, generator].into_iter().flatten() {
            total = total.add(t)?;
        }
        Ok(Losses {
            total,
            extractor,
            generator,
            segmentor,
        })
    }

    /// One optimisation step at learning rate `lr`.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
        let graph = Graph::new();
        let (values, passes) = {
            let binds = self.bind(&graph, true);
            let out = self.forward(&graph, &binds, batch)?;
            let losses = self.total_loss(&out, &binds, batch)?;
            let values = losses.values();
            if !values.total.is_finite() {
                return Err(Error::Domain {
                    op: "train_step",
                    detail: format!("non-finite loss {values:?} at epoch {}", self.epoch),
                });
            }
            graph.backward(losses.total)?;
            let finish = |c: Option<Ctx<'_, '_>>| c.map(Ctx::finish);
            (
                values,
                (finish(binds.extractor), finish(binds.generator), binds.segmentor.finish()),
            )
        };
        let (pe, pg, ps) = passes;
        apply(self.extractor.as_mut(), self.opt_extractor.as_mut(), pe, lr);
        apply(self.generator.as_mut(), self.opt_generator.as_mut(), pg, lr);
        apply(Some(&mut self.segmentor), Some(&mut self.opt_segmentor), Some(ps), lr);
        Ok(values)
    }

    /// Loss of `batch` without updating anything (evaluation statistics).
    pub fn evaluate_loss(&self, batch: &Batch) -> Result<LossBreakdown> {
        let graph = Graph::new();
        let binds = self.bind(&graph, false);
        let out = self.forward(&graph, &binds, batch)?;
        Ok(self.total_loss(&out, &binds, batch)?.values())
    }

    /// Run the pipeline in evaluation mode on a batch of cases.
    pub fn infer_batch(&self, cases: &[&PreparedCase]) -> Result<Vec<Inference>> {
        let batch = Batch::new(cases, &self.config.input_channels)?;
        let graph = Graph::new();
        let binds = self.bind(&graph, false);
        let out = self.forward(&graph, &binds, &batch)?;
        let (h, w) = (cases[0].height, cases[0].width);
        let plane = h * w;
        let split = |t: Option<Tensor<'_>>, channels: usize, b: usize| -> Result<Option<NdArray>> {
            t.map(|t| {
                let a = t.to_array();
                let start = b * channels * plane;
                let shape: Vec<usize> = if channels == 1 { vec![h, w] } else { vec![channels, h, w] };
                NdArray::from_vec(&shape, a.data()[start..start + channels * plane].to_vec())
            })
            .transpose()
        };
        (0..cases.len())
            .map(|b| {
                let seg_prob = split(Some(out.seg_prob), 2, b)?.expect("present");
                let fg = &seg_prob.data()[plane..];
                let mask = LesionMask::new(h, w, fg.iter().map(|&p| p > MASK_THRESHOLD).collect())?;
                Ok(Inference {
                    case_id: cases[b].case_id.clone(),
                    map_pre: split(out.map_pre, 1, b)?,
                    map_prob: split(out.map_prob, 1, b)?,
                    dwi_g: split(out.dwi_g, 1, b)?,
                    seg_prob,
                    mask,
                })
            })
            .collect()
    }

    pub fn infer(&self, case: &PreparedCase) -> Result<Inference> {
        Ok(self.infer_batch(&[case])?.remove(0))
    }

    /// Parameters, running statistics, optimizer moments and progress.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        let config = serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.meta.insert("config".into(), config);
        ckpt.meta.insert("epoch".into(), self.epoch.to_string());
        ckpt.meta.insert("fold".into(), self.fold.to_string());
        ckpt.meta.insert("layout".into(), layout_tag(&self.config.input_channels));
        ckpt.meta.insert("variant".into(), self.config.variant.name().into());
        for (name, net) in self.networks() {
            ckpt.add_store(name, net.params());
        }
        for (name, net, opt) in self.optimizers() {
            for (p, s) in net.params().params().iter().zip(opt.square_avg()) {
                ckpt.insert(format!("optim/{name}/{}", p.name), s.clone());
            }
        }
        Ok(ckpt)
    }

    fn optimizers(&self) -> Vec<(&'static str, &UNet, &RmsProp)> {
        let mut out = Vec::new();
        if let (Some(n), Some(o)) = (&self.extractor, &self.opt_extractor) {
            out.push((NETS[0], n, o));
        }
        if let (Some(n), Some(o)) = (&self.generator, &self.opt_generator) {
            out.push((NETS[1], n, o));
        }
        out.push((NETS[2], &self.segmentor, &self.opt_segmentor));
        out
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ckpt.meta
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta entry {k}")))
        };
        let config: TrainConfig =
            serde_json::from_str(meta("config")?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        if meta("layout")? != &layout_tag(&config.input_channels) {
            return Err(Error::Checkpoint("input layout tag does not match the stored configuration".into()));
        }
        let parse = |k: &str| -> Result<usize> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("meta {k} is not an integer")))
        };
        let mut state = Self::new(&config, parse("fold")?)?;
        state.epoch = parse("epoch")?;
        if let Some(n) = state.extractor.as_mut() {
            ckpt.load_store(NETS[0], n.params_mut())?;
        }
        if let Some(n) = state.generator.as_mut() {
            ckpt.load_store(NETS[1], n.params_mut())?;
        }
        ckpt.load_store(NETS[2], state.segmentor.params_mut())?;
        let moments = |name: &str, net: &UNet| -> Result<Vec<NdArray>> {
            net.params()
                .params()
                .iter()
                .map(|p| {
                    let key = format!("optim/{name}/{}", p.name);
                    ckpt.get(&key)
                        .cloned()
                        .ok_or_else(|| Error::Checkpoint(format!("missing entry {key}")))
                })
                .collect()
        };
        if let (Some(n), Some(o)) = (&state.extractor, state.opt_extractor.as_mut()) {
            o.set_square_avg(moments(NETS[0], n)?)?;
        }
        if let (Some(n), Some(o)) = (&state.generator, state.opt_generator.as_mut()) {
            o.set_square_avg(moments(NETS[1], n)?)?;
        }
        let seg = moments(NETS[2], &state.segmentor)?;
        state.opt_segmentor.set_square_avg(seg)?;
        Ok(state)
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }
}

fn apply(net: Option<&mut UNet>, opt: Option<&mut RmsProp>, pass: Option<PassOutput>, lr: f64) {
    if let (Some(net), Some(opt), Some(pass)) = (net, opt, pass) {
        net.params_mut().absorb(pass);
        opt.step(net.params_mut(), lr);
    }
}

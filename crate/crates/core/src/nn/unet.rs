use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, ConvBlock, NormKind};
use super::params::{Ctx, NormMode, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    None,
    Sigmoid,
    /// Softmax over the channel axis (class probabilities).
    Softmax,
}

/// Working resolution of the presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 256×256 inputs.
    Paper,
    /// 64×64 inputs, CPU-sized widths.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub use_se: bool,
    pub se_reduction: usize,
    pub norm_kind: NormKind,
    pub final_activation: FinalActivation,
    /// When set, construction rejects sizes not divisible by `2^depth`.
    pub input_size: Option<usize>,
}

impl UNetSpec {
    fn segmentor_base(scale: Scale) -> usize {
        match scale {
            Scale::Paper => 32,
            Scale::Desk => 8,
        }
    }

    fn image_size(scale: Scale) -> usize {
        match scale {
            Scale::Paper => 256,
            Scale::Desk => 64,
        }
    }

    /// Segmentor: SE gates and switchable normalisation, 2-class softmax.
    pub fn segmentor(scale: Scale, in_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels: 2,
            base_channels: Self::segmentor_base(scale),
            depth: match scale {
                Scale::Paper => 4,
                Scale::Desk => 3,
            },
            use_se: true,
            se_reduction: match scale {
                Scale::Paper => 16,
                Scale::Desk => 4,
            },
            norm_kind: NormKind::Switchable,
            final_activation: FinalActivation::Softmax,
            input_size: Some(Self::image_size(scale)),
        }
    }

    /// Generator: plain UNet, sigmoid output in [0,1] (DWI intensity scale).
    pub fn generator(scale: Scale, in_channels: usize) -> Self {
        Self {
            use_se: false,
            norm_kind: NormKind::Batch,
            out_channels: 1,
            final_activation: FinalActivation::Sigmoid,
            ..Self::segmentor(scale, in_channels)
        }
    }

    /// Extractor: half the segmentor's widths, depth 3, raw (pre-sigmoid) output.
    pub fn extractor(scale: Scale, in_channels: usize) -> Self {
        Self {
            base_channels: Self::segmentor_base(scale) / 2,
            depth: 3,
            use_se: false,
            norm_kind: NormKind::Batch,
            out_channels: 1,
            final_activation: FinalActivation::None,
            ..Self::segmentor(scale, in_channels)
        }
    }

    pub fn channels_at(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("UNet depth must be at least 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("UNet channel counts must be positive".into()));
        }
        if let Some(size) = self.input_size {
            self.check_spatial(size, size)?;
        }
        Ok(())
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let unit = 1usize << self.depth;
        if h % unit != 0 || w % unit != 0 {
            return Err(Error::Geometry(format!(
                "spatial extent {h}x{w} not divisible by 2^{} = {unit}",
                self.depth
            )));
        }
        Ok(())
    }
}

/// Encoder–decoder with skip connections. Owns its parameters.
#[derive(Debug, Clone)]
pub struct UNet {
    spec: UNetSpec,
    params: ParamStore,
    encoders: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    decoders: Vec<ConvBlock>,
    head: Conv2d,
}

/// Build a network from `spec`; parameters start at zero until
/// [`super::xavier_init`].
pub fn build_unet(spec: UNetSpec) -> Result<UNet> {
    spec.validate()?;
    let mut params = ParamStore::new();
    let se = spec.use_se.then_some(spec.se_reduction);
    let mut encoders = Vec::with_capacity(spec.depth);
    let mut cin = spec.in_channels;
    for stage in 0..spec.depth {
        let c = spec.channels_at(stage);
        encoders.push(ConvBlock::new(&mut params, &format!("enc{stage}"), cin, c, spec.norm_kind, se)?);
        cin = c;
    }
    let bottom = spec.channels_at(spec.depth);
    let bottleneck = ConvBlock::new(&mut params, "bottleneck", cin, bottom, spec.norm_kind, se)?;
    let mut decoders = Vec::with_capacity(spec.depth);
    let mut below = bottom;
    for stage in (0..spec.depth).rev() {
        let c = spec.channels_at(stage);
        decoders.push(ConvBlock::new(
            &mut params,
            &format!("dec{stage}"),
            below + c,
            c,
            spec.norm_kind,
            se,
        )?);
        below = c;
    }
    let head = Conv2d::new(&mut params, "head", spec.base_channels, spec.out_channels, 1);
    Ok(UNet {
        spec,
        params,
        encoders,
        bottleneck,
        decoders,
        head,
    })
}

impl UNet {
    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    pub fn encoders(&self) -> &[ConvBlock] {
        &self.encoders
    }

    pub fn ctx<'g, 's>(&'s self, graph: &'g Graph, trainable: bool, mode: NormMode) -> Ctx<'g, 's> {
        Ctx::new(graph, &self.params, trainable, mode)
    }

    fn check_input(&self, x: &Tensor<'_>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::Geometry(format!(
                "UNet expects [N,{},H,W], got {shape:?}",
                self.spec.in_channels
            )));
        }
        self.spec.check_spatial(shape[2], shape[3])
    }

    /// `[N,in,H,W] → [N,out,H,W]`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        self.check_input(&x)?;
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut h = x;
        for block in &self.encoders {
            let out = block.forward(ctx, h)?;
            skips.push(out);
            h = out.maxpool2()?;
        }
        h = self.bottleneck.forward(ctx, h)?;
        for (block, skip) in self.decoders.iter().zip(skips.iter().rev()) {
            h = block.forward(ctx, h.upsample_nearest2()?.concat_channels(*skip)?)?;
        }
        let logits = self.head.forward(ctx, h)?;
        match self.spec.final_activation {
            FinalActivation::None => Ok(logits),
            FinalActivation::Sigmoid => Ok(logits.sigmoid()),
            FinalActivation::Softmax => logits.softmax(1),
        }
    }

    /// Activations of the first `stages` encoder blocks (before pooling).
    pub fn encoder_features<'g>(
        &self,
        ctx: &Ctx<'g, '_>,
        x: Tensor<'g>,
        stages: usize,
    ) -> Result<Vec<Tensor<'g>>> {
        self.check_input(&x)?;
        if stages == 0 || stages > self.spec.depth {
            return Err(Error::Config(format!(
                "feature stages {stages} outside 1..={}",
                self.spec.depth
            )));
        }
        let mut feats = Vec::with_capacity(stages);
        let mut h = x;
        for (i, block) in self.encoders.iter().take(stages).enumerate() {
            h = block.forward(ctx, h)?;
            feats.push(h);
            if i + 1 < stages {
                h = h.maxpool2()?;
            }
        }
        Ok(feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{xavier_init, ParamKind};
    use crate::tensor::NdArray;

    #[test]
    fn output_shape_matches_input() {
        let spec = UNetSpec {
            in_channels: 6,
            out_channels: 1,
            base_channels: 8,
            depth: 3,
            use_se: false,
            se_reduction: 4,
            norm_kind: NormKind::Batch,
            final_activation: FinalActivation::Sigmoid,
            input_size: Some(64),
        };
        let mut net = build_unet(spec).unwrap();
        xavier_init(&mut net, 1);
        let g = Graph::new();
        let ctx = net.ctx(&g, false, NormMode::Train);
        let y = net.forward(&ctx, g.constant(NdArray::ones(&[1, 6, 64, 64]))).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 64, 64]);
    }

    #[test]
    fn indivisible_extent_rejected() {
        let mut spec = UNetSpec::segmentor(Scale::Desk, 1);
        spec.input_size = Some(36);
        assert!(matches!(build_unet(spec), Err(Error::Geometry(_))));
        let spec = UNetSpec {
            input_size: None,
            ..UNetSpec::segmentor(Scale::Desk, 1)
        };
        let net = build_unet(spec).unwrap();
        let g = Graph::new();
        let ctx = net.ctx(&g, false, NormMode::Train);
        let r = net.forward(&ctx, g.constant(NdArray::ones(&[1, 1, 12, 12])));
        assert!(matches!(r, Err(Error::Geometry(_))));
    }

    #[test]
    fn extractor_halves_segmentor_width() {
        for scale in [Scale::Desk, Scale::Paper] {
            let seg = UNetSpec::segmentor(scale, 1);
            let ext = UNetSpec::extractor(scale, 6);
            assert_eq!(ext.base_channels * 2, seg.base_channels);
        }
    }

    #[test]
    fn doubling_width_quadruples_inner_kernels() {
        let mk = |base| {
            build_unet(UNetSpec {
                base_channels: base,
                ..UNetSpec::generator(Scale::Desk, 7)
            })
            .unwrap()
        };
        let (a, b) = (mk(4), mk(8));
        let weights = |n: &UNet| -> Vec<(String, usize)> {
            n.params()
                .params()
                .iter()
                .filter(|p| p.kind == ParamKind::Weight)
                .map(|p| (p.name.clone(), p.value.numel()))
                .collect()
        };
        for ((name, small), (_, big)) in weights(&a).iter().zip(weights(&b)) {
            // the stem sees a fixed input width and the head a fixed output width
            let expect = if name == "enc0.conv1.weight" || name == "head.weight" { 2 } else { 4 };
            assert_eq!(big, expect * small, "{name}");
        }
    }

    #[test]
    fn every_parameter_registered_once() {
        let net = build_unet(UNetSpec::segmentor(Scale::Desk, 4)).unwrap();
        let mut names: Vec<&str> = net.params().params().iter().map(|p| p.name.as_str()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}

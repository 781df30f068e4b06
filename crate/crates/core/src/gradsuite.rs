//! Registered finite-difference checks over every differentiable building
//! block, from single ops up to the three-network composite.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{extractor_loss, generalized_dice, generator_loss, one_hot, pr_loss, weighted_ce, ImageDistance, GD_EPS};
use crate::nn::{
    build_unet, xavier_init_store, BatchNorm, Ctx, FinalActivation, NormKind, NormMode, ParamKind, ParamStore, SeBlock, SwitchNorm, UNet, UNetSpec,
};
use crate::pipeline::{derive_seed, zscore_tensor};
use crate::tensor::{gradcheck_many, gradcheck_piecewise, Graph, NdArray, Tensor};

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Composite instances drawn before giving up on finding one whose
/// `±FD_STEP` neighbourhood holds no ReLU or max-pool switch.
pub const COMPOSITE_DRAWS: usize = 256;
const COMPOSITE_STREAM: u64 = 0x636f6d70;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

struct Inputs {
    rng: ChaCha8Rng,
}

impl Inputs {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> NdArray {
        let n = shape.iter().product();
        NdArray::from_vec(shape, (0..n).map(|_| self.rng.random_range(lo..hi)).collect()).expect("shape")
    }

    /// Values at least 0.05 away from zero, so ReLU kinks are never crossed.
    fn off_zero(&mut self, shape: &[usize]) -> NdArray {
        let n = shape.iter().product();
        let v = (0..n)
            .map(|_| {
                let m = self.rng.random_range(0.05..1.0);
                if self.rng.random_bool(0.5) { -m } else { m }
            })
            .collect();
        NdArray::from_vec(shape, v).expect("shape")
    }

    /// Distinct values spaced far beyond the step, so max-pool ties never flip.
    fn distinct(&mut self, shape: &[usize]) -> NdArray {
        let n: usize = shape.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 * 2.0 - 1.0).collect();
        v.shuffle(&mut self.rng);
        NdArray::from_vec(shape, v).expect("shape")
    }

    fn mask(&mut self, shape: &[usize]) -> NdArray {
        let n = shape.iter().product();
        let v = (0..n).map(|_| if self.rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        NdArray::from_vec(shape, v).expect("shape")
    }

    /// Xavier kernels; scales, shifts, biases and mixture logits jittered
    /// around their initial values so none sits at a special point.
    fn xavier_jitter(&mut self, store: &mut ParamStore) {
        xavier_init_store(store, self.rng.random());
        for p in store.params_mut() {
            if p.kind != ParamKind::Weight {
                let jitter = self.uniform(p.value.shape(), -0.2, 0.2);
                p.value.add_assign(&jitter);
            }
        }
    }

    fn randomize(&mut self, store: &mut ParamStore) {
        for p in store.params_mut() {
            p.value = self.uniform(p.value.shape(), -1.0, 1.0);
        }
    }
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output element carries a
/// distinct upstream gradient.
fn project<'g>(y: Tensor<'g>, r: &NdArray) -> Result<Tensor<'g>> {
    Ok(y.mul(y.graph().constant(r.clone()))?.sum_all())
}

fn record(out: &mut Vec<GradCheckResult>, name: &str, err: Result<f64>) -> Result<()> {
    let e = err?;
    out.push(GradCheckResult {
        name: name.into(),
        max_rel_error: e,
        passed: e < GRAD_TOLERANCE,
    });
    Ok(())
}

/// Gradcheck over the input and every parameter of a store-backed layer.
fn check_layer<F>(store: &ParamStore, x: &NdArray, r: &NdArray, f: F) -> Result<f64>
where
    F: for<'g> Fn(&Ctx<'g, '_>, Tensor<'g>) -> Result<Tensor<'g>>,
{
    let mut inputs = vec![x.clone()];
    inputs.extend(store.params().iter().map(|p| p.value.clone()));
    gradcheck_many(
        |g, ts| {
            let ctx = Ctx::new(g, store, false, NormMode::TrainFrozen).with_bound(&ts[1..]);
            project(f(&ctx, ts[0])?, r)
        },
        &inputs,
        FD_STEP,
    )
}

fn tiny_unet(inputs: &mut Inputs, in_channels: usize, out_channels: usize, norm: NormKind, se: bool, fin: FinalActivation) -> Result<UNet> {
    let mut net = build_unet(UNetSpec {
        in_channels,
        out_channels,
        base_channels: 2,
        depth: 1,
        use_se: se,
        se_reduction: 2,
        norm_kind: norm,
        final_activation: fin,
        input_size: None,
    })?;
    inputs.xavier_jitter(net.params_mut());
    Ok(net)
}

/// Run every registered check. Instances are at most `2×2×8×8`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut inp = Inputs {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut out = Vec::new();
    let shape = [2, 2, 8, 8];

    let x = inp.uniform(&shape, -1.0, 1.0);
    let k = inp.uniform(&[3, 2, 3, 3], -1.0, 1.0);
    let b = inp.uniform(&[3], -1.0, 1.0);
    let r = inp.uniform(&[2, 3, 8, 8], -1.0, 1.0);
    record(
        &mut out,
        "conv2d",
        gradcheck_many(|_, t| project(t[0].conv2d(t[1], Some(t[2]), 1, 1)?, &r), &[x.clone(), k, b], FD_STEP),
    )?;
    let x7 = inp.uniform(&[2, 2, 7, 7], -1.0, 1.0);
    let k2 = inp.uniform(&[3, 2, 3, 3], -1.0, 1.0);
    let r = inp.uniform(&[2, 3, 3, 3], -1.0, 1.0);
    record(
        &mut out,
        "conv2d_stride2",
        gradcheck_many(|_, t| project(t[0].conv2d(t[1], None, 2, 0)?, &r), &[x7, k2], FD_STEP),
    )?;

    let xd = inp.distinct(&shape);
    let r = inp.uniform(&[2, 2, 4, 4], -1.0, 1.0);
    record(&mut out, "maxpool2", gradcheck_many(|_, t| project(t[0].maxpool2()?, &r), &[xd], FD_STEP))?;
    let r = inp.uniform(&[2, 2, 1, 1], -1.0, 1.0);
    record(&mut out, "avgpool_global", gradcheck_many(|_, t| project(t[0].avgpool_global()?, &r), &[x.clone()], FD_STEP))?;
    let xs = inp.uniform(&[2, 2, 4, 4], -1.0, 1.0);
    let r = inp.uniform(&[2, 2, 8, 8], -1.0, 1.0);
    record(&mut out, "upsample_nearest2", gradcheck_many(|_, t| project(t[0].upsample_nearest2()?, &r), &[xs], FD_STEP))?;
    let y = inp.uniform(&[2, 1, 8, 8], -1.0, 1.0);
    let r = inp.uniform(&[2, 3, 8, 8], -1.0, 1.0);
    record(
        &mut out,
        "concat_channels",
        gradcheck_many(|_, t| project(t[0].concat_channels(t[1])?, &r), &[x.clone(), y], FD_STEP),
    )?;

    let r = inp.uniform(&shape, -1.0, 1.0);
    let xo = inp.off_zero(&shape);
    record(&mut out, "relu", gradcheck_many(|_, t| project(t[0].relu(), &r), &[xo], FD_STEP))?;
    record(&mut out, "sigmoid", gradcheck_many(|_, t| project(t[0].sigmoid(), &r), &[x.clone()], FD_STEP))?;
    record(&mut out, "softmax", gradcheck_many(|_, t| project(t[0].softmax(1)?, &r), &[x.clone()], FD_STEP))?;

    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut store, "se", 2, 2)?;
    inp.randomize(&mut store);
    record(&mut out, "se_block", check_layer(&store, &x, &r, |c, t| se.forward(c, t)))?;
    let mut store = ParamStore::new();
    let sn = SwitchNorm::new(&mut store, "sn", 2);
    inp.randomize(&mut store);
    record(&mut out, "switch_norm", check_layer(&store, &x, &r, |c, t| sn.forward(c, t)))?;
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 2);
    inp.randomize(&mut store);
    record(&mut out, "batch_norm", check_layer(&store, &x, &r, |c, t| bn.forward(c, t)))?;

    let y1 = inp.mask(&[1, 1, 8, 8]);
    let y2 = one_hot(&y1)?;
    let w = inp.uniform(&[1, 1, 8, 8], 1.0, 5.0);
    let dwi_o = inp.uniform(&[1, 1, 8, 8], 0.0, 1.0);
    let logits = inp.uniform(&[1, 2, 8, 8], -2.0, 2.0);
    let p = inp.uniform(&[1, 1, 8, 8], 0.05, 0.95);
    let feature_net = tiny_unet(&mut inp, 1, 2, NormKind::Switchable, true, FinalActivation::Softmax)?;
    record(
        &mut out,
        "extractor_loss",
        gradcheck_many(|_, t| extractor_loss(t[0], &y1, 1.0), std::slice::from_ref(&p), 1e-6),
    )?;
    record(
        &mut out,
        "generator_loss",
        gradcheck_many(
            |g, t| {
                let ctx = feature_net.ctx(g, false, NormMode::TrainFrozen);
                generator_loss(t[0], &dwi_o, &w, |d| feature_net.encoder_features(&ctx, d, 1), 0.5, 1.2, ImageDistance::Squared)
            },
            std::slice::from_ref(&p),
            FD_STEP,
        ),
    )?;
    record(
        &mut out,
        "generalized_dice",
        gradcheck_many(|_, t| generalized_dice(t[0].softmax(1)?, &y2, GD_EPS), std::slice::from_ref(&logits), FD_STEP),
    )?;
    record(
        &mut out,
        "weighted_ce",
        gradcheck_many(|_, t| weighted_ce(t[0].softmax(1)?, &y2, &w), std::slice::from_ref(&logits), FD_STEP),
    )?;
    record(
        &mut out,
        "pr_loss",
        gradcheck_many(|_, t| pr_loss(t[0].softmax(1)?, &y2, &w, 1.0, GD_EPS), std::slice::from_ref(&logits), FD_STEP),
    )?;

    // Own stream, so adding a check above leaves the composite instance alone.
    let mut inp = Inputs {
        rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[COMPOSITE_STREAM])),
    };
    record(&mut out, "three_network_composite", composite(&mut inp))?;
    Ok(out)
}

/// Extractor → generator → segmentor with all three losses, checked with
/// respect to every trainable parameter of the three networks. The feature
/// network of the generator loss is a fixed copy, as in training.
///
/// A few thousand ReLU and max-pool decisions make some branch switch under
/// a `±FD_STEP` perturbation likely on any given draw, so instances are
/// redrawn until every perturbation stays on the branch of the instance.
fn composite(inp: &mut Inputs) -> Result<f64> {
    for _ in 0..COMPOSITE_DRAWS {
        if let Some(err) = composite_instance(inp)? {
            return Ok(err);
        }
    }
    Err(Error::GradCheck(format!(
        "no composite instance in {COMPOSITE_DRAWS} draws avoided every branch switch"
    )))
}

fn composite_instance(inp: &mut Inputs) -> Result<Option<f64>> {
    let ext = tiny_unet(inp, 2, 1, NormKind::Batch, false, FinalActivation::None)?;
    let gen = tiny_unet(inp, 3, 1, NormKind::Batch, false, FinalActivation::Sigmoid)?;
    let seg = tiny_unet(inp, 1, 2, NormKind::Switchable, true, FinalActivation::Softmax)?;
    let frames = inp.uniform(&[2, 2, 8, 8], -1.0, 1.0);
    let map = inp.uniform(&[2, 1, 8, 8], -1.0, 1.0);
    let mask = inp.mask(&[2, 1, 8, 8]);
    let target = one_hot(&mask)?;
    let dwi_o = inp.uniform(&[2, 1, 8, 8], 0.0, 1.0);
    let w = inp.uniform(&[2, 1, 8, 8], 1.0, 5.0);

    let nets = [&ext, &gen, &seg];
    let mut inputs = Vec::new();
    for net in nets {
        inputs.extend(net.params().params().iter().map(|p| p.value.clone()));
    }
    let counts: Vec<usize> = nets.iter().map(|n| n.params().params().len()).collect();
    gradcheck_piecewise(
        |g: &Graph, ts| {
            let (te, rest) = ts.split_at(counts[0]);
            let (tg, ts_) = rest.split_at(counts[1]);
            let ce = Ctx::new(g, ext.params(), false, NormMode::TrainFrozen).with_bound(te);
            let cg = Ctx::new(g, gen.params(), false, NormMode::TrainFrozen).with_bound(tg);
            let cs = Ctx::new(g, seg.params(), false, NormMode::TrainFrozen).with_bound(ts_);
            let features = seg.ctx(g, false, NormMode::TrainFrozen);
            let pre = ext.forward(&ce, g.constant(frames.clone()))?;
            let prob = pre.sigmoid();
            let input = zscore_tensor(pre)?
                .concat_channels(zscore_tensor(prob)?)?
                .concat_channels(g.constant(map.clone()))?;
            let dwi = gen.forward(&cg, input)?;
            let p = seg.forward(&cs, dwi)?;
            let le = extractor_loss(prob, &mask, 1.0)?;
            let lg = generator_loss(
                dwi,
                &dwi_o,
                &w,
                |d| seg.encoder_features(&features, d, 1),
                0.002,
                1.2,
                ImageDistance::Squared,
            )?;
            let ls = pr_loss(p, &target, &w, 1.0, GD_EPS)?;
            le.add(lg)?.add(ls)
        },
        &inputs,
        FD_STEP,
    )
}

use super::params::{BufferId, Ctx, NormMode, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{NdArray, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    /// Absent when a normaliser follows, which would cancel it.
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let mut conv = Self::without_bias(store, name, cin, cout, kernel);
        conv.bias = Some(store.add(format!("{name}.bias"), ParamKind::Bias, NdArray::zeros(&[cout])));
        conv
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            NdArray::zeros(&[cout, cin, kernel, kernel]),
        );
        let bias = None;
        Self {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel,
        }
    }

    /// "Same" convolution at stride 1.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        x.conv2d(
            ctx.param(self.weight),
            self.bias.map(|b| ctx.param(b)),
            1,
            self.kernel / 2,
        )
    }
}

fn channel_view<'g>(t: Tensor<'g>, c: usize) -> Result<Tensor<'g>> {
    t.reshape(&[1, c, 1, 1])
}

/// Weighted sum `Σ_k w[k]·stats[k]` with `w` a length-3 tensor.
fn mix<'g>(w: Tensor<'g>, stats: [Tensor<'g>; 3]) -> Result<Tensor<'g>> {
    let mut acc: Option<Tensor<'g>> = None;
    for (k, s) in stats.into_iter().enumerate() {
        let wk = w.narrow(0, k, 1)?.reshape(&[1, 1, 1, 1])?;
        let term = s.mul(wk)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("three terms"))
}

fn moments<'g>(x: Tensor<'g>, axes: &[usize]) -> Result<(Tensor<'g>, Tensor<'g>)> {
    let mu = x.mean_axes(axes, true)?;
    let var = x.sub(mu)?.square().mean_axes(axes, true)?;
    Ok((mu, var))
}

/// Normaliser that mixes instance, layer and batch statistics with two
/// softmax-weighted 3-way mixtures (one for means, one for variances).
#[derive(Debug, Clone)]
pub struct SwitchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean_logits: ParamId,
    pub var_logits: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub eps: f64,
}

impl SwitchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Scale, NdArray::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), ParamKind::Shift, NdArray::zeros(&[channels])),
            mean_logits: store.add(format!("{name}.mean_logits"), ParamKind::Logits, NdArray::zeros(&[3])),
            var_logits: store.add(format!("{name}.var_logits"), ParamKind::Logits, NdArray::zeros(&[3])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), NdArray::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), NdArray::ones(&[channels])),
            channels,
            eps: NORM_EPS,
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let c = self.channels;
        let (mu_in, var_in) = moments(x, &[2, 3])?;
        let (mu_ln, var_ln) = moments(x, &[1, 2, 3])?;
        let (mu_bn, var_bn) = batch_stats(ctx, x, c, self.running_mean, self.running_var)?;
        let w_mean = ctx.param(self.mean_logits).softmax(0)?;
        let w_var = ctx.param(self.var_logits).softmax(0)?;
        let mu = mix(w_mean, [mu_in, mu_ln, mu_bn])?;
        let var = mix(w_var, [var_in, var_ln, var_bn])?;
        affine(ctx, x.sub(mu)?.div(var.add_scalar(self.eps).sqrt()?)?, self.gamma, self.beta, c)
    }
}

/// Plain batch normalisation.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Scale, NdArray::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), ParamKind::Shift, NdArray::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), NdArray::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), NdArray::ones(&[channels])),
            channels,
            eps: NORM_EPS,
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let c = self.channels;
        let (mu, var) = batch_stats(ctx, x, c, self.running_mean, self.running_var)?;
        affine(ctx, x.sub(mu)?.div(var.add_scalar(self.eps).sqrt()?)?, self.gamma, self.beta, c)
    }
}

/// Batch mean/variance `[1,C,1,1]`: minibatch moments while training,
/// running averages in eval mode.
fn batch_stats<'g>(
    ctx: &Ctx<'g, '_>,
    x: Tensor<'g>,
    c: usize,
    running_mean: BufferId,
    running_var: BufferId,
) -> Result<(Tensor<'g>, Tensor<'g>)> {
    if ctx.mode == NormMode::Eval {
        let g = ctx.graph();
        let mu = g.constant(ctx.store.buffer(running_mean).reshape(&[1, c, 1, 1])?);
        let var = g.constant(ctx.store.buffer(running_var).reshape(&[1, c, 1, 1])?);
        return Ok((mu, var));
    }
    let (mu, var) = moments(x, &[0, 2, 3])?;
    if ctx.mode == NormMode::Train {
        let blend = |old: &NdArray, new: &NdArray| {
            old.zip_map(&new.reshape(&[c]).unwrap(), |o, n| {
                (1.0 - RUNNING_MOMENTUM) * o + RUNNING_MOMENTUM * n
            })
            .unwrap()
        };
        ctx.record_buffer(running_mean, blend(ctx.store.buffer(running_mean), &mu.value()));
        ctx.record_buffer(running_var, blend(ctx.store.buffer(running_var), &var.value()));
    }
    Ok((mu, var))
}

fn affine<'g>(
    ctx: &Ctx<'g, '_>,
    xhat: Tensor<'g>,
    gamma: ParamId,
    beta: ParamId,
    c: usize,
) -> Result<Tensor<'g>> {
    xhat.mul(channel_view(ctx.param(gamma), c)?)?
        .add(channel_view(ctx.param(beta), c)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Switchable,
    Batch,
    None,
}

#[derive(Debug, Clone)]
pub enum Norm {
    Switchable(SwitchNorm),
    Batch(BatchNorm),
    Identity,
}

impl Norm {
    pub fn new(kind: NormKind, store: &mut ParamStore, name: &str, channels: usize) -> Self {
        match kind {
            NormKind::Switchable => Norm::Switchable(SwitchNorm::new(store, name, channels)),
            NormKind::Batch => Norm::Batch(BatchNorm::new(store, name, channels)),
            NormKind::None => Norm::Identity,
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        match self {
            Norm::Switchable(n) => n.forward(ctx, x),
            Norm::Batch(n) => n.forward(ctx, x),
            Norm::Identity => Ok(x),
        }
    }
}

/// Squeeze-and-excitation channel gate.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub squeeze: Conv2d,
    pub excite: Conv2d,
    pub channels: usize,
}

impl SeBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels < reduction || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "SE block: {channels} channels not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            squeeze: Conv2d::new(store, &format!("{name}.fc1"), channels, hidden, 1),
            excite: Conv2d::new(store, &format!("{name}.fc2"), hidden, channels, 1),
            channels,
        })
    }

    /// Per-sample, per-channel gate `s ∈ (0,1)^{N,C,1,1}`.
    pub fn gate<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let pooled = x.avgpool_global()?;
        let hidden = self.squeeze.forward(ctx, pooled)?.relu();
        Ok(self.excite.forward(ctx, hidden)?.sigmoid())
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        x.mul(self.gate(ctx, x)?)
    }
}

/// Two `conv3×3 → norm → relu` units with an optional SE gate.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub norm1: Norm,
    pub conv2: Conv2d,
    pub norm2: Norm,
    pub se: Option<SeBlock>,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        norm: NormKind,
        se_reduction: Option<usize>,
    ) -> Result<Self> {
        let conv1 = Conv2d::without_bias(store, &format!("{name}.conv1"), cin, cout, 3);
        let norm1 = Norm::new(norm, store, &format!("{name}.norm1"), cout);
        let conv2 = Conv2d::without_bias(store, &format!("{name}.conv2"), cout, cout, 3);
        let norm2 = Norm::new(norm, store, &format!("{name}.norm2"), cout);
        let se = se_reduction
            .map(|r| SeBlock::new(store, &format!("{name}.se"), cout, r))
            .transpose()?;
        Ok(Self {
            conv1,
            norm1,
            conv2,
            norm2,
            se,
        })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let h = self.norm1.forward(ctx, self.conv1.forward(ctx, x)?)?.relu();
        let h = self.norm2.forward(ctx, self.conv2.forward(ctx, h)?)?.relu();
        match &self.se {
            Some(se) => se.forward(ctx, h),
            None => Ok(h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck_many, Graph};
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> NdArray {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        NdArray::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            p.value = random(p.value.shape(), seed + i as u64);
        }
    }

    /// Gradcheck over the input and every parameter of a store-backed forward.
    fn check_layer<F>(store: &ParamStore, x: &NdArray, f: F) -> f64
    where
        F: for<'g> Fn(&Ctx<'g, '_>, Tensor<'g>) -> Result<Tensor<'g>>,
    {
        let mut inputs = vec![x.clone()];
        inputs.extend(store.params().iter().map(|p| p.value.clone()));
        let weights = random(x.shape(), 99);
        gradcheck_many(
            |g, ts| {
                let ctx = Ctx::new(g, store, false, NormMode::TrainFrozen);
                let ctx = ctx.with_bound(&ts[1..]);
                let y = f(&ctx, ts[0])?;
                let w = g.constant(weights.clone());
                Ok(y.mul(w)?.sum_all())
            },
            &inputs,
            1e-4,
        )
        .unwrap()
    }

    #[test]
    fn se_zero_weights_halve_input() {
        let mut store = ParamStore::new();
        let se = SeBlock::new(&mut store, "se", 8, 4).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, true, NormMode::Train);
        let x = g.constant(random(&[2, 8, 4, 4], 1));
        let y = se.forward(&ctx, x).unwrap();
        let expect = x.value().map(|v| 0.5 * v);
        assert!(y.value().max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn se_ratio_constant_over_space_and_saturates_to_identity() {
        let mut store = ParamStore::new();
        let se = SeBlock::new(&mut store, "se", 8, 4).unwrap();
        randomize(&mut store, 3);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false, NormMode::Eval);
        let xv = random(&[1, 8, 4, 4], 2).map(|v| v + 2.0);
        let x = g.constant(xv.clone());
        let y = se.forward(&ctx, x).unwrap().to_array();
        for c in 0..8 {
            let r0 = y.at(&[0, c, 0, 0]) / xv.at(&[0, c, 0, 0]);
            for i in 0..4 {
                for j in 0..4 {
                    let r = y.at(&[0, c, i, j]) / xv.at(&[0, c, i, j]);
                    assert!((r - r0).abs() < 1e-12);
                }
            }
        }
        // saturate the excitation logits
        store.get_mut(se.excite.bias.unwrap()).value = NdArray::full(&[8], 1e3);
        store.get_mut(se.excite.weight).value = NdArray::zeros(&[8, 2, 1, 1]);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false, NormMode::Eval);
        let y = se.forward(&ctx, g.constant(xv.clone())).unwrap();
        assert_eq!(y.value().data(), xv.data());
    }

    #[test]
    fn se_rejects_bad_reduction() {
        let mut store = ParamStore::new();
        assert!(matches!(SeBlock::new(&mut store, "se", 2, 4), Err(Error::Config(_))));
        assert!(matches!(SeBlock::new(&mut store, "se", 6, 4), Err(Error::Config(_))));
    }

    #[test]
    fn switch_norm_constant_input_gives_beta() {
        let mut store = ParamStore::new();
        let sn = SwitchNorm::new(&mut store, "sn", 3);
        store.get_mut(sn.beta).value = NdArray::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        store.get_mut(sn.gamma).value = NdArray::full(&[3], 3.0);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, true, NormMode::Train);
        let y = sn.forward(&ctx, g.constant(NdArray::full(&[2, 3, 4, 4], 7.0))).unwrap();
        let y = y.to_array();
        for n in 0..2 {
            for (c, b) in [0.5, -1.0, 2.0].iter().enumerate() {
                assert!((y.at(&[n, c, 1, 2]) - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn switch_norm_selecting_instance_stats_is_instance_norm() {
        let mut store = ParamStore::new();
        let sn = SwitchNorm::new(&mut store, "sn", 2);
        let select = NdArray::from_vec(&[3], vec![50.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        store.get_mut(sn.mean_logits).value = select.clone();
        store.get_mut(sn.var_logits).value = select;
        let xv = random(&[3, 2, 4, 4], 11);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false, NormMode::Train);
        let y = sn.forward(&ctx, g.constant(xv.clone())).unwrap().to_array();
        // direct instance normalisation
        for n in 0..3 {
            for c in 0..2 {
                let vals: Vec<f64> = (0..16).map(|i| xv.at(&[n, c, i / 4, i % 4])).collect();
                let mu = vals.iter().sum::<f64>() / 16.0;
                let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
                for (i, v) in vals.iter().enumerate() {
                    let want = (v - mu) / (var + NORM_EPS).sqrt();
                    assert!((y.at(&[n, c, i / 4, i % 4]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn switch_norm_eval_ignores_batch_composition_without_batch_weight() {
        let mut store = ParamStore::new();
        let sn = SwitchNorm::new(&mut store, "sn", 2);
        let logits = NdArray::from_vec(&[3], vec![0.3, -0.2, f64::NEG_INFINITY]).unwrap();
        store.get_mut(sn.mean_logits).value = logits.clone();
        store.get_mut(sn.var_logits).value = logits;
        let a = random(&[1, 2, 4, 4], 5);
        let b = random(&[1, 2, 4, 4], 6);
        let mut batch = a.data().to_vec();
        batch.extend_from_slice(b.data());
        let run = |x: NdArray| {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &store, false, NormMode::Eval);
            sn.forward(&ctx, g.constant(x)).unwrap().to_array()
        };
        let alone = run(a);
        let together = run(NdArray::from_vec(&[2, 2, 4, 4], batch).unwrap());
        assert_eq!(alone.data(), &together.data()[..32]);
    }

    #[test]
    fn switch_norm_training_updates_running_stats() {
        let mut store = ParamStore::new();
        let sn = SwitchNorm::new(&mut store, "sn", 2);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, true, NormMode::Train);
        sn.forward(&ctx, g.constant(NdArray::full(&[2, 2, 2, 2], 10.0))).unwrap();
        let out = ctx.finish();
        store.absorb(out);
        assert_eq!(store.buffer(sn.running_mean).data(), &[1.0, 1.0]);
        assert_eq!(store.buffer(sn.running_var).data(), &[0.9, 0.9]);
    }

    #[test]
    fn gradcheck_switch_norm_including_logits() {
        let mut store = ParamStore::new();
        let sn = SwitchNorm::new(&mut store, "sn", 2);
        randomize(&mut store, 21);
        let x = random(&[2, 2, 4, 4], 22);
        let err = check_layer(&store, &x, |ctx, x| sn.forward(ctx, x));
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradcheck_batch_norm() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        randomize(&mut store, 31);
        let x = random(&[2, 3, 4, 4], 32);
        let err = check_layer(&store, &x, |ctx, x| bn.forward(ctx, x));
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradcheck_se_block() {
        let mut store = ParamStore::new();
        let se = SeBlock::new(&mut store, "se", 4, 2).unwrap();
        randomize(&mut store, 41);
        let x = random(&[2, 4, 4, 4], 42);
        let err = check_layer(&store, &x, |ctx, x| se.forward(ctx, x));
        assert!(err < 1e-4, "{err}");
    }
}

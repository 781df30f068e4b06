//! Training losses: extractor L1, generator weighted-L2 plus feature distance,
//! and the pixel-region loss (weighted cross entropy minus log generalized
//! dice).
//!
//! Every reduction is a mean over pixels so the scale factors keep their
//! meaning across resolutions. Targets and weights enter as constants;
//! gradients flow only into the prediction tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NdArray, Tensor};

/// Smoothing constant of generalized dice weights and denominator.
pub const GD_EPS: f64 = 1e-5;
/// Probabilities are clamped to `[PROB_FLOOR, 1]` before logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Added under the square root of the root-L2 image distance.
const ROOT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.002,
            gamma: 1.2,
            delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// How the generator's image term measures `dwi_g − dwi_o`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImageDistance {
    /// `mean(W ⊙ d²)`.
    #[default]
    Squared,
    /// `sqrt(mean(W ⊙ d²))`.
    Root,
}

fn same_shape(p: &Tensor<'_>, y: &NdArray) -> Result<()> {
    let ps = p.shape();
    if ps != y.shape() {
        return Err(Error::shape(&ps, y.shape()));
    }
    Ok(())
}

fn check_probs(p: &Tensor<'_>) -> Result<()> {
    let s = p.shape();
    if s.len() != 4 {
        return Err(Error::Geometry(format!("expected [N,L,H,W] probabilities, got {s:?}")));
    }
    Ok(())
}

/// Binary masks `[N,1,H,W]` to two-channel one-hot `[N,2,H,W]`
/// (channel 0 background, channel 1 lesion).
pub fn one_hot(mask: &NdArray) -> Result<NdArray> {
    let &[n, 1, h, w] = mask.shape() else {
        return Err(Error::Geometry(format!("expected [N,1,H,W] mask, got {:?}", mask.shape())));
    };
    let plane = h * w;
    let mut out = NdArray::zeros(&[n, 2, h, w]);
    let data = out.data_mut();
    for b in 0..n {
        for i in 0..plane {
            let fg = mask.data()[b * plane + i];
            data[(2 * b) * plane + i] = 1.0 - fg;
            data[(2 * b + 1) * plane + i] = fg;
        }
    }
    Ok(out)
}

/// `alpha · mean|p − y|`.
pub fn extractor_loss<'g>(p: Tensor<'g>, y: &NdArray, alpha: f64) -> Result<Tensor<'g>> {
    same_shape(&p, y)?;
    let y = p.graph().constant(y.clone());
    Ok(p.sub(y)?.abs().mean_all().scale(alpha))
}

/// `beta · D(W, dwi_g − dwi_o) + gamma · mean((F(dwi_g) − F(dwi_o))²)`, where
/// the feature term averages over every element of every stage returned by
/// `features`. `F(dwi_o)` is gradient-stopped. `features` is not called when
/// `gamma == 0`.
pub fn generator_loss<'g, F>(
    dwi_g: Tensor<'g>,
    dwi_o: &NdArray,
    w: &NdArray,
    features: F,
    beta: f64,
    gamma: f64,
    distance: ImageDistance,
) -> Result<Tensor<'g>>
where
    F: Fn(Tensor<'g>) -> Result<Vec<Tensor<'g>>>,
{
    same_shape(&dwi_g, dwi_o)?;
    same_shape(&dwi_g, w)?;
    let g = dwi_g.graph();
    let target = g.constant(dwi_o.clone());
    let weighted = g.constant(w.clone()).mul(dwi_g.sub(target)?.square())?.mean_all();
    let image = match distance {
        ImageDistance::Squared => weighted,
        ImageDistance::Root => weighted.add_scalar(ROOT_EPS).sqrt()?,
    };
    let mut total = image.scale(beta);
    if gamma != 0.0 {
        let fg = features(dwi_g)?;
        let fo = features(target)?;
        if fg.len() != fo.len() || fg.is_empty() {
            return Err(Error::Config("feature network returned mismatched stages".into()));
        }
        let mut count = 0usize;
        let mut acc: Option<Tensor<'g>> = None;
        for (a, b) in fg.into_iter().zip(fo) {
            count += a.numel();
            let s = a.sub(b.detach())?.square().sum_all();
            acc = Some(match acc {
                Some(t) => t.add(s)?,
                None => s,
            });
        }
        let feat = acc.expect("non-empty").scale(gamma / count as f64);
        total = total.add(feat)?;
    }
    Ok(total)
}

/// Batch-pooled generalized dice of class probabilities `p` against one-hot
/// `y`, both `[N,L,H,W]`. Class weights `1/(Σy_l + eps)²` are constants.
pub fn generalized_dice<'g>(p: Tensor<'g>, y: &NdArray, eps: f64) -> Result<Tensor<'g>> {
    check_probs(&p)?;
    same_shape(&p, y)?;
    if !(eps > 0.0) {
        return Err(Error::Config(format!("dice eps must be > 0, got {eps}")));
    }
    let shape = y.shape();
    let (n, l, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut volume = vec![0.0; l];
    for b in 0..n {
        for c in 0..l {
            let start = (b * l + c) * plane;
            volume[c] += y.data()[start..start + plane].iter().sum::<f64>();
        }
    }
    let weights: Vec<f64> = volume.iter().map(|v| 1.0 / (v + eps).powi(2)).collect();
    let g = p.graph();
    let wl = g.constant(NdArray::from_vec(&[l], weights)?);
    let yt = g.constant(y.clone());
    let axes = [0, 2, 3];
    let inter = p.mul(yt)?.sum_axes(&axes, false)?;
    let total = p.add(yt)?.sum_axes(&axes, false)?;
    let num = wl.mul(inter)?.sum_all().scale(2.0);
    let den = wl.mul(total)?.sum_all().add_scalar(eps);
    num.div(den)
}

/// `mean_i W_i · (−Σ_l y_li log p_li)` with `p` clamped to `[PROB_FLOOR, 1]`.
/// `w` is `[N,1,H,W]`.
pub fn weighted_ce<'g>(p: Tensor<'g>, y: &NdArray, w: &NdArray) -> Result<Tensor<'g>> {
    check_probs(&p)?;
    same_shape(&p, y)?;
    let ps = p.shape();
    let expect_w = [ps[0], 1, ps[2], ps[3]];
    if w.shape() != expect_w {
        return Err(Error::shape(&expect_w, w.shape()));
    }
    let g = p.graph();
    let ce = p
        .clamp(PROB_FLOOR, 1.0)
        .log()?
        .mul(g.constant(y.clone()))?
        .sum_axes(&[1], true)?
        .neg();
    Ok(ce.mul(g.constant(w.clone()))?.mean_all())
}

/// `delta · (weighted_ce − log generalized_dice)`.
pub fn pr_loss<'g>(p: Tensor<'g>, y: &NdArray, w: &NdArray, delta: f64, eps: f64) -> Result<Tensor<'g>> {
    let ce = weighted_ce(p, y, w)?;
    let gd = generalized_dice(p, y, eps)?;
    if !(gd.item() > 0.0) {
        return Err(Error::Domain {
            op: "pr_loss",
            detail: format!("generalized dice {} is not positive", gd.item()),
        });
    }
    Ok(ce.sub(gd.log()?)?.scale(delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, Graph};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> NdArray {
        let n = shape.iter().product();
        NdArray::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    fn random_mask(shape: &[usize], rng: &mut ChaCha8Rng) -> NdArray {
        let n = shape.iter().product();
        NdArray::from_vec(shape, (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect())
            .unwrap()
    }

    /// Two-class probabilities `[N,2,H,W]` from a foreground field.
    fn two_class(fg: &NdArray) -> NdArray {
        let bg = fg.map(|v| 1.0 - v);
        let s = fg.shape();
        let plane = s[2] * s[3];
        let mut out = NdArray::zeros(&[s[0], 2, s[2], s[3]]);
        for b in 0..s[0] {
            for i in 0..plane {
                out.data_mut()[2 * b * plane + i] = bg.data()[b * plane + i];
                out.data_mut()[(2 * b + 1) * plane + i] = fg.data()[b * plane + i];
            }
        }
        out
    }

    fn gd_oracle(p: &NdArray, y: &NdArray, eps: f64) -> f64 {
        let s = p.shape();
        let (mut num, mut den) = (0.0, 0.0);
        for l in 0..s[1] {
            let mut vol = 0.0;
            for b in 0..s[0] {
                for i in 0..s[2] {
                    for j in 0..s[3] {
                        vol += y.at(&[b, l, i, j]);
                    }
                }
            }
            let w = 1.0 / ((vol + eps) * (vol + eps));
            for b in 0..s[0] {
                for i in 0..s[2] {
                    for j in 0..s[3] {
                        num += w * p.at(&[b, l, i, j]) * y.at(&[b, l, i, j]);
                        den += w * (p.at(&[b, l, i, j]) + y.at(&[b, l, i, j]));
                    }
                }
            }
        }
        2.0 * num / (den + eps)
    }

    fn ce_oracle(p: &NdArray, y: &NdArray, w: &NdArray) -> f64 {
        let s = p.shape();
        let mut acc = 0.0;
        for b in 0..s[0] {
            for i in 0..s[2] {
                for j in 0..s[3] {
                    let mut ce = 0.0;
                    for l in 0..s[1] {
                        ce -= y.at(&[b, l, i, j]) * p.at(&[b, l, i, j]).max(PROB_FLOOR).ln();
                    }
                    acc += w.at(&[b, 0, i, j]) * ce;
                }
            }
        }
        acc / (s[0] * s[2] * s[3]) as f64
    }

    #[test]
    fn extractor_loss_examples() {
        let g = Graph::new();
        let y = NdArray::zeros(&[1, 1, 4, 4]);
        let p = g.constant(NdArray::full(&[1, 1, 4, 4], 0.5));
        assert_eq!(extractor_loss(p, &y, 1.0).unwrap().item(), 0.5);
        let p = g.constant(y.clone());
        assert_eq!(extractor_loss(p, &y, 1.0).unwrap().item(), 0.0);
        let bad = g.constant(NdArray::zeros(&[1, 1, 4, 3]));
        assert!(matches!(extractor_loss(bad, &y, 1.0), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn two_pixel_dice() {
        // y = [fg, bg]; foreground probabilities 0.8 and 0.4
        let p = NdArray::from_vec(&[1, 2, 1, 2], vec![0.2, 0.6, 0.8, 0.4]).unwrap();
        let y = NdArray::from_vec(&[1, 2, 1, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let g = Graph::new();
        let gd = generalized_dice(g.constant(p.clone()), &y, 1e-12).unwrap().item();
        assert!((gd - 2.0 * 1.4 / 4.0).abs() < 1e-9);
        let gd = generalized_dice(g.constant(p.clone()), &y, GD_EPS).unwrap().item();
        assert!((gd - gd_oracle(&p, &y, GD_EPS)).abs() < 1e-12);
    }

    #[test]
    fn dice_positive_without_foreground_overlap() {
        let y = one_hot(&NdArray::from_vec(&[1, 1, 1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        let p = two_class(&NdArray::from_vec(&[1, 1, 1, 4], vec![0.0, 0.0, 0.0, 0.0]).unwrap());
        let g = Graph::new();
        let gd = generalized_dice(g.constant(p), &y, GD_EPS).unwrap().item();
        assert!(gd > 0.0);
    }

    #[test]
    fn perfect_prediction_losses_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = random_mask(&[2, 1, 6, 6], &mut rng);
        let y = one_hot(&mask).unwrap();
        let w = random(&[2, 1, 6, 6], &mut rng, 1.0, 5.0);
        let g = Graph::new();
        let p = g.constant(y.clone());
        assert_eq!(weighted_ce(p, &y, &w).unwrap().item(), 0.0);
        // perfect overlap leaves only the denominator smoothing: 2S / (2S + eps)
        let s: f64 = (0..2)
            .map(|l| {
                let vol: f64 = (0..2).map(|b| y.data()[(2 * b + l) * 36..(2 * b + l + 1) * 36].iter().sum::<f64>()).sum();
                vol / (vol + GD_EPS).powi(2)
            })
            .sum();
        let expect = 2.0 * s / (2.0 * s + GD_EPS);
        let gd = generalized_dice(p, &y, GD_EPS).unwrap().item();
        assert!((gd - expect).abs() < 1e-14);
        let pr = pr_loss(p, &y, &w, 1.0, GD_EPS).unwrap().item();
        assert!((pr + expect.ln()).abs() < 1e-14);
        assert!(pr < GD_EPS * 72.0);
        let tiny = generalized_dice(p, &y, 1e-12).unwrap().item();
        assert!((1.0 - tiny).abs() < 1e-9);
        assert_eq!(pr_loss(p, &y, &w, 0.0, GD_EPS).unwrap().item(), 0.0);
    }

    #[test]
    fn uniform_prediction_cross_entropy() {
        let y = one_hot(&NdArray::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let g = Graph::new();
        let p = g.constant(NdArray::full(&[1, 2, 2, 2], 0.5));
        let ce = weighted_ce(p, &y, &NdArray::full(&[1, 1, 2, 2], 2.0)).unwrap().item();
        assert!((ce - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn segmentation_losses_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let fg = random(&[2, 1, 8, 8], &mut rng, 0.01, 0.99);
            let p = two_class(&fg);
            let y = one_hot(&random_mask(&[2, 1, 8, 8], &mut rng)).unwrap();
            let w = random(&[2, 1, 8, 8], &mut rng, 1.0, 5.0);
            let g = Graph::new();
            let pt = g.constant(p.clone());
            let gd = gd_oracle(&p, &y, GD_EPS);
            let ce = ce_oracle(&p, &y, &w);
            assert!((generalized_dice(pt, &y, GD_EPS).unwrap().item() - gd).abs() < 1e-12);
            assert!((weighted_ce(pt, &y, &w).unwrap().item() - ce).abs() < 1e-12);
            let pr = pr_loss(pt, &y, &w, 0.7, GD_EPS).unwrap().item();
            assert!((pr - 0.7 * (ce - gd.ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_image_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[1, 1, 8, 8], &mut rng, 0.0, 1.0);
        let b = random(&[1, 1, 8, 8], &mut rng, 0.0, 1.0);
        let ones = NdArray::ones(&[1, 1, 8, 8]);
        fn no_features(_: Tensor<'_>) -> Result<Vec<Tensor<'_>>> {
            unreachable!("gamma is zero")
        }
        let g = Graph::new();
        let ga = g.constant(a.clone());
        let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 64.0;
        let l = generator_loss(ga, &b, &ones, no_features, 0.3, 0.0, ImageDistance::Squared).unwrap();
        assert!((l.item() - 0.3 * mse).abs() < 1e-15);
        let twos = NdArray::full(&[1, 1, 8, 8], 2.0);
        let l2 = generator_loss(ga, &b, &twos, no_features, 0.3, 0.0, ImageDistance::Squared).unwrap();
        assert_eq!(l2.item(), 2.0 * l.item());
        let same = generator_loss(ga, &a, &ones, |x| Ok(vec![x.square()]), 1.0, 1.0, ImageDistance::Squared);
        assert_eq!(same.unwrap().item(), 0.0);
        let root = generator_loss(ga, &b, &ones, no_features, 1.0, 0.0, ImageDistance::Root).unwrap();
        assert!((root.item() - (mse + ROOT_EPS).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn feature_term_pools_all_stages() {
        let g = Graph::new();
        let a = NdArray::full(&[1, 1, 2, 2], 1.0);
        let b = NdArray::zeros(&[1, 1, 2, 2]);
        // stages x (4 elements) and 3x (4 elements): ((1 + 9) * 4) / 8 = 5
        fn f(x: Tensor<'_>) -> Result<Vec<Tensor<'_>>> {
            Ok(vec![x, x.scale(3.0)])
        }
        let l = generator_loss(g.constant(a), &b, &NdArray::ones(&[1, 1, 2, 2]), f, 0.0, 1.0, ImageDistance::Squared);
        assert_eq!(l.unwrap().item(), 5.0);
    }

    #[test]
    fn target_branch_is_gradient_stopped() {
        let g = Graph::new();
        let x = g.variable(NdArray::full(&[1, 1, 2, 2], 0.5));
        let o = NdArray::zeros(&[1, 1, 2, 2]);
        let w = g.variable(NdArray::full(&[1], 2.0));
        let ones = NdArray::ones(&[1, 1, 2, 2]);
        let l = generator_loss(x, &o, &ones, |t| Ok(vec![t.mul(w)?]), 0.0, 1.0, ImageDistance::Squared).unwrap();
        l.backward().unwrap();
        // d/dw mean((w x)^2 - 0) = 2 w x^2
        assert!((w.grad().unwrap().item() - 2.0 * 2.0 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y1 = random_mask(&[1, 1, 8, 8], &mut rng);
        let y2 = one_hot(&y1).unwrap();
        let w = random(&[1, 1, 8, 8], &mut rng, 1.0, 5.0);
        let o = random(&[1, 1, 8, 8], &mut rng, 0.0, 1.0);
        let logits = random(&[1, 2, 8, 8], &mut rng, -2.0, 2.0);
        let x = random(&[1, 1, 8, 8], &mut rng, 0.05, 0.95);
        let tol = 1e-4;
        let e = gradcheck(|_, p| extractor_loss(p, &y1, 1.3), &x, 1e-6).unwrap();
        assert!(e < tol, "extractor {e}");
        fn feat(t: Tensor<'_>) -> Result<Vec<Tensor<'_>>> {
            Ok(vec![t.sigmoid(), t.square()])
        }
        let e = gradcheck(|_, p| generator_loss(p, &o, &w, feat, 0.5, 1.2, ImageDistance::Squared), &x, 1e-5).unwrap();
        assert!(e < tol, "generator {e}");
        let e = gradcheck(|_, p| generator_loss(p, &o, &w, feat, 0.5, 0.0, ImageDistance::Root), &x, 1e-5).unwrap();
        assert!(e < tol, "generator root {e}");
        let e = gradcheck(|_, z| generalized_dice(z.softmax(1)?, &y2, GD_EPS), &logits, 1e-5).unwrap();
        assert!(e < tol, "dice {e}");
        let e = gradcheck(|_, z| weighted_ce(z.softmax(1)?, &y2, &w), &logits, 1e-5).unwrap();
        assert!(e < tol, "ce {e}");
        let e = gradcheck(|_, z| pr_loss(z.softmax(1)?, &y2, &w, 1.0, GD_EPS), &logits, 1e-5).unwrap();
        assert!(e < tol, "pr {e}");
    }

    #[test]
    fn pr_gradient_nonzero_without_overlap() {
        let mask = NdArray::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let y = one_hot(&mask).unwrap();
        let g = Graph::new();
        let p = g.variable(two_class(&NdArray::full(&[1, 1, 2, 2], 0.01)));
        let l = pr_loss(p, &y, &NdArray::ones(&[1, 1, 2, 2]), 1.0, GD_EPS).unwrap();
        l.backward().unwrap();
        assert!(p.grad().unwrap().data().iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            beta: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn dice_permutation_invariant(seed in 0u64..1000, shift in 1usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fg = random(&[1, 1, 4, 4], &mut rng, 0.0, 1.0);
            let mask = random_mask(&[1, 1, 4, 4], &mut rng);
            let rot = |a: &NdArray| {
                let d = a.data();
                NdArray::from_vec(a.shape(), (0..16).map(|i| d[(i + shift) % 16]).collect()).unwrap()
            };
            let g = Graph::new();
            let a = generalized_dice(g.constant(two_class(&fg)), &one_hot(&mask).unwrap(), GD_EPS).unwrap().item();
            let b = generalized_dice(g.constant(two_class(&rot(&fg))), &one_hot(&rot(&mask)).unwrap(), GD_EPS).unwrap().item();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a > 0.0 && a <= 1.0);
        }

        #[test]
        fn losses_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fg = random(&[1, 1, 4, 4], &mut rng, 0.0, 1.0);
            let mask = random_mask(&[1, 1, 4, 4], &mut rng);
            let w = random(&[1, 1, 4, 4], &mut rng, 1.0, 5.0);
            let y = one_hot(&mask).unwrap();
            let g = Graph::new();
            let p = g.constant(two_class(&fg));
            prop_assert!(pr_loss(p, &y, &w, 1.0, GD_EPS).unwrap().item() >= 0.0);
            prop_assert!(weighted_ce(p, &y, &w).unwrap().item() >= 0.0);
            prop_assert!(extractor_loss(g.constant(fg), &mask, 1.0).unwrap().item() >= 0.0);
        }
    }
}

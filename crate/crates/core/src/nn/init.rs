use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamKind, ParamStore};
use super::unet::UNet;
use crate::tensor::NdArray;

/// Half-width of the Xavier uniform law for a kernel of `shape` `[K,C,kh,kw]`.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn xavier_init_store(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = match p.kind {
            ParamKind::Weight => {
                let a = xavier_bound(&shape);
                let n = p.value.numel();
                NdArray::from_vec(&shape, (0..n).map(|_| rng.random_range(-a..=a)).collect())
                    .expect("shape preserved")
            }
            ParamKind::Scale => NdArray::ones(&shape),
            ParamKind::Bias | ParamKind::Shift | ParamKind::Logits => NdArray::zeros(&shape),
        };
        p.grad = NdArray::zeros(&shape);
    }
    for b in store.buffers_mut() {
        let fill = if b.name.ends_with("running_var") { 1.0 } else { 0.0 };
        b.value = NdArray::full(b.value.shape(), fill);
    }
}

/// Xavier-uniform kernels, zero biases, unit norm scales. Deterministic in `seed`.
pub fn xavier_init(net: &mut UNet, seed: u64) {
    xavier_init_store(net.params_mut(), seed);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_unet, Scale, UNetSpec};

    #[test]
    fn same_seed_same_parameters() {
        let mut a = build_unet(UNetSpec::segmentor(Scale::Desk, 1)).unwrap();
        let mut b = a.clone();
        xavier_init(&mut a, 7);
        xavier_init(&mut b, 7);
        for (p, q) in a.params().params().iter().zip(b.params().params()) {
            assert_eq!(p.value, q.value);
        }
        xavier_init(&mut b, 8);
        assert_ne!(a.params().params()[0].value, b.params().params()[0].value);
    }

    #[test]
    fn draws_respect_bound_and_variance() {
        // 64x64 matrix as a 1x1 kernel: fan_in = fan_out = 64
        let mut store = ParamStore::new();
        store.add("w", ParamKind::Weight, NdArray::zeros(&[64, 64, 1, 1]));
        let bound = xavier_bound(&[64, 64, 1, 1]);
        let target = 2.0 / 128.0;
        for seed in 0..25 {
            xavier_init_store(&mut store, seed);
            let v = store.params()[0].value.data();
            assert!(v.iter().all(|x| x.abs() <= bound));
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            assert!((var - target).abs() / target < 0.1, "seed {seed}: {var}");
        }
    }

    #[test]
    fn bound_holds_over_many_draws() {
        let mut store = ParamStore::new();
        store.add("w", ParamKind::Weight, NdArray::zeros(&[100, 120, 3, 3]));
        xavier_init_store(&mut store, 3);
        let bound = xavier_bound(&[100, 120, 3, 3]);
        assert!(store.params()[0].value.numel() >= 100_000);
        assert!(store.params()[0].value.data().iter().all(|x| x.abs() <= bound));
    }
}

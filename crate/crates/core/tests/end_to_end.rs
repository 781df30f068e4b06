//! Phantom cases through disk, training, checkpointing and cross-validation.

use std::collections::BTreeSet;

use strokeforge::case::{read_case, write_case};
use strokeforge::nn::Checkpoint;
use strokeforge::phantom::{generate_phantom_case, PhantomSpec};
use strokeforge::pipeline::{
    cross_validate, prepare_case, train_to_end, PipelineState, PreparedCase, TrainConfig, Variant,
};

fn small_spec(n_cases: usize) -> PhantomSpec {
    PhantomSpec {
        n_cases,
        image_size: 32,
        lesion_radius_range: (3.0, 5.0),
        ..PhantomSpec::default()
    }
}

fn small_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        image_size: 32,
        batch_size: 2,
        folds: 2,
        ..TrainConfig::desk()
    }
    .with_variant(variant)
    .with_epochs(2)
}

#[test]
fn cases_survive_a_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(3);
    for i in 0..spec.n_cases {
        let case = generate_phantom_case(&spec, i).unwrap();
        let path = dir.path().join(&case.case_id);
        write_case(&path, &case, Default::default()).unwrap();
        assert_eq!(read_case(&path).unwrap(), case);
    }
}

#[test]
fn every_variant_trains_and_reloads_to_identical_predictions() {
    let spec = small_spec(4);
    for variant in [Variant::SegOnly, Variant::Gen, Variant::Full] {
        let cfg = small_config(variant);
        let cases: Vec<PreparedCase> = (0..spec.n_cases)
            .map(|i| prepare_case(&generate_phantom_case(&spec, i).unwrap(), &cfg).unwrap())
            .collect();
        let mut state = PipelineState::new(&cfg, 0).unwrap();
        let history = train_to_end(&mut state, &cases, |_, _| Ok(())).unwrap();
        assert_eq!(history.len(), 2);
        assert!(history.iter().all(|r| r.loss.total.is_finite()), "{variant:?}: {history:?}");

        let bytes = state.to_checkpoint().unwrap().encode().unwrap();
        let reloaded = PipelineState::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(reloaded.variant(), variant);
        for case in &cases {
            let (a, b) = (state.infer(case).unwrap(), reloaded.infer(case).unwrap());
            assert_eq!(a.seg_prob.shape(), [2, 32, 32]);
            assert_eq!(a.seg_prob, b.seg_prob);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.dwi_g.is_some(), variant != Variant::SegOnly);
            assert_eq!(a.map_prob.is_some(), variant == Variant::Full);
        }
    }
}

#[test]
fn cross_validation_holds_out_every_case_exactly_once() {
    let spec = small_spec(5);
    let cfg = small_config(Variant::Gen).with_epochs(1);
    let cases: Vec<PreparedCase> = (0..spec.n_cases)
        .map(|i| prepare_case(&generate_phantom_case(&spec, i).unwrap(), &cfg).unwrap())
        .collect();
    let report = cross_validate(&cases, &cfg).unwrap();
    assert_eq!(report.folds.len(), 2);
    let held: Vec<&String> = report.folds.iter().flat_map(|f| &f.val_ids).collect();
    let unique: BTreeSet<&String> = held.iter().copied().collect();
    assert_eq!(held.len(), cases.len());
    assert_eq!(unique.len(), cases.len());
    for f in &report.folds {
        assert!(f.train_ids.iter().all(|id| !f.val_ids.contains(id)));
        assert!((0.0..=1.0).contains(&f.mean_dice));
    }
    assert!((0.0..=1.0).contains(&report.mean_dice));
}

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LesionMask;

use super::config::{lr_schedule, TrainConfig, Variant};
use super::data::{Batch, PreparedCase};
use super::model::{derive_seed, LossBreakdown, PipelineState};

/// Cases per evaluation forward pass.
const EVAL_BATCH: usize = 8;

/// `2|P∩T| / (|P|+|T|)`; two empty masks agree perfectly.
pub fn dice_score(pred: &LesionMask, truth: &LesionMask) -> Result<f64> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::ShapeMismatch {
            lhs: vec![pred.height(), pred.width()],
            rhs: vec![truth.height(), truth.width()],
        });
    }
    let inter = pred.values().iter().zip(truth.values()).filter(|(a, b)| **a && **b).count();
    let total = pred.count() + truth.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Fold index of every id; ids are sorted, shuffled with `seed` and dealt
/// round-robin, so fold sizes differ by at most one.
pub fn assign_folds(ids: &[String], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if ids.len() < folds {
        return Err(Error::Config(format!("{} cases cannot fill {folds} folds", ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    if order.windows(2).any(|w| ids[w[0]] == ids[w[1]]) {
        return Err(Error::Input("duplicate case ids".into()));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; ids.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    Ok(fold)
}

/// Mean batch losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub const HISTORY_CSV_HEADER: &str = "fold,epoch,lr,total,extractor,generator,segmentor";

pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_CSV_HEADER}\n");
    for r in records {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{:e},{},{},{},{}",
            r.fold, r.epoch, r.lr, l.total, l.extractor, l.generator, l.segmentor
        );
    }
    out
}

/// Train one epoch over `cases` in a shuffled order that depends only on
/// `(seed, fold, epoch)`; the final partial batch is kept.
pub fn train_epoch(state: &mut PipelineState, cases: &[PreparedCase]) -> Result<EpochRecord> {
    if cases.is_empty() {
        return Err(Error::Input("no training cases".into()));
    }
    let cfg = state.config.clone();
    let epoch = state.epoch;
    let lr = lr_schedule(epoch, &cfg);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let seed = derive_seed(cfg.seed, &[state.fold as u64, epoch as u64, 3]);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut sum = LossBreakdown::default();
    let mut batches = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let members: Vec<&PreparedCase> = chunk.iter().map(|&i| &cases[i]).collect();
        let batch = Batch::new(&members, &cfg.input_channels)?;
        let l = state.train_step(&batch, lr)?;
        sum.total += l.total;
        sum.extractor += l.extractor;
        sum.generator += l.generator;
        sum.segmentor += l.segmentor;
        batches += 1;
    }
    let n = batches as f64;
    state.epoch += 1;
    Ok(EpochRecord {
        fold: state.fold,
        epoch,
        lr,
        loss: LossBreakdown {
            total: sum.total / n,
            extractor: sum.extractor / n,
            generator: sum.generator / n,
            segmentor: sum.segmentor / n,
        },
    })
}

/// Continue training until `config.total_epochs` epochs are complete.
/// `on_epoch` sees the state after every epoch (for checkpoints or logs).
pub fn train_to_end(
    state: &mut PipelineState,
    cases: &[PreparedCase],
    mut on_epoch: impl FnMut(&PipelineState, &EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let mut history = Vec::new();
    while state.epoch < state.config.total_epochs {
        let record = train_epoch(state, cases)?;
        log::info!(
            "fold {} epoch {} lr {:.2e} loss {:.5}",
            record.fold,
            record.epoch,
            record.lr,
            record.loss.total
        );
        on_epoch(state, &record)?;
        history.push(record);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub dice: f64,
    pub predicted_voxels: usize,
    pub true_voxels: usize,
}

/// Dice of every case that carries a ground-truth mask.
pub fn evaluate(state: &PipelineState, cases: &[PreparedCase]) -> Result<Vec<CaseScore>> {
    let labelled: Vec<&PreparedCase> = cases.iter().filter(|c| c.targets.is_some()).collect();
    let mut scores = Vec::with_capacity(labelled.len());
    for chunk in labelled.chunks(EVAL_BATCH) {
        for (case, inf) in chunk.iter().zip(state.infer_batch(chunk)?) {
            let truth = &case.targets.as_ref().expect("filtered").mask;
            scores.push(CaseScore {
                case_id: case.case_id.clone(),
                dice: dice_score(&inf.mask, truth)?,
                predicted_voxels: inf.mask.count(),
                true_voxels: truth.count(),
            });
        }
    }
    Ok(scores)
}

pub fn mean_dice(scores: &[CaseScore]) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    scores.iter().map(|s| s.dice).sum::<f64>() / scores.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub scores: Vec<CaseScore>,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub variant: Variant,
    pub config: TrainConfig,
    pub folds: Vec<FoldReport>,
    /// Mean over all validation cases of all folds.
    pub mean_dice: f64,
    pub history: Vec<EpochRecord>,
    /// Cases whose perfusion fit fell back to default values.
    pub fallbacks: Vec<String>,
}

/// Split into `(train, validation)` for `fold`.
pub fn split_fold<'a>(
    cases: &'a [PreparedCase],
    assignment: &[usize],
    fold: usize,
) -> (Vec<&'a PreparedCase>, Vec<&'a PreparedCase>) {
    cases.iter().zip(assignment).partition(|(_, &f)| f != fold).into_fold()
}

trait IntoFold<'a> {
    fn into_fold(self) -> (Vec<&'a PreparedCase>, Vec<&'a PreparedCase>);
}

impl<'a> IntoFold<'a> for (Vec<(&'a PreparedCase, &usize)>, Vec<(&'a PreparedCase, &usize)>) {
    fn into_fold(self) -> (Vec<&'a PreparedCase>, Vec<&'a PreparedCase>) {
        let strip = |v: Vec<(&'a PreparedCase, &usize)>| v.into_iter().map(|(c, _)| c).collect();
        (strip(self.0), strip(self.1))
    }
}

/// K-fold cross-validation; every case is validated exactly once by a model
/// that never saw it.
pub fn cross_validate(cases: &[PreparedCase], cfg: &TrainConfig) -> Result<CvReport> {
    cross_validate_with(cases, cfg, |_, _, _| Ok(()))
}

/// [`cross_validate`] calling `on_fold` with each trained model, its
/// validation cases and its report before the model is dropped.
pub fn cross_validate_with<F>(cases: &[PreparedCase], cfg: &TrainConfig, mut on_fold: F) -> Result<CvReport>
where
    F: FnMut(&PipelineState, &[PreparedCase], &FoldReport) -> Result<()>,
{
    cfg.validate()?;
    if cases.iter().any(|c| c.targets.is_none()) {
        return Err(Error::Input("cross-validation needs dwi and mask for every case".into()));
    }
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    let assignment = assign_folds(&ids, cfg.folds, cfg.seed)?;
    let mut folds = Vec::with_capacity(cfg.folds);
    let mut history = Vec::new();
    let mut all_scores = Vec::new();
    for fold in 0..cfg.folds {
        let (train, val) = split_fold(cases, &assignment, fold);
        let train: Vec<PreparedCase> = train.into_iter().cloned().collect();
        let val: Vec<PreparedCase> = val.into_iter().cloned().collect();
        let mut state = PipelineState::new(cfg, fold)?;
        history.extend(train_to_end(&mut state, &train, |_, _| Ok(()))?);
        let scores = evaluate(&state, &val)?;
        log::info!("fold {fold}: mean dice {:.4}", mean_dice(&scores));
        all_scores.extend(scores.iter().cloned());
        let report = FoldReport {
            fold,
            train_ids: train.iter().map(|c| c.case_id.clone()).collect(),
            val_ids: val.iter().map(|c| c.case_id.clone()).collect(),
            mean_dice: mean_dice(&scores),
            scores,
        };
        on_fold(&state, &val, &report)?;
        folds.push(report);
    }
    Ok(CvReport {
        variant: cfg.variant,
        config: cfg.clone(),
        folds,
        mean_dice: mean_dice(&all_scores),
        history,
        fallbacks: cases.iter().filter(|c| c.fallback).map(|c| c.case_id.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom_case, PhantomSpec};
    use crate::pipeline::data::prepare_case;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[usize]) -> LesionMask {
        let mut v = vec![false; h * w];
        for &i in on {
            v[i] = true;
        }
        LesionMask::new(h, w, v).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(2, 2, &[0, 1]);
        let b = mask(2, 2, &[1, 2]);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&mask(2, 2, &[]), &mask(2, 2, &[])).unwrap(), 1.0);
        assert_eq!(dice_score(&mask(2, 2, &[]), &a).unwrap(), 0.0);
        assert!(dice_score(&a, &mask(1, 4, &[0])).is_err());
    }

    #[test]
    fn sixty_cases_give_equal_folds() {
        let ids: Vec<String> = (0..60).map(|i| format!("c{i:02}")).collect();
        let f = assign_folds(&ids, 4, 7).unwrap();
        for k in 0..4 {
            assert_eq!(f.iter().filter(|&&x| x == k).count(), 15);
        }
        let mut reversed = ids.clone();
        reversed.reverse();
        let g = assign_folds(&reversed, 4, 7).unwrap();
        for (i, id) in ids.iter().enumerate() {
            let j = reversed.iter().position(|r| r == id).unwrap();
            assert_eq!(f[i], g[j], "assignment must not depend on input order");
        }
        assert!(assign_folds(&ids[..3], 4, 7).is_err());
        assert!(assign_folds(&["a".into(), "a".into()], 2, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition(n in 4usize..80, k in 2usize..6, seed in any::<u64>()) {
            prop_assume!(n >= k);
            let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
            let f = assign_folds(&ids, k, seed).unwrap();
            let sizes: Vec<usize> = (0..k).map(|j| f.iter().filter(|&&x| x == j).count()).collect();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn dice_symmetric_and_bounded(a in proptest::collection::vec(any::<bool>(), 12),
                                      b in proptest::collection::vec(any::<bool>(), 12)) {
            let ma = LesionMask::new(3, 4, a).unwrap();
            let mb = LesionMask::new(3, 4, b).unwrap();
            let d = dice_score(&ma, &mb).unwrap();
            prop_assert_eq!(d, dice_score(&mb, &ma).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }

    fn tiny(n: usize, variant: Variant) -> (Vec<PreparedCase>, TrainConfig) {
        let mut cfg = TrainConfig::desk().with_variant(variant).with_epochs(2);
        cfg.image_size = 16;
        cfg.heatmap.sigma = 2.0;
        cfg.batch_size = 3;
        cfg.folds = 2;
        let spec = PhantomSpec {
            n_cases: n,
            image_size: 16,
            lesion_radius_range: (2.0, 3.0),
            penumbra_width: 1.0,
            ..PhantomSpec::default()
        };
        let cases = (0..n)
            .map(|i| prepare_case(&generate_phantom_case(&spec, i).unwrap(), &cfg).unwrap())
            .collect();
        (cases, cfg)
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (cases, cfg) = tiny(5, Variant::Full);
        let run = || {
            let mut s = PipelineState::new(&cfg, 0).unwrap();
            let h = train_to_end(&mut s, &cases, |_, _| Ok(())).unwrap();
            (s, h)
        };
        let (a, ha) = run();
        let (_, hb) = run();
        assert_eq!(ha, hb);
        assert_eq!(ha.len(), 2);

        let mut s = PipelineState::new(&cfg, 0).unwrap();
        train_epoch(&mut s, &cases).unwrap();
        let mut resumed = PipelineState::from_checkpoint(&s.to_checkpoint().unwrap()).unwrap();
        let tail = train_to_end(&mut resumed, &cases, |_, _| Ok(())).unwrap();
        assert_eq!(tail, ha[1..].to_vec());
        assert_eq!(resumed.to_checkpoint().unwrap(), a.to_checkpoint().unwrap());
    }

    #[test]
    fn cross_validation_covers_every_case_once() {
        let (cases, cfg) = tiny(4, Variant::SegOnly);
        let cfg = cfg.with_epochs(1);
        let report = cross_validate(&cases, &cfg).unwrap();
        let mut seen: Vec<String> = report.folds.iter().flat_map(|f| f.val_ids.clone()).collect();
        seen.sort();
        let mut ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
        ids.sort();
        assert_eq!(seen, ids);
        for f in &report.folds {
            assert!(f.train_ids.iter().all(|t| !f.val_ids.contains(t)));
        }
        assert_eq!(report.history.len(), 2);
        let csv = history_csv(&report.history);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with(HISTORY_CSV_HEADER));
    }
}

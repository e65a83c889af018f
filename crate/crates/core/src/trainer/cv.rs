use alloc::vec::Vec;

use super::{evaluate, train, Dataset, EpochRecord, EvalReport, FoldPlan, OptimizerConfig, TrainOutcome};
use crate::models::{build_model, Model2DSpec, ModelSpec};
use crate::seed::derive_seed;
use crate::volume::{replicate_view, View, ViewTriplet};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub outcome: TrainOutcome,
    pub test: EvalReport,
}

/// Runs every round of `plan`: a fresh model per fold, trained on the
/// training folds, checkpointed on the validation fold, scored on the test
/// fold. Fold `i` initializes from stream `2i` of `seed` and trains with
/// stream `2i + 1`.
pub fn cross_validate(
    spec: &ModelSpec,
    data: &Dataset,
    plan: &FoldPlan,
    cfg: &OptimizerConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(usize, &EpochRecord),
) -> Result<Vec<FoldResult>> {
    if plan.assignments.len() != data.len() {
        return Err(Error::shape("cross-validation", "fold plan does not cover the dataset"));
    }
    if plan.k < 3 {
        return Err(Error::invalid("fold count", "cross-validation needs k >= 3 (test, validation, training)"));
    }
    let mut out = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let split = plan.split(fold);
        let (model, init) = build_model(spec, derive_seed(seed, 2 * fold as u64))?;
        let outcome = train(
            &model,
            init,
            data,
            &split.train,
            &split.val,
            cfg,
            derive_seed(seed, 2 * fold as u64 + 1),
            &mut |r| on_epoch(fold, r),
        )?;
        let test = evaluate(&model, &outcome.best, data, &split.test)?;
        out.push(FoldResult { fold, outcome, test });
    }
    Ok(out)
}

/// Which projections feed the three input slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewSelection {
    /// One view copied into all slots.
    Single(View),
    All,
}

impl ViewSelection {
    pub fn name(self) -> &'static str {
        match self {
            ViewSelection::Single(v) => v.name(),
            ViewSelection::All => "all",
        }
    }
}

fn triplet_dataset(triplets: &[ViewTriplet], labels: &[u8], views: ViewSelection) -> Result<Dataset> {
    let inputs = triplets
        .iter()
        .map(|t| match views {
            ViewSelection::Single(v) => replicate_view(v, t).to_tensor(),
            ViewSelection::All => t.to_tensor(),
        })
        .collect::<Result<_>>()?;
    Dataset::new(inputs, labels.to_vec())
}

/// Cross-validates the view network on three copies of the named view.
pub fn ablate_single_view(
    triplets: &[ViewTriplet],
    labels: &[u8],
    view_name: &str,
    spec: &Model2DSpec,
    plan: &FoldPlan,
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<FoldResult>> {
    let view: View = view_name.parse()?;
    let data = triplet_dataset(triplets, labels, ViewSelection::Single(view))?;
    cross_validate(&ModelSpec::Views(spec.clone()), &data, plan, cfg, seed, &mut |_, _| {})
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub views: ViewSelection,
    /// Test AUC per fold; `None` for a single-class test fold.
    pub fold_aucs: Vec<Option<f64>>,
}

impl AblationRow {
    pub fn mean_auc(&self) -> Option<f64> {
        mean_std(&self.fold_aucs).map(|m| m.0)
    }

    /// Sample standard deviation across folds.
    pub fn std_auc(&self) -> Option<f64> {
        mean_std(&self.fold_aucs).map(|m| m.1)
    }
}

/// Mean and sample standard deviation of the defined values.
pub fn mean_std(values: &[Option<f64>]) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, num_traits::Float::sqrt(var)))
}

/// Frontal, transverse, sagittal and all-view rows, every row on the same
/// folds and seed. `on_fold` sees each finished fold.
pub fn ablation_table(
    triplets: &[ViewTriplet],
    labels: &[u8],
    spec: &Model2DSpec,
    plan: &FoldPlan,
    cfg: &OptimizerConfig,
    seed: u64,
    on_fold: &mut dyn FnMut(ViewSelection, &FoldResult),
) -> Result<Vec<AblationRow>> {
    let selections = View::ALL
        .iter()
        .map(|&v| ViewSelection::Single(v))
        .chain([ViewSelection::All]);
    let mut rows = Vec::with_capacity(4);
    for views in selections {
        let data = triplet_dataset(triplets, labels, views)?;
        let folds = cross_validate(&ModelSpec::Views(spec.clone()), &data, plan, cfg, seed, &mut |_, _| {})?;
        for f in &folds {
            on_fold(views, f);
        }
        rows.push(AblationRow {
            views,
            fold_aucs: folds.iter().map(|f| f.test.auc()).collect(),
        });
    }
    Ok(rows)
}

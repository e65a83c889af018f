//! Experiment directories.
//!
//! Dataset directory (written by `synth`, read by the training commands):
//!
//! ```text
//! manifest.csv          file,label,seed,<phenotype parameters>
//! subject_0000.vmk ...
//! ```
//!
//! Only the `file` and `label` columns are required when reading.
//!
//! Training directory (`train3d`, `train2d`):
//!
//! ```text
//! config.kv             resolved experiment config
//! model.kv              model spec
//! folds.csv             sample,file,label,fold
//! fold_<i>/checkpoint.vnck
//! fold_<i>/history.csv  epoch,train_loss,val_loss
//! fold_<i>/predictions.csv  file,label,score (test fold)
//! report.csv            model,fold,split,n,auc,accuracy,sensitivity,specificity,tp,fp,fn,tn
//! ```
//!
//! `ablate` writes `config.kv`, `folds.csv` and `ablation.csv`
//! (`views,mean_auc,std_auc,fold_0..`). A failed command leaves a `FAILED`
//! file holding the error message in its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use vesselnet_core::metrics::{confusion_masks, roc_auc, RocCurve};
use vesselnet_core::models::{Model2DSpec, Model3DSpec, ModelSpec};
use vesselnet_core::nn::Tensor;
use vesselnet_core::synth::DatasetPlan;
use vesselnet_core::trainer::{
    ablation_table, cross_validate, evaluate, kfold_split, mean_std, AblationRow, Dataset, EvalReport, FoldPlan,
    OptimizerConfig,
};
use vesselnet_core::volume::{downsample_mask, orthographic_project, MaskVolume, Resize, View, ViewTriplet};

use crate::formats::kv::{format_dims, take_spec, Kv, FORMAT_VERSION};
use crate::formats::{checkpoint, kv, num, pgm, read_csv, read_text, vmk, write_atomic, write_csv};
use crate::{Error, Result};

pub const OUTPUT_ROOT_ENV: &str = "VESSELNET_OUTPUT_ROOT";
pub const FAILED_MARKER: &str = "FAILED";
pub const MANIFEST: &str = "manifest.csv";

/// Relative output paths land under `$VESSELNET_OUTPUT_ROOT` when it is set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Runs `f`; on failure leaves `dir/FAILED` with the message, on success
/// removes a stale one.
pub fn guarded<T>(dir: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let marker = dir.join(FAILED_MARKER);
    match f() {
        Ok(v) => {
            if marker.exists() {
                fs::remove_file(&marker).map_err(Error::io(&marker))?;
            }
            Ok(v)
        }
        Err(e) => {
            let _ = write_atomic(&marker, format!("{e}\n").as_bytes());
            Err(e)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub file: String,
    pub label: u8,
}

/// Renders every subject of `plan` into `dir` with its manifest.
pub fn write_synthetic(dir: &Path, plan: &DatasetPlan, log: &mut dyn FnMut(&str)) -> Result<Vec<Entry>> {
    let mut rows = Vec::with_capacity(plan.len());
    let mut entries = Vec::with_capacity(plan.len());
    for i in 0..plan.len() {
        let s = plan.subject(i)?;
        let file = format!("subject_{i:04}.vmk");
        vmk::write(&dir.join(&file), &s.volume)?;
        let p = s.params;
        rows.push(vec![
            file.clone(),
            s.label.to_string(),
            s.seed.to_string(),
            p.cup_depth.to_string(),
            p.cup_radius.to_string(),
            p.trunk_nasal_offset.to_string(),
            p.root_diameter.to_string(),
            p.taper_ratio.to_string(),
            p.branch_depth.to_string(),
            p.branch_angle_spread.to_string(),
            p.noise.to_string(),
        ]);
        entries.push(Entry { file, label: s.label });
        if (i + 1) % 50 == 0 {
            log(&format!("generated {} of {}", i + 1, plan.len()));
        }
    }
    write_csv(
        &dir.join(MANIFEST),
        &[
            "file",
            "label",
            "seed",
            "cup_depth",
            "cup_radius",
            "trunk_nasal_offset",
            "root_diameter",
            "taper_ratio",
            "branch_depth",
            "branch_angle_spread",
            "noise",
        ],
        &rows,
    )?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<Entry>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::format(&path, "dataset manifest not found"));
    }
    read_csv(&path)?
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let field = |k: &str| row.get(k).ok_or_else(|| Error::format(&path, format!("row {}: no {k} column", i + 1)));
            let file = field("file")?.clone();
            let label = match field("label")?.as_str() {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::format(&path, format!("row {}: label {other:?}", i + 1))),
            };
            Ok(Entry { file, label })
        })
        .collect()
}

/// Volume input for the 3D network: max-downsampled, `[1, D, H, W]`.
pub fn volume_input(v: &MaskVolume, dims: [usize; 3]) -> Result<Tensor<f32>> {
    Ok(downsample_mask(v, dims)?.to_tensor())
}

/// Downsample, project, resize (nearest).
pub fn view_triplet(v: &MaskVolume, downsample: [usize; 3], size: [usize; 2]) -> Result<ViewTriplet> {
    let small = downsample_mask(v, downsample)?;
    Ok(orthographic_project(&small).resized(size[0], size[1], Resize::Nearest)?)
}

/// Everything a training or ablation run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub folds: usize,
    pub optimizer: OptimizerConfig,
    /// Volumes are max-downsampled to this size first; for the 3D network
    /// it must equal the model input.
    pub downsample: [usize; 3],
    pub spec: ModelSpec,
}

impl ExperimentConfig {
    pub fn volume() -> Self {
        ExperimentConfig {
            seed: 0,
            folds: 5,
            optimizer: OptimizerConfig::default(),
            downsample: [128, 64, 128],
            spec: ModelSpec::Volume(Model3DSpec::b0()),
        }
    }

    pub fn views() -> Self {
        ExperimentConfig {
            spec: ModelSpec::Views(Model2DSpec::tuned()),
            ..Self::volume()
        }
    }

    /// Applies the keys of a config file on top of `self`.
    pub fn merge_text(mut self, text: &str) -> Result<Self> {
        let mut kv = Kv::parse(text)?;
        kv.take_into("seed", &mut self.seed)?;
        kv.take_into("folds", &mut self.folds)?;
        kv.take_into("learning_rate", &mut self.optimizer.learning_rate)?;
        kv.take_into("momentum", &mut self.optimizer.momentum)?;
        kv.take_into("batch_size", &mut self.optimizer.batch_size)?;
        kv.take_into("epochs", &mut self.optimizer.epochs)?;
        kv.take_dims("downsample", &mut self.downsample)?;
        self.spec = take_spec(&mut kv, self.spec)?;
        kv.finish()?;
        Ok(self)
    }

    pub fn to_text(&self) -> String {
        let o = &self.optimizer;
        format!(
            "format = {FORMAT_VERSION}\nseed = {}\nfolds = {}\nlearning_rate = {}\nmomentum = {}\nbatch_size = {}\nepochs = {}\ndownsample = {}\n{}",
            self.seed,
            self.folds,
            o.learning_rate,
            o.momentum,
            o.batch_size,
            o.epochs,
            format_dims(&self.downsample),
            kv::spec_lines(&self.spec)
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.spec.validate()?;
        if self.folds < 3 {
            return Err(Error::config("folds must be at least 3"));
        }
        if let ModelSpec::Volume(s) = &self.spec {
            if s.input_dims != self.downsample {
                return Err(Error::config(format!(
                    "downsample {} differs from the volume model input {}",
                    format_dims(&self.downsample),
                    format_dims(&s.input_dims)
                )));
            }
        }
        Ok(())
    }
}

struct Loaded {
    entries: Vec<Entry>,
    labels: Vec<u8>,
}

fn load_each(dir: &Path, mut f: impl FnMut(&MaskVolume) -> Result<()>) -> Result<Loaded> {
    let entries = read_manifest(dir)?;
    if entries.is_empty() {
        return Err(Error::format(&dir.join(MANIFEST), "dataset is empty"));
    }
    for e in &entries {
        f(&vmk::read(&dir.join(&e.file))?)?;
    }
    let labels = entries.iter().map(|e| e.label).collect();
    Ok(Loaded { entries, labels })
}

fn load_triplets(dir: &Path, cfg: &ExperimentConfig, size: [usize; 2]) -> Result<(Loaded, Vec<ViewTriplet>)> {
    let mut triplets = Vec::new();
    let loaded = load_each(dir, |v| {
        triplets.push(view_triplet(v, cfg.downsample, size)?);
        Ok(())
    })?;
    Ok((loaded, triplets))
}

/// Model inputs for every sample in the dataset directory.
pub fn load_inputs(dir: &Path, spec: &ModelSpec, downsample: [usize; 3]) -> Result<(Vec<Entry>, Dataset)> {
    let mut inputs = Vec::new();
    let loaded = load_each(dir, |v| {
        inputs.push(match spec {
            ModelSpec::Volume(s) => volume_input(v, s.input_dims)?,
            ModelSpec::Views(s) => view_triplet(v, downsample, s.input)?.to_tensor()?,
        });
        Ok(())
    })?;
    Ok((loaded.entries, Dataset::new(inputs, loaded.labels)?))
}

fn write_folds(out: &Path, entries: &[Entry], plan: &FoldPlan) -> Result<()> {
    let rows: Vec<Vec<String>> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| vec![i.to_string(), e.file.clone(), e.label.to_string(), plan.assignments[i].to_string()])
        .collect();
    write_csv(&out.join("folds.csv"), &["sample", "file", "label", "fold"], &rows)
}

pub const REPORT_HEADER: [&str; 12] = [
    "model",
    "fold",
    "split",
    "n",
    "auc",
    "accuracy",
    "sensitivity",
    "specificity",
    "tp",
    "fp",
    "fn",
    "tn",
];

pub fn report_row(model: &str, fold: &str, split: &str, r: &EvalReport) -> Vec<String> {
    let c = r.counts;
    vec![
        model.into(),
        fold.into(),
        split.into(),
        r.labels.len().to_string(),
        num(r.auc()),
        num(r.metrics.accuracy),
        num(r.metrics.sensitivity),
        num(r.metrics.specificity),
        c.tp.to_string(),
        c.fp.to_string(),
        c.fn_.to_string(),
        c.tn.to_string(),
    ]
}

fn model_name(spec: &ModelSpec) -> &'static str {
    match spec {
        ModelSpec::Volume(_) => "volume",
        ModelSpec::Views(_) => "views",
    }
}

fn predictions_rows(entries: &[Entry], indices: &[usize], r: &EvalReport) -> Vec<Vec<String>> {
    indices
        .iter()
        .zip(&r.scores)
        .map(|(&i, s)| vec![entries[i].file.clone(), entries[i].label.to_string(), s.to_string()])
        .collect()
}

/// Cross-validated training; returns the per-fold test reports.
pub fn run_training(
    data: &Path,
    out: &Path,
    cfg: &ExperimentConfig,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let (entries, dataset) = load_inputs(data, &cfg.spec, cfg.downsample)?;
    log(&format!("loaded {} samples", dataset.len()));
    write_atomic(&out.join("config.kv"), cfg.to_text().as_bytes())?;
    write_atomic(&out.join("model.kv"), kv::spec_to_text(&cfg.spec).as_bytes())?;
    let plan = kfold_split(&dataset.labels, None, cfg.folds, cfg.seed)?;
    write_folds(out, &entries, &plan)?;
    let folds = cross_validate(&cfg.spec, &dataset, &plan, &cfg.optimizer, cfg.seed, &mut |f, r| {
        log(&format!(
            "fold {f} epoch {} train_loss {:.6} val_loss {:.6}",
            r.epoch, r.train_loss, r.val_loss
        ))
    })?;
    let name = model_name(&cfg.spec);
    let (model, _) = vesselnet_core::models::build_model::<f32>(&cfg.spec, 0)?;
    let mut rows = Vec::new();
    let mut tests = Vec::new();
    for f in &folds {
        let dir = out.join(format!("fold_{}", f.fold));
        checkpoint::write(&dir.join("checkpoint.vnck"), &cfg.spec, &f.outcome.best)?;
        let history: Vec<Vec<String>> = f
            .outcome
            .history
            .iter()
            .map(|r| vec![r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string()])
            .collect();
        write_csv(&dir.join("history.csv"), &["epoch", "train_loss", "val_loss"], &history)?;
        let split = plan.split(f.fold);
        write_csv(
            &dir.join("predictions.csv"),
            &["file", "label", "score"],
            &predictions_rows(&entries, &split.test, &f.test),
        )?;
        let val = evaluate(&model, &f.outcome.best, &dataset, &split.val)?;
        rows.push(report_row(name, &f.fold.to_string(), "val", &val));
        rows.push(report_row(name, &f.fold.to_string(), "test", &f.test));
        log(&format!("fold {} test auc {}", f.fold, num(f.test.auc())));
        tests.push(f.test.clone());
    }
    rows.push(mean_row(name, &tests));
    write_csv(&out.join("report.csv"), &REPORT_HEADER, &rows)?;
    Ok(tests)
}

/// Test-fold means of each metric, counts summed.
fn mean_row(model: &str, tests: &[EvalReport]) -> Vec<String> {
    let mean = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
        num(mean_std(&tests.iter().map(f).collect::<Vec<_>>()).map(|m| m.0))
    };
    let sum = |f: &dyn Fn(&EvalReport) -> u64| tests.iter().map(f).sum::<u64>().to_string();
    vec![
        model.into(),
        "mean".into(),
        "test".into(),
        tests.iter().map(|t| t.labels.len()).sum::<usize>().to_string(),
        mean(&|t| t.auc()),
        mean(&|t| t.metrics.accuracy),
        mean(&|t| t.metrics.sensitivity),
        mean(&|t| t.metrics.specificity),
        sum(&|t| t.counts.tp),
        sum(&|t| t.counts.fp),
        sum(&|t| t.counts.fn_),
        sum(&|t| t.counts.tn),
    ]
}

/// Single-view ablation table of the view network.
pub fn run_ablation(
    data: &Path,
    out: &Path,
    cfg: &ExperimentConfig,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let ModelSpec::Views(spec) = &cfg.spec else {
        return Err(Error::config("ablation needs the view model"));
    };
    let (loaded, triplets) = load_triplets(data, cfg, spec.input)?;
    log(&format!("loaded {} samples", triplets.len()));
    write_atomic(&out.join("config.kv"), cfg.to_text().as_bytes())?;
    let plan = kfold_split(&loaded.labels, None, cfg.folds, cfg.seed)?;
    write_folds(out, &loaded.entries, &plan)?;
    let rows = ablation_table(&triplets, &loaded.labels, spec, &plan, &cfg.optimizer, cfg.seed, &mut |v, f| {
        log(&format!("{} fold {} test auc {}", v.name(), f.fold, num(f.test.auc())))
    })?;
    write_atomic(&out.join("ablation.csv"), &ablation_csv(&rows)?)?;
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
    let k = rows.first().map_or(0, |r| r.fold_aucs.len());
    let mut header = vec!["views".to_string(), "mean_auc".into(), "std_auc".into()];
    header.extend((0..k).map(|i| format!("fold_{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.views.name().to_string(), num(r.mean_auc()), num(r.std_auc())];
            v.extend(r.fold_aucs.iter().map(|&a| num(a)));
            v
        })
        .collect();
    crate::formats::csv_bytes(&header, &body)
}

/// Scores every sample of a dataset with one checkpoint.
pub fn run_eval(ckpt: &Path, data: &Path, out: &Path, downsample: [usize; 3]) -> Result<EvalReport> {
    let (model, store) = checkpoint::read(ckpt)?;
    let spec = model.spec();
    let (entries, dataset) = load_inputs(data, &spec, downsample)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let report = evaluate(&model, &store, &dataset, &all)?;
    write_csv(
        &out.join("predictions.csv"),
        &["file", "label", "score"],
        &predictions_rows(&entries, &all, &report),
    )?;
    write_csv(
        &out.join("report.csv"),
        &REPORT_HEADER,
        &[report_row(model_name(&spec), "-", "all", &report)],
    )?;
    Ok(report)
}

/// Pairs of (name, prediction, truth) paths: two files, or two directories
/// matched by `.vmk` file name.
fn mask_pairs(pred: &Path, truth: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if pred.is_dir() != truth.is_dir() {
        return Err(Error::config("prediction and truth must both be files or both be directories"));
    }
    if !pred.is_dir() {
        let name = pred.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        return Ok(vec![(name, pred.to_path_buf(), truth.to_path_buf())]);
    }
    let mut names: Vec<String> = fs::read_dir(pred)
        .map_err(Error::io(pred))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".vmk"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::format(pred, "no .vmk files"));
    }
    names
        .into_iter()
        .map(|n| {
            let t = truth.join(&n);
            if !t.exists() {
                return Err(Error::format(&t, "no matching truth mask"));
            }
            Ok((n.clone(), pred.join(&n), t))
        })
        .collect()
}

/// Dice and Jaccard per mask pair.
pub fn run_segeval(pred: &Path, truth: &Path, out: &Path) -> Result<Vec<(String, f64, f64)>> {
    let mut rows = Vec::new();
    let mut scores = Vec::new();
    for (name, p, t) in mask_pairs(pred, truth)? {
        let c = confusion_masks(&vmk::read(&p)?, &vmk::read(&t)?)?;
        rows.push(vec![
            name.clone(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.tn.to_string(),
            c.dice().to_string(),
            c.jaccard().to_string(),
        ]);
        scores.push((name, c.dice(), c.jaccard()));
    }
    write_csv(out, &["file", "tp", "fp", "fn", "tn", "dice", "jaccard"], &rows)?;
    Ok(scores)
}

/// Writes `<stem>_<view>.pgm` for each volume; returns the number of volumes.
pub fn run_project(
    input: &Path,
    out: &Path,
    downsample: Option<[usize; 3]>,
    size: Option<[usize; 2]>,
) -> Result<usize> {
    let files: Vec<PathBuf> = if input.is_dir() {
        read_manifest(input)?.into_iter().map(|e| input.join(e.file)).collect()
    } else {
        vec![input.to_path_buf()]
    };
    for f in &files {
        let mut v = vmk::read(f)?;
        if let Some(d) = downsample {
            v = downsample_mask(&v, d)?;
        }
        let mut t = orthographic_project(&v);
        if let Some([r, c]) = size {
            t = t.resized(r, c, Resize::Nearest)?;
        }
        let stem = f.file_stem().map_or_else(|| "volume".into(), |s| s.to_string_lossy().into_owned());
        for view in View::ALL {
            pgm::write(&out.join(format!("{stem}_{}.pgm", view.name())), t.get(view))?;
        }
    }
    Ok(files.len())
}

/// ROC plot and points from a predictions CSV (`label`, `score` columns).
pub fn run_roc_plot(predictions: &Path, out: &Path) -> Result<RocCurve> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, row) in read_csv(predictions)?.into_iter().enumerate() {
        let get = |k: &str| {
            row.get(k)
                .ok_or_else(|| Error::format(predictions, format!("row {}: no {k} column", i + 1)))
        };
        let label: u8 = get("label")?
            .parse()
            .map_err(|_| Error::format(predictions, format!("row {}: bad label", i + 1)))?;
        let score: f64 = get("score")?
            .parse()
            .map_err(|_| Error::format(predictions, format!("row {}: bad score", i + 1)))?;
        labels.push(label);
        scores.push(score);
    }
    let roc = roc_auc(&scores, &labels)?;
    let title = predictions.file_stem().map_or_else(|| "ROC".into(), |s| s.to_string_lossy().into_owned());
    write_atomic(out, crate::formats::svg::roc_svg(&roc, &title).as_bytes())?;
    let points: Vec<Vec<String>> = roc.points.iter().map(|(x, y)| vec![x.to_string(), y.to_string()]).collect();
    write_csv(&out.with_extension("csv"), &["fpr", "tpr"], &points)?;
    Ok(roc)
}

/// Reads an experiment config file over `base`.
pub fn load_config(path: Option<&Path>, base: ExperimentConfig) -> Result<ExperimentConfig> {
    match path {
        Some(p) => base.merge_text(&read_text(p)?),
        None => Ok(base),
    }
}

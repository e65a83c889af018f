//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! fails. The synthetic study runs twice (the second run checks
//! determinism), so expect a few minutes in release mode and much longer in
//! debug.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vesselnet::experiment::{run_ablation, write_synthetic, ExperimentConfig};
use vesselnet::formats::{checkpoint, vmk};
use vesselnet_core::metrics::{roc_auc, ConfusionCounts, Ratio};
use vesselnet_core::models::{build_model, Model, Model2DSpec, Model3DSpec, ModelSpec};
use vesselnet_core::nn::{gradcheck, ParamStore, Tape, Tensor};
use vesselnet_core::synth::DatasetPlan;
use vesselnet_core::trainer::{train_step, AblationRow, OptimizerConfig, Sgd, ViewSelection};
use vesselnet_core::volume::{orthographic_project, MaskVolume, View};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn metric_oracles() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let scale = 10u64.pow(rng.gen_range(0..7));
        let c = ConfusionCounts {
            tp: rng.gen_range(0..=scale),
            fp: rng.gen_range(0..=scale),
            fn_: rng.gen_range(0..=scale),
            tn: rng.gen_range(0..=scale),
        };
        let j = c.jaccard_ratio();
        let from_j = Ratio {
            num: 2 * j.num,
            den: j.den + j.num,
        };
        ensure(c.dice_ratio().same_as(from_j), || format!("identity broken for {c:?}"))?;
    }
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..=500);
        let grid = rng.gen_range(2..50) as f64;
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * grid).floor() / grid).collect();
        let auc = roc_auc(&scores, &labels).map_err(|e| e.to_string())?.auc;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (sp, _) in scores.iter().zip(&labels).filter(|p| *p.1 == 1) {
            for (sn, _) in scores.iter().zip(&labels).filter(|p| *p.1 == 0) {
                pairs += 1.0;
                wins += if sp > sn {
                    1.0
                } else if sp == sn {
                    0.5
                } else {
                    0.0
                };
            }
        }
        worst = worst.max((auc - wins / pairs).abs());
    }
    ensure(worst <= 1e-12, || format!("AUC off the pairwise oracle by {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("1000 identities exact, max AUC gap {worst:.1e}"))
}

fn gradients() -> Check {
    let start = Instant::now();
    let checks = gradcheck::check_all(5, 2024).map_err(|e| e.to_string())?;
    ensure(checks.len() == gradcheck::OPS.len(), || "an op was skipped".into())?;
    let mut worst = ("", 0.0f64);
    for c in &checks {
        ensure(c.cases >= 5, || format!("{} has {} shapes", c.op, c.cases))?;
        ensure(c.max_rel_err <= 1e-5, || format!("{} relative error {:.2e}", c.op, c.max_rel_err))?;
        if c.max_rel_err > worst.1 {
            worst = (c.op, c.max_rel_err);
        }
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("{} ops, worst {} at {:.1e}", checks.len(), worst.0, worst.1))
}

fn projections() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..1000 {
        let density = rng.gen_range(0.0..0.2);
        let voxels = (0..512).map(|_| u8::from(rng.gen_bool(density))).collect();
        let v = MaskVolume::from_voxels([8, 8, 8], voxels).map_err(|e| e.to_string())?;
        let t = orthographic_project(&v);
        for view in View::ALL {
            let img = t.get(view);
            for r in 0..8 {
                for c in 0..8 {
                    let any = (0..8).any(|k| match view {
                        View::Frontal => v.get(k, r, c),
                        View::Transverse => v.get(r, k, c),
                        View::Sagittal => v.get(r, c, k),
                    });
                    ensure(img.get(r, c) == f32::from(u8::from(any)), || {
                        format!("volume {trial}, {} pixel ({r},{c})", view.name())
                    })?;
                }
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok("1000 volumes match the OR oracle".into())
}

fn logits(model: &Model, store: &ParamStore<f32>, x: Tensor<f32>) -> Result<Tensor<f32>, String> {
    let mut tape = Tape::eval();
    let x = tape.input(x);
    let y = model.forward(&mut tape, store, x).map_err(|e| e.to_string())?;
    Ok(tape.value(y).clone())
}

fn shapes() -> Check {
    let cases = [
        ("3D full", ModelSpec::Volume(Model3DSpec::b0())),
        ("2D full", ModelSpec::Views(Model2DSpec::tuned())),
        ("3D reduced", ModelSpec::Volume(Model3DSpec::reduced())),
        ("2D reduced", ModelSpec::Views(Model2DSpec::new(1, 1, 1).with_input(16, 32))),
    ];
    let mut seen = Vec::new();
    for (name, spec) in cases {
        let (model, store) = build_model::<f32>(&spec, 0).map_err(|e| e.to_string())?;
        let mut shape = vec![1];
        shape.extend(spec.sample_shape());
        let y = logits(&model, &store, Tensor::full(&shape, 0.25))?;
        ensure(y.shape() == [1, 2] && y.is_finite(), || format!("{name}: {:?} -> {:?}", shape, y.shape()))?;
        seen.push(format!("{name} {shape:?}"));
    }
    Ok(format!("-> [1, 2] for {}", seen.join(", ")))
}

/// Steps until the train-mode loss on one fixed batch drops below 0.01.
fn steps_to_fit(spec: ModelSpec, lr: f64) -> Result<Option<usize>, String> {
    let (model, mut store) = build_model::<f32>(&spec, 11).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut shape = vec![8];
    shape.extend(spec.sample_shape());
    let n: usize = shape.iter().product();
    let x = Tensor::from_vec(&shape, (0..n).map(|_| f32::from(rng.gen_bool(0.1))).collect())
        .map_err(|e| e.to_string())?;
    let labels = [0, 1, 0, 1, 1, 0, 0, 1];
    let cfg = OptimizerConfig {
        learning_rate: lr,
        ..Default::default()
    };
    let mut sgd = Sgd::new(&store);
    for step in 0..300 {
        let loss = train_step(&model, &mut store, &mut sgd, x.clone(), &labels, &cfg, step as u64)
            .map_err(|e| e.to_string())?;
        if loss < 0.01 {
            return Ok(Some(step + 1));
        }
    }
    Ok(None)
}

fn overfit() -> Check {
    let start = Instant::now();
    let volume = steps_to_fit(ModelSpec::Volume(Model3DSpec::reduced()), 0.05)?;
    let views = steps_to_fit(ModelSpec::Views(Model2DSpec::new(1, 1, 1).with_input(16, 32)), 0.01)?;
    ensure(volume.is_some(), || "3D model above 0.01 after 300 steps".into())?;
    ensure(views.is_some(), || "2D model above 0.01 after 300 steps".into())?;
    within(start.elapsed(), Duration::from_secs(600))?;
    Ok(format!("3D in {} steps, 2D in {} steps", volume.unwrap(), views.unwrap()))
}

const STUDY_SEED: u64 = 7;

fn study_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::views();
    cfg.seed = STUDY_SEED;
    cfg.folds = 5;
    cfg.downsample = [64, 32, 64];
    cfg.optimizer.learning_rate = 0.002;
    cfg.optimizer.epochs = 40;
    cfg.spec = ModelSpec::Views(Model2DSpec::new(1, 1, 1).with_input(16, 32));
    cfg
}

fn run_study(data: &Path, out: &Path) -> Result<Vec<AblationRow>, String> {
    run_ablation(data, out, &study_config(), &mut |_| {}).map_err(|e| e.to_string())
}

fn synthetic_study(data: &Path, out: &Path) -> Check {
    let start = Instant::now();
    let plan = DatasetPlan::new(100, 1.0, STUDY_SEED, [128, 64, 128]).map_err(|e| e.to_string())?;
    write_synthetic(data, &plan, &mut |_| {}).map_err(|e| e.to_string())?;
    let rows = run_study(data, out)?;
    let all = rows
        .iter()
        .find(|r| r.views == ViewSelection::All)
        .and_then(AblationRow::mean_auc)
        .ok_or("no all-views AUC")?;
    let best_single = rows
        .iter()
        .filter(|r| r.views != ViewSelection::All)
        .filter_map(|r| r.mean_auc().map(|a| (r.views.name(), a)))
        .fold(("", f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b });
    let summary = format!("all views {all:.4}, best single {} {:.4}", best_single.0, best_single.1);
    ensure(all >= 0.95, || format!("{summary}: mean AUC below 0.95"))?;
    ensure(all >= best_single.1 - 0.02, || format!("{summary}: all views trail the best single view"))?;
    within(start.elapsed(), Duration::from_secs(3600))?;
    Ok(summary)
}

fn worked_example() -> Check {
    let m = ConfusionCounts {
        tp: 178,
        fp: 18,
        fn_: 42,
        tn: 110,
    }
    .classification();
    let expected = [
        ("accuracy", m.accuracy, 288.0 / 348.0),
        ("sensitivity", m.sensitivity, 178.0 / 220.0),
        ("specificity", m.specificity, 110.0 / 128.0),
    ];
    let mut shown = Vec::new();
    for (name, got, want) in expected {
        let got = got.ok_or(format!("{name} undefined"))?;
        ensure(format!("{got:.3}") == format!("{want:.3}"), || format!("{name} {got} vs {want}"))?;
        shown.push(format!("{name} {got:.3}"));
    }
    Ok(shown.join(", "))
}

fn csv_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
            Ok((p.file_name().unwrap().to_string_lossy().into_owned(), bytes))
        })
        .collect()
}

fn determinism(data: &Path, first: &Path, second: &Path) -> Check {
    run_study(data, second)?;
    let a = csv_files(first)?;
    let b = csv_files(second)?;
    ensure(!a.is_empty(), || "first run wrote no CSV".into())?;
    let names: Vec<&str> = a.iter().map(|f| f.0.as_str()).collect();
    ensure(a == b, || format!("metric CSVs differ among {names:?}"))?;
    Ok(format!("{} identical", names.join(", ")))
}

fn round_trips(dir: &Path) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..100 {
        let dims = [rng.gen_range(1..=12), rng.gen_range(1..=12), rng.gen_range(1..=12)];
        let density = rng.gen::<f64>();
        let voxels = (0..dims.iter().product()).map(|_| u8::from(rng.gen_bool(density))).collect();
        let v = MaskVolume::from_voxels(dims, voxels).map_err(|e| e.to_string())?;
        let path = dir.join(format!("v{i}.vmk"));
        vmk::write(&path, &v).map_err(|e| e.to_string())?;
        let back = vmk::read(&path).map_err(|e| e.to_string())?;
        ensure(back == v, || format!("volume {i} {dims:?} changed"))?;
    }
    let specs = [
        ModelSpec::Volume(Model3DSpec::reduced()),
        ModelSpec::Views(Model2DSpec::new(2, 2, 2).with_input(12, 20)),
    ];
    for spec in specs {
        let (model, mut store) = build_model::<f32>(&spec, 4).map_err(|e| e.to_string())?;
        let mut shape = vec![4];
        shape.extend(spec.sample_shape());
        let n = shape.iter().product();
        let x = Tensor::from_vec(&shape, (0..n).map(|_| f32::from(rng.gen_bool(0.2))).collect())
            .map_err(|e| e.to_string())?;
        let mut sgd = Sgd::new(&store);
        let cfg = OptimizerConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        for step in 0..3 {
            train_step(&model, &mut store, &mut sgd, x.clone(), &[0, 1, 1, 0], &cfg, step)
                .map_err(|e| e.to_string())?;
        }
        let path = dir.join("model.vnck");
        checkpoint::write(&path, &spec, &store).map_err(|e| e.to_string())?;
        let (loaded, loaded_store) = checkpoint::read(&path).map_err(|e| e.to_string())?;
        let before = logits(&model, &store, x.clone())?;
        let after = logits(&loaded, &loaded_store, x)?;
        let same = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("{spec:?} logits changed after reload"))?;
    }
    Ok("100 volumes bit-identical, checkpoint logits identical for both models".into())
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temp dir");
    let data = work.path().join("synthetic");
    let first = work.path().join("study_a");
    let second = work.path().join("study_b");
    let formats = work.path().join("formats");

    let criteria: Vec<(&str, Box<dyn FnOnce() -> Check>)> = vec![
        ("metric oracle equivalence", Box::new(metric_oracles)),
        ("gradient suite", Box::new(gradients)),
        ("projection correctness", Box::new(projections)),
        ("shape contracts", Box::new(shapes)),
        ("overfit convergence", Box::new(overfit)),
        ("synthetic end-to-end study", Box::new(|| synthetic_study(&data, &first))),
        ("classification worked example", Box::new(worked_example)),
        ("determinism", Box::new(|| determinism(&data, &first, &second))),
        ("format round trips", Box::new(|| round_trips(&formats))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("[PASS] {} {name} ({secs:.1} s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {} {name} ({secs:.1} s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Command line. Flags override the config file, which overrides defaults.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use vesselnet_core::models::{Model2DSpec, Model3DSpec, ModelSpec};
use vesselnet_core::synth::{DatasetPlan, DEFAULT_CANVAS};

use crate::experiment::{self, guarded, load_config, resolve_output, ExperimentConfig};
use crate::formats::kv::parse_dims;
use crate::formats::num;
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "vesselnet", version, about = "Vessel-mask classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic two-class dataset of vessel masks.
    Synth(SynthArgs),
    /// Write the three orthographic projections of masks as PGM images.
    Project(ProjectArgs),
    /// Cross-validate the 3D volume network.
    Train3d(Train3dArgs),
    /// Cross-validate the three-view 2D network.
    Train2d(ViewArgs),
    /// Single-view ablation of the 2D network.
    Ablate(ViewArgs),
    /// Score a dataset with a saved checkpoint.
    Eval(EvalArgs),
    /// Dice and Jaccard of predicted masks against references.
    Segeval(SegevalArgs),
    /// ROC curve from a predictions CSV.
    RocPlot(RocPlotArgs),
}

fn dims3(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_dims(s)
}

fn dims2(s: &str) -> std::result::Result<[usize; 2], String> {
    parse_dims(s)
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n_per_class: usize,
    /// 0 makes the classes identical, 1 uses the full regime gap.
    #[arg(long, default_value_t = 1.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// DxHxW
    #[arg(long, value_parser = dims3)]
    pub canvas: Option<[usize; 3]>,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    /// A .vmk file or a dataset directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = dims3)]
    pub downsample: Option<[usize; 3]>,
    /// RxC, nearest-neighbour.
    #[arg(long, value_parser = dims2)]
    pub size: Option<[usize; 2]>,
}

#[derive(Args, Debug)]
pub struct Common {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, short)]
    pub quiet: bool,
}

impl Common {
    fn apply(&self, mut cfg: ExperimentConfig) -> ExperimentConfig {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.folds {
            cfg.folds = v;
        }
        let o = &mut cfg.optimizer;
        if let Some(v) = self.epochs {
            o.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            o.learning_rate = v;
        }
        if let Some(v) = self.momentum {
            o.momentum = v;
        }
        if let Some(v) = self.batch_size {
            o.batch_size = v;
        }
        cfg
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    B0,
    Reduced,
}

#[derive(Args, Debug)]
pub struct Train3dArgs {
    #[command(flatten)]
    pub common: Common,
    /// Starting architecture; the config file may override any field.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Model input DxHxW; volumes are downsampled to it.
    #[arg(long, value_parser = dims3)]
    pub input: Option<[usize; 3]>,
}

#[derive(Args, Debug)]
pub struct ViewArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    /// Projection size RxC fed to the network.
    #[arg(long, value_parser = dims2)]
    pub view_size: Option<[usize; 2]>,
    /// Volumes are max-downsampled to DxHxW before projection.
    #[arg(long, value_parser = dims3)]
    pub downsample: Option<[usize; 3]>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Downsampling before projection, for view checkpoints.
    #[arg(long, value_parser = dims3, default_value = "128x64x128")]
    pub downsample: [usize; 3],
}

#[derive(Args, Debug)]
pub struct SegevalArgs {
    /// Predicted mask, or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference mask, or a directory with the same file names.
    #[arg(long)]
    pub truth: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RocPlotArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Output SVG; the points go next to it as CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn logger(quiet: bool) -> impl FnMut(&str) {
    move |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    }
}

pub fn train3d_config(a: &Train3dArgs) -> Result<ExperimentConfig> {
    let mut base = ExperimentConfig::volume();
    if a.preset == Some(Preset::Reduced) {
        base.spec = ModelSpec::Volume(Model3DSpec::reduced());
    }
    let mut cfg = load_config(a.common.config.as_deref(), base)?;
    if let Some(p) = a.preset {
        let spec = match p {
            Preset::B0 => Model3DSpec::b0(),
            Preset::Reduced => Model3DSpec::reduced(),
        };
        cfg.spec = ModelSpec::Volume(spec);
    }
    let mut cfg = a.common.apply(cfg);
    if let ModelSpec::Volume(s) = &mut cfg.spec {
        if let Some(d) = a.input {
            s.input_dims = d;
        }
        if a.input.is_some() || a.preset.is_some() || a.common.config.is_none() {
            cfg.downsample = s.input_dims;
        }
    } else {
        return Err(Error::config("train3d needs model = volume"));
    }
    Ok(cfg)
}

pub fn view_config(a: &ViewArgs) -> Result<ExperimentConfig> {
    let mut cfg = a.common.apply(load_config(a.common.config.as_deref(), ExperimentConfig::views())?);
    let ModelSpec::Views(s) = &cfg.spec else {
        return Err(Error::config("needs model = views"));
    };
    let mut s = s.clone();
    if a.m.is_some() || a.n.is_some() || a.p.is_some() {
        let fresh = Model2DSpec::new(a.m.unwrap_or(s.m), a.n.unwrap_or(s.n), a.p.unwrap_or(s.p));
        s = Model2DSpec { input: s.input, ..fresh };
    }
    if let Some([r, c]) = a.view_size {
        s = s.with_input(r, c);
    }
    cfg.spec = ModelSpec::Views(s);
    if let Some(d) = a.downsample {
        cfg.downsample = d;
    }
    Ok(cfg)
}

/// Makes the output directory and runs `f` under the failure marker.
fn in_out_dir<T>(out: &Path, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let dir = resolve_output(out);
    std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    guarded(&dir, || f(&dir))
}

pub fn run<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::config(e.to_string().trim_end().to_string())),
    };
    execute(cli.command)
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => in_out_dir(&a.out, |dir| {
            let plan = DatasetPlan::new(a.n_per_class, a.separation, a.seed, a.canvas.unwrap_or(DEFAULT_CANVAS))?;
            let entries = experiment::write_synthetic(dir, &plan, &mut logger(false))?;
            println!("{} subjects written to {}", entries.len(), dir.display());
            Ok(())
        }),
        Command::Project(a) => in_out_dir(&a.out, |dir| {
            let n = experiment::run_project(&a.input, dir, a.downsample, a.size)?;
            println!("{n} volumes projected into {}", dir.display());
            Ok(())
        }),
        Command::Train3d(a) => {
            let cfg = train3d_config(&a)?;
            train(&a.common, &cfg)
        }
        Command::Train2d(a) => {
            let cfg = view_config(&a)?;
            train(&a.common, &cfg)
        }
        Command::Ablate(a) => {
            let cfg = view_config(&a)?;
            in_out_dir(&a.common.out, |dir| {
                let rows = experiment::run_ablation(&a.common.data, dir, &cfg, &mut logger(a.common.quiet))?;
                for r in rows {
                    println!("{:<10} mean_auc {} std_auc {}", r.views.name(), num(r.mean_auc()), num(r.std_auc()));
                }
                Ok(())
            })
        }
        Command::Eval(a) => in_out_dir(&a.out, |dir| {
            let r = experiment::run_eval(&a.checkpoint, &a.data, dir, a.downsample)?;
            println!(
                "n {} auc {} accuracy {} sensitivity {} specificity {}",
                r.labels.len(),
                num(r.auc()),
                num(r.metrics.accuracy),
                num(r.metrics.sensitivity),
                num(r.metrics.specificity)
            );
            Ok(())
        }),
        Command::Segeval(a) => {
            let out = resolve_output(&a.out);
            let scores = experiment::run_segeval(&a.pred, &a.truth, &out)?;
            for (name, dice, jaccard) in scores {
                println!("{name} dice {dice} jaccard {jaccard}");
            }
            Ok(())
        }
        Command::RocPlot(a) => {
            let out = resolve_output(&a.out);
            let roc = experiment::run_roc_plot(&a.predictions, &out)?;
            println!("auc {}", roc.auc);
            Ok(())
        }
    }
}

fn train(common: &Common, cfg: &ExperimentConfig) -> Result<()> {
    in_out_dir(&common.out, |dir| {
        let tests = experiment::run_training(&common.data, dir, cfg, &mut logger(common.quiet))?;
        let aucs: Vec<Option<f64>> = tests.iter().map(|t| t.auc()).collect();
        let summary = vesselnet_core::trainer::mean_std(&aucs);
        println!(
            "test auc mean {} std {}",
            num(summary.map(|s| s.0)),
            num(summary.map(|s| s.1))
        );
        Ok(())
    })
}

//! `occ`: data generation, training, evaluation and reporting for the
//! occupancy distillation experiments.

mod store;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diffkit::io::{load_checkpoint, save_checkpoint};
use occ_core::evalkit::{confusion, MetricsReport};
use occ_core::occnets::{Student, Teacher};
use occ_core::par::default_exec;
use occ_core::scenegen::{derive_seed, SemGrid};
use occ_core::trainer::{
    apply_override, efficiency_table, evaluate_student, evaluate_teacher, generate_dataset, labeled_scenes,
    run_label_efficiency, runs_csv, series_csv, table_csv, train_student, train_teacher, ExperimentConfig, RunReport,
};
use occ_core::{Error, Result};

use store::*;

#[derive(Parser)]
#[command(name = "occ", version, about = "Camera-only occupancy prediction with fusion-teacher distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seed for label selection and model initialisation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// `dot.path=value` edits applied to the configuration before use.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for data-parallel kernels (0: all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Teacher,
    Student,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the training and validation scenes.
    GenData(Common),
    /// Train the camera+LiDAR teacher on the labeled scenes.
    TrainTeacher(Train),
    /// Train the camera-only student on the labeled scenes alone.
    TrainStudent(Train),
    /// Train the camera-only student with a frozen teacher.
    Distill {
        #[command(flatten)]
        train: Train,
        /// Teacher checkpoint.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Evaluate grid pairs or a trained checkpoint.
    Eval {
        /// Predicted grid (file or directory of `.ogrd` files).
        #[arg(long, requires = "gt", conflicts_with = "checkpoint")]
        pred: Option<PathBuf>,
        /// Ground-truth grid(s); the visibility mask selects evaluated voxels.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, requires_all = ["model", "data", "config"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: Option<Model>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate run reports into the label-efficiency table and plot series.
    Report {
        /// Directory searched recursively for run report JSON files.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate data and run the full label-efficiency grid.
    Experiment(Common),
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = read_text(path).map_err(|_| Error::Config(format!("cannot read config {}", path.display())))?;
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn set_threads(n: usize) -> Result<()> {
    #[cfg(feature = "parallel")]
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(e.to_string()))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn labeled(cfg: &ExperimentConfig, n: usize, seed: u64) -> Result<Vec<bool>> {
    labeled_scenes(n, cfg.label_fraction, derive_seed(seed, 7))
}

fn finish_run(out: &Path, name: &str, params: &diffkit::ParamSet, report: &RunReport) -> Result<()> {
    create_dir(out)?;
    save_checkpoint(out.join(format!("{name}.ckpt")), params)?;
    save_report(&out.join(format!("{name}.json")), report)?;
    println!("{name}: mIoU {:.4} over {} labeled scenes", report.miou, report.labeled_scenes);
    Ok(())
}

fn grid_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ogrd"))
        .collect();
    files.sort();
    Ok(files)
}

fn eval_grids(pred: &Path, gt: &Path) -> Result<MetricsReport> {
    let (pf, gf) = (grid_files(pred)?, grid_files(gt)?);
    if pf.len() != gf.len() || gf.is_empty() {
        return Err(Error::Input(format!("{} predicted vs {} ground-truth grids", pf.len(), gf.len())));
    }
    let mut total = None;
    for (p, g) in pf.iter().zip(&gf) {
        let (p, g) = (SemGrid::load(p)?, SemGrid::load(g)?);
        let cm = confusion(&p, &g, &g.visibility)?;
        match &mut total {
            None => total = Some(cm),
            Some(t) => t.merge(&cm)?,
        }
    }
    MetricsReport::from_confusion(total.expect("at least one pair"))
}

fn write_metrics(out: &Path, m: &MetricsReport) -> Result<()> {
    create_dir(out)?;
    write_text(&out.join("metrics.csv"), &m.to_csv())?;
    write_text(&out.join("metrics.json"), &serde_json::to_string_pretty(m)?)?;
    println!("mIoU {:.6}", m.miou);
    Ok(())
}

fn write_tables(out: &Path, mut reports: Vec<RunReport>) -> Result<()> {
    reports.sort_by(|a, b| {
        a.fraction.total_cmp(&b.fraction).then(a.seed.cmp(&b.seed)).then(a.model.name().cmp(b.model.name()))
    });
    let rows = efficiency_table(&reports)?;
    create_dir(out)?;
    write_text(&out.join("table.csv"), &table_csv(&rows))?;
    write_text(&out.join("series.csv"), &series_csv(&rows))?;
    write_text(&out.join("runs.csv"), &runs_csv(&reports))?;
    print!("{}", table_csv(&rows));
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => {
            let mut cfg = load_config(&c.config, &c.overrides)?;
            set_threads(c.threads)?;
            cfg.data.seed = c.seed;
            let data = generate_dataset(default_exec(), &cfg.data, &cfg.teacher.grid)?;
            create_dir(&c.out)?;
            save_dataset(&c.out, &data, &cfg.hash()?)?;
            println!("{} train and {} val scenes in {}", data.train.len(), data.val.len(), c.out.display());
        }
        Command::TrainTeacher(t) => {
            let cfg = load_config(&t.common.config, &t.common.overrides)?;
            set_threads(t.common.threads)?;
            let data = load_dataset(&t.data)?;
            let lab = labeled(&cfg, data.train.len(), t.common.seed)?;
            let (model, rep) = train_teacher(&data, &cfg, &lab, t.common.seed)?;
            finish_run(&t.common.out, "teacher", &model.params, &rep)?;
        }
        Command::TrainStudent(t) => {
            let cfg = load_config(&t.common.config, &t.common.overrides)?;
            set_threads(t.common.threads)?;
            let data = load_dataset(&t.data)?;
            let lab = labeled(&cfg, data.train.len(), t.common.seed)?;
            let (model, rep) = train_student(&data, &cfg, &lab, t.common.seed, None)?;
            finish_run(&t.common.out, "scratch", &model.params, &rep)?;
        }
        Command::Distill { train: t, teacher } => {
            let cfg = load_config(&t.common.config, &t.common.overrides)?;
            set_threads(t.common.threads)?;
            let teacher = Teacher::from_params(cfg.teacher.clone(), load_checkpoint(&teacher)?)?;
            let data = load_dataset(&t.data)?;
            let lab = labeled(&cfg, data.train.len(), t.common.seed)?;
            let (model, rep) = train_student(&data, &cfg, &lab, t.common.seed, Some(&teacher))?;
            finish_run(&t.common.out, "distilled", &model.params, &rep)?;
        }
        Command::Eval { pred, gt, checkpoint, model, data, config, overrides, out } => {
            let metrics = match (pred, gt, checkpoint) {
                (Some(p), Some(g), None) => eval_grids(&p, &g)?,
                (None, None, Some(ck)) => {
                    let (model, data, config) = (model.expect("clap"), data.expect("clap"), config.expect("clap"));
                    let cfg = load_config(&config, &overrides)?;
                    let params = load_checkpoint(&ck)?;
                    let data = load_dataset(&data)?;
                    let cams = &cfg.data.rig.cameras;
                    match model {
                        Model::Teacher => {
                            evaluate_teacher(&data, &Teacher::from_params(cfg.teacher, params)?, cams, default_exec())?
                        }
                        Model::Student => {
                            evaluate_student(&data, &Student::from_params(cfg.student, params)?, cams, default_exec())?
                        }
                    }
                }
                _ => return Err(Error::Config("eval needs --pred and --gt, or --checkpoint".into())),
            };
            write_metrics(&out, &metrics)?;
        }
        Command::Report { runs, out } => write_tables(&out, load_reports(&runs)?)?,
        Command::Experiment(c) => {
            let mut cfg = load_config(&c.config, &c.overrides)?;
            set_threads(c.threads)?;
            cfg.data.seed = c.seed;
            let data = generate_dataset(default_exec(), &cfg.data, &cfg.teacher.grid)?;
            let reports = run_label_efficiency(&data, &cfg)?;
            let runs = c.out.join("runs");
            create_dir(&runs)?;
            for r in &reports {
                save_report(&runs.join(format!("{}_f{:.3}_s{}.json", r.model.name(), r.fraction, r.seed)), r)?;
            }
            write_tables(&c.out, reports)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

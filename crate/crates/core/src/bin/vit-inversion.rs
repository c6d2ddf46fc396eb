use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use vit_inversion::config::RunConfig;
use vit_inversion::cost::{CostParams, CostReport, MeasuredCost};
use vit_inversion::error::{Error, Result};
use vit_inversion::format::{load_checkpoint, load_sparse_image, save_checkpoint, save_ppm, save_sparse_image, Checkpoint};
use vit_inversion::harness::{
    confidence_stats, distill, gen_toy_dataset, one_class_experiment, selection_study, synthesize, ExperimentConfig,
    Split, ToyDataset,
};
use vit_inversion::inversion::{invert, InversionConfig, Method, SparseImage};
use vit_inversion::report::{confusion_csv, histogram_csv, save_text, to_csv, AccuracyRow, NamedConfidence, Report};
use vit_inversion::vit::{accuracy, train_teacher, Patch, ViTModel};

#[derive(Parser)]
#[command(name = "vit-inversion", version, about = "Model inversion for small Vision Transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file (key = value lines, optional [section] headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed of the command.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 1 is fully deterministic.
    #[arg(long)]
    threads: Option<usize>,
    /// Override a configuration key, e.g. `--set inversion.v=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write wall-clock time to timing.json.
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Clone)]
struct TeacherArg {
    /// Teacher checkpoint; trained from the configuration when absent.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher on the procedural shape dataset.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Invert the teacher with the configured method.
    Invert {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        teacher: TeacherArg,
        /// Target class.
        #[arg(long, default_value_t = 0)]
        label: usize,
        /// Independent trajectories, seeds `seed..seed+jobs`.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Analytic cost report, optionally with instrumented counts.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Also run instrumented inversions and report measured units.
        #[arg(long)]
        measure: bool,
    },
    /// Distil fresh students from each method's images.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        teacher: TeacherArg,
    },
    /// Distil from images of a single class and report confusion matrices.
    OneClass {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        teacher: TeacherArg,
        /// Target class (defaults to experiment.target).
        #[arg(long)]
        target: Option<usize>,
    },
    /// Compare fixed patch-selection criteria by student accuracy.
    SelectionStudy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        teacher: TeacherArg,
    },
    /// Teacher-confidence statistics of saved sparse images.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        teacher: TeacherArg,
        /// Directory of .pri files.
        #[arg(long)]
        input: PathBuf,
    },
    /// Render sparse images as portable pixmaps.
    Dump {
        #[command(flatten)]
        common: Common,
        /// A .pri file or a directory of them.
        #[arg(long)]
        input: PathBuf,
    },
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

fn setup(common: &Common) -> Result<Ctx> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    if let Some(out) = &common.out {
        cfg.out = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    let out = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    Ok(Ctx { cfg, out })
}

fn finish(ctx: &Ctx, report: &Report) -> Result<PathBuf> {
    save_text(ctx.out.join("effective.cfg"), &ctx.cfg.to_text())?;
    report.save(ctx.out.join("report.json"))?;
    Ok(ctx.out.clone())
}

fn dataset(cfg: &RunConfig) -> Result<ToyDataset> {
    gen_toy_dataset(&cfg.dataset_config(), &cfg.model.geometry())
}

fn val_set(cfg: &RunConfig, ds: &ToyDataset) -> Result<Vec<(Vec<Patch<f32>>, usize)>> {
    ds.patch_split(Split::Val, &cfg.model.geometry())
}

/// Load the teacher or train one from the configuration; a loaded
/// checkpoint's architecture replaces the configured one.
fn teacher(ctx: &mut Ctx, arg: &TeacherArg) -> Result<ViTModel<f32>> {
    match &arg.teacher {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            ctx.cfg.model = ckpt.model.config.clone();
            ctx.cfg.validate()?;
            Ok(ckpt.model)
        }
        None => {
            let ds = dataset(&ctx.cfg)?;
            let (model, _) = train_teacher(&ds, &ctx.cfg.model, &ctx.cfg.train_config())?;
            Ok(model)
        }
    }
}

fn image_name(img: &SparseImage) -> String {
    format!("{}-y{}-s{}-k{}.pri", img.method.name(), img.label, img.seed, img.k)
}

fn experiment(cfg: &RunConfig, method: Method, seed_index: usize) -> ExperimentConfig {
    ExperimentConfig {
        inversion: InversionConfig { method, ..cfg.inversion.clone() },
        distill: vit_inversion::harness::DistillConfig {
            seed: cfg.distill.seed + seed_index as u64,
            ..cfg.distill.clone()
        },
        images: cfg.images,
        seed: cfg.seed + 1000 * seed_index as u64,
    }
}

fn run_train(common: Common) -> Result<PathBuf> {
    let ctx = setup(&common)?;
    let ds = dataset(&ctx.cfg)?;
    let (model, train) = train_teacher(&ds, &ctx.cfg.model, &ctx.cfg.train_config())?;
    let metadata = json!({ "train": train, "dataset": ctx.cfg.dataset_config() }).to_string();
    save_checkpoint(&Checkpoint { model, metadata }, ctx.out.join("teacher.ckpt"))?;
    let mut report = Report::new("train-teacher", &ctx.cfg);
    report.results = json!({ "train": train });
    report.accuracies.push(AccuracyRow { name: "teacher".into(), seed: ctx.cfg.seed, accuracy: train.val_accuracy });
    println!("val accuracy {:.4}", train.val_accuracy);
    finish(&ctx, &report)
}

fn cost_params(cfg: &RunConfig, images: u64) -> CostParams {
    CostParams {
        n: cfg.model.num_patches() as u64,
        d: cfg.model.dim as u64,
        layers: cfg.model.layers as u64,
        images,
        iterations: cfg.inversion.iterations as u64,
        v: cfg.inversion.v as u64,
    }
}

fn run_invert(common: Common, arg: TeacherArg, label: usize, jobs: usize) -> Result<PathBuf> {
    let mut ctx = setup(&common)?;
    let model = teacher(&mut ctx, &arg)?;
    let mut report = Report::new("invert", &ctx.cfg);
    let mut images = Vec::new();
    let mut measured = Vec::new();
    let mut entries = Vec::new();
    for j in 0..jobs {
        let cfg = InversionConfig { seed: ctx.cfg.seed + j as u64, ..ctx.cfg.inversion.clone() };
        let out = invert(&model, label, &cfg)?;
        measured.push(MeasuredCost::from_counters(cfg.method.name(), &out.counter, &out.scoring));
        for img in &out.images {
            let name = image_name(img);
            save_sparse_image(img, ctx.out.join("images").join(&name))?;
            let conf = model.predict_probs(&img.patches)?;
            entries.push(json!({
                "file": name,
                "k": img.k,
                "iteration": img.iteration,
                "positions": img.positions(),
                "sparsity": img.sparsity(),
                "target_confidence": conf[label],
            }));
        }
        images.extend(out.images);
    }
    let outputs = images.len() as u64;
    report.cost = Some(CostReport::new(&cost_params(&ctx.cfg, outputs.max(1)))?.with_measured(measured));
    report.results = json!({ "label": label, "jobs": jobs, "images": entries });
    println!("wrote {} sparse images", images.len());
    finish(&ctx, &report)
}

fn run_cost(common: Common, measure: bool) -> Result<PathBuf> {
    let ctx = setup(&common)?;
    let cfg = &ctx.cfg;
    let mut report = Report::new("cost", cfg);
    let mut cost = CostReport::new(&cost_params(cfg, 1))?;
    if measure {
        let model = ViTModel::<f32>::init(cfg.model.clone(), cfg.seed)?;
        let mut measured = Vec::new();
        for method in [Method::Dmi, Method::Smi, Method::Pri] {
            let inv = InversionConfig { method, seed: cfg.seed, ..cfg.inversion.clone() };
            let out = invert(&model, 0, &inv)?;
            measured.push(MeasuredCost::from_counters(method.name(), &out.counter, &out.scoring));
        }
        cost = cost.with_measured(measured);
    }
    let table = cost.to_table();
    print!("{table}");
    save_text(ctx.out.join("cost.txt"), &table)?;
    report.cost = Some(cost);
    finish(&ctx, &report)
}

fn run_distill(common: Common, arg: TeacherArg) -> Result<PathBuf> {
    let mut ctx = setup(&common)?;
    let model = teacher(&mut ctx, &arg)?;
    let cfg = ctx.cfg.clone();
    let ds = dataset(&cfg)?;
    let val = val_set(&cfg, &ds)?;
    let labels: Vec<usize> = (0..cfg.model.classes).collect();
    let mut report = Report::new("distill", &cfg);
    report.accuracies.push(AccuracyRow { name: "teacher".into(), seed: cfg.seed, accuracy: accuracy(&model, &val)? });
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        let mut sets = Vec::new();
        for s in 0..cfg.seeds {
            let exp = experiment(&cfg, method, s);
            let images = synthesize(&model, &exp.inversion, exp.images, &labels, exp.seed)?;
            let student = ViTModel::init(cfg.model.clone(), exp.distill.seed)?;
            let (_, dr) = distill(&model, student, &images, &exp.distill, &val)?;
            rows.push(vec![method.name().to_string(), exp.seed.to_string(), format!("{:?}", dr.val_accuracy)]);
            report.accuracies.push(AccuracyRow { name: method.name().into(), seed: exp.seed, accuracy: dr.val_accuracy });
            sets.extend(images.into_iter().map(|i| i.patches));
        }
        report.confidence.push(NamedConfidence {
            name: method.name().into(),
            images: sets.len(),
            stats: confidence_stats(&model, &sets)?,
        });
    }
    save_text(ctx.out.join("accuracies.csv"), &to_csv(&["method", "seed", "val_accuracy"], &rows))?;
    save_text(ctx.out.join("histograms.csv"), &histogram_csv(&report.confidence))?;
    for r in &report.accuracies {
        println!("{:<8} seed {:<6} accuracy {:.4}", r.name, r.seed, r.accuracy);
    }
    finish(&ctx, &report)
}

fn run_one_class(common: Common, arg: TeacherArg, target: Option<usize>) -> Result<PathBuf> {
    let mut ctx = setup(&common)?;
    if let Some(t) = target {
        ctx.cfg.target = t;
        ctx.cfg.validate()?;
    }
    let model = teacher(&mut ctx, &arg)?;
    let cfg = ctx.cfg.clone();
    let val = val_set(&cfg, &dataset(&cfg)?)?;
    let mut report = Report::new("one-class", &cfg);
    let mut results = Vec::new();
    for &method in &cfg.methods {
        for s in 0..cfg.seeds {
            let exp = experiment(&cfg, method, s);
            let r = one_class_experiment(&model, cfg.target, &exp, &val)?;
            save_text(
                ctx.out.join(format!("confusion-{}-s{}.csv", method.name(), exp.seed)),
                &confusion_csv(&r.confusion),
            )?;
            report.accuracies.push(AccuracyRow {
                name: format!("{}-off-target", method.name()),
                seed: exp.seed,
                accuracy: r.off_target_accuracy,
            });
            println!("{:<6} seed {:<6} off-target accuracy {:.4}", method.name(), exp.seed, r.off_target_accuracy);
            results.push(r);
        }
    }
    report.results = json!({ "target": cfg.target, "runs": results });
    finish(&ctx, &report)
}

fn run_selection(common: Common, arg: TeacherArg) -> Result<PathBuf> {
    let mut ctx = setup(&common)?;
    let model = teacher(&mut ctx, &arg)?;
    let cfg = ctx.cfg.clone();
    let val = val_set(&cfg, &dataset(&cfg)?)?;
    let mut report = Report::new("selection-study", &cfg);
    let mut rows = Vec::new();
    let mut studies = Vec::new();
    for s in 0..cfg.seeds {
        let exp = experiment(&cfg, Method::FixedSelection, s);
        let study = selection_study(&model, &cfg.criteria, cfg.inversion.sparsity, &exp, &val)?;
        for r in &study.rows {
            rows.push(vec![
                r.criterion.name().to_string(),
                exp.seed.to_string(),
                r.kept_patches.to_string(),
                format!("{:?}", r.val_accuracy),
            ]);
            report.accuracies.push(AccuracyRow { name: r.criterion.name().into(), seed: exp.seed, accuracy: r.val_accuracy });
        }
        println!("seed {} spread {:.4}", exp.seed, study.spread);
        studies.push(study);
    }
    save_text(ctx.out.join("selection.csv"), &to_csv(&["criterion", "seed", "kept", "val_accuracy"], &rows))?;
    report.results = json!({ "studies": studies });
    finish(&ctx, &report)
}

fn pri_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pri"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Contract(format!("no .pri files in {}", dir.display())));
    }
    Ok(files)
}

fn run_analyze(common: Common, arg: TeacherArg, input: PathBuf) -> Result<PathBuf> {
    let mut ctx = setup(&common)?;
    let model = teacher(&mut ctx, &arg)?;
    let mut groups: std::collections::BTreeMap<(u8, usize), Vec<Vec<Patch<f32>>>> = Default::default();
    for f in pri_files(&input)? {
        let img = load_sparse_image(&f)?;
        if img.geometry != model.config.geometry() {
            return Err(Error::Contract(format!("{} does not match the teacher geometry", f.display())));
        }
        groups.entry((img.method.code(), img.k)).or_default().push(img.patches);
    }
    let mut report = Report::new("analyze", &ctx.cfg);
    for ((code, k), sets) in &groups {
        let method = Method::from_code(*code).expect("decoded");
        let stats = confidence_stats(&model, sets)?;
        println!("{:<6} k={k} images {:<4} mean {:.4} median {:.4}", method.name(), sets.len(), stats.mean, stats.median);
        report.confidence.push(NamedConfidence { name: format!("{}-k{k}", method.name()), images: sets.len(), stats });
    }
    save_text(ctx.out.join("histograms.csv"), &histogram_csv(&report.confidence))?;
    finish(&ctx, &report)
}

fn run_dump(common: Common, input: PathBuf) -> Result<PathBuf> {
    let ctx = setup(&common)?;
    let mut written = Vec::new();
    for f in pri_files(&input)? {
        let img = load_sparse_image(&f)?;
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        let name = format!("{stem}.ppm");
        save_ppm(&img, ctx.out.join(&name))?;
        written.push(json!({ "file": name, "patches": img.patches.len(), "black_patches": img.geometry.num_patches() - img.patches.len() }));
    }
    let mut report = Report::new("dump", &ctx.cfg);
    println!("wrote {} pixmaps", written.len());
    report.results = json!({ "pixmaps": written });
    finish(&ctx, &report)
}

fn common_of(cmd: &Command) -> &Common {
    match cmd {
        Command::TrainTeacher { common }
        | Command::Invert { common, .. }
        | Command::Cost { common, .. }
        | Command::Distill { common, .. }
        | Command::OneClass { common, .. }
        | Command::SelectionStudy { common, .. }
        | Command::Analyze { common, .. }
        | Command::Dump { common, .. } => common,
    }
}

fn run(cli: Cli) -> Result<()> {
    let timing = common_of(&cli.command).timing;
    let start = Instant::now();
    let out = match cli.command {
        Command::TrainTeacher { common } => run_train(common),
        Command::Invert { common, teacher, label, jobs } => run_invert(common, teacher, label, jobs),
        Command::Cost { common, measure } => run_cost(common, measure),
        Command::Distill { common, teacher } => run_distill(common, teacher),
        Command::OneClass { common, teacher, target } => run_one_class(common, teacher, target),
        Command::SelectionStudy { common, teacher } => run_selection(common, teacher),
        Command::Analyze { common, teacher, input } => run_analyze(common, teacher, input),
        Command::Dump { common, input } => run_dump(common, input),
    }?;
    if timing {
        let body = json!({ "wall_clock_seconds": start.elapsed().as_secs_f64() }).to_string();
        save_text(out.join("timing.json"), &body)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

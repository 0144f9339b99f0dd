//! Batch command-line interface and the experiment plumbing behind it.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use image::{Rgb, RgbImage};
use log::{info, warn};

use crate::checkpoint::{self, Checkpoint};
use crate::config::ExperimentConfig;
use crate::datapipe::{self, load_dataset, preprocess, split_dataset, DatasetSplit, IndexRow, LabelMask, Record, SplitGroup};
use crate::error::{Error, Result};
use crate::evaluation::{harden, MetricReport, SampleMetrics};
use crate::scribblegen::{synthesize_scribble, ScribbleMethod};
use crate::segmentor::Segmentor;
use crate::synthdata;
use crate::trainer::{self, EpochRecord, RunHooks, TrainReport, TrainingData};

pub const RUNS_ENV: &str = "SCRIBBLEGATE_RUNS";
pub const DEFAULT_FRACTIONS: [f64; 5] = [0.05, 0.125, 0.25, 0.5, 1.0];

#[derive(Debug, Parser)]
#[command(name = "scribblegate", version, about = "Scribble-supervised segmentation with adversarial attention gates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic nested-structure dataset.
    SynthData {
        #[arg(long, default_value_t = 20)]
        subjects: usize,
        #[arg(long, default_value_t = 10)]
        per_subject: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize scribbles from the masks of a dataset.
    MakeScribbles {
        /// Dataset root containing index.csv.
        #[arg(long)]
        data: PathBuf,
        /// Output root; defaults to the input root.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "skeleton")]
        method: String,
        /// Random-walk length (foreground walks and the background walk).
        #[arg(long, default_value_t = 2500)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Independent scribbles per image.
        #[arg(long, default_value_t = 1)]
        annotators: usize,
    },
    /// Partition subjects into seg_train, disc_train, validation and test.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train, validation and test fractions.
        #[arg(long, default_value = "0.7,0.15,0.15")]
        fractions: String,
        /// Defaults to <data>/split.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Config override, `key=value`; may repeat.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from the run's last.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a run's best checkpoint on the test (or validation) subjects.
    Evaluate {
        /// Run directory holding config.resolved, split.csv and best.ckpt.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        group: String,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also render curves.png from the run's metrics.csv.
        #[arg(long)]
        plot: bool,
    },
    /// Render loss and Dice curves from a metrics.csv.
    Plot {
        metrics: PathBuf,
        /// Defaults to curves.png next to the metrics file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and test once per (annotation fraction, seed).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "0.05,0.125,0.25,0.5,1.0")]
        fractions: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
}

/// Failures split by exit code: bad invocations exit 1, everything else 2.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `scribblegate --help` for usage");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::SynthData { subjects, per_subject, seed, out } => {
            if subjects < 4 {
                return Err(Failure::Usage(format!("--subjects must be at least 4, got {subjects}")));
            }
            let rows = synthdata::generate_dataset(subjects, per_subject, seed, &out)?;
            println!("wrote {} images to {}", rows.len(), out.display());
        }
        Command::MakeScribbles { data, out, method, iters, seed, annotators } => {
            let method = match method.as_str() {
                "skeleton" => ScribbleMethod::Skeleton,
                "walk" => ScribbleMethod::Walk { iters },
                other => return Err(Failure::Usage(format!("--method must be skeleton or walk, got `{other}`"))),
            };
            if annotators == 0 {
                return Err(Failure::Usage("--annotators must be positive".into()));
            }
            let out = out.unwrap_or_else(|| data.clone());
            let n = make_scribbles(&data, &out, method, iters, seed, annotators)?;
            println!("wrote scribbles for {n} images to {}", out.display());
        }
        Command::Split { data, seed, fractions, out } => {
            let f = parse_floats(&fractions).map_err(Failure::Usage)?;
            let [train, val, test] = f[..] else {
                return Err(Failure::Usage("--fractions needs three values".into()));
            };
            let rows = datapipe::read_index(&data)?;
            let ids: Vec<String> = rows.into_iter().map(|r| r.subject_id).collect();
            let split = split_dataset(&ids, (train, val, test), seed)?;
            let out = out.unwrap_or_else(|| data.join("split.csv"));
            split.write_csv(&out)?;
            for (group, ids) in split.groups() {
                println!("{}: {} subjects", group.as_str(), ids.len());
            }
        }
        Command::Train { config, overrides, resume } => {
            let cfg = load_config(&config, &overrides)?;
            let dir = run_dir(&cfg.run_name);
            let interrupt = Arc::new(AtomicBool::new(false));
            let flag = interrupt.clone();
            if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
                warn!("cannot install interrupt handler: {e}");
            }
            let report = train_run(&cfg, &dir, resume, Some(&interrupt))?;
            if report.interrupted {
                println!("interrupted at epoch {}; state saved to {}", report.final_state.epoch, dir.join("last.ckpt").display());
            }
            match report.best_epoch {
                Some(e) => println!("best validation Dice {:.4} at epoch {e}; run in {}", report.best_val_dice, dir.display()),
                None => println!("no completed epoch; run in {}", dir.display()),
            }
        }
        Command::Evaluate { run, group, out, plot } => {
            let group: SplitGroup = group.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            let out = out.unwrap_or_else(|| run.clone());
            let report = evaluate_run(&run, group, &out)?;
            let d = report.multiclass_dice();
            println!("{} images, multi-class Dice {:.4} ± {:.4}", d.count, d.mean, d.std);
            if plot {
                let metrics = run.join("metrics.csv");
                plot_metrics(&metrics, &out.join("curves.png"))?;
            }
        }
        Command::Plot { metrics, out } => {
            let out = out.unwrap_or_else(|| metrics.with_file_name("curves.png"));
            plot_metrics(&metrics, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Sweep { config, overrides, fractions, seeds } => {
            let cfg = load_config(&config, &overrides)?;
            let fractions = parse_floats(&fractions).map_err(Failure::Usage)?;
            if fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
                return Err(Failure::Usage("fractions must lie in (0, 1]".into()));
            }
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Failure::Usage(format!("bad seed `{s}`"))))
                .collect::<std::result::Result<_, _>>()?;
            let root = run_dir(&cfg.run_name);
            let rows = sweep(&cfg, &fractions, &seeds, &root)?;
            write_sweep_csv(&rows, &root.join("sweep.csv"))?;
            for r in &rows {
                println!("fraction {:.3} seed {} test Dice {:.4}", r.fraction, r.seed, r.test_dice);
            }
        }
    }
    Ok(())
}

fn parse_floats(text: &str) -> std::result::Result<Vec<f64>, String> {
    text.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad number `{v}`"))).collect()
}

/// Loads a config file and applies `key=value` overrides. Every failure
/// here is a usage error.
fn load_config(path: &Path, overrides: &[String]) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| Failure::Usage(format!("cannot load config: {e}")))?;
    for kv in overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("override `{kv}` is not key=value")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Root under which run directories are created.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_ENV).map_or_else(|| PathBuf::from("run"), PathBuf::from)
}

pub fn run_dir(run_name: &str) -> PathBuf {
    runs_root().join(run_name)
}

/// Writes scribble PNGs for every row with a mask and returns how many
/// images were annotated. When `out` differs from `data`, images and masks
/// are copied so that `out` is a complete dataset.
pub fn make_scribbles(data: &Path, out: &Path, method: ScribbleMethod, iters: usize, seed: u64, annotators: usize) -> Result<usize> {
    let rows = datapipe::read_index(data)?;
    let copy = data != out;
    let mut new_rows = Vec::with_capacity(rows.len());
    let mut count = 0;
    for (i, row) in rows.into_iter().enumerate() {
        if copy {
            for rel in [&row.image_path, &row.mask_path].into_iter().filter(|p| !p.is_empty()) {
                let (src, dst) = (data.join(rel), out.join(rel));
                if let Some(parent) = dst.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                std::fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
            }
        }
        if row.mask_path.is_empty() {
            new_rows.push(row);
            continue;
        }
        let indices = datapipe::read_index_png(&data.join(&row.mask_path))?;
        let num_classes = indices.iter().copied().max().map_or(1, |m| m as usize + 1);
        let mask = LabelMask::from_indices(indices.view(), num_classes)?;
        let stem = Path::new(&row.image_path).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut paths = Vec::with_capacity(annotators);
        for a in 0..annotators {
            let s = seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add((i * annotators + a) as u64);
            let scribble = synthesize_scribble(&mask, method, iters, s);
            let rel = if annotators == 1 {
                format!("scribbles/{}/{stem}.png", row.subject_id)
            } else {
                format!("scribbles/{}/{stem}_a{a}.png", row.subject_id)
            };
            datapipe::write_index_png(&out.join(&rel), scribble.labels().view())?;
            paths.push(rel);
        }
        count += 1;
        new_rows.push(IndexRow { scribble_path: paths.join(";"), ..row });
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    datapipe::write_index(out, &new_rows)?;
    Ok(count)
}

/// Loaded, preprocessed records and their subject split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub records: Vec<Record>,
    pub split: DatasetSplit,
}

/// Loads `data_root`, preprocesses it, and resolves the split: an existing
/// `split.csv` wins, then per-row split hints when every row has one, then
/// a seeded split by `split_seed` and the configured fractions.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let root = Path::new(&cfg.data_root);
    let records = load_dataset(root, cfg.num_classes)?;
    let split = resolve_split(root, &records, cfg)?;
    let target = (cfg.image_size > 0).then_some((cfg.image_size, cfg.image_size));
    let records = preprocess(records, cfg.normalization, target)?;
    Ok(PreparedData { records, split })
}

fn resolve_split(root: &Path, records: &[Record], cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    let csv = root.join("split.csv");
    if csv.exists() {
        return DatasetSplit::read_csv(&csv, cfg.split_seed);
    }
    if records.iter().all(|r| r.split_hint.is_some()) {
        let mut split = DatasetSplit { seg_train: vec![], disc_train: vec![], validation: vec![], test: vec![], seed: cfg.split_seed };
        for r in records {
            let id = r.image.subject_id.clone();
            let group = match r.split_hint.as_deref().unwrap_or_default().parse::<SplitGroup>()? {
                SplitGroup::SegTrain => &mut split.seg_train,
                SplitGroup::DiscTrain => &mut split.disc_train,
                SplitGroup::Validation => &mut split.validation,
                SplitGroup::Test => &mut split.test,
            };
            if !group.contains(&id) {
                group.push(id);
            }
        }
        return Ok(split);
    }
    let ids: Vec<String> = records.iter().map(|r| r.image.subject_id.clone()).collect();
    split_dataset(&ids, (cfg.train_fraction, cfg.validation_fraction, cfg.test_fraction), cfg.split_seed)
}

/// Trains into `dir`, writing `config.resolved`, `split.csv`, `metrics.csv`
/// and checkpoints.
pub fn train_run(cfg: &ExperimentConfig, dir: &Path, resume: bool, interrupt: Option<&AtomicBool>) -> Result<TrainReport> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let resolved = dir.join("config.resolved");
    std::fs::write(&resolved, cfg.to_text()).map_err(|e| Error::io(&resolved, e))?;
    let prepared = prepare_data(cfg)?;
    prepared.split.write_csv(&dir.join("split.csv"))?;
    let data = TrainingData::assemble(&prepared.records, &prepared.split, cfg)?;
    info!(
        "{} weak, {} unlabeled, {} unpaired masks, {} validation images",
        data.weak.len(),
        data.unlabeled.len(),
        data.masks.len(),
        data.validation.len()
    );
    let log_epoch = |r: &EpochRecord| {
        info!("epoch {} lr {:.2e} sup {:.4} adv_g {:.4} adv_d {:.4} val_dice {:.4}", r.epoch, r.lr, r.sup_loss, r.adv_loss_g, r.adv_loss_d, r.val_dice)
    };
    let hooks = RunHooks { run_dir: Some(dir), interrupt, on_epoch: Some(&log_epoch) };
    if resume {
        let ckpt = Checkpoint::read(&dir.join("last.ckpt"))?;
        let state = checkpoint::restore_state(&ckpt)?;
        trainer::resume_training(cfg, &data, state, &hooks)
    } else {
        trainer::run_training(cfg, &data, &hooks)
    }
}

/// Predicts every image of `group` and scores it against its mask.
pub fn evaluate_segmentor(segmentor: &Segmentor, prepared: &PreparedData, group: SplitGroup, batch_size: usize) -> Result<MetricReport> {
    let chosen: Vec<&Record> = prepared
        .records
        .iter()
        .filter(|r| prepared.split.group_of(&r.image.subject_id) == Some(group) && r.mask.is_some())
        .collect();
    if chosen.is_empty() {
        return Err(Error::Dataset(format!("no masked images in the {} group", group.as_str())));
    }
    let mut metrics = Vec::with_capacity(chosen.len());
    for chunk in chosen.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|r| r.image.pixels.view().permuted_axes([2, 0, 1]).to_owned()).collect();
        let probs = trainer::predict_probs(segmentor, &images)?;
        for (r, p) in chunk.iter().zip(&probs) {
            let truth = r.mask.as_ref().expect("filtered on mask");
            metrics.push(SampleMetrics::compute(r.image.id.clone(), &harden(p.view()), truth)?);
        }
    }
    let names = chosen[0].mask.as_ref().map(|m| m.class_names().to_vec()).unwrap_or_default();
    Ok(MetricReport::new(metrics, names))
}

/// Evaluates `best.ckpt` of a run directory and writes `report.csv` and
/// `summary.csv` into `out`.
pub fn evaluate_run(run: &Path, group: SplitGroup, out: &Path) -> Result<MetricReport> {
    let ckpt = Checkpoint::read(&run.join("best.ckpt"))?;
    let cfg = ckpt.config.clone();
    let mut prepared = prepare_data(&cfg)?;
    let split_csv = run.join("split.csv");
    if split_csv.exists() {
        prepared.split = DatasetSplit::read_csv(&split_csv, cfg.split_seed)?;
    }
    let segmentor = checkpoint::load_segmentor(&ckpt)?;
    let report = evaluate_segmentor(&segmentor, &prepared, group, cfg.batch_size)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report.write_report_csv(&out.join("report.csv"))?;
    report.write_summary_csv(&out.join("summary.csv"))?;
    Ok(report)
}

/// One (fraction, seed) result of an annotation sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub fraction: f64,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub val_dice: f64,
    pub test_dice: f64,
}

/// Trains one run per (fraction, seed) below `root` and tests each best
/// segmentor. Rows come out sorted by fraction, then seed.
pub fn sweep(cfg: &ExperimentConfig, fractions: &[f64], seeds: &[u64], root: &Path) -> Result<Vec<SweepRow>> {
    let mut fractions = fractions.to_vec();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let prepared = prepare_data(cfg)?;
    let mut rows = Vec::with_capacity(fractions.len() * seeds.len());
    for &fraction in &fractions {
        for &seed in seeds {
            let mut run = cfg.clone();
            run.annotation_fraction = fraction;
            run.init_seed = seed;
            run.data_seed = seed;
            run.noise_seed = seed;
            run.run_name = format!("{}/f{fraction}_s{seed}", cfg.run_name);
            let dir = root.join(format!("f{fraction}_s{seed}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let resolved = dir.join("config.resolved");
            std::fs::write(&resolved, run.to_text()).map_err(|e| Error::io(&resolved, e))?;
            let data = TrainingData::assemble(&prepared.records, &prepared.split, &run)?;
            let report = trainer::run_training(&run, &data, &RunHooks { run_dir: Some(&dir), ..Default::default() })?;
            let test = evaluate_segmentor(&report.best_segmentor, &prepared, SplitGroup::Test, run.batch_size)?;
            let row = SweepRow { fraction, seed, best_epoch: report.best_epoch, val_dice: report.best_val_dice, test_dice: test.multiclass_dice().mean };
            info!("fraction {fraction} seed {seed}: test Dice {:.4}", row.test_dice);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fraction", "seed", "best_epoch", "val_dice", "test_dice"])?;
    for r in rows {
        let best = r.best_epoch.map_or(String::new(), |e| e.to_string());
        w.write_record([r.fraction.to_string(), r.seed.to_string(), best, format!("{:.6}", r.val_dice), format!("{:.6}", r.test_dice)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the numeric columns of a `metrics.csv`.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64> {
            let v = row.get(i).unwrap_or("");
            v.parse::<f64>().map_err(|_| Error::Dataset(format!("{}: bad value `{v}`", path.display())))
        };
        out.push(EpochRecord {
            epoch: num(0)? as usize,
            lr: num(1)?,
            sup_loss: num(2)?,
            adv_loss_g: num(3)?,
            adv_loss_d: num(4)?,
            val_dice: num(5)?,
        });
    }
    Ok(out)
}

const PANEL: (u32, u32) = (400, 300);
const MARGIN: u32 = 20;

/// Left panel: supervised (blue), generator (orange) and discriminator
/// (green) losses, each scaled to its own maximum. Right panel: validation
/// Dice on a fixed 0..1 axis.
pub fn plot_metrics(metrics: &Path, out: &Path) -> Result<()> {
    let history = read_metrics(metrics)?;
    if history.is_empty() {
        return Err(Error::Dataset(format!("{}: no epochs to plot", metrics.display())));
    }
    let mut img = RgbImage::from_pixel(PANEL.0 * 2, PANEL.1, Rgb([255, 255, 255]));
    for panel in 0..2 {
        frame(&mut img, panel);
    }
    let losses: [(fn(&EpochRecord) -> f64, Rgb<u8>); 3] = [
        (|r| r.sup_loss, Rgb([31, 119, 180])),
        (|r| r.adv_loss_g, Rgb([255, 127, 14])),
        (|r| r.adv_loss_d, Rgb([44, 160, 44])),
    ];
    for (get, color) in losses {
        let values: Vec<f64> = history.iter().map(get).collect();
        let max = values.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
        if max > 0.0 {
            polyline(&mut img, 0, &values, max, color);
        }
    }
    let dice: Vec<f64> = history.iter().map(|r| r.val_dice).collect();
    polyline(&mut img, 1, &dice, 1.0, Rgb([214, 39, 40]));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(out).map_err(|source| Error::Image { path: out.to_path_buf(), source })
}

fn frame(img: &mut RgbImage, panel: u32) {
    let x0 = panel * PANEL.0 + MARGIN;
    let x1 = (panel + 1) * PANEL.0 - MARGIN;
    let (y0, y1) = (MARGIN, PANEL.1 - MARGIN);
    let grey = Rgb([90, 90, 90]);
    for x in x0..=x1 {
        img.put_pixel(x, y0, grey);
        img.put_pixel(x, y1, grey);
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, grey);
        img.put_pixel(x1, y, grey);
    }
}

fn polyline(img: &mut RgbImage, panel: u32, values: &[f64], max: f64, color: Rgb<u8>) {
    let w = (PANEL.0 - 2 * MARGIN - 2) as f64;
    let h = (PANEL.1 - 2 * MARGIN - 2) as f64;
    let n = values.len().max(2) - 1;
    let point = |i: usize, v: f64| -> (i64, i64) {
        let x = (panel * PANEL.0 + MARGIN + 1) as f64 + w * i as f64 / n as f64;
        let y = (PANEL.1 - MARGIN - 1) as f64 - h * (v / max).clamp(0.0, 1.0);
        (x.round() as i64, y.round() as i64)
    };
    let mut prev: Option<(i64, i64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            prev = None;
            continue;
        }
        let p = point(i, v);
        match prev {
            Some(q) => line(img, q, p, color),
            None => img.put_pixel(p.0 as u32, p.1 as u32, color),
        }
        prev = Some(p);
    }
}

fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        img.put_pixel(x0 as u32, y0 as u32, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Flushes stdout; used by the binary before exiting.
pub fn flush_stdout() {
    let _ = std::io::stdout().flush();
}

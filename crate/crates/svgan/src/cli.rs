//! Subcommand implementations behind the `svgan` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use svgan_core::data::{generate_phantoms, patient_split, phantom_regions, Dataset};
use svgan_core::gradcheck::{run_suite, REL_FLOOR};
use svgan_core::metrics::MetricsReport;
use svgan_core::trainer::{
    evaluate, evaluate_oracle, predict_split, summary_line, EvalRecord, StepRecord, TrainObserver, TrainState, Trainer,
};
use svgan_core::weighting::{compute_stats, compute_weights, ClassStats};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Descriptor};
use crate::config::{config_hash, load_run_config, RunConfig};
use crate::dataset::{load_dataset, save_dataset};
use crate::error::{Error, Result};
use crate::fsutil::{create_dir, write_json};
use crate::log::{read_log, write_metrics_csv, write_text, LogRow, LogWriter, MetricsSummary};
use crate::report::{loss_charts, loss_table, metrics_table, overlay_ppm};

#[derive(Debug, Parser)]
#[command(
    name = "svgan",
    version,
    about = "Selective-weighted adversarial segmentation and diagnosis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset from the `phantom` section of a config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print class frequencies and selective weights as CSV.
    Weights {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or the reference labels with --oracle).
    Eval(EvalArgs),
    /// Render loss curves and a loss summary from a training log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Score the reference labels against themselves instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub oracle: bool,
    /// Magnification of the PPM overlays.
    #[arg(long, default_value_t = 4)]
    pub zoom: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => synth(&config, &out),
        Command::Weights { data } => weights(&data),
        Command::Train { config, data, out } => train(&config, &data, &out),
        Command::Eval(args) => eval(&args),
        Command::Report { log, out } => report(&log, &out),
        Command::Gradcheck { instances, seed } => gradcheck(instances, seed),
    }
}

fn stats(d: &Dataset) -> Result<ClassStats> {
    Ok(compute_stats(d.label_volumes(), d.num_seg_classes)?)
}

pub fn synth(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_run_config(config)?;
    let data = generate_phantoms(&cfg.phantom)?;
    save_dataset(out, &data)?;
    let s = stats(&data)?;
    println!("{:<12} {:>12} {:>10}", "class", "count", "fraction");
    for (name, &f) in data.class_names.iter().zip(&s.freq) {
        println!("{:<12} {:>12} {:>10.6}", name, f, f as f64 / s.total as f64);
    }
    Ok(())
}

pub fn weights(data: &Path) -> Result<()> {
    let d = load_dataset(data)?;
    let s = stats(&d)?;
    let w = compute_weights(&s);
    println!("class,freq,weight");
    for c in 0..s.num_classes {
        println!("{},{},{:.5}", d.class_names[c], s.freq[c], w.w[c]);
    }
    Ok(())
}

fn check_dims(cfg: &RunConfig, d: &Dataset) -> Result<()> {
    let g = &cfg.generator;
    let p = &d.patients[0];
    let have = (p.modalities, d.num_seg_classes, d.num_diseases, p.height, p.width);
    let want = (g.in_channels, g.num_seg_classes, g.num_diseases, g.height, g.width);
    if have != want {
        return Err(Error::Validation(format!(
            "dataset (modalities, classes, diseases, height, width) = {:?} but the generator expects {:?}",
            have, want
        )));
    }
    Ok(())
}

/// Streams the log and keeps `best.svgan` / `last.svgan` current.
struct RunObserver {
    log: LogWriter,
    dir: PathBuf,
    desc: Descriptor,
    best_epoch: Option<usize>,
}

impl RunObserver {
    fn save(&mut self, name: &str, state: &TrainState<f32>) -> svgan_core::Result<()> {
        self.desc.epoch = state.epoch;
        self.desc.step = state.step;
        save_checkpoint(&self.dir.join(name), &self.desc, state)
            .map_err(|e| svgan_core::Error::Observer(format!("checkpoint write failed: {e}")))
    }
}

impl TrainObserver<f32> for RunObserver {
    fn on_step(&mut self, r: &StepRecord) -> svgan_core::Result<()> {
        TrainObserver::<f32>::on_step(&mut self.log, r)
    }

    fn on_eval(&mut self, r: &EvalRecord, state: &TrainState<f32>) -> svgan_core::Result<()> {
        println!(
            "epoch {:>3} step {:>6} val mean_fg_dice={:.4} acc={:.4}{}",
            r.epoch,
            r.step,
            r.mean_foreground_dice,
            r.accuracy,
            if r.best { " *" } else { "" }
        );
        if r.best {
            self.best_epoch = Some(r.epoch);
            self.save("best.svgan", state)?;
        }
        self.save("last.svgan", state)
    }

    fn on_finish(&mut self, state: &TrainState<f32>) -> svgan_core::Result<()> {
        TrainObserver::<f32>::on_finish(&mut self.log, state)?;
        self.save("last.svgan", state)
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config_hash: String,
    seed: u64,
    epochs: usize,
    steps: usize,
    train_patients: usize,
    val_patients: usize,
    wall_clock_secs: f64,
    best_epoch: Option<usize>,
    final_losses: Option<LogRow>,
    evals: &'a [EvalRecord],
}

pub fn train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_run_config(config)?;
    let dataset = load_dataset(data)?;
    check_dims(&cfg, &dataset)?;
    let split = patient_split(dataset.patients.len(), cfg.val_fraction, cfg.train.seed)?;
    let norm = dataset.normalized();
    let train_set = norm.subset(&split.train);
    let val_set = (!split.val.is_empty()).then(|| norm.subset(&split.val));
    let regions = phantom_regions(&dataset.class_names);
    let disc = cfg.discriminator();
    let mut trainer = Trainer::<f32>::new(
        cfg.generator.clone(),
        disc.clone(),
        cfg.train.clone(),
        &train_set,
        regions,
    )?;

    create_dir(out)?;
    let hash = config_hash(&cfg);
    write_json(&out.join("config.json"), &cfg)?;
    let mut obs = RunObserver {
        log: LogWriter::create(&out.join("train_log.csv"))?,
        dir: out.to_path_buf(),
        desc: Descriptor {
            generator: cfg.generator.clone(),
            discriminator: disc,
            train: cfg.train.clone(),
            epoch: 0,
            step: 0,
            config_hash: hash,
        },
        best_epoch: None,
    };
    println!(
        "training {} patients ({} validation), config hash {:016x}",
        train_set.patients.len(),
        split.val.len(),
        hash
    );
    let t0 = Instant::now();
    let log = trainer.run(&train_set, val_set.as_ref(), &mut obs)?;
    let secs = t0.elapsed().as_secs_f64();
    let summary = TrainSummary {
        config_hash: format!("{:016x}", hash),
        seed: cfg.train.seed,
        epochs: trainer.state.epoch,
        steps: trainer.state.step,
        train_patients: train_set.patients.len(),
        val_patients: split.val.len(),
        wall_clock_secs: secs,
        best_epoch: obs.best_epoch,
        final_losses: log.steps.last().map(LogRow::from_record),
        evals: &log.evals,
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    println!("done: {} steps in {:.1}s", trainer.state.step, secs);
    Ok(())
}

fn write_eval_outputs(
    out: &Path,
    report: &MetricsReport,
    data: &Dataset,
    preds: Option<&[Vec<u8>]>,
    zoom: usize,
) -> Result<()> {
    create_dir(out)?;
    write_metrics_csv(&out.join("metrics.csv"), report)?;
    write_json(&out.join("metrics_summary.json"), &MetricsSummary::of(report))?;
    write_text(&out.join("metrics_summary.md"), &metrics_table(report))?;
    let dir = out.join("overlays");
    create_dir(&dir)?;
    for (i, p) in data.patients.iter().enumerate() {
        let s = p.slices / 2;
        let plane = p.height * p.width;
        let gt = p.slice_labels(s);
        let pred = preds.map_or(gt, |v| &v[i][s * plane..(s + 1) * plane]);
        let img = overlay_ppm(gt, pred, p.height, p.width, zoom);
        crate::fsutil::atomic_write(&dir.join(format!("{}.ppm", p.id)), &img)?;
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let data = load_dataset(&args.data)?;
    let regions = phantom_regions(&data.class_names);
    let (report, preds) = match &args.checkpoint {
        None => (evaluate_oracle(&data, &regions)?, None),
        Some(path) => {
            let (desc, state) = load_checkpoint(path)?;
            let cfg = RunConfig {
                generator: desc.generator.clone(),
                ..RunConfig::default()
            };
            check_dims(&cfg, &data)?;
            let norm = data.normalized();
            let report = evaluate(&state.gen, &norm, &regions)?;
            let preds: Vec<Vec<u8>> = predict_split(&state.gen, &norm)?
                .into_iter()
                .map(|p| p.pred_labels)
                .collect();
            (report, Some(preds))
        }
    };
    write_eval_outputs(&args.out, &report, &data, preds.as_deref(), args.zoom)?;
    println!("{}", summary_line(&report));
    Ok(())
}

pub fn report(log: &Path, out: &Path) -> Result<()> {
    let rows = read_log(log)?;
    create_dir(out)?;
    for (term, svg) in loss_charts(&rows) {
        write_text(&out.join(format!("loss_{}.svg", term)), &svg)?;
    }
    let table = loss_table(&rows);
    write_text(&out.join("loss_summary.md"), &table)?;
    print!("{}", table);
    Ok(())
}

pub fn gradcheck(instances: usize, seed: u64) -> Result<()> {
    if instances == 0 {
        return Err(Error::Validation("--instances must be positive".into()));
    }
    let reports = run_suite(instances, seed)?;
    let mut worst = 0.0f64;
    println!("{:<24} {:>9} {:>14}", "op", "instances", "max_rel_error");
    for r in &reports {
        println!("{:<24} {:>9} {:>14.3e}", r.op, r.instances, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    if !(worst < REL_FLOOR) {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e} >= {:.0e}",
            worst, REL_FLOOR
        )));
    }
    println!("all {} ops below {:.0e}", reports.len(), REL_FLOOR);
    Ok(())
}

mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use posekit::data::{generate_dataset, load_dataset, read_labels, split_train_val, Dataset};
use posekit::geometry::CameraIntrinsics;
use posekit::metrics::{esa_score, MetricsReport, PoseEstimatePair};
use posekit::model::{head_param_count, Head};
use posekit::training::{
    evaluate_checkpoint, load_samples, model_intrinsics, parse_submission, predict_dir, score_submission,
    train, write_submission, Checkpoint, GFactor,
};

use crate::config::{GenerateKeys, TrainKeys};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or missing inputs; exit code 2.
    Usage(String),
    /// Failure while running; exit code 1.
    Runtime(String),
}

impl From<posekit::Error> for CliError {
    fn from(e: posekit::Error) -> Self {
        use posekit::Error::*;
        match e {
            InvalidConfig(_) | ConfigMismatch(_) | InvalidBins(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "posekit", version, about = "Spacecraft pose estimation: data, training, evaluation and scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with a labels manifest
    Generate {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// TOML file of flag keys; flags take precedence
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        keys: GenerateKeys,
    },
    /// Train a network and write checkpoints, a train log and a report
    Train {
        /// Training dataset directory or labels file
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset; when absent a split of --data is used
        #[arg(long)]
        val_data: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// TOML file of flag keys; flags take precedence
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        keys: TrainKeys,
    },
    /// Score a checkpoint (or the ground truth itself) on a labeled dataset
    Evaluate {
        /// Checkpoint file; not needed with --oracle
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory or labels file
        #[arg(long)]
        data: PathBuf,
        /// Where to write the metrics report
        #[arg(long)]
        report_out: Option<PathBuf>,
        /// Predict the ground truth instead of running a model
        #[arg(long)]
        oracle: bool,
    },
    /// Write a submission file for every image in a directory
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of png, jpg or bmp images
        #[arg(long)]
        images: PathBuf,
        /// Submission CSV to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a submission against a labels manifest, per domain
    Score {
        #[arg(long)]
        submission: PathBuf,
        /// labels.json, optionally with a `domain` field per entry
        #[arg(long)]
        labels: PathBuf,
        /// Where to write the overall metrics report
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Emit a figure (SVG) and its data table (CSV) from metrics reports
    Plot {
        /// Metrics report(s) written by `evaluate` or `train`
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Output path prefix; `.csv` and `.svg` are appended
        #[arg(long)]
        out: PathBuf,
        /// Distance bin edges in meters [default: 3,8,12,20]
        #[arg(long, value_delimiter = ',')]
        edges: Option<Vec<f64>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    DistanceError,
    BinsStudy,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn require(path: &Path, what: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_file(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_config(path: Option<&PathBuf>) -> CliResult<Option<toml::Table>> {
    path.map(|p| config::read_file(p)).transpose()
}

fn cmd_generate(out: &Path, config: Option<&PathBuf>, flags: &GenerateKeys) -> CliResult {
    let file = read_config(config)?;
    let keys = config::merge(flags, file.as_ref())?;
    let (cfg, resolved) = keys.resolve(config::env_seed()?)?;
    let labels = generate_dataset(&cfg, out)?;
    config::write_resolved(out, &resolved)?;
    println!(
        "wrote {} {} images to {}",
        labels.len(),
        cfg.domain.domain,
        out.display()
    );
    Ok(())
}

fn load(path: &Path) -> CliResult<Dataset> {
    require(path, "dataset")?;
    Ok(load_dataset(path)?)
}

fn dataset_intrinsics(ds: &Dataset) -> CliResult<CameraIntrinsics> {
    if let Some(k) = ds.intrinsics {
        return Ok(k);
    }
    let first = ds
        .records
        .first()
        .ok_or_else(|| CliError::Runtime(format!("dataset {} is empty", ds.root.display())))?;
    let img = first.load_image()?;
    Ok(CameraIntrinsics::with_size(img.width as u32, img.height as u32))
}

fn cmd_train(data: &Path, val_data: Option<&PathBuf>, out: &Path, config: Option<&PathBuf>, flags: &TrainKeys) -> CliResult {
    let file = read_config(config)?;
    let keys = config::merge(flags, file.as_ref())?;
    let (cfg, resolved) = keys.resolve(config::env_seed()?)?;
    let ds = load(data)?;
    let k = dataset_intrinsics(&ds)?;
    posekit::training::check_compatible(&cfg.model, &k)?;
    let (train_records, val_records) = match val_data {
        Some(v) => (ds.records.clone(), load(v)?.records),
        None => split_train_val(&ds.records, cfg.val_fraction, cfg.seed),
    };
    if train_records.is_empty() || val_records.is_empty() {
        return Err(CliError::Usage("training and validation sets must both be non-empty".into()));
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    config::write_resolved(out, &resolved)?;

    let c = cfg.model.feature_channels();
    println!(
        "model: {} + {}, orientation head {} parameters, position head {}",
        cfg.model.backbone.name(),
        cfg.model.head_mode,
        head_param_count(c, Head::Orientation(cfg.model.head_mode)),
        head_param_count(c, Head::Position)
    );
    println!(
        "data: {} train / {} val images, {} epochs",
        train_records.len(),
        val_records.len(),
        cfg.total_epochs()
    );
    let train_set = load_samples(&train_records, &cfg.model)?;
    let val_set = load_samples(&val_records, &cfg.model)?;
    let mk = model_intrinsics(&k, &cfg.model);
    let outcome = train(&cfg, &train_set, &val_set, &mk, |r| {
        eprintln!(
            "epoch {:>3} lr {:<7} loss {:.4} val e_t {:.3} m e_q {:.2} deg esa {:.4}",
            r.epoch, r.lr, r.train_loss, r.val_e_t, r.val_e_q, r.val_esa
        );
    })?;
    write_file(&out.join("train_log.csv"), &outcome.log.to_csv())?;
    outcome.last.save(&out.join("last.ckpt"))?;
    outcome.best.save(&out.join("best.ckpt"))?;
    let best = outcome
        .best_report
        .with_metadata("split", "validation")
        .with_metadata("epoch", outcome.best.epoch);
    write_file(&out.join("best_report.txt"), &best.to_text())?;
    println!(
        "best epoch {}: e_t {:.4} m, e_q {:.3} deg, esa {:.5}; outputs in {}",
        outcome.best.epoch,
        best.e_t_mean,
        best.e_q_mean,
        best.esa_score,
        out.display()
    );
    Ok(())
}

fn print_report(label: &str, r: &MetricsReport) {
    println!(
        "{label}: n={} e_t={:.6} m e_q={:.6} deg E={:.6}",
        r.n_samples, r.e_t_mean, r.e_q_mean, r.esa_score
    );
}

fn cmd_evaluate(checkpoint: Option<&PathBuf>, data: &Path, report_out: Option<&PathBuf>, oracle: bool) -> CliResult {
    if let Some(path) = checkpoint.filter(|_| !oracle) {
        require(path, "checkpoint")?;
    }
    let ds = load(data)?;
    let report = if oracle {
        let pairs: Vec<PoseEstimatePair> = ds
            .records
            .iter()
            .map(|r| PoseEstimatePair::new(r.image_id.clone(), r.pose, r.pose))
            .collect();
        esa_score(&pairs)?.with_metadata("head", "oracle")
    } else {
        let path = checkpoint.ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
        let ck = Checkpoint::load(path)?;
        evaluate_checkpoint(&ck, &ds.records, ds.intrinsics.as_ref())?.with_metadata("epoch", ck.epoch)
    };
    print_report("report", &report);
    if let Some(p) = report_out {
        write_file(p, &report.to_text())?;
    }
    Ok(())
}

fn cmd_predict(checkpoint: &Path, images: &Path, out: &Path) -> CliResult {
    require(checkpoint, "checkpoint")?;
    require(images, "image directory")?;
    let ck = Checkpoint::load(checkpoint)?;
    let rows = predict_dir(&ck, images)?;
    write_file(out, &write_submission(&rows))?;
    println!("wrote {} predictions to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_score(submission: &Path, labels: &Path, report_out: Option<&PathBuf>) -> CliResult {
    require(submission, "submission")?;
    require(labels, "labels")?;
    let text = fs::read_to_string(submission).map_err(|e| io_err(submission, e))?;
    let rows = parse_submission(&text)?;
    let labels = read_labels(labels)?;
    let s = score_submission(&rows, &labels)?;
    print_report("overall", &s.overall);
    for (d, r) in &s.per_domain {
        print_report(d.name(), r);
    }
    match s.g_factor {
        GFactor::Defined(g) => println!("G_factor={g:.2}"),
        GFactor::Undefined => println!("G_factor=undefined (synthetic score is zero)"),
        GFactor::NotApplicable => println!("G_factor=n/a (single domain)"),
    }
    if let Some(p) = report_out {
        write_file(p, &s.overall.to_text())?;
    }
    Ok(())
}

fn read_report(path: &Path) -> CliResult<MetricsReport> {
    if !path.exists() {
        return Err(CliError::Usage(format!("missing report {}", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    MetricsReport::parse(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn cmd_plot(reports: &[PathBuf], kind: PlotKind, out: &Path, edges: Option<&[f64]>) -> CliResult {
    let loaded = reports
        .iter()
        .map(|p| Ok((p.display().to_string(), read_report(p)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let (csv, svg) = match kind {
        PlotKind::DistanceError => {
            let refs: Vec<&MetricsReport> = loaded.iter().map(|(_, r)| r).collect();
            let merged = MetricsReport::merge(&refs)?;
            let table = plot::distance_table(&merged, edges.unwrap_or(&plot::DEFAULT_DISTANCE_EDGES))?;
            (table.to_csv(), plot::distance_svg(&table))
        }
        PlotKind::BinsStudy => {
            let rows = plot::bins_study(&loaded)?;
            (plot::bins_csv(&rows), plot::bins_svg(&rows))
        }
    };
    write_file(&with_ext(out, "csv"), &csv)?;
    write_file(&with_ext(out, "svg"), &svg)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Generate { out, config, keys } => cmd_generate(&out, config.as_ref(), &keys),
        Command::Train {
            data,
            val_data,
            out,
            config,
            keys,
        } => cmd_train(&data, val_data.as_ref(), &out, config.as_ref(), &keys),
        Command::Evaluate {
            checkpoint,
            data,
            report_out,
            oracle,
        } => cmd_evaluate(checkpoint.as_ref(), &data, report_out.as_ref(), oracle),
        Command::Predict { checkpoint, images, out } => cmd_predict(&checkpoint, &images, &out),
        Command::Score {
            submission,
            labels,
            report_out,
        } => cmd_score(&submission, &labels, report_out.as_ref()),
        Command::Plot {
            reports,
            kind,
            out,
            edges,
        } => cmd_plot(&reports, kind, &out, edges.as_deref()),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors and 0 for --help
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

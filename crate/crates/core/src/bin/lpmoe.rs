use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lpmoe_core::checkpoint::{self, Precision};
use lpmoe_core::config::TrainConfig;
use lpmoe_core::data::{generate_dataset, Dataset, DatasetSpec, FileFormat, ShapeFamily};
use lpmoe_core::gradsuite;
use lpmoe_core::imageio::{read_image, write_image, Image};
use lpmoe_core::metrics::{evaluate_dataset, MetricReport};
use lpmoe_core::model::{count_params, Ablation, Model};
use lpmoe_core::train::{self, evaluate_samples, Trainer};
use lpmoe_core::{Error, Result};

#[derive(Parser)]
#[command(name = "lpmoe", version, about = "Mixture-of-experts local-prior adapters for a frozen transformer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file; missing keys take desk-profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (also the texture seed for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Removes a component; repeat or comma-separate for several.
    #[arg(long, global = true, value_enum, value_delimiter = ',')]
    ablate: Vec<AblateArg>,
    /// Number of adapter stages.
    #[arg(long, global = true, value_parser = ["0", "2", "4", "6"])]
    stages: Option<String>,
    /// Succeed even when some predictions or masks have no counterpart.
    #[arg(long, global = true)]
    allow_missing: bool,
}

// Variant names double as the `no-*` flag values.
#[allow(clippy::enum_variant_names)]
#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    NoDmlp,
    NoCda,
    NoCase,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Ellipse,
    Polygon,
    Mixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Pnm,
    Png,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic camouflage dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Image side; defaults to the config's image_size.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        camouflage: f64,
        #[arg(long, value_enum, default_value_t = ShapeArg::Mixed)]
        shape: ShapeArg,
        /// Global index of the first image (use a disjoint range for a held-out split).
        #[arg(long, default_value_t = 0)]
        start_index: u64,
        #[arg(long, value_enum, default_value_t = FormatArg::Pnm)]
        format: FormatArg,
    },
    /// Trains on a generated dataset and writes the log and checkpoints.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's iteration count.
        #[arg(long)]
        iterations: Option<u64>,
        /// Continues from a checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stores checkpoints as 32-bit floats.
        #[arg(long)]
        f32: bool,
    },
    /// Scores a checkpoint on a dataset, or a prediction directory against masks.
    Eval {
        #[arg(long, conflicts_with = "pred")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Directory for prediction maps and the report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes an 8-bit confidence map for one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every operation and the composed model.
    Gradcheck,
    /// Parameter accounting for the configured model.
    Params {
        #[arg(long)]
        json: bool,
    },
}

impl Common {
    fn ablation(&self) -> Ablation {
        let mut a = Ablation::default();
        for x in &self.ablate {
            match x {
                AblateArg::NoDmlp => a.no_dmlp = true,
                AblateArg::NoCda => a.no_cda = true,
                AblateArg::NoCase => a.no_case = true,
            }
        }
        a
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        let stages = self.stages.as_deref().map(|s| s.parse().expect("validated by clap"));
        base.with_overrides(self.seed, self.ablation(), stages)
    }
}

fn write_report(dir: &Path, stem: &str, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.txt")), report.to_text())?;
    fs::write(dir.join(format!("{stem}.json")), report.to_json()?)?;
    Ok(())
}

fn check_unmatched(report: &MetricReport, allow_missing: bool) -> Result<()> {
    if !report.unmatched.is_empty() && !allow_missing {
        return Err(Error::Unmatched(report.unmatched.clone()));
    }
    Ok(())
}

fn gen_data(c: &Common, cmd: &Command) -> Result<()> {
    let Command::GenData { out, count, size, camouflage, shape, start_index, format } = cmd else { unreachable!() };
    let cfg = c.train_config()?;
    let spec = DatasetSpec {
        count: *count,
        image_size: size.unwrap_or(cfg.model.image_size),
        texture_seed: cfg.seed,
        shape: match shape {
            ShapeArg::Ellipse => ShapeFamily::Ellipse,
            ShapeArg::Polygon => ShapeFamily::Polygon,
            ShapeArg::Mixed => ShapeFamily::Mixed,
        },
        camouflage: *camouflage,
        start_index: *start_index,
        format: match format {
            FormatArg::Pnm => FileFormat::Pnm,
            FormatArg::Png => FileFormat::Png,
        },
    };
    let m = generate_dataset(&spec, out)?;
    println!("wrote {} pairs to {}", m.entries.len(), out.display());
    Ok(())
}

fn run_train(
    c: &Common,
    data: &Path,
    out: &Path,
    iterations: Option<u64>,
    resume: Option<&Path>,
    f32: bool,
) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => checkpoint::load(p)?,
        None => Trainer::new(c.train_config()?)?,
    };
    if let Some(n) = iterations {
        trainer.config.iterations = n;
    }
    let precision = if f32 { Precision::F32 } else { Precision::F64 };
    let dataset = Dataset::load(data)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), trainer.config.to_text())?;
    let header = train::summary(&trainer, &dataset);
    print!("{header}");
    let initial_hash = trainer.backbone_hash();
    println!("backbone sha256 {initial_hash}");

    let log_path = out.join("train.log");
    // On resume, keep only the log lines the checkpoint has already covered.
    let mut log_text = String::new();
    if resume.is_some() {
        for line in fs::read_to_string(&log_path).unwrap_or_default().lines() {
            let iter = line.split_whitespace().nth(1).and_then(|n| n.parse::<u64>().ok());
            if iter.is_some_and(|i| i <= trainer.iteration) {
                log_text.push_str(line);
                log_text.push('\n');
            }
        }
    }
    let every = trainer.config.checkpoint_every;
    let until = trainer.config.iterations;
    let result = trainer.run_until(&dataset, until, |t, e| {
        let line = e.to_line();
        println!("{line}");
        log_text.push_str(&line);
        log_text.push('\n');
        if every > 0 && t.iteration % every == 0 {
            fs::write(&log_path, &log_text)?;
            checkpoint::save(t, &out.join(format!("checkpoint-{:06}.bin", t.iteration)), precision)?;
        }
        Ok(())
    });
    fs::write(&log_path, &log_text)?;
    result?;
    checkpoint::save(&trainer, &out.join("checkpoint.bin"), precision)?;

    let (report, _) = evaluate_samples(&trainer.model, &trainer.store, &dataset, Ablation::default())?;
    let final_hash = trainer.backbone_hash();
    let summary = json!({
        "iterations": trainer.iteration,
        "train_iou": report.iou,
        "train_dice": report.dice,
        "train_mae": report.mae,
        "train_f_w": report.f_w,
        "backbone_sha256": final_hash,
        "backbone_unchanged": final_hash == initial_hash,
        "params": count_params(&trainer.store),
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("final train iou {:?}", report.iou);
    if final_hash != initial_hash {
        return Err(Error::InvalidArgument("frozen backbone changed during training".into()));
    }
    Ok(())
}

fn run_eval(c: &Common, cmd: &Command) -> Result<()> {
    let Command::Eval { checkpoint: ckpt, data, pred, gt, out } = cmd else { unreachable!() };
    let report = match (ckpt, data, pred, gt) {
        (Some(ckpt), Some(data), _, _) => {
            let t = checkpoint::load(ckpt)?;
            let dataset = Dataset::load(data)?;
            let disable = c.ablation();
            let out = out.clone().unwrap_or_else(|| PathBuf::from("eval"));
            let preds_dir = out.join("predictions");
            let (_, preds) = evaluate_samples(&t.model, &t.store, &dataset, disable)?;
            train::write_predictions(&preds_dir, &dataset, &preds)?;
            let report = evaluate_dataset(&preds_dir, &data.join("masks"))?;
            write_report(&out, "report", &report)?;
            report
        }
        (None, None, Some(pred), Some(gt)) => {
            let report = evaluate_dataset(pred, gt)?;
            if let Some(out) = out {
                write_report(out, "report", &report)?;
            }
            report
        }
        _ => {
            return Err(Error::InvalidArgument(
                "eval needs either --checkpoint with --data, or --pred with --gt".into(),
            ))
        }
    };
    print!("{}", report.to_text());
    check_unmatched(&report, c.allow_missing)
}

fn run_infer(c: &Common, ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let t = checkpoint::load(ckpt)?;
    let img = read_image(image)?;
    let res = train::infer_image(&t.model, &t.store, &img.to_rgb_tensor(), c.ablation())?;
    write_image(out, &Image::from_gray_tensor(&res.confidence)?)?;
    let meta = json!({
        "source": image.display().to_string(),
        "width": img.width,
        "height": img.height,
        "padding": res.padding,
        "ablation": c.ablation().label(),
    });
    let mut meta_path = out.as_os_str().to_owned();
    meta_path.push(".json");
    fs::write(PathBuf::from(meta_path), serde_json::to_string_pretty(&meta)?)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run_gradcheck(c: &Common) -> Result<bool> {
    let results = gradsuite::run_suite(c.seed.unwrap_or(1))?;
    let mut ok = true;
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {:<28} max rel err {:.3e} ({:.2}s)", r.name, r.max_rel_err, r.seconds);
        ok &= r.passed();
    }
    Ok(ok)
}

fn run_params(c: &Common, json_out: bool) -> Result<()> {
    let cfg = c.train_config()?;
    let (_, store) = Model::build(cfg.model, cfg.seed)?;
    let report = count_params(&store);
    if json_out {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let c = &cli.common;
    match &cli.command {
        cmd @ Command::GenData { .. } => gen_data(c, cmd)?,
        Command::Train { data, out, iterations, resume, f32 } => {
            run_train(c, data, out, *iterations, resume.as_deref(), *f32)?
        }
        cmd @ Command::Eval { .. } => run_eval(c, cmd)?,
        Command::Infer { checkpoint, image, out } => run_infer(c, checkpoint, image, out)?,
        Command::Gradcheck => return run_gradcheck(c),
        Command::Params { json } => run_params(c, *json)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

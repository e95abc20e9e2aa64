use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use srlane::geometry::Lane;
use srlane::image::RgbImage;
use srlane::metrics::{culane_f1, tusimple_accuracy, CulaneConfig, TusimpleConfig};
use srlane::pipeline::ablation::{run_ablation, Variant, MATRIX};
use srlane::pipeline::checkpoint::load_checkpoint;
use srlane::pipeline::gradcheck::run_suite;
use srlane::pipeline::infer::{infer, render_overlay};
use srlane::pipeline::stats::{count_checkpoint, count_parameters, head_macs, measured_head_macs};
use srlane::pipeline::train::{train, TrainOptions, LAST};
use srlane::pipeline::{Model, ModelConfig};
use srlane::synthdata::{
    generate_dataset, read_dataset, read_records, write_records, Record, SceneSpec, ANNOTATIONS, TRAIN_SEED_BASE,
};

#[derive(Parser)]
#[command(
    name = "srlane",
    version,
    about = "Two-stage lane detection on synthetic road scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (PNG images plus annotations.jsonl).
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = TRAIN_SEED_BASE)]
        seed: u64,
        /// Maximum bend as a fraction of image width at the horizon.
        #[arg(long)]
        curvature_max: Option<f64>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Train a model; writes checkpoints and train_log.jsonl under --out.
    Train {
        /// TOML model configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Validation dataset for periodic F1 (see val_every) and score-threshold calibration.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Continue from <out>/last.
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 100)]
        print_every: usize,
    },
    /// Detect lanes in one image or a whole dataset.
    Infer {
        /// Checkpoint directory (the `last` subdirectory is used if present).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        image: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory: predictions.jsonl and overlay PNGs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        score_thr: Option<f64>,
        #[arg(long)]
        no_overlays: bool,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Prediction file (JSON lines, as written by `infer`).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth dataset directory or annotation file.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::Culane)]
        metric: Metric,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        iou_thr: Option<f64>,
    },
    /// Train variants and compare them on a test set.
    Ablate {
        /// Variant(s) to train; `matrix` runs the four sampling/attention combinations.
        #[arg(long, required = true, num_args = 1..)]
        variant: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Held-out scenes used to calibrate each variant's score threshold.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also train the full model as the reference row.
        #[arg(long)]
        with_full: bool,
        #[arg(long, default_value_t = 500)]
        print_every: usize,
    },
    /// Run finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Parameter counts per module and head MACs.
    Params {
        /// Checkpoint directory; a fresh model from --config otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also compare analytic and measured head MACs at these proposal counts.
        #[arg(long, num_args = 1..)]
        proposals: Vec<usize>,
    },
    /// Print the default configuration as TOML.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Culane,
    Tusimple,
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ModelConfig::default()),
    }
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    let last = path.join(LAST);
    if last.is_dir() {
        last
    } else {
        path.to_path_buf()
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let dir = checkpoint_dir(path);
    let (model, _) = load_checkpoint(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok(model)
}

fn annotations(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(ANNOTATIONS)
    } else {
        path.to_path_buf()
    }
}

fn gen_data(
    count: usize,
    out: &Path,
    seed: u64,
    curvature: Option<f64>,
    width: Option<usize>,
    height: Option<usize>,
) -> Result<()> {
    let mut spec = SceneSpec::default();
    if let Some(c) = curvature {
        spec.curvature_max = c;
    }
    if let Some(w) = width {
        spec.width = w;
    }
    if let Some(h) = height {
        spec.height = h;
    }
    spec.validate()?;
    generate_dataset(count, seed, &spec, out)?;
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn run_infer(
    checkpoint: &Path,
    image: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
    score_thr: Option<f64>,
    overlays: bool,
) -> Result<()> {
    let mut model = load_model(checkpoint)?;
    if let Some(t) = score_thr {
        model.config.score_thr = t;
    }
    let inputs: Vec<(String, PathBuf)> = match (image, data) {
        (Some(p), _) => vec![(p.to_string_lossy().into_owned(), p.to_path_buf())],
        (None, Some(d)) => read_records(&annotations(d))?
            .into_iter()
            .map(|r| {
                let path = d.join(&r.raw_file);
                (r.raw_file, path)
            })
            .collect(),
        (None, None) => bail!("one of --image or --data is required"),
    };
    fs::create_dir_all(out)?;
    let mut records = Vec::with_capacity(inputs.len());
    for (i, (raw, path)) in inputs.iter().enumerate() {
        let img = RgbImage::load_png(path).with_context(|| format!("reading image {}", path.display()))?;
        if (img.width, img.height) != (model.config.input_w, model.config.input_h) {
            bail!(
                "{} is {}x{}, model expects {}x{}",
                path.display(),
                img.width,
                img.height,
                model.config.input_w,
                model.config.input_h
            );
        }
        let lanes = infer(&model, &img)?;
        if overlays {
            render_overlay(&img, &lanes, &out.join(format!("overlay_{i:06}.png")))?;
        }
        let mut rec = Record::from_lanes(raw.clone(), &lanes, img.height as f64);
        if lanes.is_empty() {
            rec.h_samples = (0..model.config.rows)
                .map(|r| srlane::geometry::row_y(r, model.config.rows, img.height as f64))
                .collect();
        }
        rec.width = Some(img.width);
        rec.height = Some(img.height);
        records.push(rec);
    }
    let pred = out.join("predictions.jsonl");
    write_records(&records, &pred)?;
    let lanes: usize = records.iter().map(|r| r.lanes.len()).sum();
    println!("{} images, {lanes} lanes -> {}", records.len(), pred.display());
    Ok(())
}

fn run_eval(pred: &Path, gt: &Path, metric: Metric, report: Option<&Path>, iou_thr: Option<f64>) -> Result<()> {
    let preds = read_records(pred)?;
    let gts = read_records(&annotations(gt))?;
    if preds.len() != gts.len() {
        bail!(
            "{} prediction records for {} ground-truth records",
            preds.len(),
            gts.len()
        );
    }
    let mut pl = Vec::with_capacity(preds.len());
    let mut gl = Vec::with_capacity(gts.len());
    let mut tags = Vec::with_capacity(gts.len());
    let (mut w, mut h) = (None, None);
    for (p, g) in preds.iter().zip(&gts) {
        if p.raw_file != g.raw_file {
            bail!("record order differs: {} vs {}", p.raw_file, g.raw_file);
        }
        let height = g.height.or(p.height).context("ground truth lacks image height")?;
        w = w.or(g.width.or(p.width));
        h = Some(height);
        let rows = g.h_samples.len();
        let to = |r: &Record| -> Result<Vec<Lane>> { Ok(r.to_lanes(rows, height as f64)?) };
        pl.push(to(p)?);
        gl.push(to(g)?);
        tags.push(g.tags.clone());
    }
    let result = match metric {
        Metric::Culane => {
            let mut cfg = CulaneConfig::for_image(
                w.context("ground truth lacks image width")?,
                h.context("ground truth is empty")?,
            );
            if let Some(t) = iou_thr {
                cfg.iou_thr = t;
            }
            culane_f1(&pl, &gl, &cfg, Some(&tags))?
        }
        Metric::Tusimple => tusimple_accuracy(&pl, &gl, &TusimpleConfig::default(), Some(&tags))?,
    };
    print!("{}", result.table());
    if let Some(r) = report {
        fs::write(r, result.to_json()?).with_context(|| format!("writing {}", r.display()))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_ablate(
    names: &[String],
    config: Option<&Path>,
    data: &Path,
    val: Option<&Path>,
    test: &Path,
    out: &Path,
    with_full: bool,
    print_every: usize,
) -> Result<()> {
    let base = load_config(config)?;
    let mut variants = Vec::new();
    for n in names {
        if n == "matrix" {
            variants.extend(MATRIX);
        } else {
            variants.push(Variant::parse(n)?);
        }
    }
    if with_full && !variants.contains(&Variant::Full) {
        variants.push(Variant::Full);
    }
    let scenes = read_dataset(data)?;
    let val = val.map(read_dataset).transpose()?;
    let test = read_dataset(test)?;
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        resume: false,
        print_every,
    };
    let report = run_ablation(&base, &variants, &scenes, val.as_deref(), &test, &opts)?;
    print!("{}", report.table());
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out.join("ablation.txt"), report.table())?;
    Ok(())
}

fn run_gradcheck(suite: &str) -> Result<()> {
    let reports = run_suite(suite)?;
    let mut ok = true;
    for r in &reports {
        println!(
            "{:<8} {} instances, {} coords checked, {} at kinks, max rel err {:.2e} (tol {:.0e}): {}",
            r.name,
            r.instances,
            r.checked,
            r.skipped,
            r.max_rel_err,
            r.tol,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        ok &= r.passed();
    }
    if !ok {
        bail!("gradient check failed");
    }
    Ok(())
}

fn run_params(checkpoint: Option<&Path>, config: Option<&Path>, proposals: &[usize]) -> Result<()> {
    let (table, cfg) = match checkpoint {
        Some(p) => {
            let dir = checkpoint_dir(p);
            let t = count_checkpoint(&dir)?;
            (t, load_model(p)?.config)
        }
        None => {
            let cfg = load_config(config)?;
            (count_parameters(&Model::new(cfg.clone())?), cfg)
        }
    };
    print!("{}", table.table());
    for &l in proposals {
        let measured = measured_head_macs(&cfg, l)?;
        println!("L={l}: analytic {} measured {}", head_macs(&cfg, l), measured);
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            count,
            out,
            seed,
            curvature_max,
            width,
            height,
        } => gen_data(count, &out, seed, curvature_max, width, height),
        Command::Train {
            config,
            data,
            out,
            val,
            resume,
            print_every,
        } => {
            let cfg = load_config(config.as_deref())?;
            let scenes = read_dataset(&data).with_context(|| format!("reading dataset {}", data.display()))?;
            let val = val.map(|v| read_dataset(&v)).transpose()?;
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                resume,
                print_every,
            };
            let outcome = train(&cfg, &scenes, val.as_deref(), &opts)?;
            let last = outcome.log.last().map_or(f64::NAN, |r| r.total);
            println!(
                "trained {} iterations, final loss {last:.4}; checkpoint in {}",
                outcome.log.len(),
                out.join(LAST).display()
            );
            Ok(())
        }
        Command::Infer {
            checkpoint,
            image,
            data,
            out,
            score_thr,
            no_overlays,
        } => run_infer(
            &checkpoint,
            image.as_deref(),
            data.as_deref(),
            &out,
            score_thr,
            !no_overlays,
        ),
        Command::Eval {
            pred,
            gt,
            metric,
            report,
            iou_thr,
        } => run_eval(&pred, &gt, metric, report.as_deref(), iou_thr),
        Command::Ablate {
            variant,
            config,
            data,
            val,
            test,
            out,
            with_full,
            print_every,
        } => run_ablate(
            &variant,
            config.as_deref(),
            &data,
            val.as_deref(),
            &test,
            &out,
            with_full,
            print_every,
        ),
        Command::Gradcheck { suite } => run_gradcheck(&suite),
        Command::Params {
            checkpoint,
            config,
            proposals,
        } => run_params(checkpoint.as_deref(), config.as_deref(), &proposals),
        Command::Config => {
            print!("{}", ModelConfig::default().to_toml()?);
            Ok(())
        }
    }
}

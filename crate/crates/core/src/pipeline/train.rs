//! Mini-batch training with AdamW, flip augmentation and an append-only log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use srlane_numerics::optim::AdamW;
use srlane_numerics::{Array, Tape};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::ModelConfig;
use super::infer::{infer, postprocess, predict_all};
use super::model::{Model, ProposalSource};
use crate::assign::{total_loss, LossReport};
use crate::error::{Error, Result};
use crate::geometry::Polyline;
use crate::metrics::{culane_f1, CulaneConfig};
use crate::synthdata::AnnotatedScene;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST: &str = "last";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub cls: f64,
    pub reg: f64,
    pub dir: f64,
    pub attn: f64,
    pub total: f64,
    pub lr: f64,
    pub elapsed_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_f1: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoints (`<out>/last`) and the log go here when set.
    pub out_dir: Option<PathBuf>,
    /// Continue from `<out>/last` if it exists.
    pub resume: bool,
    /// Print a progress line every this many iterations (0 = silent).
    pub print_every: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<TrainRecord>,
}

/// One training sample: image tensor and ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Array<f32>,
    pub gts: Vec<Polyline>,
}

impl Sample {
    pub fn from_scene(scene: &AnnotatedScene) -> Self {
        Self {
            image: scene.image.to_tensor(),
            gts: scene.gts.clone(),
        }
    }

    /// Mirror image and lanes about the vertical axis.
    pub fn flipped(&self) -> Self {
        let s = self.image.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.image.data();
        let mut out = vec![0.0f32; src.len()];
        for ch in 0..c {
            for y in 0..h {
                let row = (ch * h + y) * w;
                for x in 0..w {
                    out[row + x] = src[row + w - 1 - x];
                }
            }
        }
        Self {
            image: Array::new(s, out).expect("same shape"),
            gts: self.gts.iter().map(|p| p.flipped(w as f64)).collect(),
        }
    }
}

/// Loss values and gradients of one sample.
pub fn sample_gradients(model: &Model, sample: &Sample) -> Result<(LossReport, Vec<Array<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let p = model.params.bind(&mut tape);
    let x = tape.constant(sample.image.clone());
    let f = model.forward(&mut tape, &p, x, ProposalSource::Config)?;
    let (l, _) = model.losses(&mut tape, &f, &sample.gts)?;
    let parts = [l.cls, l.reg, l.dir, l.attn].map(|v| tape.item(v) as f64);
    let report = total_loss(parts, &model.config.loss_weights())?;
    let total = tape.item(l.total) as f64;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "total",
            value: total,
        });
    }
    let grads = tape.gradients(l.total, &p.vars)?;
    Ok((report, grads))
}

/// Averaged losses and gradients over a batch.
pub fn batch_gradients(model: &Model, batch: &[Sample]) -> Result<(LossReport, Vec<Array<f32>>)> {
    let mut acc: Option<Vec<Array<f32>>> = None;
    let mut sums = [0.0; 5];
    for s in batch {
        let (r, g) = sample_gradients(model, s)?;
        for (a, v) in sums.iter_mut().zip([r.cls, r.reg, r.dir, r.attn, r.total]) {
            *a += v;
        }
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&g) {
                    for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                        *p += *q;
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = acc.ok_or_else(|| Error::Config("empty batch".into()))?;
    let inv = 1.0 / n as f32;
    for g in &mut grads {
        for v in g.data_mut() {
            *v *= inv;
        }
    }
    let [cls, reg, dir, attn, total] = sums.map(|v| v / n);
    Ok((
        LossReport {
            cls,
            reg,
            dir,
            attn,
            total,
        },
        grads,
    ))
}

/// F1 of the model's thresholded predictions on annotated scenes.
pub fn evaluate_f1(model: &Model, scenes: &[AnnotatedScene]) -> Result<f64> {
    let c = &model.config;
    let preds = scenes
        .iter()
        .map(|s| infer(model, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let gts = scenes.iter().map(|s| s.lanes(c.rows)).collect::<Result<Vec<_>>>()?;
    let cfg = CulaneConfig::for_image(c.input_w, c.input_h);
    Ok(culane_f1(&preds, &gts, &cfg, None)?.f1())
}

/// Score thresholds tried by [`calibrate_threshold`].
pub const THRESHOLD_CANDIDATES: [f64; 9] = [0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5];

/// Validation F1 for each candidate threshold, then the best one (lowest
/// threshold wins ties). Inference runs once per scene.
pub fn calibrate_threshold(model: &Model, scenes: &[AnnotatedScene]) -> Result<(f64, Vec<(f64, f64)>)> {
    let c = &model.config;
    let all = scenes
        .iter()
        .map(|s| predict_all(model, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let gts = scenes.iter().map(|s| s.lanes(c.rows)).collect::<Result<Vec<_>>>()?;
    let cfg = CulaneConfig::for_image(c.input_w, c.input_h);
    let mut sweep = Vec::with_capacity(THRESHOLD_CANDIDATES.len());
    for thr in THRESHOLD_CANDIDATES {
        let preds = all
            .iter()
            .map(|lanes| postprocess(lanes, thr, c))
            .collect::<Result<Vec<_>>>()?;
        sweep.push((thr, culane_f1(&preds, &gts, &cfg, None)?.f1()));
    }
    let best = sweep.iter().fold(
        (c.score_thr, f64::NEG_INFINITY),
        |b, &(t, f)| if f > b.1 { (t, f) } else { b },
    );
    Ok((best.0, sweep))
}

fn append_log(path: &Path, rec: &TrainRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    serde_json::to_writer(&mut f, rec)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Train from scratch (or resume) on `scenes`. With `val` set and
/// `val_every > 0`, validation F1 is logged periodically.
pub fn train(
    config: &ModelConfig,
    scenes: &[AnnotatedScene],
    val: Option<&[AnnotatedScene]>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for s in scenes {
        if (s.image.width, s.image.height) != (config.input_w, config.input_h) {
            return Err(Error::Config(format!(
                "scene {} is {}x{}, model expects {}x{}",
                s.seed, s.image.width, s.image.height, config.input_w, config.input_h
            )));
        }
    }
    let samples: Vec<Sample> = scenes.iter().map(Sample::from_scene).collect();
    let last_dir = opts.out_dir.as_ref().map(|d| d.join(LAST));
    let (mut model, state) = match &last_dir {
        Some(d) if opts.resume && d.join(srlane_numerics::checkpoint::MANIFEST).exists() => {
            let (m, s) = load_checkpoint(d)?;
            (m, s)
        }
        _ => (Model::new(config.clone())?, None),
    };
    if opts.resume && state.is_some() {
        // Schedule and budget come from the new config; weights from disk.
        model.config.iterations = config.iterations;
    }
    let mut opt = AdamW::new(model.config.optimizer(), &model.params.values);
    if let Some(s) = state {
        opt.step = s.step;
        opt.first = s.first;
        opt.second = s.second;
    }
    let log_path = opts.out_dir.as_ref().map(|d| d.join(LOG_FILE));
    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d)?;
        fs::write(d.join("config.toml"), model.config.to_toml()?)?;
        if !opts.resume {
            let _ = fs::remove_file(d.join(LOG_FILE));
        }
    }
    let start_iter = opt.step as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(start_iter as u64));
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    let clock = Instant::now();
    for iter in start_iter + 1..=config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            let s = &samples[order.pop().expect("refilled")];
            batch.push(if config.flip_aug && rng.gen_bool(0.5) {
                s.flipped()
            } else {
                s.clone()
            });
        }
        let (report, grads) = match batch_gradients(&model, &batch) {
            Ok(v) => v,
            Err(e) => return Err(abort(e, iter)),
        };
        opt.step(&mut model.params.values, &grads, &model.params.names)
            .map_err(|e| abort(e.into(), iter))?;
        let val_f1 = match val {
            Some(v) if config.val_every > 0 && iter % config.val_every == 0 => Some(evaluate_f1(&model, v)?),
            _ => None,
        };
        let rec = TrainRecord {
            iter,
            cls: report.cls,
            reg: report.reg,
            dir: report.dir,
            attn: report.attn,
            total: report.total,
            lr: opt.config.lr_at(opt.step),
            elapsed_s: clock.elapsed().as_secs_f64(),
            val_f1,
        };
        if let Some(p) = &log_path {
            append_log(p, &rec)?;
        }
        if opts.print_every > 0 && (iter % opts.print_every == 0 || iter == config.iterations) {
            eprintln!(
                "iter {:>5}  total {:.4}  cls {:.4}  reg {:.4}  dir {:.4}  attn {:.4}  lr {:.2e}  {:.0}s{}",
                iter,
                rec.total,
                rec.cls,
                rec.reg,
                rec.dir,
                rec.attn,
                rec.lr,
                rec.elapsed_s,
                rec.val_f1.map_or(String::new(), |f| format!("  val F1 {f:.4}"))
            );
        }
        log.push(rec);
        if let Some(d) = &last_dir {
            if config.checkpoint_every > 0 && iter % config.checkpoint_every == 0 {
                save_checkpoint(d, &model, Some(&opt))?;
            }
        }
    }
    if let (Some(v), true) = (val, model.config.calibrate_thr) {
        let (thr, sweep) = calibrate_threshold(&model, v)?;
        if opts.print_every > 0 {
            let s: Vec<String> = sweep.iter().map(|(t, f)| format!("{t:.2}:{f:.3}")).collect();
            eprintln!("score threshold {thr:.2} (val F1 {})", s.join(" "));
        }
        model.config.score_thr = thr;
        if let Some(d) = &opts.out_dir {
            fs::write(d.join("config.toml"), model.config.to_toml()?)?;
        }
    }
    if let Some(d) = &last_dir {
        save_checkpoint(d, &model, Some(&opt))?;
    }
    Ok(TrainOutcome { model, log })
}

fn abort(e: Error, iter: usize) -> Error {
    Error::Config(format!(
        "training aborted at iteration {iter} (last checkpoint kept): {e}"
    ))
}

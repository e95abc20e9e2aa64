//! Finite-difference gradient suites over the sampler, attention block,
//! heads and losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use srlane_numerics::gradcheck::{grad_check, GradCheckOptions};
use srlane_numerics::{Array, Tape, Var};

use crate::assign::{
    attention_loss, direction_loss, endpoint_loss_row, focal_loss, liou_loss_row, AttentionTarget, FOCAL_ALPHA,
    FOCAL_GAMMA,
};
use crate::error::{Error, Result};
use crate::geometry::Lane;
use crate::refine::{classify, lsam_forward, regress, LsamParams, Mlp};
use crate::sampler::{sample_at, Sampling};
use crate::sketch::DirectionMap;

pub const INSTANCES: usize = 20;
pub const SUITES: [&str; 4] = ["sampler", "lsam", "heads", "losses"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tol
    }
}

fn options(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        max_coords: Some(24),
        seed,
        ..Default::default()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Array::from_f64(shape, &v).expect("shape matches data")
}

/// Reduce `x` to a scalar with fixed random weights so every output entry
/// contributes a distinct gradient.
fn project<T: srlane_numerics::Real>(tape: &mut Tape<T>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = uniform(&mut rng, &shape, -1.0, 1.0);
    let r = tape.constant(Array::from_f64(&shape, r.data())?);
    let p = tape.mul(x, r)?;
    Ok(tape.sum(p))
}

fn run<F>(name: &str, build: F) -> Result<SuiteReport>
where
    F: Fn(u64) -> Result<(Vec<Array<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>)>,
{
    let mut report = SuiteReport {
        name: name.to_string(),
        instances: INSTANCES,
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        tol: GradCheckOptions::default().tol,
    };
    for seed in 0..INSTANCES as u64 {
        let (points, f) = build(seed)?;
        let r = grad_check(|t, v| f(t, v).map_err(to_numerics), &points, &options(seed))?;
        report.checked += r.checked;
        report.skipped += r.skipped.len();
        report.max_rel_err = report.max_rel_err.max(r.max_rel_err);
    }
    Ok(report)
}

fn to_numerics(e: Error) -> srlane_numerics::NumericsError {
    match e {
        Error::Numerics(n) => n,
        other => srlane_numerics::NumericsError::Invalid {
            op: "gradcheck",
            msg: other.to_string(),
        },
    }
}

/// Gradients of adaptive sampling with respect to the scale embedding,
/// pyramid features and point coordinates.
pub fn sampler_suite() -> Result<SuiteReport> {
    const STRIDES: [f64; 3] = [8.0, 16.0, 32.0];
    let (w, h, d, np, lanes) = (64.0, 64.0, 3, 4, 2);
    run("sampler", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points: Vec<Array<f64>> = STRIDES
            .iter()
            .map(|s| uniform(&mut rng, &[d, (h / s) as usize, (w / s) as usize], -1.0, 1.0))
            .collect();
        points.push(uniform(&mut rng, &[np], 2.5, 5.5));
        points.push(uniform(&mut rng, &[np * lanes], 4.0, w - 4.0));
        points.push(uniform(&mut rng, &[np * lanes], 4.0, h - 4.0));
        let f = move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let levels: Vec<(f64, Var)> = STRIDES.iter().copied().zip(v[..3].iter().copied()).collect();
            let out = sample_at(t, &levels, v[4], v[5], v[3], Sampling::Adaptive)?;
            project(t, out, seed)
        };
        Ok((points, Box::new(f) as Box<_>))
    })
}

fn mlp_shapes(input: usize, hidden: usize, out: usize) -> [Vec<usize>; 4] {
    [vec![input, hidden], vec![hidden], vec![hidden, out], vec![out]]
}

fn mlp_at(v: &[Var]) -> Mlp {
    Mlp {
        w1: v[0],
        b1: v[1],
        w2: v[2],
        b2: v[3],
    }
}

/// Gradients of the attention block with respect to its input and every
/// parameter, through both the output features and the attention logits.
pub fn lsam_suite() -> Result<SuiteReport> {
    let (l, c, g) = (5, 12, 3);
    let cg = c / g;
    run("lsam", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shapes = vec![vec![l, c], vec![c], vec![c]];
        for _ in 0..g {
            shapes.push(vec![c, cg]);
        }
        for _ in 0..2 * g {
            shapes.push(vec![cg, cg]);
        }
        shapes.extend([vec![c], vec![c]]);
        shapes.extend(mlp_shapes(c, 2 * c, c));
        let points: Vec<Array<f64>> = shapes.iter().map(|s| uniform(&mut rng, s, -1.0, 1.0)).collect();
        let f = move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let base = 3 + 3 * g;
            let p = LsamParams {
                ln1_gain: v[1],
                ln1_bias: v[2],
                query: v[3..3 + g].to_vec(),
                key: v[3 + g..3 + 2 * g].to_vec(),
                value: v[3 + 2 * g..base].to_vec(),
                ln2_gain: v[base],
                ln2_bias: v[base + 1],
                ffn: mlp_at(&v[base + 2..base + 6]),
            };
            let out = lsam_forward(t, v[0], &p)?;
            let a = project(t, out.features, seed)?;
            let logits = t.concat(&out.logits, 0)?;
            let b = project(t, logits, seed + 1)?;
            Ok(t.add(a, b)?)
        };
        Ok((points, Box::new(f) as Box<_>))
    })
}

/// Gradients of the classification and regression heads with respect to
/// features and weights.
pub fn heads_suite() -> Result<SuiteReport> {
    let (l, c, hid, n, height) = (4, 8, 6, 7, 32.0);
    run("heads", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shapes = vec![vec![l, c]];
        shapes.extend(mlp_shapes(c, hid, 1));
        shapes.extend(mlp_shapes(c, hid, n + 2));
        let points: Vec<Array<f64>> = shapes.iter().map(|s| uniform(&mut rng, s, -1.0, 1.0)).collect();
        let base = uniform(&mut rng, &[l, n], 0.0, 64.0);
        let f = move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let (_, scores) = classify(t, v[0], &mlp_at(&v[1..5]))?;
            let b = t.constant(base.clone());
            let out = regress(t, v[0], &mlp_at(&v[5..9]), b, height, 2.0)?;
            let a = project(t, scores, seed)?;
            let x = project(t, out.xs, seed + 1)?;
            let e = project(t, out.ends, seed + 2)?;
            let s = t.add(a, x)?;
            Ok(t.add(s, e)?)
        };
        Ok((points, Box::new(f) as Box<_>))
    })
}

/// Gradients of the focal, LineIoU plus endpoint, direction and attention
/// losses with respect to their predictions.
pub fn losses_suite() -> Result<SuiteReport> {
    let (l, n, height, width, groups) = (6, 9, 40.0, 80.0, 3);
    run("losses", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<bool> = (0..l).map(|i| i % 3 == 0 || rng.gen_bool(0.3)).collect();
        let gt_xs: Vec<f64> = (0..n).map(|_| rng.gen_range(10.0..70.0)).collect();
        let gt = Lane::new(gt_xs, rng.gen_range(0.0..10.0), rng.gen_range(25.0..height), height)?;
        let (dr, dc) = (3, 4);
        let angles: Vec<f64> = (0..dr * dc).map(|_| rng.gen_range(10.0..170.0)).collect();
        let mask: Vec<bool> = (0..dr * dc).map(|_| rng.gen_bool(0.7)).collect();
        let mut map = DirectionMap::new(dr, dc, angles, width, height)?;
        map.mask = Some(mask);
        let targets = (0..l)
            .map(|i| labels[i].then(|| (0..groups).map(|_| rng.gen_range(0..l)).collect()))
            .collect();
        let target = AttentionTarget {
            proposals: l,
            groups,
            targets,
        };
        let scores = uniform(&mut rng, &[l], 0.05, 0.95);
        // Predictions sit away from |Δx| = 0 where the LineIoU loss has a kink.
        let mut pred = uniform(&mut rng, &[l, n], 10.0, 70.0);
        for (k, v) in pred.data_mut().iter_mut().enumerate() {
            let t = gt.xs[k % n];
            if (*v - t).abs() < 0.1 {
                *v = t + 0.5;
            }
        }
        let ends = uniform(&mut rng, &[l, 2], 1.0, height - 1.0);
        let dir = uniform(&mut rng, &[dr, dc], 0.0, 1.0);
        let mut points = vec![scores, pred, ends, dir];
        for _ in 0..groups {
            points.push(uniform(&mut rng, &[l, l], -2.0, 2.0));
        }
        let f = move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let cls = focal_loss(t, v[0], &labels, FOCAL_ALPHA, FOCAL_GAMMA)?;
            let mut acc = cls;
            for i in (0..l).filter(|&i| labels[i]) {
                let r = liou_loss_row(t, v[1], i, &gt, 1.5)?;
                let e = endpoint_loss_row(t, v[2], i, &gt)?;
                acc = t.add(acc, r)?;
                acc = t.add(acc, e)?;
            }
            let d = direction_loss(t, v[3], &map)?;
            let a = attention_loss(t, &v[4..], &target)?;
            acc = t.add(acc, d)?;
            Ok(t.add(acc, a)?)
        };
        Ok((points, Box::new(f) as Box<_>))
    })
}

pub fn run_suite(name: &str) -> Result<Vec<SuiteReport>> {
    match name {
        "sampler" => Ok(vec![sampler_suite()?]),
        "lsam" => Ok(vec![lsam_suite()?]),
        "heads" => Ok(vec![heads_suite()?]),
        "losses" => Ok(vec![losses_suite()?]),
        "all" => SUITES.iter().map(|s| run_suite(s).map(|mut v| v.remove(0))).collect(),
        other => Err(Error::Config(format!(
            "unknown gradient suite {other:?} (expected sampler, lsam, heads, losses or all)"
        ))),
    }
}

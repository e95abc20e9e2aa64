//! Central-difference gradient checking in 64-bit.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Array, Result, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (sampled).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(param, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates where a kink sits inside the difference stencil.
    pub skipped: Vec<(usize, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tol
    }
}

/// Compare the tape's gradient of the scalar built by `f` against central
/// differences at `points`.
///
/// A coordinate whose one-sided slopes disagree by at least half the
/// analytic/numeric discrepancy is treated as straddling a non-differentiable
/// point and reported in `skipped` instead of counting as a failure.
pub fn grad_check<F>(f: F, points: &[Array<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Array<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.param(p.clone())).collect();
        let root = f(&mut tape, &vars)?;
        tape.check_finite()?;
        Ok(tape.item(root))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    tape.check_finite()?;
    let f0 = tape.item(root);
    let analytic = tape.gradients(root, &vars)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: Vec::new(),
        tol: opts.tol,
    };
    let mut work: Vec<Array<f64>> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        let n = point.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for ci in coords {
            let x0 = point.data()[ci];
            work[pi].data_mut()[ci] = x0 + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[ci] = x0 - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[ci] = x0;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[ci];
            let diff = (a - numeric).abs();
            let rel = diff / a.abs().max(numeric.abs()).max(opts.floor);
            if rel >= opts.tol {
                let one_sided_gap = ((fp - f0) / h - (f0 - fm) / h).abs();
                if one_sided_gap >= 0.5 * diff {
                    report.skipped.push((pi, ci));
                    continue;
                }
            }
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}
